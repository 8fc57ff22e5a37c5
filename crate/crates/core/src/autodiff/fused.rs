//! Operations with hand-derived backward passes: residual encoding and the
//! two training losses.

use super::{Op, Record, Sink, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IGNORE_INDEX: u8 = 255;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
pub(crate) struct EncodeSaved {
    x: Var,
    codewords: Var,
    smoothing: Var,
    /// Soft-assignment weights, `B x N x K`.
    weights: Vec<f64>,
}

/// Soft-assignment weights `w[i][k]` for one sample. `x` is channel-major
/// (`C x N`), `d` is `K x C`. Uses per-position max subtraction.
pub(crate) fn assignment_weights(x: &[f64], n: usize, c: usize, d: &[f64], s: &[f64], out: &mut [f64]) {
    let k = s.len();
    let mut logits = vec![0f64; k];
    for i in 0..n {
        for kk in 0..k {
            let mut norm = 0.0;
            for ch in 0..c {
                let r = x[ch * n + i] - d[kk * c + ch];
                norm += r * r;
            }
            logits[kk] = -s[kk] * norm;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (kk, l) in logits.iter().enumerate() {
            let e = (l - max).exp();
            out[i * k + kk] = e;
            total += e;
        }
        out[i * k..(i + 1) * k].iter_mut().for_each(|w| *w /= total);
    }
}

fn encode_dims(x: &[usize], d: &[usize], s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if x.len() != 4 || d.len() != 2 || d[1] != x[1] || s != [d[0]] {
        return Err(Error::shape("encode", x, d));
    }
    Ok((x[0], x[1], x[2] * x[3], d[0]))
}

impl EncodeSaved {
    pub(crate) fn backward<T: Real>(&self, _out: &Tensor<T>, g: &[T], sink: &mut Sink<'_, T>) {
        let tx = sink.value(self.x);
        let (batch, c, n, k) = encode_dims(
            tx.shape(),
            sink.value(self.codewords).shape(),
            sink.value(self.smoothing).shape(),
        )
        .expect("validated in forward");
        let x = tx.to_f64_vec();
        let d = sink.value(self.codewords).to_f64_vec();
        let s = sink.value(self.smoothing).to_f64_vec();
        let mut gx = vec![0f64; x.len()];
        let mut gd = vec![0f64; d.len()];
        let mut gs = vec![0f64; k];
        let mut r = vec![0f64; k * c];
        let mut dr = vec![0f64; k * c];
        let mut gw = vec![0f64; k];
        for b in 0..batch {
            let xb = &x[b * c * n..(b + 1) * c * n];
            let gb: Vec<f64> = g[b * k * c..(b + 1) * k * c].iter().map(|v| v.as_f64()).collect();
            let wb = &self.weights[b * n * k..(b + 1) * n * k];
            for i in 0..n {
                let w = &wb[i * k..(i + 1) * k];
                for kk in 0..k {
                    let mut gwk = 0.0;
                    for ch in 0..c {
                        let rv = xb[ch * n + i] - d[kk * c + ch];
                        r[kk * c + ch] = rv;
                        gwk += gb[kk * c + ch] * rv;
                    }
                    gw[kk] = gwk;
                }
                let mean_g: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
                for kk in 0..k {
                    let h = w[kk] * (gw[kk] - mean_g);
                    let mut norm = 0.0;
                    for ch in 0..c {
                        let rv = r[kk * c + ch];
                        norm += rv * rv;
                        dr[kk * c + ch] = w[kk] * gb[kk * c + ch] - 2.0 * s[kk] * h * rv;
                    }
                    gs[kk] -= h * norm;
                }
                for kk in 0..k {
                    for ch in 0..c {
                        let v = dr[kk * c + ch];
                        gx[b * c * n + ch * n + i] += v;
                        gd[kk * c + ch] -= v;
                    }
                }
            }
        }
        let cast = |v: Vec<f64>| v.into_iter().map(T::from_f64).collect::<Vec<T>>();
        sink.send(self.x, cast(gx));
        sink.send(self.codewords, cast(gd));
        sink.send(self.smoothing, cast(gs));
    }
}

#[derive(Debug)]
pub(crate) struct CrossEntropySaved {
    logits: Var,
    probs: Vec<f64>,
    labels: Vec<u8>,
    count: usize,
}

impl CrossEntropySaved {
    pub(crate) fn backward<T: Real>(&self, g: &[T], sink: &mut Sink<'_, T>) {
        if !sink.wants(self.logits) {
            return;
        }
        let s = sink.value(self.logits).shape().to_vec();
        let (batch, classes, hw) = (s[0], s[1], s[2] * s[3]);
        let mut gl = vec![T::zero(); self.probs.len()];
        if self.count > 0 {
            let scale = g[0].as_f64() / self.count as f64;
            for b in 0..batch {
                for p in 0..hw {
                    let label = self.labels[b * hw + p];
                    if label == IGNORE_INDEX {
                        continue;
                    }
                    for d in 0..classes {
                        let idx = (b * classes + d) * hw + p;
                        let onehot = if d == label as usize { 1.0 } else { 0.0 };
                        gl[idx] = T::from_f64(scale * (self.probs[idx] - onehot));
                    }
                }
            }
        }
        sink.send(self.logits, gl);
    }
}

#[derive(Debug)]
pub(crate) struct BceSaved {
    probs: Var,
    targets: Vec<f64>,
}

impl BceSaved {
    pub(crate) fn backward<T: Real>(&self, g: &[T], sink: &mut Sink<'_, T>) {
        let p = sink.value(self.probs).to_f64_vec();
        let n = p.len() as f64;
        let scale = g[0].as_f64() / n;
        let gp = p
            .iter()
            .zip(&self.targets)
            .map(|(&p, &t)| {
                if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                    return T::zero();
                }
                T::from_f64(scale * (-t / p + (1.0 - t) / (1.0 - p)))
            })
            .collect();
        sink.send(self.probs, gp);
    }
}

impl<T: Real> Record<T> {
    /// Residual encoding of `x` (B x C x H x W) against codewords (K x C)
    /// and smoothing factors (K). Returns the residual encoders, B x K x C.
    pub fn encode(&mut self, x: Var, codewords: Var, smoothing: Var) -> Result<Var> {
        let (batch, c, n, k) = encode_dims(
            self.value(x).shape(),
            self.value(codewords).shape(),
            self.value(smoothing).shape(),
        )?;
        let xs = self.value(x).to_f64_vec();
        let d = self.value(codewords).to_f64_vec();
        let s = self.value(smoothing).to_f64_vec();
        let mut weights = vec![0f64; batch * n * k];
        let mut out = vec![T::zero(); batch * k * c];
        for b in 0..batch {
            let xb = &xs[b * c * n..(b + 1) * c * n];
            let wb = &mut weights[b * n * k..(b + 1) * n * k];
            assignment_weights(xb, n, c, &d, &s, wb);
            let mut acc = vec![0f64; k * c];
            for i in 0..n {
                for kk in 0..k {
                    let w = wb[i * k + kk];
                    for ch in 0..c {
                        acc[kk * c + ch] += w * (xb[ch * n + i] - d[kk * c + ch]);
                    }
                }
            }
            for (o, a) in out[b * k * c..(b + 1) * k * c].iter_mut().zip(acc) {
                *o = T::from_f64(a);
            }
        }
        let value = Tensor::new(&[batch, k, c], out)?;
        let op = Op::Encode(EncodeSaved {
            x,
            codewords,
            smoothing,
            weights,
        });
        Ok(self.push(value, op, &[x, codewords, smoothing]))
    }

    /// Mean per-pixel softmax cross entropy over non-ignored pixels.
    /// `labels` is `B x H x W` row-major; returns 0 when every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8]) -> Result<Var> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 4 || labels.len() != s[0] * s[2] * s[3] {
            return Err(Error::shape("cross_entropy", s, &[labels.len()]));
        }
        let (batch, classes, hw) = (s[0], s[1], s[2] * s[3]);
        let zs = tl.values();
        let mut probs = vec![0f64; zs.len()];
        let mut total = 0f64;
        let mut count = 0usize;
        for b in 0..batch {
            for p in 0..hw {
                let label = labels[b * hw + p];
                if label == IGNORE_INDEX {
                    continue;
                }
                if label as usize >= classes {
                    return Err(Error::LabelOutOfRange {
                        label,
                        num_classes: classes,
                    });
                }
                let idx = |d: usize| (b * classes + d) * hw + p;
                let max = (0..classes).map(|d| zs[idx(d)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for d in 0..classes {
                    let e = (zs[idx(d)].as_f64() - max).exp();
                    probs[idx(d)] = e;
                    sum += e;
                }
                for d in 0..classes {
                    probs[idx(d)] /= sum;
                }
                total += sum.ln() + max - zs[idx(label as usize)].as_f64();
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy(CrossEntropySaved {
            logits,
            probs,
            labels: labels.to_vec(),
            count,
        });
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), op, &[logits]))
    }

    /// Mean binary cross entropy with probabilities clamped to
    /// `[1e-7, 1 - 1e-7]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let tp = self.value(probs);
        if tp.len() != targets.len() {
            return Err(Error::shape("binary_cross_entropy", tp.shape(), &[targets.len()]));
        }
        let total: f64 = tp
            .values()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.as_f64().clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let loss = total / targets.len() as f64;
        let op = Op::Bce(BceSaved {
            probs,
            targets: targets.to_vec(),
        });
        Ok(self.push(Tensor::scalar(T::from_f64(loss)), op, &[probs]))
    }
}
