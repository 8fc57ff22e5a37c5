//! Context encoding: a learned codebook aggregates residuals of every
//! spatial feature against K codewords, and the aggregate drives a
//! channel-wise attention scale and a class-presence predictor.

use crate::autodiff::{fused, ReduceKind, Record, Var, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::nn::{fully_connected, Builder, Linear};
use crate::params::{ParamId, Scope};
use crate::tensor::{Real, Tensor};

pub const DEFAULT_CODEWORDS: usize = 32;

/// Codewords (K × C) and smoothing factors (K). One codebook is shared by
/// both encoding layers of an hourglass module.
#[derive(Clone, Debug)]
pub struct EncodingCodebook {
    pub codewords: ParamId,
    pub smoothing: ParamId,
    pub k: usize,
    pub channels: usize,
}

impl EncodingCodebook {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, k: usize, channels: usize) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        Self {
            codewords: b.uniform(&format!("{name}.codewords"), &[k, channels], -bound, bound),
            smoothing: b.uniform(&format!("{name}.smoothing"), &[k], 0.0, 1.0),
            k,
            channels,
        }
    }
}

/// Per-layer heads. Not shared between layers.
#[derive(Clone, Debug)]
pub struct EncodingHeads {
    /// C → C, followed by a sigmoid.
    pub attention: Linear,
    /// C → number of classes, followed by a sigmoid.
    pub presence: Linear,
}

impl EncodingHeads {
    pub fn new<T: Real>(b: &mut Builder<T>, name: &str, channels: usize, num_classes: usize) -> Self {
        Self {
            attention: Linear::new(b, &format!("{name}.attention"), channels, channels),
            presence: Linear::new(b, &format!("{name}.presence"), channels, num_classes),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncodedSemantics {
    /// Residual encoders, B × K × C.
    pub residuals: Var,
    /// `Σ_k relu(residuals[:, k, :])`, B × C.
    pub aggregate: Var,
}

pub fn encode<T: Real>(rec: &mut Record<T>, features: Var, codewords: Var, smoothing: Var) -> Result<EncodedSemantics> {
    let residuals = rec.encode(features, codewords, smoothing)?;
    let positive = rec.relu(residuals);
    let aggregate = rec.reduce(ReduceKind::Sum, positive, &[1], false)?;
    Ok(EncodedSemantics { residuals, aggregate })
}

/// `features ⊗ sigmoid(aggregate · W + b)`, per sample and channel.
/// Returns the scaled features and the scale factors (B × C).
pub fn attention_scale<T: Real>(
    rec: &mut Record<T>,
    features: Var,
    aggregate: Var,
    weight: Var,
    bias: Var,
) -> Result<(Var, Var)> {
    let fs = rec.shape(features).to_vec();
    let logits = fully_connected(rec, aggregate, weight, bias)?;
    let gamma = rec.sigmoid(logits);
    if fs.len() != 4 || rec.shape(gamma) != [fs[0], fs[1]] {
        return Err(Error::shape("attention_scale", &fs, rec.shape(gamma)));
    }
    let g4 = rec.reshape(gamma, &[fs[0], fs[1], 1, 1])?;
    Ok((rec.mul(features, g4)?, gamma))
}

/// Class-presence probabilities, B × D.
pub fn presence_logits<T: Real>(rec: &mut Record<T>, aggregate: Var, weight: Var, bias: Var) -> Result<Var> {
    let logits = fully_connected(rec, aggregate, weight, bias)?;
    Ok(rec.sigmoid(logits))
}

/// Multi-hot presence targets (B × D) from row-major label maps split into
/// `batch` equal samples. Ignored pixels do not count.
pub fn presence_targets<T: Real>(labels: &[u8], batch: usize, num_classes: usize) -> Result<Tensor<T>> {
    if batch == 0 || labels.is_empty() || labels.len() % batch != 0 {
        return Err(Error::Data(format!(
            "{} labels do not split into {batch} samples",
            labels.len()
        )));
    }
    let per = labels.len() / batch;
    let mut out = vec![T::zero(); batch * num_classes];
    for (b, sample) in labels.chunks(per).enumerate() {
        for &l in sample {
            if l == IGNORE_INDEX {
                continue;
            }
            if l as usize >= num_classes {
                return Err(Error::LabelOutOfRange { label: l, num_classes });
            }
            out[b * num_classes + l as usize] = T::one();
        }
    }
    Tensor::new(&[batch, num_classes], out)
}

/// Soft-assignment weights (B × N × K) for inspection; rows sum to one.
pub fn soft_assignment_weights<T: Real>(features: &Tensor<T>, codewords: &Tensor<T>, smoothing: &Tensor<T>) -> Result<Vec<f64>> {
    let s = features.shape();
    if s.len() != 4 || codewords.shape() != [smoothing.len(), s[1]] {
        return Err(Error::shape("soft_assignment_weights", s, codewords.shape()));
    }
    let (batch, c, n, k) = (s[0], s[1], s[2] * s[3], smoothing.len());
    let x = features.to_f64_vec();
    let (d, sm) = (codewords.to_f64_vec(), smoothing.to_f64_vec());
    let mut out = vec![0f64; batch * n * k];
    for b in 0..batch {
        fused::assignment_weights(
            &x[b * c * n..(b + 1) * c * n],
            n,
            c,
            &d,
            &sm,
            &mut out[b * n * k..(b + 1) * n * k],
        );
    }
    Ok(out)
}

/// Output of one encoding layer.
#[derive(Clone, Copy, Debug)]
pub struct EncodingOutput {
    pub features: Var,
    pub gamma: Var,
    pub presence: Var,
}

/// One encoding layer: encode against the shared codebook, rescale
/// channels, predict class presence. Both heads read the aggregate divided
/// by the number of positions, so their inputs do not grow with the
/// featuremap area.
pub fn encoding_layer<T: Real>(
    s: &mut Scope<T>,
    features: Var,
    codebook: &EncodingCodebook,
    heads: &EncodingHeads,
) -> Result<EncodingOutput> {
    let (d, sm) = (s.param(codebook.codewords), s.param(codebook.smoothing));
    let enc = encode(s.rec, features, d, sm)?;
    let fs = s.rec.shape(features);
    let positions = (fs[2] * fs[3]) as f64;
    let aggregate = s.rec.scale(enc.aggregate, 1.0 / positions);
    let (aw, ab) = (s.param(heads.attention.weight), s.param(heads.attention.bias));
    let (scaled, gamma) = attention_scale(s.rec, features, aggregate, aw, ab)?;
    let (pw, pb) = (s.param(heads.presence.weight), s.param(heads.presence.bias));
    let presence = presence_logits(s.rec, aggregate, pw, pb)?;
    Ok(EncodingOutput {
        features: scaled,
        gamma,
        presence,
    })
}
