//! Self-check suites run by `cxhg verify`: finite-difference gradient
//! checks of every layer op and the tiny network, and oracle comparisons
//! for the residual encoding plus file-format round trips.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Record, ReduceKind, Var};
use crate::data::{LabelMap, RasterData, RasterImage};
use crate::encoding::soft_assignment_weights;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::hourglass::{ForwardOptions, HourglassConfig, Model};
use crate::params::{Mode, ParamId, Scope};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::train::Checkpoint;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-6;
pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const ORACLE_INSTANCES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    GradCheck,
    Oracle,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gradcheck" => Ok(Suite::GradCheck),
            "oracle" => Ok(Suite::Oracle),
            "all" => Ok(Suite::All),
            _ => Err(format!("unknown suite {s:?} (expected gradcheck, oracle or all)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    /// Set when the check could not run at all.
    pub failure: Option<String>,
}

impl CheckResult {
    fn measured(name: impl Into<String>, result: Result<f64>, tolerance: f64) -> Self {
        let name = name.into();
        match result {
            Ok(max_error) => Self {
                name,
                max_error,
                tolerance,
                failure: None,
            },
            Err(e) => Self {
                name,
                max_error: f64::NAN,
                tolerance,
                failure: Some(e.to_string()),
            },
        }
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }

    /// One line per check: status, name, max error and tolerance.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed() { "pass" } else { "FAIL" };
            match &c.failure {
                Some(msg) => writeln!(out, "{status} {} error: {msg}", c.name).unwrap(),
                None => writeln!(out, "{status} {} max_error={:.3e} tol={:.0e}", c.name, c.max_error, c.tolerance).unwrap(),
            }
        }
        let failed = self.failures().len();
        writeln!(out, "{} checks, {failed} failed", self.checks.len()).unwrap();
        out
    }
}

pub fn run(suite: Suite) -> VerifyReport {
    let mut checks = Vec::new();
    if matches!(suite, Suite::GradCheck | Suite::All) {
        checks.extend(gradcheck_suite());
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        checks.extend(oracle_suite());
    }
    VerifyReport { checks }
}

fn random(shape: &[usize], rng: &mut SplitMix64, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).expect("shape matches")
}

/// Values at least `gap` away from zero, so kinks stay out of the
/// finite-difference stencil.
fn away_from_zero(shape: &[usize], rng: &mut SplitMix64, gap: f64) -> Tensor<f64> {
    let mut t = random(shape, rng, -1.0, 1.0);
    for v in t.values_mut() {
        *v = v.signum() * (v.abs() + gap);
    }
    t
}

/// `Σ out ⊙ w` with fixed random weights so every output entry gets a
/// different upstream gradient.
fn probe(rec: &mut Record<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = rec.shape(out).to_vec();
    let w = random(&shape, &mut SplitMix64::new(seed), -1.0, 1.0);
    let w = rec.constant(w);
    let prod = rec.mul(out, w)?;
    Ok(rec.sum_all(prod))
}

type Check = (&'static str, Box<dyn Fn(&mut SplitMix64) -> Result<f64>>);

fn op_checks() -> Vec<Check> {
    let check = |f: fn(&mut Record<f64>, &[Var]) -> Result<Var>, inputs: Vec<Tensor<f64>>| grad_check(f, &inputs, GRAD_EPS);
    vec![
        (
            "add_broadcast",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.add(v[0], v[1])?;
                        probe(rec, y, 1)
                    },
                    vec![random(&[2, 3, 4], r, -1.0, 1.0), random(&[3, 1], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "sub",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.sub(v[0], v[1])?;
                        probe(rec, y, 2)
                    },
                    vec![random(&[3, 4], r, -1.0, 1.0), random(&[4], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "mul",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.mul(v[0], v[1])?;
                        probe(rec, y, 3)
                    },
                    vec![random(&[2, 5], r, -1.0, 1.0), random(&[2, 1], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "relu",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.relu(v[0]);
                        probe(rec, y, 4)
                    },
                    vec![away_from_zero(&[4, 4], r, 0.01)],
                )
            }),
        ),
        (
            "sigmoid",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.sigmoid(v[0]);
                        probe(rec, y, 5)
                    },
                    vec![random(&[10], r, -4.0, 4.0)],
                )
            }),
        ),
        (
            "exp",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.exp(v[0]);
                        probe(rec, y, 6)
                    },
                    vec![random(&[10], r, -2.0, 2.0)],
                )
            }),
        ),
        (
            "square_and_scale",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.square(v[0]);
                        let y = rec.scale(y, -1.5);
                        probe(rec, y, 7)
                    },
                    vec![random(&[3, 3], r, -2.0, 2.0)],
                )
            }),
        ),
        (
            "matmul",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.matmul(v[0], v[1])?;
                        probe(rec, y, 8)
                    },
                    vec![random(&[3, 5], r, -1.0, 1.0), random(&[5, 4], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "reduce_sum_mean_reshape",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let a = rec.reduce(ReduceKind::Sum, v[0], &[1], true)?;
                        let b = rec.reduce(ReduceKind::Mean, v[0], &[0, 2], false)?;
                        let b = rec.reshape(b, &[3, 1])?;
                        let a = probe(rec, a, 9)?;
                        let b = probe(rec, b, 10)?;
                        rec.add(a, b)
                    },
                    vec![random(&[2, 3, 4], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "conv2d_3x3_pad1",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                        probe(rec, y, 11)
                    },
                    vec![
                        random(&[2, 3, 5, 5], r, -1.0, 1.0),
                        random(&[4, 3, 3, 3], r, -1.0, 1.0),
                        random(&[4], r, -1.0, 1.0),
                    ],
                )
            }),
        ),
        (
            "conv2d_stride2_no_bias",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.conv2d(v[0], v[1], None, 2, 1)?;
                        probe(rec, y, 12)
                    },
                    vec![random(&[1, 2, 7, 7], r, -1.0, 1.0), random(&[3, 2, 3, 3], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "max_pool2d",
            Box::new(move |r| {
                // a shuffled grid keeps every window maximum unique
                let mut vals: Vec<f64> = (0..2 * 2 * 6 * 6).map(|i| i as f64 * 0.1).collect();
                r.shuffle(&mut vals);
                check(
                    |rec, v| {
                        let y = rec.max_pool2d(v[0])?;
                        probe(rec, y, 13)
                    },
                    vec![Tensor::new(&[2, 2, 6, 6], vals)?],
                )
            }),
        ),
        (
            "bilinear_upsample",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.bilinear_upsample(v[0], 2)?;
                        probe(rec, y, 14)
                    },
                    vec![random(&[1, 2, 3, 4], r, -1.0, 1.0)],
                )
            }),
        ),
        (
            "batch_norm_train",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let (y, _) = rec.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
                        probe(rec, y, 15)
                    },
                    vec![
                        random(&[3, 2, 2, 3], r, -1.0, 1.0),
                        random(&[2], r, 0.5, 1.5),
                        random(&[2], r, -0.5, 0.5),
                    ],
                )
            }),
        ),
        (
            "batch_norm_eval",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.batch_norm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[0.5, 2.0], 1e-5)?;
                        probe(rec, y, 16)
                    },
                    vec![
                        random(&[2, 2, 3, 3], r, -1.0, 1.0),
                        random(&[2], r, 0.5, 1.5),
                        random(&[2], r, -0.5, 0.5),
                    ],
                )
            }),
        ),
        (
            "encode",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let y = rec.encode(v[0], v[1], v[2])?;
                        probe(rec, y, 17)
                    },
                    vec![
                        random(&[2, 3, 2, 3], r, -1.0, 1.0),
                        random(&[4, 3], r, -1.0, 1.0),
                        random(&[4], r, 0.5, 2.0),
                    ],
                )
            }),
        ),
        (
            "cross_entropy_with_ignore",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let labels = [0, 2, 255, 1, 1, 0, 2, 255, 0, 1, 2, 2];
                        rec.cross_entropy(v[0], &labels)
                    },
                    vec![random(&[2, 3, 2, 3], r, -2.0, 2.0)],
                )
            }),
        ),
        (
            "binary_cross_entropy",
            Box::new(move |r| {
                check(
                    |rec, v| {
                        let p = rec.sigmoid(v[0]);
                        rec.binary_cross_entropy(p, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
                    },
                    vec![random(&[2, 3], r, -3.0, 3.0)],
                )
            }),
        ),
    ]
}

/// Gradient check of the tiny end-to-end network in training mode, with
/// respect to the input image and every parameter.
pub fn tiny_network_check(seed: u64) -> Result<f64> {
    let cfg = HourglassConfig::tiny();
    let model = Model::<f64>::build(&cfg, seed)?;
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut rng = SplitMix64::derive(seed, &[1]);
    let (b, s) = (2, cfg.patch_size);
    let mut inputs = vec![random(&[b, cfg.input_channels, s, s], &mut rng, 0.0, 1.0)];
    inputs.extend(ids.iter().map(|&id| model.params.get(id).tensor.clone()));
    let labels: Vec<u8> = (0..b * s * s).map(|_| rng.below(cfg.num_classes as u64) as u8).collect();
    let targets = crate::encoding::presence_targets::<f64>(&labels, b, cfg.num_classes)?.into_values();
    grad_check(
        |rec, v| {
            let mut sc = Scope::new(rec, &model.params, &model.norms, Mode::Train);
            for (k, &id) in ids.iter().enumerate() {
                sc.bind(id, v[k + 1]);
            }
            let out = model.network.forward(&mut sc, v[0], ForwardOptions::train())?;
            let mut loss = sc.rec.cross_entropy(out.fused_logits, &labels)?;
            for &p in &out.se_probs {
                let bce = sc.rec.binary_cross_entropy(p, &targets)?;
                loss = sc.rec.add(loss, bce)?;
            }
            Ok(loss)
        },
        &inputs,
        GRAD_EPS,
    )
}

pub fn gradcheck_suite() -> Vec<CheckResult> {
    let mut rng = SplitMix64::new(0x9e37);
    let mut out: Vec<CheckResult> = op_checks()
        .into_iter()
        .map(|(name, f)| CheckResult::measured(format!("gradcheck/{name}"), f(&mut rng), GRAD_TOLERANCE))
        .collect();
    out.push(CheckResult::measured("gradcheck/tiny_network", tiny_network_check(19), GRAD_TOLERANCE));
    out
}

/// Residual encoding of features (B×C×H×W) against codewords (K×C) and
/// smoothing (K), returning B×K×C. Pluggable so the oracle comparison can
/// be exercised against a deliberately broken implementation.
pub type EncodeFn = fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>;

/// The library encode, run through the autodiff record.
pub fn record_encode(x: &Tensor<f64>, codewords: &Tensor<f64>, smoothing: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut rec = Record::new();
    let (xv, dv, sv) = (
        rec.constant(x.clone()),
        rec.constant(codewords.clone()),
        rec.constant(smoothing.clone()),
    );
    let e = rec.encode(xv, dv, sv)?;
    Ok(rec.value(e).clone())
}

/// Straight scalar loops over positions, codewords and channels.
fn scalar_encode(x: &Tensor<f64>, d: &Tensor<f64>, s: &Tensor<f64>) -> Vec<f64> {
    let sh = x.shape();
    let (b, c, n, k) = (sh[0], sh[1], sh[2] * sh[3], s.len());
    let (x, d, s) = (x.values(), d.values(), s.values());
    let mut out = vec![0.0; b * k * c];
    for bi in 0..b {
        let at = |ch: usize, i: usize| x[(bi * c + ch) * n + i];
        for i in 0..n {
            let mut logits = vec![0.0; k];
            for kk in 0..k {
                let mut dist = 0.0;
                for ch in 0..c {
                    dist += (at(ch, i) - d[kk * c + ch]).powi(2);
                }
                logits[kk] = -s[kk] * dist;
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for kk in 0..k {
                let w = (logits[kk] - m).exp() / z;
                for ch in 0..c {
                    out[(bi * k + kk) * c + ch] += w * (at(ch, i) - d[kk * c + ch]);
                }
            }
        }
    }
    out
}

fn encode_oracle_error(encode: EncodeFn, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0f64;
    for t in 0..instances {
        let mut rng = SplitMix64::derive(seed, &[t as u64]);
        let (b, c, k) = (rng.range_inclusive(1, 2), rng.range_inclusive(1, 8), rng.range_inclusive(1, 8));
        let (h, w) = (rng.range_inclusive(1, 4), rng.range_inclusive(1, 4));
        let x = random(&[b, c, h, w], &mut rng, -1.0, 1.0);
        let d = random(&[k, c], &mut rng, -1.0, 1.0);
        let s = random(&[k], &mut rng, 0.1, 3.0);
        let got = encode(&x, &d, &s)?;
        let want = scalar_encode(&x, &d, &s);
        let scale = want.iter().fold(0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        let diff = got
            .values()
            .iter()
            .zip(&want)
            .fold(if got.len() == want.len() { 0f64 } else { f64::INFINITY }, |m, (a, o)| m.max((a - o).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}

fn assignment_sum_error(instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0f64;
    for t in 0..instances {
        let mut rng = SplitMix64::derive(seed, &[t as u64]);
        let (c, k, n) = (rng.range_inclusive(1, 8), rng.range_inclusive(1, 8), rng.range_inclusive(1, 16));
        let x = random(&[1, c, 1, n], &mut rng, -3.0, 3.0);
        let d = random(&[k, c], &mut rng, -1.0, 1.0);
        let s = random(&[k], &mut rng, 0.0, 5.0);
        let w = soft_assignment_weights(&x, &d, &s)?;
        for row in w.chunks(k) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

/// Largest byte difference count across raster, label and checkpoint
/// serialize / parse / serialize cycles (0 when all are byte-exact).
fn format_round_trips(seed: u64) -> Result<f64> {
    let p = Path::new("<memory>");
    let mut rng = SplitMix64::new(seed);
    let mut mismatches = 0usize;
    let mut cycle = |a: Vec<u8>, b: Vec<u8>| {
        mismatches += (a != b) as usize;
    };
    let img = RasterImage::new(5, 3, 2, RasterData::U8((0..30).map(|_| rng.next_u64() as u8).collect()))?;
    cycle(img.to_bytes(), RasterImage::from_bytes(&img.to_bytes(), p)?.to_bytes());
    let img = RasterImage::new(3, 4, 3, RasterData::F32((0..36).map(|_| rng.normal() as f32).collect()))?;
    cycle(img.to_bytes(), RasterImage::from_bytes(&img.to_bytes(), p)?.to_bytes());
    let labels = LabelMap::new(4, 4, (0..16).map(|_| rng.below(7) as u8).collect())?;
    cycle(labels.to_bytes(), LabelMap::from_bytes(&labels.to_bytes(), p)?.to_bytes());
    let model = Model::<f32>::build(&HourglassConfig::tiny(), seed)?;
    let ck = Checkpoint::capture(&model, None, 3, true);
    cycle(ck.to_bytes(), Checkpoint::from_bytes(&ck.to_bytes(), p)?.to_bytes());
    Ok(mismatches as f64)
}

pub fn oracle_suite_with(encode: EncodeFn) -> Vec<CheckResult> {
    vec![
        CheckResult::measured(
            format!("oracle/encode_vs_scalar_loops ({ORACLE_INSTANCES} instances)"),
            encode_oracle_error(encode, ORACLE_INSTANCES, 0xe1),
            ORACLE_TOLERANCE,
        ),
        CheckResult::measured(
            "oracle/assignment_weights_sum_to_one",
            assignment_sum_error(ORACLE_INSTANCES, 0xe2),
            ORACLE_TOLERANCE,
        ),
        CheckResult::measured("oracle/format_round_trips", format_round_trips(0xe3), 0.0),
    ]
}

pub fn oracle_suite() -> Vec<CheckResult> {
    oracle_suite_with(record_encode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sign_flipped(x: &Tensor<f64>, d: &Tensor<f64>, s: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut e = record_encode(x, d, s)?;
        e.values_mut().iter_mut().for_each(|v| *v = -*v);
        Ok(e)
    }

    #[test]
    fn oracle_suite_passes_and_catches_a_flipped_residual() {
        let good = oracle_suite();
        assert!(good.iter().all(CheckResult::passed), "{good:?}");
        let bad = oracle_suite_with(sign_flipped);
        assert!(!bad[0].passed());
        assert!(bad[1].passed() && bad[2].passed());
    }

    #[test]
    fn every_op_check_passes() {
        let mut rng = SplitMix64::new(1);
        for (name, f) in op_checks() {
            let err = f(&mut rng).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(err < GRAD_TOLERANCE, "{name}: {err}");
        }
    }

    #[test]
    fn report_text_lists_failures() {
        let report = VerifyReport {
            checks: vec![
                CheckResult::measured("a", Ok(1e-9), 1e-6),
                CheckResult::measured("b", Ok(1e-3), 1e-6),
                CheckResult::measured("c", Err(crate::Error::Config("x".into())), 1e-6),
            ],
        };
        assert!(!report.passed());
        assert_eq!(report.failures().len(), 2);
        let text = report.to_text();
        assert!(text.starts_with("pass a max_error=1.000e-9"));
        assert!(text.contains("FAIL c error"));
        assert!(text.ends_with("3 checks, 2 failed\n"));
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("nope".parse::<Suite>().is_err());
    }
}
