use super::*;
use crate::gradcheck::grad_check;
use crate::params::ParamId;
use proptest::prelude::*;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn small(num_modules: usize, depth: usize, patch: usize) -> HourglassConfig {
    HourglassConfig {
        num_modules,
        depth,
        widths: vec![4; depth],
        stem_width: 4,
        num_classes: 3,
        input_channels: 2,
        patch_size: patch,
        encoding_resolution_divisor: 1 << depth.min(3),
        codewords: 3,
        stem_stride: 1,
    }
}

fn run(model: &Model<f64>, image: &Tensor<f64>, opts: ForwardOptions) -> (Record<f64>, NetworkOutput) {
    let mut rec = Record::new();
    let x = rec.constant(image.clone());
    let (out, _) = model.forward(&mut rec, x, opts).unwrap();
    (rec, out)
}

fn zero_params(model: &mut Model<f64>, prefix: &str) {
    for (_, p) in model.params.iter_mut() {
        if p.name.starts_with(prefix) {
            p.tensor.values_mut().fill(0.0);
        }
    }
}

#[test]
fn config_validation() {
    assert!(HourglassConfig::default().validate().is_ok());
    assert!(HourglassConfig::tiny().validate().is_ok());
    let bad = [
        HourglassConfig {
            widths: vec![4],
            ..HourglassConfig::tiny()
        },
        HourglassConfig {
            patch_size: 24,
            ..HourglassConfig::tiny()
        },
        HourglassConfig {
            patch_size: 2,
            ..HourglassConfig::tiny()
        },
        HourglassConfig {
            encoding_resolution_divisor: 8,
            ..HourglassConfig::tiny()
        },
        HourglassConfig {
            widths: vec![4, 5],
            ..HourglassConfig::tiny()
        },
        HourglassConfig {
            num_modules: 0,
            ..HourglassConfig::tiny()
        },
    ];
    for cfg in bad {
        assert!(matches!(Model::<f64>::build(&cfg, 0), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn shape_contract_one_module() {
    let cfg = HourglassConfig {
        num_modules: 1,
        depth: 4,
        widths: vec![16, 16, 32, 32],
        stem_width: 16,
        num_classes: 6,
        input_channels: 5,
        patch_size: 64,
        encoding_resolution_divisor: 8,
        codewords: 8,
        stem_stride: 1,
    };
    let model = Model::<f32>::build(&cfg, 1).unwrap();
    let mut rec = Record::new();
    let x = rec.constant(random(&[2, 5, 64, 64], 2).cast());
    let (out, updates) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
    assert_eq!(out.per_module_logits.len(), 1);
    assert_eq!(rec.shape(out.per_module_logits[0]), &[2, 6, 64, 64]);
    assert_eq!(out.se_probs.len(), 2);
    assert!(out.se_probs.iter().all(|&p| rec.shape(p) == [2, 6]));
    assert_eq!(rec.value(out.fused_logits).values(), rec.value(out.per_module_logits[0]).values());
    assert!(!updates.is_empty());

    let wrong = rec.constant(Tensor::zeros(&[2, 5, 32, 32]));
    assert!(model.forward(&mut rec, wrong, ForwardOptions::train()).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = small(2, 2, 16);
    let a = Model::<f32>::build(&cfg, 7).unwrap();
    let b = Model::<f32>::build(&cfg, 7).unwrap();
    let c = Model::<f32>::build(&cfg, 8).unwrap();
    let mut differs = false;
    for ((_, pa), ((_, pb), (_, pc))) in a.params.iter().zip(b.params.iter().zip(c.params.iter())) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.tensor.values(), pb.tensor.values());
        differs |= pa.tensor.values() != pc.tensor.values();
    }
    assert!(differs);
}

#[test]
fn codebook_and_heads_are_encoding_group() {
    let model = Model::<f32>::build(&small(2, 3, 16), 0).unwrap();
    for (_, p) in model.params.iter() {
        let ctx = p.name.contains(".codebook.") || p.name.contains(".context_");
        assert_eq!(p.group == ParamGroup::Encoding, ctx, "{}", p.name);
    }
    // the last module has no remap convolutions
    assert!(model.params.find("hg0.remap_logits.weight").is_some());
    assert!(model.params.find("hg1.remap_logits.weight").is_none());
}

#[test]
fn zeroed_module_passes_input_through() {
    let cfg = small(2, 2, 16);
    let mut model = Model::<f64>::build(&cfg, 3).unwrap();
    zero_params(&mut model, "hg0.");
    let mut rec = Record::new();
    let mut s = Scope::new(&mut rec, &model.params, &model.norms, Mode::Train);
    let x = s.rec.constant(random(&[2, 4, 16, 16], 4));
    let mut sink = NetworkOutput {
        per_module_logits: vec![],
        fused_logits: x,
        se_probs: vec![],
        gammas: vec![],
    };
    let (next, logits) = model
        .network
        .module_forward(&mut s, &model.network.modules[0], x, ForwardOptions::train(), &mut sink)
        .unwrap();
    assert!(s.rec.value(logits).values().iter().all(|&v| v == 0.0));
    assert_eq!(s.rec.value(next).values(), s.rec.value(x).values());
    assert_eq!(sink.se_probs.len(), 2);
}

#[test]
fn spatial_extent_preserved() {
    for patch in [32, 64, 128] {
        let cfg = small(1, 4, patch);
        let model = Model::<f32>::build(&cfg, 5).unwrap();
        let mut rec = Record::new();
        let x = rec.constant(random(&[1, 2, patch, patch], 6).cast());
        let (out, _) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
        assert_eq!(rec.shape(out.fused_logits), &[1, 3, patch, patch]);
    }
}

#[test]
fn stem_stride_upsamples_predictions() {
    let cfg = HourglassConfig {
        stem_stride: 2,
        encoding_resolution_divisor: 4,
        ..small(2, 2, 32)
    };
    let model = Model::<f32>::build(&cfg, 5).unwrap();
    let mut rec = Record::new();
    let x = rec.constant(random(&[1, 2, 32, 32], 6).cast());
    let (out, _) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
    assert!(out.per_module_logits.iter().all(|&l| rec.shape(l) == [1, 3, 32, 32]));
}

#[test]
fn saturated_attention_matches_bypass() {
    for level_divisor in [2, 4] {
        let cfg = HourglassConfig {
            encoding_resolution_divisor: level_divisor,
            ..small(2, 2, 16)
        };
        let mut model = Model::<f64>::build(&cfg, 9).unwrap();
        for (_, p) in model.params.iter_mut() {
            if p.name.contains(".attention.bias") {
                p.tensor.values_mut().fill(20.0);
            } else if p.name.contains(".attention.weight") {
                p.tensor.values_mut().iter_mut().for_each(|v| *v *= 1e-3);
            }
        }
        let image = random(&[2, 2, 16, 16], 10);
        let (ra, a) = run(&model, &image, ForwardOptions::train());
        let (rb, b) = run(&model, &image, ForwardOptions::train().with_encoding(false));
        assert!(b.se_probs.is_empty());
        for (la, lb) in a.per_module_logits.iter().zip(&b.per_module_logits) {
            for (x, y) in ra.value(*la).values().iter().zip(rb.value(*lb).values()) {
                assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }
}

#[test]
fn fused_is_exact_sum_of_module_predictions() {
    for m in 1..=4 {
        let model = Model::<f32>::build(&small(m, 2, 16), m as u64).unwrap();
        let mut rec = Record::new();
        let x = rec.constant(random(&[2, 2, 16, 16], 11).cast());
        let (out, _) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
        assert_eq!(out.per_module_logits.len(), m);
        assert_eq!(out.se_probs.len(), 2 * m);
        let fused = rec.value(out.fused_logits).values();
        for i in 0..fused.len() {
            let mut sum = rec.value(out.per_module_logits[0]).values()[i];
            for l in &out.per_module_logits[1..] {
                sum += rec.value(*l).values()[i];
            }
            assert_eq!(fused[i].to_bits(), sum.to_bits());
        }
    }
}

#[test]
fn zeroed_second_head_leaves_first_prediction() {
    let mut model = Model::<f64>::build(&small(2, 2, 16), 12).unwrap();
    zero_params(&mut model, "hg1.head.");
    let (rec, out) = run(&model, &random(&[2, 2, 16, 16], 13), ForwardOptions::train());
    assert_eq!(
        rec.value(out.fused_logits).values(),
        rec.value(out.per_module_logits[0]).values()
    );
}

#[test]
fn eval_is_deterministic_and_read_only() {
    let mut model = Model::<f32>::build(&small(2, 2, 16), 14).unwrap();
    let image: Tensor<f32> = random(&[2, 2, 16, 16], 15).cast();
    assert!(matches!(model.predict(&image, true), Err(Error::UninitializedNorm(_))));
    let mut rec = Record::new();
    let x = rec.constant(image.clone());
    let (_, updates) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
    updates.apply(&mut model.norms);

    let before = model.norms.clone();
    let a = model.predict(&image, true).unwrap();
    let b = model.predict(&image, true).unwrap();
    assert_eq!(a.fused_logits.values(), b.fused_logits.values());
    for (x, y) in a.se_probs.iter().zip(&b.se_probs) {
        assert_eq!(x.values(), y.values());
    }
    for (x, y) in before.iter().zip(&model.norms) {
        assert_eq!(x.running_mean.values(), y.running_mean.values());
        assert_eq!(x.running_var.values(), y.running_var.values());
    }
}

#[test]
fn earlier_modules_receive_gradient_from_last_prediction() {
    let model = Model::<f64>::build(&small(3, 2, 16), 16).unwrap();
    let mut rec = Record::new();
    let x = rec.constant(random(&[2, 2, 16, 16], 17));
    let (out, _) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
    let w = rec.constant(random(&[2, 3, 16, 16], 18));
    let last = *out.per_module_logits.last().unwrap();
    let p = rec.mul(last, w).unwrap();
    let loss = rec.sum_all(p);
    rec.backward(loss).unwrap();
    let mut params = model.params.clone();
    params.absorb_grads(&mut rec);
    let mut nonzero = 0;
    let mut total = 0;
    for (_, p) in params.iter() {
        if p.name.starts_with("hg2.") {
            continue;
        }
        // presence heads only feed the presence loss
        if p.name.contains(".presence.") {
            assert!(p.tensor.grad().is_none(), "{}", p.name);
            continue;
        }
        let g = p.tensor.grad().unwrap_or_else(|| panic!("no gradient for {}", p.name));
        total += 1;
        nonzero += g.iter().any(|&v| v != 0.0) as usize;
    }
    assert!(nonzero * 10 >= total * 9, "{nonzero}/{total}");
}

#[test]
fn tiny_network_grad_check() {
    let model = Model::<f64>::build(&HourglassConfig::tiny(), 19).unwrap();
    let ids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    let mut inputs = vec![random(&[2, 3, 16, 16], 20)];
    inputs.extend(ids.iter().map(|&id| model.params.get(id).tensor.clone()));
    let mut rng = SplitMix64::new(21);
    let labels: Vec<u8> = (0..2 * 256).map(|_| rng.below(2) as u8).collect();
    let targets = crate::encoding::presence_targets::<f64>(&labels, 2, 2).unwrap().to_f64_vec();
    let err = grad_check(
        |rec, v| {
            let mut s = Scope::new(rec, &model.params, &model.norms, Mode::Train);
            for (k, &id) in ids.iter().enumerate() {
                s.bind(id, v[k + 1]);
            }
            let out = model.network.forward(&mut s, v[0], ForwardOptions::train())?;
            let mut loss = s.rec.cross_entropy(out.fused_logits, &labels)?;
            for &p in &out.se_probs {
                let b = s.rec.binary_cross_entropy(p, &targets)?;
                loss = s.rec.add(loss, b)?;
            }
            Ok(loss)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn predict_labels_examples() {
    let mut v = vec![0.0f64; 2 * 5 * 4];
    for p in 0..8 {
        v[(p / 4 * 5 + 3) * 4 + p % 4] = 1.0;
    }
    let t = Tensor::new(&[2, 5, 2, 2], v).unwrap();
    assert_eq!(predict_labels(&t).unwrap(), vec![3; 8]);
    let flat = Tensor::<f64>::full(&[1, 4, 3, 3], 0.25);
    assert_eq!(predict_labels(&flat).unwrap(), vec![0; 9]);
}

proptest! {
    #[test]
    fn predict_labels_matches_scan_and_ignores_offsets(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut rng = SplitMix64::new(seed);
        let (b, d, h, w) = (2, 1 + rng.below(6) as usize, 3, 4);
        // coarse values so ties occur
        let vals: Vec<f64> = (0..b * d * h * w).map(|_| rng.below(4) as f64).collect();
        let t = Tensor::new(&[b, d, h, w], vals.clone()).unwrap();
        let got = predict_labels(&t).unwrap();
        for bi in 0..b {
            for p in 0..h * w {
                let col: Vec<f64> = (0..d).map(|c| vals[(bi * d + c) * h * w + p]).collect();
                let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let want = col.iter().position(|&x| x == max).unwrap();
                prop_assert_eq!(got[bi * h * w + p] as usize, want);
            }
        }
        let shifted = Tensor::new(&[b, d, h, w], vals.iter().map(|v| v + shift).collect()).unwrap();
        prop_assert_eq!(predict_labels(&shifted).unwrap(), got);
    }
}
