use super::*;
use crate::hourglass::HourglassConfig;

fn sample(cfg: &HourglassConfig, seed: u64) -> Sample {
    let mut rng = SplitMix64::new(seed);
    let s = cfg.patch_size;
    let labels: Vec<u8> = (0..s * s)
        .map(|i| if (i % s) < s / 2 { 0 } else { rng.below(cfg.num_classes as u64) as u8 })
        .collect();
    // the image encodes the label in channel 0 plus noise elsewhere
    let mut image = Vec::with_capacity(cfg.input_channels * s * s);
    for c in 0..cfg.input_channels {
        for &l in &labels {
            image.push(if c == 0 { l as f32 / cfg.num_classes as f32 } else { rng.uniform(0.0, 1.0) as f32 });
        }
    }
    Sample {
        channels: cfg.input_channels,
        size: s,
        image,
        labels,
    }
}

fn quick(epochs1: usize, epochs2: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        epochs_phase1: epochs1,
        epochs_phase2: epochs2,
        batch_size: batch,
        base_lr: 1e-3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn drops_partial_batches() {
    let cfg = HourglassConfig::tiny();
    let data: Vec<Sample> = (0..10).map(|i| sample(&cfg, i)).collect();
    let mut model = Model::<f32>::build(&cfg, 1).unwrap();
    let mut report = TrainingReport::default();
    let tc = quick(1, 0, 4);
    run_phase(&mut model, &data, &data[..2], &tc, tc.phase1(), &mut report, &mut |_| {}).unwrap();
    assert_eq!(report.iterations.len(), 2);
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(iterations_per_epoch(10, 4).unwrap(), 2);
    assert!(iterations_per_epoch(3, 4).is_err());
    assert!(iterations_per_epoch(3, 0).is_err());
    let err = train(&mut model, &data[..3], &[], &tc, &mut |_| {}, &mut |_, _, _| Ok(()));
    assert!(matches!(err, Err(Error::Data(_))));
}

#[test]
fn overfits_a_single_sample() {
    let cfg = HourglassConfig::tiny();
    let data = vec![sample(&cfg, 3)];
    let mut model = Model::<f32>::build(&cfg, 2).unwrap();
    let tc = TrainConfig {
        base_lr: 1e-2,
        power: 0.0,
        augment: false,
        ..quick(0, 200, 1)
    };
    let mut report = TrainingReport::default();
    run_phase(&mut model, &data, &[], &tc, tc.phase2(), &mut report, &mut |_| {}).unwrap();
    let last = report.iterations.last().unwrap();
    assert!(last.loss_ce < 0.05, "final CE {}", last.loss_ce);
    assert!(last.loss_ce < report.iterations[0].loss_ce);
}

#[test]
fn identical_seeds_give_identical_traces() {
    let cfg = HourglassConfig::tiny();
    let data: Vec<Sample> = (0..4).map(|i| sample(&cfg, 10 + i)).collect();
    let tc = quick(1, 1, 2);
    let run = || {
        let mut model = Model::<f32>::build(&cfg, 5).unwrap();
        let mut between = Vec::new();
        let report = train(&mut model, &data, &data[..1], &tc, &mut |_| {}, &mut |m, a, r| {
            between.push((r.iterations.len(), a.step, m.params.num_scalars()));
            Ok(())
        })
        .unwrap();
        let weights: Vec<Vec<f32>> = model.params.iter().map(|(_, p)| p.tensor.values().to_vec()).collect();
        (report, weights, between)
    };
    let (a, wa, ba) = run();
    let (b, wb, bb) = run();
    assert_eq!(a, b);
    assert_eq!(wa, wb);
    assert_eq!(ba, bb);
    assert_eq!(ba[0].0, 2);
    assert_eq!(ba[0].1, 2);
    assert_eq!(a.iterations.len(), 4);
    assert!(a.iterations[..2].iter().all(|r| r.phase == 1 && r.loss_se == 0.0));
    assert!(a.iterations[2..].iter().all(|r| r.phase == 2 && r.loss_se > 0.0));
    let csv = a.to_csv();
    assert!(csv.starts_with("iter,epoch,phase,lr,loss_total,loss_ce,loss_se,val_pixacc,val_miou\n"));
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
    assert!(csv.lines().nth(3).unwrap().starts_with(",0,1,,,,,"));
}

#[test]
fn phase_one_leaves_encoding_untouched() {
    let cfg = HourglassConfig::tiny();
    let data: Vec<Sample> = (0..2).map(|i| sample(&cfg, 20 + i)).collect();
    let mut model = Model::<f32>::build(&cfg, 5).unwrap();
    let before = model.clone();
    let tc = quick(2, 0, 1);
    let mut report = TrainingReport::default();
    run_phase(&mut model, &data, &[], &tc, tc.phase1(), &mut report, &mut |_| {}).unwrap();
    for ((_, p), (_, q)) in model.params.iter().zip(before.params.iter()) {
        let same = p.tensor.values() == q.tensor.values();
        assert_eq!(same, p.group == ParamGroup::Encoding, "{}", p.name);
        assert!(p.tensor.requires_grad());
    }
}

fn loss_graph(model: &Model<f64>, s: &Sample, weights: LossWeights) -> (Record<f64>, LossTerms, NetworkOutput) {
    let (images, labels) = make_batch::<f64>(&[s]).unwrap();
    let mut rec = Record::new();
    let x = rec.constant(images);
    let (out, _) = model.forward(&mut rec, x, ForwardOptions::train()).unwrap();
    let terms = total_loss(&mut rec, &out, &labels, model.config().num_classes, weights).unwrap();
    (rec, terms, out)
}

#[test]
fn zero_presence_weight_means_no_presence_gradient() {
    let cfg = HourglassConfig::tiny();
    let model = Model::<f32>::build(&cfg, 4).unwrap().cast::<f64>();
    let (mut rec, terms, _) = loss_graph(&model, &sample(&cfg, 1), LossWeights { se_weight: 0.0 });
    assert!(terms.se_terms.is_empty());
    rec.backward(terms.total).unwrap();
    let mut params = model.params.clone();
    params.absorb_grads(&mut rec);
    for (_, p) in params.iter() {
        if p.name.contains(".presence.") {
            assert!(p.tensor.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", p.name);
        }
    }
}

#[test]
fn loss_is_sum_of_module_terms_plus_weighted_presence() {
    let cfg = HourglassConfig {
        num_modules: 4,
        ..HourglassConfig::tiny()
    };
    let model = Model::<f32>::build(&cfg, 9).unwrap().cast::<f64>();
    let s = sample(&cfg, 2);
    let (rec, terms, out) = loss_graph(&model, &s, LossWeights::default());
    assert_eq!(terms.ce_terms.len(), 4);
    assert_eq!(terms.se_terms.len(), 8);
    let total = rec.value(terms.total).item();
    assert!((total - (terms.ce_sum(&rec) + 0.2 * terms.se_sum(&rec))).abs() < 1e-12);

    // independent recomputation of each CE term from the logits
    let classes = cfg.num_classes;
    let n = cfg.patch_size * cfg.patch_size;
    for (&logits, &ce) in out.per_module_logits.iter().zip(&terms.ce_terms) {
        let z = rec.value(logits).values();
        let mut sum = 0.0;
        for (p, &l) in s.labels.iter().enumerate() {
            let row: Vec<f64> = (0..classes).map(|c| z[c * n + p]).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            sum += lse - row[l as usize];
        }
        assert!((rec.value(ce).item() - sum / n as f64).abs() < 1e-10);
    }

    // four modules with CE = a each and eight presence terms with BCE = b
    // each: two classes, every label 0, constant logits and probabilities
    let (a, b) = (0.7f64, 0.3f64);
    let mut r = Record::<f64>::new();
    let gap = (a.exp() - 1.0).ln();
    let logits = Tensor::new(&[1, 2, 2, 2], vec![0.0, 0.0, 0.0, 0.0, gap, gap, gap, gap]).unwrap();
    let p = (-b).exp();
    let fake = NetworkOutput {
        per_module_logits: (0..4).map(|_| r.constant(logits.clone())).collect(),
        fused_logits: r.constant(logits.clone()),
        se_probs: (0..8).map(|_| r.constant(Tensor::new(&[1, 2], vec![p, 1.0 - p]).unwrap())).collect(),
        gammas: vec![],
    };
    let terms = total_loss(&mut r, &fake, &[0; 4], 2, LossWeights::default()).unwrap();
    assert!((r.value(terms.total).item() - (4.0 * a + 1.6 * b)).abs() < 1e-12);
}

#[test]
fn bypassed_encoding_contributes_no_presence_terms() {
    let cfg = HourglassConfig::tiny();
    let model = Model::<f32>::build(&cfg, 4).unwrap().cast::<f64>();
    let (images, labels) = make_batch::<f64>(&[&sample(&cfg, 1)]).unwrap();
    let mut rec = Record::new();
    let x = rec.constant(images);
    let (out, _) = model.forward(&mut rec, x, ForwardOptions::train().with_encoding(false)).unwrap();
    let terms = total_loss(&mut rec, &out, &labels, cfg.num_classes, LossWeights::default()).unwrap();
    assert!(terms.se_terms.is_empty());
    assert_eq!(rec.value(terms.total).item(), terms.ce_sum(&rec));
}

#[test]
fn one_small_step_lowers_the_loss() {
    let cfg = HourglassConfig::tiny();
    let mut decreased = 0;
    for seed in 0..10 {
        let mut model = Model::<f32>::build(&cfg, seed).unwrap();
        let data: Vec<Sample> = (0..2).map(|i| sample(&cfg, 100 * seed + i)).collect();
        let refs: Vec<&Sample> = data.iter().collect();
        let (images, labels) = make_batch::<f32>(&refs).unwrap();
        let opts = ForwardOptions::train();
        let w = LossWeights::default();
        let before = batch_loss(&model, &images, &labels, opts, w).unwrap();
        let tc = TrainConfig {
            base_lr: 1e-5,
            augment: false,
            ..quick(0, 1, 2)
        };
        let mut report = TrainingReport::default();
        run_phase(&mut model, &data, &[], &tc, tc.phase2(), &mut report, &mut |_| {}).unwrap();
        assert!((report.iterations[0].loss_total - before).abs() < 1e-9 * before.max(1.0));
        let after = batch_loss(&model, &images, &labels, opts, w).unwrap();
        decreased += (after < before) as usize;
    }
    assert!(decreased >= 9, "{decreased}/10");
}

#[test]
fn evaluation_matches_manual_tally() {
    let cfg = HourglassConfig::tiny();
    let model = Model::<f32>::build(&cfg, 3).unwrap();
    let mut model = model;
    for n in model.norms.iter_mut() {
        n.initialized = true;
    }
    let data: Vec<Sample> = (0..3).map(|i| sample(&cfg, 40 + i)).collect();
    let cm = evaluate(&model, &data, true, 2).unwrap();
    let mut manual = ConfusionMatrix::new(cfg.num_classes);
    for s in &data {
        let (img, labels) = make_batch::<f32>(&[s]).unwrap();
        let pred = model.predict(&img, true).unwrap();
        manual.update(&predict_labels(&pred.fused_logits).unwrap(), &labels).unwrap();
    }
    assert_eq!(cm, manual);
    assert_eq!(cm.total(), 3 * 256);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let cfg = HourglassConfig::tiny();
    let data: Vec<Sample> = (0..4).map(|i| sample(&cfg, 60 + i)).collect();
    let tc = quick(1, 2, 2);
    let weights = |m: &Model<f32>| m.params.iter().map(|(_, p)| p.tensor.values().to_vec()).collect::<Vec<_>>();
    let none = &mut |_: Event| {};

    let mut full = Model::<f32>::build(&cfg, 8).unwrap();
    let report = train(&mut full, &data, &[], &tc, none, &mut |_, _, _| Ok(())).unwrap();

    // stop after the first phase-2 epoch and save
    let mut first = Model::<f32>::build(&cfg, 8).unwrap();
    let mut head = TrainingReport::default();
    run_phase(&mut first, &data, &[], &tc, tc.phase1(), &mut head, none).unwrap();
    let adam = Adam::new(&first.params);
    let adam = resume_phase(&mut first, &data, &[], &tc, tc.phase2(), 0..1, adam, &mut head, none).unwrap();
    assert_eq!(head.iterations.len(), 4);
    let ck = Checkpoint::capture(&first, Some(&adam), 4, true);
    let ck = Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("m")).unwrap();

    let mut restored = Model::<f32>::build(&cfg, 99).unwrap();
    let mut adam = Adam::new(&restored.params);
    ck.restore(&mut restored, Some(&mut adam)).unwrap();
    let mut tail = TrainingReport::default();
    resume_phase(&mut restored, &data, &[], &tc, tc.phase2(), 1..2, adam, &mut tail, none).unwrap();

    assert_eq!(weights(&restored), weights(&full));
    assert_eq!(head.iterations, report.iterations[..4].to_vec());
    assert_eq!(tail.iterations, report.iterations[4..].to_vec());
    assert!(resume_phase(&mut restored, &data, &[], &tc, tc.phase2(), 1..3, Adam::new(&full.params), &mut tail, none).is_err());
}
