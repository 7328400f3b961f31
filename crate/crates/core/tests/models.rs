mod common;

use common::rng;
use proptest::prelude::*;
use racnn::classifier::{Classifier, ClassifierConfig, Schedule, FC_LAST};
use racnn::data::{synthesize, SyntheticSpec};
use racnn::imageops::extract_patches;
use racnn::racnn::{declared_multipliers, train_run, ExperimentSpec, Protocol, Racnn};
use racnn::srnet::{SrMode, SrStack, SrStackConfig, SR_MULTIPLIERS};
use racnn::tensor::{Graph, Tensor};
use rand::Rng;

fn random_batch(n: usize, side: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(&[n, 3, side, side], |_| r.gen())
}

fn param<'a>(c: &'a Classifier<f64>, name: &str) -> &'a [f64] {
    c.params().param(name).unwrap().value.data()
}

// Layer-by-layer forward written with plain loops: conv (same padding),
// ReLU, 2×2 max-pool, then dense layers.
fn classifier_oracle(c: &Classifier<f64>, x: &[f64], side: usize) -> Vec<f64> {
    let cfg = c.config();
    let (mut act, mut ch, mut s) = (x.to_vec(), 3usize, side);
    for (i, b) in cfg.conv_blocks.iter().enumerate() {
        let w = param(c, &format!("conv{}.weight", i + 1));
        let bias = param(c, &format!("conv{}.bias", i + 1));
        let (f, k, pad) = (b.filter, b.channels, (b.filter / 2) as isize);
        let mut out = vec![0.0; k * s * s];
        for ko in 0..k {
            for y in 0..s {
                for xx in 0..s {
                    let mut acc = bias[ko];
                    for ci in 0..ch {
                        for i in 0..f {
                            for j in 0..f {
                                let (sy, sx) = (y as isize + i as isize - pad, xx as isize + j as isize - pad);
                                if sy >= 0 && sx >= 0 && (sy as usize) < s && (sx as usize) < s {
                                    acc += w[((ko * ch + ci) * f + i) * f + j] * act[(ci * s + sy as usize) * s + sx as usize];
                                }
                            }
                        }
                    }
                    out[(ko * s + y) * s + xx] = acc.max(0.0);
                }
            }
        }
        act = out;
        ch = k;
        if b.pool {
            let t = s / 2;
            let mut pooled = vec![0.0; ch * t * t];
            for ci in 0..ch {
                for y in 0..t {
                    for xx in 0..t {
                        let v = |dy: usize, dx: usize| act[(ci * s + 2 * y + dy) * s + 2 * xx + dx];
                        pooled[(ci * t + y) * t + xx] = v(0, 0).max(v(0, 1)).max(v(1, 0)).max(v(1, 1));
                    }
                }
            }
            act = pooled;
            s = t;
        }
    }
    let names: Vec<String> = (1..=cfg.fc_dims.len()).map(|i| format!("fc{i}")).chain([FC_LAST.to_string()]).collect();
    for (li, name) in names.iter().enumerate() {
        let w = param(c, &format!("{name}.weight"));
        let bias = param(c, &format!("{name}.bias"));
        let out: Vec<f64> = (0..bias.len())
            .map(|m| bias[m] + (0..act.len()).map(|d| w[m * act.len() + d] * act[d]).sum::<f64>())
            .collect();
        act = if li + 1 < names.len() { out.into_iter().map(|v| v.max(0.0)).collect() } else { out };
    }
    act
}

#[test]
fn classifier_matches_layer_composition_oracle() {
    for cfg in [ClassifierConfig::micro(), ClassifierConfig::default()] {
        let side = cfg.input_side;
        let clf = Classifier::<f64>::new(cfg, 5).unwrap();
        let x = random_batch(3, side, 6);
        let logits = clf.infer(&x).unwrap();
        let per = 3 * side * side;
        for n in 0..3 {
            let oracle = classifier_oracle(&clf, &x.data()[n * per..(n + 1) * per], side);
            let l = clf.num_classes();
            for (a, b) in logits.data()[n * l..(n + 1) * l].iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}

#[test]
fn parameter_partition_is_exact() {
    let clf = Classifier::<f32>::new(ClassifierConfig::default(), 0).unwrap();
    clf.params().validate_partition().unwrap();
    let grouped: usize = clf
        .params()
        .groups()
        .iter()
        .flat_map(|g| g.params.iter().map(|&i| clf.params().params()[i].value.numel()))
        .sum();
    assert_eq!(grouped, clf.params().num_scalars());
}

#[test]
fn schedule_presets() {
    let mut clf = Classifier::<f32>::new(ClassifierConfig::default(), 0).unwrap();
    clf.set_schedule(Schedule::FinetuneAll);
    for m in clf.params().multipliers() {
        let want = if m.group == FC_LAST { (1.0, 1.0) } else { (0.1, 0.0) };
        assert_eq!((m.lr_mult, m.wd_mult), want, "{}", m.group);
    }
    clf.set_schedule(Schedule::FrozenHead);
    for m in clf.params().multipliers() {
        let want = if m.group == FC_LAST { (1.0, 1.0) } else { (0.0, 0.0) };
        assert_eq!((m.lr_mult, m.wd_mult), want, "{}", m.group);
    }
}

#[test]
fn degenerate_racnn_equals_classifier() {
    let clf = Classifier::<f64>::new(ClassifierConfig::default(), 1).unwrap();
    let sr = SrStack::<f64>::zeros(SrStackConfig::desk(), SrMode::Residual).unwrap();
    let model = Racnn::new(sr, clf.clone());
    for seed in 0..5 {
        let x = random_batch(4, 32, 100 + seed);
        assert_eq!(model.infer(&x).unwrap(), clf.infer(&x).unwrap());
    }
}

#[test]
fn racnn_rejects_mismatched_classifier_input() {
    let clf = Classifier::<f64>::new(ClassifierConfig::micro(), 1).unwrap();
    let sr = SrStack::<f64>::zeros(SrStackConfig::toy(), SrMode::Residual).unwrap();
    let model = Racnn::new(sr, clf);
    assert!(model.infer(&random_batch(1, 10, 0)).is_err());
}

#[test]
fn end_to_end_gradient_reaches_sconv1() {
    let clf = Classifier::<f64>::new(ClassifierConfig::micro(), 2).unwrap();
    let sr = SrStack::<f64>::gaussian(SrStackConfig::toy(), SrMode::Residual, 3).unwrap();
    let model = Racnn::new(sr, clf);
    let mut g = Graph::new();
    let sb = model.sr.params().bind(&mut g);
    let cb = model.clf.params().bind(&mut g);
    let x = g.input(random_batch(2, 8, 4));
    let logits = model.forward(&mut g, &sb, &cb, x).unwrap();
    let loss = g.softmax_cross_entropy(logits, &[0, 1]).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(sb.get(0)).unwrap();
    assert!(grad.data().iter().any(|&v| v != 0.0));
}

#[test]
fn sr_zero_weight_loss_and_multipliers() {
    let mut r = rng(9);
    let hr = common::random_image(16, 16, &mut r);
    let pairs = extract_patches(&hr, 16, 16, 4).unwrap();
    let stack = SrStack::<f64>::zeros(SrStackConfig::toy(), SrMode::Residual).unwrap();
    let mut g = Graph::new();
    let b = stack.params().bind(&mut g);
    let loss = stack.pair_loss(&mut g, &b, &[&pairs[0]]).unwrap();
    let p = &pairs[0];
    let closed = 0.5 * p.hr.pixels().iter().zip(p.lr.pixels()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        / p.hr.pixels().len() as f64;
    assert!((g.value(loss).item() - closed).abs() < 1e-15);
    assert_eq!(SR_MULTIPLIERS, [("sconv1", 1.0, 0.1), ("sconv2", 1.0, 0.1), ("sconv3", 0.1, 0.1)]);
}

#[test]
fn p_racnn_declares_sr_groups_first() {
    let table = declared_multipliers(Protocol::PRacnn, Schedule::FrozenHead, &ClassifierConfig::default());
    let head: Vec<_> = table.iter().take(3).map(|m| (m.group.as_str(), m.lr_mult, m.wd_mult)).collect();
    assert_eq!(head, SR_MULTIPLIERS.to_vec());
    let base = declared_multipliers(Protocol::Baseline, Schedule::FrozenHead, &ClassifierConfig::default());
    assert_eq!(base.len(), table.len() - 3);
}

fn tiny_corpus() -> racnn::data::DatasetSplits {
    synthesize(&SyntheticSpec {
        num_classes: 2,
        train_per_class: 6,
        test_per_class: 4,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_spec(protocol: Protocol, epochs: usize) -> ExperimentSpec {
    let mut spec = ExperimentSpec {
        protocol,
        epochs,
        batch: 4,
        ..ExperimentSpec::default()
    };
    spec.classifier.num_classes = 2;
    spec
}

#[test]
fn frozen_head_leaves_everything_but_fc_last_bit_identical() {
    let data = tiny_corpus().degraded(8).unwrap();
    let base = Classifier::<f32>::new(ClassifierConfig { num_classes: 2, ..ClassifierConfig::default() }, 0).unwrap();
    let spec = tiny_spec(Protocol::GRacnn, 3);
    let (_, model) = train_run(&spec, 0, &data, &base).unwrap();
    let after = model.classifier();
    let mut fc_changed = false;
    for (p0, p1) in base.params().params().iter().zip(after.params().params()) {
        let same = p0.value.data().iter().zip(p1.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if p0.name.starts_with(FC_LAST) {
            fc_changed |= !same;
        } else {
            assert!(same, "{} moved under frozen_head", p0.name);
        }
    }
    assert!(fc_changed);
    let sr0 = SrStack::<f32>::gaussian(SrStackConfig::desk(), SrMode::Residual, 0).unwrap();
    assert_ne!(model.sr().unwrap().params().params()[0].value, sr0.params().params()[0].value);
}

#[test]
fn zero_epochs_only_evaluates() {
    let data = tiny_corpus().degraded(8).unwrap();
    let base = Classifier::<f32>::new(ClassifierConfig { num_classes: 2, ..ClassifierConfig::default() }, 0).unwrap();
    let (report, model) = train_run(&tiny_spec(Protocol::Baseline, 0), 0, &data, &base).unwrap();
    assert_eq!(report.epochs.len(), 1);
    assert_eq!(report.epochs[0].train_loss, None);
    for (a, b) in base.params().params().iter().zip(model.classifier().params().params()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn same_seed_same_report() {
    let data = tiny_corpus().degraded(8).unwrap();
    let base = Classifier::<f32>::new(ClassifierConfig { num_classes: 2, ..ClassifierConfig::default() }, 0).unwrap();
    let spec = tiny_spec(Protocol::GRacnn, 2);
    let a = train_run(&spec, 4, &data, &base).unwrap().0.to_json().unwrap();
    let b = train_run(&spec, 4, &data, &base).unwrap().0.to_json().unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sr_preserves_spatial_dims(h in 9usize..20, w in 9usize..20, seed in any::<u64>()) {
        let s = SrStack::<f64>::gaussian(SrStackConfig::desk(), SrMode::Residual, seed).unwrap();
        let mut r = rng(seed);
        let x = Tensor::from_fn(&[1, 3, h, w], |_| r.gen());
        let y = s.infer(&x).unwrap();
        prop_assert_eq!(y.shape(), &[1, 3, h, w]);
    }

    #[test]
    fn zero_sr_is_identity_on_images(seed in any::<u64>()) {
        let s = SrStack::<f64>::zeros(SrStackConfig::toy(), SrMode::Residual).unwrap();
        let img = common::random_image(12, 12, &mut rng(seed));
        prop_assert_eq!(s.enhance(&img).unwrap(), img.clone());
    }
}
