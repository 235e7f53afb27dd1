mod common;

use runet::loss::{self, LossConfig};
use runet::morphology::label_components;
use runet::net::{Network, RfVariant};
use runet::optim::Adam;
use runet::pipeline::config::RoiConfig;
use runet::pipeline::eval::{self, fold_assignment, split_validation};
use runet::pipeline::infer::{ensemble_mean, infer_frame, pooling_strides, prepare_image};
use runet::pipeline::train::{prepare_case, train, StepLog, TrainingCase};
use runet::pipeline::{crossval, ensemble_infer, generate_phantom, infer, synth, Config, Dataset, PhantomSpec};
use runet::preprocess::AugmentationConfig;
use runet::{Error, Shape, Tape, Volume};

/// Phantoms and network small enough for a unit-test budget.
fn tiny_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.phantom = PhantomSpec {
        dims: [16, 48, 48],
        body_radii: [5.5, 18.0, 18.0],
        lesion_radii_min: [1.2, 3.0, 3.0],
        lesion_radii_max: [1.6, 4.5, 4.5],
        ..PhantomSpec::default()
    };
    cfg.network.channels = [2, 4, 4];
    cfg.train.phase1_max_epochs = 2;
    cfg.train.phase1_patience = 1;
    cfg.train.phase2_epochs = 1;
    cfg.train.optimizer.lr = 1e-3;
    cfg.crossval.k = 2;
    cfg
}

fn tiny_cases(cfg: &Config, n: usize) -> Vec<TrainingCase> {
    let spec = cfg.network.spec(cfg.seed);
    (0..n)
        .map(|i| {
            let p = generate_phantom(&cfg.phantom, cfg.seed, i).unwrap();
            let case = runet::pipeline::synth::Case {
                name: format!("case_{i}"),
                image: p.image,
                region: p.region,
            };
            prepare_case(&case, cfg, &spec).unwrap()
        })
        .collect()
}

fn weight_bytes(net: &Network) -> Vec<u8> {
    net.params().iter().flat_map(|p| p.value.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

fn set_locator(net: &mut Network, bias: f32) {
    for p in net.params_mut() {
        match p.name.as_str() {
            "Locator.weight" => p.value.data_mut().fill(0.0),
            "Locator.bias" => p.value.data_mut().fill(bias),
            _ => {}
        }
    }
}

#[test]
fn phantoms_are_deterministic_and_within_band() {
    let spec = PhantomSpec::default();
    for i in 0..8 {
        let a = generate_phantom(&spec, 11, i).unwrap();
        let b = generate_phantom(&spec, 11, i).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.region.data(), b.region.data());
        let f = a.lesion_fraction();
        assert!((1e-4..=2e-2).contains(&f), "case {i}: fraction {f}");
        let n = label_components(&a.region).components.len();
        assert!((1..=2).contains(&n), "case {i}: {n} components");
        assert_eq!(n, a.lesions.len());
        assert_eq!(a.region.dims(), spec.dims);
        assert_eq!(a.image.spacing(), spec.spacing);
    }
    assert_ne!(generate_phantom(&spec, 12, 0).unwrap().image.data(), generate_phantom(&spec, 11, 0).unwrap().image.data());
}

#[test]
fn synth_on_disk_is_bitwise_reproducible() {
    let cfg = tiny_config(5);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        synth(&cfg.phantom, cfg.seed, 3, d.path()).unwrap();
    }
    let mut files: Vec<_> = walk(dirs[0].path());
    files.sort();
    assert!(files.len() >= 3 * 6 + 1, "{} files", files.len());
    for f in files {
        let rel = f.strip_prefix(dirs[0].path()).unwrap();
        assert_eq!(std::fs::read(&f).unwrap(), std::fs::read(dirs[1].path().join(rel)).unwrap(), "{}", rel.display());
    }
    let data = Dataset::open(dirs[0].path()).unwrap();
    assert_eq!(data.len(), 3);
    let case = data.load(1).unwrap();
    assert_eq!(case.region.data(), generate_phantom(&cfg.phantom, cfg.seed, 1).unwrap().region.data());
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// Full-batch locator loss over both cases, ten optimizer steps.
#[test]
fn locator_loss_decreases_on_two_cases() {
    let cfg = tiny_config(3);
    let cases = tiny_cases(&cfg, 2);
    let mut net = Network::new(cfg.network.spec(cfg.seed)).unwrap();
    let mut opt = Adam::new(&net, cfg.train.optimizer);
    let strides = pooling_strides(net.spec());
    let eps = LossConfig::default().epsilon;
    let mut history = Vec::new();
    for _ in 0..10 {
        let mut t = Tape::new();
        let b = net.bind(&mut t, true);
        let mut total = None;
        for c in &cases {
            let x = t.constant(c.image.clone());
            let f = net.encoder_forward(&mut t, &b, x).unwrap();
            let loc = net.locator_forward(&mut t, &b, f.f3).unwrap();
            let g = t.constant(loss::downsample_mask(&c.region, &strides).unwrap());
            let l = loss::global_loss(&mut t, loc, g, eps).unwrap();
            total = Some(match total {
                None => l,
                Some(a) => t.add(a, l).unwrap(),
            });
        }
        let total = total.unwrap();
        history.push(t.value(total).item().unwrap());
        let grads = t.backward(total).unwrap();
        opt.step(&mut net, &b, &grads).unwrap();
    }
    for w in history.windows(2) {
        assert!(w[1] < w[0], "loss history {history:?}");
    }
}

fn run_training(cfg: &Config, cases: &[TrainingCase]) -> (Network, String) {
    let mut log = Vec::new();
    let out = train(cfg, &cases[..cases.len() - 1], &cases[cases.len() - 1..], &mut log).unwrap();
    (out.net, String::from_utf8(log).unwrap())
}

#[test]
fn training_is_seed_deterministic_and_logs_consistent_terms() {
    let cfg = tiny_config(9);
    let cases = tiny_cases(&cfg, 3);
    let (a, log_a) = run_training(&cfg, &cases);
    let (b, log_b) = run_training(&cfg, &cases);
    assert_eq!(weight_bytes(&a), weight_bytes(&b));
    assert_eq!(log_a, log_b);

    let mut other = cfg.clone();
    other.seed = 10;
    let (c, _) = run_training(&other, &cases);
    assert_ne!(weight_bytes(&a), weight_bytes(&c));

    let steps: Vec<StepLog> = log_a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(steps.iter().any(|s| s.phase == runet::pipeline::train::Phase::Locator));
    assert!(steps.iter().any(|s| s.phase == runet::pipeline::train::Phase::Joint));
    for (i, s) in steps.iter().enumerate() {
        assert_eq!(s.step, i + 1);
        assert!(s.terms.identity_residual() < 1e-6, "{s:?}");
        assert_eq!(s.lr, cfg.train.optimizer.lr);
        match s.phase {
            runet::pipeline::train::Phase::Locator => {
                assert_eq!(s.terms.l_total, s.terms.l_global);
                assert_eq!(s.rois, 0);
            }
            runet::pipeline::train::Phase::Joint => {
                assert!(s.rois >= 1);
                assert!(s.terms.l_weight_decay > 0.0);
            }
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let mut cfg = tiny_config(4);
    cfg.train.augmentation = AugmentationConfig::identity();
    let mut cases = tiny_cases(&cfg, 2);
    cases[0].image.data_mut()[0] = f32::NAN;
    let err = train(&cfg, &cases[..1], &cases[1..], &mut Vec::new()).unwrap_err();
    match err {
        Error::Diverged { step, phase, .. } => {
            assert_eq!(step, 1);
            assert_eq!(phase, "locator");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn all_zero_image_gives_empty_result() {
    let cfg = tiny_config(1);
    let net = Network::new(cfg.network.spec(cfg.seed)).unwrap();
    let image = Volume::zeros(Shape::spatial([16, 48, 48])).with_spacing([4.0, 1.0, 1.0]);
    let r = infer(&net, &image, &cfg).unwrap();
    assert!(r.boxes.is_empty());
    assert_eq!(r.decoder_calls, 0);
    assert_eq!(r.prob.count_nonzero(), 0);
    assert_eq!(r.prob.dims(), image.dims());
}

#[test]
fn decoder_runs_once_per_box() {
    let cfg = tiny_config(2);
    let case = &tiny_cases(&cfg, 1)[0];
    let mut net = Network::new(cfg.network.spec(cfg.seed)).unwrap();
    let roi = RoiConfig::default();

    set_locator(&mut net, -10.0);
    let none = infer_frame(&net, &case.image, &roi).unwrap();
    assert_eq!((none.boxes.len(), none.decoder_calls), (0, 0));
    assert_eq!(none.region.count_nonzero(), 0);

    set_locator(&mut net, 10.0);
    let all = infer_frame(&net, &case.image, &roi).unwrap();
    assert_eq!(all.boxes.len(), 1);
    assert_eq!(all.decoder_calls, 1);

    // Two separated blobs in the locator map give two boxes and two decoder calls.
    let locator = &all.locator;
    let [d, h, w] = locator.dims();
    let mut two = Volume::zeros(locator.shape());
    two.set(0, 0, d / 2, 1, 1, 1.0);
    two.set(0, 0, d / 2, h - 2, w - 2, 1.0);
    let boxes = runet::roi::extract_boxes(&two, roi.threshold, 1);
    assert_eq!(boxes.len(), 2);
}

#[test]
fn inference_preserves_original_extent() {
    let mut cfg = tiny_config(6);
    cfg.phantom.spacing = [3.0, 0.8, 0.8];
    let p = generate_phantom(&cfg.phantom, cfg.seed, 0).unwrap();
    let mut net = Network::new(cfg.network.spec(cfg.seed)).unwrap();
    set_locator(&mut net, 10.0);
    let r = infer(&net, &p.image, &cfg).unwrap();
    assert_eq!(r.prob.dims(), p.image.dims());
    assert_eq!(r.prob.spacing(), p.image.spacing());
    assert!(r.prob.count_nonzero() > 0);
    let prep = prepare_image(&p.image, cfg.data.target_spacing, net.spec().cumulative_stride()).unwrap().unwrap();
    let stride = net.spec().cumulative_stride();
    for a in 0..3 {
        assert_eq!(prep.input.dims()[a] % stride[a], 0);
    }
}

#[test]
fn ensemble_averages_members() {
    let cfg = tiny_config(7);
    let p = generate_phantom(&cfg.phantom, cfg.seed, 0).unwrap();
    let mut net = Network::new(cfg.network.spec(cfg.seed)).unwrap();
    set_locator(&mut net, 10.0);
    let single = infer(&net, &p.image, &cfg).unwrap();
    let three = ensemble_infer(&[net.clone(), net.clone(), net], &p.image, &cfg).unwrap();
    assert_eq!(three.prob.data(), single.prob.data());
    assert_eq!(three.members.len(), 3);

    let s = Shape::spatial([1, 1, 2]);
    let maps = [0.2f32, 0.5, 0.8].map(|v| Volume::from_vec(s, vec![v, 1.0]).unwrap());
    let m = ensemble_mean(&maps).unwrap();
    assert!((m.data()[0] - 0.5).abs() < 1e-7);
    assert_eq!(m.data()[1], 1.0);
    assert!(ensemble_mean(&[]).is_err());
    assert!(ensemble_infer(&[], &p.image, &cfg).is_err());
}

#[test]
fn folds_partition_cases() {
    for (n, k) in [(20, 4), (7, 3), (5, 1)] {
        let f = fold_assignment(n, k, 42);
        assert_eq!(f, fold_assignment(n, k, 42));
        let mut sizes = vec![0; k];
        for &x in &f {
            sizes[x] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), n);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
    assert_ne!(fold_assignment(20, 4, 1), fold_assignment(20, 4, 2));
    assert_eq!(split_validation(&[0, 1, 2, 3, 4, 5, 6, 7], 0.125), (vec![0, 1, 2, 3, 4, 5, 6], vec![7]));
    assert_eq!(split_validation(&[3], 0.125), (vec![3], vec![]));
    assert_eq!(eval::holdout_split(5, 2).unwrap(), (vec![0, 1, 2], vec![3, 4]));
    assert!(eval::holdout_split(2, 2).is_err());
}

#[test]
fn crossval_pools_every_case_once() {
    let cfg = tiny_config(8);
    let data_dir = tempfile::tempdir().unwrap();
    synth(&cfg.phantom, cfg.seed, 4, data_dir.path()).unwrap();
    let data = Dataset::open(data_dir.path()).unwrap();
    let out = tempfile::tempdir().unwrap();
    let r = crossval(&cfg, &data, out.path()).unwrap();
    assert_eq!(r.folds.len(), 2);
    let mut seen: Vec<&String> = r.folds.iter().flat_map(|f| &f.val_cases).collect();
    seen.sort();
    assert_eq!(seen.len(), 4);
    seen.dedup();
    assert_eq!(seen.len(), 4);
    for f in &r.folds {
        assert!(f.val_cases.iter().all(|c| !f.train_cases.contains(c)));
    }
    let weighted: f64 = r.folds.iter().map(|f| f.summary.dsc.mean * f.summary.cases as f64).sum::<f64>() / 4.0;
    assert!((weighted - r.pooled.dsc.mean).abs() < 1e-12);
    assert_eq!(r.pooled.cases, 4);
    assert!(out.path().join("crossval.json").exists());
    assert!(out.path().join("fold_1/model/weights.bin").exists());

    let mut one = cfg.clone();
    one.crossval.k = 1;
    let out1 = tempfile::tempdir().unwrap();
    let r1 = crossval(&one, &data, out1.path()).unwrap();
    assert_eq!(r1.folds[0].val_cases.len(), 4);
    assert_eq!(r1.folds[0].train_cases.len(), 4);

    let mut five = cfg;
    five.crossval.k = 5;
    assert!(matches!(crossval(&five, &data, out1.path()), Err(Error::Config(_))));
}

#[test]
fn variants_share_the_training_path() {
    let mut cfg = tiny_config(12);
    cfg.network.rf_variant = RfVariant::Rf112;
    cfg.train.phase1_max_epochs = 1;
    let cases = tiny_cases(&cfg, 2);
    let (net, _) = run_training(&cfg, &cases);
    assert_eq!(net.spec().rf_variant, RfVariant::Rf112);
}
