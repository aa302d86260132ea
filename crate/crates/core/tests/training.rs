#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

//! Network inference and the training schedules on small phantom data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumorseg::curriculum::{
    cascade_predict, liver_crop_region, make_schedule, run_cascade, run_schedule, steps_per_epoch,
    train_stage, CascadeModel, ScheduleKind, StageSpec, TrainLog, DICE_SMOOTH,
};
use tumorseg::network::{build_network, Network, NetworkConfig, Tiling};
use tumorseg::phantom::{generate_phantom, PhantomConfig};
use tumorseg::preprocess::{
    prepare_case, sample_cases, PreparedCase, PreprocessConfig, Sample, SampleKind,
};
use tumorseg::tensor::{soft_dice_loss, Adam, AdamConfig, Real, Tensor};
use tumorseg::volume::{Mask, Volume};

fn tiny() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        channel_cap: 8,
        levels: 2,
        blocks_per_level: vec![1, 1],
        ..NetworkConfig::default()
    }
}

fn small_pre() -> PreprocessConfig {
    PreprocessConfig {
        inplane_size: [16, 16],
        subvol_depth: 8,
        subvol_stride: 4,
        ..PreprocessConfig::default()
    }
}

fn cases(n: u64) -> Vec<PreparedCase> {
    let cfg = PhantomConfig {
        dims: [24, 48, 48],
        ..PhantomConfig::default()
    };
    (0..n)
        .map(|i| {
            let p = generate_phantom(&cfg, 300 + i).unwrap();
            prepare_case(&format!("c{i}"), &p.volume, &p.mask, &small_pre()).unwrap()
        })
        .collect()
}

fn random_input(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(
        &shape,
        (0..n).map(|_| rng.random::<f64>() as Real).collect(),
    )
    .unwrap()
}

#[test]
fn fresh_network_outputs_are_moderate_probabilities() {
    for seed in 0..10 {
        let net = build_network(&NetworkConfig::desk(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = net
            .forward_frozen(&random_input(&mut rng, [1, 1, 8, 16, 16]))
            .unwrap();
        let v = y.values();
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        let mean = v.iter().map(|&p| p as f64).sum::<f64>() / v.len() as f64;
        assert!(
            (0.2..0.8).contains(&mean),
            "seed {seed}: mean output {mean}"
        );
    }
}

#[test]
fn same_seed_same_weights_and_param_count() {
    let cfg = NetworkConfig::desk();
    let a = build_network(&cfg, 3).unwrap();
    let b = build_network(&cfg, 3).unwrap();
    assert_eq!(a.param_count(), cfg.param_count().unwrap());
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.tensor.values(), q.tensor.values());
    }
}

#[test]
fn checkpoint_restores_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let net = build_network(&tiny(), 8).unwrap();
    let path = tmp.path().join("n.ckpt");
    net.save(&path, None, [("seed".to_string(), "8".to_string())].into())
        .unwrap();
    let (back, ckpt) = Network::load(&path).unwrap();
    assert_eq!(ckpt.metadata["seed"], "8");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Volume::new(
        [10, 8, 8],
        [1.0; 3],
        (0..640).map(|_| rng.random::<f32>()).collect(),
    )
    .unwrap();
    let t = Tiling {
        depth: 4,
        stride: 2,
    };
    assert_eq!(
        net.predict_probabilities(&v, t).unwrap(),
        back.predict_probabilities(&v, t).unwrap()
    );
}

#[test]
fn stage_step_count() {
    let data = sample_cases(&cases(2), &small_pre(), 1).unwrap();
    let whole: Vec<Sample> = data.whole.iter().cycle().take(10).cloned().collect();
    let stage = StageSpec {
        batch_size: 2,
        ..StageSpec::whole(1e-3, 3)
    };
    assert_eq!(steps_per_epoch(&stage, &whole), 5);
    let mut net = build_network(&tiny(), 0).unwrap();
    let mut log = TrainLog::new(0, "t");
    train_stage(&mut net, &whole, &[], &stage, 0, 0, &mut log).unwrap();
    assert_eq!(log.steps.len(), 15);
    assert_eq!(log.stages[0].train_dice.len(), 3);

    let patch_stage = StageSpec::patch(1e-3, 1);
    assert!(train_stage(&mut net, &whole, &[], &patch_stage, 0, 1, &mut log).is_err());
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let data = sample_cases(&cases(1), &small_pre(), 1).unwrap();
    let s = data
        .whole
        .iter()
        .max_by_key(|s| s.target.count_nonzero())
        .unwrap();
    let [d, h, w] = s.image.dims;
    let x = Tensor::from_vec(
        &[1, 1, d, h, w],
        s.image.values.iter().map(|&v| v as Real).collect(),
    )
    .unwrap();
    let t = Tensor::from_vec(
        &[1, 1, d, h, w],
        s.target.labels.iter().map(|&v| v as Real).collect(),
    )
    .unwrap();
    for seed in 0..3 {
        let mut net = build_network(&tiny(), seed).unwrap();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
        let mut losses = Vec::new();
        for _ in 0..50 {
            net.zero_grad();
            let loss = soft_dice_loss(&net.forward(&x).unwrap(), &t, DICE_SMOOTH).unwrap();
            losses.push(loss.values()[0] as f64);
            loss.backward().unwrap();
            adam.step(net.params_mut()).unwrap();
        }
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "seed {seed}: {head} → {tail}");
    }
}

#[test]
fn schedules_are_reproducible_and_logged() {
    let data = sample_cases(&cases(2), &small_pre(), 4).unwrap();
    let schedule = make_schedule(ScheduleKind::ThreeStage, 1e-3, 1).unwrap();
    let (a, log) = run_schedule(&tiny(), &schedule, &data, 5).unwrap();
    let (b, _) = run_schedule(&tiny(), &schedule, &data, 5).unwrap();
    for (p, q) in a.params().iter().zip(b.params()) {
        assert_eq!(p.tensor.values(), q.tensor.values());
    }
    assert_eq!(log.stages.len(), 3);
    assert_eq!(log.boundaries().len(), 2);
    assert!(log.stages[1].kinds.contains(&SampleKind::PatchPositive));

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("log.jsonl");
    log.write_jsonl(&path).unwrap();
    assert_eq!(TrainLog::read_jsonl(&path).unwrap(), log);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 1 + log.steps.len() + 3);
    assert!(run_schedule(
        &tiny(),
        &make_schedule(ScheduleKind::Cascade, 1e-3, 1).unwrap(),
        &data,
        5
    )
    .is_err());
}

#[test]
fn cascade_stays_inside_the_liver_region() {
    let cs = cases(2);
    let (model, liver_log, tumor_log) =
        run_cascade(&tiny(), &cs, &small_pre(), &StageSpec::whole(1e-3, 1), 2, 6).unwrap();
    assert!(!liver_log.steps.is_empty() && !tumor_log.steps.is_empty());
    for c in &cs {
        let pred = cascade_predict(&model, &c.image, 0.5).unwrap();
        match pred.region {
            Some(r) => {
                assert_eq!(Some(r), liver_crop_region(&pred.liver, 2, 2));
                for (i, &l) in pred.tumor.labels.iter().enumerate() {
                    if l != 0 {
                        assert!(r.contains(tumorseg::volume::coords(c.image.dims, i)));
                    }
                }
            }
            None => assert_eq!(pred.tumor.count_nonzero(), 0),
        }
    }

    // a liver network that never fires leaves the tumor output empty
    let mut silent = model.liver.clone();
    let head = silent
        .params_mut()
        .iter_mut()
        .find(|p| p.name == "head.bias")
        .unwrap();
    head.tensor = Tensor::parameter(head.tensor.shape(), vec![-1e3 as Real]).unwrap();
    let quiet = CascadeModel {
        liver: silent,
        ..model
    };
    let pred = cascade_predict(&quiet, &cs[0].image, 0.5).unwrap();
    assert!(pred.region.is_none());
    assert_eq!(
        pred.tumor,
        Mask::empty(cs[0].image.dims, cs[0].image.spacing).unwrap()
    );
}
