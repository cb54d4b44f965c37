use carreg::simnet::ArchSpec;
use carreg::synthdeform::synth_pair;
use carreg::trainer::*;

fn toy_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        arch: ArchSpec {
            levels: 2,
            enc_channels: 4,
            dec_channels: 8,
            proj_channels: 4,
            ..ArchSpec::default()
        },
        ..TrainConfig::default()
    }
}

fn toy_pairs(n: u64) -> Vec<TrainPair> {
    (0..n).map(|i| synth_pair(3, i, 32, 32, 3).unwrap().into()).collect()
}

#[test]
fn duplicated_view_matches_single_pass() {
    let cfg = TrainConfig {
        lambda2: 0.0,
        ..toy_cfg()
    };
    let mut model = initial_model(&cfg).unwrap();
    // a non-zero head so every layer receives gradient
    let head = model.names().iter().position(|n| n == "head.w").unwrap();
    for (i, v) in model.params_mut()[head].data_mut().iter_mut().enumerate() {
        *v = 0.01 * ((i % 7) as f64 - 3.0);
    }
    let p = &toy_pairs(1)[0];
    let views = sample_views(&cfg, 17, &p.moving, &p.fixed).unwrap();
    let twin = vec![views[0].clone(), views[0].clone()];
    let (l2, g2) = sample_gradients(&model, &p.moving, &p.fixed, &twin, &cfg).unwrap();
    let (l1, g1) = sample_gradients(&model, &p.moving, &p.fixed, &twin[..1], &cfg).unwrap();
    assert!((l1.total - l2.total).abs() < 1e-12);
    let worst = g1
        .iter()
        .flatten()
        .zip(g2.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst <= 1e-9, "{}", worst);
}

#[test]
fn no_clr_uses_one_plain_view() {
    let cfg = TrainConfig {
        no_clr: true,
        augment: false,
        ..toy_cfg()
    };
    let p = &toy_pairs(1)[0];
    let v = sample_views(&cfg, 1, &p.moving, &p.fixed).unwrap();
    assert_eq!(v, vec![(p.moving.clone(), p.fixed.clone())]);
    let model = initial_model(&cfg).unwrap();
    let (l, _) = sample_gradients(&model, &p.moving, &p.fixed, &v, &cfg).unwrap();
    assert_eq!(l.contrast, 0.0);
}

#[test]
fn step_is_reproducible() {
    let cfg = toy_cfg();
    let pairs = toy_pairs(4);
    let run = |threads| {
        let pool = thread_pool(threads).unwrap();
        let mut model = initial_model(&cfg).unwrap();
        let mut adam = AdamState::new(model.params());
        let batch: Vec<_> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (SampleId { epoch: 0, index: i }, p))
            .collect();
        let l = train_step(&mut model, &batch, &cfg, &mut adam, 1e-4, &pool).unwrap();
        (l, model)
    };
    let (la, ma) = run(1);
    let (lb, mb) = run(3);
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
}

fn dataset_loss(model: &carreg::simnet::CarModel, cfg: &TrainConfig, pairs: &[TrainPair]) -> f64 {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let v = sample_views(cfg, 1000 + i as u64, &p.moving, &p.fixed).unwrap();
            sample_gradients(model, &p.moving, &p.fixed, &v, cfg).unwrap().0.total
        })
        .sum::<f64>()
        / pairs.len() as f64
}

#[test]
fn fifty_steps_reduce_the_loss() {
    let cfg = toy_cfg();
    let pairs = toy_pairs(20);
    let pool = thread_pool(1).unwrap();
    let mut model = initial_model(&cfg).unwrap();
    let before = dataset_loss(&model, &cfg, &pairs);
    let mut adam = AdamState::new(model.params());
    for step in 0..50 {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|k| {
                let i = (step * cfg.batch_size + k) % pairs.len();
                (SampleId { epoch: step, index: i }, &pairs[i])
            })
            .collect();
        train_step(&mut model, &batch, &cfg, &mut adam, cfg.lr_init, &pool).unwrap();
    }
    let after = dataset_loss(&model, &cfg, &pairs);
    assert!(after < before, "{} !< {}", after, before);
}

#[test]
fn train_pairs_logs_every_step_and_validates() {
    let cfg = TrainConfig {
        epochs: 2,
        ..toy_cfg()
    };
    let pairs = toy_pairs(6);
    let out = train_pairs(&cfg, &pairs, &pairs[..2], 1, &mut ()).unwrap();
    assert_eq!(out.log.len(), 2 * 2);
    assert_eq!(out.val_dice.len(), 2);
    assert!(out.log.iter().all(|r| r.loss.total.is_finite()));
    assert_eq!(out.log[0].lr, 1e-4);
    assert_eq!(out.log[3].lr, 1e-4);
    let bad = toy_pairs(1)
        .into_iter()
        .map(|mut p| {
            p.moving = carreg::Image2D::from_fn(30, 30, |_, _| 0.5).unwrap();
            p
        })
        .collect::<Vec<_>>();
    assert!(train_pairs(&cfg, &bad, &[], 1, &mut ()).is_err());
}

#[test]
fn register_fresh_model_is_identity() {
    let cfg = toy_cfg();
    let model = initial_model(&cfg).unwrap();
    let p = &toy_pairs(1)[0];
    let (mm, _) = p.masks.as_ref().unwrap();
    let r = register(&model, &p.moving, &p.moving, Some((mm, mm))).unwrap();
    assert_eq!(r.warped, p.moving);
    let m = r.metrics.unwrap();
    assert_eq!((m.dice, m.folding_pct), (1.0, 0.0));
}
