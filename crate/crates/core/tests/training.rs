mod common;

use common::{dataset, small_data, small_env, small_train};
use egdp_core::autodiff::Tape;
use egdp_core::data::{build_dataset, generate};
use egdp_core::train::{item_loss, Ablation, Prepared, Trainer, INVERSE, VAE};
use egdp_core::vae::Forcing;
use egdp_core::Error;

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let ds = dataset(&small_env(8), &small_data(2, 1, 1));
    let cfg = small_train(15);
    let run = || {
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.run(&ds, None).unwrap();
        t.to_checkpoint().unwrap().encode().unwrap()
    };
    assert_eq!(run(), run());

    let mut other = Trainer::new(&egdp_core::train::TrainConfig { seed: 9, ..cfg.clone() }, &ds).unwrap();
    other.run(&ds, None).unwrap();
    assert_ne!(other.to_checkpoint().unwrap().encode().unwrap(), run());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let ds = dataset(&small_env(8), &small_data(2, 1, 1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(20);

    let mut whole = Trainer::new(&cfg, &ds).unwrap();
    whole.run(&ds, None).unwrap();

    let mut first = Trainer::new(&egdp_core::train::TrainConfig { steps: 8, ..cfg.clone() }, &ds).unwrap();
    first.run(&ds, None).unwrap();
    let path = dir.path().join("half.egdp");
    first.to_checkpoint().unwrap().save(&path).unwrap();

    let mut resumed = Trainer::load(&path).unwrap();
    resumed.config.steps = 20;
    resumed.run(&ds, None).unwrap();

    assert_eq!(resumed.losses, whole.losses);
    for ((_, a), (_, b)) in resumed.store.iter().zip(whole.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn zero_steps_writes_the_initialization() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(0);
    let init = Trainer::new(&cfg, &ds).unwrap();
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    let out = t.run(&ds, Some(dir.path())).unwrap();
    assert_eq!(out.checkpoints, vec![dir.path().join("final.egdp")]);
    let loaded = Trainer::load(&out.checkpoints[0]).unwrap();
    assert_eq!(loaded.step, 0);
    for ((_, a), (_, b)) in loaded.store.iter().zip(init.store.iter()) {
        assert_eq!(a.value, b.value);
    }
    let csv = std::fs::read_to_string(out.loss_csv.unwrap()).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn checkpoints_every_n_steps_and_loss_csv() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = egdp_core::train::TrainConfig {
        checkpoint_every: 4,
        ..small_train(10)
    };
    let out = Trainer::new(&cfg, &ds).unwrap().run(&ds, Some(dir.path())).unwrap();
    let names: Vec<_> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["ckpt_000004.egdp", "ckpt_000008.egdp", "final.egdp"]);
    let csv = std::fs::read_to_string(out.loss_csv.unwrap()).unwrap();
    assert!(csv.starts_with("step,L_ddpm,L_exp,L_inv,L_total\n"));
    assert_eq!(csv.lines().count(), 11);
}

#[test]
fn ablation_flags_round_trip() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    for name in ["none", "w/o-bf", "w/o-ca", "w/o-acc", "all"] {
        let ablation = Ablation::parse(name).unwrap();
        let cfg = egdp_core::train::TrainConfig {
            ablation,
            ..small_train(2)
        };
        let mut t = Trainer::new(&cfg, &ds).unwrap();
        t.run(&ds, None).unwrap();
        let bytes = t.to_checkpoint().unwrap().encode().unwrap();
        let back = Trainer::from_checkpoint(&egdp_core::io::Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.config.ablation, ablation, "{name}");
        assert_eq!(back.planner.net.config.use_cross_attention, !ablation.disable_cross_attn);
    }
    assert!(Ablation::parse("w/o-xyz").is_err());
}

#[test]
fn reported_total_is_the_weighted_sum() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    let cfg = egdp_core::train::TrainConfig { xi: 0.5, ..small_train(5) };
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    let prep = Prepared::new(&ds).unwrap();
    for _ in 0..5 {
        let l = t.train_step(&ds, &prep).unwrap();
        assert!((l.total - (l.ddpm + 0.5 * (l.exp + l.inv))).abs() <= 1e-12 * l.total.abs().max(1.0));
    }
}

fn grads_for(t: &Trainer, ds: &egdp_core::data::Dataset, forcing: Forcing, xi: f64) -> Vec<(String, f64)> {
    let prep = Prepared::new(ds).unwrap();
    let mut trainer = t.clone();
    let mut draw = trainer.draw_batch(ds.samples.len()).remove(0);
    draw.forcing = forcing;
    draw.dropped = false;
    let mut tape = Tape::new(&t.store);
    let item = prep.item(ds, draw.sample);
    let l = item_loss(&mut tape, &t.planner, &item, &draw, xi).unwrap();
    let grads = tape.backward(l.total).unwrap().into_param_grads();
    t.store
        .iter()
        .map(|(id, p)| {
            let norm = grads[id.index()].as_ref().map_or(0.0, |g| g.data().iter().map(|x| x.abs()).sum());
            (p.name.clone(), norm)
        })
        .collect()
}

fn sum_prefix(g: &[(String, f64)], prefix: &str) -> f64 {
    g.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, v)| v).sum()
}

#[test]
fn zero_xi_decouples_the_auxiliary_heads() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    let t = Trainer::new(&small_train(1), &ds).unwrap();

    let g = grads_for(&t, &ds, Forcing::Teacher, 0.0);
    assert_eq!(sum_prefix(&g, VAE), 0.0);
    assert_eq!(sum_prefix(&g, INVERSE), 0.0);
    assert!(sum_prefix(&g, "theta") > 0.0);

    // Decode forcing routes the diffusion loss through the decoder only.
    let g = grads_for(&t, &ds, Forcing::Decode, 0.0);
    assert_eq!(sum_prefix(&g, INVERSE), 0.0);
    assert!(sum_prefix(&g, "phi.dec") > 0.0);

    let g = grads_for(&t, &ds, Forcing::Teacher, 1.0);
    assert!(sum_prefix(&g, VAE) > 0.0);
    assert!(sum_prefix(&g, INVERSE) > 0.0);
}

#[test]
fn disabled_blend_isolates_the_vae() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    let cfg = egdp_core::train::TrainConfig {
        ablation: Ablation::parse("w/o-bf").unwrap(),
        ..small_train(1)
    };
    let t = Trainer::new(&cfg, &ds).unwrap();
    // Even a decode-forcing draw must leave the VAE untouched by L_ddpm.
    let g = grads_for(&t, &ds, Forcing::Decode, 0.0);
    assert_eq!(sum_prefix(&g, VAE), 0.0);
}

#[test]
fn toy_training_halves_the_loss() {
    let env = small_env(16);
    let ds = dataset(&env, &small_data(2, 1, 2));
    assert_eq!(ds.samples.len(), 8);
    let mut t = Trainer::new(&small_train(2000), &ds).unwrap();
    t.run(&ds, None).unwrap();
    let totals: Vec<f64> = t.losses.iter().map(|l| l.total).collect();
    let start = window_mean(&totals[..10]);
    let end = window_mean(&totals[totals.len() - 10..]);
    assert!(end <= 0.5 * start, "start {start} end {end}");
}

#[test]
fn single_trajectory_overfits() {
    let env = small_env(16);
    let (experts, _) = generate(&env, &small_data(1, 0, 0)).unwrap();
    let ds = build_dataset(&[], &experts).unwrap();
    assert_eq!(ds.samples.len(), 1);
    let cfg = egdp_core::train::TrainConfig {
        p_uncond: 0.0,
        batch_size: 8,
        ..small_train(500)
    };
    let mut t = Trainer::new(&cfg, &ds).unwrap();
    t.run(&ds, None).unwrap();
    let ddpm: Vec<f64> = t.losses.iter().map(|l| l.ddpm).collect();
    let start = window_mean(&ddpm[..10]);
    let end = window_mean(&ddpm[ddpm.len() - 10..]);
    assert!(end < 0.1 * start, "start {start} end {end}");
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = dataset(&small_env(8), &small_data(1, 1, 1));
    for cfg in [
        egdp_core::train::TrainConfig { xi: 0.0, ..small_train(1) },
        egdp_core::train::TrainConfig { delta: 1.5, ..small_train(1) },
        egdp_core::train::TrainConfig { batch_size: 0, ..small_train(1) },
    ] {
        assert!(matches!(Trainer::new(&cfg, &ds), Err(Error::Config { .. })));
    }
}
