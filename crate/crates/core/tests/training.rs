mod common;

use common::{random_sample, snapshot, tiny_model};
use vif_core::model::{ModelConfig, ModelParams};
use vif_core::synthgrid::{gen_dataset, TaskSpec};
use vif_core::tensor::{Precision, Rng};
use vif_core::trainer::{analytic_grads, grad_check_all, train_stage, GradCheckOptions, StageSpec, Trainable};
use vif_core::vif::VifParams;

const F64: Precision = Precision::F64;

#[test]
fn corrupted_gradient_is_caught() {
    let (mut m, mut p) = tiny_model(3, F64);
    let s = random_sample(3, 4, &mut Rng::new(1));
    let opts = GradCheckOptions { max_coords: Some(6), ..Default::default() };
    let clean = analytic_grads(&m, Some(&p), &s).unwrap();
    let ok = grad_check_all(&mut m, Some(&mut p), &s, Some(&clean), &opts).unwrap();
    assert!(ok.max_rel_err() <= 1e-4, "{}", ok.to_text());
    for target in ["decoder.block1.ff.w1", "vif.cross_attn.w_v", "head.w_o"] {
        let mut bad = clean.clone();
        let g = &mut bad.iter_mut().find(|(n, _)| n == target).unwrap().1;
        for x in g.data_mut() {
            *x *= 1.1;
        }
        let r = grad_check_all(&mut m, Some(&mut p), &s, Some(&bad), &opts).unwrap();
        assert!(r.max_rel_err() > 1e-2, "{target}: {}", r.max_rel_err());
        assert_eq!(r.worst().unwrap().name, target);
    }
}

fn small_task() -> (ModelConfig, Vec<vif_core::synthgrid::TaskSample>) {
    let cfg = ModelConfig {
        n_symbols: 4,
        vocab_size: 8,
        max_grid_side: 4,
        d_vision: 16,
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_mult: 2,
        max_seq_len: 64,
        precision: Precision::F32,
    };
    let data = gen_dataset(&TaskSpec { side: 4, n_symbols: 4, n_samples: 256 }, 8, 5).unwrap();
    (cfg, data)
}

fn init(cfg: &ModelConfig, seed: u64) -> (ModelParams, VifParams) {
    let mut rng = Rng::new(seed);
    let m = ModelParams::init(cfg, &mut rng).unwrap();
    let v = VifParams::init(cfg.d_model, 4, true, cfg.precision, &mut rng).unwrap();
    (m, v)
}

#[test]
fn warmup_stage_leaves_trunk_untouched() {
    let (cfg, data) = small_task();
    let (mut m, mut v) = init(&cfg, 1);
    let before = snapshot(m.named_tensors());
    let vif_before = snapshot(v.named_tensors());
    let mut stage = StageSpec::warmup(1e-2);
    stage.max_steps = Some(10);
    train_stage(&mut m, Some(&mut v), &data, &stage, 3).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(snapshot(m.named_tensors())) {
        if name.starts_with("head.") {
            assert_ne!(*a, b, "{name} should train");
        } else {
            assert_eq!(*a, b, "{name} changed during warm-up");
        }
    }
    for ((name, a), (_, b)) in vif_before.iter().zip(snapshot(v.named_tensors())) {
        assert_ne!(*a, b, "{name} should train");
    }
}

#[test]
fn prefix_mask_freezes_everything_else() {
    let (cfg, data) = small_task();
    let (mut m, mut v) = init(&cfg, 2);
    let before = snapshot(m.named_tensors());
    let mut stage = StageSpec::full(1e-2);
    stage.trainable = Trainable::parse("decoder.block0.").unwrap();
    stage.max_steps = Some(4);
    let vif_before = snapshot(v.named_tensors());
    train_stage(&mut m, Some(&mut v), &data, &stage, 3).unwrap();
    for ((name, a), (_, b)) in before.iter().zip(snapshot(m.named_tensors())) {
        assert_eq!(name.starts_with("decoder.block0."), *a != b, "{name}");
    }
    assert_eq!(vif_before, snapshot(v.named_tensors()));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (cfg, data) = small_task();
    let (mut m, mut v) = init(&cfg, 3);
    let (m0, v0) = (m.clone(), v.clone());
    let mut stage = StageSpec::full(0.0);
    stage.max_steps = Some(5);
    let log = train_stage(&mut m, Some(&mut v), &data, &stage, 1).unwrap();
    assert_eq!(log.rows.len(), 5);
    assert_eq!(snapshot(m.named_tensors()), snapshot(m0.named_tensors()));
    assert_eq!(snapshot(v.named_tensors()), snapshot(v0.named_tensors()));
}

#[test]
fn training_is_seeded() {
    let (cfg, data) = small_task();
    let run = || {
        let (mut m, mut v) = init(&cfg, 4);
        let mut stage = StageSpec::full(3e-3);
        stage.max_steps = Some(6);
        let log = train_stage(&mut m, Some(&mut v), &data, &stage, 9).unwrap();
        (log, snapshot(m.named_tensors()))
    };
    assert_eq!(run(), run());
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let (cfg, data) = small_task();
    let (mut m, mut v) = init(&cfg, 5);
    let mut stage = StageSpec::full(3e-3);
    stage.epochs = 10;
    stage.max_steps = Some(200);
    let log = train_stage(&mut m, Some(&mut v), &data, &stage, 2).unwrap();
    assert_eq!(log.rows.len(), 200);
    let (head, tail) = log.head_tail_loss(20).unwrap();
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    assert!(log.rows.iter().all(|r| r.loss.is_finite()));
}

#[test]
fn invalid_stage_is_rejected() {
    let (cfg, data) = small_task();
    let (mut m, _) = init(&cfg, 6);
    let mut stage = StageSpec::full(1e-3);
    stage.batch_size = 0;
    assert!(train_stage(&mut m, None, &data, &stage, 0).is_err());
    stage = StageSpec::full(f64::NAN);
    assert!(train_stage(&mut m, None, &data, &stage, 0).is_err());
    assert!(train_stage(&mut m, None, &[], &StageSpec::full(1e-3), 0).is_err());
}

#[test]
fn truncated_backward_keeps_head_and_former_gradients() {
    use vif_core::model::{loss_and_grads, Gradients};
    for seed in 0..3 {
        let (m, v) = tiny_model(seed, F64);
        let s = random_sample(3, 4, &mut Rng::new(seed + 40));
        let mut full = Gradients::zeros(&m, Some(&v));
        let mut cut = Gradients::zeros(&m, Some(&v));
        cut.trunk_frozen = true;
        let a = loss_and_grads(&m, Some(&v), &s, Some(&mut full)).unwrap();
        let b = loss_and_grads(&m, Some(&v), &s, Some(&mut cut)).unwrap();
        assert_eq!(a, b);
        for ((name, x), (_, y)) in full.named_tensors().into_iter().zip(cut.named_tensors()) {
            if name.starts_with("vif.") || name.starts_with("head.") {
                assert!(x.bit_eq(y), "{name}");
            } else {
                assert!(y.data().iter().all(|&g| g == 0.0), "{name}");
            }
        }
    }
}
