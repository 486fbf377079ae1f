mod common;

use common::{max_abs, random_image, random_sample, tiny_config, tiny_model};
use proptest::prelude::*;
use vif_core::attention::AttentionParams;
use vif_core::model::{embed_sequence, encode_image, forward, generate, visual_tokens, GenerationConfig, Mode, ModelParams};
use vif_core::synthgrid::{GridImage, BOS, RECALL};
use vif_core::tensor::{self, Precision, Rng, Tensor, LN_EPS};
use vif_core::vif::{self, VifParams};

const F64: Precision = Precision::F64;

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (k, n) = w.dims2();
    (0..n).map(|j| (0..k).map(|i| x[i] * w.at(i, j)).sum()).collect()
}

fn ln(x: &[f64], g: &Tensor, b: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter().enumerate().map(|(i, v)| (v - mu) / (var + LN_EPS).sqrt() * g.data()[i] + b.data()[i]).collect()
}

/// Multi-head attention with explicit loops, no masking.
fn mha(q_src: &Rows, kv_src: &Rows, p: &AttentionParams) -> Rows {
    let d = p.w_q.rows();
    let dh = d / p.n_heads;
    let ks: Rows = kv_src.iter().map(|x| mat(x, &p.w_k)).collect();
    let vs: Rows = kv_src.iter().map(|x| mat(x, &p.w_v)).collect();
    q_src
        .iter()
        .map(|x| {
            let q = mat(x, &p.w_q);
            let mut ctx = vec![0.0; d];
            for h in 0..p.n_heads {
                let r = h * dh..(h + 1) * dh;
                let s: Vec<f64> = ks
                    .iter()
                    .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, v) in vs.iter().enumerate() {
                    for c in r.clone() {
                        ctx[c] += e[j] / z * v[c];
                    }
                }
            }
            mat(&ctx, &p.w_o)
        })
        .collect()
}

fn vif_oracle(z_v: &Tensor, h: &[f64], p: &VifParams) -> (Vec<f64>, Vec<f64>) {
    let zv = rows(z_v);
    let refined: Rows = if p.enable_self_attn {
        let att = mha(&zv, &zv, &p.self_attn);
        zv.iter()
            .zip(&att)
            .map(|(a, b)| ln(&a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>(), &p.refine_gamma, &p.refine_beta))
            .collect()
    } else {
        zv
    };
    let z_h = mha(&vec![h.to_vec()], &refined, &p.cross_attn).remove(0);
    let sum: Vec<f64> = z_h.iter().zip(h).map(|(a, b)| a + b).collect();
    let fused = ln(&sum, &p.fusion_gamma, &p.fusion_beta);
    (z_h, fused)
}

#[test]
fn encode_image_sums_the_three_tables() {
    for seed in 0..5 {
        let (m, _) = tiny_model(seed, F64);
        let mut rng = Rng::new(seed + 50);
        let img = random_image(3, 4, &mut rng);
        let v = encode_image(&img, &m).unwrap();
        assert_eq!(v.shape(), [9, 8]);
        for i in 0..9 {
            let (r, c) = (i / 3, i % 3);
            for j in 0..8 {
                let want = m.symbol_embed.at(img.cells[i], j) + m.grid_row.at(r, j) + m.grid_col.at(c, j);
                assert_eq!(v.at(i, j).to_bits(), want.to_bits(), "cell {i} dim {j}");
            }
        }
        let z = visual_tokens(&img, &m).unwrap();
        for i in 0..9 {
            let want: Vec<f64> = mat(v.row(i), &m.connector_w).iter().zip(m.connector_b.data()).map(|(a, b)| a + b).collect();
            assert!(max_abs(z.row(i), &want) < 1e-12);
        }
    }
    let (m, _) = tiny_model(0, F64);
    assert!(encode_image(&GridImage { side: 4, cells: vec![0; 16] }, &m).is_err());
    assert!(encode_image(&GridImage { side: 2, cells: vec![0, 1, 2, 9] }, &m).is_err());
}

#[test]
fn vif_step_matches_loop_oracle() {
    for seed in 0..10 {
        for self_attn in [true, false] {
            let cfg = tiny_config(F64);
            let mut rng = Rng::new(seed);
            let m = ModelParams::init(&cfg, &mut rng).unwrap();
            let mut p = VifParams::init(16, 4, self_attn, F64, &mut rng).unwrap();
            for t in [&mut p.refine_gamma, &mut p.refine_beta, &mut p.fusion_gamma, &mut p.fusion_beta] {
                for x in t.data_mut() {
                    *x += rng.uniform(-0.3, 0.3);
                }
            }
            let z_v = visual_tokens(&random_image(3, 4, &mut rng), &m).unwrap();
            let h = Tensor::uniform(&[1, 16], 1.0, F64, &mut rng);
            let st = vif::vif_step(&h, &vif::build_cache(&z_v, &p).unwrap(), &p).unwrap();
            let (z_h, fused) = vif_oracle(&z_v, h.data(), &p);
            assert!(max_abs(st.z_h.data(), &z_h) < 1e-12, "seed {seed}");
            assert!(max_abs(st.h_fused.data(), &fused) < 1e-12, "seed {seed}");
            let (batch, _) = vif::forward_batch(&z_v, &h, &p).unwrap();
            assert!(max_abs(batch.data(), &fused) < 1e-12);
        }
    }
}

/// Rebuilds every decoding step with a teacher-forced pass over the
/// generated prefix and compares with what generation recorded.
#[test]
fn traces_replay_under_teacher_forcing() {
    for seed in 0..5 {
        let (m, p) = tiny_model(seed, F64);
        let mut rng = Rng::new(seed + 7);
        let img = random_image(3, 4, &mut rng);
        let prompt = [BOS, RECALL];
        for mode in [Mode::Baseline, Mode::Vif] {
            let tr = generate(&img, &prompt, &m, Some(&p), &GenerationConfig::new(mode, 10)).unwrap();
            let toks = tr.tokens();
            let mut text = prompt.to_vec();
            text.extend_from_slice(&toks[..toks.len() - 1]);
            let z_v = visual_tokens(&img, &m).unwrap();
            let hs = forward(&embed_sequence(&z_v, &text, &m).unwrap(), &m).unwrap();
            let first = z_v.rows() + prompt.len() - 1;
            for (l, st) in tr.steps.iter().enumerate() {
                let h = hs.row(first + l);
                assert!(max_abs(&st.h, h) < 1e-9, "seed {seed} step {l}");
                let fused = match mode {
                    Mode::Vif => {
                        let (z_h, fused) = vif_oracle(&z_v, h, &p);
                        assert!(max_abs(st.z_h.as_ref().unwrap(), &z_h) < 1e-9);
                        fused
                    }
                    _ => h.to_vec(),
                };
                assert!(max_abs(&st.h_fused, &fused) < 1e-9);
                let logits = mat(&fused, &m.w_o);
                let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|x| (x - mx).exp()).sum();
                let probs: Vec<f64> = logits.iter().map(|x| (x - mx).exp() / z).collect();
                assert!(max_abs(&st.probs, &probs) < 1e-9);
                assert_eq!(st.token, tensor::argmax(&st.probs));
            }
        }
    }
}

#[test]
fn passthrough_is_bit_identical_to_baseline() {
    for seed in 0..20 {
        for precision in [Precision::F32, F64] {
            let (m, p) = tiny_model(seed, precision);
            let mut rng = Rng::new(seed + 1000);
            let img = random_image(3, 4, &mut rng);
            let base = generate(&img, &[BOS, RECALL], &m, None, &GenerationConfig::new(Mode::Baseline, 12)).unwrap();
            let pass = generate(&img, &[BOS, RECALL], &m, Some(&p), &GenerationConfig::new(Mode::Passthrough, 12)).unwrap();
            assert!(base.bit_eq(&pass), "seed {seed}");
        }
    }
}

#[test]
fn former_output_depends_on_the_image() {
    for seed in 0..10 {
        let (m, p) = tiny_model(seed, F64);
        let mut rng = Rng::new(seed + 300);
        let a = random_image(3, 4, &mut rng);
        let mut b = a.clone();
        let i = rng.below(9);
        b.cells[i] = (b.cells[i] + 1) % 4;
        let h = Tensor::uniform(&[1, 16], 1.0, F64, &mut rng);
        let za = vif::retrieve(&h, &vif::build_cache(&visual_tokens(&a, &m).unwrap(), &p).unwrap(), &p).unwrap();
        let zb = vif::retrieve(&h, &vif::build_cache(&visual_tokens(&b, &m).unwrap(), &p).unwrap(), &p).unwrap();
        assert!(max_abs(za.data(), zb.data()) > 1e-6, "seed {seed}");
    }
}

#[test]
fn generation_respects_limits() {
    let (m, p) = tiny_model(1, F64);
    let img = random_image(3, 4, &mut Rng::new(2));
    let tr = generate(&img, &[BOS, RECALL], &m, Some(&p), &GenerationConfig::new(Mode::Vif, 3)).unwrap();
    assert!(tr.steps.len() <= 3);
    let mut cfg = GenerationConfig::new(Mode::Vif, 7);
    cfg.stop_at_eos = false;
    assert_eq!(generate(&img, &[BOS, RECALL], &m, Some(&p), &cfg).unwrap().steps.len(), 7);
    assert!(generate(&img, &[BOS, RECALL], &m, Some(&p), &GenerationConfig::new(Mode::Vif, 0)).is_err());
    // 9 visual + 2 prompt + 30 new exceeds max_seq_len 32
    let mut long = GenerationConfig::new(Mode::Baseline, 30);
    long.stop_at_eos = false;
    assert!(generate(&img, &[BOS, RECALL], &m, None, &long).is_err());
    let s = random_sample(3, 4, &mut Rng::new(3));
    assert_eq!(s.targets.len(), 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hidden_states_are_causal(seed in any::<u64>(), cut in 0usize..14) {
        let (m, _) = tiny_model(seed % 8, F64);
        let mut rng = Rng::new(seed);
        let n = 15;
        let z = Tensor::uniform(&[n, 16], 1.0, F64, &mut rng);
        let mut y = z.clone();
        for v in &mut y.data_mut()[(cut + 1) * 16..] {
            *v += rng.uniform(-1.0, 1.0);
        }
        let a = forward(&z, &m).unwrap();
        let b = forward(&y, &m).unwrap();
        for i in 0..=cut {
            prop_assert!(max_abs(a.row(i), b.row(i)) < 1e-12, "row {} changed", i);
        }
        prop_assert!(max_abs(a.row(n - 1), b.row(n - 1)) > 0.0);
    }
}
