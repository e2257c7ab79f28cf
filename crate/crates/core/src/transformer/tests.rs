use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{finite_diff_check, DEFAULT_STEP};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 11,
        max_seq_len: 12,
        layer_norm_eps: 1e-5,
    }
}

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

fn random_prefix(cfg: &ModelConfig, p: usize, seed: u64) -> PrefixKV<f64> {
    let shape = [cfg.n_heads, p, cfg.d_head()];
    PrefixKV {
        layers: (0..cfg.n_layers)
            .map(|l| {
                (
                    random(&shape, seed + 2 * l as u64, 1.0),
                    random(&shape, seed + 2 * l as u64 + 1, 1.0),
                )
            })
            .collect(),
    }
}

/// Model with non-trivial gains and biases so every parameter matters.
fn perturbed(cfg: &ModelConfig, seed: u64) -> LmParams<f64> {
    let mut m = LmParams::<f64>::init_with_std(cfg, seed, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for e in m.store_mut().entries_mut() {
        if e.name.ends_with(".b") || e.name.ends_with(".g") {
            for v in e.tensor.data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    m
}

// ---- plain-loop reference implementation -------------------------------

fn mat(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.by_name(name).unwrap().data().to_vec()
}

fn linear(x: &[Vec<f64>], w: &[f64], b: Option<&[f64]>, din: usize, dout: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let s: f64 = (0..din).map(|i| row[i] * w[i * dout + j]).sum();
                    s + b.map_or(0.0, |b| b[j])
                })
                .collect()
        })
        .collect()
}

fn ln(x: &[Vec<f64>], g: &[f64], b: &[f64], eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Logits computed with explicit loops; the prefix enters each layer as
/// extra key/value rows ahead of the sequence keys.
fn reference_logits(m: &LmParams<f64>, tokens: &[usize], prefix: Option<&PrefixKV<f64>>) -> Vec<Vec<f64>> {
    let cfg = m.config();
    let s = m.store();
    let (d, f, h, dh) = (cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.d_head());
    let wte = mat(s, "wte");
    let wpe = mat(s, "wpe");
    let t = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| (0..d).map(|j| wte[tok * d + j] + wpe[i * d + j]).collect())
        .collect();
    for l in 0..cfg.n_layers {
        let n = |k: &str| mat(s, &format!("h.{l}.{k}"));
        let a = ln(&x, &n("ln_1.g"), &n("ln_1.b"), cfg.layer_norm_eps);
        let q = linear(&a, &n("attn.q.w"), Some(&n("attn.q.b")), d, d);
        let k = linear(&a, &n("attn.k.w"), None, d, d);
        let v = linear(&a, &n("attn.v.w"), Some(&n("attn.v.b")), d, d);
        let mut ctx = vec![vec![0.0; d]; t];
        for head in 0..h {
            // explicit concatenation: prefix rows then causal sequence rows
            let mut keys: Vec<Vec<f64>> = Vec::new();
            let mut vals: Vec<Vec<f64>> = Vec::new();
            let p = prefix.map_or(0, |p| p.len());
            if let Some(pre) = prefix {
                let (pk, pv) = &pre.layers[l];
                for slot in 0..p {
                    let off = (head * p + slot) * dh;
                    keys.push(pk.data()[off..off + dh].to_vec());
                    vals.push(pv.data()[off..off + dh].to_vec());
                }
            }
            for j in 0..t {
                keys.push(k[j][head * dh..(head + 1) * dh].to_vec());
                vals.push(v[j][head * dh..(head + 1) * dh].to_vec());
            }
            for i in 0..t {
                let qi = &q[i][head * dh..(head + 1) * dh];
                let visible = p + i + 1;
                let scores: Vec<f64> = keys[..visible]
                    .iter()
                    .map(|kk| qi.iter().zip(kk).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (w, vv) in e.iter().zip(&vals[..visible]) {
                    for c in 0..dh {
                        ctx[i][head * dh + c] += w / z * vv[c];
                    }
                }
            }
        }
        let o = linear(&ctx, &n("attn.o.w"), Some(&n("attn.o.b")), d, d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += o[i][j];
            }
        }
        let a = ln(&x, &n("ln_2.g"), &n("ln_2.b"), cfg.layer_norm_eps);
        let u: Vec<Vec<f64>> = linear(&a, &n("mlp.fc.w"), Some(&n("mlp.fc.b")), d, f)
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let o = linear(&u, &n("mlp.proj.w"), Some(&n("mlp.proj.b")), f, d);
        for i in 0..t {
            for j in 0..d {
                x[i][j] += o[i][j];
            }
        }
    }
    let x = ln(&x, &mat(s, "ln_f.g"), &mat(s, "ln_f.b"), cfg.layer_norm_eps);
    x.iter()
        .map(|row| {
            (0..cfg.vocab_size)
                .map(|tok| (0..d).map(|j| row[j] * wte[tok * d + j]).sum())
                .collect()
        })
        .collect()
}

fn assert_close(a: &Tensor<f64>, b: &[Vec<f64>], tol: f64) {
    let flat: Vec<f64> = b.iter().flatten().copied().collect();
    assert_eq!(a.numel(), flat.len());
    for (x, y) in a.data().iter().zip(&flat) {
        assert!((x - y).abs() < tol, "{x} vs {y}");
    }
}

// ---- tests --------------------------------------------------------------

#[test]
fn forward_matches_loop_reference_with_and_without_prefix() {
    let cfg = tiny();
    let m = perturbed(&cfg, 3);
    let tokens = [1, 5, 2, 9, 0, 10];
    let out = m.forward(&tokens, None, None, None).unwrap();
    assert_eq!(out.logits.shape(), &[tokens.len(), cfg.vocab_size]);
    assert_close(&out.logits, &reference_logits(&m, &tokens, None), 1e-9);

    let prefix = random_prefix(&cfg, 3, 17);
    let out = m.forward(&tokens, None, Some(&prefix), None).unwrap();
    assert_close(&out.logits, &reference_logits(&m, &tokens, Some(&prefix)), 1e-9);
}

#[test]
fn empty_prefix_is_identical_to_no_prefix() {
    let cfg = tiny();
    let m = LmParams::<f32>::init(&cfg, 1).unwrap();
    let tokens = [3, 4, 5, 6];
    let a = m.forward(&tokens, None, None, None).unwrap();
    let b = m
        .forward(&tokens, None, Some(&PrefixKV::zeros(&cfg, 0)), None)
        .unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn prefix_equal_to_first_token_kv_matches_concatenated_attention() {
    let (h, dh, t) = (2, 3, 4);
    let d = h * dh;
    let q = random(&[t, d], 1, 1.0);
    let k = random(&[t, d], 2, 1.0);
    let v = random(&[t, d], 3, 1.0);
    // prefix slots are copies of the first sequence token's key/value
    let to_heads = |x: &Tensor<f64>| {
        Tensor::from_fn(&[h, 2, dh], |i| {
            let (head, c) = (i / (2 * dh), i % dh);
            x.data()[head * dh + c]
        })
    };
    let mut tape = Tape::new();
    let (qv, kv, vv) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let pk = tape.constant(to_heads(&k));
    let pv = tape.constant(to_heads(&v));
    let with_prefix = tape.attention(qv, kv, vv, Some((pk, pv)), h).unwrap();

    // explicit concatenation [k0; k0; k] as ordinary keys; the offset rule
    // makes query i see both copies plus sequence keys ≤ i
    let k0 = tape.select(kv, (0..d).collect(), &[1, d]).unwrap();
    let v0 = tape.select(vv, (0..d).collect(), &[1, d]).unwrap();
    let kc = tape.concat_rows(&[k0, k0, kv]).unwrap();
    let vc = tape.concat_rows(&[v0, v0, vv]).unwrap();
    let explicit = tape.attention(qv, kc, vc, None, h).unwrap();
    for (a, b) in tape.value(with_prefix).data().iter().zip(tape.value(explicit).data()) {
        assert!((a - b).abs() < 1e-12);
    }

    // position 0 with P=3 attends to exactly 4 slots
    let pk3 = tape.constant(random(&[h, 3, dh], 4, 1.0));
    let pv3 = tape.constant(random(&[h, 3, dh], 5, 1.0));
    let a = tape.attention(qv, kv, vv, Some((pk3, pv3)), h).unwrap();
    let probs = tape.attention_weights(a).unwrap();
    let width = 3 + t;
    for head in 0..h {
        let row = &probs[head * t * width..head * t * width + width];
        assert_eq!(row.iter().filter(|&&p| p != 0.0).count(), 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn attention_rejects_head_dimension_mismatch() {
    let mut tape = Tape::<f32>::new();
    let q = tape.constant(Tensor::zeros(&[2, 6]));
    let pk = tape.constant(Tensor::zeros(&[2, 1, 4]));
    assert!(tape.attention(q, q, q, Some((pk, pk)), 2).is_err());
    assert!(tape.attention(q, q, q, None, 4).is_err());
}

#[test]
fn causal_future_tokens_do_not_change_past_logits() {
    let cfg = tiny();
    let m = perturbed(&cfg, 5);
    let prefix = random_prefix(&cfg, 2, 9);
    let a = m.forward(&[1, 2, 3, 4, 5], None, Some(&prefix), None).unwrap();
    let b = m.forward(&[1, 2, 3, 8, 0], None, Some(&prefix), None).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(&a.logits.data()[..3 * v], &b.logits.data()[..3 * v]);
    assert_ne!(&a.logits.data()[3 * v..], &b.logits.data()[3 * v..]);
}

#[test]
fn prefix_gets_no_positional_embedding_and_does_not_shift_positions() {
    // Zeroing the positional rows beyond the sequence length leaves outputs
    // unchanged even with a long prefix.
    let cfg = tiny();
    let mut m = perturbed(&cfg, 6);
    let prefix = random_prefix(&cfg, 5, 2);
    let tokens = [4, 3, 2];
    let before = m.forward(&tokens, None, Some(&prefix), None).unwrap();
    let id = m.store().id("wpe").unwrap();
    let d = cfg.d_model;
    m.store_mut().get_mut(id).data_mut()[tokens.len() * d..].fill(0.0);
    let after = m.forward(&tokens, None, Some(&prefix), None).unwrap();
    assert_eq!(before.logits, after.logits);
}

#[test]
fn embedding_override_equals_token_lookup() {
    let cfg = tiny();
    let m = perturbed(&cfg, 8);
    let tokens = [7, 1, 4];
    let d = cfg.d_model;
    let table = m.embedding_table();
    let embeds = Tensor::from_fn(&[3, d], |i| table.data()[tokens[i / d] * d + i % d]);
    let a = m.forward(&tokens, None, None, None).unwrap();
    let b = m.forward(&[], Some((&embeds, 0)), None, None).unwrap();
    assert_eq!(a.logits, b.logits);
}

#[test]
fn prompt_rows_are_unpositioned_and_cache_continues_positions() {
    let cfg = tiny();
    let mut m = perturbed(&cfg, 9);
    let d = cfg.d_model;
    let tokens = [5, 2, 6, 1];
    let table = m.embedding_table().clone();
    let embeds = Tensor::from_fn(&[2 + tokens.len(), d], |i| {
        let (r, c) = (i / d, i % d);
        if r < 2 { ((r * d + c) as f64 * 0.37).sin() } else { table.data()[tokens[r - 2] * d + c] }
    });
    let full = m.forward(&[], Some((&embeds, 2)), None, None).unwrap();
    let head = Tensor::from_fn(&[5, d], |i| embeds.data()[i]);
    let first = m.forward(&[], Some((&head, 2)), None, None).unwrap();
    assert_eq!(first.present.lead, 2);
    let rest = m.forward_with_cache(&tokens[3..], None, None, Some(&first.present), None).unwrap();
    let v = cfg.vocab_size;
    for (a, b) in full.logits.data()[5 * v..].iter().zip(rest.logits.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // only positions 0..tokens.len() are read
    let id = m.store().id("wpe").unwrap();
    m.store_mut().get_mut(id).data_mut()[tokens.len() * d..].fill(0.0);
    let after = m.forward(&[], Some((&embeds, 2)), None, None).unwrap();
    assert_eq!(full.logits, after.logits);
}

#[test]
fn incremental_cache_matches_full_forward() {
    let cfg = tiny();
    let m = perturbed(&cfg, 10);
    let prefix = random_prefix(&cfg, 2, 4);
    let tokens = [2, 9, 3, 7, 1];
    let full = m.forward(&tokens, None, Some(&prefix), None).unwrap();
    let first = m.forward(&tokens[..3], None, Some(&prefix), None).unwrap();
    assert_eq!(first.present.seq_len(), 3);
    let rest = m
        .forward_with_cache(&tokens[3..], None, Some(&prefix), Some(&first.present), None)
        .unwrap();
    let v = cfg.vocab_size;
    for (a, b) in full.logits.data()[3 * v..].iter().zip(rest.logits.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(rest.present.seq_len(), 5);
}

#[test]
fn overflow_reports_limit() {
    let cfg = tiny();
    let m = LmParams::<f32>::init(&cfg, 0).unwrap();
    let tokens = vec![1; 10];
    let prefix = PrefixKV::zeros(&cfg, 3);
    match m.forward(&tokens, None, Some(&prefix), None) {
        Err(Error::Length { len: 13, limit: 12 }) => {}
        other => panic!("{other:?}"),
    }
    assert!(m.forward(&tokens, None, Some(&PrefixKV::zeros(&cfg, 2)), None).is_ok());
}

#[test]
fn loss_matches_masked_full_logits() {
    let cfg = tiny();
    let m = perturbed(&cfg, 12);
    let tokens = [1, 2, 3, 4, 5];
    let targets = [2, 3, 4, 5, 6];
    let mask = [false, false, true, true, true];
    let out = m.forward(&tokens, None, None, Some((&targets, &mask))).unwrap();
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let l = m
        .loss_tape(&mut tape, &bound, ModelInput::Tokens(&tokens), None, &targets, &mask)
        .unwrap();
    assert!((tape.value(l).data()[0] - out.loss.unwrap()).abs() < 1e-12);

    // hand check from the reference logits
    let logits = reference_logits(&m, &tokens, None);
    let mut nll = 0.0;
    for i in 2..5 {
        let mx = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits[i].iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        nll += lse - logits[i][targets[i]];
    }
    assert!((out.loss.unwrap() - nll / 3.0).abs() < 1e-9);
}

#[test]
fn param_count_closed_form() {
    for cfg in [tiny(), ModelConfig::desk(2000)] {
        let m = LmParams::<f32>::init(&cfg, 0).unwrap();
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let block = 4 * d * d + 2 * d * f + 8 * d + f;
        let expect = cfg.vocab_size * d + cfg.max_seq_len * d + cfg.n_layers * block + 2 * d;
        assert_eq!(m.param_count(), expect);
    }
    assert_eq!(4 * 128 * 128 + 2 * 128 * 512 + 8 * 128 + 512, 198_144);
}

#[test]
fn config_validation() {
    let mut cfg = tiny();
    cfg.d_model = 15;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = tiny();
    cfg.max_seq_len = 1;
    assert!(cfg.validate().is_err());
    assert!(LmParams::<f32>::init(&cfg, 0).is_err());
}

#[test]
fn from_store_rejects_wrong_shapes() {
    let cfg = tiny();
    let m = LmParams::<f32>::init(&cfg, 0).unwrap();
    let mut bigger = cfg.clone();
    bigger.d_ff = 64;
    assert!(matches!(
        LmParams::from_store(bigger, m.store().clone()),
        Err(Error::Checkpoint(_))
    ));
    assert!(LmParams::from_store(cfg, m.store().clone()).is_ok());
}

#[test]
fn split_prefix_rows_layout() {
    let cfg = tiny();
    let width = cfg.prefix_width();
    let rows = Tensor::from_fn(&[3, width], |i| i as f64);
    let mut tape = Tape::new();
    let r = tape.constant(rows);
    let pv = split_prefix_rows(&mut tape, r, &cfg).unwrap();
    assert_eq!(pv.len, 3);
    let (d, dh) = (cfg.d_model, cfg.d_head());
    for l in 0..cfg.n_layers {
        for (kind, var) in [pv.layers[l].0, pv.layers[l].1].into_iter().enumerate() {
            let t = tape.value(var);
            assert_eq!(t.shape(), &[cfg.n_heads, 3, dh]);
            // head 1, slot 2, channel 0
            let got = t.data()[(3 + 2) * dh];
            let want = (2 * width + l * 2 * d + kind * d + dh) as f64;
            assert_eq!(got, want);
        }
    }
    let bad = tape.constant(Tensor::zeros(&[3, width - 1]));
    assert!(split_prefix_rows(&mut tape, bad, &cfg).is_err());
}

#[test]
fn full_model_gradient_check_with_prefix() {
    let cfg = ModelConfig {
        max_seq_len: 8,
        ..tiny()
    };
    let m = perturbed(&cfg, 21);
    let tokens = [1, 4, 9, 2, 7];
    let targets = [4, 9, 2, 7, 10];
    let mask = [true, false, true, true, true];
    let prefix = random_prefix(&cfg, 3, 31);

    // all base parameters as one flat tensor
    let flat = m.store().flatten();
    let err = finite_diff_check(
        |tape, x| {
            let bound = m.store().bind_flat(tape, x)?;
            let pre = PrefixVars {
                layers: prefix
                    .layers
                    .iter()
                    .map(|(k, v)| (tape.constant(k.clone()), tape.constant(v.clone())))
                    .collect(),
                len: 3,
            };
            m.loss_tape(tape, &bound, ModelInput::Tokens(&tokens), Some(&pre), &targets, &mask)
        },
        &flat,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "parameters: {err}");

    // every prefix tensor, packed as rows
    let rows = Tensor::from_fn(&[3, cfg.prefix_width()], {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        move |_| rng.random_range(-1.0..1.0)
    });
    let err = finite_diff_check(
        |tape, x| {
            let c = tape.constant(flat.clone());
            let bound = m.store().bind_flat(tape, c)?;
            let pre = split_prefix_rows(tape, x, &cfg)?;
            m.loss_tape(tape, &bound, ModelInput::Tokens(&tokens), Some(&pre), &targets, &mask)
        },
        &rows,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "prefix: {err}");
}

#[test]
fn frozen_model_yields_no_parameter_gradients() {
    let cfg = tiny();
    let mut m = LmParams::<f32>::init(&cfg, 2).unwrap();
    m.freeze();
    m.freeze();
    assert!(m.is_frozen());
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape);
    let l = m
        .loss_tape(&mut tape, &bound, ModelInput::Tokens(&[1, 2]), None, &[2, 3], &[true, true])
        .unwrap();
    tape.backward(l).unwrap();
    assert!(bound.vars().iter().all(|&v| tape.grad(v).is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn logits_shape_and_finiteness(len in 1usize..8, p in 0usize..4, seed in any::<u64>()) {
        let cfg = tiny();
        let m = LmParams::<f32>::init(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let prefix = PrefixKV::zeros(&cfg, p);
        let out = m.forward(&tokens, None, Some(&prefix), None).unwrap();
        prop_assert_eq!(out.logits.shape(), &[len, cfg.vocab_size]);
        prop_assert!(out.logits.is_finite());
    }
}
