mod common;

use afg_core::attention::AttentionConfig;
use afg_core::model::{
    decode_logits, encode, forward_loss, loss_and_grads, param_count, IncrementalDecoder, ModelConfig, ModelParams,
};
use afg_core::{Error, Tensor};
use common::rel_err;

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        d_model: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 32,
        max_src_pos: 64,
        max_tgt_pos: 32,
        attention: AttentionConfig::new(4, vec![0]).unwrap(),
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn micro() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        d_ff: 8,
        max_src_pos: 6,
        max_tgt_pos: 4,
        attention: AttentionConfig::new(2, vec![0]).unwrap(),
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

#[test]
fn param_count_matches_hand_sum() {
    // V=64, d=16, ff=32, 64/32 positions, one encoder and one decoder layer.
    let (v, d, ff) = (64, 16, 32);
    let attn = 4 * (d * d + d);
    let norm = 2 * d;
    let mlp = d * ff + ff + ff * d + d;
    let embeddings = v * d + 64 * d + 32 * d;
    let encoder = norm + attn + norm + mlp + norm;
    let decoder = norm + attn + norm + attn + norm + mlp + norm;
    let head = d * v + v;
    let expected = embeddings + encoder + decoder + head;
    assert_eq!(expected, 9280);
    assert_eq!(param_count(&tiny()), expected);
    assert_eq!(ModelParams::init(&tiny(), 1).unwrap().num_scalars(), expected);
}

#[test]
fn init_is_seeded_and_gains_are_one() {
    let a = ModelParams::init(&tiny(), 7).unwrap();
    let b = ModelParams::init(&tiny(), 7).unwrap();
    let c = ModelParams::init(&tiny(), 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    for (name, t) in a.iter() {
        if name.ends_with(".gain") {
            assert!(t.data().iter().all(|&x| x == 1.0), "{name}");
        } else if name.ends_with(".bias") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
        } else {
            assert!(t.data().iter().all(|&x| x.abs() < 0.08), "{name}");
        }
    }
}

#[test]
fn params_are_checked_against_config() {
    let p = ModelParams::init(&tiny(), 1).unwrap();
    assert!(p.check_config(&tiny()).is_ok());
    let other = ModelConfig { d_ff: 16, ..tiny() };
    assert!(matches!(p.check_config(&other), Err(Error::Config(_))));
}

#[test]
fn encode_shape_and_length_limit() {
    let cfg = tiny();
    let p = ModelParams::init(&cfg, 1).unwrap();
    let out = encode(&p, &[1, 5, 6, 7, 2], &cfg).unwrap();
    assert_eq!(out.shape(), &[5, 16]);
    let long: Vec<usize> = vec![5; 65];
    let err = encode(&p, &long, &cfg).unwrap_err();
    assert!(matches!(err, Error::Length { len: 65, limit: 64, .. }));
    assert!(err.to_string().contains("64"));
}

#[test]
fn zero_layer_encoder_returns_embeddings() {
    let cfg = ModelConfig { enc_layers: 0, ..tiny() };
    let p = ModelParams::init(&cfg, 2).unwrap();
    let src = [1, 9, 9, 2];
    let out = encode(&p, &src, &cfg).unwrap();
    let tok = p.get("embed.tokens").unwrap();
    let pos = p.get("embed.src_pos").unwrap();
    for (i, &id) in src.iter().enumerate() {
        let expected: Vec<f64> = tok.row(id).iter().zip(pos.row(i)).map(|(a, b)| a + b).collect();
        assert_eq!(out.row(i), expected.as_slice());
    }
}

#[test]
fn encoder_receptive_field_grows_by_half_window_per_layer() {
    let cfg = ModelConfig { enc_layers: 2, attention: AttentionConfig::new(2, vec![]).unwrap(), ..tiny() };
    let p = ModelParams::init(&cfg, 3).unwrap();
    let src: Vec<usize> = (0..20).map(|i| 4 + i % 50).collect();
    let base = encode(&p, &src, &cfg).unwrap();
    let mut changed = src.clone();
    changed[10] = 60;
    let out = encode(&p, &changed, &cfg).unwrap();
    for i in 0..20 {
        // Two layers of half-window 1; the final norm is row-local.
        assert_eq!(out.row(i) != base.row(i), i.abs_diff(10) <= 2, "row {i}");
    }
}

#[test]
fn decoder_is_causal_and_reads_encoder() {
    let cfg = tiny();
    let p = ModelParams::init(&cfg, 4).unwrap();
    let enc = encode(&p, &[1, 10, 11, 12, 2], &cfg).unwrap();
    let tgt = [1, 20, 21, 22, 23];
    let base = decode_logits(&p, &enc, &tgt, &cfg).unwrap();
    assert_eq!(base.shape(), &[5, 64]);
    for j in 1..tgt.len() {
        let mut t2 = tgt;
        t2[j] = 40;
        let out = decode_logits(&p, &enc, &t2, &cfg).unwrap();
        for i in 0..j {
            assert_eq!(out.row(i), base.row(i), "position {i} saw token {j}");
        }
        assert_ne!(out.row(j), base.row(j));
    }
    let mut enc2 = enc.clone();
    enc2.data_mut()[3] += 0.5;
    let out = decode_logits(&p, &enc2, &tgt, &cfg).unwrap();
    assert_ne!(out.data(), base.data());
}

#[test]
fn random_init_loss_is_near_log_vocab() {
    let cfg = tiny();
    let p = ModelParams::init(&cfg, 5).unwrap();
    let batch = vec![
        (vec![1, 5, 6, 7, 8, 2], vec![1, 9, 10, 11, 2]),
        (vec![1, 30, 31, 2], vec![1, 40, 41, 42, 43, 44, 2]),
    ];
    let loss = forward_loss(&p, &batch, &cfg).unwrap().item();
    let ln_v = 64f64.ln();
    assert!(loss > 0.0 && loss.is_finite());
    assert!((ln_v - 0.5..=ln_v + 0.5).contains(&loss), "loss {loss}");

    let one = forward_loss(&p, &batch[..1], &cfg).unwrap().item();
    let twice = forward_loss(&p, &[batch[0].clone(), batch[0].clone()], &cfg).unwrap().item();
    assert_eq!(one, twice);
    assert_eq!(loss, forward_loss(&p, &batch, &cfg).unwrap().item());
    assert!(forward_loss(&p, &[], &cfg).is_err());
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let cfg = micro();
    let params = ModelParams::init(&cfg, 11).unwrap();
    let batch = vec![(vec![1, 4, 5, 6, 7, 2], vec![1, 5, 6, 2]), (vec![1, 7, 6, 3, 2], vec![1, 4, 2])];
    let (_, grads) = loss_and_grads(&params, &batch, &cfg, None).unwrap();
    let loss_at = |p: &ModelParams| forward_loss(p, &batch, &cfg).unwrap().item();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for (k, name) in names.iter().enumerate() {
        for e in 0..params.get(name).unwrap().numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[e] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[e] -= h;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let err = rel_err(grads[k][e], numeric);
            assert!(err <= 1e-3, "{name}[{e}]: analytic {} numeric {numeric}", grads[k][e]);
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-3);
}

#[test]
fn loss_is_bitwise_deterministic() {
    let cfg = tiny();
    let batch = vec![(vec![1, 5, 6, 2], vec![1, 7, 8, 2])];
    let a = loss_and_grads(&ModelParams::init(&cfg, 9).unwrap(), &batch, &cfg, None).unwrap();
    let b = loss_and_grads(&ModelParams::init(&cfg, 9).unwrap(), &batch, &cfg, None).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

#[test]
fn incremental_decoder_matches_full_decode() {
    let cfg = ModelConfig { dec_layers: 2, ..tiny() };
    let p = ModelParams::init(&cfg, 12).unwrap();
    let enc = encode(&p, &[1, 10, 11, 12, 13, 14, 2], &cfg).unwrap();
    let tgt = [1, 20, 21, 22, 23, 24];
    let full = decode_logits(&p, &enc, &tgt, &cfg).unwrap();
    let mut dec = IncrementalDecoder::new(&p, &cfg, &enc).unwrap();
    for (i, &t) in tgt.iter().enumerate() {
        let row = dec.step(t).unwrap();
        let max_diff = row.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-12, "position {i}: {max_diff}");
    }
    assert_eq!(dec.position(), tgt.len());
}

#[test]
fn decode_rejects_mismatched_encoder_width() {
    let cfg = tiny();
    let p = ModelParams::init(&cfg, 1).unwrap();
    let enc = Tensor::zeros(&[3, 8]);
    assert!(decode_logits(&p, &enc, &[1], &cfg).is_err());
    assert!(IncrementalDecoder::new(&p, &cfg, &enc).is_err());
}
