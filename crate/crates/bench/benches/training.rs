use std::hint::black_box;

use afg_core::data::{make_synthetic, StageRole};
use afg_core::generation::{greedy_decode, GenerationConfig};
use afg_core::model::{loss_and_grads, ModelConfig, ModelParams, TokenPair};
use afg_core::pipeline::{adamw_step, OptimizerConfig, OptimizerState};
use afg_core::tokenizer::Vocab;
use criterion::{criterion_group, criterion_main, Criterion};

fn setup() -> (ModelConfig, ModelParams, Vec<TokenPair>) {
    let cfg = ModelConfig { vocab_size: 128, max_tgt_pos: 64, ..ModelConfig::default() };
    let corpus = make_synthetic(StageRole::Review, 2, 1, 0).unwrap().corpus;
    let vocab = Vocab::build(corpus.pairs.iter().flat_map(|p| [p.source.as_str(), p.target.as_str()]), 1, 128).unwrap();
    let batch = corpus.pairs.iter().map(|p| (vocab.encode(&p.source, true), vocab.encode(&p.target, true))).collect();
    let params = ModelParams::init(&cfg, 0).unwrap();
    (cfg, params, batch)
}

fn training_step(c: &mut Criterion) {
    let (cfg, params, batch) = setup();
    let opt = OptimizerConfig::default();
    c.bench_function("train_step/d64_2x2/batch2", |b| {
        let mut p = params.clone();
        let mut state = OptimizerState::zeros(&p);
        b.iter(|| {
            let (loss, grads) = loss_and_grads(&p, black_box(&batch), &cfg, None).unwrap();
            adamw_step(&mut p, &grads, &mut state, &opt).unwrap();
            loss
        })
    });
}

fn decoding(c: &mut Criterion) {
    let (cfg, params, batch) = setup();
    let gen = GenerationConfig { max_new_tokens: 32 };
    c.bench_function("greedy_decode/d64_2x2/32_tokens", |b| {
        b.iter(|| greedy_decode(&params, black_box(&batch[0].0), &gen, &cfg).unwrap())
    });
}

criterion_group!(benches, training_step, decoding);
criterion_main!(benches);
