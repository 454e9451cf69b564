//! Encoder-decoder transformer: sliding-window sparse self-attention in the
//! encoder, causal self-attention plus dense cross-attention in the decoder,
//! and an untied language-model head.
//!
//! Blocks are pre-norm: `x + sublayer(layer_norm(x))`. A final layer norm
//! follows each non-empty stack.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{multi_head_attend, AttentionConfig, AttentionMask, AttentionWeights, Mask};
use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Graph, Tensor, Var};
use crate::tokenizer::PAD_ID;

/// Hard ceiling on source positions.
pub const MAX_SOURCE_POSITIONS: usize = 16_384;
pub const INIT_RANGE: f64 = 0.08;
pub const LN_EPS: f64 = 1e-5;

/// Token ids of one (source, target) example. Targets include bos and eos.
pub type TokenPair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub max_src_pos: usize,
    pub max_tgt_pos: usize,
    #[serde(default)]
    pub attention: AttentionConfig,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub position_init: PositionInit,
}

/// Starting values of the learned position tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionInit {
    /// uniform(−0.08, 0.08), like every other weight.
    #[default]
    Uniform,
    /// Sine/cosine table scaled to amplitude 0.08. The tables are still
    /// trained; this only gives them relative-offset structure from the start.
    Sinusoidal,
}

/// `amplitude · sin/cos(p / 10000^(2i/d))`, interleaved by dimension.
pub fn sinusoidal_table(positions: usize, d: usize, amplitude: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(positions * d);
    for p in 0..positions {
        for j in 0..d {
            let freq = 10000f64.powf(-((j / 2 * 2) as f64) / d as f64);
            let angle = p as f64 * freq;
            out.push(amplitude * if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 128,
            max_src_pos: 512,
            max_tgt_pos: 128,
            attention: AttentionConfig::default(),
            dropout: 0.0,
            position_init: PositionInit::Uniform,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_src_pos", self.max_src_pos),
            ("max_tgt_pos", self.max_tgt_pos),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.vocab_size <= crate::tokenizer::UNK_ID {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.max_src_pos > MAX_SOURCE_POSITIONS {
            return Err(Error::Config(format!("max_src_pos {} exceeds {MAX_SOURCE_POSITIONS}", self.max_src_pos)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        self.attention.validate()
    }
}

#[derive(Clone, Copy)]
enum Init {
    Uniform,
    Position,
    Ones,
    Zeros,
}

fn attn_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.weight"), vec![d, d], Init::Uniform));
        out.push((format!("{prefix}.{p}.bias"), vec![d], Init::Zeros));
    }
}

fn norm_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gain"), vec![d], Init::Ones));
    out.push((format!("{prefix}.bias"), vec![d], Init::Zeros));
}

fn ff_layout(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, d: usize, ff: usize) {
    out.push((format!("{prefix}.in.weight"), vec![d, ff], Init::Uniform));
    out.push((format!("{prefix}.in.bias"), vec![ff], Init::Zeros));
    out.push((format!("{prefix}.out.weight"), vec![ff, d], Init::Uniform));
    out.push((format!("{prefix}.out.bias"), vec![d], Init::Zeros));
}

/// Every parameter with its shape, in initialization order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ff) = (cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("embed.tokens".to_string(), vec![cfg.vocab_size, d], Init::Uniform),
        ("embed.src_pos".to_string(), vec![cfg.max_src_pos, d], Init::Position),
        ("embed.tgt_pos".to_string(), vec![cfg.max_tgt_pos, d], Init::Position),
    ];
    for l in 0..cfg.enc_layers {
        norm_layout(&mut out, &format!("encoder.{l}.ln_attn"), d);
        attn_layout(&mut out, &format!("encoder.{l}.self_attn"), d);
        norm_layout(&mut out, &format!("encoder.{l}.ln_ff"), d);
        ff_layout(&mut out, &format!("encoder.{l}.ff"), d, ff);
    }
    if cfg.enc_layers > 0 {
        norm_layout(&mut out, "encoder.ln_final", d);
    }
    for l in 0..cfg.dec_layers {
        norm_layout(&mut out, &format!("decoder.{l}.ln_self"), d);
        attn_layout(&mut out, &format!("decoder.{l}.self_attn"), d);
        norm_layout(&mut out, &format!("decoder.{l}.ln_cross"), d);
        attn_layout(&mut out, &format!("decoder.{l}.cross_attn"), d);
        norm_layout(&mut out, &format!("decoder.{l}.ln_ff"), d);
        ff_layout(&mut out, &format!("decoder.{l}.ff"), d, ff);
    }
    if cfg.dec_layers > 0 {
        norm_layout(&mut out, "decoder.ln_final", d);
    }
    out.push(("lm_head.weight".to_string(), vec![d, cfg.vocab_size], Init::Uniform));
    out.push(("lm_head.bias".to_string(), vec![cfg.vocab_size], Init::Zeros));
    out
}

/// Total scalar parameters implied by a config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    layout(cfg).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

/// Named weights; iteration order (sorted by name) is the canonical order
/// used for gradients, optimizer state and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Seeded init: uniform(−0.08, 0.08) weights, zero biases, unit
    /// layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Position if cfg.position_init == PositionInit::Sinusoidal => {
                    sinusoidal_table(shape[0], shape[1], INIT_RANGE)
                }
                Init::Uniform | Init::Position => (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect(),
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Builds params from named arrays, checking them against `cfg`.
    pub fn from_named(cfg: &ModelConfig, named: BTreeMap<String, Tensor>) -> Result<Self> {
        let params = Self { tensors: named };
        params.check_config(cfg)?;
        Ok(params)
    }

    pub fn check_config(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let expected = layout(cfg);
        if expected.len() != self.tensors.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config implies {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                None => return Err(Error::Config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Config(format!(
                        "parameter `{name}` has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    fn expect(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("parameter `{name}` missing"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Parameters registered as leaves of one graph.
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &ModelParams, trainable: bool) -> Self {
        let mut vars = HashMap::with_capacity(params.len());
        let mut order = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            vars.insert(name.clone(), v);
            order.push(v);
        }
        Self { vars, order }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    /// Gradients in canonical parameter order; unreachable parameters get
    /// zeros.
    pub fn take_grads(&self, g: &mut Graph) -> Vec<Vec<f64>> {
        self.order
            .iter()
            .map(|&v| g.take_grad(v).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
            .collect()
    }

    fn attention(&self, prefix: &str) -> AttentionWeights {
        let v = |p: &str, k: &str| self.var(&format!("{prefix}.{p}.{k}"));
        AttentionWeights {
            wq: v("q", "weight"),
            bq: v("q", "bias"),
            wk: v("k", "weight"),
            bk: v("k", "bias"),
            wv: v("v", "weight"),
            bv: v("v", "bias"),
            wo: v("o", "weight"),
            bo: v("o", "bias"),
        }
    }
}

/// Graph-building forward pass over bound parameters.
pub struct Forward<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a BoundParams,
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl Forward<'_> {
    fn dropout(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.dropout_rng.as_deref_mut() {
            Some(rng) if self.cfg.dropout > 0.0 => g.dropout(x, self.cfg.dropout, rng),
            _ => x,
        }
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.params.var(&format!("{prefix}.gain"));
        let bias = self.params.var(&format!("{prefix}.bias"));
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn feed_forward(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let p = |k: &str| self.params.var(&format!("{prefix}.{k}"));
        let h = g.matmul(x, p("in.weight"))?;
        let h = g.add_row(h, p("in.bias"))?;
        let h = g.gelu(h);
        let y = g.matmul(h, p("out.weight"))?;
        g.add_row(y, p("out.bias"))
    }

    fn embed(&self, g: &mut Graph, ids: &[usize], pos_table: &str) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Index { what: "token id", index: bad, len: self.cfg.vocab_size });
        }
        let tok = g.embedding(self.params.var("embed.tokens"), ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = g.embedding(self.params.var(pos_table), &positions)?;
        g.add(tok, pos)
    }

    pub fn encode(&mut self, g: &mut Graph, src: &[usize]) -> Result<Var> {
        check_len("source sequence", src.len(), self.cfg.max_src_pos)?;
        let mask = AttentionMask::sparse(src.len(), &self.cfg.attention)?;
        let x = self.embed(g, src, "embed.src_pos")?;
        let mut x = self.dropout(g, x);
        for l in 0..self.cfg.enc_layers {
            let h = self.norm(g, x, &format!("encoder.{l}.ln_attn"))?;
            let w = self.params.attention(&format!("encoder.{l}.self_attn"));
            let a = multi_head_attend(g, h, h, h, &w, self.cfg.heads, Mask::Explicit(&mask))?;
            let a = self.dropout(g, a);
            x = g.add(x, a)?;
            let h = self.norm(g, x, &format!("encoder.{l}.ln_ff"))?;
            let f = self.feed_forward(g, h, &format!("encoder.{l}.ff"))?;
            let f = self.dropout(g, f);
            x = g.add(x, f)?;
        }
        if self.cfg.enc_layers > 0 {
            x = self.norm(g, x, "encoder.ln_final")?;
        }
        Ok(x)
    }

    /// Logits for every position of `tgt_prefix`, attending to `enc_out`.
    pub fn decode(&mut self, g: &mut Graph, enc_out: Var, tgt_prefix: &[usize]) -> Result<Var> {
        check_len("target prefix", tgt_prefix.len(), self.cfg.max_tgt_pos)?;
        let x = self.embed(g, tgt_prefix, "embed.tgt_pos")?;
        let mut x = self.dropout(g, x);
        for l in 0..self.cfg.dec_layers {
            let h = self.norm(g, x, &format!("decoder.{l}.ln_self"))?;
            let w = self.params.attention(&format!("decoder.{l}.self_attn"));
            let a = multi_head_attend(g, h, h, h, &w, self.cfg.heads, Mask::Causal)?;
            let a = self.dropout(g, a);
            x = g.add(x, a)?;
            let h = self.norm(g, x, &format!("decoder.{l}.ln_cross"))?;
            let w = self.params.attention(&format!("decoder.{l}.cross_attn"));
            let c = multi_head_attend(g, h, enc_out, enc_out, &w, self.cfg.heads, Mask::None)?;
            let c = self.dropout(g, c);
            x = g.add(x, c)?;
            let h = self.norm(g, x, &format!("decoder.{l}.ln_ff"))?;
            let f = self.feed_forward(g, h, &format!("decoder.{l}.ff"))?;
            let f = self.dropout(g, f);
            x = g.add(x, f)?;
        }
        if self.cfg.dec_layers > 0 {
            x = self.norm(g, x, "decoder.ln_final")?;
        }
        let logits = g.matmul(x, self.params.var("lm_head.weight"))?;
        g.add_row(logits, self.params.var("lm_head.bias"))
    }

    /// Teacher-forced next-token loss of one pair: inputs `tgt[..T−1]`,
    /// targets `tgt[1..]`, pad targets ignored.
    pub fn pair_loss(&mut self, g: &mut Graph, src: &[usize], tgt: &[usize]) -> Result<Var> {
        if tgt.len() < 2 {
            return Err(Error::Length { what: "target sequence (minimum)", len: tgt.len(), limit: 2 });
        }
        let enc = self.encode(g, src)?;
        let logits = self.decode(g, enc, &tgt[..tgt.len() - 1])?;
        g.cross_entropy_logits(logits, &tgt[1..], PAD_ID)
    }

    /// Mean of per-pair losses.
    pub fn batch_loss(&mut self, g: &mut Graph, batch: &[TokenPair]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Corpus("empty batch".into()));
        }
        let mut total: Option<Var> = None;
        for (src, tgt) in batch {
            let l = self.pair_loss(g, src, tgt)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(g.scale(total.unwrap(), 1.0 / batch.len() as f64))
    }
}

fn check_len(what: &'static str, len: usize, limit: usize) -> Result<()> {
    if len == 0 {
        return Err(Error::Length { what, len, limit });
    }
    if len > limit {
        return Err(Error::Length { what, len, limit });
    }
    Ok(())
}

/// Encoder output `n_src × d_model`.
pub fn encode(params: &ModelParams, src: &[usize], cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let mut fwd = Forward { cfg, params: &bound, dropout_rng: None };
    let out = fwd.encode(&mut g, src)?;
    Ok(g.value(out).clone())
}

/// Logits `n_tgt × vocab` for a target prefix given encoder output.
pub fn decode_logits(params: &ModelParams, enc_out: &Tensor, tgt_prefix: &[usize], cfg: &ModelConfig) -> Result<Tensor> {
    if enc_out.cols() != cfg.d_model {
        return Err(Error::shape("decode_logits", enc_out.shape(), &[enc_out.rows(), cfg.d_model]));
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let enc = g.constant(enc_out.clone());
    let mut fwd = Forward { cfg, params: &bound, dropout_rng: None };
    let out = fwd.decode(&mut g, enc, tgt_prefix)?;
    Ok(g.value(out).clone())
}

/// Mean teacher-forcing loss over a batch, as a scalar tensor. Dropout is
/// not applied.
pub fn forward_loss(params: &ModelParams, batch: &[TokenPair], cfg: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, false);
    let mut fwd = Forward { cfg, params: &bound, dropout_rng: None };
    let loss = fwd.batch_loss(&mut g, batch)?;
    Ok(g.value(loss).clone())
}

/// Batch loss and its gradient for every parameter in canonical order.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[TokenPair],
    cfg: &ModelConfig,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let mut fwd = Forward { cfg, params: &bound, dropout_rng };
    let loss = fwd.batch_loss(&mut g, batch)?;
    let value = g.value(loss).item();
    g.backward(loss)?;
    Ok((value, bound.take_grads(&mut g)))
}

struct LinearRef<'p> {
    weight: &'p Tensor,
    bias: &'p Tensor,
}

impl<'p> LinearRef<'p> {
    fn new(params: &'p ModelParams, prefix: &str) -> Self {
        Self { weight: params.expect(&format!("{prefix}.weight")), bias: params.expect(&format!("{prefix}.bias")) }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (k, n) = (self.weight.rows(), self.weight.cols());
        let m = x.len() / k;
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, x, false, self.weight.data(), false, &mut out, 0.0);
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        out
    }
}

struct NormRef<'p> {
    gain: &'p Tensor,
    bias: &'p Tensor,
}

impl<'p> NormRef<'p> {
    fn new(params: &'p ModelParams, prefix: &str) -> Self {
        Self { gain: params.expect(&format!("{prefix}.gain")), bias: params.expect(&format!("{prefix}.bias")) }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        kernels::layer_norm(x, self.gain.data(), self.bias.data(), LN_EPS).0
    }
}

struct CachedLayer<'p> {
    ln_self: NormRef<'p>,
    self_q: LinearRef<'p>,
    self_k: LinearRef<'p>,
    self_v: LinearRef<'p>,
    self_o: LinearRef<'p>,
    ln_cross: NormRef<'p>,
    cross_q: LinearRef<'p>,
    cross_o: LinearRef<'p>,
    ln_ff: NormRef<'p>,
    ff_in: LinearRef<'p>,
    ff_out: LinearRef<'p>,
    keys: Vec<f64>,
    values: Vec<f64>,
    cross_keys: Vec<f64>,
    cross_values: Vec<f64>,
}

/// Step-at-a-time decoder that caches self-attention keys/values and the
/// projected encoder keys/values. Produces the same logits as
/// [`decode_logits`] up to floating-point reassociation.
pub struct IncrementalDecoder<'p> {
    cfg: &'p ModelConfig,
    tokens: &'p Tensor,
    positions: &'p Tensor,
    layers: Vec<CachedLayer<'p>>,
    final_norm: Option<NormRef<'p>>,
    head: LinearRef<'p>,
    n_src: usize,
    step: usize,
}

impl<'p> IncrementalDecoder<'p> {
    pub fn new(params: &'p ModelParams, cfg: &'p ModelConfig, enc_out: &Tensor) -> Result<Self> {
        if enc_out.cols() != cfg.d_model {
            return Err(Error::shape("incremental decoder", enc_out.shape(), &[enc_out.rows(), cfg.d_model]));
        }
        let layers = (0..cfg.dec_layers)
            .map(|l| {
                let p = |s: &str| format!("decoder.{l}.{s}");
                let cross_k = LinearRef::new(params, &p("cross_attn.k"));
                let cross_v = LinearRef::new(params, &p("cross_attn.v"));
                CachedLayer {
                    ln_self: NormRef::new(params, &p("ln_self")),
                    self_q: LinearRef::new(params, &p("self_attn.q")),
                    self_k: LinearRef::new(params, &p("self_attn.k")),
                    self_v: LinearRef::new(params, &p("self_attn.v")),
                    self_o: LinearRef::new(params, &p("self_attn.o")),
                    ln_cross: NormRef::new(params, &p("ln_cross")),
                    cross_q: LinearRef::new(params, &p("cross_attn.q")),
                    cross_o: LinearRef::new(params, &p("cross_attn.o")),
                    ln_ff: NormRef::new(params, &p("ln_ff")),
                    ff_in: LinearRef::new(params, &p("ff.in")),
                    ff_out: LinearRef::new(params, &p("ff.out")),
                    keys: Vec::new(),
                    values: Vec::new(),
                    cross_keys: cross_k.apply(enc_out.data()),
                    cross_values: cross_v.apply(enc_out.data()),
                }
            })
            .collect();
        Ok(Self {
            cfg,
            tokens: params.expect("embed.tokens"),
            positions: params.expect("embed.tgt_pos"),
            layers,
            final_norm: (cfg.dec_layers > 0).then(|| NormRef::new(params, "decoder.ln_final")),
            head: LinearRef::new(params, "lm_head"),
            n_src: enc_out.rows(),
            step: 0,
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.step
    }

    /// Feeds the next target token and returns the logits predicting the
    /// token after it.
    pub fn step(&mut self, token: usize) -> Result<Vec<f64>> {
        let cfg = self.cfg;
        if token >= cfg.vocab_size {
            return Err(Error::Index { what: "token id", index: token, len: cfg.vocab_size });
        }
        check_len("target prefix", self.step + 1, cfg.max_tgt_pos)?;
        let mut x: Vec<f64> = self.tokens.row(token).iter().zip(self.positions.row(self.step)).map(|(a, b)| a + b).collect();
        let t = self.step + 1;
        for layer in &mut self.layers {
            let h = layer.ln_self.apply(&x);
            let q = layer.self_q.apply(&h);
            layer.keys.extend(layer.self_k.apply(&h));
            layer.values.extend(layer.self_v.apply(&h));
            let a = attend_row(&q, &layer.keys, &layer.values, t, cfg.heads);
            add_assign(&mut x, &layer.self_o.apply(&a));

            let h = layer.ln_cross.apply(&x);
            let q = layer.cross_q.apply(&h);
            let c = attend_row(&q, &layer.cross_keys, &layer.cross_values, self.n_src, cfg.heads);
            add_assign(&mut x, &layer.cross_o.apply(&c));

            let h = layer.ln_ff.apply(&x);
            let f: Vec<f64> = layer.ff_in.apply(&h).into_iter().map(kernels::gelu).collect();
            add_assign(&mut x, &layer.ff_out.apply(&f));
        }
        if let Some(norm) = &self.final_norm {
            x = norm.apply(&x);
        }
        self.step = t;
        Ok(self.head.apply(&x))
    }
}

fn add_assign(x: &mut [f64], y: &[f64]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// Multi-head attention of one query row over `n` cached key/value rows.
fn attend_row(q: &[f64], keys: &[f64], values: &[f64], n: usize, heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; d];
    let mut scores = vec![0.0; n];
    for h in 0..heads {
        let qh = &q[h * dh..(h + 1) * dh];
        for (j, s) in scores.iter_mut().enumerate() {
            let kh = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let p = kernels::softmax_rows(&scores, None, n);
        let oh = &mut out[h * dh..(h + 1) * dh];
        for (j, pj) in p.iter().enumerate() {
            let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (o, v) in oh.iter_mut().zip(vh) {
                *o += pj * v;
            }
        }
    }
    out
}
