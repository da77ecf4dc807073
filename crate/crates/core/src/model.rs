//! A small pre-norm encoder-decoder transformer with key/value prefix
//! injection points in every attention layer.
//!
//! The base parameters are never modified by any of the prefix stages; all
//! training entry points take the model by shared reference.

use std::collections::{BTreeMap, HashMap};

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Var};
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 512;

fn default_max_len() -> usize {
    DEFAULT_MAX_LEN
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub ffn_dim: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Also feed the decoder-side prefix blocks into cross-attention.
    #[serde(default)]
    pub cross_attention_prefix: bool,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_heads: usize, n_layers: usize, ffn_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers_enc: n_layers,
            n_layers_dec: n_layers,
            ffn_dim,
            max_len: DEFAULT_MAX_LEN,
            cross_attention_prefix: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= EOS || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(format!("degenerate model dimensions: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers_enc == 0 || self.n_layers_dec == 0 {
            return Err(Error::Config("model needs at least one layer per side".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Names and shapes of every base parameter, in checkpoint order.
    pub fn theta_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (v, d, f) = (self.vocab_size, self.d_model, self.ffn_dim);
        let mut out = vec![
            ("embed".to_string(), (v, d)),
            ("lm_head".to_string(), (v, d)),
            ("lm_bias".to_string(), (1, v)),
            ("enc.final_norm".to_string(), (1, d)),
            ("dec.final_norm".to_string(), (1, d)),
        ];
        let mut block = |prefix: String, attns: &[&str]| {
            for (i, a) in attns.iter().enumerate() {
                out.push((format!("{prefix}.norm{i}"), (1, d)));
                for p in ["q", "k", "v", "o"] {
                    out.push((format!("{prefix}.{a}.{p}"), (d, d)));
                }
            }
            out.push((format!("{prefix}.norm_ffn"), (1, d)));
            out.push((format!("{prefix}.ffn.w1"), (d, f)));
            out.push((format!("{prefix}.ffn.b1"), (1, f)));
            out.push((format!("{prefix}.ffn.w2"), (f, d)));
            out.push((format!("{prefix}.ffn.b2"), (1, d)));
        };
        for l in 0..self.n_layers_enc {
            block(format!("enc.{l}"), &["self"]);
        }
        for l in 0..self.n_layers_dec {
            block(format!("dec.{l}"), &["self", "cross"]);
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// Rounds to the nearest `f32`, the checkpoint storage width.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// The frozen base encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    config: ModelConfig,
    theta: BTreeMap<String, Array2<f64>>,
}

impl SeqModel {
    /// Seeded random initialisation. Values are `f32`-representable so a
    /// checkpoint round trip is lossless.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = BTreeMap::new();
        for (name, (r, c)) in config.theta_shapes() {
            let arr = if name.contains("norm") {
                Array2::ones((r, c))
            } else if name.ends_with(".b1") || name.ends_with(".b2") || name == "lm_bias" {
                Array2::zeros((r, c))
            } else {
                let std = if name == "embed" { 1.0 } else { 1.0 / (r as f64).sqrt() };
                let std = if name == "lm_head" { 1.0 / (c as f64).sqrt() } else { std };
                let normal = Normal::new(0.0, std).expect("positive std");
                Array2::from_shape_simple_fn((r, c), || round_f32(normal.sample(&mut rng)))
            };
            theta.insert(name, arr);
        }
        Ok(SeqModel { config, theta })
    }

    pub fn from_theta(config: ModelConfig, theta: BTreeMap<String, Array2<f64>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.theta_shapes();
        if shapes.len() != theta.len() {
            return Err(Error::Shape(format!(
                "expected {} base tensors, found {}",
                shapes.len(),
                theta.len()
            )));
        }
        for (name, (r, c)) in shapes {
            match theta.get(&name) {
                Some(a) if a.dim() == (r, c) => {}
                Some(a) => {
                    return Err(Error::Shape(format!("{name}: expected {r}x{c}, found {:?}", a.dim())))
                }
                None => return Err(Error::Shape(format!("missing base tensor {name}"))),
            }
        }
        Ok(SeqModel { config, theta })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn theta(&self) -> &BTreeMap<String, Array2<f64>> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut BTreeMap<String, Array2<f64>> {
        &mut self.theta
    }

    pub fn param_count(&self) -> usize {
        self.theta.values().map(|a| a.len()).sum()
    }

    /// SHA-256 over the names and `f32` little-endian bytes of every base tensor.
    pub fn theta_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, arr) in &self.theta {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &x in arr.iter() {
                h.update((x as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_tokens(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.len() > self.config.max_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: self.config.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!("{what} token id {bad} >= vocab size {}", self.config.vocab_size)));
        }
        Ok(())
    }
}

/// Prefix key/value rows for one attention layer (`len x d_model` each).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefix {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    /// When false every prefix slot is masked out of the attention softmax.
    pub visible: bool,
}

impl LayerPrefix {
    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.nrows() == 0
    }

    fn split(m: &Array2<f64>, n_heads: usize) -> Vec<Array2<f64>> {
        let dh = m.ncols() / n_heads;
        (0..n_heads)
            .map(|h| m.slice(s![.., h * dh..(h + 1) * dh]).to_owned())
            .collect()
    }

    /// Keys split into `n_heads` blocks of `len x d_head`.
    pub fn key_heads(&self, n_heads: usize) -> Vec<Array2<f64>> {
        Self::split(&self.keys, n_heads)
    }

    pub fn value_heads(&self, n_heads: usize) -> Vec<Array2<f64>> {
        Self::split(&self.values, n_heads)
    }
}

/// Prefix blocks for every attention layer. An empty side means no prefix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Injection {
    pub encoder: Vec<LayerPrefix>,
    pub decoder: Vec<LayerPrefix>,
}

impl Injection {
    pub fn none() -> Self {
        Injection::default()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (side, blocks, layers) in [
            ("encoder", &self.encoder, cfg.n_layers_enc),
            ("decoder", &self.decoder, cfg.n_layers_dec),
        ] {
            if blocks.is_empty() {
                continue;
            }
            if blocks.len() != layers {
                return Err(Error::Shape(format!(
                    "{side} injection has {} layers, model has {layers}",
                    blocks.len()
                )));
            }
            for (l, b) in blocks.iter().enumerate() {
                if b.keys.ncols() != cfg.d_model || b.values.dim() != b.keys.dim() {
                    return Err(Error::Shape(format!(
                        "{side} layer {l}: prefix keys {:?} / values {:?} do not match d_model {}",
                        b.keys.dim(),
                        b.values.dim(),
                        cfg.d_model
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Prefix block on a tape.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PrefixVar {
    pub keys: Var,
    pub values: Var,
    pub len: usize,
    pub visible: bool,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct InjectionVars {
    pub encoder: Vec<PrefixVar>,
    pub decoder: Vec<PrefixVar>,
}

impl InjectionVars {
    pub fn constant<'a>(tape: &mut Tape<'a>, inj: &'a Injection) -> Self {
        let mut bind = |blocks: &'a [LayerPrefix]| {
            blocks
                .iter()
                .map(|b| PrefixVar {
                    keys: tape.constant(&b.keys),
                    values: tape.constant(&b.values),
                    len: b.len(),
                    visible: b.visible,
                })
                .collect::<Vec<_>>()
        };
        let encoder = bind(&inj.encoder);
        let decoder = bind(&inj.decoder);
        InjectionVars { encoder, decoder }
    }
}

/// Base parameters bound to a tape.
pub(crate) struct ThetaVars {
    vars: HashMap<String, Var>,
}

impl ThetaVars {
    /// `watch` turns every base tensor into a differentiable leaf.
    pub fn bind<'a>(tape: &mut Tape<'a>, model: &'a SeqModel, watch: bool) -> Self {
        let vars = model
            .theta
            .iter()
            .map(|(k, v)| (k.clone(), if watch { tape.param(v) } else { tape.constant(v) }))
            .collect();
        ThetaVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Fixed sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, d), |(pos, j)| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn embed(t: &mut Tape<'_>, th: &ThetaVars, ids: &[usize], d: usize) -> Var {
    let e = t.gather_rows(th.get("embed"), ids);
    let pos = t.constant_owned(sinusoidal_positions(ids.len(), d));
    t.add(e, pos)
}

#[allow(clippy::too_many_arguments)]
fn attention(
    t: &mut Tape<'_>,
    th: &ThetaVars,
    name: &str,
    n_heads: usize,
    queries: Var,
    memory: Var,
    prefix: Option<&PrefixVar>,
    causal: bool,
) -> Var {
    let q = t.matmul(queries, th.get(&format!("{name}.q")));
    let mut k = t.matmul(memory, th.get(&format!("{name}.k")));
    let mut v = t.matmul(memory, th.get(&format!("{name}.v")));
    let tq = t.value(queries).nrows();
    let tk = t.value(memory).nrows();
    let d = t.value(q).ncols();
    let (plen, pvis) = match prefix {
        Some(p) if p.len > 0 => {
            k = t.concat_rows(&[p.keys, k]);
            v = t.concat_rows(&[p.values, v]);
            (p.len, p.visible)
        }
        _ => (0, false),
    };
    let visible = Array2::from_shape_fn((tq, plen + tk), |(i, j)| {
        if j < plen {
            pvis
        } else {
            !causal || j - plen <= i
        }
    });
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let heads: Vec<Var> = (0..n_heads)
        .map(|h| {
            let qh = t.slice_cols(q, h * dh, (h + 1) * dh);
            let kh = t.slice_cols(k, h * dh, (h + 1) * dh);
            let vh = t.slice_cols(v, h * dh, (h + 1) * dh);
            let sc = t.matmul_t(qh, kh);
            let sc = t.scale(sc, scale);
            let a = t.masked_softmax(sc, &visible);
            t.matmul(a, vh)
        })
        .collect();
    let o = t.concat_cols(&heads);
    t.matmul(o, th.get(&format!("{name}.o")))
}

fn ffn(t: &mut Tape<'_>, th: &ThetaVars, name: &str, x: Var) -> Var {
    let h = t.matmul(x, th.get(&format!("{name}.ffn.w1")));
    let h = t.add_row(h, th.get(&format!("{name}.ffn.b1")));
    let h = t.gelu(h);
    let h = t.matmul(h, th.get(&format!("{name}.ffn.w2")));
    t.add_row(h, th.get(&format!("{name}.ffn.b2")))
}

/// Encoder states, `prompt.len() x d`.
pub(crate) fn encode_graph(
    t: &mut Tape<'_>,
    model: &SeqModel,
    th: &ThetaVars,
    prompt: &[usize],
    prefixes: &[PrefixVar],
) -> Var {
    let cfg = &model.config;
    let mut x = embed(t, th, prompt, cfg.d_model);
    for l in 0..cfg.n_layers_enc {
        let name = format!("enc.{l}");
        let h = t.rms_norm(x, th.get(&format!("{name}.norm0")));
        let a = attention(t, th, &format!("{name}.self"), cfg.n_heads, h, h, prefixes.get(l), false);
        x = t.add(x, a);
        let h = t.rms_norm(x, th.get(&format!("{name}.norm_ffn")));
        let f = ffn(t, th, &name, h);
        x = t.add(x, f);
    }
    t.rms_norm(x, th.get("enc.final_norm"))
}

/// Next-token log-probabilities, `dec_in.len() x vocab`.
pub(crate) fn decode_graph(
    t: &mut Tape<'_>,
    model: &SeqModel,
    th: &ThetaVars,
    memory: Var,
    dec_in: &[usize],
    prefixes: &[PrefixVar],
) -> Var {
    let cfg = &model.config;
    let mut x = embed(t, th, dec_in, cfg.d_model);
    for l in 0..cfg.n_layers_dec {
        let name = format!("dec.{l}");
        let h = t.rms_norm(x, th.get(&format!("{name}.norm0")));
        let a = attention(t, th, &format!("{name}.self"), cfg.n_heads, h, h, prefixes.get(l), true);
        x = t.add(x, a);
        let h = t.rms_norm(x, th.get(&format!("{name}.norm1")));
        let cross_prefix = if cfg.cross_attention_prefix { prefixes.get(l) } else { None };
        let a = attention(t, th, &format!("{name}.cross"), cfg.n_heads, h, memory, cross_prefix, false);
        x = t.add(x, a);
        let h = t.rms_norm(x, th.get(&format!("{name}.norm_ffn")));
        let f = ffn(t, th, &name, h);
        x = t.add(x, f);
    }
    let h = t.rms_norm(x, th.get("dec.final_norm"));
    let logits = t.matmul_t(h, th.get("lm_head"));
    let logits = t.add_row(logits, th.get("lm_bias"));
    t.log_softmax(logits)
}

/// Teacher-forcing decoder input: BOS followed by all but the last target token.
pub fn shift_right(target: &[usize]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(target.iter().copied().take(target.len().saturating_sub(1)))
        .collect()
}

pub(crate) fn check_inputs(model: &SeqModel, prompt: &[usize], target: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(Error::EmptyInput("prompt"));
    }
    model.check_tokens(prompt, "prompt")?;
    model.check_tokens(target, "target")
}

pub(crate) fn check_injection_vars(model: &SeqModel, inj: &InjectionVars) -> Result<()> {
    let cfg = &model.config;
    for (side, blocks, layers) in [
        ("encoder", &inj.encoder, cfg.n_layers_enc),
        ("decoder", &inj.decoder, cfg.n_layers_dec),
    ] {
        if !blocks.is_empty() && blocks.len() != layers {
            return Err(Error::Shape(format!(
                "{side} injection has {} layers, model has {layers}",
                blocks.len()
            )));
        }
    }
    Ok(())
}

/// Row `t` is the log-distribution over the vocabulary for target position
/// `t` under teacher forcing.
pub fn forward_logprobs(
    model: &SeqModel,
    prompt: &[usize],
    target: &[usize],
    injected: &Injection,
) -> Result<Array2<f64>> {
    check_inputs(model, prompt, target)?;
    injected.validate(&model.config)?;
    if target.is_empty() {
        return Ok(Array2::zeros((0, model.config.vocab_size)));
    }
    let mut t = Tape::new();
    let th = ThetaVars::bind(&mut t, model, false);
    let inj = InjectionVars::constant(&mut t, injected);
    let mem = encode_graph(&mut t, model, &th, prompt, &inj.encoder);
    let lp = decode_graph(&mut t, model, &th, mem, &shift_right(target), &inj.decoder);
    Ok(t.value(lp).clone())
}

/// Summed and per-token mean log-probability of a target sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqLogProb {
    pub sum: f64,
    pub mean: f64,
}

impl SeqLogProb {
    pub fn from_token_logprobs(lps: &[f64]) -> Result<Self> {
        if lps.is_empty() {
            return Err(Error::EmptyInput("target"));
        }
        let sum: f64 = lps.iter().sum();
        Ok(SeqLogProb {
            sum,
            mean: sum / lps.len() as f64,
        })
    }
}

pub fn sequence_logprob(
    model: &SeqModel,
    prompt: &[usize],
    target: &[usize],
    injected: &Injection,
) -> Result<SeqLogProb> {
    if target.is_empty() {
        return Err(Error::EmptyInput("target"));
    }
    let rows = forward_logprobs(model, prompt, target, injected)?;
    let picked: Vec<f64> = target.iter().enumerate().map(|(i, &tok)| rows[[i, tok]]).collect();
    SeqLogProb::from_token_logprobs(&picked)
}

/// Index of the maximum entry; ties go to the lowest index.
pub fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: appends the argmax token until EOS (not included in the
/// output) or `max_new` tokens.
pub fn greedy_decode(
    model: &SeqModel,
    prompt: &[usize],
    injected: &Injection,
    max_new: usize,
) -> Result<Vec<usize>> {
    greedy_decode_with(model, prompt, injected, max_new, |_, _| {})
}

/// Like [`greedy_decode`], calling `observe(step, logprob_row)` before each
/// choice.
pub fn greedy_decode_with<F>(
    model: &SeqModel,
    prompt: &[usize],
    injected: &Injection,
    max_new: usize,
    mut observe: F,
) -> Result<Vec<usize>>
where
    F: FnMut(usize, ndarray::ArrayView1<'_, f64>),
{
    check_inputs(model, prompt, &[])?;
    injected.validate(&model.config)?;
    let max_new = max_new.min(model.config.max_len);
    if max_new == 0 {
        return Ok(Vec::new());
    }
    let memory = {
        let mut t = Tape::new();
        let th = ThetaVars::bind(&mut t, model, false);
        let inj = InjectionVars::constant(&mut t, injected);
        let mem = encode_graph(&mut t, model, &th, prompt, &inj.encoder);
        t.value(mem).clone()
    };
    let mut dec_in = vec![BOS];
    let mut out = Vec::new();
    for step in 0..max_new {
        let mut t = Tape::new();
        let th = ThetaVars::bind(&mut t, model, false);
        let inj = InjectionVars::constant(&mut t, injected);
        let mem = t.constant(&memory);
        let lp = decode_graph(&mut t, model, &th, mem, &dec_in, &inj.decoder);
        let last = t.value(lp).row(dec_in.len() - 1);
        observe(step, last);
        let next = argmax(last);
        if next == EOS {
            break;
        }
        out.push(next);
        dec_in.push(next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD;

    fn tiny() -> SeqModel {
        SeqModel::init(ModelConfig::new(16, 8, 2, 2, 16), 7).unwrap()
    }

    #[test]
    fn rows_are_normalized() {
        let m = tiny();
        let lp = forward_logprobs(&m, &[4, 5, 6, 2], &[7, 8, 9, 2], &Injection::none()).unwrap();
        assert_eq!(lp.dim(), (4, 16));
        for row in lp.rows() {
            let s: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-6);
        }
    }

    #[test]
    fn masked_zero_prefix_is_identical_to_none() {
        let m = tiny();
        let zero = |n| LayerPrefix {
            keys: Array2::zeros((n, 8)),
            values: Array2::zeros((n, 8)),
            visible: false,
        };
        let inj = Injection {
            encoder: vec![zero(3), zero(3)],
            decoder: vec![zero(3), zero(3)],
        };
        let a = forward_logprobs(&m, &[4, 5, 6, 2], &[7, 8, 2], &Injection::none()).unwrap();
        let b = forward_logprobs(&m, &[4, 5, 6, 2], &[7, 8, 2], &inj).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn visible_prefix_changes_output() {
        let m = tiny();
        let blk = LayerPrefix {
            keys: Array2::from_elem((2, 8), 0.5),
            values: Array2::from_elem((2, 8), 0.3),
            visible: true,
        };
        let inj = Injection {
            encoder: vec![blk.clone(), blk.clone()],
            decoder: vec![blk.clone(), blk],
        };
        let a = forward_logprobs(&m, &[4, 5, 2], &[7, 2], &Injection::none()).unwrap();
        let b = forward_logprobs(&m, &[4, 5, 2], &[7, 2], &inj).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn decoder_is_causal() {
        let m = tiny();
        let a = forward_logprobs(&m, &[4, 5, 2], &[7, 8, 9], &Injection::none()).unwrap();
        let b = forward_logprobs(&m, &[4, 5, 2], &[7, 8, 12], &Injection::none()).unwrap();
        let c = forward_logprobs(&m, &[4, 5, 2], &[7, 10, 12], &Injection::none()).unwrap();
        // position 2 sees tokens up to target[1]
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_eq!(a.row(2), b.row(2));
        assert_eq!(a.row(1), c.row(1));
        assert_ne!(a.row(2), c.row(2));
    }

    #[test]
    fn shape_and_length_errors() {
        let m = tiny();
        let bad = Injection {
            encoder: vec![LayerPrefix {
                keys: Array2::zeros((1, 8)),
                values: Array2::zeros((1, 8)),
                visible: true,
            }],
            decoder: vec![],
        };
        assert!(matches!(forward_logprobs(&m, &[4], &[5], &bad), Err(Error::Shape(_))));
        let mut cfg = ModelConfig::new(16, 8, 2, 1, 8);
        cfg.max_len = 4;
        let short = SeqModel::init(cfg, 1).unwrap();
        assert!(matches!(
            forward_logprobs(&short, &[4, 4, 4, 4, 4], &[5], &Injection::none()),
            Err(Error::Overlength { len: 5, max: 4 })
        ));
        assert!(matches!(forward_logprobs(&m, &[40], &[5], &Injection::none()), Err(Error::Shape(_))));
        assert!(matches!(sequence_logprob(&m, &[4], &[], &Injection::none()), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(16, 8, 3, 1, 8).validate().is_err());
        assert!(ModelConfig::new(16, 8, 2, 0, 8).validate().is_err());
        assert_eq!(ModelConfig::new(16, 8, 2, 1, 8).max_len, 512);
    }

    #[test]
    fn sequence_logprob_matches_rows() {
        let m = tiny();
        let target = [7, 8, 9, 2];
        let rows = forward_logprobs(&m, &[4, 5, 2], &target, &Injection::none()).unwrap();
        let s = sequence_logprob(&m, &[4, 5, 2], &target, &Injection::none()).unwrap();
        let expected: f64 = target.iter().enumerate().map(|(i, &t)| rows[[i, t]]).sum();
        assert_eq!(s.sum, expected);
        assert!((s.mean - expected / 4.0).abs() < 1e-15);
    }

    #[test]
    fn token_logprob_means() {
        let one = SeqLogProb::from_token_logprobs(&[0.25f64.ln()]).unwrap();
        assert_eq!(one.sum, one.mean);
        assert!((one.mean - 0.25f64.ln()).abs() < 1e-15);
        let two = SeqLogProb::from_token_logprobs(&[0.5f64.ln(), 0.125f64.ln()]).unwrap();
        assert!((two.mean - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn greedy_rigged_and_empty() {
        let mut m = tiny();
        assert!(greedy_decode(&m, &[4, 2], &Injection::none(), 0).unwrap().is_empty());
        m.theta_mut().get_mut("lm_bias").unwrap()[[0, 7]] = 1e3;
        let out = greedy_decode(&m, &[4, 2], &Injection::none(), 5).unwrap();
        assert_eq!(out, vec![7; 5]);
    }

    #[test]
    fn ties_break_to_lowest_id() {
        let mut m = tiny();
        m.theta_mut().get_mut("dec.final_norm").unwrap().fill(0.0);
        // all logits zero: argmax is token 0
        let out = greedy_decode(&m, &[4, 2], &Injection::none(), 3).unwrap();
        assert_eq!(out, vec![PAD; 3]);
        assert_eq!(argmax(ndarray::arr1(&[1.0, 3.0, 3.0]).view()), 1);
    }

    #[test]
    fn stops_at_eos() {
        let mut m = tiny();
        m.theta_mut().get_mut("lm_bias").unwrap()[[0, EOS]] = 1e3;
        assert!(greedy_decode(&m, &[4, 2], &Injection::none(), 5).unwrap().is_empty());
    }

    #[test]
    fn theta_hash_tracks_changes() {
        let a = tiny();
        let mut b = tiny();
        assert_eq!(a.theta_hash(), b.theta_hash());
        b.theta_mut().get_mut("embed").unwrap()[[3, 3]] += 1.0;
        assert_ne!(a.theta_hash(), b.theta_hash());
    }

    #[test]
    fn head_split_round_trip() {
        let keys = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64);
        let p = LayerPrefix {
            keys: keys.clone(),
            values: keys.clone() * 2.0,
            visible: true,
        };
        let heads = p.key_heads(2);
        assert_eq!(heads.len(), 2);
        let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
        assert_eq!(ndarray::concatenate(ndarray::Axis(1), &views).unwrap(), keys);
    }
}
