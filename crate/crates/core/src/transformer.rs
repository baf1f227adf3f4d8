//! Decoder-only transformer with causal self-attention and 2D rotary
//! position embeddings.
//!
//! Blocks are pre-norm: `x += attn(norm(x))`, `x += mlp(norm(x))`. The head
//! dimension is split in two halves; the first half is rotated by the row
//! coordinate and the second by the column coordinate.

use std::ops::Range;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NppError, Result};
use crate::rng::{self, Purpose};
use crate::tensor::{Array, Float, Graph, Var};

/// A coordinate on the token or patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Position2D {
    pub h: usize,
    pub w: usize,
}

impl Position2D {
    pub fn new(h: usize, w: usize) -> Self {
        Position2D { h, w }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Rms,
    Layer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MlpKind {
    /// `W2 · (silu(x W1) ⊙ x W3)` with hidden width `round(8/3 · d)`.
    #[default]
    Swiglu,
    /// `W2 · silu(x W1)` with hidden width `4 · d`.
    Plain,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub attn_dropout: f64,
    #[serde(default)]
    pub class_dropout: f64,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default)]
    pub mlp: MlpKind,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl ModelConfig {
    /// Config with zero dropout and default norm/MLP choices.
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        vocab_size: usize,
        grid: (usize, usize),
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            grid_h: grid.0,
            grid_w: grid.1,
            num_classes,
            dropout: 0.0,
            attn_dropout: 0.0,
            class_dropout: 0.0,
            rope_base: default_rope_base(),
            norm: NormKind::Rms,
            mlp: MlpKind::Swiglu,
            norm_eps: default_norm_eps(),
            init_std: default_init_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NppError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NppError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.head_dim().is_multiple_of(4) {
            return Err(NppError::Config(format!(
                "head_dim {} must be divisible by 4 for 2D rotary embeddings",
                self.head_dim()
            )));
        }
        for (name, rate) in [
            ("dropout", self.dropout),
            ("attn_dropout", self.attn_dropout),
            ("class_dropout", self.class_dropout),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(NppError::Config(format!("{name} {rate} outside [0, 1]")));
            }
        }
        if !(self.rope_base > 1.0) || !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return Err(NppError::Config(
                "rope_base > 1, norm_eps > 0, init_std >= 0 required".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// `N = grid_h * grid_w`.
    pub fn seq_len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn mlp_hidden(&self) -> usize {
        match self.mlp {
            MlpKind::Swiglu => (8.0 * self.d_model as f64 / 3.0).round() as usize,
            MlpKind::Plain => 4 * self.d_model,
        }
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, v, h) = (self.d_model, self.vocab_size, self.mlp_hidden());
        let norm = match self.norm {
            NormKind::Rms => d,
            NormKind::Layer => 2 * d,
        };
        let mlp = match self.mlp {
            MlpKind::Swiglu => 3 * d * h,
            MlpKind::Plain => 2 * d * h,
        };
        let per_layer = 2 * norm + 4 * d * d + mlp;
        v * d + (self.num_classes + 1) * d + self.n_layers * per_layer + norm + d * v
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v, h) = (self.d_model, self.vocab_size, self.mlp_hidden());
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("cls_emb".to_string(), vec![self.num_classes + 1, d]),
        ];
        let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
            out.push((format!("{prefix}.weight"), vec![d]));
            if self.norm == NormKind::Layer {
                out.push((format!("{prefix}.bias"), vec![d]));
            }
        };
        for l in 0..self.n_layers {
            norm(&mut out, &format!("layers.{l}.attn_norm"));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
            }
            norm(&mut out, &format!("layers.{l}.mlp_norm"));
            out.push((format!("layers.{l}.mlp.w1"), vec![d, h]));
            out.push((format!("layers.{l}.mlp.w2"), vec![h, d]));
            if self.mlp == MlpKind::Swiglu {
                out.push((format!("layers.{l}.mlp.w3"), vec![d, h]));
            }
        }
        norm(&mut out, "final_norm");
        out.push(("head".to_string(), vec![d, v]));
        out
    }
}

/// Model weights in [`ModelConfig::param_layout`] order.
#[derive(Clone, Debug)]
pub struct Parameters<T> {
    names: Vec<String>,
    tensors: Vec<Arc<Array<T>>>,
}

impl<T: Float> Parameters<T> {
    /// Normal(0, init_std) for matrices, ones for norm gains, zeros for biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Purpose::Init, 0);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| NppError::Config(e.to_string()))?;
        let (names, tensors) = config
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let arr = if name.ends_with(".weight") {
                    Array::full(&shape, T::one())
                } else if name.ends_with(".bias") {
                    Array::zeros(&shape)
                } else {
                    Array::from_fn(&shape, |_| T::lit(normal.sample(&mut rng)))
                };
                (name, Arc::new(arr))
            })
            .unzip();
        Ok(Parameters { names, tensors })
    }

    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Array<T>>) -> Result<Self> {
        let layout = config.param_layout();
        if layout.len() != tensors.len() {
            return Err(NppError::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NppError::Config(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Parameters {
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors: tensors.into_iter().map(Arc::new).collect(),
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Array<T>>] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.tensors[i].as_ref())
    }

    /// Mutable access; copies the buffer if a graph still shares it.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Array<T> {
        Arc::make_mut(&mut self.tensors[index])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Parameters registered as leaves of one graph.
pub struct BoundParams<'g, T> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Float> BoundParams<'g, T> {
    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}

struct LayerVars<'g, T> {
    attn_norm: (Var<'g, T>, Option<Var<'g, T>>),
    wq: Var<'g, T>,
    wk: Var<'g, T>,
    wv: Var<'g, T>,
    wo: Var<'g, T>,
    mlp_norm: (Var<'g, T>, Option<Var<'g, T>>),
    w1: Var<'g, T>,
    w2: Var<'g, T>,
    w3: Option<Var<'g, T>>,
}

/// One input sequence: `L x d_model` embeddings and their positions.
pub struct SequenceInput<'g, T> {
    pub embeddings: Var<'g, T>,
    pub positions: Vec<Position2D>,
}

/// Per-sequence rotary tables, shared by all heads and layers.
pub struct RopeTables<T> {
    cos: Rc<Vec<T>>,
    sin: Rc<Vec<T>>,
}

impl<T: Float> RopeTables<T> {
    /// Angles `pos · base^(-2j/(head_dim/2))`, `j < head_dim/4`: rows for the
    /// first `head_dim/4` pairs, columns for the rest.
    pub fn new(positions: &[Position2D], head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(4) {
            return Err(NppError::Config(format!("head_dim {head_dim} not divisible by 4")));
        }
        let quarter = head_dim / 4;
        let half = head_dim / 2;
        let freqs: Vec<f64> = (0..quarter).map(|j| base.powf(-2.0 * j as f64 / half as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for p in positions {
            for pair in 0..half {
                let angle = if pair < quarter {
                    p.h as f64 * freqs[pair]
                } else {
                    p.w as f64 * freqs[pair - quarter]
                };
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(RopeTables {
            cos: Rc::new(cos),
            sin: Rc::new(sin),
        })
    }

    fn apply<'g>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.rotate_pairs(Rc::clone(&self.cos), Rc::clone(&self.sin))
    }
}

/// Rotates `[L, head_dim]` queries or keys by their 2D positions.
pub fn rope_2d<'g, T: Float>(x: Var<'g, T>, positions: &[Position2D], base: f64) -> Result<Var<'g, T>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[0] != positions.len() {
        return Err(NppError::Dimension(format!(
            "rope input {shape:?} vs {} positions",
            positions.len()
        )));
    }
    RopeTables::new(positions, shape[1], base)?.apply(x)
}

/// Incremental decoding state: rotated keys and values per layer and head.
#[derive(Clone, Debug)]
pub struct KvCache<T> {
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    len: usize,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Float> KvCache<T> {
    pub fn new(config: &ModelConfig) -> Self {
        let slots = config.n_layers * config.n_heads;
        KvCache {
            n_layers: config.n_layers,
            n_heads: config.n_heads,
            head_dim: config.head_dim(),
            len: 0,
            keys: vec![Vec::new(); slots],
            values: vec![Vec::new(); slots],
        }
    }

    /// Number of positions fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn matches(&self, config: &ModelConfig) -> bool {
        self.n_layers == config.n_layers && self.n_heads == config.n_heads && self.head_dim == config.head_dim()
    }
}

/// Where attention keys come from.
enum KeySource<'c, T> {
    /// Full causal self-attention within each sequence.
    Full,
    /// A single new row attending to the cache plus itself.
    Cached(&'c mut KvCache<T>),
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: Parameters<T>,
}

impl<T: Float> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = Parameters::init(&config, seed)?;
        Ok(Model { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: Parameters<T>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.param_layout().len() {
            return Err(NppError::Config("parameter set does not match config".into()));
        }
        Ok(Model { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Parameters<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters<T> {
        &mut self.params
    }

    /// Registers every weight in `graph`; `trainable` enables gradients.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> BoundParams<'g, T> {
        BoundParams {
            vars: self
                .params
                .tensors()
                .iter()
                .map(|t| graph.shared(Arc::clone(t), trainable))
                .collect(),
        }
    }

    fn norm_width(&self) -> usize {
        match self.config.norm {
            NormKind::Rms => 1,
            NormKind::Layer => 2,
        }
    }

    fn layer_vars<'g>(&self, bound: &BoundParams<'g, T>, layer: usize) -> LayerVars<'g, T> {
        let nw = self.norm_width();
        let per_layer = 2 * nw + 4 + if self.config.mlp == MlpKind::Swiglu { 3 } else { 2 };
        let v = &bound.vars[2 + layer * per_layer..2 + (layer + 1) * per_layer];
        let norm = |i: usize| (v[i], (nw == 2).then(|| v[i + 1]));
        let m = nw + 4;
        LayerVars {
            attn_norm: norm(0),
            wq: v[nw],
            wk: v[nw + 1],
            wv: v[nw + 2],
            wo: v[nw + 3],
            mlp_norm: norm(m),
            w1: v[m + nw],
            w2: v[m + nw + 1],
            w3: (self.config.mlp == MlpKind::Swiglu).then(|| v[m + nw + 2]),
        }
    }

    fn final_norm<'g>(&self, bound: &BoundParams<'g, T>) -> (Var<'g, T>, Option<Var<'g, T>>) {
        let n = bound.vars.len();
        let nw = self.norm_width();
        let i = n - 1 - nw;
        (bound.vars[i], (nw == 2).then(|| bound.vars[i + 1]))
    }

    fn head<'g>(&self, bound: &BoundParams<'g, T>) -> Var<'g, T> {
        *bound.vars.last().expect("head")
    }

    fn apply_norm<'g>(&self, x: Var<'g, T>, norm: (Var<'g, T>, Option<Var<'g, T>>)) -> Result<Var<'g, T>> {
        let eps = T::lit(self.config.norm_eps);
        match norm {
            (gain, None) => x.layer_norm_rms(gain, eps),
            (gain, Some(bias)) => x.layer_norm(gain, bias, eps),
        }
    }

    /// Token embedding rows for `ids`.
    pub fn embed_tokens<'g>(&self, bound: &BoundParams<'g, T>, ids: &[usize]) -> Result<Var<'g, T>> {
        bound.vars[0].embedding_lookup(ids)
    }

    /// Class embedding `[1, d]`; `None` selects the null (unconditional) row.
    pub fn class_embedding<'g>(&self, bound: &BoundParams<'g, T>, class: Option<usize>) -> Result<Var<'g, T>> {
        let row = match class {
            Some(c) if c >= self.config.num_classes => {
                return Err(NppError::Index(format!(
                    "class {c} out of range for {} classes",
                    self.config.num_classes
                )))
            }
            Some(c) => c,
            None => self.config.num_classes,
        };
        bound.vars[1].embedding_lookup(&[row])
    }

    /// Logits for a batch of sequences, stacked row-wise. Passing `rng`
    /// enables dropout (train mode).
    pub fn forward<'g, R: Rng>(
        &self,
        bound: &BoundParams<'g, T>,
        inputs: &[SequenceInput<'g, T>],
        rng: Option<&mut R>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        if inputs.is_empty() {
            return Err(NppError::Contract("forward needs at least one sequence".into()));
        }
        let mut spans = Vec::with_capacity(inputs.len());
        let mut tables = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for input in inputs {
            let shape = input.embeddings.shape();
            if shape.len() != 2 || shape[1] != cfg.d_model || shape[0] != input.positions.len() {
                return Err(NppError::Dimension(format!(
                    "sequence embeddings {shape:?} with {} positions, d_model {}",
                    input.positions.len(),
                    cfg.d_model
                )));
            }
            if shape[0] == 0 || shape[0] > cfg.seq_len() + 1 {
                return Err(NppError::Contract(format!(
                    "sequence length {} outside [1, {}]",
                    shape[0],
                    cfg.seq_len() + 1
                )));
            }
            spans.push(offset..offset + shape[0]);
            offset += shape[0];
            tables.push(RopeTables::new(&input.positions, cfg.head_dim(), cfg.rope_base)?);
        }
        let embeddings: Vec<_> = inputs.iter().map(|i| i.embeddings).collect();
        let x = Var::concat(&embeddings, 0)?;
        let mut source = KeySource::Full;
        self.trunk(bound, x, &spans, &tables, &mut source, rng)
    }

    /// Feeds one new embedding row at `position` through the cache and
    /// returns its `[1, V]` logits. Always evaluated without dropout.
    pub fn forward_cached(
        &self,
        bound: &BoundParams<'_, T>,
        embedding: Var<'_, T>,
        position: Position2D,
        cache: &mut KvCache<T>,
    ) -> Result<Array<T>> {
        if !cache.matches(&self.config) {
            return Err(NppError::Contract("kv cache built for a different config".into()));
        }
        if cache.len > self.config.seq_len() {
            return Err(NppError::Contract("kv cache is full".into()));
        }
        if embedding.shape() != [1, self.config.d_model] {
            return Err(NppError::Dimension(format!(
                "cached step expects [1, {}], got {:?}",
                self.config.d_model,
                embedding.shape()
            )));
        }
        let tables = [RopeTables::new(
            &[position],
            self.config.head_dim(),
            self.config.rope_base,
        )?];
        let mut source = KeySource::Cached(cache);
        let logits = self.trunk::<rand_chacha::ChaCha8Rng>(bound, embedding, &[0..1], &tables, &mut source, None)?;
        if let KeySource::Cached(c) = source {
            c.len += 1;
        }
        Ok(logits.value().as_ref().clone())
    }

    fn trunk<'g, R: Rng>(
        &self,
        bound: &BoundParams<'g, T>,
        mut x: Var<'g, T>,
        spans: &[Range<usize>],
        tables: &[RopeTables<T>],
        source: &mut KeySource<'_, T>,
        mut rng: Option<&mut R>,
    ) -> Result<Var<'g, T>> {
        let cfg = &self.config;
        let width = cfg.d_model;
        let drop = |v: Var<'g, T>, rate: f64, rng: &mut Option<&mut R>| -> Result<Var<'g, T>> {
            match rng {
                Some(r) => v.dropout(rate, *r),
                None => Ok(v),
            }
        };
        for layer in 0..cfg.n_layers {
            let lv = self.layer_vars(bound, layer);
            let h = self.apply_norm(x, lv.attn_norm)?;
            let q = h.matmul(lv.wq)?;
            let k = h.matmul(lv.wk)?;
            let v = h.matmul(lv.wv)?;
            let mut seq_outputs = Vec::with_capacity(spans.len());
            for (span, table) in spans.iter().zip(tables) {
                let mut heads = Vec::with_capacity(cfg.n_heads);
                for head in 0..cfg.n_heads {
                    let cols = head * cfg.head_dim()..(head + 1) * cfg.head_dim();
                    let qh = table.apply(q.slice(span.clone(), cols.clone())?)?;
                    let kh = table.apply(k.slice(span.clone(), cols.clone())?)?;
                    let vh = v.slice(span.clone(), cols)?;
                    let (keys, values, mask_offset) = match source {
                        KeySource::Full => (kh, vh, 0),
                        KeySource::Cached(cache) => {
                            let slot = layer * cfg.n_heads + head;
                            cache.keys[slot].extend_from_slice(kh.value().data());
                            cache.values[slot].extend_from_slice(vh.value().data());
                            let rows = cache.len + 1;
                            let hd = cfg.head_dim();
                            let g = x.graph();
                            let kc = Array::new(vec![rows, hd], cache.keys[slot].clone())?;
                            let vc = Array::new(vec![rows, hd], cache.values[slot].clone())?;
                            (g.constant(kc), g.constant(vc), cache.len)
                        }
                    };
                    let scale = T::one() / T::from_usize(cfg.head_dim()).unwrap().sqrt();
                    let scores = qh.matmul_t(keys, false, true)?.scale(scale).causal_mask(mask_offset)?;
                    let probs = drop(scores.softmax()?, cfg.attn_dropout, &mut rng)?;
                    heads.push(probs.matmul(values)?);
                }
                seq_outputs.push(Var::concat(&heads, 1)?);
            }
            let attn = Var::concat(&seq_outputs, 0)?.matmul(lv.wo)?;
            x = x.add(drop(attn, cfg.dropout, &mut rng)?)?;

            let h = self.apply_norm(x, lv.mlp_norm)?;
            let up = h.matmul(lv.w1)?.silu();
            let hidden = match lv.w3 {
                Some(w3) => up.mul(h.matmul(w3)?)?,
                None => up,
            };
            let mlp = hidden.matmul(lv.w2)?;
            x = x.add(drop(mlp, cfg.dropout, &mut rng)?)?;
            debug_assert_eq!(x.shape()[1], width);
        }
        let h = self.apply_norm(x, self.final_norm(bound))?;
        h.matmul(self.head(bound))
    }
}
