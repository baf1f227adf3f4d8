//! Autoregressive token sampling with temperature, top-k, nucleus filtering
//! and classifier-free guidance.
//!
//! Per step the order is: guidance combine, then temperature, then top-k,
//! then top-p, then a categorical draw.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenGrid;
use crate::error::{NppError, Result};
use crate::patching::{patch_positions, unpatchify_labels, PatchSpec};
use crate::rng::{self, Purpose};
use crate::tensor::{Array, Float, Graph, Var};
use crate::transformer::{KvCache, Model, Position2D, SequenceInput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CfgSpace {
    #[default]
    Logits,
    LogProbs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerParams {
    pub temperature: f64,
    /// 0 keeps every token.
    pub top_k: usize,
    pub top_p: f64,
    pub cfg_scale: f64,
    pub cfg_space: CfgSpace,
    pub seed: u64,
}

impl Default for SamplerParams {
    fn default() -> Self {
        SamplerParams {
            temperature: 1.0,
            top_k: 0,
            top_p: 1.0,
            cfg_scale: 2.0,
            cfg_space: CfgSpace::Logits,
            seed: 0,
        }
    }
}

impl SamplerParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(NppError::Config(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(NppError::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(NppError::Config(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        Ok(())
    }

    /// Greedy decoding.
    pub fn greedy() -> Self {
        SamplerParams {
            top_k: 1,
            cfg_scale: 1.0,
            ..Default::default()
        }
    }
}

/// Descending by value, ties to the lower token id.
fn rank(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Temperature, top-k and top-p filtering. Removed entries become `-inf`.
pub fn filter_logits(logits: &[f64], params: &SamplerParams) -> Result<Vec<f64>> {
    params.validate()?;
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(NppError::Numeric("logits must be finite before filtering".into()));
    }
    let mut out: Vec<f64> = logits.iter().map(|&x| x / params.temperature).collect();
    if params.top_k > 0 && params.top_k < out.len() {
        for &i in &rank(&out)[params.top_k..] {
            out[i] = f64::NEG_INFINITY;
        }
    }
    if params.top_p < 1.0 {
        let probs = softmax(&out);
        let order = rank(&probs);
        let mut cumulative = 0.0;
        let mut keep = order.len();
        for (n, &i) in order.iter().enumerate() {
            cumulative += probs[i];
            if cumulative >= params.top_p {
                keep = n + 1;
                break;
            }
        }
        for &i in &order[keep..] {
            out[i] = f64::NEG_INFINITY;
        }
    }
    Ok(out)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// `uncond + s·(cond − uncond)`; `s = 1` and `s = 0` return the inputs exactly.
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(NppError::Dimension(format!(
            "guidance inputs of length {} and {}",
            cond.len(),
            uncond.len()
        )));
    }
    if scale == 1.0 {
        return Ok(cond.to_vec());
    }
    if scale == 0.0 {
        return Ok(uncond.to_vec());
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + scale * (c - u)).collect())
}

/// Draws an index from `softmax(filtered)`; `-inf` entries are never drawn.
pub fn sample_categorical<R: Rng + ?Sized>(filtered: &[f64], rng: &mut R) -> usize {
    let probs = softmax(filtered);
    let u: f64 = rng.gen();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last = i;
            if u < cumulative {
                return i;
            }
        }
    }
    last
}

fn to_f64<T: Float>(row: &[T]) -> Vec<f64> {
    row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()
}

/// Guided, filtered next-token choice from one or two logit rows.
fn choose<R: Rng>(cond: &[f64], uncond: Option<&[f64]>, params: &SamplerParams, rng: &mut R) -> Result<usize> {
    let combined = match uncond {
        None => cond.to_vec(),
        Some(u) => match params.cfg_space {
            CfgSpace::Logits => cfg_combine(cond, u, params.cfg_scale)?,
            CfgSpace::LogProbs => cfg_combine(&log_softmax(cond), &log_softmax(u), params.cfg_scale)?,
        },
    };
    if combined.iter().any(|x| x.is_nan()) {
        return Err(NppError::Numeric("NaN logits during sampling".into()));
    }
    Ok(sample_categorical(&filter_logits(&combined, params)?, rng))
}

/// Decoding stream for one conditioning (class or null).
struct Stream<T> {
    class: Option<usize>,
    cache: KvCache<T>,
}

impl<T: Float> Stream<T> {
    fn new(model: &Model<T>, class: Option<usize>) -> Self {
        Stream {
            class,
            cache: KvCache::new(model.config()),
        }
    }

    fn start(&mut self, model: &Model<T>) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let cond = model.class_embedding(&bound, self.class)?;
        let logits = model.forward_cached(&bound, cond, Position2D::default(), &mut self.cache)?;
        Ok(to_f64(logits.data()))
    }

    /// Feeds the mean embedding of `ids` at `position`.
    fn feed(&mut self, model: &Model<T>, ids: &[usize], position: Position2D) -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let emb = mean_embedding(model, &bound, ids)?;
        let logits = model.forward_cached(&bound, emb, position, &mut self.cache)?;
        Ok(to_f64(logits.data()))
    }
}

fn mean_embedding<'g, T: Float>(
    model: &Model<T>,
    bound: &crate::transformer::BoundParams<'g, T>,
    ids: &[usize],
) -> Result<Var<'g, T>> {
    let rows = model.embed_tokens(bound, ids)?;
    let d = model.config().d_model;
    rows.reshape(&[1, ids.len(), d])?.mean_over_axis(1)
}

fn check_class<T: Float>(model: &Model<T>, class: usize) -> Result<()> {
    if class >= model.config().num_classes {
        return Err(NppError::Config(format!(
            "class {class} out of range for {} classes",
            model.config().num_classes
        )));
    }
    Ok(())
}

fn streams<T: Float>(model: &Model<T>, class: usize, params: &SamplerParams) -> (Stream<T>, Option<Stream<T>>) {
    let guided = params.cfg_scale != 1.0;
    (
        Stream::new(model, Some(class)),
        guided.then(|| Stream::new(model, None)),
    )
}

fn raster_position(index: usize, grid_w: usize) -> Position2D {
    Position2D::new(index / grid_w, index % grid_w)
}

/// First `count` tokens of a raster-order sample, using the KV cache.
/// `stream_id` selects the random stream under `params.seed`.
pub fn generate_tokens<T: Float>(
    model: &Model<T>,
    class: usize,
    params: &SamplerParams,
    count: usize,
    stream_id: u64,
) -> Result<Vec<u32>> {
    params.validate()?;
    check_class(model, class)?;
    let cfg = model.config();
    if count > cfg.seq_len() {
        return Err(NppError::Config(format!(
            "{count} tokens exceed grid of {}",
            cfg.seq_len()
        )));
    }
    let mut rng = rng::stream(params.seed, Purpose::Sample, stream_id);
    let (mut cond, mut uncond) = streams(model, class, params);
    let mut c_logits = cond.start(model)?;
    let mut u_logits = uncond.as_mut().map(|s| s.start(model)).transpose()?;
    let mut tokens = Vec::with_capacity(count);
    for i in 0..count {
        let tok = choose(&c_logits, u_logits.as_deref(), params, &mut rng)?;
        tokens.push(tok as u32);
        if i + 1 < count {
            let pos = raster_position(i, cfg.grid_w);
            c_logits = cond.feed(model, &[tok], pos)?;
            if let Some(s) = uncond.as_mut() {
                u_logits = Some(s.feed(model, &[tok], pos)?);
            }
        }
    }
    Ok(tokens)
}

/// Same draws as [`generate_tokens`] but recomputing the full prefix at every
/// step instead of using the cache.
pub fn generate_tokens_uncached<T: Float>(
    model: &Model<T>,
    class: usize,
    params: &SamplerParams,
    count: usize,
    stream_id: u64,
) -> Result<Vec<u32>> {
    params.validate()?;
    check_class(model, class)?;
    let cfg = model.config();
    let mut rng = rng::stream(params.seed, Purpose::Sample, stream_id);
    let guided = params.cfg_scale != 1.0;
    let mut tokens: Vec<usize> = Vec::with_capacity(count);
    let last_row = |class: Option<usize>, tokens: &[usize]| -> Result<Vec<f64>> {
        let g = Graph::new();
        let bound = model.bind(&g, false);
        let mut rows = vec![model.class_embedding(&bound, class)?];
        let mut positions = vec![Position2D::default()];
        if !tokens.is_empty() {
            rows.push(model.embed_tokens(&bound, tokens)?);
            positions.extend((0..tokens.len()).map(|i| raster_position(i, cfg.grid_w)));
        }
        let input = SequenceInput {
            embeddings: Var::concat(&rows, 0)?,
            positions,
        };
        let logits = model.forward::<rand_chacha::ChaCha8Rng>(&bound, &[input], None)?;
        let value = logits.value();
        Ok(to_f64(value.row(value.rows() - 1)))
    };
    for _ in 0..count {
        let c = last_row(Some(class), &tokens)?;
        let u = if guided { Some(last_row(None, &tokens)?) } else { None };
        tokens.push(choose(&c, u.as_deref(), params, &mut rng)?);
    }
    Ok(tokens.into_iter().map(|t| t as u32).collect())
}

/// A full `H x W` sample for `class`.
pub fn generate<T: Float>(model: &Model<T>, class: usize, params: &SamplerParams, stream_id: u64) -> Result<TokenGrid> {
    let cfg = model.config();
    let tokens = generate_tokens(model, class, params, cfg.seq_len(), stream_id)?;
    TokenGrid::new(class as u32, cfg.grid_h, cfg.grid_w, tokens)
}

/// `count` samples; sample `i` uses random stream `i`.
pub fn generate_many<T: Float>(
    model: &Model<T>,
    class: usize,
    params: &SamplerParams,
    count: usize,
) -> Result<Vec<TokenGrid>> {
    (0..count).map(|i| generate(model, class, params, i as u64)).collect()
}

/// Patch-level decoding: one prediction per patch, shared by all `K` of its
/// tokens, which are drawn one at a time from it. The next input is the mean
/// embedding of the drawn tokens at the patch's grid position. Used to show
/// what a model trained only on patches does when its predictions are read
/// out directly.
pub fn generate_patchwise<T: Float>(
    model: &Model<T>,
    class: usize,
    params: &SamplerParams,
    side: usize,
    stream_id: u64,
) -> Result<TokenGrid> {
    params.validate()?;
    check_class(model, class)?;
    let cfg = model.config();
    let spec = PatchSpec::new(cfg.grid_h, cfg.grid_w, side)?;
    let positions = patch_positions(&spec);
    let mut rng = rng::stream(params.seed, Purpose::Sample, stream_id);
    let (mut cond, mut uncond) = streams(model, class, params);
    let mut c_logits = cond.start(model)?;
    let mut u_logits = uncond.as_mut().map(|s| s.start(model)).transpose()?;
    let mut groups = Vec::with_capacity(spec.num_patches());
    for (i, &pos) in positions.iter().enumerate() {
        let group: Vec<usize> = (0..spec.tokens_per_patch())
            .map(|_| choose(&c_logits, u_logits.as_deref(), params, &mut rng))
            .collect::<Result<_>>()?;
        if i + 1 < positions.len() {
            c_logits = cond.feed(model, &group, pos)?;
            if let Some(s) = uncond.as_mut() {
                u_logits = Some(s.feed(model, &group, pos)?);
            }
        }
        groups.push(group.into_iter().map(|t| t as u32).collect::<Vec<u32>>());
    }
    let tokens = unpatchify_labels(&groups, &spec)?;
    TokenGrid::new(class as u32, cfg.grid_h, cfg.grid_w, tokens)
}

/// Fraction of `side x side` patches whose tokens are all equal.
pub fn uniform_patch_fraction(grids: &[TokenGrid], side: usize) -> Result<f64> {
    let mut uniform = 0usize;
    let mut total = 0usize;
    for grid in grids {
        let spec = PatchSpec::new(grid.height(), grid.width(), side)?;
        for group in crate::patching::patchify_labels(grid.tokens(), &spec)? {
            total += 1;
            uniform += usize::from(group.iter().all(|&t| t == group[0]));
        }
    }
    Ok(if total == 0 { 0.0 } else { uniform as f64 / total as f64 })
}

/// Row of `[1, V]` logits as `f64`, for callers working outside a graph.
pub fn logits_row<T: Float>(logits: &Array<T>) -> Vec<f64> {
    to_f64(logits.data())
}
