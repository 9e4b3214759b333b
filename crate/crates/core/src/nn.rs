//! Transformer encoder/decoder with per-layer predictions, exposed per-head
//! attention weight maps, and block-diagonal self-attention masking for the
//! auxiliary query group.
//!
//! The backbone is an identity patchifier: each grid cell becomes one encoder
//! token. Keys carry fixed sinusoidal positional embeddings; decoder queries
//! carry learned query embeddings added at every layer. Dropout is omitted so
//! forward passes are bit-deterministic.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::BoxCxCyWH;
use crate::grad::{DiffArray, GradError, Tape};
use crate::params::{ParamStore, Tensor};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("model config: {0}")]
    BadConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("scene features: expected {expected} values, got {got}")]
    BadFeatures { expected: usize, got: usize },
    #[error("query transplant requires equal hidden size: aux dim {aux} vs d_model {d_model}")]
    AuxDimMismatch { aux: usize, d_model: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_queries: usize,
    pub n_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub ffn_dim: usize,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 4 != 0 {
            return Err(ModelError::BadConfig("d_model must be divisible by 4 (2-D sine embedding)".into()));
        }
        if self.n_dec_layers == 0 {
            return Err(ModelError::BadConfig("n_dec_layers must be >= 1".into()));
        }
        for (name, v) in [
            ("n_heads", self.n_heads),
            ("n_queries", self.n_queries),
            ("n_classes", self.n_classes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("c_in", self.c_in),
            ("ffn_dim", self.ffn_dim),
        ] {
            if v == 0 {
                return Err(ModelError::BadConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Per-query class probabilities plus a normalized center-size box.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub bbox: BoxCxCyWH,
}

/// Encoder tokens and their positional embeddings, both `[HW, d_model]`.
pub struct EncoderOutput {
    pub tokens: DiffArray,
    pub pos: DiffArray,
}

/// Per-layer, per-head attention weight maps recorded during a decoder pass.
pub struct AttentionRecord {
    /// `self_attn[layer][head]`: `[N_total, N_total]`.
    pub self_attn: Vec<Vec<DiffArray>>,
    /// `cross_attn[layer][head]`: `[N_total, HW]`.
    pub cross_attn: Vec<Vec<DiffArray>>,
}

/// Class probabilities and boxes emitted after one decoder layer.
pub struct LayerOutput {
    /// `[N_total, n_classes]`, sigmoid probabilities.
    pub probs: DiffArray,
    /// `[N_total, 4]`, sigmoid-squashed (cx, cy, w, h).
    pub boxes: DiffArray,
}

pub struct DecoderOutputs {
    pub layers: Vec<LayerOutput>,
    pub attention: AttentionRecord,
    /// Disjoint query-index ranges covering N_total. Range 0 is always the
    /// student group (the one kept at inference); any others are auxiliary.
    pub group_ranges: Vec<Range<usize>>,
}

impl DecoderOutputs {
    pub fn student_range(&self) -> Range<usize> {
        self.group_ranges[0].clone()
    }

    /// Value snapshot of the predictions for `range` at `layer`.
    pub fn predictions(&self, t: &Tape, layer: usize, range: &Range<usize>) -> Vec<Prediction> {
        let probs = t.values(self.layers[layer].probs);
        let boxes = t.values(self.layers[layer].boxes);
        let k = t.shape(self.layers[layer].probs)[1];
        range
            .clone()
            .map(|q| Prediction {
                probs: probs[q * k..(q + 1) * k].to_vec(),
                bbox: BoxCxCyWH::new(
                    boxes[q * 4],
                    boxes[q * 4 + 1],
                    boxes[q * 4 + 2],
                    boxes[q * 4 + 3],
                ),
            })
            .collect()
    }

    pub fn student_predictions(&self, t: &Tape, layer: usize) -> Vec<Prediction> {
        self.predictions(t, layer, &self.student_range())
    }
}

/// Parameters bound to a tape, either as trainable leaves or constants.
pub struct BoundParams {
    map: HashMap<String, DiffArray>,
}

impl BoundParams {
    /// Insert every tensor in `store` onto the tape. `trainable` controls
    /// whether gradients reach them; a frozen teacher binds with `false`.
    pub fn bind(t: &mut Tape, store: &ParamStore, trainable: bool) -> Result<Self, ModelError> {
        let mut map = HashMap::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            let node = if trainable {
                t.leaf(&tensor.shape, tensor.data.clone())?
            } else {
                t.constant(&tensor.shape, tensor.data.clone())?
            };
            map.insert(name.to_owned(), node);
        }
        Ok(Self { map })
    }

    pub fn get(&self, name: &str) -> Result<DiffArray, ModelError> {
        self.map.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_owned()))
    }

    /// Accumulated gradients, in the store's iteration order.
    pub fn grads<'a>(
        &self,
        t: &'a Tape,
        store: &ParamStore,
    ) -> Result<Vec<(String, &'a [f64])>, ModelError> {
        store
            .names()
            .map(|n| Ok((n.to_owned(), t.grad(self.get(n)?))))
            .collect()
    }
}

/// Scaled dot-product attention weights: row i is softmax_j(q_i·k_j / √d),
/// optionally under a boolean mask (true = allowed, masked entries exactly 0).
pub fn attention_weights(
    t: &mut Tape,
    queries: DiffArray,
    keys: DiffArray,
    mask: Option<&[bool]>,
) -> Result<DiffArray, GradError> {
    let d = t.shape(queries)[1];
    debug_assert_eq!(d, t.shape(keys)[1]);
    // scores = q · kᵀ / √d, realized as (q/√d) · kᵀ.
    let scaled = t.scale(queries, 1.0 / (d as f64).sqrt());
    let scores = t.matmul_nt(scaled, keys)?;
    match mask {
        Some(m) => t.masked_softmax_rows(scores, m),
        None => t.softmax(scores, 1),
    }
}

/// Per-head projection matrices for one attention block.
pub struct AttnProjections {
    pub wq: Vec<DiffArray>,
    pub wk: Vec<DiffArray>,
    pub wv: Vec<DiffArray>,
    pub wo: DiffArray,
    pub bo: DiffArray,
}

impl AttnProjections {
    fn bind(bp: &BoundParams, prefix: &str, n_heads: usize) -> Result<Self, ModelError> {
        let mut wq = Vec::with_capacity(n_heads);
        let mut wk = Vec::with_capacity(n_heads);
        let mut wv = Vec::with_capacity(n_heads);
        for m in 0..n_heads {
            wq.push(bp.get(&format!("{prefix}.h{m}.wq"))?);
            wk.push(bp.get(&format!("{prefix}.h{m}.wk"))?);
            wv.push(bp.get(&format!("{prefix}.h{m}.wv"))?);
        }
        Ok(Self { wq, wk, wv, wo: bp.get(&format!("{prefix}.wo"))?, bo: bp.get(&format!("{prefix}.bo"))? })
    }
}

/// Multi-head attention. Returns the projected output `[N_q, d]` and the
/// per-head weight maps `[N_q, N_kv]` for distillation.
pub fn multi_head_attention(
    t: &mut Tape,
    x_q: DiffArray,
    x_k: DiffArray,
    x_v: DiffArray,
    proj: &AttnProjections,
    mask: Option<&[bool]>,
) -> Result<(DiffArray, Vec<DiffArray>), GradError> {
    let n_heads = proj.wq.len();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weight_maps = Vec::with_capacity(n_heads);
    for m in 0..n_heads {
        let q = t.matmul(x_q, proj.wq[m])?;
        let k = t.matmul(x_k, proj.wk[m])?;
        let v = t.matmul(x_v, proj.wv[m])?;
        let w = attention_weights(t, q, k, mask)?;
        heads.push(t.matmul(w, v)?);
        weight_maps.push(w);
    }
    let concat = t.concat(&heads, 1)?;
    let projected = t.matmul(concat, proj.wo)?;
    let out = t.add_row_broadcast(projected, proj.bo)?;
    Ok((out, weight_maps))
}

/// Block-diagonal self-attention mask: within-group attention allowed,
/// cross-group forbidden. `true` = allowed. `sizes` lists the query count of
/// each group in concatenation order.
pub fn build_group_mask(sizes: &[usize]) -> Vec<bool> {
    let n: usize = sizes.iter().sum();
    let mut group_of = Vec::with_capacity(n);
    for (g, &s) in sizes.iter().enumerate() {
        group_of.extend(std::iter::repeat(g).take(s));
    }
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            mask[i * n + j] = group_of[i] == group_of[j];
        }
    }
    mask
}

/// Fixed 2-D sinusoidal positional embeddings, `[HW, d]` row-major over cells.
pub fn sinusoidal_pos_2d(grid_h: usize, grid_w: usize, d: usize) -> Vec<f64> {
    assert_eq!(d % 4, 0);
    let half = d / 2;
    let quarter = half / 2;
    let mut out = vec![0.0; grid_h * grid_w * d];
    for h in 0..grid_h {
        for w in 0..grid_w {
            let base = (h * grid_w + w) * d;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(2.0 * k as f64 / half as f64);
                out[base + 2 * k] = (h as f64 * omega).sin();
                out[base + 2 * k + 1] = (h as f64 * omega).cos();
                out[base + half + 2 * k] = (w as f64 * omega).sin();
                out[base + half + 2 * k + 1] = (w as f64 * omega).cos();
            }
        }
    }
    out
}

fn residual_norm(
    t: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: DiffArray,
    delta: DiffArray,
) -> Result<DiffArray, ModelError> {
    let sum = t.add(x, delta)?;
    let g = bp.get(&format!("{prefix}.g"))?;
    let b = bp.get(&format!("{prefix}.b"))?;
    Ok(t.layer_norm_rows(sum, g, b)?)
}

fn feed_forward(
    t: &mut Tape,
    bp: &BoundParams,
    prefix: &str,
    x: DiffArray,
) -> Result<DiffArray, ModelError> {
    let w1 = bp.get(&format!("{prefix}.w1"))?;
    let b1 = bp.get(&format!("{prefix}.b1"))?;
    let w2 = bp.get(&format!("{prefix}.w2"))?;
    let b2 = bp.get(&format!("{prefix}.b2"))?;
    let h = t.matmul(x, w1)?;
    let h = t.add_row_broadcast(h, b1)?;
    let h = t.relu(h);
    let o = t.matmul(h, w2)?;
    Ok(t.add_row_broadcast(o, b2)?)
}

/// Linear patch projection + sinusoidal positions + `n_enc_layers` of
/// post-norm self-attention and feed-forward.
pub fn encoder_forward(
    t: &mut Tape,
    cfg: &ModelConfig,
    bp: &BoundParams,
    features: &[f64],
) -> Result<EncoderOutput, ModelError> {
    let hw = cfg.tokens();
    if features.len() != hw * cfg.c_in {
        return Err(ModelError::BadFeatures { expected: hw * cfg.c_in, got: features.len() });
    }
    let input = t.constant(&[hw, cfg.c_in], features.to_vec())?;
    let w = bp.get("input_proj.w")?;
    let b = bp.get("input_proj.b")?;
    let projected = t.matmul(input, w)?;
    let mut x = t.add_row_broadcast(projected, b)?;
    let pos = t.constant(&[hw, cfg.d_model], sinusoidal_pos_2d(cfg.grid_h, cfg.grid_w, cfg.d_model))?;
    for layer in 0..cfg.n_enc_layers {
        let prefix = format!("enc.l{layer}");
        let proj = AttnProjections::bind(bp, &format!("{prefix}.attn"), cfg.n_heads)?;
        let qk = t.add(x, pos)?;
        let (attn, _) = multi_head_attention(t, qk, qk, x, &proj, None)?;
        x = residual_norm(t, bp, &format!("{prefix}.norm1"), x, attn)?;
        let ffn = feed_forward(t, bp, &format!("{prefix}.ffn"), x)?;
        x = residual_norm(t, bp, &format!("{prefix}.norm2"), x, ffn)?;
    }
    Ok(EncoderOutput { tokens: x, pos })
}

/// Decoder pass over the student group plus any number of auxiliary query
/// groups (e.g. transplanted teacher queries). Groups are isolated from each
/// other by a block-diagonal self-attention mask. Shared prediction heads emit
/// class probabilities and boxes after every layer; all attention maps are
/// recorded.
pub fn decoder_forward(
    t: &mut Tape,
    cfg: &ModelConfig,
    bp: &BoundParams,
    enc: &EncoderOutput,
    extra_groups: &[DiffArray],
) -> Result<DecoderOutputs, ModelError> {
    let student_queries = bp.get("queries.embed")?;
    let n_student = t.shape(student_queries)[0];
    let mut sizes = vec![n_student];
    let mut parts = vec![student_queries];
    for &aux in extra_groups {
        let shape = t.shape(aux).to_vec();
        if shape.len() != 2 || shape[1] != cfg.d_model {
            return Err(ModelError::AuxDimMismatch {
                aux: *shape.last().unwrap_or(&0),
                d_model: cfg.d_model,
            });
        }
        sizes.push(shape[0]);
        parts.push(aux);
    }
    let query_pos =
        if parts.len() == 1 { student_queries } else { t.concat(&parts, 0)? };
    let n_total: usize = sizes.iter().sum();
    let mask = build_group_mask(&sizes);

    let mut x = t.constant(&[n_total, cfg.d_model], vec![0.0; n_total * cfg.d_model])?;
    let mut layers = Vec::with_capacity(cfg.n_dec_layers);
    let mut self_maps = Vec::with_capacity(cfg.n_dec_layers);
    let mut cross_maps = Vec::with_capacity(cfg.n_dec_layers);

    let class_w = bp.get("head.class.w")?;
    let class_b = bp.get("head.class.b")?;
    let box_w = bp.get("head.box.w")?;
    let box_b = bp.get("head.box.b")?;

    for layer in 0..cfg.n_dec_layers {
        let prefix = format!("dec.l{layer}");
        // Self-attention over the concatenated groups, block-diagonal mask.
        let self_proj = AttnProjections::bind(bp, &format!("{prefix}.self"), cfg.n_heads)?;
        let qk = t.add(x, query_pos)?;
        let (self_out, self_w) = multi_head_attention(t, qk, qk, x, &self_proj, Some(&mask))?;
        x = residual_norm(t, bp, &format!("{prefix}.norm1"), x, self_out)?;

        // Cross-attention to encoder tokens; keys carry positional embeddings.
        let cross_proj = AttnProjections::bind(bp, &format!("{prefix}.cross"), cfg.n_heads)?;
        let q = t.add(x, query_pos)?;
        let k = t.add(enc.tokens, enc.pos)?;
        let (cross_out, cross_w) = multi_head_attention(t, q, k, enc.tokens, &cross_proj, None)?;
        x = residual_norm(t, bp, &format!("{prefix}.norm2"), x, cross_out)?;

        let ffn = feed_forward(t, bp, &format!("{prefix}.ffn"), x)?;
        x = residual_norm(t, bp, &format!("{prefix}.norm3"), x, ffn)?;

        let class_logits = t.matmul(x, class_w)?;
        let class_logits = t.add_row_broadcast(class_logits, class_b)?;
        let probs = t.sigmoid(class_logits);
        let box_logits = t.matmul(x, box_w)?;
        let box_logits = t.add_row_broadcast(box_logits, box_b)?;
        let boxes = t.sigmoid(box_logits);

        layers.push(LayerOutput { probs, boxes });
        self_maps.push(self_w);
        cross_maps.push(cross_w);
    }

    let mut group_ranges = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &s in &sizes {
        group_ranges.push(start..start + s);
        start += s;
    }
    Ok(DecoderOutputs {
        layers,
        attention: AttentionRecord { self_attn: self_maps, cross_attn: cross_maps },
        group_ranges,
    })
}

/// Full forward pass: encoder then decoder.
pub fn model_forward(
    t: &mut Tape,
    cfg: &ModelConfig,
    bp: &BoundParams,
    features: &[f64],
    extra_groups: &[DiffArray],
) -> Result<DecoderOutputs, ModelError> {
    let enc = encoder_forward(t, cfg, bp, features)?;
    decoder_forward(t, cfg, bp, &enc, extra_groups)
}

/// Xavier-initialized parameter store for a config, deterministic in `seed`.
/// Weights are Xavier-uniform, biases zero, layer-norm gains one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore, ModelError> {
    cfg.validate()?;
    let mut rng = SplitMix64::with_stream(seed, 0x1A17);
    let mut ps = ParamStore::new();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    fn xavier(ps: &mut ParamStore, rng: &mut SplitMix64, name: String, shape: Vec<usize>) {
        ps.insert(&name, Tensor::xavier(shape, rng)).expect("unique name");
    }
    fn zeros(ps: &mut ParamStore, name: String, shape: Vec<usize>) {
        ps.insert(&name, Tensor::zeros(shape)).expect("unique name");
    }
    fn ones(ps: &mut ParamStore, name: String, shape: Vec<usize>) {
        let n = shape.iter().product();
        ps.insert(&name, Tensor::new(shape, vec![1.0; n])).expect("unique name");
    }
    fn attn_block(
        ps: &mut ParamStore,
        rng: &mut SplitMix64,
        prefix: String,
        n_heads: usize,
        d: usize,
        dh: usize,
    ) {
        for m in 0..n_heads {
            for w in ["wq", "wk", "wv"] {
                xavier(ps, rng, format!("{prefix}.h{m}.{w}"), vec![d, dh]);
            }
        }
        xavier(ps, rng, format!("{prefix}.wo"), vec![d, d]);
        zeros(ps, format!("{prefix}.bo"), vec![d]);
    }

    xavier(&mut ps, &mut rng, "input_proj.w".into(), vec![cfg.c_in, d]);
    zeros(&mut ps, "input_proj.b".into(), vec![d]);
    xavier(&mut ps, &mut rng, "queries.embed".into(), vec![cfg.n_queries, d]);

    for layer in 0..cfg.n_enc_layers {
        let p = format!("enc.l{layer}");
        attn_block(&mut ps, &mut rng, format!("{p}.attn"), cfg.n_heads, d, dh);
        ones(&mut ps, format!("{p}.norm1.g"), vec![d]);
        zeros(&mut ps, format!("{p}.norm1.b"), vec![d]);
        xavier(&mut ps, &mut rng, format!("{p}.ffn.w1"), vec![d, cfg.ffn_dim]);
        zeros(&mut ps, format!("{p}.ffn.b1"), vec![cfg.ffn_dim]);
        xavier(&mut ps, &mut rng, format!("{p}.ffn.w2"), vec![cfg.ffn_dim, d]);
        zeros(&mut ps, format!("{p}.ffn.b2"), vec![d]);
        ones(&mut ps, format!("{p}.norm2.g"), vec![d]);
        zeros(&mut ps, format!("{p}.norm2.b"), vec![d]);
    }
    for layer in 0..cfg.n_dec_layers {
        let p = format!("dec.l{layer}");
        attn_block(&mut ps, &mut rng, format!("{p}.self"), cfg.n_heads, d, dh);
        ones(&mut ps, format!("{p}.norm1.g"), vec![d]);
        zeros(&mut ps, format!("{p}.norm1.b"), vec![d]);
        attn_block(&mut ps, &mut rng, format!("{p}.cross"), cfg.n_heads, d, dh);
        ones(&mut ps, format!("{p}.norm2.g"), vec![d]);
        zeros(&mut ps, format!("{p}.norm2.b"), vec![d]);
        xavier(&mut ps, &mut rng, format!("{p}.ffn.w1"), vec![d, cfg.ffn_dim]);
        zeros(&mut ps, format!("{p}.ffn.b1"), vec![cfg.ffn_dim]);
        xavier(&mut ps, &mut rng, format!("{p}.ffn.w2"), vec![cfg.ffn_dim, d]);
        zeros(&mut ps, format!("{p}.ffn.b2"), vec![d]);
        ones(&mut ps, format!("{p}.norm3.g"), vec![d]);
        zeros(&mut ps, format!("{p}.norm3.b"), vec![d]);
    }
    xavier(&mut ps, &mut rng, "head.class.w".into(), vec![d, cfg.n_classes]);
    zeros(&mut ps, "head.class.b".into(), vec![cfg.n_classes]);
    xavier(&mut ps, &mut rng, "head.box.w".into(), vec![d, 4]);
    zeros(&mut ps, "head.box.b".into(), vec![4]);
    Ok(ps)
}
