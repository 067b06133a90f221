//! Region-aware cross-attention and the cross-region alignment blocks built on it.
//!
//! Tokens are feature-map pixels (row-major), embeddings are their channel
//! vectors. A block takes a query stream `[HW × C]` from the shadow path and a
//! key/value stream `[HW × C]` from the non-shadow path. With region-aware
//! attention, an additive `{0, -inf}` bias restricts every shadow query to
//! non-shadow keys, and non-shadow queries receive nothing at all.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Which keys a shadow query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyRegion {
    NonShadow,
    Shadow,
    All,
}

/// Attention variant used inside each alignment block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    /// Plain `softmax(QKᵀ/√d)V` over every query/key pair.
    Vanilla,
    /// Shadow queries only, keys restricted to the given region.
    RegionAware(KeyRegion),
}

impl Default for AttentionKind {
    fn default() -> Self {
        AttentionKind::RegionAware(KeyRegion::NonShadow)
    }
}

/// Additive attention bias over `tokens × tokens` pairs, entries in `{0, -inf}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBias {
    tokens: usize,
    data: Vec<f64>,
}

fn check_binary(ms: &[f64]) -> Result<()> {
    match ms.iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(v) => Err(Error::Contract(format!("mask entry {v} is not binary"))),
        None => Ok(()),
    }
}

impl RegionBias {
    /// Bias admitting `(i, j)` iff token `i` is shadow and `j` lies in `keys`.
    pub fn with_keys(ms: &[f64], keys: KeyRegion) -> Result<Self> {
        check_binary(ms)?;
        let n = ms.len();
        let mut data = vec![f64::NEG_INFINITY; n * n];
        for i in (0..n).filter(|&i| ms[i] == 1.0) {
            for j in 0..n {
                let open = match keys {
                    KeyRegion::NonShadow => ms[j] == 0.0,
                    KeyRegion::Shadow => ms[j] == 1.0,
                    KeyRegion::All => true,
                };
                if open {
                    data[i * n + j] = 0.0;
                }
            }
        }
        Ok(RegionBias { tokens: n, data })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn get(&self, query: usize, key: usize) -> f64 {
        self.data[query * self.tokens + key]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// True when at least one query/key pair survives.
    pub fn has_open_pairs(&self) -> bool {
        self.data.iter().any(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.tokens, self.tokens], self.data.clone()).expect("square bias")
    }
}

/// `P(i,j) = 0` iff `ms(i) = 1` and `ms(j) = 0`, `-inf` otherwise.
pub fn build_region_bias(ms: &[f64]) -> Result<RegionBias> {
    RegionBias::with_keys(ms, KeyRegion::NonShadow)
}

/// Fixed 2-D sine/cosine embedding, one `[HW × C]` grid per stream.
///
/// The first `C/2` channels encode the row, the rest the column. Within each
/// half, channel pairs `(2i, 2i+1)` hold `sin`/`cos` of the normalized
/// coordinate `2π·(pos+1)/extent` divided by `10000^(2i/(C/2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    grid: Tensor,
}

impl PositionalEmbedding {
    /// Embedding for the query stream.
    pub fn query(&self) -> &Tensor {
        &self.grid
    }

    /// Embedding for the key/value stream. Fixed sinusoids make it identical
    /// to [`Self::query`].
    pub fn key_value(&self) -> &Tensor {
        &self.grid
    }
}

pub fn sinusoidal_position_embedding(
    height: usize,
    width: usize,
    channels: usize,
) -> Result<PositionalEmbedding> {
    if channels == 0 || !channels.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "positional embedding needs channels divisible by 4, got {channels}"
        )));
    }
    let feats = channels / 2;
    let inv_freq: Vec<f64> = (0..feats)
        .map(|i| 10000f64.powf((2 * (i / 2)) as f64 / feats as f64).recip())
        .collect();
    let eps = 1e-6;
    let mut data = vec![0.0; height * width * channels];
    for y in 0..height {
        let ye = (y + 1) as f64 / (height as f64 + eps) * 2.0 * PI;
        for x in 0..width {
            let xe = (x + 1) as f64 / (width as f64 + eps) * 2.0 * PI;
            let row = &mut data[(y * width + x) * channels..(y * width + x + 1) * channels];
            for i in 0..feats {
                let (py, px) = (ye * inv_freq[i], xe * inv_freq[i]);
                if i % 2 == 0 {
                    row[i] = py.sin();
                    row[feats + i] = px.sin();
                } else {
                    row[i] = py.cos();
                    row[feats + i] = px.cos();
                }
            }
        }
    }
    Ok(PositionalEmbedding {
        height,
        width,
        channels,
        grid: Tensor::new(vec![height * width, channels], data)?,
    })
}

/// `F + P` for a token matrix and an embedding grid of the same shape.
pub fn add_positional(g: &mut Graph, features: Var, embedding: &Tensor) -> Result<Var> {
    let p = g.constant(embedding.clone());
    g.add(features, p)
}

/// Query/key/value projection matrices bound to a graph, each `C × d`.
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Attention weights `softmax(QKᵀ/√d + bias)` and the value matrix `V`.
pub fn attention_weights(
    g: &mut Graph,
    fq: Var,
    fkv: Var,
    proj: &Projections,
    bias: Option<&RegionBias>,
) -> Result<(Var, Var)> {
    let (tq, tk) = (g.shape(fq).first().copied(), g.shape(fkv).first().copied());
    let q = g.matmul(fq, proj.query)?;
    let k = g.matmul(fkv, proj.key)?;
    let v = g.matmul(fkv, proj.value)?;
    let d = g.shape(q)[1];
    if g.shape(k)[1] != d {
        return Err(dim_err!("query dim {d} vs key dim {}", g.shape(k)[1]));
    }
    let kt = g.transpose(k)?;
    let raw = g.matmul(q, kt)?;
    let scores = g.scale(raw, 1.0 / (d as f64).sqrt());
    let logits = match bias {
        Some(b) => {
            if Some(b.tokens()) != tq || Some(b.tokens()) != tk {
                return Err(dim_err!(
                    "bias covers {} tokens, streams have {:?}/{:?}",
                    b.tokens(),
                    tq,
                    tk
                ));
            }
            let bt = g.constant(b.to_tensor());
            g.add(scores, bt)?
        }
        None => scores,
    };
    Ok((g.softmax(logits), v))
}

/// `softmax(QKᵀ/√d)V` with `Q = Fq·Wq`, `K = Fkv·Wk`, `V = Fkv·Wv`.
pub fn vanilla_attention(g: &mut Graph, fq: Var, fkv: Var, proj: &Projections) -> Result<Var> {
    let (w, v) = attention_weights(g, fq, fkv, proj, None)?;
    g.matmul(w, v)
}

/// `softmax(QKᵀ/√d + P)V`. Rows of fully masked queries come out as zeros.
pub fn region_cross_attention(
    g: &mut Graph,
    fq: Var,
    fkv: Var,
    bias: &RegionBias,
    proj: &Projections,
) -> Result<Var> {
    if !bias.has_open_pairs() {
        log::warn!(
            "region attention over {} tokens has no shadow query with a non-shadow key; output is all zeros",
            bias.tokens()
        );
    }
    let (w, v) = attention_weights(g, fq, fkv, proj, Some(bias))?;
    g.matmul(w, v)
}

/// Graph-free evaluation of [`region_cross_attention`] on plain tensors.
pub fn region_cross_attention_values(
    fq: &Tensor,
    fkv: &Tensor,
    ms: &[f64],
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
) -> Result<Tensor> {
    let bias = build_region_bias(ms)?;
    let mut g = Graph::new();
    let (a, b) = (g.leaf(fq), g.leaf(fkv));
    let proj = Projections {
        query: g.leaf(w_q),
        key: g.leaf(w_k),
        value: g.leaf(w_v),
    };
    let out = region_cross_attention(&mut g, a, b, &bias, &proj)?;
    Ok(g.tensor(out))
}

/// Learnable parameters of one cross-region alignment block.
///
/// Attention projections are bias-free `C×C` matrices. The output projection
/// and both MLP layers carry biases. Two layer-norm affine pairs follow the
/// projection and the MLP residual.
#[derive(Clone, Debug)]
pub struct AlignmentBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
    pub eps: f64,
}

impl AlignmentBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        prefix: &str,
        channels: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Self {
        let hidden = channels * mlp_ratio;
        let mut mat = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
            store.add(format!("{prefix}.{name}"), init.normal(&[r, c]))
        };
        let w_q = mat(store, "attn.w_q", channels, channels);
        let w_k = mat(store, "attn.w_k", channels, channels);
        let w_v = mat(store, "attn.w_v", channels, channels);
        let proj_w = mat(store, "proj.weight", channels, channels);
        let mlp_w1 = mat(store, "mlp.fc1.weight", channels, hidden);
        let mlp_w2 = mat(store, "mlp.fc2.weight", hidden, channels);
        let zeros = |store: &mut ParamStore, name: &str, n: usize| {
            store.add(format!("{prefix}.{name}"), Tensor::zeros(vec![n]))
        };
        let proj_b = zeros(store, "proj.bias", channels);
        let mlp_b1 = zeros(store, "mlp.fc1.bias", hidden);
        let mlp_b2 = zeros(store, "mlp.fc2.bias", channels);
        let norm1_bias = zeros(store, "norm1.bias", channels);
        let norm2_bias = zeros(store, "norm2.bias", channels);
        let norm1_gain = store.add(format!("{prefix}.norm1.gain"), Tensor::full(vec![channels], 1.0));
        let norm2_gain = store.add(format!("{prefix}.norm2.gain"), Tensor::full(vec![channels], 1.0));
        AlignmentBlock {
            w_q,
            w_k,
            w_v,
            proj_w,
            proj_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
            norm1_gain,
            norm1_bias,
            norm2_gain,
            norm2_bias,
            eps,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 13] {
        [
            self.w_q,
            self.w_k,
            self.w_v,
            self.proj_w,
            self.proj_b,
            self.mlp_w1,
            self.mlp_b1,
            self.mlp_w2,
            self.mlp_b2,
            self.norm1_gain,
            self.norm1_bias,
            self.norm2_gain,
            self.norm2_bias,
        ]
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    pub fn projections(&self, g: &mut Graph, store: &ParamStore) -> Projections {
        Projections {
            query: g.param(store, self.w_q),
            key: g.param(store, self.w_k),
            value: g.param(store, self.w_v),
        }
    }

    /// `y₁ = LN(proj(F̂q + attn))`, `y₂ = LN(y₁ + MLP(y₁))`.
    ///
    /// `bias = None` selects vanilla attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fq: Var,
        fkv: Var,
        bias: Option<&RegionBias>,
    ) -> Result<Var> {
        let proj = self.projections(g, store);
        let attended = match bias {
            Some(b) => region_cross_attention(g, fq, fkv, b, &proj)?,
            None => vanilla_attention(g, fq, fkv, &proj)?,
        };
        let mixed = g.add(fq, attended)?;
        let (pw, pb) = (g.param(store, self.proj_w), g.param(store, self.proj_b));
        let projected = g.matmul(mixed, pw)?;
        let projected = g.add_row(projected, pb)?;
        let (n1g, n1b) = (g.param(store, self.norm1_gain), g.param(store, self.norm1_bias));
        let y1 = g.layer_norm(projected, n1g, n1b, self.eps)?;

        let (w1, b1) = (g.param(store, self.mlp_w1), g.param(store, self.mlp_b1));
        let (w2, b2) = (g.param(store, self.mlp_w2), g.param(store, self.mlp_b2));
        let h = g.matmul(y1, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h);
        let h = g.matmul(h, w2)?;
        let h = g.add_row(h, b2)?;
        let res = g.add(y1, h)?;
        let (n2g, n2b) = (g.param(store, self.norm2_gain), g.param(store, self.norm2_bias));
        g.layer_norm(res, n2g, n2b, self.eps)
    }
}

/// `N` stacked alignment blocks sharing one key/value stream and mask.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub blocks: Vec<AlignmentBlock>,
    pub kind: AttentionKind,
    pub channels: usize,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        channels: usize,
        num_blocks: usize,
        mlp_ratio: usize,
        kind: AttentionKind,
        eps: f64,
    ) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::Config("transformer layer needs at least one block".into()));
        }
        if !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channels {channels} must be divisible by 4"
            )));
        }
        let blocks = (0..num_blocks)
            .map(|i| {
                AlignmentBlock::new(
                    store,
                    init,
                    &format!("transformer.block{i}"),
                    channels,
                    mlp_ratio,
                    eps,
                )
            })
            .collect();
        Ok(TransformerLayer {
            blocks,
            kind,
            channels,
        })
    }

    /// Bias for this layer's attention kind, `None` for vanilla attention.
    pub fn bias_for(&self, ms: &[f64]) -> Result<Option<RegionBias>> {
        match self.kind {
            AttentionKind::Vanilla => {
                check_binary(ms)?;
                Ok(None)
            }
            AttentionKind::RegionAware(keys) => RegionBias::with_keys(ms, keys).map(Some),
        }
    }

    /// Adds positional embeddings once, then threads the query stream
    /// through every block with the same key/value stream and mask.
    ///
    /// `fq` and `fkv` are `[HW × C]` token matrices for an `height × width`
    /// feature map; `mask` is already at feature resolution.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fq: Var,
        fkv: Var,
        mask: &ShadowMask,
    ) -> Result<Var> {
        let (h, w) = (mask.height(), mask.width());
        let expected = [h * w, self.channels];
        if g.shape(fq) != expected || g.shape(fkv) != expected {
            return Err(dim_err!(
                "transformer expects {:?} tokens, got {:?} / {:?}",
                expected,
                g.shape(fq),
                g.shape(fkv)
            ));
        }
        let pe = sinusoidal_position_embedding(h, w, self.channels)?;
        let mut q = add_positional(g, fq, pe.query())?;
        let kv = add_positional(g, fkv, pe.key_value())?;
        let bias = self.bias_for(&mask.to_f64())?;
        for block in &self.blocks {
            q = block.forward(g, store, q, kv, bias.as_ref())?;
        }
        Ok(q)
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        self.blocks.iter().map(|b| b.num_scalars(store)).sum()
    }
}
