//! Tiny vision transformer with a class token and a style token.
//!
//! Token order is `[class, style, patch₁ … patch_N]`. Each block is pre-norm:
//! `LN → multi-head attention → residual → LN → GELU MLP → residual`. Every
//! head owns its own query/key/value matrices and its row slice of the block
//! output projection, so a [`HeadMask`] partitions the parameters cleanly.
//! The goal classifier reads only the final class token and the style
//! classifier only the final style token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CLASS_TOKEN: usize = 0;
pub const STYLE_TOKEN: usize = 1;
pub const SPECIAL_TOKENS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub heads_per_block: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub num_styles: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_blocks: 4,
            heads_per_block: 4,
            mlp_ratio: 4,
            num_classes: 5,
            num_styles: 6,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("heads_per_block", self.heads_per_block),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("num_styles", self.num_styles),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("vit.{name} must be positive")));
        }
        if !self.embed_dim.is_multiple_of(self.heads_per_block) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads_per_block {}",
                self.embed_dim, self.heads_per_block
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        self.num_patches() + SPECIAL_TOKENS
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads_per_block
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn num_heads(&self) -> usize {
        self.num_blocks * self.heads_per_block
    }
}

/// Causal/non-causal designation of every head; `true` marks a non-causal
/// (style) head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadMask {
    blocks: usize,
    heads: usize,
    noncausal: Vec<bool>,
}

impl HeadMask {
    pub fn new(blocks: usize, heads: usize, noncausal: Vec<bool>) -> Result<Self> {
        if noncausal.len() != blocks * heads {
            return Err(Error::shape("head_mask", format!("{blocks}x{heads} grid with {} flags", noncausal.len())));
        }
        Ok(HeadMask { blocks, heads, noncausal })
    }

    pub fn all(blocks: usize, heads: usize, value: bool) -> Self {
        HeadMask { blocks, heads, noncausal: vec![value; blocks * heads] }
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn is_noncausal(&self, block: usize, head: usize) -> bool {
        self.noncausal[block * self.heads + head]
    }

    pub fn count_noncausal(&self) -> usize {
        self.noncausal.iter().filter(|&&b| b).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.noncausal
    }

    pub fn matches(&self, config: &ViTConfig) -> bool {
        self.blocks == config.num_blocks && self.heads == config.heads_per_block
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

impl HeadParams {
    pub fn ids(&self) -> [ParamId; 4] {
        [self.query, self.key, self.value, self.output]
    }
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub heads: Vec<HeadParams>,
    pub out_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_in: ParamId,
    pub mlp_in_bias: ParamId,
    pub mlp_out: ParamId,
    pub mlp_out_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub patch_weight: ParamId,
    pub patch_bias: ParamId,
    pub position: ParamId,
    pub class_token: ParamId,
    pub style_token: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub goal_weight: ParamId,
    pub goal_bias: ParamId,
    pub style_weight: ParamId,
    pub style_bias: ParamId,
}

/// Which partition group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Head { block: usize, head: usize },
    Backbone,
    GoalClassifier,
    StyleClassifier,
}

/// Disjoint, exhaustive parameter groups induced by a [`HeadMask`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    /// Parameters of the non-causal heads.
    pub noncausal_heads: Vec<ParamId>,
    /// Backbone without the non-causal heads.
    pub causal_backbone: Vec<ParamId>,
    pub goal_classifier: Vec<ParamId>,
    pub style_classifier: Vec<ParamId>,
}

impl Partition {
    /// Parameters updated by the goal task.
    pub fn task_group(&self) -> Vec<ParamId> {
        let mut v = self.causal_backbone.clone();
        v.extend(&self.goal_classifier);
        v.sort();
        v
    }

    /// Parameters updated by the style task.
    pub fn style_group(&self) -> Vec<ParamId> {
        let mut v = self.noncausal_heads.clone();
        v.extend(&self.style_classifier);
        v.sort();
        v
    }
}

/// Graph handles for one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub tokens: Var,
    pub class_features: Var,
    pub style_features: Var,
    pub goal_logits: Var,
    pub style_logits: Var,
}

/// Plain values of a batched forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub class_features: Tensor,
    pub style_features: Tensor,
    pub goal_logits: Tensor,
    pub style_logits: Tensor,
}

/// Second branch for one block during head-weight fitting: attention is
/// evaluated on both streams and head outputs are mixed convexly.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BranchMix {
    pub stream: Var,
    pub clean_weight: Var,
}

#[derive(Debug, Clone)]
pub struct ViTModel {
    config: ViTConfig,
    params: ParamStore,
    layout: Layout,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: Vec<usize>) -> Tensor {
    Tensor::randn(shape, (2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

impl ViTModel {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.embed_dim;
        let dk = config.head_dim();
        let hidden = d * config.mlp_ratio;
        let pd = config.patch_dim();

        let patch_weight = p.add("patch.weight", xavier(&mut rng, pd, d, vec![pd, d]));
        let patch_bias = p.add("patch.bias", Tensor::zeros([d]));
        let position = p.add("position", Tensor::randn([config.seq_len(), d], 0.02, &mut rng));
        let class_token = p.add("class_token", Tensor::randn([1, d], 0.02, &mut rng));
        let style_token = p.add("style_token", Tensor::randn([1, d], 0.02, &mut rng));

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let ln1_gain = p.add(format!("blocks.{b}.ln1.gain"), Tensor::full([d], 1.0));
            let ln1_bias = p.add(format!("blocks.{b}.ln1.bias"), Tensor::zeros([d]));
            let heads = (0..config.heads_per_block)
                .map(|h| {
                    let pre = format!("blocks.{b}.heads.{h}");
                    HeadParams {
                        query: p.add(format!("{pre}.query"), xavier(&mut rng, d, d, vec![d, dk])),
                        key: p.add(format!("{pre}.key"), xavier(&mut rng, d, d, vec![d, dk])),
                        value: p.add(format!("{pre}.value"), xavier(&mut rng, d, d, vec![d, dk])),
                        output: p.add(format!("{pre}.output"), xavier(&mut rng, d, d, vec![dk, d])),
                    }
                })
                .collect();
            let out_bias = p.add(format!("blocks.{b}.attn_out.bias"), Tensor::zeros([d]));
            let ln2_gain = p.add(format!("blocks.{b}.ln2.gain"), Tensor::full([d], 1.0));
            let ln2_bias = p.add(format!("blocks.{b}.ln2.bias"), Tensor::zeros([d]));
            let mlp_in = p.add(format!("blocks.{b}.mlp.in.weight"), xavier(&mut rng, d, hidden, vec![d, hidden]));
            let mlp_in_bias = p.add(format!("blocks.{b}.mlp.in.bias"), Tensor::zeros([hidden]));
            let mlp_out = p.add(format!("blocks.{b}.mlp.out.weight"), xavier(&mut rng, hidden, d, vec![hidden, d]));
            let mlp_out_bias = p.add(format!("blocks.{b}.mlp.out.bias"), Tensor::zeros([d]));
            blocks.push(BlockParams {
                ln1_gain,
                ln1_bias,
                heads,
                out_bias,
                ln2_gain,
                ln2_bias,
                mlp_in,
                mlp_in_bias,
                mlp_out,
                mlp_out_bias,
            });
        }
        let final_gain = p.add("final_ln.gain", Tensor::full([d], 1.0));
        let final_bias = p.add("final_ln.bias", Tensor::zeros([d]));
        let goal_weight = p.add("goal_head.weight", Tensor::randn([d, config.num_classes], 0.02, &mut rng));
        let goal_bias = p.add("goal_head.bias", Tensor::zeros([config.num_classes]));
        let style_weight = p.add("style_head.weight", Tensor::randn([d, config.num_styles], 0.02, &mut rng));
        let style_bias = p.add("style_head.bias", Tensor::zeros([config.num_styles]));

        let layout = Layout {
            patch_weight,
            patch_bias,
            position,
            class_token,
            style_token,
            blocks,
            final_gain,
            final_bias,
            goal_weight,
            goal_bias,
            style_weight,
            style_bias,
        };
        Ok(ViTModel { config, params: p, layout })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        let l = &self.layout;
        if [l.goal_weight, l.goal_bias].contains(&id) {
            return ParamGroup::GoalClassifier;
        }
        if [l.style_weight, l.style_bias].contains(&id) {
            return ParamGroup::StyleClassifier;
        }
        for (b, block) in l.blocks.iter().enumerate() {
            for (h, head) in block.heads.iter().enumerate() {
                if head.ids().contains(&id) {
                    return ParamGroup::Head { block: b, head: h };
                }
            }
        }
        ParamGroup::Backbone
    }

    /// Splits the parameters into non-causal heads, the remaining backbone,
    /// the goal classifier, and the style classifier.
    pub fn partition_params(&self, mask: &HeadMask) -> Result<Partition> {
        if !mask.matches(&self.config) {
            return Err(Error::shape(
                "partition_params",
                format!(
                    "mask is {}x{}, model has {}x{} heads",
                    mask.blocks(),
                    mask.heads(),
                    self.config.num_blocks,
                    self.config.heads_per_block
                ),
            ));
        }
        let mut part = Partition {
            noncausal_heads: Vec::new(),
            causal_backbone: Vec::new(),
            goal_classifier: Vec::new(),
            style_classifier: Vec::new(),
        };
        for id in self.params.ids() {
            match self.group_of(id) {
                ParamGroup::Head { block, head } if mask.is_noncausal(block, head) => part.noncausal_heads.push(id),
                ParamGroup::Head { .. } | ParamGroup::Backbone => part.causal_backbone.push(id),
                ParamGroup::GoalClassifier => part.goal_classifier.push(id),
                ParamGroup::StyleClassifier => part.style_classifier.push(id),
            }
        }
        Ok(part)
    }

    /// Splits `[N × C×H×W]` images into `[N·N_P × C·p·p]` patch rows.
    /// Patches are numbered row-major over the grid; within a patch values
    /// are ordered by channel, then row, then column.
    pub fn patchify(&self, images: &[f64]) -> Result<Vec<f64>> {
        patchify(&self.config, images)
    }

    /// Patch embeddings `[N·N_P × d]` before positional terms.
    pub(crate) fn embed_patches(&self, tape: &mut Tape<'_>, bound: &Bound, patches: &[f64]) -> Result<Var> {
        let pd = self.config.patch_dim();
        let rows = patches.len() / pd;
        let x = tape.constant([rows, pd], patches.to_vec())?;
        let e = tape.matmul(x, bound.var(self.layout.patch_weight))?;
        tape.add_row_bias(e, bound.var(self.layout.patch_bias))
    }

    /// Builds the `[N·T × d]` token stream from patch embeddings. When
    /// `order` is given, sample `n` places patch `order[n][j]` at position
    /// `j` (before positional terms are added).
    pub(crate) fn assemble_tokens(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        embedded: Var,
        order: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let np = self.config.num_patches();
        let batch = tape.shape(embedded)[0] / np;
        let l = &self.layout;
        let stacked = tape.concat_rows(&[bound.var(l.class_token), bound.var(l.style_token), embedded])?;
        let mut index = Vec::with_capacity(batch * self.config.seq_len());
        for n in 0..batch {
            index.push(0);
            index.push(1);
            for j in 0..np {
                let src = order.map_or(j, |o| o[n][j]);
                index.push(SPECIAL_TOKENS + n * np + src);
            }
        }
        let tokens = tape.gather_rows(stacked, &index)?;
        tape.add_tiled(tokens, bound.var(l.position))
    }

    /// One pre-norm block over `[N·T × d]` tokens. With `mix`, every head is
    /// also evaluated on the second stream and the two head outputs are
    /// combined as `w·clean + (1 − w)·other` before the output projection.
    pub(crate) fn block_forward_inner(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        block: usize,
        x: Var,
        mix: Option<BranchMix>,
    ) -> Result<Var> {
        let bp = &self.layout.blocks[block];
        let t = self.config.seq_len();
        let heads = self.config.heads_per_block;
        let cat = |tape: &mut Tape<'_>, f: fn(&HeadParams) -> ParamId| {
            let parts: Vec<Var> = bp.heads.iter().map(|h| bound.var(f(h))).collect();
            tape.concat_cols(&parts)
        };
        let wq = cat(tape, |h| h.query)?;
        let wk = cat(tape, |h| h.key)?;
        let wv = cat(tape, |h| h.value)?;
        let out_parts: Vec<Var> = bp.heads.iter().map(|h| bound.var(h.output)).collect();
        let wo = tape.concat_rows(&out_parts)?;

        let attend = |tape: &mut Tape<'_>, stream: Var| -> Result<Var> {
            let h = tape.layer_norm(stream, bound.var(bp.ln1_gain), bound.var(bp.ln1_bias))?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            tape.attention(q, k, v, t, heads)
        };
        let mut heads_out = attend(tape, x)?;
        if let Some(mix) = mix {
            let other = attend(tape, mix.stream)?;
            heads_out = tape.mix_heads(heads_out, other, mix.clean_weight)?;
        }
        let proj = tape.matmul(heads_out, wo)?;
        let proj = tape.add_row_bias(proj, bound.var(bp.out_bias))?;
        let u = tape.add(x, proj)?;
        let h = tape.layer_norm(u, bound.var(bp.ln2_gain), bound.var(bp.ln2_bias))?;
        let h = tape.matmul(h, bound.var(bp.mlp_in))?;
        let h = tape.add_row_bias(h, bound.var(bp.mlp_in_bias))?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, bound.var(bp.mlp_out))?;
        let h = tape.add_row_bias(h, bound.var(bp.mlp_out_bias))?;
        tape.add(u, h)
    }

    /// Shape-preserving block forward over `[N·T × d]` tokens.
    pub fn block_forward(&self, tape: &mut Tape<'_>, bound: &Bound, block: usize, tokens: Var) -> Result<Var> {
        let (rows, d) = (tape.shape(tokens)[0], tape.shape(tokens)[1]);
        if d != self.config.embed_dim || rows % self.config.seq_len() != 0 {
            return Err(Error::shape("block_forward", format!("tokens {:?}", tape.shape(tokens))));
        }
        self.block_forward_inner(tape, bound, block, tokens, None)
    }

    /// Output `[T × d_k]` of one head on a single token sequence `[T × d]`
    /// (no layer norm applied).
    pub fn head_attention(&self, tape: &mut Tape<'_>, bound: &Bound, block: usize, head: usize, tokens: Var) -> Result<Var> {
        let hp = self.layout.blocks[block].heads[head];
        let t = tape.shape(tokens)[0];
        let q = tape.matmul(tokens, bound.var(hp.query))?;
        let k = tape.matmul(tokens, bound.var(hp.key))?;
        let v = tape.matmul(tokens, bound.var(hp.value))?;
        tape.attention(q, k, v, t, 1)
    }

    /// Final layer norm and both classifiers on a finished token stream.
    pub(crate) fn readout(&self, tape: &mut Tape<'_>, bound: &Bound, tokens: Var) -> Result<ForwardVars> {
        let l = &self.layout;
        let t = self.config.seq_len();
        let batch = tape.shape(tokens)[0] / t;
        let normed = tape.layer_norm(tokens, bound.var(l.final_gain), bound.var(l.final_bias))?;
        let cls_rows: Vec<usize> = (0..batch).map(|n| n * t + CLASS_TOKEN).collect();
        let sty_rows: Vec<usize> = (0..batch).map(|n| n * t + STYLE_TOKEN).collect();
        let class_features = tape.gather_rows(normed, &cls_rows)?;
        let style_features = tape.gather_rows(normed, &sty_rows)?;
        let goal = tape.matmul(class_features, bound.var(l.goal_weight))?;
        let goal_logits = tape.add_row_bias(goal, bound.var(l.goal_bias))?;
        let style = tape.matmul(style_features, bound.var(l.style_weight))?;
        let style_logits = tape.add_row_bias(style, bound.var(l.style_bias))?;
        Ok(ForwardVars { tokens, class_features, style_features, goal_logits, style_logits })
    }

    /// Batched forward over flat `[N × C×H×W]` images.
    pub fn forward_batch(&self, tape: &mut Tape<'_>, bound: &Bound, images: &[f64]) -> Result<ForwardVars> {
        let patches = self.patchify(images)?;
        let embedded = self.embed_patches(tape, bound, &patches)?;
        let mut x = self.assemble_tokens(tape, bound, embedded, None)?;
        for b in 0..self.config.num_blocks {
            x = self.block_forward_inner(tape, bound, b, x, None)?;
        }
        self.readout(tape, bound, x)
    }

    /// Gradient-free forward over any number of images, in chunks.
    pub fn infer(&self, images: &[f64]) -> Result<ForwardOutput> {
        const CHUNK: usize = 128;
        let len = self.config.image_len();
        if images.is_empty() || !images.len().is_multiple_of(len) {
            return Err(Error::shape("infer", format!("{} values is not a whole number of images", images.len())));
        }
        let n = images.len() / len;
        let d = self.config.embed_dim;
        let mut cf = Vec::with_capacity(n * d);
        let mut sf = Vec::with_capacity(n * d);
        let mut gl = Vec::with_capacity(n * self.config.num_classes);
        let mut sl = Vec::with_capacity(n * self.config.num_styles);
        for chunk in images.chunks(CHUNK * len) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, &[]);
            let f = self.forward_batch(&mut tape, &bound, chunk)?;
            cf.extend_from_slice(tape.value(f.class_features));
            sf.extend_from_slice(tape.value(f.style_features));
            gl.extend_from_slice(tape.value(f.goal_logits));
            sl.extend_from_slice(tape.value(f.style_logits));
        }
        Ok(ForwardOutput {
            class_features: Tensor::new([n, d], cf)?,
            style_features: Tensor::new([n, d], sf)?,
            goal_logits: Tensor::new([n, self.config.num_classes], gl)?,
            style_logits: Tensor::new([n, self.config.num_styles], sl)?,
        })
    }

    /// Single-image forward: `(z_c, z_n, goal logits, style logits)`.
    pub fn forward(&self, image: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
        if image.len() != self.config.image_len() {
            return Err(Error::shape("forward", format!("image has {} values, expected {}", image.len(), self.config.image_len())));
        }
        let out = self.infer(image)?;
        Ok((
            out.class_features.into_data(),
            out.style_features.into_data(),
            out.goal_logits.into_data(),
            out.style_logits.into_data(),
        ))
    }
}

pub fn patchify(config: &ViTConfig, images: &[f64]) -> Result<Vec<f64>> {
    let len = config.image_len();
    if images.is_empty() || !images.len().is_multiple_of(len) {
        return Err(Error::shape("patchify", format!("{} values is not a whole number of {len}-value images", images.len())));
    }
    let (c, s, p, g) = (config.channels, config.image_size, config.patch_size, config.grid());
    let mut out = Vec::with_capacity(images.len());
    for img in images.chunks(len) {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ch * s * s + (gy * p + y) * s + gx * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(out)
}
