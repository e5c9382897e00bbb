//! Per-head convex branch weights and the causal influence score.
//!
//! Every head `i` of block `l` is evaluated twice: on the propagated token
//! stream and on a copy whose patch tokens are permuted (class and style
//! tokens stay in place). The block emits `β₁·A_x + β₂·A_sci` per head with
//! `β₂ = 1 − β₁`, and the mixed stream continues to the next block. At the
//! first block the permuted copy is the patch-shuffled input itself. Only the
//! `β` logits are fitted; the model is frozen.
//!
//! A head whose fitted weight favours the shuffled branch (`CIS = β₂ − β₁`
//! large) does not need spatial class evidence and is designated non-causal.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::stylization::random_permutation;
use crate::tensor::Tensor;
use crate::vit::{BranchMix, HeadMask, ViTModel, SPECIAL_TOKENS};

/// `β₁ = sigmoid(logit)` per head; `β₂ = 1 − β₁` is implicit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaWeights {
    blocks: usize,
    heads: usize,
    logits: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

impl BetaWeights {
    /// All logits zero, i.e. `β₁ = 0.5` everywhere.
    pub fn new(blocks: usize, heads: usize) -> Self {
        BetaWeights { blocks, heads, logits: vec![0.0; blocks * heads] }
    }

    pub fn from_logits(blocks: usize, heads: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != blocks * heads {
            return Err(Error::shape("beta_weights", format!("{blocks}x{heads} grid with {} logits", logits.len())));
        }
        Ok(BetaWeights { blocks, heads, logits })
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn beta1(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }

    pub fn beta2(&self) -> Vec<f64> {
        self.beta1().iter().map(|b| 1.0 - b).collect()
    }
}

/// `CIS = β₂ − β₁` per head, row-major over `(block, head)`.
pub fn compute_cis(betas: &BetaWeights) -> Vec<f64> {
    betas.beta1().iter().map(|&b1| (1.0 - b1) - b1).collect()
}

/// Number of heads a fraction `λ` designates.
pub fn selection_count(lambda: f64, total: usize) -> usize {
    (lambda * total as f64).round() as usize
}

/// Marks the top `round(λ·L·N_h)` heads by CIS that also exceed `τ`. Ties are
/// broken by `(block, head)` ascending.
pub fn select_noncausal(cis: &[f64], blocks: usize, heads: usize, lambda: f64, tau: f64) -> Result<HeadMask> {
    if cis.len() != blocks * heads {
        return Err(Error::shape("select_noncausal", format!("{blocks}x{heads} grid with {} scores", cis.len())));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    if cis.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("causal influence scores contain NaN".into()));
    }
    let k = selection_count(lambda, cis.len());
    let mut order: Vec<usize> = (0..cis.len()).collect();
    order.sort_by(|&a, &b| cis[b].total_cmp(&cis[a]).then(a.cmp(&b)));
    let mut flags = vec![false; cis.len()];
    let mut chosen = 0;
    for &i in order.iter().take(k) {
        if cis[i] > tau {
            flags[i] = true;
            chosen += 1;
        }
    }
    if chosen == 0 {
        return Err(Error::Config(format!(
            "no head has CIS above tau = {tau} among the top {k} (max CIS {:.4})",
            cis.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        )));
    }
    HeadMask::new(blocks, heads, flags)
}

/// Scores, thresholds, and the resulting designation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CisReport {
    pub blocks: usize,
    pub heads: usize,
    /// `[L][N_h]`
    pub beta1: Vec<Vec<f64>>,
    /// `[L][N_h]`
    pub cis: Vec<Vec<f64>>,
    pub tau: f64,
    pub lambda: f64,
    pub mask: HeadMask,
    /// `(block, head)` of every non-causal head, in selection order.
    pub selected: Vec<(usize, usize)>,
}

impl CisReport {
    pub fn build(betas: &BetaWeights, lambda: f64, tau: f64) -> Result<Self> {
        let cis = compute_cis(betas);
        let mask = select_noncausal(&cis, betas.blocks, betas.heads, lambda, tau)?;
        let grid = |v: &[f64]| v.chunks(betas.heads).map(<[f64]>::to_vec).collect();
        let mut selected: Vec<(usize, usize)> = (0..cis.len())
            .filter(|&i| mask.flags()[i])
            .map(|i| (i / betas.heads, i % betas.heads))
            .collect();
        selected.sort_by(|a, b| {
            let (ia, ib) = (a.0 * betas.heads + a.1, b.0 * betas.heads + b.1);
            cis[ib].total_cmp(&cis[ia]).then(ia.cmp(&ib))
        });
        Ok(CisReport {
            blocks: betas.blocks,
            heads: betas.heads,
            beta1: grid(&betas.beta1()),
            cis: grid(&cis),
            tau,
            lambda,
            mask,
            selected,
        })
    }

    pub fn flat_cis(&self) -> Vec<f64> {
        self.cis.concat()
    }
}

/// Permutations for one batch: `perms[block][sample]` over the patch grid.
/// Block 0's entry is the input-level shuffle.
pub type BranchPermutations = Vec<Vec<Vec<usize>>>;

pub fn draw_permutations<R: Rng + ?Sized>(rng: &mut R, blocks: usize, batch: usize, patches: usize) -> BranchPermutations {
    (0..blocks).map(|_| (0..batch).map(|_| random_permutation(rng, patches)).collect()).collect()
}

fn permute_patch_tokens(tape: &mut Tape<'_>, x: Var, perms: &[Vec<usize>], seq_len: usize) -> Result<Var> {
    let mut index = Vec::with_capacity(perms.len() * seq_len);
    for (n, p) in perms.iter().enumerate() {
        let base = n * seq_len;
        index.extend(base..base + SPECIAL_TOKENS);
        index.extend(p.iter().map(|&src| base + SPECIAL_TOKENS + src));
    }
    tape.gather_rows(x, &index)
}

/// Goal logits of the two-branch forward. `beta1` is an `[L × N_h]` node.
pub(crate) fn mixed_logits(
    model: &ViTModel,
    tape: &mut Tape<'_>,
    bound: &Bound,
    images: &[f64],
    perms: &BranchPermutations,
    beta1: Var,
) -> Result<Var> {
    let cfg = model.config();
    let batch = images.len() / cfg.image_len();
    if perms.len() != cfg.num_blocks || perms.iter().any(|p| p.len() != batch) {
        return Err(Error::shape("mixed_forward", format!("need {} x {batch} permutations", cfg.num_blocks)));
    }
    for p in perms.iter().flatten() {
        let mut seen = vec![false; cfg.num_patches()];
        if p.len() != seen.len() || p.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Contract(format!("{p:?} is not a permutation of the patch grid")));
        }
    }
    let patches = model.patchify(images)?;
    let embedded = model.embed_patches(tape, bound, &patches)?;
    let mut x = model.assemble_tokens(tape, bound, embedded, None)?;
    let first = model.assemble_tokens(tape, bound, embedded, Some(&perms[0]))?;
    for b in 0..cfg.num_blocks {
        let stream = if b == 0 { first } else { permute_patch_tokens(tape, x, &perms[b], cfg.seq_len())? };
        let w = tape.gather_rows(beta1, &[b])?;
        x = model.block_forward_inner(tape, bound, b, x, Some(BranchMix { stream, clean_weight: w }))?;
    }
    Ok(model.readout(tape, bound, x)?.goal_logits)
}

/// Gradient-free two-branch forward; returns `[B × |C_g|]` goal logits.
pub fn mixed_forward(model: &ViTModel, images: &[f64], perms: &BranchPermutations, betas: &BetaWeights) -> Result<Tensor> {
    let cfg = model.config();
    if betas.blocks != cfg.num_blocks || betas.heads != cfg.heads_per_block {
        return Err(Error::shape("mixed_forward", "beta grid does not match the model".to_string()));
    }
    if images.is_empty() || !images.len().is_multiple_of(cfg.image_len()) {
        return Err(Error::shape("mixed_forward", format!("{} values is not a whole number of images", images.len())));
    }
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, &[]);
    let beta1 = tape.constant([betas.blocks, betas.heads], betas.beta1())?;
    let logits = mixed_logits(model, &mut tape, &bound, images, perms, beta1)?;
    Ok(tape.to_tensor(logits))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitBetaConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
}

impl Default for FitBetaConfig {
    fn default() -> Self {
        FitBetaConfig { learning_rate: 0.01, momentum: 0.9, epochs: 3, batch_size: 64, label_smoothing: 0.0 }
    }
}

/// Fits the `β` logits under the goal loss with the model frozen. Fresh
/// shuffles are drawn for every batch.
pub fn fit_beta(model: &ViTModel, images: &[f64], labels: &[usize], cfg: &FitBetaConfig, seed: u64) -> Result<BetaWeights> {
    let vc = model.config();
    let n = labels.len();
    if n == 0 || images.len() != n * vc.image_len() {
        return Err(Error::shape("fit_beta", format!("{} labels for {} image values", n, images.len())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("fit_beta batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut betas = BetaWeights::new(vc.num_blocks, vc.heads_per_block);
    let mut velocity = vec![0.0; betas.logits.len()];
    let mut order: Vec<usize> = (0..n).collect();
    let len = vc.image_len();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch = Vec::with_capacity(idx.len() * len);
            for &i in idx {
                batch.extend_from_slice(&images[i * len..(i + 1) * len]);
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let perms = draw_permutations(&mut rng, vc.num_blocks, idx.len(), vc.num_patches());

            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, &[]);
            let logit_var = tape.input([betas.blocks, betas.heads], betas.logits.clone(), true)?;
            let beta1 = tape.sigmoid(logit_var);
            let logits = mixed_logits(model, &mut tape, &bound, &batch, &perms, beta1)?;
            let loss = tape.cross_entropy(logits, &y, cfg.label_smoothing)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "fit_beta loss {value} at epoch {epoch}, step {step}; beta logits {:?}",
                    betas.logits
                )));
            }
            let mut grads = tape.backward(loss)?;
            let g = grads.take(logit_var).ok_or_else(|| Error::Contract("beta logits received no gradient".into()))?;
            for ((l, v), g) in betas.logits.iter_mut().zip(velocity.iter_mut()).zip(g) {
                *v = cfg.momentum * *v + g;
                *l -= cfg.learning_rate * *v;
            }
        }
    }
    Ok(betas)
}
