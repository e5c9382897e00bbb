//! Vendor-side alternating training and client-side source-free adaptation.
//!
//! Vendor: warm-start goal training, head-weight fitting and selection, then
//! rounds of `task epochs → style epochs until the holdout style accuracy
//! reaches the target`. Goal steps update the causal backbone and the goal
//! classifier; style steps update only the non-causal heads and the style
//! classifier.
//!
//! Client: per round, refresh class centroids and pseudo-labels, run task
//! epochs of `L_ent + L_div + γ·CE(pseudo)` over the causal parameters, then
//! the style phase on stylized target images. The client only ever sees
//! unlabeled target images.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Images};
use crate::error::{Error, Result};
use crate::head_selection::{fit_beta, CisReport, FitBetaConfig};
use crate::metrics::accuracy_from_logits;
use crate::optim::Sgd;
use crate::params::ParamId;
use crate::tensor::Tensor;
use crate::vit::{ForwardVars, HeadMask, ViTModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub rounds: usize,
    pub task_epochs_per_round: usize,
    pub style_accuracy_target: f64,
    /// Cap on style training intervals per round.
    pub style_max_epochs_per_round: usize,
    /// Style steps between holdout accuracy checks; 0 means one full pass
    /// over the style training set.
    pub style_steps_per_check: usize,
    /// Goal-only epochs before head selection (vendor).
    pub warm_start_epochs: usize,
    /// Leading warm-start epochs with a linear learning-rate ramp.
    pub warmup_epochs: usize,
    /// Learning-rate multiplier at the first warm-up step.
    pub warmup_factor: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub vendor_lr: f64,
    pub client_lr: f64,
    pub style_lr: f64,
    /// Weight γ of the pseudo-label cross-entropy on the client.
    pub sspl_weight: f64,
    /// Pseudo-labels are refreshed every this many rounds.
    pub pseudo_label_refresh: usize,
    /// Client halts after this many consecutive rounds of pseudo-label
    /// agreement below chance.
    pub divergence_patience: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            rounds: 25,
            task_epochs_per_round: 2,
            style_accuracy_target: 0.8,
            style_max_epochs_per_round: 20,
            style_steps_per_check: 0,
            warm_start_epochs: 5,
            warmup_epochs: 5,
            warmup_factor: 0.01,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            vendor_lr: 5e-3,
            client_lr: 1e-3,
            style_lr: 5e-3,
            sspl_weight: 0.3,
            pseudo_label_refresh: 1,
            divergence_patience: 3,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.style_accuracy_target > 0.0 && self.style_accuracy_target < 1.0) {
            return Err(Error::Config("style_accuracy_target must lie in (0, 1)".into()));
        }
        if self.batch_size == 0 || self.pseudo_label_refresh == 0 {
            return Err(Error::Config("batch_size and pseudo_label_refresh must be positive".into()));
        }
        if !(self.warmup_factor > 0.0 && self.warmup_factor <= 1.0) {
            return Err(Error::Config("warmup_factor must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || self.sspl_weight < 0.0 {
            return Err(Error::Config("label_smoothing must lie in [0, 1) and sspl_weight be nonnegative".into()));
        }
        for lr in [self.vendor_lr, self.client_lr, self.style_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        Ok(())
    }
}

/// Head-selection settings used by the vendor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub lambda: f64,
    pub tau: f64,
    pub fit: FitBetaConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { lambda: 0.3, tau: 0.0, fit: FitBetaConfig::default() }
    }
}

/// One line of training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub side: String,
    pub round: usize,
    pub phase: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sspl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub style_epochs: Option<usize>,
    pub style_capped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pseudo_label_agreement: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centroid_fallbacks: Option<usize>,
}

impl MetricsRecord {
    fn new(seed: u64, side: &str, round: usize, phase: &str) -> Self {
        MetricsRecord {
            seed,
            side: side.into(),
            round,
            phase: phase.into(),
            task_loss: None,
            entropy: None,
            diversity: None,
            sspl: None,
            style_loss: None,
            style_acc: None,
            style_epochs: None,
            style_capped: false,
            target_acc: None,
            pseudo_label_agreement: None,
            centroid_fallbacks: None,
        }
    }
}

/// Style-labelled images split into a training part and a holdout used for
/// the accuracy exit test.
#[derive(Debug, Clone)]
pub struct StyleData {
    pub train: Dataset,
    pub holdout: Dataset,
}

impl StyleData {
    /// Keeps every sample's group of stylized copies on one side of the split.
    pub fn split(data: Dataset, holdout_fraction: f64) -> Result<Self> {
        let labels = data.style_labels()?;
        let per = labels.iter().max().map_or(1, |m| m + 1);
        if labels.len() % per != 0 {
            return Err(Error::shape("style split", format!("{} samples in groups of {per}", labels.len())));
        }
        let groups = labels.len() / per;
        let keep = ((groups as f64) * (1.0 - holdout_fraction)).round() as usize;
        if keep == 0 || keep == groups {
            return Err(Error::Config(format!("holdout fraction {holdout_fraction} leaves an empty side")));
        }
        let cut = keep * per;
        let train: Vec<usize> = (0..cut).collect();
        let hold: Vec<usize> = (cut..labels.len()).collect();
        Ok(StyleData { train: data.subset(&train), holdout: data.subset(&hold) })
    }
}

/// Groups updated by the two kinds of step.
#[derive(Debug, Clone)]
struct Groups {
    task: Vec<ParamId>,
    style: Vec<ParamId>,
}

fn groups(model: &ViTModel, mask: &HeadMask) -> Result<Groups> {
    let part = model.partition_params(mask)?;
    Ok(Groups { task: part.task_group(), style: part.style_group() })
}

fn complement(model: &ViTModel, group: &[ParamId]) -> Vec<ParamId> {
    model.params().ids().filter(|id| group.binary_search(id).is_err()).collect()
}

/// Forward, loss, backward, and a masked SGD step. With `audit`, every
/// parameter outside `group` is byte-compared across the step.
fn masked_step<F>(model: &mut ViTModel, opt: &mut Sgd, group: &[ParamId], images: &[f64], audit: bool, loss_fn: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Tape<'_>, &ForwardVars) -> Result<Vec<Var>>,
{
    let (terms, bound, grads) = {
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, group);
        let f = model.forward_batch(&mut tape, &bound, images)?;
        let vars = loss_fn(&mut tape, &f)?;
        let terms: Vec<f64> = vars.iter().map(|&v| tape.value(v)[0]).collect();
        if let Some(bad) = terms.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("training loss {bad} (terms {terms:?})")));
        }
        let grads = tape.backward(vars[0])?;
        (terms, bound, grads)
    };
    let others = if audit { complement(model, group) } else { Vec::new() };
    let before = model.params().snapshot(&others);
    model.params_mut().accumulate(&bound, &grads)?;
    opt.step(model.params_mut(), group)?;
    if audit && model.params().snapshot(&others) != before {
        return Err(Error::Contract("optimizer step modified a parameter outside its group".into()));
    }
    Ok(terms)
}

fn batches(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn pick(labels: &[usize], idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| labels[i]).collect()
}

/// One style-classification step over the non-causal heads and the style
/// classifier. Returns the loss.
pub fn style_step(model: &mut ViTModel, opt: &mut Sgd, mask: &HeadMask, images: &[f64], labels: &[usize], smoothing: f64) -> Result<f64> {
    if mask.count_noncausal() == 0 {
        return Err(Error::Config("style step needs at least one non-causal head".into()));
    }
    let g = groups(model, mask)?;
    let t = masked_step(model, opt, &g.style, images, true, |tape, f| {
        Ok(vec![tape.cross_entropy(f.style_logits, labels, smoothing)?])
    })?;
    Ok(t[0])
}

/// One goal-classification step over the causal backbone and the goal
/// classifier. Returns the loss.
pub fn task_step_source(model: &mut ViTModel, opt: &mut Sgd, mask: &HeadMask, images: &[f64], labels: &[usize], smoothing: f64) -> Result<f64> {
    let g = groups(model, mask)?;
    let t = masked_step(model, opt, &g.task, images, true, |tape, f| {
        Ok(vec![tape.cross_entropy(f.goal_logits, labels, smoothing)?])
    })?;
    Ok(t[0])
}

/// Entropy and diversity terms on the tape: `(−Σ p log p / B, Σ p̂ log p̂)`.
fn im_terms(tape: &mut Tape<'_>, logits: Var) -> (Var, Var) {
    let batch = tape.shape(logits)[0] as f64;
    let p = tape.softmax_rows(logits);
    let lp = tape.log_softmax_rows(logits);
    let plp = tape.mul(p, lp).expect("same shape");
    let s = tape.sum(plp);
    let ent = tape.scale(s, -1.0 / batch);
    let mean = tape.mean_rows(p);
    let xl = tape.xlogx(mean);
    let div = tape.sum(xl);
    (ent, div)
}

fn im_values(logits: &Tensor) -> Result<(f64, f64)> {
    if logits.shape().len() != 2 {
        return Err(Error::shape("im_loss", format!("logits must be [B x K], got {:?}", logits.shape())));
    }
    let mut tape = Tape::new();
    let l = tape.leaf_with(logits, false);
    let (e, d) = im_terms(&mut tape, l);
    Ok((tape.value(e)[0], tape.value(d)[0]))
}

/// Mean Shannon entropy of the softmaxed rows of `[B × K]` logits.
pub fn entropy_loss(logits: &Tensor) -> Result<f64> {
    Ok(im_values(logits)?.0)
}

/// `Σ_k p̂_k log p̂_k` of the batch-mean prediction.
pub fn diversity_loss(logits: &Tensor) -> Result<f64> {
    Ok(im_values(logits)?.1)
}

fn style_accuracy(model: &ViTModel, holdout: &Dataset) -> Result<f64> {
    let out = model.infer(holdout.images.as_slice())?;
    accuracy_from_logits(&out.style_logits, holdout.style_labels()?)
}

/// Style training in intervals until the holdout accuracy reaches the target
/// (at least one interval), capped. Returns `(mean loss of the last interval,
/// accuracy, intervals, capped)`.
fn style_phase(
    model: &mut ViTModel,
    opt: &mut Sgd,
    mask: &HeadMask,
    style: &StyleData,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, usize, bool)> {
    if mask.count_noncausal() == 0 {
        return Err(Error::Config("style phase needs at least one non-causal head".into()));
    }
    let g = groups(model, mask)?;
    let labels = style.train.style_labels()?.to_vec();
    let per_epoch = labels.len().div_ceil(schedule.batch_size);
    let interval = if schedule.style_steps_per_check == 0 { per_epoch } else { schedule.style_steps_per_check };
    let cap = schedule.style_max_epochs_per_round.max(1);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut last = (f64::NAN, 0.0);
    for check in 1..=cap {
        let mut total = 0.0;
        for i in 0..interval {
            if queue.is_empty() {
                queue = batches(rng, labels.len(), schedule.batch_size);
                queue.reverse();
            }
            let idx = queue.pop().expect("refilled above");
            let x = style.train.images.gather(&idx);
            let y = pick(&labels, &idx);
            let t = masked_step(model, opt, &g.style, &x, i == 0, |tape, f| {
                Ok(vec![tape.cross_entropy(f.style_logits, &y, schedule.label_smoothing)?])
            })?;
            total += t[0];
        }
        let acc = style_accuracy(model, &style.holdout)?;
        last = (total / interval as f64, acc);
        if acc >= schedule.style_accuracy_target {
            return Ok((last.0, acc, check, false));
        }
    }
    Ok((last.0, last.1, cap, true))
}

fn goal_epoch(
    model: &mut ViTModel,
    opt: &mut Sgd,
    group: &[ParamId],
    data: &Dataset,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
    mut lr_at: impl FnMut() -> f64,
) -> Result<f64> {
    let labels = data.goal_labels()?;
    let order = batches(rng, labels.len(), schedule.batch_size);
    let mut total = 0.0;
    for (i, idx) in order.iter().enumerate() {
        opt.set_learning_rate(lr_at());
        let x = data.images.gather(idx);
        let y = pick(labels, idx);
        let t = masked_step(model, opt, group, &x, i == 0, |tape, f| {
            Ok(vec![tape.cross_entropy(f.goal_logits, &y, schedule.label_smoothing)?])
        })?;
        total += t[0];
    }
    Ok(total / order.len() as f64)
}

#[derive(Debug, Clone)]
pub struct VendorOutcome {
    pub mask: HeadMask,
    pub cis: Option<CisReport>,
    pub records: Vec<MetricsRecord>,
}

/// Vendor-side training on labelled source data. Without style data the
/// model is trained on the goal task alone with every head causal.
pub fn vendor_train(
    model: &mut ViTModel,
    source: &Dataset,
    style: Option<&StyleData>,
    schedule: &TrainSchedule,
    selection: &SelectionConfig,
    seed: u64,
) -> Result<VendorOutcome> {
    schedule.validate()?;
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut mask = HeadMask::all(cfg.num_blocks, cfg.heads_per_block, false);
    let mut task_opt = Sgd::new(schedule.vendor_lr, schedule.momentum, schedule.weight_decay)?;

    let steps_per_epoch = source.len().div_ceil(schedule.batch_size);
    let warm_steps = (schedule.warmup_epochs * steps_per_epoch).max(1);
    let mut step = 0usize;
    let group = groups(model, &mask)?.task;
    for epoch in 0..schedule.warm_start_epochs {
        let loss = goal_epoch(model, &mut task_opt, &group, source, schedule, &mut rng, || {
            let f = if step < warm_steps {
                let t = step as f64 / warm_steps as f64;
                schedule.warmup_factor + (1.0 - schedule.warmup_factor) * t
            } else {
                1.0
            };
            step += 1;
            schedule.vendor_lr * f
        })?;
        let mut r = MetricsRecord::new(seed, "vendor", 0, &format!("warm_start.{}", epoch + 1));
        r.task_loss = Some(loss);
        records.push(r);
    }
    task_opt.set_learning_rate(schedule.vendor_lr);

    let mut cis = None;
    if style.is_some() {
        let labels = source.goal_labels()?;
        let betas = fit_beta(model, source.images.as_slice(), labels, &selection.fit, seed ^ BETA_SEED_TAG)?;
        let report = CisReport::build(&betas, selection.lambda, selection.tau)?;
        mask = report.mask.clone();
        cis = Some(report);
    }
    let g = groups(model, &mask)?;
    let mut style_opt = Sgd::new(schedule.style_lr, schedule.momentum, schedule.weight_decay)?;
    for round in 1..=schedule.rounds {
        let mut r = MetricsRecord::new(seed, "vendor", round, "round");
        let mut loss = 0.0;
        for _ in 0..schedule.task_epochs_per_round {
            loss = goal_epoch(model, &mut task_opt, &g.task, source, schedule, &mut rng, || schedule.vendor_lr)?;
        }
        r.task_loss = (schedule.task_epochs_per_round > 0).then_some(loss);
        if let Some(style) = style {
            let (sl, acc, epochs, capped) = style_phase(model, &mut style_opt, &mask, style, schedule, &mut rng)?;
            r.style_loss = Some(sl);
            r.style_acc = Some(acc);
            r.style_epochs = Some(epochs);
            r.style_capped = capped;
        }
        records.push(r);
    }
    Ok(VendorOutcome { mask, cis, records })
}

/// Soft-assignment class centroids in class-token space.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    /// `[K × d]`
    pub centroids: Tensor,
    /// Classes whose soft mass was below `1e-8` and fell back.
    pub fallback: Vec<usize>,
}

const BETA_SEED_TAG: u64 = 0xbe7a;

pub const CENTROID_MIN_MASS: f64 = 1e-8;

/// `c_k = Σ_i p_ik·z_i / Σ_i p_ik` from `[N × d]` features and `[N × K]`
/// probabilities. Classes with negligible mass keep their previous centroid
/// or, without one, the global feature mean.
pub fn centroids_from(features: &Tensor, probs: &Tensor, previous: Option<&CentroidSet>) -> Result<CentroidSet> {
    let (n, d) = features.as_matrix();
    let (pn, k) = probs.as_matrix();
    if n != pn || n == 0 {
        return Err(Error::shape("centroids", format!("{n} features, {pn} probability rows")));
    }
    let (z, p) = (features.data(), probs.data());
    let mut sums = vec![0.0; k * d];
    let mut mass = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            let w = p[i * k + c];
            mass[c] += w;
            for j in 0..d {
                sums[c * d + j] += w * z[i * d + j];
            }
        }
    }
    let mut fallback = Vec::new();
    for c in 0..k {
        if mass[c] < CENTROID_MIN_MASS {
            fallback.push(c);
            let row: Vec<f64> = match previous {
                Some(prev) => prev.centroids.row(c).to_vec(),
                None => (0..d).map(|j| (0..n).map(|i| z[i * d + j]).sum::<f64>() / n as f64).collect(),
            };
            sums[c * d..(c + 1) * d].copy_from_slice(&row);
        } else {
            sums[c * d..(c + 1) * d].iter_mut().for_each(|v| *v /= mass[c]);
        }
    }
    Ok(CentroidSet { centroids: Tensor::new([k, d], sums)?, fallback })
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Row-wise softmax of `[N × K]` logits.
pub fn probabilities(logits: &Tensor) -> Tensor {
    let (n, k) = logits.as_matrix();
    let data = (0..n).flat_map(|i| softmax(logits.row(i))).collect();
    Tensor::new([n, k], data).expect("same shape")
}

/// Centroids from the model's current predictions on unlabeled images.
pub fn compute_centroids(model: &ViTModel, images: &Images, previous: Option<&CentroidSet>) -> Result<CentroidSet> {
    let out = model.infer(images.as_slice())?;
    centroids_from(&out.class_features, &probabilities(&out.goal_logits), previous)
}

/// Nearest centroid by cosine distance (ties to the smallest class). Returns
/// the labels and the number of zero-norm features assigned by dot product.
pub fn assign_pseudo_labels(features: &Tensor, centroids: &CentroidSet) -> Result<(Vec<usize>, usize)> {
    let (n, d) = features.as_matrix();
    let (k, cd) = centroids.centroids.as_matrix();
    if d != cd {
        return Err(Error::shape("assign_pseudo_labels", format!("features of width {d}, centroids of width {cd}")));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cnorms: Vec<f64> = (0..k).map(|c| norm(centroids.centroids.row(c))).collect();
    let mut flagged = 0;
    let labels = (0..n)
        .map(|i| {
            let z = features.row(i);
            let zn = norm(z);
            let mut best = 0;
            let mut best_score = f64::INFINITY;
            for c in 0..k {
                let dot: f64 = z.iter().zip(centroids.centroids.row(c)).map(|(a, b)| a * b).sum();
                let score = if zn == 0.0 {
                    -dot
                } else if cnorms[c] == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (zn * cnorms[c])
                };
                if score < best_score {
                    best = c;
                    best_score = score;
                }
            }
            if zn == 0.0 {
                flagged += 1;
            }
            best
        })
        .collect();
    Ok((labels, flagged))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluation-only hook called after every client round (for example target
/// accuracy against held-back labels). It never feeds back into training.
pub type RoundEvaluator<'a> = &'a dyn Fn(&ViTModel) -> Result<f64>;

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub records: Vec<MetricsRecord>,
    pub halted: Option<String>,
}

/// Source-free adaptation on unlabeled target images. `style` holds the
/// stylized target images; without it (or with an all-causal mask) there is
/// no style phase.
pub fn client_adapt(
    model: &mut ViTModel,
    mask: &HeadMask,
    target: &Images,
    style: Option<&StyleData>,
    schedule: &TrainSchedule,
    seed: u64,
    evaluate: Option<RoundEvaluator<'_>>,
) -> Result<ClientOutcome> {
    schedule.validate()?;
    if target.is_empty() {
        return Err(Error::Config("client adaptation needs target images".into()));
    }
    let k = model.config().num_classes;
    let g = groups(model, mask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut task_opt = Sgd::new(schedule.client_lr, schedule.momentum, schedule.weight_decay)?;
    let mut style_opt = Sgd::new(schedule.style_lr, schedule.momentum, schedule.weight_decay)?;
    let mut records = Vec::new();
    let mut centroids: Option<CentroidSet> = None;
    let mut pseudo: Vec<usize> = Vec::new();
    let mut below = 0;
    let chance = 1.0 / k as f64;

    for round in 1..=schedule.rounds {
        let mut r = MetricsRecord::new(seed, "client", round, "round");
        if (round - 1) % schedule.pseudo_label_refresh == 0 || pseudo.is_empty() {
            let out = model.infer(target.as_slice())?;
            let probs = probabilities(&out.goal_logits);
            let c = centroids_from(&out.class_features, &probs, centroids.as_ref())?;
            let (labels, _) = assign_pseudo_labels(&out.class_features, &c)?;
            let agree = (0..labels.len()).filter(|&i| argmax(out.goal_logits.row(i)) == labels[i]).count();
            let agreement = agree as f64 / labels.len() as f64;
            r.pseudo_label_agreement = Some(agreement);
            r.centroid_fallbacks = Some(c.fallback.len());
            below = if agreement < chance { below + 1 } else { 0 };
            pseudo = labels;
            centroids = Some(c);
            if below >= schedule.divergence_patience {
                records.push(r);
                let msg = format!(
                    "pseudo-label agreement below 1/{k} for {below} consecutive rounds (last {agreement:.4}) at round {round}"
                );
                return Ok(ClientOutcome { records, halted: Some(msg) });
            }
        }
        let (mut ent, mut div, mut ce) = (0.0, 0.0, 0.0);
        for _ in 0..schedule.task_epochs_per_round {
            let order = batches(&mut rng, target.len(), schedule.batch_size);
            let (mut e_sum, mut d_sum, mut c_sum) = (0.0, 0.0, 0.0);
            for (i, idx) in order.iter().enumerate() {
                let x = target.gather(idx);
                let y = pick(&pseudo, idx);
                let gamma = schedule.sspl_weight;
                let t = masked_step(model, &mut task_opt, &g.task, &x, i == 0, |tape, f| {
                    let (e, d) = im_terms(tape, f.goal_logits);
                    let c = tape.cross_entropy(f.goal_logits, &y, 0.0)?;
                    let im = tape.add(e, d)?;
                    let wc = tape.scale(c, gamma);
                    let total = tape.add(im, wc)?;
                    Ok(vec![total, e, d, c])
                })?;
                e_sum += t[1];
                d_sum += t[2];
                c_sum += t[3];
            }
            let m = order.len() as f64;
            (ent, div, ce) = (e_sum / m, d_sum / m, c_sum / m);
        }
        if schedule.task_epochs_per_round > 0 {
            r.entropy = Some(ent);
            r.diversity = Some(div);
            r.sspl = Some(ce);
            r.task_loss = Some(ent + div + schedule.sspl_weight * ce);
        }
        if let Some(style) = style.filter(|_| mask.count_noncausal() > 0) {
            let (sl, acc, epochs, capped) = style_phase(model, &mut style_opt, mask, style, schedule, &mut rng)?;
            r.style_loss = Some(sl);
            r.style_acc = Some(acc);
            r.style_epochs = Some(epochs);
            r.style_capped = capped;
        }
        if let Some(eval) = evaluate {
            r.target_acc = Some(eval(model)?);
        }
        records.push(r);
    }
    Ok(ClientOutcome { records, halted: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f64]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new([rows.len(), k], rows.concat()).unwrap()
    }

    #[test]
    fn entropy_values() {
        assert!(entropy_loss(&logits(&[&[50.0, 0.0, 0.0]])).unwrap().abs() < 1e-15);
        assert!((entropy_loss(&logits(&[&[0.0; 5]])).unwrap() - 5f64.ln()).abs() < 1e-12);
        let l = (0.9f64 / 0.1).ln();
        assert!((entropy_loss(&logits(&[&[l, 0.0]])).unwrap() - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn diversity_values() {
        assert!((diversity_loss(&logits(&[&[0.0; 5], &[0.0; 5]])).unwrap() + 5f64.ln()).abs() < 1e-12);
        assert!(diversity_loss(&logits(&[&[800.0, 0.0], &[900.0, 0.0]])).unwrap().abs() < 1e-15);
    }

    #[test]
    fn centroid_cases() {
        let z = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = Tensor::new([1, 2], vec![0.3, 0.7]).unwrap();
        let c = centroids_from(&z, &p, None).unwrap();
        for (a, b) in c.centroids.data().iter().zip([1.0, 2.0, 3.0, 1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let z = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 5.0]).unwrap();
        let p = Tensor::new([2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let c = centroids_from(&z, &p, None).unwrap();
        assert_eq!(&c.centroids.data()[..4], &[1.0, 0.0, 0.0, 5.0]);
        assert_eq!(c.fallback, vec![2]);
        assert_eq!(c.centroids.row(2), &[0.5, 2.5]);
    }

    #[test]
    fn pseudo_label_rules() {
        let c = CentroidSet {
            centroids: Tensor::new([3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            fallback: vec![],
        };
        let f = Tensor::new([3, 3], vec![0.0, 0.0, 2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let (labels, flagged) = assign_pseudo_labels(&f, &c).unwrap();
        assert_eq!(labels, vec![2, 0, 0]);
        assert_eq!(flagged, 1);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let bad = TrainSchedule { style_accuracy_target: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
