//! Experiment stages over persisted artifacts, and the in-memory paired
//! study used by the ablation sweeps.
//!
//! Run directory layout:
//!
//! ```text
//! config.toml                      resolved configuration
//! data/{source,target}_{train,test}.csft (+ .json sidecars)
//! data/style_{source,target}.csft  (+ .json sidecars)
//! vendor/model.ckpt, model.json, metrics.jsonl, cis_report.json
//! heads/cis_report.json
//! client/model.ckpt, model.json, metrics.jsonl
//! eval.json, a_distance.json
//! ablation/{comparison,task_epochs,lambda,families}.csv
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Images};
use crate::domains::{sample_domain, CausalGraphParams};
use crate::error::{Error, Result};
use crate::head_selection::{fit_beta, CisReport};
use crate::metrics::{
    a_distance, accuracy, correlation_preservation, mean_class_token, standardize_channels, ADistanceResult, CorrelationReport,
    LinearProbe, ProbeConfig,
};
use crate::stylization::{augment, build_style_dataset, make_sci, random_permutation, AugmentParams, StyleLabel};
use crate::tensor::Tensor;
use crate::training::{client_adapt, vendor_train, MetricsRecord, StyleData};
use crate::vit::{HeadMask, ViTModel};

/// Adaptation method. `Shot` trains the vendor without the style task and
/// adapts every head with information maximisation and pseudo-labels only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    CSFTrans,
    Shot,
}

/// The four domain splits of one run.
#[derive(Debug, Clone)]
pub struct Domains {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

pub fn generate_domains(cfg: &RunConfig) -> Result<Domains> {
    let n = cfg.data.samples_per_domain;
    let (source_train, source_test) = sample_domain(&cfg.data.source, n)?.split(cfg.data.train_fraction);
    let (target_train, target_test) = sample_domain(&cfg.data.target, n)?.split(cfg.data.train_fraction);
    Ok(Domains { source_train, source_test, target_train, target_test })
}

fn leading(data: &Dataset, n: usize) -> Dataset {
    data.subset(&(0..n.min(data.len())).collect::<Vec<_>>())
}

/// Stylized copies of the leading source training images.
pub fn source_style_dataset(cfg: &RunConfig, source_train: &Dataset) -> Result<Dataset> {
    build_style_dataset(&leading(source_train, cfg.data.style_base_images), &cfg.data.augment, cfg.data.augment.seed)
}

/// Stylized copies of the leading target training images. Goal labels and
/// latents are dropped before augmentation.
pub fn target_style_dataset(cfg: &RunConfig, target_train: &Images) -> Result<Dataset> {
    let n = cfg.data.style_base_images.min(target_train.len());
    let unlabeled = Dataset {
        images: target_train.subset(&(0..n).collect::<Vec<_>>()),
        goal_labels: None,
        latents: None,
        style_labels: None,
    };
    build_style_dataset(&unlabeled, &cfg.data.augment, cfg.data.augment.seed ^ TARGET_STYLE_TAG)
}

const TARGET_STYLE_TAG: u64 = 0x7a26;
const CLIENT_SEED_TAG: u64 = 0xc11e;

/// Vendor training from scratch. Returns the model, its head mask, CIS
/// report (style task only) and metrics.
pub fn train_vendor(
    cfg: &RunConfig,
    method: Method,
    source_train: &Dataset,
    style: Option<&Dataset>,
) -> Result<(ViTModel, HeadMask, Option<CisReport>, Vec<MetricsRecord>)> {
    let mut model = ViTModel::new(cfg.vit.clone(), cfg.seed)?;
    let style = match method {
        Method::CSFTrans => {
            let data = style.ok_or_else(|| Error::Contract("style task requires style data".into()))?;
            Some(StyleData::split(data.clone(), cfg.data.style_holdout_fraction)?)
        }
        Method::Shot => None,
    };
    let out = vendor_train(&mut model, source_train, style.as_ref(), &cfg.vendor, &cfg.selection, cfg.seed)?;
    Ok((model, out.mask, out.cis, out.records))
}

/// Client adaptation in place. Target goal labels are only visible to the
/// optional evaluator.
pub fn adapt_client(
    cfg: &RunConfig,
    method: Method,
    model: &mut ViTModel,
    mask: &HeadMask,
    target_train: &Images,
    style: Option<&Dataset>,
    evaluate: Option<&dyn Fn(&ViTModel) -> Result<f64>>,
) -> Result<(Vec<MetricsRecord>, Option<String>)> {
    let (mask, style) = match method {
        Method::CSFTrans => {
            let data = style.ok_or_else(|| Error::Contract("style task requires style data".into()))?;
            (mask.clone(), Some(StyleData::split(data.clone(), cfg.data.style_holdout_fraction)?))
        }
        Method::Shot => {
            let c = model.config();
            (HeadMask::all(c.num_blocks, c.heads_per_block, false), None)
        }
    };
    let out = client_adapt(model, &mask, target_train, style.as_ref(), &cfg.client, cfg.seed ^ CLIENT_SEED_TAG, evaluate)?;
    Ok((out.records, out.halted))
}

/// Source–target A-distance over mean class tokens (clean image plus its
/// stylized copies), and the class/style-token correlation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub domain_gap: ADistanceResult,
    pub correlation: CorrelationReport,
}

pub fn gap_report(cfg: &RunConfig, model: &ViTModel, source: &Images, target: &Images) -> Result<GapReport> {
    let shape = source.shape();
    let tokens = |images: &Images, tag: u64| -> Result<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ tag);
        let mut rows = Vec::new();
        let mut d = 0;
        for i in 0..images.len() {
            let x = images.image(i);
            let variants = (1..=cfg.data.augment.families)
                .map(|f| augment(x, shape, StyleLabel(f), &cfg.data.augment, rand::RngCore::next_u64(&mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let m = mean_class_token(model, x, &variants)?;
            d = m.len();
            rows.extend(m);
        }
        Tensor::new([images.len(), d], rows)
    };
    let zs = tokens(source, 0x5)?;
    let zt = tokens(target, 0x7)?;
    Ok(GapReport {
        domain_gap: a_distance(&zs, &zt, cfg.seed)?,
        correlation: correlation_preservation(model, source.as_slice(), target.as_slice(), cfg.seed)?,
    })
}

fn concat(a: &Images, b: &Images) -> Result<Images> {
    let mut out = a.clone();
    for i in 0..b.len() {
        out.push(b.image(i))?;
    }
    Ok(out)
}

/// Whether the style augmentations keep the goal task intact while SCI
/// destroys it, judged by a linear probe on channel-standardized pixels
/// trained on clean images with texture independent of shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleContract {
    pub seed: u64,
    pub clean_acc: f64,
    /// Accuracy on each augmentation family relative to `clean_acc`.
    pub family_retention: Vec<f64>,
    pub sci_acc: f64,
    pub chance: f64,
}

pub const CONTRACT_TRAIN: usize = 2000;
pub const CONTRACT_EVAL: usize = 1000;

pub fn style_contract(augment_params: &AugmentParams, patch_size: usize, seed: u64) -> Result<StyleContract> {
    let graph = |s: u64| CausalGraphParams { seed: s, confounder_strength: 0.2, ..Default::default() };
    let train = sample_domain(&graph(seed.wrapping_mul(1000).wrapping_add(11)), CONTRACT_TRAIN)?;
    let eval = sample_domain(&graph(seed.wrapping_mul(1000).wrapping_add(12)), CONTRACT_EVAL)?;
    let shape = train.images.shape();
    let k = graph(0).num_classes;
    let features = |x: &[f64]| standardize_channels(x, shape);
    let probe = LinearProbe::fit(&features(train.images.as_slice())?, shape.len(), train.goal_labels()?, k, &ProbeConfig::default())?;
    let y = eval.goal_labels()?;
    let clean_acc = probe.accuracy(&features(eval.images.as_slice())?, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5c1);
    let mut family_retention = Vec::new();
    for f in 1..=augment_params.families {
        let mut x = Vec::with_capacity(eval.images.as_slice().len());
        for i in 0..eval.len() {
            x.extend(augment(eval.images.image(i), shape, StyleLabel(f), augment_params, rand::RngCore::next_u64(&mut rng))?);
        }
        family_retention.push(probe.accuracy(&features(&x)?, y)? / clean_acc);
    }
    let patches = (shape.height / patch_size) * (shape.width / patch_size);
    let mut x = Vec::with_capacity(eval.images.as_slice().len());
    for i in 0..eval.len() {
        let perm = random_permutation(&mut rng, patches);
        x.extend(make_sci(eval.images.image(i), shape, patch_size, &perm)?);
    }
    let sci_acc = probe.accuracy(&features(&x)?, y)?;
    Ok(StyleContract { seed, clean_acc, family_retention, sci_acc, chance: 1.0 / k as f64 })
}

/// Outcome of one seed of the paired study for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub vendor_source_acc: f64,
    /// Target accuracy of the vendor model (source-only transfer).
    pub vendor_target_acc: f64,
    pub adapted_target_acc: f64,
    pub selected_heads: usize,
    pub halted: Option<String>,
    /// Measured over every image of each domain (train and test splits).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gaps: Option<GapReport>,
}

/// Vendor training then client adaptation, all in memory.
pub fn run_method(cfg: &RunConfig, method: Method, domains: &Domains, with_gaps: bool) -> Result<MethodResult> {
    let (sstyle, tstyle) = match method {
        Method::CSFTrans => (
            Some(source_style_dataset(cfg, &domains.source_train)?),
            Some(target_style_dataset(cfg, domains.target_train.unlabeled())?),
        ),
        Method::Shot => (None, None),
    };
    let (mut model, mask, _, _) = train_vendor(cfg, method, &domains.source_train, sstyle.as_ref())?;
    let test = |m: &ViTModel, d: &Dataset| accuracy(m, d.images.as_slice(), d.goal_labels()?);
    let vendor_source_acc = test(&model, &domains.source_test)?;
    let vendor_target_acc = test(&model, &domains.target_test)?;
    let (_, halted) = adapt_client(cfg, method, &mut model, &mask, domains.target_train.unlabeled(), tstyle.as_ref(), None)?;
    let gaps = if with_gaps {
        let source = concat(&domains.source_train.images, &domains.source_test.images)?;
        let target = concat(&domains.target_train.images, &domains.target_test.images)?;
        Some(gap_report(cfg, &model, &source, &target)?)
    } else {
        None
    };
    Ok(MethodResult {
        method,
        vendor_source_acc,
        vendor_target_acc,
        adapted_target_acc: test(&model, &domains.target_test)?,
        selected_heads: mask.count_noncausal(),
        halted,
        gaps,
    })
}

/// Mean and standard error of the mean (0 for fewer than two values).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Persisted stages

/// Paths of every artifact inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

pub const DATASET_NAMES: [&str; 4] = ["source_train", "source_test", "target_train", "target_test"];

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.csft"))
    }

    pub fn sidecar(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.json"))
    }

    pub fn stage(&self, stage: &str, file: &str) -> PathBuf {
        self.root.join(stage).join(file)
    }
}

/// JSON description written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub name: String,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub goal_labels: bool,
    pub style_labels: bool,
    /// Samples per goal label (or per style label for style datasets).
    pub label_counts: Vec<usize>,
}

fn sidecar(name: &str, data: &Dataset) -> DatasetSidecar {
    let s = data.images.shape();
    let labels = data.style_labels.as_ref().or(data.goal_labels.as_ref());
    let mut counts = Vec::new();
    for &y in labels.into_iter().flatten() {
        if counts.len() <= y {
            counts.resize(y + 1, 0);
        }
        counts[y] += 1;
    }
    DatasetSidecar {
        name: name.into(),
        count: data.len(),
        channels: s.channels,
        height: s.height,
        width: s.width,
        goal_labels: data.goal_labels.is_some(),
        style_labels: data.style_labels.is_some(),
        label_counts: counts,
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, serde_json::to_string_pretty(value)? + "\n")
}

fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_file(path, out)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact { path: path.to_path_buf(), hint: hint.into() },
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn load_dataset(path: &Path, hint: &str) -> Result<Dataset> {
    Dataset::load(path).map_err(|e| match e {
        Error::MissingArtifact { path, .. } => Error::MissingArtifact { path, hint: hint.into() },
        e => e,
    })
}

/// Model description written next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub method: Method,
    pub vit: crate::vit::ViTConfig,
    pub noncausal: Vec<bool>,
    pub seed: u64,
}

fn save_model(dir: &RunDir, stage: &str, method: Method, model: &ViTModel, mask: &HeadMask, seed: u64) -> Result<()> {
    let path = dir.stage(stage, "model.ckpt");
    ensure_parent(&path)?;
    checkpoint::save(model.params(), &path)?;
    let manifest = ModelManifest { method, vit: model.config().clone(), noncausal: mask.flags().to_vec(), seed };
    write_json(&dir.stage(stage, "model.json"), &manifest)
}

fn load_model(dir: &RunDir, stage: &str, hint: &str) -> Result<(ViTModel, HeadMask, ModelManifest)> {
    let manifest: ModelManifest = read_json(&dir.stage(stage, "model.json"), hint)?;
    let mut model = ViTModel::new(manifest.vit.clone(), manifest.seed)?;
    checkpoint::load(model.params_mut(), &dir.stage(stage, "model.ckpt")).map_err(|e| match e {
        Error::MissingArtifact { path, .. } => Error::MissingArtifact { path, hint: hint.into() },
        e => e,
    })?;
    let mask = HeadMask::new(manifest.vit.num_blocks, manifest.vit.heads_per_block, manifest.noncausal.clone())?;
    Ok((model, mask, manifest))
}

const GENERATE_HINT: &str = "run `generate` first";
const TRAIN_HINT: &str = "run `train-source` first";
const ADAPT_HINT: &str = "run `adapt` first";

fn write_config(cfg: &RunConfig, dir: &RunDir) -> Result<()> {
    write_file(&dir.config(), cfg.to_toml())
}

/// Writes the four domain splits and both style datasets with sidecars.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    write_config(cfg, &dir)?;
    let d = generate_domains(cfg)?;
    let sstyle = source_style_dataset(cfg, &d.source_train)?;
    let tstyle = target_style_dataset(cfg, d.target_train.unlabeled())?;
    let all = [
        (DATASET_NAMES[0], &d.source_train),
        (DATASET_NAMES[1], &d.source_test),
        (DATASET_NAMES[2], &d.target_train),
        (DATASET_NAMES[3], &d.target_test),
        ("style_source", &sstyle),
        ("style_target", &tstyle),
    ];
    let mut written = Vec::new();
    for (name, data) in all {
        let path = dir.dataset(name);
        write_file(&path, data.encode()?)?;
        write_json(&dir.sidecar(name), &sidecar(name, data))?;
        written.push(path);
    }
    Ok(written)
}

/// Vendor training. Writes the checkpoint, its manifest, per-round metrics
/// and (with the style task) the CIS report used for the head mask.
pub fn cmd_train_source(cfg: &RunConfig, method: Method) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    write_config(cfg, &dir)?;
    let source = load_dataset(&dir.dataset("source_train"), GENERATE_HINT)?;
    let style = match method {
        Method::CSFTrans => Some(load_dataset(&dir.dataset("style_source"), GENERATE_HINT)?),
        Method::Shot => None,
    };
    let (model, mask, cis, records) = train_vendor(cfg, method, &source, style.as_ref())?;
    save_model(&dir, "vendor", method, &model, &mask, cfg.seed)?;
    write_jsonl(&dir.stage("vendor", "metrics.jsonl"), &records)?;
    if let Some(cis) = cis {
        write_json(&dir.stage("vendor", "cis_report.json"), &cis)?;
    }
    Ok(records)
}

/// Fits head weights on the trained vendor model and reports CIS and the
/// heads selected under the configured λ and τ.
pub fn cmd_select_heads(cfg: &RunConfig) -> Result<CisReport> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    write_config(cfg, &dir)?;
    let (model, _, _) = load_model(&dir, "vendor", TRAIN_HINT)?;
    let source = load_dataset(&dir.dataset("source_train"), GENERATE_HINT)?;
    let betas = fit_beta(&model, source.images.as_slice(), source.goal_labels()?, &cfg.selection.fit, cfg.seed)?;
    let report = CisReport::build(&betas, cfg.selection.lambda, cfg.selection.tau)?;
    write_json(&dir.stage("heads", "cis_report.json"), &report)?;
    Ok(report)
}

/// Client adaptation of the vendor checkpoint on unlabeled target images.
/// Per-round target accuracy is logged from the held-back test split.
pub fn cmd_adapt(cfg: &RunConfig) -> Result<(Vec<MetricsRecord>, Option<String>)> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    write_config(cfg, &dir)?;
    let (mut model, mask, manifest) = load_model(&dir, "vendor", TRAIN_HINT)?;
    let target = load_dataset(&dir.dataset("target_train"), GENERATE_HINT)?;
    let test = load_dataset(&dir.dataset("target_test"), GENERATE_HINT)?;
    let style = match manifest.method {
        Method::CSFTrans => Some(load_dataset(&dir.dataset("style_target"), GENERATE_HINT)?),
        Method::Shot => None,
    };
    let eval = |m: &ViTModel| accuracy(m, test.images.as_slice(), test.goal_labels()?);
    let (records, halted) =
        adapt_client(cfg, manifest.method, &mut model, &mask, target.unlabeled(), style.as_ref(), Some(&eval))?;
    save_model(&dir, "client", manifest.method, &model, &mask, manifest.seed)?;
    write_jsonl(&dir.stage("client", "metrics.jsonl"), &records)?;
    Ok((records, halted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub source_test_acc: f64,
    pub target_test_acc: f64,
}

/// Accuracy of the vendor and (when present) adapted models on both test
/// splits.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    let source = load_dataset(&dir.dataset("source_test"), GENERATE_HINT)?;
    let target = load_dataset(&dir.dataset("target_test"), GENERATE_HINT)?;
    let mut reports = Vec::new();
    for stage in ["vendor", "client"] {
        if stage == "client" && !dir.stage(stage, "model.json").exists() {
            continue;
        }
        let (model, _, _) = load_model(&dir, stage, TRAIN_HINT)?;
        reports.push(EvalReport {
            model: stage.into(),
            source_test_acc: accuracy(&model, source.images.as_slice(), source.goal_labels()?)?,
            target_test_acc: accuracy(&model, target.images.as_slice(), target.goal_labels()?)?,
        });
    }
    write_json(&dir.root().join("eval.json"), &reports)?;
    Ok(reports)
}

/// Domain gap and correlation report of the adapted model on the test splits.
pub fn cmd_a_distance(cfg: &RunConfig) -> Result<GapReport> {
    cfg.validate()?;
    let dir = RunDir::new(&cfg.out_dir);
    let (model, _, _) = load_model(&dir, "client", ADAPT_HINT)?;
    let images = |a: &str, b: &str| -> Result<Images> {
        concat(&load_dataset(&dir.dataset(a), GENERATE_HINT)?.images, &load_dataset(&dir.dataset(b), GENERATE_HINT)?.images)
    };
    let source = images("source_train", "source_test")?;
    let target = images("target_train", "target_test")?;
    let report = gap_report(cfg, &model, &source, &target)?;
    write_json(&dir.root().join("a_distance.json"), &report)?;
    Ok(report)
}

/// One row of an ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub mean: f64,
    pub stderr: f64,
    pub values: Vec<f64>,
}

fn csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("setting,mean,stderr\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.setting, r.mean, r.stderr).expect("string write");
    }
    out
}

fn row(setting: impl Into<String>, values: Vec<f64>) -> AblationRow {
    let (mean, stderr) = mean_stderr(&values);
    AblationRow { setting: setting.into(), mean, stderr, values }
}

/// Full-method target accuracy after adaptation for each value of a sweep.
pub fn sweep<T: std::fmt::Display + Copy>(
    cfg: &RunConfig,
    values: &[T],
    apply: impl Fn(&mut RunConfig, T),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &v in values {
        let mut accs = Vec::new();
        for &seed in &cfg.ablation.seeds {
            let mut c = cfg.clone().with_seed(seed);
            apply(&mut c, v);
            c.validate()?;
            let domains = generate_domains(&c)?;
            accs.push(run_method(&c, Method::CSFTrans, &domains, false)?.adapted_target_acc);
        }
        rows.push(row(v.to_string(), accs));
    }
    Ok(rows)
}

/// Paired method comparison over the ablation seeds.
pub fn comparison(cfg: &RunConfig) -> Result<(Vec<AblationRow>, Vec<(MethodResult, MethodResult)>)> {
    let mut pairs = Vec::new();
    for &seed in &cfg.ablation.seeds {
        let c = cfg.clone().with_seed(seed);
        let domains = generate_domains(&c)?;
        let full = run_method(&c, Method::CSFTrans, &domains, true)?;
        let base = run_method(&c, Method::Shot, &domains, true)?;
        pairs.push((full, base));
    }
    let col = |f: &dyn Fn(&(MethodResult, MethodResult)) -> f64| pairs.iter().map(f).collect::<Vec<_>>();
    let gap = |r: &MethodResult, f: &dyn Fn(&GapReport) -> f64| r.gaps.as_ref().map_or(f64::NAN, f);
    let rows = vec![
        row("vendor_source_acc/style", col(&|p| p.0.vendor_source_acc)),
        row("vendor_source_acc/no_style", col(&|p| p.1.vendor_source_acc)),
        row("vendor_target_acc/style", col(&|p| p.0.vendor_target_acc)),
        row("vendor_target_acc/no_style", col(&|p| p.1.vendor_target_acc)),
        row("adapted_target_acc/c-sftrans", col(&|p| p.0.adapted_target_acc)),
        row("adapted_target_acc/shot", col(&|p| p.1.adapted_target_acc)),
        row("domain_gap/c-sftrans", col(&|p| gap(&p.0, &|g| g.domain_gap.value))),
        row("domain_gap/shot", col(&|p| gap(&p.1, &|g| g.domain_gap.value))),
        row("correlation_gap/c-sftrans", col(&|p| gap(&p.0, &|g| g.correlation.gap))),
        row("correlation_gap/shot", col(&|p| gap(&p.1, &|g| g.correlation.gap))),
    ];
    Ok((rows, pairs))
}

/// Which ablation tables to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Comparison,
    TaskEpochs,
    Lambda,
    Families,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Comparison, Ablation::TaskEpochs, Ablation::Lambda, Ablation::Families];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Comparison => "comparison",
            Ablation::TaskEpochs => "task_epochs",
            Ablation::Lambda => "lambda",
            Ablation::Families => "families",
        }
    }
}

/// Runs the requested ablations over `cfg.ablation.seeds` and writes one
/// CSV of `(setting, mean, stderr)` per table.
pub fn cmd_ablate(cfg: &RunConfig, which: &[Ablation]) -> Result<Vec<(Ablation, Vec<AblationRow>)>> {
    cfg.validate()?;
    if cfg.ablation.seeds.is_empty() {
        return Err(Error::Config("ablation.seeds is empty".into()));
    }
    let dir = RunDir::new(&cfg.out_dir);
    write_config(cfg, &dir)?;
    let mut tables = Vec::new();
    for &a in which {
        let rows = match a {
            Ablation::Comparison => comparison(cfg)?.0,
            Ablation::TaskEpochs => sweep(cfg, &cfg.ablation.task_epochs, |c, e| {
                c.vendor.task_epochs_per_round = e;
                c.client.task_epochs_per_round = e;
            })?,
            Ablation::Lambda => sweep(cfg, &cfg.ablation.lambdas, |c, l| c.selection.lambda = l)?,
            Ablation::Families => sweep(cfg, &cfg.ablation.families, |c, f| {
                c.data.augment.families = f;
                c.vit.num_styles = f + 1;
            })?,
        };
        write_file(&dir.stage("ablation", &format!("{}.csv", a.name())), csv(&rows))?;
        tables.push((a, rows));
    }
    Ok(tables)
}
