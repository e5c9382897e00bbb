mod common;

use common::checks;
use csft::data::{Dataset, ImageShape, Images};
use csft::optim::Sgd;
use csft::tensor::Tensor;
use csft::training::*;
use csft::vit::{HeadMask, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPE: ImageShape = ImageShape { channels: 3, height: 32, width: 32 };

fn small() -> ViTConfig {
    ViTConfig { embed_dim: 16, ..Default::default() }
}

fn random_images(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * 3072).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn alternating_steps_touch_only_their_groups() {
    assert_eq!(checks::partition_violations(100), (0, 0));
}

#[test]
fn zero_initialised_heads_start_at_uniform_loss() {
    let mut model = ViTModel::new(small(), 5).unwrap();
    for id in model.params().ids().collect::<Vec<_>>() {
        let name = model.params().name(id).to_string();
        if name.starts_with("goal_head") || name.starts_with("style_head") {
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mask = HeadMask::new(4, 4, (0..16).map(|i| i % 3 == 0).collect()).unwrap();
    let x = random_images(8, 6);
    let mut opt = Sgd::new(1e-3, 0.0, 0.0).unwrap();
    let style = style_step(&mut model, &mut opt, &mask, &x, &[0, 1, 2, 3, 4, 5, 0, 1], 0.0).unwrap();
    assert!((style - 6f64.ln()).abs() < 1e-12, "{style}");
    let task = task_step_source(&mut model, &mut opt, &mask, &x, &[0, 1, 2, 3, 4, 0, 1, 2], 0.0).unwrap();
    assert!((task - 5f64.ln()).abs() < 1e-12, "{task}");
}

#[test]
fn diversity_equals_kl_to_uniform_minus_log_k() {
    let err = checks::diversity_identity_error();
    assert!(err < 1e-12, "{err:e}");
}

#[test]
fn uniform_predictions_give_plus_and_minus_log_k() {
    assert!(checks::uniform_loss_error() < 1e-12);
}

#[test]
fn centroids_match_weighted_mean_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let (n, d, k) = (rng.gen_range(2..40), rng.gen_range(1..10), rng.gen_range(2..7));
        let z = Tensor::new([n, d], (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
        let p = probabilities(&Tensor::new([n, k], (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap());
        let got = centroids_from(&z, &p, None).unwrap();
        assert!(got.fallback.is_empty());
        for c in 0..k {
            let w: Vec<f64> = (0..n).map(|i| p.row(i)[c]).collect();
            let total: f64 = w.iter().sum();
            for j in 0..d {
                let want = w.iter().enumerate().map(|(i, wi)| wi * z.row(i)[j]).sum::<f64>() / total;
                assert!((got.centroids.row(c)[j] - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn empty_class_falls_back_to_previous_or_global_mean() {
    let z = Tensor::new([3, 2], vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
    let p = Tensor::new([3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
    let first = centroids_from(&z, &p, None).unwrap();
    assert_eq!(first.fallback, vec![1]);
    assert_eq!(first.centroids.row(1), &[3.0, 2.0]);
    let prev = CentroidSet { centroids: Tensor::new([2, 2], vec![0.0, 0.0, -1.0, 7.0]).unwrap(), fallback: vec![] };
    assert_eq!(centroids_from(&z, &p, Some(&prev)).unwrap().centroids.row(1), &[-1.0, 7.0]);
}

#[test]
fn zero_feature_is_assigned_by_dot_product() {
    let c = CentroidSet { centroids: Tensor::new([2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap(), fallback: vec![] };
    let z = Tensor::new([2, 2], vec![0.0, 0.0, -2.0, 0.1]).unwrap();
    let (labels, flagged) = assign_pseudo_labels(&z, &c).unwrap();
    assert_eq!((labels, flagged), (vec![0, 1], 1));
}

fn toy_source(n: usize, seed: u64) -> Dataset {
    let mut d = csft::domains::sample_domain(&csft::domains::CausalGraphParams { seed, ..Default::default() }, n).unwrap();
    d.latents = None;
    d
}

fn tiny_schedule(rounds: usize) -> TrainSchedule {
    TrainSchedule { rounds, warm_start_epochs: 1, warmup_epochs: 1, task_epochs_per_round: 1, style_max_epochs_per_round: 1, batch_size: 16, ..Default::default() }
}

fn style_data(source: &Dataset) -> StyleData {
    let params = csft::stylization::AugmentParams::default();
    StyleData::split(csft::stylization::build_style_dataset(&source.subset(&(0..10).collect::<Vec<_>>()), &params, 3).unwrap(), 0.2).unwrap()
}

#[test]
fn zero_rounds_are_well_defined() {
    let source = toy_source(32, 9);
    let style = style_data(&source);
    let mut model = ViTModel::new(small(), 1).unwrap();
    let out = vendor_train(&mut model, &source, Some(&style), &tiny_schedule(0), &SelectionConfig::default(), 2).unwrap();
    assert_eq!(out.mask.count_noncausal(), 5);
    assert!(out.records.iter().all(|r| r.round == 0));

    let before = model.params().snapshot(&model.params().ids().collect::<Vec<_>>());
    let target = Images::new(SHAPE, random_images(8, 10)).unwrap();
    let c = client_adapt(&mut model, &out.mask, &target, None, &tiny_schedule(0), 3, None).unwrap();
    assert!(c.records.is_empty() && c.halted.is_none());
    assert_eq!(model.params().snapshot(&model.params().ids().collect::<Vec<_>>()), before);
}

#[test]
fn training_is_deterministic() {
    let source = toy_source(48, 12);
    let style = style_data(&source);
    let target = Images::new(SHAPE, random_images(16, 13)).unwrap();
    let run = || {
        let mut model = ViTModel::new(small(), 4).unwrap();
        let v = vendor_train(&mut model, &source, Some(&style), &tiny_schedule(2), &SelectionConfig::default(), 5).unwrap();
        let c = client_adapt(&mut model, &v.mask, &target, Some(&style), &tiny_schedule(2), 6, None).unwrap();
        let lines: Vec<String> = v.records.iter().chain(&c.records).map(|r| serde_json::to_string(r).unwrap()).collect();
        (lines, model.params().snapshot(&model.params().ids().collect::<Vec<_>>()))
    };
    assert_eq!(run(), run());
}
