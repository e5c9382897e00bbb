mod common;

use csft::autodiff::Tape;
use csft::params::ParamId;
use csft::tensor::Tensor;
use csft::vit::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_images(cfg: &ViTConfig, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * cfg.image_len()).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn full_block_matches_finite_differences() {
    let start = std::time::Instant::now();
    for (what, err) in common::checks::block_gradient_errors() {
        assert!(err < 1e-4, "{what}: relative error {err:e}");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn batched_outputs_equal_per_image_outputs() {
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 1).unwrap();
    let cfg = model.config().clone();
    let images = random_images(&cfg, 5, 2);
    let batch = model.infer(&images).unwrap();
    for i in 0..5 {
        let (zc, zn, g, s) = model.forward(&images[i * cfg.image_len()..(i + 1) * cfg.image_len()]).unwrap();
        for (a, b) in [(zc, batch.class_features.row(i)), (zn, batch.style_features.row(i)), (g, batch.goal_logits.row(i)), (s, batch.style_logits.row(i))] {
            assert!(common::relative_error(&a, b) < 1e-12);
        }
    }
}

fn head_oracle(q: &[f64], k: &[f64], v: &[f64], x: &[f64], t: usize, d: usize, dk: usize) -> Vec<f64> {
    let proj = |w: &[f64]| {
        let mut out = vec![0.0; t * dk];
        for r in 0..t {
            for c in 0..dk {
                for i in 0..d {
                    out[r * dk + c] += x[r * d + i] * w[i * dk + c];
                }
            }
        }
        out
    };
    let (qq, kk, vv) = (proj(q), proj(k), proj(v));
    let mut out = vec![0.0; t * dk];
    for r in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|s| (0..dk).map(|c| qq[r * dk + c] * kk[s * dk + c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for s in 0..t {
            for c in 0..dk {
                out[r * dk + c] += e[s] / z * vv[s * dk + c];
            }
        }
    }
    out
}

fn run_head(model: &ViTModel, tokens: &Tensor, block: usize, head: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, &[]);
    let x = tape.leaf(tokens);
    let y = model.head_attention(&mut tape, &bound, block, head, x).unwrap();
    tape.value(y).to_vec()
}

#[test]
fn head_attention_matches_dense_oracle() {
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 4).unwrap();
    let (d, dk) = (16, model.config().head_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let tokens = Tensor::randn([5, d], 1.0, &mut rng);
    for (b, h) in [(0, 0), (1, 3), (3, 2)] {
        let hp = model.layout().blocks[b].heads[h];
        let p = |id| model.params().get(id).data().to_vec();
        let want = head_oracle(&p(hp.query), &p(hp.key), &p(hp.value), tokens.data(), 5, d, dk);
        let got = run_head(&model, &tokens, b, h);
        let diff = want.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "block {b} head {h}: {diff:e}");
    }
}

#[test]
fn single_token_attention_returns_its_value_row() {
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let tokens = Tensor::randn([1, 16], 1.0, &mut rng);
    let hp = model.layout().blocks[0].heads[1];
    let w = model.params().get(hp.value).data();
    let dk = model.config().head_dim();
    let want: Vec<f64> = (0..dk).map(|c| (0..16).map(|i| tokens.data()[i] * w[i * dk + c]).sum()).collect();
    let got = run_head(&model, &tokens, 0, 1);
    assert!(common::relative_error(&want, &got) < 1e-12);
}

#[test]
fn permuted_patches_stay_finite() {
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 6).unwrap();
    let cfg = model.config().clone();
    let image = random_images(&cfg, 1, 7);
    // swap two 8×8 patches in every channel
    let mut swapped = image.clone();
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                let a = c * 1024 + y * 32 + x;
                let b = c * 1024 + (y + 24) * 32 + x + 24;
                swapped.swap(a, b);
            }
        }
    }
    let (zc, _, g, s) = model.forward(&image).unwrap();
    let (zc2, zn2, g2, s2) = model.forward(&swapped).unwrap();
    assert_ne!(zc, zc2);
    assert!(zc2.iter().chain(&zn2).chain(&g2).chain(&s2).all(|v| v.is_finite()));
    assert_eq!((g.len(), s.len()), (cfg.num_classes, cfg.num_styles));
}

proptest! {
    #[test]
    fn every_mask_partitions_the_parameters(flags in proptest::collection::vec(any::<bool>(), 16)) {
        let model = ViTModel::new(ViTConfig { embed_dim: 8, ..Default::default() }, 0).unwrap();
        let mask = HeadMask::new(4, 4, flags.clone()).unwrap();
        let p = model.partition_params(&mask).unwrap();
        let mut all: Vec<ParamId> = p.task_group();
        all.extend(p.style_group());
        all.sort();
        let expected: Vec<ParamId> = model.params().ids().collect();
        prop_assert_eq!(&all, &expected);
        let noncausal = flags.iter().filter(|&&f| f).count();
        prop_assert_eq!(p.noncausal_heads.len(), 4 * noncausal);
        for id in &p.noncausal_heads {
            match model.group_of(*id) {
                ParamGroup::Head { block, head } => prop_assert!(mask.is_noncausal(block, head)),
                g => prop_assert!(false, "unexpected group {:?}", g),
            }
        }
    }
}

#[test]
fn extreme_masks() {
    let model = ViTModel::new(ViTConfig { embed_dim: 8, ..Default::default() }, 0).unwrap();
    let none = model.partition_params(&HeadMask::all(4, 4, false)).unwrap();
    assert!(none.noncausal_heads.is_empty());
    assert_eq!(none.style_group(), none.style_classifier);
    let every = model.partition_params(&HeadMask::all(4, 4, true)).unwrap();
    assert_eq!(every.noncausal_heads.len(), 64);
    assert!(every.causal_backbone.iter().all(|&id| model.group_of(id) == ParamGroup::Backbone));
}
