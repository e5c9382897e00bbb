//! Measurements shared by the module tests and the acceptance report. Each
//! returns the measured quantity; callers decide what passes.

use csft::autodiff::Tape;
use csft::head_selection::{draw_permutations, fit_beta, mixed_forward, select_noncausal, BetaWeights, FitBetaConfig};
use csft::optim::Sgd;
use csft::params::ParamId;
use csft::tensor::Tensor;
use csft::training::{diversity_loss, entropy_loss, style_step, task_step_source};
use csft::vit::{HeadMask, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, project, relative_error};

const H: f64 = 1e-5;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), 1.0, &mut rng)
}

fn uniform_images(n: usize, len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * len).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Worst relative finite-difference error per op group.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    let worst = |e: Vec<f64>| e.into_iter().fold(0.0, f64::max);
    let mut out = Vec::new();
    out.push(("matmul", worst(gradcheck(&[randn(&[4, 5], 1), randn(&[5, 3], 2)], H, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 9)
    }))));
    out.push(("add/mul/gelu/sigmoid/scale", worst(gradcheck(&[randn(&[3, 4], 3), randn(&[3, 4], 4)], H, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let m = t.mul(a, v[1]).unwrap();
        let g = t.gelu(m);
        let s = t.sigmoid(g);
        let s = t.scale(s, -1.7);
        project(t, s, 5)
    }))));
    out.push(("layer_norm", worst(gradcheck(&[randn(&[3, 6], 6), randn(&[6], 7), randn(&[6], 8)], H, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
        project(t, y, 10)
    }))));
    out.push(("softmax/log_softmax/mean_rows/xlogx/sum/mean", worst(gradcheck(&[randn(&[3, 5], 11)], H, |t, v| {
        let s = t.softmax_rows(v[0]);
        let l = t.log_softmax_rows(v[0]);
        let m = t.mul(s, l).unwrap();
        let mr = t.mean_rows(s);
        let x = t.xlogx(mr);
        let a = project(t, m, 12);
        let b = t.sum(x);
        let c = t.add(a, b).unwrap();
        let d = t.mean(l);
        t.add(c, d).unwrap()
    }))));
    for smoothing in [0.0, 0.1, 0.3] {
        out.push(("cross_entropy", worst(gradcheck(&[randn(&[4, 5], 13)], H, |t, v| t.cross_entropy(v[0], &[0, 4, 2, 2], smoothing).unwrap()))));
    }
    out.push((
        "gather/concat/bias/tile",
        worst(gradcheck(&[randn(&[4, 3], 14), randn(&[2, 3], 15), randn(&[3], 16), randn(&[4, 2], 17)], H, |t, v| {
            let g = t.gather_rows(v[0], &[3, 0, 0, 2]).unwrap();
            let c = t.concat_rows(&[g, v[1]]).unwrap();
            let b = t.add_row_bias(c, v[2]).unwrap();
            let tiled = t.add_tiled(b, v[1]).unwrap();
            let w = t.concat_cols(&[v[3], v[0]]).unwrap();
            let a = project(t, tiled, 18);
            let bb = project(t, w, 19);
            t.add(a, bb).unwrap()
        })),
    ));
    // two sequences of 3 tokens, 2 heads of width 2
    out.push(("attention", worst(gradcheck(&[randn(&[6, 4], 20), randn(&[6, 4], 21), randn(&[6, 4], 22)], H, |t, v| {
        let o = t.attention(v[0], v[1], v[2], 3, 2).unwrap();
        project(t, o, 23)
    }))));
    out.push(("mix_heads", worst(gradcheck(&[randn(&[3, 4], 24), randn(&[3, 4], 25), randn(&[2], 26)], H, |t, v| {
        let w = t.sigmoid(v[2]);
        let o = t.mix_heads(v[0], v[1], w).unwrap();
        project(t, o, 27)
    }))));
    // x feeds three branches; the backward pass must add all of them
    out.push(("fan-out", worst(gradcheck(&[randn(&[2, 3], 28), randn(&[3, 3], 29)], H, |t, v| {
        let a = t.matmul(v[0], v[1]).unwrap();
        let b = t.mul(v[0], v[0]).unwrap();
        let c = t.add(a, b).unwrap();
        let d = t.add(c, v[0]).unwrap();
        project(t, d, 30)
    }))));
    out
}

pub fn tiny_vit() -> ViTConfig {
    ViTConfig { image_size: 16, patch_size: 8, embed_dim: 8, num_blocks: 2, heads_per_block: 2, mlp_ratio: 2, ..Default::default() }
}

fn block_loss(model: &ViTModel, tokens: &Tensor, block: usize) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, &[]);
    let x = tape.leaf(tokens);
    let y = model.block_forward(&mut tape, &bound, block, x).unwrap();
    let loss = project(&mut tape, y, 99);
    tape.value(loss)[0]
}

/// Worst relative error of a full transformer block's gradient with respect
/// to its input tokens and every parameter it reads.
pub fn block_gradient_errors() -> Vec<(String, f64)> {
    let mut model = ViTModel::new(tiny_vit(), 3).unwrap();
    let cfg = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens = Tensor::randn([2 * cfg.seq_len(), cfg.embed_dim], 1.0, &mut rng).with_requires_grad(true);
    let all: Vec<ParamId> = model.params().ids().collect();
    let mut out = Vec::new();
    for block in 0..cfg.num_blocks {
        let (analytic_x, analytic_p) = {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape, &all);
            let x = tape.leaf(&tokens);
            let y = model.block_forward(&mut tape, &bound, block, x).unwrap();
            let loss = project(&mut tape, y, 99);
            let g = tape.backward(loss).unwrap();
            let gp: Vec<Vec<f64>> = all
                .iter()
                .map(|&id| g.get(bound.var(id)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; model.params().get(id).numel()]))
                .collect();
            (g.get(x).unwrap().to_vec(), gp)
        };
        let mut numeric = vec![0.0; tokens.numel()];
        for j in 0..tokens.numel() {
            let mut plus = tokens.clone();
            plus.data_mut()[j] += H;
            let mut minus = tokens.clone();
            minus.data_mut()[j] -= H;
            numeric[j] = (block_loss(&model, &plus, block) - block_loss(&model, &minus, block)) / (2.0 * H);
        }
        out.push((format!("block {block} input"), relative_error(&analytic_x, &numeric)));
        for (k, &id) in all.iter().enumerate() {
            let n = model.params().get(id).numel();
            let mut numeric = vec![0.0; n];
            for j in 0..n {
                let orig = model.params().get(id).data()[j];
                model.params_mut().get_mut(id).data_mut()[j] = orig + H;
                let up = block_loss(&model, &tokens, block);
                model.params_mut().get_mut(id).data_mut()[j] = orig - H;
                let down = block_loss(&model, &tokens, block);
                model.params_mut().get_mut(id).data_mut()[j] = orig;
                numeric[j] = (up - down) / (2.0 * H);
            }
            out.push((format!("block {block} {}", model.params().name(id)), relative_error(&analytic_p[k], &numeric)));
        }
    }
    out
}

fn bits(model: &ViTModel, ids: &[ParamId]) -> Vec<Vec<u64>> {
    ids.iter().map(|&id| model.params().get(id).data().iter().map(|v| v.to_bits()).collect()).collect()
}

/// Alternates style and goal steps and counts steps that changed any byte of
/// the other group, or failed to move their own group.
pub fn partition_violations(steps: usize) -> (usize, usize) {
    let mut model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 3).unwrap();
    let mut flags = vec![false; 16];
    for i in [1, 4, 6, 9, 10] {
        flags[i] = true;
    }
    let mask = HeadMask::new(4, 4, flags).unwrap();
    let part = model.partition_params(&mask).unwrap();
    let (task, style) = (part.task_group(), part.style_group());
    let mut task_opt = Sgd::new(0.05, 0.9, 1e-4).unwrap();
    let mut style_opt = Sgd::new(0.05, 0.9, 1e-4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut leaked, mut stuck) = (0, 0);
    for step in 0..steps {
        let x = uniform_images(4, 3072, 100 + step as u64);
        let before_task = bits(&model, &task);
        let before_style = bits(&model, &style);
        if step % 2 == 0 {
            let y: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
            style_step(&mut model, &mut style_opt, &mask, &x, &y, 0.0).unwrap();
            leaked += (bits(&model, &task) != before_task) as usize;
            stuck += (bits(&model, &style) == before_style) as usize;
        } else {
            let y: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            task_step_source(&mut model, &mut task_opt, &mask, &x, &y, 0.1).unwrap();
            leaked += (bits(&model, &style) != before_style) as usize;
            stuck += (bits(&model, &task) == before_task) as usize;
        }
    }
    (leaked, stuck)
}

/// Heads whose `β₁ + β₂` is not exactly 1, over random logits and a fitted
/// grid.
pub fn beta_sum_violations() -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut grids: Vec<BetaWeights> = (0..2000)
        .map(|_| {
            let logits = (0..16).map(|_| rng.gen_range(-40.0..40.0) * rng.gen_range(0.0f64..1.0).powi(3)).collect();
            BetaWeights::from_logits(4, 4, logits).unwrap()
        })
        .collect();
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 2).unwrap();
    let x = uniform_images(24, 3072, 3);
    let labels: Vec<usize> = (0..24).map(|i| i % 5).collect();
    grids.push(fit_beta(&model, &x, &labels, &FitBetaConfig { epochs: 2, batch_size: 8, ..Default::default() }, 4).unwrap());
    grids.iter().map(|b| b.beta1().iter().zip(b.beta2()).filter(|(x, y)| *x + y != 1.0).count()).sum()
}

/// Largest deviation between the two-branch forward at `β₁ ≡ 1` and the
/// plain forward.
pub fn clean_endpoint_deviation() -> f64 {
    let model = ViTModel::new(ViTConfig { embed_dim: 16, ..Default::default() }, 5).unwrap();
    let cfg = model.config().clone();
    let x = uniform_images(4, cfg.image_len(), 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let perms = draw_permutations(&mut rng, cfg.num_blocks, 4, cfg.num_patches());
    let clean = BetaWeights::from_logits(4, 4, vec![50.0; 16]).unwrap();
    assert!(clean.beta1().iter().all(|&b| b == 1.0));
    let mixed = mixed_forward(&model, &x, &perms, &clean).unwrap();
    let plain = model.infer(&x).unwrap().goal_logits;
    mixed.data().iter().zip(plain.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Rank of each head by pairwise comparison: how many heads beat it.
fn rank_oracle(cis: &[f64], lambda: f64, tau: f64) -> Option<Vec<bool>> {
    let k = (lambda * cis.len() as f64).round() as usize;
    let flags: Vec<bool> = (0..cis.len())
        .map(|i| {
            let rank = (0..cis.len()).filter(|&j| cis[j] > cis[i] || (cis[j] == cis[i] && j < i)).count();
            rank < k && cis[i] > tau
        })
        .collect();
    flags.iter().any(|&f| f).then_some(flags)
}

/// Selections over random 4×4 grids that disagree with the oracle, and the
/// number of grids containing ties.
pub fn selection_mismatches(grids: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut mismatches, mut tied) = (0, 0);
    for grid in 0..grids {
        let cis: Vec<f64> = if grid % 2 == 0 {
            // coarse values force ties, including across the cut
            (0..16).map(|_| rng.gen_range(-2..=4) as f64 * 0.25).collect()
        } else {
            (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let mut sorted = cis.clone();
        sorted.sort_by(f64::total_cmp);
        tied += sorted.windows(2).any(|w| w[0] == w[1]) as usize;
        let lambda = [0.1, 0.2, 0.3, 0.4, 0.5][grid % 5];
        for tau in [0.0, 0.3] {
            let agree = match (select_noncausal(&cis, 4, 4, lambda, tau), rank_oracle(&cis, lambda, tau)) {
                (Ok(mask), Some(want)) => mask.flags() == &want[..],
                (Err(_), None) => true,
                _ => false,
            };
            mismatches += (!agree) as usize;
        }
    }
    (mismatches, tied)
}

/// Largest deviation of the diversity term from `KL(p̂‖uniform) − log K`,
/// computed independently from softmax probabilities.
pub fn diversity_identity_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (b, k) = (rng.gen_range(1..20), rng.gen_range(2..9));
        let logits = Tensor::new([b, k], (0..b * k).map(|_| rng.gen_range(-6.0..6.0)).collect()).unwrap();
        let mut mean = vec![0.0; k];
        for i in 0..b {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for c in 0..k {
                mean[c] += (row[c] - m).exp() / z / b as f64;
            }
        }
        let kl: f64 = mean.iter().map(|&p| if p > 0.0 { p * (p * k as f64).ln() } else { 0.0 }).sum();
        worst = worst.max((diversity_loss(&logits).unwrap() - (kl - (k as f64).ln())).abs());
    }
    worst
}

/// Largest deviation of entropy and diversity from `+log K` and `−log K`
/// under uniform predictions.
pub fn uniform_loss_error() -> f64 {
    let mut worst: f64 = 0.0;
    for k in [2, 5, 6, 12] {
        let logits = Tensor::new([7, k], vec![0.25; 7 * k]).unwrap();
        worst = worst.max((entropy_loss(&logits).unwrap() - (k as f64).ln()).abs());
        worst = worst.max((diversity_loss(&logits).unwrap() + (k as f64).ln()).abs());
    }
    worst
}
