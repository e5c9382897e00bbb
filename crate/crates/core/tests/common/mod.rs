#![allow(dead_code)]

pub mod checks;

use csft::autodiff::{Tape, Var};
use csft::tensor::Tensor;

/// Central finite-difference oracle, independent of the tape's backward pass.
///
/// `f` builds a scalar from leaves bound to `inputs`. Returns, per input, the
/// relative error ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖).
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> Vec<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    let analytic: Vec<Vec<f64>> = {
        let owned: Vec<Tensor> = inputs.iter().cloned().map(|t| t.with_requires_grad(true)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = owned.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).expect("scalar loss");
        vars.iter()
            .zip(&owned)
            .map(|(v, t)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };
    let eval = |ts: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss)[0]
    };
    let mut errors = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.numel()];
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        errors.push(relative_error(&analytic[i], &numeric));
    }
    errors
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

/// A fixed random linear functional, so that checked outputs reduce to a
/// scalar with nontrivial upstream gradients.
pub fn project(tape: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let n = tape.value(x).len();
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = tape.constant(shape, w).unwrap();
    let p = tape.mul(x, w).unwrap();
    tape.sum(p)
}
