//! Central-finite-difference verification of reverse-mode gradients.

use rand::{seq::SliceRandom, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences and returns the maximum relative error.
///
/// `build` constructs the loss on a fresh tape from leaf vars mirroring
/// `params`. Every element is checked unless `max_per_tensor` caps the count,
/// in which case a seeded subsample is used.
pub fn grad_check<F>(
    build: &F,
    params: &[Tensor],
    eps: f64,
    max_per_tensor: Option<usize>,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p)).collect();
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).scalar_value();
        if !value.is_finite() {
            return Err(Error::NonFinite("grad_check loss".into()));
        }
        let grads = tape.backward(loss)?;
        let out = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok((value, out))
    };

    let (_, analytic) = eval(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;

    let mut work: Vec<Tensor> = params.to_vec();
    for (ti, p) in params.iter().enumerate() {
        let n = p.numel();
        let mut indices: Vec<usize> = (0..n).collect();
        if let Some(cap) = max_per_tensor {
            if n > cap {
                indices.shuffle(&mut rng);
                indices.truncate(cap);
                indices.sort_unstable();
            }
        }
        for &e in &indices {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let mut tape = Tape::new();
            let vars: Vec<Var> = work.iter().map(|t| tape.leaf(t)).collect();
            let plus = tape.value(build(&mut tape, &vars)?).scalar_value();
            work[ti].data_mut()[e] = orig - eps;
            let mut tape = Tape::new();
            let vars: Vec<Var> = work.iter().map(|t| tape.leaf(t)).collect();
            let minus = tape.value(build(&mut tape, &vars)?).scalar_value();
            work[ti].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("grad_check perturbed loss".into()));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[ti].as_ref().map_or(0.0, |g| g.data()[e]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
