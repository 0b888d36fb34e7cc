//! Central-difference gradient checking.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::NumericsError;

/// Floor used in the relative-error denominator so checks near zero gradients
/// stay meaningful.
const DENOM_FLOOR: f64 = 1e-8;

/// Compares an analytic gradient against central finite differences.
///
/// `f` evaluates the scalar objective (in f64) at a given parameter vector.
/// Up to `max_coords` coordinates are sampled without replacement using
/// `seed`; for each sampled coordinate `i` the difference quotient
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / delta` is formed, where `delta` is the
/// *actual* f32 spacing between the two perturbed values of `params[i]` (the
/// nominal `2·eps` is not used, because f32 quantization can shrink it).
///
/// Returns the normwise relative error
/// `max_i |fd_i - g_i| / max(max_i |g_i|, max_i |fd_i|, 1e-8)`
/// over the sampled coordinates.
// `!(eps > 0.0)` rather than `eps <= 0.0`: the negation also rejects NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn finite_diff_check(
    f: &mut dyn FnMut(&[f32]) -> f64,
    params: &[f32],
    analytic: &[f32],
    eps: f32,
    max_coords: usize,
    seed: u64,
) -> Result<f64, NumericsError> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(NumericsError::arg(
            "finite_diff_check",
            format!("step size must be positive and finite, got {eps}"),
        ));
    }
    if params.is_empty() {
        return Err(NumericsError::arg("finite_diff_check", "empty parameter vector"));
    }
    if params.len() != analytic.len() {
        return Err(NumericsError::shape(
            "finite_diff_check",
            format!("{} parameters but {} gradient entries", params.len(), analytic.len()),
        ));
    }
    if max_coords == 0 {
        return Err(NumericsError::arg("finite_diff_check", "max_coords must be at least 1"));
    }

    let coords: Vec<usize> = if max_coords >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, params.len(), max_coords).into_vec()
    };

    let mut work = params.to_vec();
    let mut max_abs_diff = 0.0f64;
    let mut max_abs_grad = 0.0f64;
    let mut max_abs_fd = 0.0f64;
    for &i in &coords {
        let base = params[i];
        let hi = base + eps;
        let lo = base - eps;
        let delta = hi as f64 - lo as f64;
        if delta == 0.0 {
            return Err(NumericsError::arg(
                "finite_diff_check",
                format!("step {eps} vanishes against parameter {i} (value {base})"),
            ));
        }
        work[i] = hi;
        let f_hi = f(&work);
        work[i] = lo;
        let f_lo = f(&work);
        work[i] = base;
        let fd = (f_hi - f_lo) / delta;
        let g = analytic[i] as f64;
        max_abs_diff = max_abs_diff.max((fd - g).abs());
        max_abs_grad = max_abs_grad.max(g.abs());
        max_abs_fd = max_abs_fd.max(fd.abs());
    }
    Ok(max_abs_diff / max_abs_grad.max(max_abs_fd).max(DENOM_FLOOR))
}
