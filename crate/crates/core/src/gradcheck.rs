//! Central finite-difference checks of analytic gradients.

use rand::Rng;

use crate::autograd::Mat;
use crate::params::ParamSet;

/// One probed scalar parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub param: String,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps near-zero gradients
/// from inflating the ratio.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grads` (analytic, aligned with `params`) against central
/// differences of `loss` at `count` randomly chosen scalar entries among the
/// parameters accepted by `filter`. The relative-error floor is `1e-6·max(1, |L|)`:
/// round-off in a central difference grows with the loss value, so entries
/// below that size cannot be resolved at small steps.
pub fn probe_gradients(
    params: &ParamSet,
    grads: &[Mat],
    loss: impl Fn(&ParamSet) -> f64,
    count: usize,
    step: f64,
    filter: impl Fn(&str) -> bool,
    rng: &mut impl Rng,
) -> Vec<Probe> {
    let candidates: Vec<usize> = (0..params.len()).filter(|&i| filter(&params.names()[i]) && !params.values()[i].is_empty()).collect();
    assert!(!candidates.is_empty(), "no parameters selected for gradient check");
    let mut out = Vec::with_capacity(count);
    let floor = 1e-6 * loss(params).abs().max(1.0);
    let mut work = params.clone();
    for _ in 0..count {
        let i = candidates[rng.random_range(0..candidates.len())];
        let (rows, cols) = params.values()[i].dim();
        let idx = (rng.random_range(0..rows), rng.random_range(0..cols));
        let orig = params.values()[i][idx];
        work.values_mut()[i][idx] = orig + step;
        let up = loss(&work);
        work.values_mut()[i][idx] = orig - step;
        let down = loss(&work);
        work.values_mut()[i][idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = grads[i][idx];
        out.push(Probe { param: params.names()[i].clone(), index: idx, analytic, numeric, rel_error: relative_error(analytic, numeric, floor) });
    }
    out
}

pub fn max_rel_error(probes: &[Probe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_gradient_matches() {
        let mut p = ParamSet::default();
        p.insert("w", ndarray::array![[1.0, -2.0], [0.5, 3.0]]);
        let loss = |p: &ParamSet| p.values()[0].iter().map(|x| x * x * x).sum::<f64>();
        let grads = vec![p.values()[0].mapv(|x| 3.0 * x * x)];
        let probes = probe_gradients(&p, &grads, loss, 10, 1e-5, |_| true, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(probes.len(), 10);
        assert!(max_rel_error(&probes) < 1e-8);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut p = ParamSet::default();
        p.insert("w", ndarray::array![[1.0]]);
        let probes = probe_gradients(&p, &[ndarray::array![[5.0]]], |p| p.values()[0][[0, 0]].powi(2), 1, 1e-5, |_| true, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(max_rel_error(&probes) > 0.5);
    }
}
