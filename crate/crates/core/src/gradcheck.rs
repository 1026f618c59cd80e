//! Central finite-difference checks for the hand-derived gradients.

use alloc::vec::Vec;

use crate::policy::{Gradient, PolicyParams};
use crate::Result;

/// Central-difference estimate of the gradient of `f` at `params`, one
/// coordinate at a time with step `h`.
pub fn central_difference<F>(params: &PolicyParams, h: f64, f: F) -> Result<Gradient>
where
    F: Fn(&PolicyParams) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.as_flat().len());
    for j in 0..params.as_flat().len() {
        let x = params.as_flat()[j];
        probe.as_flat_mut()[j] = x + h;
        let up = f(&probe)?;
        probe.as_flat_mut()[j] = x - h;
        let down = f(&probe)?;
        probe.as_flat_mut()[j] = x;
        out.push((up - down) / (2.0 * h));
    }
    Ok(Gradient::from_flat(out))
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &Gradient, b: &Gradient) -> f64 {
    let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let diff: f64 = a.as_flat().iter().zip(b.as_flat()).map(|(x, y)| (x - y) * (x - y)).sum();
    let scale = libm::sqrt(sq(a.as_flat())).max(libm::sqrt(sq(b.as_flat())));
    if scale == 0.0 {
        libm::sqrt(diff)
    } else {
        libm::sqrt(diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{forward, grad_entropy, grad_logprob, init_params, Action, PolicyArch, SchedulerState};
    use crate::rng::SplitMix64;
    use alloc::vec;

    fn instance(seed: u64) -> (PolicyParams, SchedulerState) {
        let mut rng = SplitMix64::new(seed);
        let d = 3 + rng.below(4) as usize;
        let hidden = (0..1 + rng.below(3)).map(|_| 2 + rng.below(6) as usize).collect();
        let arch = PolicyArch::new(d).with_hidden(hidden);
        let mut p = init_params(&arch, seed).unwrap();
        for v in p.as_flat_mut() {
            *v += 0.3 * rng.gaussian();
        }
        let s = SchedulerState {
            deviation: (0..d).map(|_| 5.0 * rng.gaussian()).collect(),
            kar: rng.next_f64(),
            lkd: rng.below(200) as u32,
        };
        (p, s)
    }

    #[test]
    fn logprob_and_entropy_match_finite_differences() {
        for seed in 0..12 {
            let (p, s) = instance(seed);
            for a in [Action::NonKey, Action::Key] {
                let g = grad_logprob(&p, &s, a).unwrap();
                let n = central_difference(&p, 1e-5, |q| Ok(forward(q, &s)?.log_prob(a))).unwrap();
                assert!(relative_error(&g, &n) <= 1e-4, "seed {seed} {a:?}: {}", relative_error(&g, &n));
            }
            let g = grad_entropy(&p, &s).unwrap();
            let n = central_difference(&p, 1e-5, |q| Ok(forward(q, &s)?.entropy())).unwrap();
            assert!(relative_error(&g, &n) <= 1e-4, "seed {seed} entropy: {}", relative_error(&g, &n));
        }
    }

    #[test]
    fn relative_error_edge_cases() {
        let z = Gradient::from_flat(vec![0.0, 0.0]);
        assert_eq!(relative_error(&z, &z), 0.0);
        let a = Gradient::from_flat(vec![1.0, 0.0]);
        let b = Gradient::from_flat(vec![1.0, 1.0]);
        assert!((relative_error(&a, &b) - 1.0 / libm::sqrt(2.0)).abs() < 1e-15);
    }
}
