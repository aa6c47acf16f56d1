//! Scalar distributions used by the environments and the sampling measure.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Beta draw as `G_a / (G_a + G_b)` with Marsaglia–Tsang gamma variates.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let ga = Gamma::new(a, 1.0).expect("beta shape a must be positive").sample(rng);
    let gb = Gamma::new(b, 1.0).expect("beta shape b must be positive").sample(rng);
    let s = ga + gb;
    if s > 0.0 {
        (ga / s).clamp(0.0, 1.0)
    } else {
        // both gammas underflowed; only possible for tiny shapes
        if a >= b {
            1.0
        } else {
            0.0
        }
    }
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= 1.0 {
        1.0
    } else {
        beta_reg(a, b, x)
    }
}

/// Inverse of [`beta_cdf`] by bisection; accurate to ~1e-14 in `x`.
pub fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta_cdf(mid, a, b) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Quantile of the location-scale Student-t distribution.
///
/// Two degrees of freedom has the closed form `(2p - 1) / sqrt(2p(1 - p))`.
pub fn student_t_quantile(p: f64, loc: f64, scale: f64, dof: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::input(format!("quantile level {p} outside (0, 1)")));
    }
    let z = if dof == 2.0 {
        (2.0 * p - 1.0) / (2.0 * p * (1.0 - p)).sqrt()
    } else {
        StudentsT::new(0.0, 1.0, dof)
            .map_err(|e| Error::input(format!("student-t: {e}")))?
            .inverse_cdf(p)
    };
    Ok(loc + scale * z)
}

pub fn sample_student_t<R: Rng + ?Sized>(loc: f64, scale: f64, dof: f64, rng: &mut R) -> f64 {
    // t = Z / sqrt(V / dof) with V ~ chi^2(dof) = Gamma(dof / 2, 2)
    let z: f64 = StandardNormal.sample(rng);
    let v = Gamma::new(0.5 * dof, 2.0).expect("dof must be positive").sample(rng);
    loc + scale * z / (v / dof).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_quantile_inverts_cdf() {
        for &(a, b) in &[(2.0, 2.0), (1.0, 5.0), (1.2, 2.0), (0.7, 0.9)] {
            for i in 1..20 {
                let p = i as f64 / 20.0;
                let x = beta_quantile(p, a, b);
                assert!((beta_cdf(x, a, b) - p).abs() < 1e-10);
            }
        }
        // Beta(1, 5): F(x) = 1 - (1 - x)^5
        let x = beta_quantile(0.5, 1.0, 5.0);
        assert!((x - (1.0 - 0.5f64.powf(0.2))).abs() < 1e-12);
    }

    #[test]
    fn student_t_dof2_closed_form_matches_general_routine() {
        for i in 1..10 {
            let p = i as f64 / 10.0;
            let closed = student_t_quantile(p, 0.0, 1.0, 2.0).unwrap();
            let general = StudentsT::new(0.0, 1.0, 2.0).unwrap().inverse_cdf(p);
            assert!((closed - general).abs() < 1e-6, "p={p}: {closed} vs {general}");
        }
    }

    #[test]
    fn beta_sampler_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b) = (1.2, 2.0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(a, b, &mut rng)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        let m = a / (a + b);
        let v = a * b / ((a + b).powi(2) * (a + b + 1.0));
        assert!((mean - m).abs() < 3e-3);
        assert!((var - v).abs() < 2e-3);
        assert!(xs.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
