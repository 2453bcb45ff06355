//! Weibull kernel: density-shaped influence function with analytic integral
//! and analytic parameter gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower floor applied to kernel parameters mapped through softplus.
pub const KERNEL_FLOOR: f64 = 1e-3;
/// Lower floor for base rates (top rates, virtual/variational base rates).
pub const RATE_FLOOR: f64 = 1e-8;

/// Weibull kernel `phi(x) = p * (k/lam) * (x/lam)^(k-1) * exp(-(x/lam)^k)`
/// for `x > 0`, zero otherwise. `p` is the total mass (expected children).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeibullKernel {
    pub p: f64,
    pub k_shape: f64,
    pub lam: f64,
}

impl WeibullKernel {
    pub fn new(p: f64, k_shape: f64, lam: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(p) || p == 0.0) || !ok(k_shape) || !ok(lam) {
            return Err(Error::InvalidParameter(format!(
                "weibull kernel needs p >= 0, k_shape > 0, lam > 0; got p={p}, k={k_shape}, lam={lam}"
            )));
        }
        Ok(Self { p, k_shape, lam })
    }

    /// Kernel value at `x`. Zero for `x <= 0`, except that `x == 0` with
    /// shape < 1 is the singular point and is a reportable error.
    pub fn eval(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            if x == 0.0 && self.k_shape < 1.0 {
                return Err(Error::EvalAtSingularity { shape: self.k_shape });
            }
            return Ok(0.0);
        }
        let r = x / self.lam;
        let u = r.powf(self.k_shape);
        Ok(self.p * (self.k_shape / self.lam) * r.powf(self.k_shape - 1.0) * (-u).exp())
    }

    /// Exact integral of the kernel over `[a, b]`, treating the integrand as
    /// zero below 0. Closed form, no quadrature.
    pub fn integral(&self, a: f64, b: f64) -> Result<f64> {
        if a > b {
            return Err(Error::ReversedBounds { a, b });
        }
        let lo = a.max(0.0);
        let hi = b.max(0.0);
        Ok(self.p * (self.tail(lo) - self.tail(hi)))
    }

    /// exp(-(x/lam)^k) for x >= 0; survival of the unit-mass Weibull.
    fn tail(&self, x: f64) -> f64 {
        if x == f64::INFINITY {
            return 0.0;
        }
        (-(x / self.lam).powf(self.k_shape)).exp()
    }

    /// Analytic partials of `eval(x)` w.r.t. (p, k_shape, lam). Zero for x <= 0.
    pub fn eval_grads(&self, x: f64) -> Result<[f64; 3]> {
        if x <= 0.0 {
            if x == 0.0 && self.k_shape < 1.0 {
                return Err(Error::EvalAtSingularity { shape: self.k_shape });
            }
            return Ok([0.0; 3]);
        }
        let phi = self.eval(x)?;
        let r = x / self.lam;
        let u = r.powf(self.k_shape);
        let d_p = if self.p > 0.0 {
            phi / self.p
        } else {
            // p = 0 makes phi = 0; the derivative is the unit-mass density.
            (self.k_shape / self.lam) * r.powf(self.k_shape - 1.0) * (-u).exp()
        };
        let d_k = phi * (1.0 / self.k_shape + r.ln() * (1.0 - u));
        let d_lam = phi * self.k_shape * (u - 1.0) / self.lam;
        Ok([d_p, d_k, d_lam])
    }

    /// Analytic partials of `integral(0, x)` w.r.t. (p, k_shape, lam).
    /// Zero for x <= 0 (flat region).
    pub fn integral_grads(&self, x: f64) -> [f64; 3] {
        if x <= 0.0 {
            return [0.0; 3];
        }
        let r = x / self.lam;
        let (u, lnr) = if x == f64::INFINITY {
            (f64::INFINITY, f64::INFINITY)
        } else {
            (r.powf(self.k_shape), r.ln())
        };
        let e = (-u).exp();
        let d_p = 1.0 - e;
        // u * exp(-u) -> 0 at both ends; guard the inf * 0 case.
        let ue = if e == 0.0 { 0.0 } else { u * e };
        let d_k = self.p * ue * lnr;
        let d_lam = -self.p * ue * self.k_shape / self.lam;
        [d_p, if d_k.is_nan() { 0.0 } else { d_k }, d_lam]
    }

    /// Partials of `integral(a, b)` w.r.t. (p, k_shape, lam).
    pub fn integral_grads_between(&self, a: f64, b: f64) -> Result<[f64; 3]> {
        if a > b {
            return Err(Error::ReversedBounds { a, b });
        }
        let gb = self.integral_grads(b);
        let ga = self.integral_grads(a);
        Ok([gb[0] - ga[0], gb[1] - ga[1], gb[2] - ga[2]])
    }
}

/// Numerically stable softplus, `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus; input must be > 0.
pub fn softplus_inv(y: f64) -> f64 {
    // ln(e^y - 1), rewritten for stability at large y.
    y + (-(-y).exp()).ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Map an unconstrained triple to a valid kernel via softplus + floor.
pub fn kernel_from_raw(raw: [f64; 3]) -> WeibullKernel {
    WeibullKernel {
        p: softplus(raw[0]) + KERNEL_FLOOR,
        k_shape: softplus(raw[1]) + KERNEL_FLOOR,
        lam: softplus(raw[2]) + KERNEL_FLOOR,
    }
}

/// Unconstrained triple reproducing `kernel` through `kernel_from_raw`.
pub fn kernel_to_raw(kernel: &WeibullKernel) -> [f64; 3] {
    [
        softplus_inv((kernel.p - KERNEL_FLOOR).max(1e-12)),
        softplus_inv((kernel.k_shape - KERNEL_FLOOR).max(1e-12)),
        softplus_inv((kernel.lam - KERNEL_FLOOR).max(1e-12)),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_below_support() {
        let k = WeibullKernel::new(1.0, 1.0, 2.0).unwrap();
        assert_eq!(k.eval(-1.0).unwrap(), 0.0);
        assert_eq!(k.eval(0.0).unwrap(), 0.0);
    }

    #[test]
    fn exponential_case_closed_form() {
        // p=1, k=1, lam=2 at x=2: 0.5 * e^-1
        let k = WeibullKernel::new(1.0, 1.0, 2.0).unwrap();
        let v = k.eval(2.0).unwrap();
        assert!((v - 0.5 * (-1.0f64).exp()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn singularity_at_zero_for_small_shape() {
        let k = WeibullKernel::new(1.0, 0.5, 1.0).unwrap();
        assert!(matches!(k.eval(0.0), Err(Error::EvalAtSingularity { .. })));
        assert_eq!(k.eval(-0.1).unwrap(), 0.0);
    }

    #[test]
    fn total_mass_is_p() {
        let k = WeibullKernel::new(0.7, 3.3, 0.4).unwrap();
        let m = k.integral(0.0, f64::INFINITY).unwrap();
        assert!((m - 0.7).abs() < 1e-14);
        let k2 = WeibullKernel::new(2.0, 0.9, 5.0).unwrap();
        assert!((k2.integral(0.0, f64::INFINITY).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn integral_below_support_is_zero() {
        let k = WeibullKernel::new(1.3, 2.0, 1.0).unwrap();
        assert_eq!(k.integral(-5.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn integral_closed_form() {
        let k = WeibullKernel::new(1.0, 1.0, 2.0).unwrap();
        let v = k.integral(0.0, 2.0).unwrap();
        assert!((v - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn reversed_bounds_error() {
        let k = WeibullKernel::new(1.0, 1.0, 1.0).unwrap();
        assert!(matches!(k.integral(2.0, 1.0), Err(Error::ReversedBounds { .. })));
    }

    #[test]
    fn grad_p_is_linear() {
        let k = WeibullKernel::new(0.8, 1.5, 2.0).unwrap();
        let g = k.eval_grads(1.0).unwrap();
        assert!((g[0] - k.eval(1.0).unwrap() / 0.8).abs() < 1e-12);
    }

    #[test]
    fn total_mass_grad_independent_of_scale() {
        let k = WeibullKernel::new(1.7, 2.0, 3.0).unwrap();
        let g = k.integral_grads(f64::INFINITY);
        assert_eq!(g[2], 0.0);
        assert_eq!(g[1], 0.0);
        assert!((g[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn grads_match_finite_differences() {
        let kern = WeibullKernel::new(1.0, 1.5, 2.0).unwrap();
        let x = 1.0;
        let g_eval = kern.eval_grads(x).unwrap();
        let g_int = kern.integral_grads(x);
        let params = [kern.p, kern.k_shape, kern.lam];
        for d in 0..3 {
            let h = 1e-5 * params[d].max(1.0);
            let mut up = params;
            let mut dn = params;
            up[d] += h;
            dn[d] -= h;
            let ku = WeibullKernel::new(up[0], up[1], up[2]).unwrap();
            let kd = WeibullKernel::new(dn[0], dn[1], dn[2]).unwrap();
            let fd_eval = (ku.eval(x).unwrap() - kd.eval(x).unwrap()) / (2.0 * h);
            let fd_int = (ku.integral(0.0, x).unwrap() - kd.integral(0.0, x).unwrap()) / (2.0 * h);
            assert!(
                (g_eval[d] - fd_eval).abs() / fd_eval.abs().max(1e-9) < 1e-6,
                "eval partial {d}: {} vs fd {}",
                g_eval[d],
                fd_eval
            );
            assert!(
                (g_int[d] - fd_int).abs() / fd_int.abs().max(1e-9) < 1e-6,
                "integral partial {d}: {} vs fd {}",
                g_int[d],
                fd_int
            );
        }
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-3, 0.5, 1.0, 20.0, 700.0] {
            let x = softplus_inv(y);
            assert!((softplus(x) - y).abs() / y < 1e-9, "{y}");
        }
    }
}
