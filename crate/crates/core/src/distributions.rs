//! Diagonal Gaussians, the Gamma prior on precisions and the log-prior over
//! global adapter outputs.

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Lower bound on every standard deviation handed to a log or a division.
pub const SCALE_FLOOR: f64 = 1e-8;

/// Gaussian with independent coordinates, described by mean and standard
/// deviation arrays of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mean: Tensor,
    scale: Tensor,
}

impl DiagonalGaussian {
    pub fn new(mean: Tensor, scale: Tensor) -> Result<Self> {
        if mean.shape() != scale.shape() {
            return Err(Error::dim("DiagonalGaussian", mean.shape(), scale.shape()));
        }
        if let Some(s) = scale.data().iter().find(|&&s| !(s >= SCALE_FLOOR)) {
            return Err(Error::Domain {
                op: "DiagonalGaussian",
                detail: format!("scale {s} below floor {SCALE_FLOOR}"),
            });
        }
        Ok(Self { mean, scale })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn scale(&self) -> &Tensor {
        &self.scale
    }

    /// Records both arrays on `tape` as differentiable leaves.
    pub fn bind(&self, tape: &mut Tape) -> GaussianVars {
        GaussianVars {
            mean: tape.leaf(self.mean.clone()),
            scale: tape.leaf(self.scale.clone()),
        }
    }

    /// Closed-form `KL(self || other)`.
    pub fn kl(&self, other: &DiagonalGaussian) -> Result<f64> {
        let mut tape = Tape::new();
        let q = self.bind(&mut tape);
        let p = other.bind(&mut tape);
        let kl = kl_diag_gaussian(&mut tape, q, p)?;
        Ok(tape.scalar(kl))
    }
}

/// A diagonal Gaussian whose mean and scale are tape values.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub scale: Var,
}

/// `Σ [ ln(σp/σq) + (σq² + (μq − μp)²) / (2σp²) − ½ ]`
pub fn kl_diag_gaussian(tape: &mut Tape, q: GaussianVars, p: GaussianVars) -> Result<Var> {
    let shapes = [q.mean, q.scale, p.mean, p.scale].map(|v| tape.shape(v).to_vec());
    if shapes.iter().any(|s| s != &shapes[0]) {
        return Err(Error::dim("kl_diag_gaussian", &shapes[0], &shapes[2]));
    }
    let log_sp = tape.log(p.scale)?;
    let log_sq = tape.log(q.scale)?;
    let log_ratio = tape.sub(log_sp, log_sq)?;
    let var_q = tape.square(q.scale);
    let diff = tape.sub(q.mean, p.mean)?;
    let diff_sq = tape.square(diff);
    let num = tape.add(var_q, diff_sq)?;
    let var_p = tape.square(p.scale);
    let two_var_p = tape.scale(var_p, 2.0);
    let frac = tape.div(num, two_var_p)?;
    let per_elem = tape.add(log_ratio, frac)?;
    let per_elem = tape.add_scalar(per_elem, -0.5);
    Ok(tape.sum(per_elem))
}

/// Pathwise sample `mean + scale ⊙ noise`; `noise` should be a constant.
pub fn reparam_sample(tape: &mut Tape, d: GaussianVars, noise: Var) -> Result<Var> {
    if tape.shape(noise) != tape.shape(d.mean) {
        return Err(Error::dim(
            "reparam_sample",
            tape.shape(d.mean),
            tape.shape(noise),
        ));
    }
    let spread = tape.mul(d.scale, noise)?;
    tape.add(d.mean, spread)
}

/// Shape/rate parameters of a Gamma density.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaPrior {
    a0: f64,
    b0: f64,
}

impl GammaPrior {
    pub fn new(a0: f64, b0: f64) -> Result<Self> {
        if !(a0 > 0.0 && b0 > 0.0) {
            return Err(Error::Config(format!(
                "gamma prior needs a0 > 0 and b0 > 0, got a0={a0} b0={b0}"
            )));
        }
        Ok(Self { a0, b0 })
    }

    pub fn a0(&self) -> f64 {
        self.a0
    }

    pub fn b0(&self) -> f64 {
        self.b0
    }

    /// Log density at a single positive point.
    pub fn log_density(&self, x: f64) -> f64 {
        let shape_term = if self.a0 == 1.0 { 0.0 } else { (self.a0 - 1.0) * x.ln() };
        self.a0 * self.b0.ln() - log_gamma_fn(self.a0) + shape_term - self.b0 * x
    }
}

/// `ln Γ(a)`, exact where it vanishes.
fn log_gamma_fn(a: f64) -> f64 {
    if a == 1.0 || a == 2.0 {
        0.0
    } else {
        ln_gamma(a)
    }
}

/// `Σ [ a0·ln b0 − lnΓ(a0) + (a0−1)·ln x − b0·x ]` over the elements of `x`.
pub fn gamma_log_density(tape: &mut Tape, x: Var, prior: GammaPrior) -> Result<Var> {
    if let Some(v) = tape.value(x).data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "gamma_log_density",
            detail: format!("non-positive argument {v}"),
        });
    }
    let n = tape.value(x).numel() as f64;
    let norm = prior.a0 * prior.b0.ln() - log_gamma_fn(prior.a0);
    let lin = tape.scale(x, -prior.b0);
    let total = if prior.a0 != 1.0 {
        let lx = tape.log(x)?;
        let shape_term = tape.scale(lx, prior.a0 - 1.0);
        tape.add(shape_term, lin)?
    } else {
        lin
    };
    let s = tape.sum(total);
    Ok(tape.add_scalar(s, n * norm))
}

/// `log p(μ, σ) = Σ[−½ ln(2πc²) − μ²/(2c²)] + Σ log Gamma(1/σ²; a0, b0)`,
/// with `c` read as the standard deviation of the zero-centred Gaussian.
pub fn log_prior_theta(
    tape: &mut Tape,
    mu: Var,
    sigma: Var,
    c: f64,
    prior: GammaPrior,
) -> Result<Var> {
    if !(c > 0.0) {
        return Err(Error::Config(format!("prior spread c must be positive, got {c}")));
    }
    let n = tape.value(mu).numel() as f64;
    let sq = tape.square(mu);
    let ssq = tape.sum(sq);
    let quad = tape.scale(ssq, -1.0 / (2.0 * c * c));
    let gauss = tape.add_scalar(quad, -0.5 * n * (2.0 * std::f64::consts::PI * c * c).ln());
    let var = tape.square(sigma);
    let one = tape.constant(Tensor::scalar(1.0));
    let precision = tape.div(one, var)?;
    let gamma = gamma_log_density(tape, precision, prior)?;
    tape.add(gauss, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(mean: &[f64], scale: &[f64]) -> DiagonalGaussian {
        DiagonalGaussian::new(Tensor::vector(mean.to_vec()), Tensor::vector(scale.to_vec()))
            .unwrap()
    }

    #[test]
    fn kl_of_identical_is_zero() {
        let q = gauss(&[0.3, -1.0, 2.0], &[0.5, 1.5, 0.01]);
        assert!(q.kl(&q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_shift() {
        let q = gauss(&[1.0], &[1.0]);
        let p = gauss(&[0.0], &[1.0]);
        assert!((q.kl(&p).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_shape_mismatch() {
        let mut t = Tape::new();
        let q = gauss(&[1.0, 2.0], &[1.0, 1.0]).bind(&mut t);
        let p = gauss(&[1.0], &[1.0]).bind(&mut t);
        assert!(matches!(kl_diag_gaussian(&mut t, q, p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn scale_floor_enforced() {
        let r = DiagonalGaussian::new(Tensor::vector(vec![0.0]), Tensor::vector(vec![1e-9]));
        assert!(r.is_err());
    }

    #[test]
    fn reparam_cases() {
        let mut t = Tape::new();
        let d = gauss(&[0.0, 1.5], &[2.0, 3.0]).bind(&mut t);
        let zero = t.constant(Tensor::zeros(&[2]));
        let s = reparam_sample(&mut t, d, zero).unwrap();
        assert_eq!(t.value(s).data(), &[0.0, 1.5]);
        let one = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let s = reparam_sample(&mut t, d, one).unwrap();
        assert_eq!(t.value(s).data()[0], 2.0);
        let bad = t.constant(Tensor::zeros(&[3]));
        assert!(reparam_sample(&mut t, d, bad).is_err());
    }

    #[test]
    fn reparam_gradient_reaches_mean_and_scale() {
        let mut t = Tape::new();
        let d = gauss(&[0.0], &[2.0]).bind(&mut t);
        let noise = t.constant(Tensor::vector(vec![0.7]));
        let s = reparam_sample(&mut t, d, noise).unwrap();
        let l = t.sum(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(d.mean).unwrap(), &[1.0]);
        assert_eq!(g.get(d.scale).unwrap(), &[0.7]);
        assert!(g.get(noise).is_none());
    }

    #[test]
    fn gamma_closed_forms() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(1.0));
        let paper = GammaPrior::new(1.0, 0.01).unwrap();
        let v = gamma_log_density(&mut t, x, paper).unwrap();
        assert!((t.scalar(v) - (0.01f64.ln() - 0.01)).abs() < 1e-14);
        assert!((t.scalar(v) - -4.6152).abs() < 1e-4);
        let v = gamma_log_density(&mut t, x, GammaPrior::new(2.0, 1.0).unwrap()).unwrap();
        assert!((t.scalar(v) + 1.0).abs() < 1e-14);
        let bad = t.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(gamma_log_density(&mut t, bad, paper).is_err());
        assert!(GammaPrior::new(0.0, 1.0).is_err());
    }

    #[test]
    fn log_prior_single_element() {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::scalar(0.0));
        let sigma = t.constant(Tensor::scalar(1.0));
        let prior = GammaPrior::new(1.0, 0.01).unwrap();
        let lp = log_prior_theta(&mut t, mu, sigma, 1.0, prior).unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI).ln() + 0.01f64.ln() - 0.01;
        assert!((t.scalar(lp) - expected).abs() < 1e-14);
        assert!((t.scalar(lp) - -5.534).abs() < 1e-3);
        let g = t.backward(lp).unwrap();
        assert_eq!(g.get(mu).unwrap(), &[0.0]);
    }

    #[test]
    fn zero_mean_prior_is_normalizer() {
        let mut t = Tape::new();
        let c: f64 = 0.3;
        let mu = t.constant(Tensor::zeros(&[4]));
        let sigma = t.constant(Tensor::full(&[4], 2.0));
        let prior = GammaPrior::new(2.0, 1.0).unwrap();
        let lp = log_prior_theta(&mut t, mu, sigma, c, prior).unwrap();
        let x = t.constant(Tensor::full(&[4], 0.25));
        let gamma = gamma_log_density(&mut t, x, prior).unwrap();
        let gauss = t.scalar(lp) - t.scalar(gamma);
        let expected = -0.5 * 4.0 * (2.0 * std::f64::consts::PI * c * c).ln();
        assert!((gauss - expected).abs() < 1e-12);
    }
}
