use super::{CoefficientValues, Coefficients, JumpAtom, ModelError, TestFunction};

/// Controlled generator applied to a test function:
///
/// `L phi(x) = b0.Dphi + 1/2 a0 : D^2 phi + sum_j lambda_j (phi(x + z_j) - phi(x) - z_j.Dphi 1{|z_j| < 1})`
///
/// with all coefficients evaluated at `(t, x, u)`.
pub fn generator_apply(
    coeffs: &Coefficients,
    phi: &TestFunction,
    t: f64,
    x: &[f64],
    u: &[f64],
) -> Result<f64, ModelError> {
    let mut values = coeffs.values();
    coeffs.eval_into(t, x, u, &mut values)?;
    let mut scratch = GeneratorScratch::new(coeffs.dim());
    let out = generator_with_values(&values, coeffs.jumps(), phi, x, &mut scratch);
    if out.is_finite() {
        Ok(out)
    } else {
        Err(ModelError::Evaluation { t, x: x.to_vec(), u: u.to_vec(), what: "test function derivative" })
    }
}

/// Reusable buffers for [`generator_with_values`].
#[derive(Debug, Clone)]
pub struct GeneratorScratch {
    grad: Vec<f64>,
    hess: Vec<f64>,
    shifted: Vec<f64>,
}

impl GeneratorScratch {
    pub fn new(dim: usize) -> Self {
        Self { grad: vec![0.0; dim], hess: vec![0.0; dim * dim], shifted: vec![0.0; dim] }
    }
}

/// Generator with pre-evaluated coefficients, applied at the point `y`.
///
/// Coefficients and evaluation point are decoupled so that callers may freeze
/// the coefficients at a clamped state while differentiating `phi` at the
/// actual state.
pub fn generator_with_values(
    values: &CoefficientValues,
    jumps: &[JumpAtom],
    phi: &TestFunction,
    y: &[f64],
    scratch: &mut GeneratorScratch,
) -> f64 {
    if phi.is_constant() {
        return 0.0;
    }
    let d = y.len();
    phi.gradient(y, &mut scratch.grad);
    phi.hessian(y, &mut scratch.hess);
    let mut acc = 0.0;
    for i in 0..d {
        acc += values.drift[i] * scratch.grad[i];
    }
    let mut diff = 0.0;
    for i in 0..d * d {
        diff += values.diffusion[i] * scratch.hess[i];
    }
    acc += 0.5 * diff;
    if !jumps.is_empty() {
        let base = phi.value(y);
        for (rate, jump) in values.rates.iter().zip(jumps) {
            if *rate == 0.0 {
                continue;
            }
            for ((s, yi), zi) in scratch.shifted.iter_mut().zip(y).zip(&jump.displacement) {
                *s = yi + zi;
            }
            let mut term = phi.value(&scratch.shifted) - base;
            if jump.is_compensated() {
                term -= jump
                    .displacement
                    .iter()
                    .zip(&scratch.grad)
                    .map(|(z, g)| z * g)
                    .sum::<f64>();
            }
            acc += rate * term;
        }
    }
    acc
}
