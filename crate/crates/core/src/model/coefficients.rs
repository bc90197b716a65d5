use std::fmt;
use std::sync::Arc;

use super::ModelError;

/// `(t, x, u, out)` writing a vector of length `d`.
pub type VectorFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, u, out)` writing a row-major `d x d` matrix.
pub type MatrixFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
/// `(t, x, u) -> value`.
pub type ScalarFn = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;

/// One atom `lambda(t, x, u) * delta_z` of the jump kernel.
#[derive(Clone)]
pub struct JumpAtom {
    pub rate: Arc<ScalarFn>,
    pub displacement: Vec<f64>,
}

impl JumpAtom {
    pub fn size(&self) -> f64 {
        self.displacement.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Small jumps (`|z| < 1`) are compensated in the generator.
    pub fn is_compensated(&self) -> bool {
        self.size() < 1.0
    }
}

/// Drift `b0`, diffusion `a0` and atomic jump kernel `sum_j lambda_j delta_{z_j}`.
#[derive(Clone)]
pub struct Coefficients {
    dim: usize,
    drift: Arc<VectorFn>,
    diffusion: Arc<MatrixFn>,
    jumps: Vec<JumpAtom>,
    time_homogeneous: bool,
}

impl fmt::Debug for Coefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Coefficients")
            .field("dim", &self.dim)
            .field("jumps", &self.jumps.iter().map(|j| &j.displacement).collect::<Vec<_>>())
            .field("time_homogeneous", &self.time_homogeneous)
            .finish()
    }
}

impl Coefficients {
    pub fn new<B, A>(dim: usize, drift: B, diffusion: A) -> Self
    where
        B: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        A: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            jumps: Vec::new(),
            time_homogeneous: false,
        }
    }

    /// Constant drift vector and diffusion matrix (row-major).
    pub fn constant(drift: Vec<f64>, diffusion: Vec<f64>) -> Self {
        let dim = drift.len();
        assert_eq!(diffusion.len(), dim * dim, "diffusion must be d x d");
        Self::new(
            dim,
            move |_, _, _, out| out.copy_from_slice(&drift),
            move |_, _, _, out| out.copy_from_slice(&diffusion),
        )
        .time_homogeneous(true)
    }

    /// Zero drift, zero diffusion, no jumps.
    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim], vec![0.0; dim * dim])
    }

    pub fn with_jump<F>(mut self, displacement: Vec<f64>, rate: F) -> Result<Self, ModelError>
    where
        F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        if displacement.len() != self.dim {
            return Err(ModelError::DimensionMismatch(format!(
                "jump displacement has length {}, state dimension is {}",
                displacement.len(),
                self.dim
            )));
        }
        if displacement.iter().all(|v| *v == 0.0) || displacement.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidCoefficients(
                "jump displacement must be finite and non-zero".into(),
            ));
        }
        self.jumps.push(JumpAtom { rate: Arc::new(rate), displacement });
        Ok(self)
    }

    pub fn with_constant_jump(self, displacement: Vec<f64>, rate: f64) -> Result<Self, ModelError> {
        if !(rate >= 0.0 && rate.is_finite()) {
            return Err(ModelError::InvalidCoefficients(format!("jump rate {rate} must be >= 0")));
        }
        self.with_jump(displacement, move |_, _, _| rate)
    }

    /// Declares that coefficients do not depend on `t`, letting the chain
    /// builder share a single transition layer across time.
    pub fn time_homogeneous(mut self, yes: bool) -> Self {
        self.time_homogeneous = yes;
        self
    }

    pub fn is_time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jumps(&self) -> &[JumpAtom] {
        &self.jumps
    }

    pub fn values(&self) -> CoefficientValues {
        CoefficientValues::new(self.dim, self.jumps.len())
    }

    /// Evaluates all coefficients at `(t, x, u)`. Non-finite output, a
    /// negative rate or an asymmetric diffusion matrix is an error.
    pub fn eval_into(
        &self,
        t: f64,
        x: &[f64],
        u: &[f64],
        out: &mut CoefficientValues,
    ) -> Result<(), ModelError> {
        (self.drift)(t, x, u, &mut out.drift);
        (self.diffusion)(t, x, u, &mut out.diffusion);
        for (r, j) in out.rates.iter_mut().zip(&self.jumps) {
            *r = (j.rate)(t, x, u);
        }
        let fail = |what: &'static str| ModelError::Evaluation {
            t,
            x: x.to_vec(),
            u: u.to_vec(),
            what,
        };
        if out.drift.iter().any(|v| !v.is_finite()) {
            return Err(fail("drift"));
        }
        if out.diffusion.iter().any(|v| !v.is_finite()) {
            return Err(fail("diffusion"));
        }
        if out.rates.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(fail("jump rate"));
        }
        let d = self.dim;
        for i in 0..d {
            for k in (i + 1)..d {
                let (a, b) = (out.diffusion[i * d + k], out.diffusion[k * d + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(fail("diffusion symmetry"));
                }
            }
        }
        Ok(())
    }
}

/// Scratch buffer holding one evaluation of the coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientValues {
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub rates: Vec<f64>,
}

impl CoefficientValues {
    pub fn new(dim: usize, n_jumps: usize) -> Self {
        Self {
            drift: vec![0.0; dim],
            diffusion: vec![0.0; dim * dim],
            rates: vec![0.0; n_jumps],
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// Drift of the process itself: `b0 - sum_{|z_j| < 1} lambda_j z_j`.
    ///
    /// The generator compensates small jumps, so a process whose law solves the
    /// martingale problem moves with this drift between jumps.
    pub fn process_drift_into(&self, jumps: &[JumpAtom], out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
        for (rate, j) in self.rates.iter().zip(jumps) {
            if j.is_compensated() {
                for (o, z) in out.iter_mut().zip(&j.displacement) {
                    *o -= rate * z;
                }
            }
        }
    }
}
