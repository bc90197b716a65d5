use std::fmt;
use std::sync::Arc;

use super::coefficients::ScalarFn;

pub type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type StoppingFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;

/// Running reward `L0(t, x, u)`, terminal reward `Phi0(x)` and, for stopping
/// problems, the stopping reward `Phi2(t, x)`.
#[derive(Clone)]
pub struct RewardSpec {
    running: Arc<ScalarFn>,
    terminal: Arc<TerminalFn>,
    stopping: Option<Arc<StoppingFn>>,
}

impl fmt::Debug for RewardSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RewardSpec")
            .field("stopping", &self.stopping.is_some())
            .finish_non_exhaustive()
    }
}

impl RewardSpec {
    pub fn new<L, P>(running: L, terminal: P) -> Self
    where
        L: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        P: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self { running: Arc::new(running), terminal: Arc::new(terminal), stopping: None }
    }

    pub fn zero() -> Self {
        Self::new(|_, _, _| 0.0, |_| 0.0)
    }

    pub fn with_stopping<S>(mut self, stopping: S) -> Self
    where
        S: Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    {
        self.stopping = Some(Arc::new(stopping));
        self
    }

    pub fn running(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.running)(t, x, u)
    }

    pub fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }

    pub fn has_stopping(&self) -> bool {
        self.stopping.is_some()
    }

    /// Stopping reward; `None` when the problem has none.
    pub fn stopping(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.stopping.as_ref().map(|s| s(t, x))
    }
}
