use serde::{Deserialize, Serialize};

use super::ModelError;

/// Finite control set `{u_1, ..., u_K}`; atoms are vectors of a common length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    atoms: Vec<Vec<f64>>,
}

impl ControlSet {
    pub fn new(atoms: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        if atoms.is_empty() {
            return Err(ModelError::InvalidControls("control set needs at least one atom".into()));
        }
        let m = atoms[0].len();
        if m == 0 {
            return Err(ModelError::InvalidControls("control atoms must be non-empty vectors".into()));
        }
        for (k, a) in atoms.iter().enumerate() {
            if a.len() != m {
                return Err(ModelError::InvalidControls(format!(
                    "atom {k} has length {}, expected {m}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::InvalidControls(format!("atom {k} is not finite")));
            }
            if let Some(j) = atoms[..k].iter().position(|b| b == a) {
                return Err(ModelError::InvalidControls(format!("atoms {j} and {k} coincide")));
            }
        }
        Ok(Self { atoms })
    }

    /// Scalar atoms.
    pub fn scalar(values: &[f64]) -> Result<Self, ModelError> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// `count` evenly spaced scalar atoms on `[min, max]`.
    pub fn uniform(min: f64, max: f64, count: usize) -> Result<Self, ModelError> {
        if count == 0 {
            return Err(ModelError::InvalidControls("count must be >= 1".into()));
        }
        if count == 1 {
            return Self::scalar(&[min]);
        }
        let step = (max - min) / (count - 1) as f64;
        let vals: Vec<f64> = (0..count)
            .map(|k| if k + 1 == count { max } else { min + k as f64 * step })
            .collect();
        Self::scalar(&vals)
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn control_dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atom(&self, k: usize) -> &[f64] {
        &self.atoms[k]
    }

    pub fn atoms(&self) -> &[Vec<f64>] {
        &self.atoms
    }

    /// Column labels `u1..uK`.
    pub fn labels(&self) -> Vec<String> {
        (1..=self.atoms.len()).map(|k| format!("u{k}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_atoms_required() {
        assert!(ControlSet::scalar(&[1.0, 1.0]).is_err());
        assert!(ControlSet::scalar(&[]).is_err());
        assert!(ControlSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert_eq!(ControlSet::scalar(&[0.0, 1.0]).unwrap().len(), 2);
    }

    #[test]
    fn uniform_endpoints_exact() {
        let c = ControlSet::uniform(-2.0, 2.0, 41).unwrap();
        assert_eq!(c.atom(0), &[-2.0]);
        assert_eq!(c.atom(40), &[2.0]);
        assert!((c.atom(20)[0]).abs() < 1e-15);
    }
}
