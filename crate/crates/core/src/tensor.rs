//! Rank-K canonical polyadic tables over joint action spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dense table `materialize` will allocate.
pub const MAX_DENSE_ENTRIES: u128 = 10_000_000;

/// Sum of `rank` outer products of per-mode vectors.
///
/// Factor storage is mode-major, then rank, then action: the vector for mode
/// `d` and rank term `k` lives at `[(d * rank + k) * actions ..][.. actions]`.
/// This is also the layout of a value head's raw output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpTensor {
    modes: usize,
    rank: usize,
    actions: usize,
    factors: Vec<f64>,
}

impl CpTensor {
    pub fn from_heads(head_output: &[f64], modes: usize, rank: usize, actions: usize) -> Result<Self> {
        if modes == 0 || rank == 0 || actions == 0 {
            return Err(Error::InvalidArgument("modes, rank and actions must be positive".into()));
        }
        let expected = modes * rank * actions;
        if head_output.len() != expected {
            return Err(Error::shape(expected, head_output.len()));
        }
        Ok(CpTensor { modes, rank, actions, factors: head_output.to_vec() })
    }

    pub fn flatten(&self) -> &[f64] {
        &self.factors
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn param_count(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, mode: usize, k: usize) -> &[f64] {
        let start = (mode * self.rank + k) * self.actions;
        &self.factors[start..start + self.actions]
    }

    pub fn factor_mut(&mut self, mode: usize, k: usize) -> &mut [f64] {
        let start = (mode * self.rank + k) * self.actions;
        &mut self.factors[start..start + self.actions]
    }

    fn check_joint(&self, joint: &[usize]) -> Result<()> {
        if joint.len() != self.modes {
            return Err(Error::shape(self.modes, joint.len()));
        }
        if let Some(&a) = joint.iter().find(|&&a| a >= self.actions) {
            return Err(Error::OutOfRange { index: a, limit: self.actions });
        }
        Ok(())
    }

    /// `Σ_k Π_d factor(d, k)[joint[d]]`
    pub fn evaluate(&self, joint: &[usize]) -> Result<f64> {
        self.check_joint(joint)?;
        Ok((0..self.rank)
            .map(|k| joint.iter().enumerate().map(|(d, &a)| self.factor(d, k)[a]).product::<f64>())
            .sum())
    }

    /// Accumulates `scale * ∂evaluate(joint)/∂factors` into `grad` (same layout as `flatten`).
    pub fn accumulate_grad(&self, joint: &[usize], scale: f64, grad: &mut [f64]) -> Result<()> {
        self.check_joint(joint)?;
        if grad.len() != self.factors.len() {
            return Err(Error::shape(self.factors.len(), grad.len()));
        }
        for k in 0..self.rank {
            for d in 0..self.modes {
                let others: f64 = joint
                    .iter()
                    .enumerate()
                    .filter(|&(e, _)| e != d)
                    .map(|(e, &a)| self.factor(e, k)[a])
                    .product();
                grad[(d * self.rank + k) * self.actions + joint[d]] += scale * others;
            }
        }
        Ok(())
    }

    pub fn materialize(&self) -> Result<DenseTensor> {
        let size = (self.actions as u128).pow(self.modes as u32);
        if size > MAX_DENSE_ENTRIES {
            return Err(Error::Budget { size, budget: MAX_DENSE_ENTRIES });
        }
        let mut values = vec![0.0; size as usize];
        let mut term = Vec::with_capacity(size as usize);
        let mut next = Vec::with_capacity(size as usize);
        for k in 0..self.rank {
            term.clear();
            term.extend_from_slice(self.factor(0, k));
            for d in 1..self.modes {
                next.clear();
                let f = self.factor(d, k);
                for &prefix in &term {
                    next.extend(f.iter().map(|&x| prefix * x));
                }
                std::mem::swap(&mut term, &mut next);
            }
            for (v, t) in values.iter_mut().zip(&term) {
                *v += t;
            }
        }
        Ok(DenseTensor { modes: self.modes, actions: self.actions, values })
    }
}

/// Explicit table of `actions^modes` values, first mode slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    modes: usize,
    actions: usize,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(modes: usize, actions: usize, values: Vec<f64>) -> Result<Self> {
        let size = (actions as u128).pow(modes as u32);
        if size > MAX_DENSE_ENTRIES {
            return Err(Error::Budget { size, budget: MAX_DENSE_ENTRIES });
        }
        if values.len() as u128 != size {
            return Err(Error::shape(size as usize, values.len()));
        }
        Ok(DenseTensor { modes, actions, values })
    }

    pub fn zeros(modes: usize, actions: usize) -> Result<Self> {
        Self::new(modes, actions, vec![0.0; actions.pow(modes as u32)])
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn index_of(&self, joint: &[usize]) -> Result<usize> {
        if joint.len() != self.modes {
            return Err(Error::shape(self.modes, joint.len()));
        }
        joint.iter().try_fold(0usize, |acc, &a| {
            if a >= self.actions {
                Err(Error::OutOfRange { index: a, limit: self.actions })
            } else {
                Ok(acc * self.actions + a)
            }
        })
    }

    pub fn lookup(&self, joint: &[usize]) -> Result<f64> {
        Ok(self.values[self.index_of(joint)?])
    }

    /// Row-major index for callers that have already validated `joint`.
    pub(crate) fn lookup_unchecked(&self, joint: impl Iterator<Item = usize>) -> f64 {
        let idx = joint.fold(0usize, |acc, a| acc * self.actions + a);
        self.values[idx]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_joints(modes: usize, actions: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..modes {
            out = out
                .into_iter()
                .flat_map(|p| (0..actions).map(move |a| [p.clone(), vec![a]].concat()))
                .collect();
        }
        out
    }

    #[test]
    fn rank_one_evaluate() {
        let cp = CpTensor::from_heads(&[1.0, 2.0, 3.0, 4.0], 2, 1, 2).unwrap();
        assert_eq!(cp.factor(0, 0), &[1.0, 2.0]);
        assert_eq!(cp.factor(1, 0), &[3.0, 4.0]);
        assert_eq!(cp.evaluate(&[0, 1]).unwrap(), 4.0);
        let ones = CpTensor::from_heads(&[1.0; 6], 3, 1, 2).unwrap();
        for j in all_joints(3, 2) {
            assert_eq!(ones.evaluate(&j).unwrap(), 1.0);
        }
    }

    #[test]
    fn materialize_outer_products() {
        let cp = CpTensor::from_heads(&[1.0, 2.0, 3.0, 4.0], 2, 1, 2).unwrap();
        assert_eq!(cp.materialize().unwrap().values(), &[3.0, 4.0, 6.0, 8.0]);
        let v = CpTensor::from_heads(&[5.0, 7.0], 1, 1, 2).unwrap();
        assert_eq!(v.materialize().unwrap().values(), &[5.0, 7.0]);
    }

    #[test]
    fn sum_of_rank_one_terms() {
        let a = [0.3, -1.0, 2.0, 0.5, 1.5, -0.7];
        let b = [1.1, 0.2, -0.4, 2.2, -0.9, 0.8];
        // mode-major layout for the rank-2 tensor: mode0 (a0, b0), mode1 (a1, b1)
        let both = [&a[..3], &b[..3], &a[3..], &b[3..]].concat();
        let cp2 = CpTensor::from_heads(&both, 2, 2, 3).unwrap().materialize().unwrap();
        let ta = CpTensor::from_heads(&a, 2, 1, 3).unwrap().materialize().unwrap();
        let tb = CpTensor::from_heads(&b, 2, 1, 3).unwrap().materialize().unwrap();
        for i in 0..9 {
            assert!((cp2.values()[i] - ta.values()[i] - tb.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn layout_and_errors() {
        let v: Vec<f64> = (0..6).map(f64::from).collect();
        let cp = CpTensor::from_heads(&v, 1, 3, 2).unwrap();
        assert_eq!(cp.factor(0, 2), &[4.0, 5.0]);
        assert_eq!(cp.flatten(), &v[..]);
        assert!(CpTensor::from_heads(&v, 2, 2, 2).is_err());
        assert!(cp.evaluate(&[2]).is_err());
        let huge = CpTensor::from_heads(&[0.0; 8 * 10], 8, 1, 10).unwrap();
        assert!(matches!(huge.materialize(), Err(Error::Budget { .. })));
    }

    #[test]
    fn scaling_one_factor_scales_rank_one_tensor() {
        let mut cp = CpTensor::from_heads(&[0.5, -1.0, 2.0, 3.0, 0.25, 1.5], 3, 1, 2).unwrap();
        let before = cp.materialize().unwrap();
        cp.factor_mut(1, 0).iter_mut().for_each(|x| *x *= -2.5);
        let after = cp.materialize().unwrap();
        for (a, b) in after.values().iter().zip(before.values()) {
            assert!((a - (-2.5) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_index_is_row_major() {
        let t = DenseTensor::new(2, 3, (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(t.lookup(&[1, 2]).unwrap(), 5.0);
        assert!(t.lookup(&[3, 0]).is_err());
    }
}
