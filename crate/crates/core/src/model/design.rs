use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of a robust-design study.
///
/// Periods, occasions and states are 1-based in the public vocabulary
/// (`state 1..=G`), but all vectors are indexed from zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyDesign {
    /// Occasions per primary period, K(t). Its length is T.
    pub occasions: Vec<usize>,
    /// Number of observable states, G.
    pub states: usize,
    /// States (1-based labels) that exist in each period.
    pub available: Vec<Vec<usize>>,
    /// Maximum primary-level age A'.
    pub max_age: usize,
    /// Maximum secondary-level age a'(t) per period.
    pub max_occasion_age: Vec<usize>,
}

impl StudyDesign {
    /// Design with every state available everywhere, A' = T and a'(t) = K(t).
    pub fn new(occasions: Vec<usize>, states: usize) -> Result<Self> {
        let periods = occasions.len();
        let design = StudyDesign {
            available: vec![(1..=states).collect(); periods],
            max_age: periods,
            max_occasion_age: occasions.clone(),
            occasions,
            states,
        };
        design.validate()?;
        Ok(design)
    }

    pub fn with_availability(mut self, available: Vec<Vec<usize>>) -> Result<Self> {
        self.available = available
            .into_iter()
            .map(|mut v| {
                v.sort_unstable();
                v.dedup();
                v
            })
            .collect();
        self.validate()?;
        Ok(self)
    }

    pub fn with_max_ages(mut self, max_age: usize, max_occasion_age: Vec<usize>) -> Result<Self> {
        self.max_age = max_age;
        self.max_occasion_age = max_occasion_age;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.periods();
        if t == 0 {
            return Err(Error::constraint("design needs at least one primary period"));
        }
        if self.states == 0 {
            return Err(Error::constraint("design needs at least one state"));
        }
        if let Some(i) = self.occasions.iter().position(|&k| k == 0) {
            return Err(Error::constraint(format!("period {} has no occasions", i + 1)));
        }
        if self.available.len() != t {
            return Err(Error::dim("availability", t, self.available.len()));
        }
        if self.max_occasion_age.len() != t {
            return Err(Error::dim("a'(t)", t, self.max_occasion_age.len()));
        }
        if self.max_age == 0 || self.max_age > t {
            return Err(Error::constraint(format!(
                "A' = {} must lie in 1..={t}",
                self.max_age
            )));
        }
        for (i, (&a, &k)) in self.max_occasion_age.iter().zip(&self.occasions).enumerate() {
            if a == 0 || a > k {
                return Err(Error::constraint(format!(
                    "a'({}) = {a} must lie in 1..={k}",
                    i + 1
                )));
            }
        }
        for (i, avail) in self.available.iter().enumerate() {
            if avail.is_empty() {
                return Err(Error::constraint(format!(
                    "period {} has no available states",
                    i + 1
                )));
            }
            if let Some(&g) = avail.iter().find(|&&g| g == 0 || g > self.states) {
                return Err(Error::constraint(format!(
                    "period {} lists state {g} outside 1..={}",
                    i + 1,
                    self.states
                )));
            }
        }
        Ok(())
    }

    /// T
    pub fn periods(&self) -> usize {
        self.occasions.len()
    }

    pub fn total_occasions(&self) -> usize {
        self.occasions.iter().sum()
    }

    /// Index of the first occasion of period `t` (0-based) in a flat history.
    pub fn offset(&self, t: usize) -> usize {
        self.occasions[..t].iter().sum()
    }

    /// Whether 1-based state `g` exists in 0-based period `t`.
    pub fn is_available(&self, t: usize, g: usize) -> bool {
        self.available[t].binary_search(&g).is_ok()
    }

    /// Availability of each state in period `t` as a 0-based mask.
    pub fn mask(&self, t: usize) -> Vec<bool> {
        (1..=self.states).map(|g| self.is_available(t, g)).collect()
    }

    /// Number of hidden states in the secondary chain of period `t`.
    pub fn secondary_states(&self, t: usize) -> usize {
        self.max_occasion_age[t] * self.states + 2
    }

    pub fn primary_states(&self) -> usize {
        self.max_age + 2
    }

    /// Design of a single period, used for per-period stopover fits.
    pub fn single_period(&self, t: usize) -> StudyDesign {
        StudyDesign {
            occasions: vec![self.occasions[t]],
            states: self.states,
            available: vec![self.available[t].clone()],
            max_age: 1,
            max_occasion_age: vec![self.max_occasion_age[t]],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_period_count() {
        let d = StudyDesign::new(vec![5, 5, 5], 2).unwrap();
        assert_eq!(d.periods(), 3);
        assert_eq!(d.max_age, 3);
        assert_eq!(d.max_occasion_age, vec![5, 5, 5]);
        assert_eq!(d.secondary_states(0), 12);
        assert_eq!(d.primary_states(), 5);
        assert_eq!(d.offset(2), 10);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(StudyDesign::new(vec![], 1).is_err());
        assert!(StudyDesign::new(vec![3, 0], 1).is_err());
        assert!(StudyDesign::new(vec![3], 0).is_err());
        let d = StudyDesign::new(vec![3, 3], 2).unwrap();
        assert!(d.clone().with_max_ages(3, vec![3, 3]).is_err());
        assert!(d.clone().with_max_ages(2, vec![4, 3]).is_err());
        assert!(d.clone().with_availability(vec![vec![1], vec![]]).is_err());
        assert!(d.with_availability(vec![vec![1], vec![3]]).is_err());
    }

    #[test]
    fn availability_mask() {
        let d = StudyDesign::new(vec![2, 2], 2)
            .unwrap()
            .with_availability(vec![vec![1], vec![2, 1]])
            .unwrap();
        assert_eq!(d.mask(0), vec![true, false]);
        assert_eq!(d.mask(1), vec![true, true]);
        assert!(!d.is_available(0, 2));
    }
}
