use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::design::StudyDesign;
use crate::error::{Error, Result};

/// Unique capture histories with their multiplicities.
///
/// A history is a flat sequence of `sum K(t)` outcomes, 0 for "not seen"
/// and `g` for "seen in state g", laid out period by period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub design: StudyDesign,
    histories: Vec<Vec<u8>>,
    counts: Vec<u64>,
}

impl Dataset {
    /// Builds a dataset from already-unique histories.
    pub fn new(design: StudyDesign, histories: Vec<Vec<u8>>, counts: Vec<u64>) -> Result<Self> {
        design.validate()?;
        if histories.len() != counts.len() {
            return Err(Error::dim("history counts", histories.len(), counts.len()));
        }
        let data = Dataset {
            design,
            histories,
            counts,
        };
        data.validate()?;
        Ok(data)
    }

    /// Builds a dataset from possibly repeated histories, summing counts of
    /// duplicates. Histories come out in lexicographic order. Also returns
    /// how many input rows were merged into an earlier one.
    pub fn from_rows<I>(design: StudyDesign, rows: I) -> Result<(Self, usize)>
    where
        I: IntoIterator<Item = (Vec<u8>, u64)>,
    {
        let mut merged: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
        let mut duplicates = 0;
        for (h, c) in rows {
            let slot = merged.entry(h).or_insert(0);
            if *slot > 0 {
                duplicates += 1;
            }
            *slot += c;
        }
        let (histories, counts) = merged.into_iter().unzip();
        Ok((Dataset::new(design, histories, counts)?, duplicates))
    }

    /// Dataset of individual histories, one row per individual.
    pub fn from_individuals<I>(design: StudyDesign, individuals: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<u8>>,
    {
        Ok(Dataset::from_rows(design, individuals.into_iter().map(|h| (h, 1)))?.0)
    }

    fn validate(&self) -> Result<()> {
        let len = self.design.total_occasions();
        let g = self.design.states;
        let mut seen = std::collections::HashSet::new();
        for (j, (h, &c)) in self.histories.iter().zip(&self.counts).enumerate() {
            if h.len() != len {
                return Err(Error::dim(format!("history {}", j + 1), len, h.len()));
            }
            if c == 0 {
                return Err(Error::Input(format!("history {} has count 0", j + 1)));
            }
            if h.iter().all(|&x| x == 0) {
                return Err(Error::Input(format!("history {} is never captured", j + 1)));
            }
            for t in 0..self.design.periods() {
                let off = self.design.offset(t);
                for &x in &h[off..off + self.design.occasions[t]] {
                    if x as usize > g {
                        return Err(Error::Input(format!(
                            "history {} has state {x} outside 0..={g}",
                            j + 1
                        )));
                    }
                    if x != 0 && !self.design.is_available(t, x as usize) {
                        return Err(Error::Input(format!(
                            "history {} records state {x} in period {}, where it is unavailable",
                            j + 1,
                            t + 1
                        )));
                    }
                }
            }
            if !seen.insert(h) {
                return Err(Error::Input(format!("history {} is a duplicate", j + 1)));
            }
        }
        Ok(())
    }

    pub fn histories(&self) -> &[Vec<u8>] {
        &self.histories
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Number of unique histories, J.
    pub fn unique(&self) -> usize {
        self.histories.len()
    }

    /// Number of observed individuals, n.
    pub fn observed(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.histories.is_empty()
    }

    /// Outcomes of history `j` within 0-based period `t`.
    pub fn slice(&self, j: usize, t: usize) -> &[u8] {
        let off = self.design.offset(t);
        &self.histories[j][off..off + self.design.occasions[t]]
    }

    /// One entry per individual, expanding multiplicities in history order.
    pub fn individuals(&self) -> Vec<&[u8]> {
        self.histories
            .iter()
            .zip(&self.counts)
            .flat_map(|(h, &c)| std::iter::repeat_n(h.as_slice(), c as usize))
            .collect()
    }

    /// The single-period dataset of period `t`, dropping individuals not
    /// captured in that period.
    pub fn restrict_to_period(&self, t: usize) -> Result<Dataset> {
        let design = self.design.single_period(t);
        let rows = (0..self.unique()).filter_map(|j| {
            let s = self.slice(j, t);
            s.iter().any(|&x| x != 0).then(|| (s.to_vec(), self.counts[j]))
        });
        Ok(Dataset::from_rows(design, rows)?.0)
    }

    /// Same individuals with histories listed in a different order.
    pub fn permuted(&self, order: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.design.clone(),
            order.iter().map(|&j| self.histories[j].clone()).collect(),
            order.iter().map(|&j| self.counts[j]).collect(),
        )
    }
}
