//! Iterative multilabel stratification of studies into train/val/test.
//!
//! Each study contributes up to four indicator labels — diagnosis and
//! density per breast side — and the splitter greedily processes the
//! scarcest indicator first, assigning each of its studies to the split
//! with the largest remaining demand for that indicator. Tie-breaking is
//! fixed (demand, then overall capacity, then split index) and the order
//! of studies within an indicator group is shuffled by a seeded generator,
//! so the assignment is deterministic for a fixed input order and seed.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::manifest::{Manifest, Split, StudyRecord};
use crate::labels::Laterality;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("need at least 3 studies to split, got {0}")]
    TooFewStudies(usize),
    #[error("duplicate study id `{0}` in split input")]
    DuplicateStudy(String),
}

/// Train/val/test fractions; each in (0,1), summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.70, val: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<(), SplitError> {
        for (name, value) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if !(value > 0.0 && value < 1.0) {
                return Err(SplitError::Ratios(format!("{name} fraction {value} not in (0,1)")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(SplitError::Ratios(format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Which breast-level quantity an indicator encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IndicatorSlot {
    DiagLeft,
    DiagRight,
    DensLeft,
    DensRight,
}

/// One indicator label: a (slot, class) pair. A birads5 study carries at
/// most 4 of the 18 possible indicators (5+5+4+4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Indicator {
    pub slot: IndicatorSlot,
    pub class: usize,
}

/// A study reduced to its indicator labels for splitting.
#[derive(Debug, Clone)]
pub struct StudyLabels {
    pub study_id: String,
    pub indicators: Vec<Indicator>,
}

/// Encode a study's breast-level labels as indicators. A missing side
/// simply omits its indicators.
pub fn study_labelset(study: &StudyRecord) -> StudyLabels {
    let mut indicators = Vec::with_capacity(4);
    for (lat, diag_slot, dens_slot) in [
        (Laterality::Left, IndicatorSlot::DiagLeft, IndicatorSlot::DensLeft),
        (Laterality::Right, IndicatorSlot::DiagRight, IndicatorSlot::DensRight),
    ] {
        if let Some(diag) = study.side_diagnosis(lat) {
            indicators.push(Indicator { slot: diag_slot, class: diag.index() });
        }
        if let Some(dens) = study.side_density(lat) {
            indicators.push(Indicator { slot: dens_slot, class: dens.index() });
        }
    }
    StudyLabels { study_id: study.study_id.clone(), indicators }
}

/// The computed study -> split map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    map: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn get(&self, study_id: &str) -> Option<Split> {
        self.map.get(study_id).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0usize; 3];
        for split in self.map.values() {
            sizes[*split as usize] += 1;
        }
        sizes
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Split)> {
        self.map.iter().map(|(id, s)| (id, *s))
    }

    /// Stamp the assignment onto every manifest row.
    pub fn apply(&self, manifest: &mut Manifest) {
        for row in &mut manifest.rows {
            row.split = self.get(&row.study_id);
        }
        manifest.split_column_present = true;
    }
}

/// Greedy iterative stratification. Repeats until all studies are
/// assigned: pick the indicator with the fewest unassigned carriers,
/// shuffle those carriers, and send each to the split with the largest
/// remaining demand for that indicator (ties: largest overall remaining
/// capacity, then lowest split index).
pub fn stratified_split(
    studies: &[StudyLabels],
    ratios: SplitRatios,
    seed: u64,
) -> Result<SplitAssignment, SplitError> {
    ratios.validate()?;
    if studies.len() < 3 {
        return Err(SplitError::TooFewStudies(studies.len()));
    }
    {
        let mut ids: Vec<&str> = studies.iter().map(|s| s.study_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(dup) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(SplitError::DuplicateStudy(dup[0].to_string()));
        }
    }

    let fractions = ratios.as_array();
    let n = studies.len() as f64;
    // Remaining desired study counts, overall and per indicator.
    let mut capacity: [f64; 3] = [fractions[0] * n, fractions[1] * n, fractions[2] * n];
    let mut demand: BTreeMap<Indicator, [f64; 3]> = BTreeMap::new();
    for study in studies {
        for &indicator in &study.indicators {
            let entry = demand.entry(indicator).or_insert([0.0; 3]);
            for (slot, fraction) in entry.iter_mut().zip(fractions) {
                *slot += fraction;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned: Vec<Option<Split>> = vec![None; studies.len()];
    let mut remaining = studies.len();
    while remaining > 0 {
        // Scarcest indicator among unassigned studies; BTreeMap order
        // makes the tie-break canonical.
        let mut counts: BTreeMap<Indicator, usize> = BTreeMap::new();
        for (index, study) in studies.iter().enumerate() {
            if assigned[index].is_none() {
                for &indicator in &study.indicators {
                    *counts.entry(indicator).or_default() += 1;
                }
            }
        }
        let (&chosen, _) = counts
            .iter()
            .min_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ia.cmp(ib)))
            .expect("unassigned studies always carry indicators");

        let mut group: Vec<usize> = studies
            .iter()
            .enumerate()
            .filter(|(index, study)| {
                assigned[*index].is_none() && study.indicators.contains(&chosen)
            })
            .map(|(index, _)| index)
            .collect();
        group.shuffle(&mut rng);

        for index in group {
            let label_demand = demand[&chosen];
            let mut best = 0usize;
            for candidate in 1..3 {
                let better = label_demand[candidate] > label_demand[best] + 1e-12
                    || ((label_demand[candidate] - label_demand[best]).abs() <= 1e-12
                        && capacity[candidate] > capacity[best] + 1e-12);
                if better {
                    best = candidate;
                }
            }
            assigned[index] = Some(Split::ALL[best]);
            remaining -= 1;
            capacity[best] -= 1.0;
            for &indicator in &studies[index].indicators {
                demand.get_mut(&indicator).unwrap()[best] -= 1.0;
            }
        }
    }

    let map = studies
        .iter()
        .zip(&assigned)
        .map(|(study, split)| (study.study_id.clone(), split.unwrap()))
        .collect();
    Ok(SplitAssignment { map })
}
