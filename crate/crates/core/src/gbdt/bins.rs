//! Feature binning for histogram-based split finding. Boundaries sit at
//! quantiles of each feature's distinct values; features with few distinct
//! values get one bin per value. The mapping is monotone: x <= y implies
//! bin(x) <= bin(y).

use serde::{Deserialize, Serialize};

use super::{DenseMatrix, GbdtError};

/// Per-feature sorted bin upper boundaries. A feature with `b` boundaries
/// has `b + 1` bins; bin i covers (boundary[i-1], boundary[i]].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinMapper {
    boundaries: Vec<Vec<f64>>,
}

impl BinMapper {
    pub fn n_features(&self) -> usize {
        self.boundaries.len()
    }

    pub fn n_bins(&self, feature: usize) -> usize {
        self.boundaries[feature].len() + 1
    }

    pub fn boundaries(&self, feature: usize) -> &[f64] {
        &self.boundaries[feature]
    }

    /// Bin index of a raw value: the number of boundaries strictly below it.
    pub fn bin(&self, feature: usize, value: f64) -> usize {
        self.boundaries[feature].partition_point(|&b| value > b)
    }

    /// Bin an entire matrix, row-major, one byte per cell.
    pub fn bin_matrix(&self, x: &DenseMatrix) -> Result<BinnedMatrix, GbdtError> {
        if x.cols != self.n_features() {
            return Err(GbdtError::Dimension(format!(
                "matrix has {} features, mapper has {}",
                x.cols,
                self.n_features()
            )));
        }
        let mut bins = Vec::with_capacity(x.rows * x.cols);
        for row in 0..x.rows {
            for col in 0..x.cols {
                let value = x.get(row, col);
                if !value.is_finite() {
                    return Err(GbdtError::Data { row, col });
                }
                bins.push(self.bin(col, value) as u8);
            }
        }
        Ok(BinnedMatrix { rows: x.rows, cols: x.cols, bins })
    }
}

/// Binned copy of the training matrix; bin indices fit in a byte since
/// max_bins <= 255.
#[derive(Debug, Clone)]
pub struct BinnedMatrix {
    pub rows: usize,
    pub cols: usize,
    bins: Vec<u8>,
}

impl BinnedMatrix {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bins[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[u8] {
        &self.bins[row * self.cols..(row + 1) * self.cols]
    }
}

/// Build a [`BinMapper`] from training data. Boundaries are midpoints
/// between consecutive distinct values (all of them when the feature has
/// at most `max_bins` distinct values, else at quantiles of the distinct
/// values).
pub fn build_bins(x: &DenseMatrix, max_bins: usize) -> Result<BinMapper, GbdtError> {
    if x.rows == 0 {
        return Err(GbdtError::Config("cannot build bins from an empty matrix".into()));
    }
    if !(2..=255).contains(&max_bins) {
        return Err(GbdtError::Config(format!("max_bins {max_bins} outside [2, 255]")));
    }
    let mut boundaries = Vec::with_capacity(x.cols);
    for col in 0..x.cols {
        let mut values: Vec<f64> = Vec::with_capacity(x.rows);
        for row in 0..x.rows {
            let value = x.get(row, col);
            if !value.is_finite() {
                return Err(GbdtError::Data { row, col });
            }
            values.push(value);
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        values.dedup();
        let distinct = values.len();
        let mut feature_bounds = Vec::new();
        if distinct <= max_bins {
            for pair in values.windows(2) {
                feature_bounds.push(midpoint(pair[0], pair[1]));
            }
        } else {
            for k in 1..max_bins {
                let idx = k * distinct / max_bins;
                feature_bounds.push(midpoint(values[idx - 1], values[idx]));
            }
            feature_bounds.dedup();
        }
        boundaries.push(feature_bounds);
    }
    Ok(BinMapper { boundaries })
}

fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}
