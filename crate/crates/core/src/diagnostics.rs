//! Attention drift, concentration, and affine-dependence diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{jsd_slice, AttentionDistribution};
use crate::error::{AsmilError, Result};
use crate::model::Bag;
use crate::tensor::DenseMatrix;

/// Default number of final epochs summarized by [`stability_curve`].
pub const STABILITY_WINDOW: usize = 10;
/// Pivot threshold for the null-space test.
pub const AFFINE_TOLERANCE: f64 = 1e-8;

/// Attention rows per bag, one matrix per recorded epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub bags: BTreeMap<String, Vec<DenseMatrix>>,
}

impl AttentionTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, bag_id: &str, rows: DenseMatrix) -> Result<()> {
        let history = self.bags.entry(bag_id.to_string()).or_default();
        if let Some(first) = history.first() {
            if first.shape() != rows.shape() {
                return Err(AsmilError::contract(format!(
                    "bag `{bag_id}` attention changed shape from {:?} to {:?}",
                    first.shape(),
                    rows.shape()
                )));
            }
        }
        history.push(rows);
        Ok(())
    }

    pub fn epochs(&self, bag_id: &str) -> usize {
        self.bags.get(bag_id).map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

/// Mean row-wise JSD between two attention snapshots of the same bag.
pub fn mean_row_jsd(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(AsmilError::contract(format!(
            "cannot compare attention {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut total = 0.0;
    for r in 0..a.rows() {
        total += jsd_slice(a.row(r), b.row(r))?;
    }
    Ok(total / a.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    /// Per bag, JSD between epochs `t` and `t + 1`.
    pub per_bag: BTreeMap<String, Vec<f64>>,
    pub window: usize,
    /// Mean over bags of the mean of the last `window` curve values.
    pub final_window_mean: f64,
}

pub fn stability_curve(trace: &AttentionTrace, window: usize) -> Result<StabilityCurve> {
    if trace.is_empty() {
        return Err(AsmilError::contract("empty attention trace"));
    }
    if window == 0 {
        return Err(AsmilError::domain("stability window must be positive"));
    }
    let mut per_bag = BTreeMap::new();
    let mut summary = 0.0;
    for (id, history) in &trace.bags {
        if history.len() < 2 {
            return Err(AsmilError::contract(format!(
                "bag `{id}` has {} recorded epochs, need at least 2",
                history.len()
            )));
        }
        let curve = history
            .windows(2)
            .map(|w| mean_row_jsd(&w[0], &w[1]))
            .collect::<Result<Vec<f64>>>()?;
        let tail = &curve[curve.len().saturating_sub(window)..];
        summary += tail.iter().sum::<f64>() / tail.len() as f64;
        per_bag.insert(id.clone(), curve);
    }
    Ok(StabilityCurve {
        final_window_mean: summary / per_bag.len() as f64,
        per_bag,
        window,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationStats {
    pub entropy: f64,
    pub max_weight: f64,
    /// `exp(entropy)`, the effective number of attended instances.
    pub effective_support: f64,
}

pub fn concentration_stats(alpha: &AttentionDistribution) -> ConcentrationStats {
    concentration_of(alpha.as_slice())
}

pub fn concentration_of(alpha: &[f64]) -> ConcentrationStats {
    let entropy: f64 = -alpha
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>();
    let entropy = entropy.max(0.0);
    ConcentrationStats {
        entropy,
        max_weight: alpha.iter().copied().fold(0.0, f64::max),
        effective_support: entropy.exp(),
    }
}

/// Nonzero `ψ` with `Σψᵢ = 0` and `Xᵀψ = 0`, normalized to unit length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineDependenceWitness {
    pub psi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineReport {
    pub dependent: bool,
    pub rank: usize,
    pub witness: Option<AffineDependenceWitness>,
}

/// Tests whether the instance rows of `x` are affinely dependent by
/// eliminating `[Xᵀ; 1ᵀ]` with partial pivoting.
pub fn affine_dependence_of(x: &DenseMatrix, tol: f64) -> AffineReport {
    let (m, d) = (x.rows(), x.cols());
    let rows = d + 1;
    let mut a = DenseMatrix::zeros(rows, m);
    for i in 0..m {
        for j in 0..d {
            a.set(j, i, x.get(i, j));
        }
        a.set(d, i, 1.0);
    }
    let mut pivots: Vec<usize> = Vec::new();
    let mut r = 0;
    for c in 0..m {
        if r == rows {
            break;
        }
        let (best, mag) = (r..rows)
            .map(|i| (i, a.get(i, c).abs()))
            .fold((r, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if mag <= tol {
            continue;
        }
        if best != r {
            for k in 0..m {
                let tmp = a.get(r, k);
                a.set(r, k, a.get(best, k));
                a.set(best, k, tmp);
            }
        }
        let p = a.get(r, c);
        for k in 0..m {
            a.set(r, k, a.get(r, k) / p);
        }
        for i in 0..rows {
            if i != r {
                let f = a.get(i, c);
                if f != 0.0 {
                    for k in 0..m {
                        a.set(i, k, a.get(i, k) - f * a.get(r, k));
                    }
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    let rank = pivots.len();
    let free = (0..m).find(|c| !pivots.contains(c));
    let witness = free.map(|f| {
        let mut psi = vec![0.0; m];
        psi[f] = 1.0;
        for (row, &pc) in pivots.iter().enumerate() {
            psi[pc] = -a.get(row, f);
        }
        let norm = psi.iter().map(|v| v * v).sum::<f64>().sqrt();
        psi.iter_mut().for_each(|v| *v /= norm);
        AffineDependenceWitness { psi }
    });
    AffineReport {
        dependent: witness.is_some(),
        rank,
        witness,
    }
}

pub fn affine_dependence(bag: &Bag, tol: f64) -> AffineReport {
    affine_dependence_of(&bag.features, tol)
}
