//! EMA anchor and the attention-matching losses.
//!
//! The anchor holds a trailing average of the online model's `attn.*`
//! parameters. Its scores go through a flatter map (NSF by default) and the
//! resulting rows serve as a constant target for the online attention.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{kl_slice, AttentionMap, KL_FLOOR};
use crate::error::{AsmilError, Result};
use crate::model::{attention_scores, Bag, BoundParams, ParamSet, MIX_XI};
use crate::tape::{GradTape, Var};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    /// Mirror of the online `attn.*` entries.
    pub params: ParamSet,
    /// EMA factor `m` in `[0, 1)`.
    pub momentum: f64,
    /// Map applied to the anchor scores.
    pub map: AttentionMap,
}

fn check_momentum(m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(AsmilError::domain(format!(
            "EMA factor must lie in [0, 1), got {m}"
        )));
    }
    Ok(())
}

impl AnchorState {
    /// Starts the anchor as an exact copy of the online attention submodule.
    pub fn from_online(online: &ParamSet, momentum: f64, map: AttentionMap) -> Result<Self> {
        check_momentum(momentum)?;
        map.validate()?;
        Ok(Self {
            params: online.attention_subset(),
            momentum,
            map,
        })
    }

    /// `θ′ ← m·θ′ + (1 − m)·θ` for every mirrored entry.
    pub fn ema_update(&mut self, online: &ParamSet) -> Result<()> {
        ema_update(self, online, self.momentum)
    }
}

pub fn ema_update(anchor: &mut AnchorState, online: &ParamSet, m: f64) -> Result<()> {
    check_momentum(m)?;
    // Validate everything before touching any entry.
    for (name, value) in anchor.params.iter() {
        match online.get(name) {
            Some(src) if src.shape() == value.shape() => {}
            Some(src) => {
                return Err(AsmilError::contract(format!(
                    "anchor entry `{name}` is {:?}, online is {:?}",
                    value.shape(),
                    src.shape()
                )))
            }
            None => {
                return Err(AsmilError::contract(format!(
                    "online parameters lack anchor entry `{name}`"
                )))
            }
        }
    }
    let names: Vec<String> = anchor.params.names().map(str::to_owned).collect();
    for name in names {
        let src = online.get(&name).expect("checked above");
        let dst = anchor.params.get_mut(&name).expect("own entry");
        for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d = m * *d + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Records the anchor attention on `tape` behind a stop-gradient barrier.
/// Returns the constant attention rows and the anchor's bound parameters.
pub fn anchor_attention_on_tape(
    tape: &mut GradTape,
    features: Var,
    anchor: &AnchorState,
) -> Result<(Var, BoundParams)> {
    let bound = anchor.params.bind(tape);
    let (_, scores) = attention_scores(tape, features, &bound, &anchor.params.config)?;
    let rows = anchor.map.apply_rows(tape, scores, bound.try_var(MIX_XI))?;
    Ok((tape.stop_gradient(rows), bound))
}

/// Anchor attention rows for `bag`, one per query.
pub fn anchor_attention(bag: &Bag, anchor: &AnchorState) -> Result<DenseMatrix> {
    if bag.dim() != anchor.params.config.input_dim {
        return Err(AsmilError::shape(format!(
            "bag `{}` has {} features, anchor expects {}",
            bag.id,
            bag.dim(),
            anchor.params.config.input_dim
        )));
    }
    let mut tape = GradTape::new();
    let features = tape.leaf(bag.features.clone());
    let (rows, _) = anchor_attention_on_tape(&mut tape, features, anchor)?;
    Ok(tape.value(rows).clone())
}

fn check_rows(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AsmilError::contract(format!(
            "attention rows {:?} cannot be matched with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.rows() == 0 {
        return Err(AsmilError::contract("no attention rows to match"));
    }
    Ok(())
}

/// Mean over rows of `KL(anchor_row ‖ online_row)`.
pub fn stabilization_loss(online: &DenseMatrix, anchor: &DenseMatrix) -> Result<f64> {
    check_rows(online, anchor)?;
    let mut total = 0.0;
    for r in 0..online.rows() {
        total += kl_slice(anchor.row(r), online.row(r))?;
    }
    Ok(total / online.rows() as f64)
}

/// Row-mean `KL(p ‖ q)` on the tape, with both sides floored at [`KL_FLOOR`].
/// Pass a stop-gradient node for whichever side is the target.
pub fn row_mean_kl_on_tape(tape: &mut GradTape, p: Var, q: Var) -> Result<Var> {
    let (pv, qv) = (tape.value(p), tape.value(q));
    check_rows(pv, qv)?;
    let rows = pv.rows() as f64;
    let p = tape.clamp_min(p, KL_FLOOR);
    let q = tape.clamp_min(q, KL_FLOOR);
    let lp = tape.log(p)?;
    let lq = tape.log(q)?;
    let diff = tape.sub(lp, lq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / rows))
}

/// Differentiable [`stabilization_loss`]: `anchor` must already be constant.
pub fn stabilization_loss_on_tape(tape: &mut GradTape, online: Var, anchor: Var) -> Result<Var> {
    row_mean_kl_on_tape(tape, anchor, online)
}

/// Per-bag EMA of past attention rows, the parameter-free alternative to the
/// anchor model. Memory grows with the total number of stored rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalEnsembleStore {
    rho: f64,
    entries: BTreeMap<String, DenseMatrix>,
}

impl TemporalEnsembleStore {
    pub fn new(rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho < 1.0) {
            return Err(AsmilError::domain(format!(
                "rho must lie in (0, 1), got {rho}"
            )));
        }
        Ok(Self {
            rho,
            entries: BTreeMap::new(),
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, bag_id: &str) -> Option<&DenseMatrix> {
        self.entries.get(bag_id)
    }

    /// Total number of floats held across all bags.
    pub fn stored_floats(&self) -> usize {
        self.entries.values().map(DenseMatrix::len).sum()
    }

    /// `target ← ρ·stored + (1 − ρ)·current`, or `current` on first visit.
    /// The target is stored and returned.
    pub fn step(&mut self, bag_id: &str, current: &DenseMatrix) -> Result<DenseMatrix> {
        let target = match self.entries.get(bag_id) {
            None => current.clone(),
            Some(stored) => {
                if stored.shape() != current.shape() {
                    return Err(AsmilError::contract(format!(
                        "bag `{bag_id}` attention changed from {:?} to {:?}",
                        stored.shape(),
                        current.shape()
                    )));
                }
                let rho = self.rho;
                stored.zip_map(current, |s, c| rho * s + (1.0 - rho) * c)?
            }
        };
        self.entries.insert(bag_id.to_string(), target.clone());
        Ok(target)
    }
}

pub fn temporal_ensemble_step(
    store: &mut TemporalEnsembleStore,
    bag_id: &str,
    current: &DenseMatrix,
) -> Result<DenseMatrix> {
    store.step(bag_id, current)
}

/// Row-mean `KL(current ‖ target)`; note the argument order differs from
/// [`stabilization_loss`].
pub fn temporal_loss(current: &DenseMatrix, target: &DenseMatrix) -> Result<f64> {
    check_rows(current, target)?;
    let mut total = 0.0;
    for r in 0..current.rows() {
        total += kl_slice(current.row(r), target.row(r))?;
    }
    Ok(total / current.rows() as f64)
}
