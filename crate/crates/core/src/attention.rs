//! Score-vector to simplex maps and divergences between attention
//! distributions.
//!
//! The free functions over slices are the numeric kernels; the typed wrappers
//! ([`softmax_t`], [`nsf`], [`entmax`], [`mixed_attention`]) validate inputs and
//! return an [`AttentionDistribution`]. [`AttentionMap`] applies a map row-wise
//! on a [`GradTape`].

use serde::{Deserialize, Serialize};

use crate::error::{AsmilError, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::sigmoid;

/// Floor applied to both arguments of the KL divergence before taking logs.
pub const KL_FLOOR: f64 = 1e-12;
/// Target accuracy on the entmax normalizer.
pub const ENTMAX_TOLERANCE: f64 = 1e-10;
/// Iteration cap for the entmax threshold bisection.
pub const ENTMAX_MAX_ITERS: usize = 200;
/// Simplex sum tolerance accepted by [`AttentionDistribution::new`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Raw attention scores `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(AsmilError::shape("score vector must be non-empty"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(AsmilError::domain("score vector has non-finite entries"));
        }
        Ok(Self(z))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A point on the probability simplex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDistribution(Vec<f64>);

impl AttentionDistribution {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(AsmilError::shape(
                "attention distribution must be non-empty",
            ));
        }
        if alpha.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(AsmilError::domain("attention entries must lie in [0, 1]"));
        }
        let total: f64 = alpha.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(AsmilError::domain(format!(
                "attention entries sum to {total}, not 1"
            )));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Trainable blend between softmax and NSF; `ζ = σ(ξ)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedAttentionParam {
    pub xi: f64,
}

impl Default for MixedAttentionParam {
    fn default() -> Self {
        Self { xi: 0.0 }
    }
}

impl MixedAttentionParam {
    pub fn zeta(&self) -> f64 {
        sigmoid(self.xi)
    }
}

pub fn softmax_slice(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn nsf_slice(z: &[f64]) -> Vec<f64> {
    let s: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
    let total: f64 = s.iter().sum();
    s.into_iter().map(|v| v / total).collect()
}

fn entmax_mass(z: &[f64], tau: f64, scale: f64, power: f64) -> f64 {
    z.iter()
        .map(|&v| {
            let base = scale * (v - tau);
            if base > 0.0 {
                base.powf(power)
            } else {
                0.0
            }
        })
        .sum()
}

/// Entmax `α_i = [((a−1)/a)(z_i − τ)]₊^{1/(a−1)}` with `τ` found by
/// bisection. Returns the renormalized distribution and the threshold.
pub fn entmax_slice(z: &[f64], a: f64, tol: f64) -> Result<(Vec<f64>, f64)> {
    if !(a > 1.0) || !a.is_finite() {
        return Err(AsmilError::domain(format!(
            "entmax exponent must exceed 1, got {a}"
        )));
    }
    if !(tol > 0.0) {
        return Err(AsmilError::domain(format!(
            "entmax tolerance must be positive, got {tol}"
        )));
    }
    if z.is_empty() {
        return Err(AsmilError::shape("entmax of an empty score vector"));
    }
    let scale = (a - 1.0) / a;
    let power = 1.0 / (a - 1.0);
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = z.len() as f64;
    // At `lo` the top entry alone has mass 1; at `hi` every entry is at most 1/n.
    let mut lo = max - 1.0 / scale;
    let mut hi = max - n.powf(1.0 - a) / scale;
    let f_lo = entmax_mass(z, lo, scale, power) - 1.0;
    let f_hi = entmax_mass(z, hi, scale, power) - 1.0;
    if f_lo < -tol || f_hi > tol {
        return Err(AsmilError::contract(format!(
            "entmax bisection failed to bracket the threshold ({f_lo}, {f_hi})"
        )));
    }
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..ENTMAX_MAX_ITERS {
        tau = 0.5 * (lo + hi);
        let excess = entmax_mass(z, tau, scale, power) - 1.0;
        if excess.abs() <= tol {
            break;
        }
        if excess > 0.0 {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    let mut p: Vec<f64> = z
        .iter()
        .map(|&v| {
            let base = scale * (v - tau);
            if base > 0.0 {
                base.powf(power)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(AsmilError::contract("entmax produced an empty support"));
    }
    for v in &mut p {
        *v /= total;
    }
    Ok((p, tau))
}

/// `−log softmax(logits)[label]`, computed through log-sum-exp.
pub fn cross_entropy_slice(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(AsmilError::domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

pub fn softmax_t(z: &ScoreVector, temperature: f64) -> Result<AttentionDistribution> {
    if !(temperature > 0.0) {
        return Err(AsmilError::domain(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    Ok(AttentionDistribution(softmax_slice(
        z.as_slice(),
        temperature,
    )))
}

/// Normalized sigmoid: `α_i = σ(z_i) / Σ_j σ(z_j)`.
pub fn nsf(z: &ScoreVector) -> AttentionDistribution {
    AttentionDistribution(nsf_slice(z.as_slice()))
}

pub fn entmax(z: &ScoreVector, a: f64, tol: f64) -> Result<AttentionDistribution> {
    entmax_slice(z.as_slice(), a, tol).map(|(p, _)| AttentionDistribution(p))
}

/// `ζ·softmax(z) + (1 − ζ)·nsf(z)`.
pub fn mixed_attention(z: &ScoreVector, p: MixedAttentionParam) -> AttentionDistribution {
    let zeta = p.zeta();
    let smx = softmax_slice(z.as_slice(), 1.0);
    let ns = nsf_slice(z.as_slice());
    AttentionDistribution(
        smx.iter()
            .zip(&ns)
            .map(|(s, n)| zeta * s + (1.0 - zeta) * n)
            .collect(),
    )
}

/// `Σ p_i log(p_i / q_i)` with both arguments floored at [`KL_FLOOR`].
pub fn kl_slice(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AsmilError::shape(format!(
            "KL between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let total: f64 = p
        .iter()
        .zip(q)
        .map(|(&pi, &qi)| {
            let pi = pi.max(KL_FLOOR);
            let qi = qi.max(KL_FLOOR);
            pi * (pi.ln() - qi.ln())
        })
        .sum();
    Ok(total.max(0.0))
}

pub fn jsd_slice(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(AsmilError::shape(format!(
            "JSD between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let value = 0.5 * kl_slice(p, &m)? + 0.5 * kl_slice(q, &m)?;
    Ok(value.clamp(0.0, std::f64::consts::LN_2))
}

pub fn kl(p: &AttentionDistribution, q: &AttentionDistribution) -> Result<f64> {
    kl_slice(p.as_slice(), q.as_slice())
}

/// Jensen-Shannon divergence, in nats; bounded by `ln 2`.
pub fn jsd(p: &AttentionDistribution, q: &AttentionDistribution) -> Result<f64> {
    jsd_slice(p.as_slice(), q.as_slice())
}

/// The map used to turn a row of scores into an attention row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionMap {
    Softmax {
        temperature: f64,
    },
    Nsf,
    Entmax {
        alpha: f64,
    },
    /// Blend driven by a `1 × 1` ξ variable supplied at application time.
    Mixed,
}

impl AttentionMap {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AttentionMap::Softmax { temperature } if !(temperature > 0.0) => Err(
                AsmilError::config("temperature", "softmax temperature must be positive"),
            ),
            AttentionMap::Entmax { alpha } if !(alpha > 1.0) => {
                Err(AsmilError::config("alpha", "entmax exponent must exceed 1"))
            }
            _ => Ok(()),
        }
    }

    /// Applies the map to every row of `scores`. `xi` is required for
    /// [`AttentionMap::Mixed`]; when absent ξ = 0 is used.
    pub fn apply_rows(&self, tape: &mut GradTape, scores: Var, xi: Option<Var>) -> Result<Var> {
        match *self {
            AttentionMap::Softmax { temperature } => tape.softmax_rows(scores, temperature),
            AttentionMap::Nsf => {
                let s = tape.sigmoid(scores);
                tape.normalize_rows(s)
            }
            AttentionMap::Entmax { alpha } => tape.entmax_rows(scores, alpha),
            AttentionMap::Mixed => {
                let xi = match xi {
                    Some(v) => v,
                    None => tape.leaf(crate::tensor::DenseMatrix::scalar(0.0)),
                };
                let zeta = tape.sigmoid(xi);
                let one_minus = tape.scale(zeta, -1.0);
                let one_minus = tape.offset(one_minus, 1.0);
                let smx = tape.softmax_rows(scores, 1.0)?;
                let s = tape.sigmoid(scores);
                let ns = tape.normalize_rows(s)?;
                let a = tape.scale_by(zeta, smx)?;
                let b = tape.scale_by(one_minus, ns)?;
                tape.add(a, b)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::DenseMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sv(z: &[f64]) -> ScoreVector {
        ScoreVector::new(z.to_vec()).unwrap()
    }

    fn dist(p: &[f64]) -> AttentionDistribution {
        AttentionDistribution::new(p.to_vec()).unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n)
            .map(|_| -rng.random::<f64>().max(1e-300).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_t(&sv(&[0.0, 0.0, 0.0]), 1.0).unwrap();
        for a in u.as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_t(&sv(&[2f64.ln(), 0.0]), 1.0).unwrap();
        assert!((p.as_slice()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / 3.0).abs() < 1e-15);
        let flat = softmax_t(&sv(&[3.0, 1.0, -2.0]), 1e6).unwrap();
        for a in flat.as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        assert!(matches!(
            softmax_t(&sv(&[1.0]), 0.0),
            Err(AsmilError::Domain(_))
        ));
        assert!(matches!(
            softmax_t(&sv(&[1.0]), -1.0),
            Err(AsmilError::Domain(_))
        ));
    }

    #[test]
    fn nsf_examples() {
        let u = nsf(&sv(&[0.0, 0.0, 0.0]));
        for a in u.as_slice() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = nsf(&sv(&[2.0, -2.0]));
        assert!((p.as_slice()[0] - sigmoid(2.0)).abs() < 1e-15);
        assert!((p.as_slice()[0] - 0.88080).abs() < 1e-5);
        assert!((p.as_slice()[1] - 0.11920).abs() < 1e-5);
    }

    #[test]
    fn nsf_respects_flattening_bounds() {
        // tau = 4.5, gamma = 0.5, two highs
        let p = nsf(&sv(&[5.0, 4.5, -5.0, -5.0, -5.0]));
        let a = p.as_slice();
        let ratio_bound = (1.0 + (-4.5f64).exp()) / (1.0 + (-5.0f64).exp());
        assert!(a[0] / a[1] <= ratio_bound * (1.0 + 1e-12));
        for &low in &a[2..] {
            assert!(low <= (-4.5f64).exp() / 2.0);
        }
    }

    #[test]
    fn nsf_is_not_shift_invariant() {
        assert_eq!(nsf(&sv(&[0.0, 0.0])), nsf(&sv(&[5.0, 5.0])));
        assert_ne!(nsf(&sv(&[1.0, 0.0])), nsf(&sv(&[2.0, 1.0])));
    }

    #[test]
    fn entmax_sparsemax_closed_form() {
        let p = entmax(&sv(&[1.0, 0.0]), 2.0, ENTMAX_TOLERANCE).unwrap();
        assert!((p.as_slice()[0] - 0.75).abs() < 1e-9);
        assert!((p.as_slice()[1] - 0.25).abs() < 1e-9);
        let (_, tau) = entmax_slice(&[1.0, 0.0], 2.0, ENTMAX_TOLERANCE).unwrap();
        assert!((tau + 0.5).abs() < 1e-9);
    }

    #[test]
    fn entmax_sparse_support() {
        let p = entmax(&sv(&[10.0, 0.0]), 2.0, ENTMAX_TOLERANCE).unwrap();
        assert_eq!(p.as_slice()[1], 0.0);
        assert!((p.as_slice()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn entmax_near_one_approaches_softmax() {
        let z = sv(&[1.0, 0.0, -1.0]);
        let e = entmax(&z, 1.0001, ENTMAX_TOLERANCE).unwrap();
        let s = softmax_t(&z, 1.0).unwrap();
        let linf = e
            .as_slice()
            .iter()
            .zip(s.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(linf < 1e-3, "linf = {linf}");
    }

    #[test]
    fn entmax_rejects_bad_exponent() {
        assert!(entmax(&sv(&[1.0]), 1.0, 1e-10).is_err());
        assert!(entmax(&sv(&[1.0]), 2.0, 0.0).is_err());
    }

    #[test]
    fn mixed_attention_boundaries() {
        let z = sv(&[1.3, -0.2, 0.7, -2.0]);
        let smx = softmax_t(&z, 1.0).unwrap();
        let ns = nsf(&z);
        let hi = mixed_attention(&z, MixedAttentionParam { xi: 38.0 });
        let lo = mixed_attention(&z, MixedAttentionParam { xi: -38.0 });
        for i in 0..4 {
            assert!((hi.as_slice()[i] - smx.as_slice()[i]).abs() < 1e-9);
            assert!((lo.as_slice()[i] - ns.as_slice()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn mixed_attention_midpoint_is_mean() {
        let z = sv(&[1.0, -1.0]);
        let smx = softmax_slice(z.as_slice(), 1.0);
        let ns = nsf_slice(z.as_slice());
        let mid = mixed_attention(&z, MixedAttentionParam::default());
        for i in 0..2 {
            assert!((mid.as_slice()[i] - 0.5 * (smx[i] + ns[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[0.2, 0.3, 0.5]);
        assert_eq!(kl(&p, &p).unwrap(), 0.0);
        let v = kl(&dist(&[1.0, 0.0]), &dist(&[0.5, 0.5])).unwrap();
        // the 1e-12 floor on the zero entry shifts the value by about 2e-11
        assert!((v - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn kl_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_simplex(&mut rng, 5);
        let q = random_simplex(&mut rng, 5);
        let mut reference = 0.0;
        for i in 0..5 {
            reference += p[i] * (p[i] / q[i]).ln();
        }
        assert!((kl_slice(&p, &q).unwrap() - reference).abs() < 1e-12);
    }

    #[test]
    fn divergences_reject_length_mismatch() {
        assert!(matches!(
            kl_slice(&[1.0], &[0.5, 0.5]),
            Err(AsmilError::Shape(_))
        ));
        assert!(matches!(
            jsd_slice(&[1.0], &[0.5, 0.5]),
            Err(AsmilError::Shape(_))
        ));
    }

    #[test]
    fn jsd_examples() {
        let p = dist(&[0.1, 0.9]);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let d = jsd(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap();
        assert!((d - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn jsd_symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let n = rng.random_range(1..10);
            let p = random_simplex(&mut rng, n);
            let q = random_simplex(&mut rng, n);
            let a = jsd_slice(&p, &q).unwrap();
            let b = jsd_slice(&q, &p).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!((0.0..=std::f64::consts::LN_2).contains(&a));
        }
    }

    #[test]
    fn mixed_map_gradient_reaches_xi() {
        let mut tape = GradTape::new();
        let z = tape.leaf(DenseMatrix::row_vector(vec![2.0, -1.0, 0.5]));
        let xi = tape.leaf(DenseMatrix::scalar(0.3));
        let a = AttentionMap::Mixed
            .apply_rows(&mut tape, z, Some(xi))
            .unwrap();
        let w = tape.leaf(DenseMatrix::row_vector(vec![1.0, -2.0, 0.5]));
        let y = tape.mul(a, w).unwrap();
        let l = tape.sum(y);
        let g = tape.backward(l).unwrap();
        let analytic = g.wrt(xi).item().unwrap();
        let eval = |x: f64| {
            let out = mixed_attention(
                &ScoreVector::new(vec![2.0, -1.0, 0.5]).unwrap(),
                MixedAttentionParam { xi: x },
            );
            out.as_slice()[0] - 2.0 * out.as_slice()[1] + 0.5 * out.as_slice()[2]
        };
        let numeric = (eval(0.3 + 1e-5) - eval(0.3 - 1e-5)) / 2e-5;
        assert!((analytic - numeric).abs() < 1e-8);
    }

    fn check_simplex(p: &[f64]) -> std::result::Result<(), TestCaseError> {
        prop_assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < SIMPLEX_TOLERANCE);
        Ok(())
    }

    proptest! {
        #[test]
        fn every_map_lands_on_the_simplex(z in prop::collection::vec(-30.0f64..30.0, 1..12), xi in -5.0f64..5.0) {
            let z = ScoreVector::new(z).unwrap();
            check_simplex(softmax_t(&z, 0.7).unwrap().as_slice())?;
            check_simplex(nsf(&z).as_slice())?;
            check_simplex(entmax(&z, 1.5, ENTMAX_TOLERANCE).unwrap().as_slice())?;
            check_simplex(entmax(&z, 2.0, ENTMAX_TOLERANCE).unwrap().as_slice())?;
            check_simplex(mixed_attention(&z, MixedAttentionParam { xi }).as_slice())?;
        }

        #[test]
        fn softmax_is_shift_invariant(z in prop::collection::vec(-10.0f64..10.0, 1..10), c in -50.0f64..50.0) {
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let a = softmax_slice(&z, 1.0);
            let b = softmax_slice(&shifted, 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn maps_preserve_score_order(z in prop::collection::vec(-8.0f64..8.0, 2..10)) {
            let smx = softmax_slice(&z, 1.0);
            let ns = nsf_slice(&z);
            let (em, _) = entmax_slice(&z, 1.5, ENTMAX_TOLERANCE).unwrap();
            for i in 0..z.len() {
                for j in 0..z.len() {
                    if z[i] > z[j] {
                        prop_assert!(smx[i] > smx[j]);
                        prop_assert!(ns[i] > ns[j]);
                        prop_assert!(em[i] >= em[j]);
                    }
                }
            }
        }
    }
}
