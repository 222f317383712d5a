//! The loss family and its analytic gradients.
//!
//! Every loss here sees the data the same way: an *anchor* `(u, i)` — an
//! observed interaction — plus a candidate list of items `j` sampled for that
//! anchor (the anchor's own item appears in the list exactly once).  The raw
//! signal per candidate is the score gap `d_j = f(u, j) - f(u, i)`.
//!
//! * **PSL** pools tempered activation values:
//!   `log sum_j sigma(d_j)^(1/tau)` (*outside* placement) or
//!   `log sum_j sigma(d_j / tau)` (*inside*).  Outside keeps the
//!   softmax-style normalized weight structure; inside is provided for
//!   comparison and is empirically the weaker choice.
//! * **SL** is the sampled softmax loss `log sum_j exp(d_j / tau)`,
//!   implemented directly on exponentials.  It coincides with
//!   PSL(`exp`, outside) identically — the two code paths are kept separate
//!   precisely so tests can confirm the identity numerically instead of by
//!   construction.
//! * **BPR** sums `softplus(d_j)` over the non-self candidates (a sum of
//!   independent pairwise logistic losses — no normalization across the
//!   candidate list).
//! * **BSL** computes per-anchor SL losses at temperature `tau2`, then pools
//!   them across the whole batch with a second log-mean-exp at temperature
//!   `tau1`, up-weighting the hardest anchors.
//!
//! Gradients are analytic.  For an outside-placement PSL anchor, candidate
//! `j` receives the normalized weight
//!
//! ```text
//! w_j = sigma'(d_j) * sigma(d_j)^(1/tau - 1) / (tau * sum_k sigma(d_k)^(1/tau))
//! ```
//!
//! computed in log space so that small temperatures neither overflow nor
//! lose the normalization.  The anchor's positive score receives `-sum_j w_j`.
//! Where the activation clamp is active (raw `sigma` at the floor) the loss
//! is locally constant and the weight is exactly zero.

use serde::Serialize;

use crate::activations::{ActivationKind, LN_SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::model::{add_score_grad, Scorer, SparseGrads};

/// Where the temperature enters the activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// `sigma(d)^(1/tau)` — the default.
    Outside,
    /// `sigma(d / tau)`.
    Inside,
}

/// A fully specified training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Psl {
        activation: ActivationKind,
        tau: f64,
        placement: Placement,
    },
    Sl {
        tau: f64,
    },
    Bpr,
    Bsl {
        tau1: f64,
        tau2: f64,
    },
}

fn check_tau(name: &str, tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!(
            "{name} must be a positive finite number, got {tau}"
        )));
    }
    Ok(())
}

impl LossSpec {
    pub fn psl(activation: ActivationKind, tau: f64, placement: Placement) -> Result<Self> {
        check_tau("tau", tau)?;
        Ok(LossSpec::Psl {
            activation,
            tau,
            placement,
        })
    }

    pub fn sl(tau: f64) -> Result<Self> {
        check_tau("tau", tau)?;
        Ok(LossSpec::Sl { tau })
    }

    pub fn bpr() -> Self {
        LossSpec::Bpr
    }

    pub fn bsl(tau1: f64, tau2: f64) -> Result<Self> {
        check_tau("tau1", tau1)?;
        check_tau("tau2", tau2)?;
        Ok(LossSpec::Bsl { tau1, tau2 })
    }

    /// Whether this spec is (an alias of) the plain softmax loss.
    pub fn is_softmax_equivalent(&self) -> bool {
        matches!(
            self,
            LossSpec::Sl { .. }
                | LossSpec::Psl {
                    activation: ActivationKind::Exp,
                    placement: Placement::Outside,
                    ..
                }
        )
    }
}

impl std::fmt::Display for LossSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossSpec::Psl {
                activation,
                tau,
                placement,
            } => {
                let p = match placement {
                    Placement::Outside => "outside",
                    Placement::Inside => "inside",
                };
                write!(f, "psl({activation}, tau={tau}, {p})")
            }
            LossSpec::Sl { tau } => write!(f, "sl(tau={tau})"),
            LossSpec::Bpr => write!(f, "bpr"),
            LossSpec::Bsl { tau1, tau2 } => write!(f, "bsl(tau1={tau1}, tau2={tau2})"),
        }
    }
}

/// Score gap of a candidate against the anchor positive.
pub fn pair_gap(f_uj: f64, f_ui: f64) -> f64 {
    f_uj - f_ui
}

/// `log sum_j exp(x_j)` with max subtraction; `-inf` for an all-`-inf` input.
fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m.is_infinite() {
        return m;
    }
    let sum: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + sum.ln()
}

/// `ln(1 + e^x)` without overflow or cancellation.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `1 / (1 + e^-x)`, stable on both tails.
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One anchor's PSL value over its candidate gaps.
pub fn psl_anchor_loss(
    gaps: &[f64],
    activation: ActivationKind,
    tau: f64,
    placement: Placement,
) -> f64 {
    debug_assert!(!gaps.is_empty());
    let terms: Vec<f64> = match placement {
        Placement::Outside => gaps.iter().map(|&d| activation.log_value(d) / tau).collect(),
        Placement::Inside => gaps.iter().map(|&d| activation.log_value(d / tau)).collect(),
    };
    logsumexp(&terms)
}

/// One anchor's softmax loss `log sum_j exp(d_j / tau)`, written directly on
/// exponentials (deliberately *not* routed through the activation table; see
/// the module docs).
pub fn sl_anchor_loss(gaps: &[f64], tau: f64) -> f64 {
    debug_assert!(!gaps.is_empty());
    let m = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = gaps.iter().map(|&d| ((d - m) / tau).exp()).sum();
    m / tau + sum.ln()
}

/// One anchor's BPR value: `sum_j softplus(d_j)` over gaps that must already
/// exclude the self pair.
pub fn bpr_anchor_loss(gaps: &[f64]) -> f64 {
    gaps.iter().map(|&d| softplus(d)).sum()
}

/// Pool per-anchor losses with `tau1 * log mean_a exp(loss_a / tau1)`.
pub fn bsl_user_loss(anchor_losses: &[f64], tau1: f64) -> f64 {
    debug_assert!(!anchor_losses.is_empty());
    let scaled: Vec<f64> = anchor_losses.iter().map(|&l| l / tau1).collect();
    tau1 * (logsumexp(&scaled) - (anchor_losses.len() as f64).ln())
}

/// The gradient weight a single candidate gap receives under `spec`, before
/// any within-anchor normalization.  Defined for the pairwise-decomposable
/// specs (everything except inside-placement PSL).
pub fn pair_weight(spec: &LossSpec, d: f64) -> Result<f64> {
    match *spec {
        LossSpec::Psl {
            activation,
            tau,
            placement: Placement::Outside,
        } => {
            if activation.is_floored(d) {
                return Ok(0.0);
            }
            let log_deriv = activation.log_deriv(d);
            if log_deriv == f64::NEG_INFINITY {
                return Ok(0.0);
            }
            let log_w = log_deriv + (1.0 / tau - 1.0) * activation.log_value(d) - tau.ln();
            Ok(log_w.exp())
        }
        LossSpec::Psl {
            placement: Placement::Inside,
            ..
        } => Err(Error::config(
            "pair weights are defined for outside placement only",
        )),
        LossSpec::Sl { tau } => Ok((d / tau).exp() / tau),
        LossSpec::Bpr => Ok(sigmoid(d)),
        LossSpec::Bsl { tau2, .. } => Ok((d / tau2).exp() / tau2),
    }
}

/// Anchors plus their candidate lists.
///
/// Invariant (checked): parallel non-empty vectors, and every candidate list
/// contains its anchor's item exactly once.  Candidates may repeat otherwise —
/// they are draws with replacement, and each occurrence is a separate term.
#[derive(Debug, Clone)]
pub struct BatchSample {
    anchors: Vec<(u32, u32)>,
    candidates: Vec<Vec<u32>>,
}

impl BatchSample {
    pub fn new(anchors: Vec<(u32, u32)>, candidates: Vec<Vec<u32>>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::config("batch has no anchors"));
        }
        if anchors.len() != candidates.len() {
            return Err(Error::config(format!(
                "{} anchors but {} candidate lists",
                anchors.len(),
                candidates.len()
            )));
        }
        for (a, (&(_, item), cands)) in anchors.iter().zip(&candidates).enumerate() {
            let self_count = cands.iter().filter(|&&j| j == item).count();
            if self_count != 1 {
                return Err(Error::config(format!(
                    "anchor {a}: candidate list must contain the anchor item exactly once, found {self_count}"
                )));
            }
        }
        Ok(Self {
            anchors,
            candidates,
        })
    }

    pub fn anchors(&self) -> &[(u32, u32)] {
        &self.anchors
    }

    pub fn candidates(&self) -> &[Vec<u32>] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Per-candidate *normalized* gradient weights for one anchor, i.e.
/// `d loss_a / d d_j` for every candidate occurrence, plus the anchor loss.
fn anchor_loss_and_weights(spec: &LossSpec, gaps: &[f64]) -> (f64, Vec<f64>) {
    match *spec {
        LossSpec::Psl {
            activation,
            tau,
            placement: Placement::Outside,
        } => {
            let log_values: Vec<f64> = gaps.iter().map(|&d| activation.log_value(d)).collect();
            let terms: Vec<f64> = log_values.iter().map(|&lv| lv / tau).collect();
            let lse = logsumexp(&terms);
            let weights = gaps
                .iter()
                .zip(&log_values)
                .map(|(&d, &lv)| {
                    if lv <= LN_SIGMA_FLOOR {
                        return 0.0;
                    }
                    let log_deriv = activation.log_deriv(d);
                    if log_deriv == f64::NEG_INFINITY {
                        return 0.0;
                    }
                    (log_deriv + (1.0 / tau - 1.0) * lv - tau.ln() - lse).exp()
                })
                .collect();
            (lse, weights)
        }
        LossSpec::Psl {
            activation,
            tau,
            placement: Placement::Inside,
        } => {
            let scaled: Vec<f64> = gaps.iter().map(|&d| d / tau).collect();
            let log_values: Vec<f64> = scaled.iter().map(|&x| activation.log_value(x)).collect();
            let lse = logsumexp(&log_values);
            let weights = scaled
                .iter()
                .zip(&log_values)
                .map(|(&x, &lv)| {
                    if lv <= LN_SIGMA_FLOOR {
                        return 0.0;
                    }
                    let log_deriv = activation.log_deriv(x);
                    if log_deriv == f64::NEG_INFINITY {
                        return 0.0;
                    }
                    (log_deriv - tau.ln() - lse).exp()
                })
                .collect();
            (lse, weights)
        }
        LossSpec::Sl { tau } | LossSpec::Bsl { tau2: tau, .. } => {
            let m = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = gaps.iter().map(|&d| ((d - m) / tau).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let loss = m / tau + sum.ln();
            let weights = exps.iter().map(|&e| e / (sum * tau)).collect();
            (loss, weights)
        }
        LossSpec::Bpr => {
            // Handled by the caller (needs the self-pair position); anchors
            // never reach here.
            unreachable!("bpr weights are computed against the candidate list")
        }
    }
}

/// Loss value and sparse embedding gradients for one batch.
///
/// For PSL/SL/BPR the returned loss is the mean over anchors and the
/// gradients are of that mean; for BSL it is the batch-pooled value.  A
/// non-finite outcome (diverged scores, overflowed pooling) is reported as a
/// numeric error rather than silently propagated.
pub fn batch_loss_and_grads(
    scorer: &Scorer<'_>,
    batch: &BatchSample,
    spec: &LossSpec,
) -> Result<(f64, SparseGrads)> {
    let dim = scorer.dim();
    let mut grads = SparseGrads::default();
    let n_anchors = batch.len() as f64;

    // Applies one anchor's candidate weights to the embedding gradients:
    // +w_j on each candidate occurrence, -sum(w) on the anchor positive.
    let apply_anchor =
        |grads: &mut SparseGrads, user: u32, item: u32, cands: &[u32], weights: &[f64]| {
            let user_row = scorer.user_row(user);
            let mut user_acc = vec![0.0; dim];
            let mut total_weight = 0.0;
            for (&j, &w) in cands.iter().zip(weights) {
                if w == 0.0 {
                    continue;
                }
                total_weight += w;
                let item_grad = grads.item_row_mut(j, dim);
                add_score_grad(user_row, scorer.item_row(j), w, &mut user_acc, item_grad);
            }
            if total_weight != 0.0 {
                let item_grad = grads.item_row_mut(item, dim);
                add_score_grad(
                    user_row,
                    scorer.item_row(item),
                    -total_weight,
                    &mut user_acc,
                    item_grad,
                );
            }
            let user_grad = grads.user_row_mut(user, dim);
            for (g, a) in user_grad.iter_mut().zip(&user_acc) {
                *g += a;
            }
        };

    let loss = match *spec {
        LossSpec::Psl { .. } | LossSpec::Sl { .. } => {
            let mut total = 0.0;
            for (&(user, item), cands) in batch.anchors().iter().zip(batch.candidates()) {
                let f_ui = scorer.score(user, item);
                let gaps: Vec<f64> = cands
                    .iter()
                    .map(|&j| pair_gap(scorer.score(user, j), f_ui))
                    .collect();
                let (anchor_loss, mut weights) = anchor_loss_and_weights(spec, &gaps);
                total += anchor_loss;
                for w in &mut weights {
                    *w /= n_anchors;
                }
                apply_anchor(&mut grads, user, item, cands, &weights);
            }
            total / n_anchors
        }
        LossSpec::Bpr => {
            let mut total = 0.0;
            for (&(user, item), cands) in batch.anchors().iter().zip(batch.candidates()) {
                let f_ui = scorer.score(user, item);
                // Skip exactly one occurrence of the anchor item.
                let mut self_seen = false;
                let mut kept: Vec<u32> = Vec::with_capacity(cands.len().saturating_sub(1));
                for &j in cands {
                    if !self_seen && j == item {
                        self_seen = true;
                        continue;
                    }
                    kept.push(j);
                }
                let gaps: Vec<f64> = kept
                    .iter()
                    .map(|&j| pair_gap(scorer.score(user, j), f_ui))
                    .collect();
                total += bpr_anchor_loss(&gaps);
                let weights: Vec<f64> =
                    gaps.iter().map(|&d| sigmoid(d) / n_anchors).collect();
                apply_anchor(&mut grads, user, item, &kept, &weights);
            }
            total / n_anchors
        }
        LossSpec::Bsl { tau1, tau2: _ } => {
            // Pass 1: per-anchor softmax losses and inner weights.
            let mut anchor_losses = Vec::with_capacity(batch.len());
            let mut inner_weights: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
            for (&(user, item), cands) in batch.anchors().iter().zip(batch.candidates()) {
                let f_ui = scorer.score(user, item);
                let gaps: Vec<f64> = cands
                    .iter()
                    .map(|&j| pair_gap(scorer.score(user, j), f_ui))
                    .collect();
                let (anchor_loss, weights) = anchor_loss_and_weights(spec, &gaps);
                anchor_losses.push(anchor_loss);
                inner_weights.push(weights);
            }
            // Pass 2: batch pooling and the outer softmax over anchors.
            let pooled = bsl_user_loss(&anchor_losses, tau1);
            let m = anchor_losses
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let outer_raw: Vec<f64> = anchor_losses
                .iter()
                .map(|&l| ((l - m) / tau1).exp())
                .collect();
            let outer_sum: f64 = outer_raw.iter().sum();
            for ((&(user, item), cands), (outer, mut weights)) in batch
                .anchors()
                .iter()
                .zip(batch.candidates())
                .zip(outer_raw.into_iter().zip(inner_weights))
            {
                let scale = outer / outer_sum;
                for w in &mut weights {
                    *w *= scale;
                }
                apply_anchor(&mut grads, user, item, cands, &weights);
            }
            pooled
        }
    };

    if !loss.is_finite() {
        return Err(Error::numeric(format!(
            "batch loss for {spec} is not finite ({loss})"
        )));
    }
    if !grads.is_finite() {
        return Err(Error::numeric(format!(
            "batch gradients for {spec} contain non-finite entries"
        )));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EmbeddingModel, Backbone, Matrix};
    use crate::rng::SeededRng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    // ------------------------------------------------------------------
    // Frozen scalar values (computed independently from the definitions)
    // ------------------------------------------------------------------

    #[test]
    fn psl_anchor_loss_frozen_values() {
        // exp, tau = 0.5, outside: log(e^0 + e^{-0.4}) = log(1 + e^{-0.4}).
        assert_relative_eq!(
            psl_anchor_loss(&[0.0, -0.2], ActivationKind::Exp, 0.5, Placement::Outside),
            0.5130152523999526,
            max_relative = 1e-14
        );
        // relu_shift, tau = 0.5, outside: log(1^2 + 0.8^2) = log(1.64).
        assert_relative_eq!(
            psl_anchor_loss(
                &[0.0, -0.2],
                ActivationKind::ReluShift,
                0.5,
                Placement::Outside
            ),
            0.494696241836107,
            max_relative = 1e-14
        );
    }

    #[test]
    fn exp_inside_equals_exp_outside() {
        // (e^d)^(1/tau) = e^(d/tau): for exp the two placements coincide.
        let gaps = [0.0, -0.2, 0.31, -0.44];
        for tau in [0.1, 0.5, 2.0] {
            let o = psl_anchor_loss(&gaps, ActivationKind::Exp, tau, Placement::Outside);
            let i = psl_anchor_loss(&gaps, ActivationKind::Exp, tau, Placement::Inside);
            assert_relative_eq!(o, i, max_relative = 1e-13);
        }
    }

    #[test]
    fn bpr_anchor_loss_frozen_value() {
        assert_relative_eq!(
            bpr_anchor_loss(&[-0.2]),
            0.5981388693815918, // log(1 + e^{-0.2})
            max_relative = 1e-14
        );
    }

    #[test]
    fn bsl_user_loss_frozen_value() {
        // 0.5 * log((1 + e^2) / 2).
        assert_relative_eq!(
            bsl_user_loss(&[0.0, 1.0], 0.5),
            0.7168904152415136,
            max_relative = 1e-14
        );
    }

    #[test]
    fn bsl_pooling_limits() {
        let losses = [0.3, 0.9, 0.55];
        // Large tau1: arithmetic mean.  Rounding inside ln() is amplified by
        // tau1, so the tolerance scales with it.
        let mean = losses.iter().sum::<f64>() / 3.0;
        assert_relative_eq!(bsl_user_loss(&losses, 1e6), mean, max_relative = 1e-6);
        // Tiny tau1: the maximum, approached from below at rate tau1 * ln(n).
        assert_relative_eq!(bsl_user_loss(&losses, 1e-9), 0.9, epsilon = 1e-8);
    }

    #[test]
    fn pair_weight_frozen_values() {
        let sl = LossSpec::sl(0.2).unwrap();
        assert_relative_eq!(
            pair_weight(&sl, 0.1).unwrap(),
            8.24360635350064, // e^{0.5} / 0.2
            max_relative = 1e-14
        );
        assert_relative_eq!(
            pair_weight(&sl, -1.0).unwrap(),
            0.03368973499542733, // e^{-5} / 0.2
            max_relative = 1e-14
        );
        assert_relative_eq!(
            pair_weight(&sl, 1.0).unwrap(),
            742.0657955128829, // e^{5} / 0.2
            max_relative = 1e-14
        );
        // BPR's weight is the logistic sigmoid.
        assert_relative_eq!(
            pair_weight(&LossSpec::bpr(), 0.0).unwrap(),
            0.5,
            max_relative = 1e-15
        );
    }

    #[test]
    fn pair_weight_exp_matches_direct_softmax_form() {
        // The generalized form sigma'(d) sigma(d)^{1/tau-1} / tau collapses to
        // e^{d/tau} / tau when sigma = exp.
        for tau in [0.05, 0.2, 1.0] {
            let psl = LossSpec::psl(ActivationKind::Exp, tau, Placement::Outside).unwrap();
            let sl = LossSpec::sl(tau).unwrap();
            for d in [-1.0, -0.3, 0.0, 0.4, 1.0] {
                let a = pair_weight(&psl, d).unwrap();
                let b = pair_weight(&sl, d).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn pair_weight_zero_in_clamped_regions() {
        let relu = LossSpec::psl(ActivationKind::ReluShift, 0.2, Placement::Outside).unwrap();
        assert_eq!(pair_weight(&relu, -1.0).unwrap(), 0.0);
        assert_eq!(pair_weight(&relu, -1.5).unwrap(), 0.0);
        let atan = LossSpec::psl(ActivationKind::AtanPlusOne, 0.2, Placement::Outside).unwrap();
        // atan_plus_one goes below the floor left of tan(-1) ~ -1.557.
        assert_eq!(pair_weight(&atan, -3.0).unwrap(), 0.0);
        assert!(pair_weight(&atan, -1.0).unwrap() > 0.0);
    }

    #[test]
    fn pair_weight_rejects_inside_placement() {
        let spec = LossSpec::psl(ActivationKind::TanhPlusOne, 0.2, Placement::Inside).unwrap();
        assert!(pair_weight(&spec, 0.0).is_err());
    }

    #[test]
    fn spec_constructors_validate_temperatures() {
        assert!(LossSpec::sl(0.0).is_err());
        assert!(LossSpec::sl(-1.0).is_err());
        assert!(LossSpec::sl(f64::NAN).is_err());
        assert!(LossSpec::psl(ActivationKind::Exp, 0.0, Placement::Outside).is_err());
        assert!(LossSpec::bsl(1.0, 0.0).is_err());
        assert!(LossSpec::bsl(0.0, 1.0).is_err());
        assert!(LossSpec::sl(0.2).unwrap().is_softmax_equivalent());
        assert!(LossSpec::psl(ActivationKind::Exp, 0.2, Placement::Outside)
            .unwrap()
            .is_softmax_equivalent());
        assert!(!LossSpec::psl(ActivationKind::Exp, 0.2, Placement::Inside)
            .unwrap()
            .is_softmax_equivalent());
    }

    // ------------------------------------------------------------------
    // Batch loss + gradients
    // ------------------------------------------------------------------

    /// A small random model and a batch over it.
    fn setup(seed: u64) -> (EmbeddingModel, BatchSample) {
        let mut rng = SeededRng::new(seed);
        let model = EmbeddingModel::init(6, 8, 5, Backbone::Mf, &mut rng).unwrap();
        let anchors = vec![(0u32, 1u32), (2, 4), (5, 7), (2, 4)];
        let candidates = anchors
            .iter()
            .map(|&(_, item)| {
                let mut c: Vec<u32> = (0..4)
                    .map(|_| loop {
                        let j = rng.random_range(0..8u32);
                        if j != item {
                            break j;
                        }
                    })
                    .collect();
                // Duplicate one negative on purpose: draws are with replacement.
                c.push(c[0]);
                c.push(item);
                c
            })
            .collect();
        (model, BatchSample::new(anchors, candidates).unwrap())
    }

    fn all_specs() -> Vec<LossSpec> {
        vec![
            LossSpec::sl(0.2).unwrap(),
            LossSpec::psl(ActivationKind::Exp, 0.2, Placement::Outside).unwrap(),
            LossSpec::psl(ActivationKind::TanhPlusOne, 0.2, Placement::Outside).unwrap(),
            LossSpec::psl(ActivationKind::AtanPlusOne, 0.5, Placement::Outside).unwrap(),
            LossSpec::psl(ActivationKind::ReluShift, 0.3, Placement::Outside).unwrap(),
            LossSpec::psl(ActivationKind::ExpExp, 0.8, Placement::Outside).unwrap(),
            LossSpec::psl(ActivationKind::AtanPlusOne, 0.5, Placement::Inside).unwrap(),
            LossSpec::psl(ActivationKind::TanhPlusOne, 0.25, Placement::Inside).unwrap(),
            LossSpec::bpr(),
            LossSpec::bsl(0.5, 0.2).unwrap(),
        ]
    }

    fn batch_loss_of(model: &EmbeddingModel, batch: &BatchSample, spec: &LossSpec) -> f64 {
        let scorer = Scorer::new(&model.users, &model.items);
        batch_loss_and_grads(&scorer, batch, spec).unwrap().0
    }

    #[test]
    fn gradients_match_finite_differences_for_every_spec() {
        let (model, batch) = setup(11);
        let eps = 1e-6;
        for spec in all_specs() {
            let scorer = Scorer::new(&model.users, &model.items);
            let (_, grads) = batch_loss_and_grads(&scorer, &batch, &spec).unwrap();

            let check = |is_user: bool, row: usize, col: usize, analytic: f64| {
                let mut perturbed = model.clone();
                let m = if is_user {
                    &mut perturbed.users
                } else {
                    &mut perturbed.items
                };
                m.row_mut(row)[col] += eps;
                let up = batch_loss_of(&perturbed, &batch, &spec);
                let m = if is_user {
                    &mut perturbed.users
                } else {
                    &mut perturbed.items
                };
                m.row_mut(row)[col] -= 2.0 * eps;
                let down = batch_loss_of(&perturbed, &batch, &spec);
                let fd = (up - down) / (2.0 * eps);
                assert!(
                    (analytic - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{spec}: {} row {row} col {col}: analytic {analytic} vs fd {fd}",
                    if is_user { "user" } else { "item" },
                );
            };

            for r in 0..model.n_users() {
                for c in 0..model.dim() {
                    let g = grads
                        .users
                        .get(&(r as u32))
                        .map_or(0.0, |row| row[c]);
                    check(true, r, c, g);
                }
            }
            for r in 0..model.n_items() {
                for c in 0..model.dim() {
                    let g = grads
                        .items
                        .get(&(r as u32))
                        .map_or(0.0, |row| row[c]);
                    check(false, r, c, g);
                }
            }
        }
    }

    #[test]
    fn psl_exp_outside_agrees_with_direct_sl_route() {
        for seed in 0..20u64 {
            let (model, batch) = setup(seed);
            let scorer = Scorer::new(&model.users, &model.items);
            for tau in [0.05, 0.2, 1.0] {
                let psl = LossSpec::psl(ActivationKind::Exp, tau, Placement::Outside).unwrap();
                let sl = LossSpec::sl(tau).unwrap();
                let (loss_a, grads_a) = batch_loss_and_grads(&scorer, &batch, &psl).unwrap();
                let (loss_b, grads_b) = batch_loss_and_grads(&scorer, &batch, &sl).unwrap();
                assert!(
                    (loss_a - loss_b).abs() <= 1e-12 * (1.0 + loss_b.abs()),
                    "loss mismatch at tau={tau}: {loss_a} vs {loss_b}"
                );
                assert_eq!(grads_a.users.keys().collect::<Vec<_>>(), grads_b.users.keys().collect::<Vec<_>>());
                for (key, row_a) in &grads_a.users {
                    let row_b = &grads_b.users[key];
                    for (a, b) in row_a.iter().zip(row_b) {
                        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                    }
                }
                for (key, row_a) in &grads_a.items {
                    let row_b = &grads_b.items[key];
                    for (a, b) in row_a.iter().zip(row_b) {
                        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn loss_is_invariant_to_candidate_order() {
        let (model, batch) = setup(3);
        let scorer = Scorer::new(&model.users, &model.items);
        let reversed = BatchSample::new(
            batch.anchors().to_vec(),
            batch
                .candidates()
                .iter()
                .map(|c| c.iter().rev().copied().collect())
                .collect(),
        )
        .unwrap();
        for spec in all_specs() {
            let (a, grads_a) = batch_loss_and_grads(&scorer, &batch, &spec).unwrap();
            let (b, grads_b) = batch_loss_and_grads(&scorer, &reversed, &spec).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{spec}: {a} vs {b}");
            for (key, row_a) in &grads_a.users {
                let row_b = &grads_b.users[key];
                for (x, y) in row_a.iter().zip(row_b) {
                    assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
                }
            }
        }
    }

    #[test]
    fn bpr_skips_exactly_one_self_occurrence() {
        // One anchor, candidates [self, j]: the loss must be softplus(d_j)
        // alone, not softplus(0) + softplus(d_j).
        let mut users = Matrix::zeros(1, 2);
        users.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        let mut items = Matrix::zeros(2, 2);
        items.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        items.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        let scorer = Scorer::new(&users, &items);
        let batch = BatchSample::new(vec![(0, 0)], vec![vec![0, 1]]).unwrap();
        let (loss, _) = batch_loss_and_grads(&scorer, &batch, &LossSpec::bpr()).unwrap();
        // d_1 = 0 - 0.5 = -0.5.
        assert_relative_eq!(loss, softplus(-0.5), max_relative = 1e-14);
    }

    #[test]
    fn batch_sample_validates_self_occurrence() {
        assert!(BatchSample::new(vec![(0, 1)], vec![vec![2, 3]]).is_err());
        assert!(BatchSample::new(vec![(0, 1)], vec![vec![1, 1, 2]]).is_err());
        assert!(BatchSample::new(vec![(0, 1)], vec![vec![1, 2]]).is_ok());
        assert!(BatchSample::new(vec![], vec![]).is_err());
        assert!(BatchSample::new(vec![(0, 1)], vec![]).is_err());
    }

    #[test]
    fn non_finite_scores_surface_as_numeric_errors() {
        let mut users = Matrix::zeros(1, 2);
        users.row_mut(0).copy_from_slice(&[f64::NAN, 0.0]);
        let mut items = Matrix::zeros(2, 2);
        items.row_mut(0).copy_from_slice(&[1.0, 0.0]);
        items.row_mut(1).copy_from_slice(&[0.0, 1.0]);
        let scorer = Scorer::new(&users, &items);
        let batch = BatchSample::new(vec![(0, 0)], vec![vec![0, 1]]).unwrap();
        let spec = LossSpec::sl(0.2).unwrap();
        assert!(matches!(
            batch_loss_and_grads(&scorer, &batch, &spec),
            Err(Error::Numeric(_))
        ));
    }

    proptest! {
        #[test]
        fn anchor_loss_is_monotone_in_each_gap(
            gaps in prop::collection::vec(-0.9f64..0.9, 2..6),
            bump_idx in 0usize..6,
            bump in 0.01f64..0.3,
            tau in 0.1f64..1.0,
        ) {
            let idx = bump_idx % gaps.len();
            for kind in [
                ActivationKind::Exp,
                ActivationKind::TanhPlusOne,
                ActivationKind::AtanPlusOne,
                ActivationKind::ReluShift,
            ] {
                let before = psl_anchor_loss(&gaps, kind, tau, Placement::Outside);
                let mut bumped = gaps.clone();
                bumped[idx] += bump;
                let after = psl_anchor_loss(&bumped, kind, tau, Placement::Outside);
                prop_assert!(
                    after >= before - 1e-12,
                    "{kind}: loss decreased from {before} to {after}"
                );
            }
        }

        #[test]
        fn sl_anchor_loss_never_below_tempered_top_gap(
            gaps in prop::collection::vec(-0.9f64..0.9, 1..8),
            tau in 0.05f64..1.0,
        ) {
            // log-sum-exp dominates its largest term.
            let top = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(sl_anchor_loss(&gaps, tau) >= top / tau - 1e-12);
        }
    }
}
