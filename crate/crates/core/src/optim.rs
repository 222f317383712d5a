//! Adam with sparse embedding-row updates and the seeded training loop.
//!
//! The optimizer keeps full moment matrices but a step only visits the rows
//! the batch touched; their moments advance with the *global* step counter,
//! so a rarely-seen row gets the same bias correction an always-seen row
//! would at that step.  Weight decay enters as an L2 term added to the
//! gradient before the moment updates.
//!
//! [`train`] owns the epoch/batch loop: shuffle all (user, positive) anchors,
//! sample candidates per anchor, recompute graph propagation per batch when
//! the backbone needs it, step, and periodically score the model on the
//! selection set (validation when present, test otherwise).  The best
//! checkpoint by NDCG@20 and the final state are both returned along with
//! the per-epoch history.
//!
//! Randomness is split by component stream — initialization, shuffling, and
//! negative sampling never share a sequence — so runs are reproducible to
//! the bit and adding draws in one component leaves the others unchanged.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{sample_negatives, Dataset, SplitBundle};
use crate::error::{Error, Result};
use crate::losses::{batch_loss_and_grads, BatchSample, LossSpec};
use crate::metrics::evaluate_against;
use crate::model::{
    lightgcn_backprop, lightgcn_propagate, Backbone, EmbeddingModel, Matrix,
    NormalizedAdjacency, Scorer, SparseGrads, NORM_FLOOR,
};
use crate::rng::SeededRng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Component stream ids, offset by [`TrainConfig::stream_base`] so parallel
/// grid cells draw from disjoint streams of the same seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NEGATIVES: u64 = 2;

/// Adam moments for both embedding tables.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_users: Matrix,
    v_users: Matrix,
    m_items: Matrix,
    v_items: Matrix,
    t: u64,
    lr: f64,
    weight_decay: f64,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel, lr: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config(format!("learning rate must be positive: {lr}")));
        }
        if !(weight_decay >= 0.0) || !weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight decay must be nonnegative: {weight_decay}"
            )));
        }
        Ok(Self {
            m_users: Matrix::zeros(model.n_users(), model.dim()),
            v_users: Matrix::zeros(model.n_users(), model.dim()),
            m_items: Matrix::zeros(model.n_items(), model.dim()),
            v_items: Matrix::zeros(model.n_items(), model.dim()),
            t: 0,
            lr,
            weight_decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

fn rescue_row(row: &mut [f64]) {
    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm >= NORM_FLOOR {
        return;
    }
    if norm == 0.0 {
        row[0] = NORM_FLOOR;
    } else {
        let scale = NORM_FLOOR / norm;
        for x in row {
            *x *= scale;
        }
    }
}

fn update_rows(
    label: &str,
    params: &mut Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    rows: &std::collections::BTreeMap<u32, Vec<f64>>,
    t: u64,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let bc1 = 1.0 - BETA1.powf(t as f64);
    let bc2 = 1.0 - BETA2.powf(t as f64);
    for (&r, grad_row) in rows {
        let r = r as usize;
        if r >= params.n_rows() || grad_row.len() != params.n_cols() {
            return Err(Error::data(format!(
                "{label} gradient row {r} does not fit a {}x{} table",
                params.n_rows(),
                params.n_cols()
            )));
        }
        let p = params.row_mut(r);
        let mr = m.row_mut(r);
        let vr = v.row_mut(r);
        for k in 0..p.len() {
            let g = grad_row[k] + weight_decay * p[k];
            mr[k] = BETA1 * mr[k] + (1.0 - BETA1) * g;
            vr[k] = BETA2 * vr[k] + (1.0 - BETA2) * g * g;
            let m_hat = mr[k] / bc1;
            let v_hat = vr[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        rescue_row(p);
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "{label} row {r} became non-finite at step {t}"
            )));
        }
    }
    Ok(())
}

/// One sparse Adam step: only rows present in `grads` move, with the global
/// step counter driving bias correction for all of them.
pub fn adam_step(
    state: &mut AdamState,
    model: &mut EmbeddingModel,
    grads: &SparseGrads,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite gradient ({} user rows, {} item rows) at step {}",
            grads.users.len(),
            grads.items.len(),
            state.t + 1
        )));
    }
    state.t += 1;
    update_rows(
        "user",
        &mut model.users,
        &mut state.m_users,
        &mut state.v_users,
        &grads.users,
        state.t,
        state.lr,
        state.weight_decay,
    )?;
    update_rows(
        "item",
        &mut model.items,
        &mut state.m_items,
        &mut state.v_items,
        &grads.items,
        state.t,
        state.lr,
        state.weight_decay,
    )?;
    Ok(())
}

/// Loop hyperparameters.  `stream_base` offsets the rng streams so several
/// configurations can share one experiment seed without sharing randomness.
#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_negatives: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub noise_ratio_p: f64,
    pub stream_base: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.batch_size == 0 || self.n_negatives == 0 || self.eval_every == 0
        {
            return Err(Error::config(
                "dim, batch_size, n_negatives, and eval_every must all be at least 1",
            ));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be positive: {}",
                self.lr
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight decay must be nonnegative: {}",
                self.weight_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio_p) {
            return Err(Error::config(format!(
                "noise_ratio_p must lie in [0, 1]: {}",
                self.noise_ratio_p
            )));
        }
        Ok(())
    }
}

/// Recall@20 and NDCG@20 on the selection set at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalPoint {
    pub recall: f64,
    pub ndcg: f64,
}

/// One epoch of history: mean train loss plus the periodic evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: Option<EvalPoint>,
}

/// Which dataset drove model selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSet {
    Validation,
    Test,
}

/// Everything a training run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the highest selection NDCG@20 (the final state when
    /// no evaluation ever ran).
    pub best: EmbeddingModel,
    pub final_model: EmbeddingModel,
    pub best_eval: Option<EvalPoint>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub selection: SelectionSet,
}

fn eval_point(
    model: &EmbeddingModel,
    adj: Option<(&NormalizedAdjacency, usize)>,
    target: &Dataset,
    masks: &[&Dataset],
    n_items: usize,
) -> Result<EvalPoint> {
    let propagated = adj.map(|(a, layers)| lightgcn_propagate(model, a, layers));
    let scorer = match &propagated {
        Some(p) => p.scorer(),
        None => Scorer::new(&model.users, &model.items),
    };
    let report = evaluate_against(|u, i| scorer.score(u, i), n_items, target, masks, &[20])?;
    let row = report.per_k[&20];
    Ok(EvalPoint {
        recall: row.recall,
        ndcg: row.ndcg,
    })
}

/// Full training run on a split.  See the module docs for loop structure.
pub fn train(
    split: &SplitBundle,
    spec: &LossSpec,
    cfg: &TrainConfig,
    backbone: Backbone,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::data("cannot train on an empty train set"));
    }
    let (selection, target): (SelectionSet, &Dataset) = match &split.validation {
        Some(v) if !v.is_empty() => (SelectionSet::Validation, v),
        Some(_) => {
            return Err(Error::config(
                "validation split exists but has no interactions; nothing to select on",
            ))
        }
        None => (SelectionSet::Test, &split.test),
    };
    let masks: Vec<&Dataset> = vec![&split.train];

    let mut init_rng = SeededRng::with_stream(cfg.seed, cfg.stream_base + STREAM_INIT);
    let mut shuffle_rng = SeededRng::with_stream(cfg.seed, cfg.stream_base + STREAM_SHUFFLE);
    let mut negative_rng = SeededRng::with_stream(cfg.seed, cfg.stream_base + STREAM_NEGATIVES);

    let mut model = EmbeddingModel::init(
        split.n_users(),
        split.n_items(),
        cfg.dim,
        backbone,
        &mut init_rng,
    )?;
    let mut adam = AdamState::new(&model, cfg.lr, cfg.weight_decay)?;
    let adj = match backbone {
        Backbone::Mf => None,
        Backbone::LightGcn { layers } => {
            Some((NormalizedAdjacency::from_train(&split.train), layers))
        }
    };
    let adj_ref = adj.as_ref().map(|(a, l)| (a, *l));

    let mut anchors: Vec<(u32, u32)> = split.train.iter_pairs().collect();
    let n_anchors = anchors.len() as f64;

    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EmbeddingModel, EvalPoint, usize)> = None;

    for epoch in 1..=cfg.epochs {
        anchors.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in anchors.chunks(cfg.batch_size) {
            let mut candidate_lists = Vec::with_capacity(chunk.len());
            for &(user, item) in chunk {
                let negatives = sample_negatives(
                    split,
                    user,
                    cfg.n_negatives,
                    cfg.noise_ratio_p,
                    &mut negative_rng,
                )?;
                let mut candidates = Vec::with_capacity(negatives.len() + 1);
                candidates.push(item);
                candidates.extend(negatives);
                candidate_lists.push(candidates);
            }
            let batch = BatchSample::new(chunk.to_vec(), candidate_lists)?;

            let (loss, grads) = match adj_ref {
                None => {
                    let scorer = Scorer::new(&model.users, &model.items);
                    batch_loss_and_grads(&scorer, &batch, spec)?
                }
                Some((adjacency, layers)) => {
                    let propagated = lightgcn_propagate(&model, adjacency, layers);
                    let (loss, out_grads) =
                        batch_loss_and_grads(&propagated.scorer(), &batch, spec)?;
                    let base_grads =
                        lightgcn_backprop(&out_grads, adjacency, layers, cfg.dim);
                    (loss, base_grads)
                }
            };
            adam_step(&mut adam, &mut model, &grads)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / n_anchors;

        let eval = if epoch % cfg.eval_every == 0 {
            let point = eval_point(&model, adj_ref, target, &masks, split.n_items())?;
            let improved = best
                .as_ref()
                .map_or(true, |(_, incumbent, _)| point.ndcg > incumbent.ndcg);
            if improved {
                best = Some((model.clone(), point, epoch));
            }
            Some(point)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            eval,
        });
    }

    let (best_model, best_eval, best_epoch) = match best {
        Some((m, p, e)) => (m, Some(p), Some(e)),
        None => (model.clone(), None, None),
    };
    Ok(TrainOutcome {
        best: best_model,
        final_model: model,
        best_eval,
        best_epoch,
        history,
        selection,
    })
}
