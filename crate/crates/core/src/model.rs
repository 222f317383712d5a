//! Embedding backbones and scoring.
//!
//! Both backbones keep one `f64` embedding row per user and per item.  The
//! score of a pair is the *halved cosine*
//!
//! ```text
//! f(u, i) = (u . v) / (2 |u| |v|)    in [-0.5, 0.5]
//! ```
//!
//! which keeps every score gap inside `[-1, 1]` — exactly the window on which
//! the activation family's admissibility envelopes are checked.
//!
//! * **MF** scores the raw embeddings.
//! * **LightGCN** first propagates embeddings over the symmetrically
//!   normalized user–item graph (edge weight `1 / sqrt(deg_u * deg_i)`) for
//!   `layers` hops and scores the uniform mean of all layer outputs.  The
//!   propagation operator is linear and symmetric, so backpropagation through
//!   it is the *same* operator applied to the output gradients — verified by
//!   an adjoint identity test rather than assumed.
//!
//! Checkpoints are single JSON files carrying the backbone tag, shapes,
//! row-major matrices, the training seed, and a hash of the configuration
//! that produced them; saving is byte-deterministic and loading validates
//! shape and finiteness before returning a model.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Embedding rows whose norm falls below this after an optimizer step are
/// rescaled up to it, keeping cosine scores well-conditioned.
pub const NORM_FLOOR: f64 = 1e-8;

/// Guard used inside score denominators; distinct from [`NORM_FLOOR`] so that
/// scoring stays finite even on hand-built degenerate inputs.
const NORM_GUARD: f64 = 1e-12;

/// Standard deviation of the Gaussian embedding initialization.
pub const INIT_STD: f64 = 0.1;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n_rows: usize,
    n_cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            data: vec![0.0; n_rows * n_cols],
        }
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(n_rows: usize, n_cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_rows * n_cols {
            return Err(Error::data(format!(
                "matrix buffer has {} entries, expected {n_rows} x {n_cols}",
                data.len()
            )));
        }
        Ok(Self {
            n_rows,
            n_cols,
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.n_cols..(r + 1) * self.n_cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Which architecture produced (or should consume) a set of embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backbone {
    Mf,
    LightGcn { layers: usize },
}

impl std::fmt::Display for Backbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Backbone::Mf => write!(f, "mf"),
            Backbone::LightGcn { layers } => write!(f, "light_gcn({layers})"),
        }
    }
}

/// Trainable user and item embeddings plus the backbone tag.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub users: Matrix,
    pub items: Matrix,
    pub backbone: Backbone,
}

impl EmbeddingModel {
    /// Gaussian `N(0, INIT_STD^2)` initialization, row by row (users first),
    /// deterministic in the rng.
    pub fn init(
        n_users: usize,
        n_items: usize,
        dim: usize,
        backbone: Backbone,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let normal = Normal::new(0.0, INIT_STD).expect("INIT_STD is positive and finite");
        let mut fill = |n: usize| -> Matrix {
            let mut m = Matrix::zeros(n, dim);
            for x in &mut m.data {
                *x = normal.sample(rng);
            }
            m
        };
        let model = Self {
            users: fill(n_users),
            items: fill(n_items),
            backbone,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.users.n_cols()
    }

    pub fn n_users(&self) -> usize {
        self.users.n_rows()
    }

    pub fn n_items(&self) -> usize {
        self.items.n_rows()
    }

    /// Check structural and numeric health: consistent dimensions, all
    /// entries finite, every row norm at or above [`NORM_FLOOR`].
    pub fn validate(&self) -> Result<()> {
        if self.users.n_cols() != self.items.n_cols() {
            return Err(Error::data(format!(
                "user dim {} != item dim {}",
                self.users.n_cols(),
                self.items.n_cols()
            )));
        }
        if !self.users.is_finite() || !self.items.is_finite() {
            return Err(Error::numeric("embedding matrix contains non-finite entries"));
        }
        for (name, m) in [("user", &self.users), ("item", &self.items)] {
            for r in 0..m.n_rows() {
                let norm = norm(m.row(r));
                if norm < NORM_FLOOR {
                    return Err(Error::numeric(format!(
                        "{name} row {r} has norm {norm:.3e} below the floor {NORM_FLOOR:.0e}"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Halved cosine similarity of two embedding rows; always in `[-0.5, 0.5]`.
pub fn score(u: &[f64], v: &[f64]) -> f64 {
    let nu = norm(u).max(NORM_GUARD);
    let nv = norm(v).max(NORM_GUARD);
    0.5 * dot(u, v) / (nu * nv)
}

/// Accumulate `coeff * d score/d u` into `grad_u` and `coeff * d score/d v`
/// into `grad_v`.
///
/// The gradient of a cosine is orthogonal to its own argument
/// (`d f/d u . u = 0`), which the tests assert; it is the analytic form, not
/// a finite difference.
pub fn add_score_grad(u: &[f64], v: &[f64], coeff: f64, grad_u: &mut [f64], grad_v: &mut [f64]) {
    let nu = norm(u).max(NORM_GUARD);
    let nv = norm(v).max(NORM_GUARD);
    let d = dot(u, v);
    let inv = 1.0 / (nu * nv);
    let au = d / (nu * nu);
    let av = d / (nv * nv);
    let c = 0.5 * coeff * inv;
    for k in 0..u.len() {
        grad_u[k] += c * (v[k] - au * u[k]);
        grad_v[k] += c * (u[k] - av * v[k]);
    }
}

/// `(d f/d u, d f/d v)` as fresh vectors; convenience wrapper over
/// [`add_score_grad`].
pub fn score_grad(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    add_score_grad(u, v, 1.0, &mut gu, &mut gv);
    (gu, gv)
}

/// A read-only view of whatever embeddings should be scored — raw ones for
/// MF, propagated ones for LightGCN.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    pub users: &'a Matrix,
    pub items: &'a Matrix,
}

impl<'a> Scorer<'a> {
    pub fn new(users: &'a Matrix, items: &'a Matrix) -> Self {
        Self { users, items }
    }

    pub fn score(&self, user: u32, item: u32) -> f64 {
        score(self.users.row(user as usize), self.items.row(item as usize))
    }

    pub fn user_row(&self, user: u32) -> &'a [f64] {
        self.users.row(user as usize)
    }

    pub fn item_row(&self, item: u32) -> &'a [f64] {
        self.items.row(item as usize)
    }

    pub fn dim(&self) -> usize {
        self.users.n_cols()
    }
}

/// Sparse per-row gradients for both embedding tables.
///
/// `BTreeMap` keeps the row iteration order sorted, so downstream
/// accumulations are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrads {
    pub users: BTreeMap<u32, Vec<f64>>,
    pub items: BTreeMap<u32, Vec<f64>>,
}

impl SparseGrads {
    pub fn user_row_mut(&mut self, user: u32, dim: usize) -> &mut [f64] {
        self.users.entry(user).or_insert_with(|| vec![0.0; dim])
    }

    pub fn item_row_mut(&mut self, item: u32, dim: usize) -> &mut [f64] {
        self.items.entry(item).or_insert_with(|| vec![0.0; dim])
    }

    pub fn is_finite(&self) -> bool {
        self.users
            .values()
            .chain(self.items.values())
            .all(|row| row.iter().all(|x| x.is_finite()))
    }

    /// Multiply every entry by `c`.
    pub fn scale(&mut self, c: f64) {
        for row in self.users.values_mut().chain(self.items.values_mut()) {
            for x in row {
                *x *= c;
            }
        }
    }

    pub fn n_rows(&self) -> usize {
        self.users.len() + self.items.len()
    }
}

/// The symmetrically normalized user–item graph of a train set.
///
/// Edges are stored in canonical (user, item) order with weight
/// `1 / sqrt(deg_user * deg_item)`, making repeated propagations
/// bit-reproducible.
#[derive(Debug, Clone)]
pub struct NormalizedAdjacency {
    n_users: usize,
    n_items: usize,
    edges: Vec<(u32, u32, f64)>,
}

impl NormalizedAdjacency {
    pub fn from_train(train: &Dataset) -> Self {
        let mut user_deg = vec![0usize; train.n_users()];
        let mut item_deg = vec![0usize; train.n_items()];
        for (u, i) in train.iter_pairs() {
            user_deg[u as usize] += 1;
            item_deg[i as usize] += 1;
        }
        let edges = train
            .iter_pairs()
            .map(|(u, i)| {
                let w = 1.0 / ((user_deg[u as usize] * item_deg[i as usize]) as f64).sqrt();
                (u, i, w)
            })
            .collect();
        Self {
            n_users: train.n_users(),
            n_items: train.n_items(),
            edges,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// One hop of propagation: users gather from items and vice versa,
    /// simultaneously (both outputs read only the inputs).
    fn apply(&self, users_in: &Matrix, items_in: &Matrix) -> (Matrix, Matrix) {
        let dim = users_in.n_cols();
        let mut users_out = Matrix::zeros(self.n_users, dim);
        let mut items_out = Matrix::zeros(self.n_items, dim);
        for &(u, i, w) in &self.edges {
            let (u, i) = (u as usize, i as usize);
            let src_item = items_in.row(i);
            let dst_user = users_out.row_mut(u);
            for k in 0..dim {
                dst_user[k] += w * src_item[k];
            }
            let src_user = users_in.row(u);
            let dst_item = items_out.row_mut(i);
            for k in 0..dim {
                dst_item[k] += w * src_user[k];
            }
        }
        (users_out, items_out)
    }

    /// `mean(x, Ax, A^2 x, ..., A^layers x)` where `A` is one [`apply`] hop.
    ///
    /// This is both the forward propagation and — because `A` is symmetric —
    /// the exact backward map for output gradients.
    fn mean_of_powers(&self, users: &Matrix, items: &Matrix, layers: usize) -> (Matrix, Matrix) {
        let mut acc_users = users.clone();
        let mut acc_items = items.clone();
        let mut cur_users = users.clone();
        let mut cur_items = items.clone();
        for _ in 0..layers {
            let (next_users, next_items) = self.apply(&cur_users, &cur_items);
            for (acc, next) in [(&mut acc_users, &next_users), (&mut acc_items, &next_items)] {
                for (a, b) in acc.data.iter_mut().zip(&next.data) {
                    *a += b;
                }
            }
            cur_users = next_users;
            cur_items = next_items;
        }
        let scale = 1.0 / (layers as f64 + 1.0);
        for x in acc_users.data.iter_mut().chain(acc_items.data.iter_mut()) {
            *x *= scale;
        }
        (acc_users, acc_items)
    }
}

/// Layer-averaged LightGCN embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedEmbeddings {
    pub users: Matrix,
    pub items: Matrix,
}

impl PropagatedEmbeddings {
    pub fn scorer(&self) -> Scorer<'_> {
        Scorer::new(&self.users, &self.items)
    }
}

/// Propagate base embeddings `layers` hops and average all layer outputs
/// (layer 0 included).  Zero-degree nodes receive nothing from the graph, so
/// their output is the base row scaled by `1 / (layers + 1)`.
pub fn lightgcn_propagate(
    model: &EmbeddingModel,
    adj: &NormalizedAdjacency,
    layers: usize,
) -> PropagatedEmbeddings {
    let (users, items) = adj.mean_of_powers(&model.users, &model.items, layers);
    PropagatedEmbeddings { users, items }
}

/// Embeddings to score with at inference time: propagated for the graph
/// backbone, a plain copy of the base tables otherwise.
pub fn inference_embeddings(model: &EmbeddingModel, train: &Dataset) -> PropagatedEmbeddings {
    match model.backbone {
        Backbone::Mf => PropagatedEmbeddings {
            users: model.users.clone(),
            items: model.items.clone(),
        },
        Backbone::LightGcn { layers } => {
            let adj = NormalizedAdjacency::from_train(train);
            lightgcn_propagate(model, &adj, layers)
        }
    }
}

/// Pull gradients w.r.t. propagated embeddings back to the base embeddings.
///
/// The propagation map is linear and self-adjoint, so this is the same
/// mean-of-powers operator applied to the (densified) output gradients.
/// Rows whose pulled-back gradient is identically zero are dropped, keeping
/// the sparse-update contract of the optimizer.
pub fn lightgcn_backprop(
    grads: &SparseGrads,
    adj: &NormalizedAdjacency,
    layers: usize,
    dim: usize,
) -> SparseGrads {
    let mut users = Matrix::zeros(adj.n_users, dim);
    let mut items = Matrix::zeros(adj.n_items, dim);
    for (&u, row) in &grads.users {
        users.row_mut(u as usize).copy_from_slice(row);
    }
    for (&i, row) in &grads.items {
        items.row_mut(i as usize).copy_from_slice(row);
    }
    let (users, items) = adj.mean_of_powers(&users, &items, layers);

    let mut out = SparseGrads::default();
    for r in 0..users.n_rows() {
        let row = users.row(r);
        if row.iter().any(|&x| x != 0.0) {
            out.users.insert(r as u32, row.to_vec());
        }
    }
    for r in 0..items.n_rows() {
        let row = items.row(r);
        if row.iter().any(|&x| x != 0.0) {
            out.items.insert(r as u32, row.to_vec());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Schema marker written into every checkpoint.
pub const CHECKPOINT_SCHEMA: &str = "psl-checkpoint-v1";

/// Provenance carried inside a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: String,
    backbone: Backbone,
    dim: usize,
    n_users: usize,
    n_items: usize,
    manifest: CheckpointManifest,
    /// Row-major `n_users x dim`.
    users: Vec<f64>,
    /// Row-major `n_items x dim`.
    items: Vec<f64>,
}

/// Write a model (plus provenance) as one JSON file; bytes are a pure
/// function of the inputs.
pub fn save_checkpoint(
    path: &Path,
    model: &EmbeddingModel,
    manifest: &CheckpointManifest,
) -> Result<()> {
    model.validate()?;
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA.to_string(),
        backbone: model.backbone,
        dim: model.dim(),
        n_users: model.n_users(),
        n_items: model.n_items(),
        manifest: manifest.clone(),
        users: model.users.as_slice().to_vec(),
        items: model.items.as_slice().to_vec(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Load and validate a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(EmbeddingModel, CheckpointManifest)> {
    let file: CheckpointFile = serde_json::from_slice(&fs::read(path)?)?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(Error::data(format!(
            "{}: unknown checkpoint schema `{}`",
            path.display(),
            file.schema
        )));
    }
    let model = EmbeddingModel {
        users: Matrix::from_vec(file.n_users, file.dim, file.users)?,
        items: Matrix::from_vec(file.n_items, file.dim, file.items)?,
        backbone: file.backbone,
    };
    model.validate()?;
    Ok((model, file.manifest))
}
