//! Interaction data: loading, filtering, splitting, negative sampling.
//!
//! The on-disk input is a TSV of `user_id<TAB>item_id` lines (`#` starts a
//! comment, blank lines are skipped).  Ids are arbitrary strings; the loader
//! re-indexes them densely in first-appearance order and keeps the original
//! strings so reports can refer back to them.
//!
//! Three evaluation settings are supported, tagged on the split bundle:
//!
//! * **iid** — per-user random holdout of test and validation fractions.
//! * **ood** — a popularity-balanced test set: each item cedes at most
//!   `ceil(target / n_items)` of its interactions to test (never its last
//!   one), which flattens the test-set item marginal while train keeps its
//!   long tail.  No validation split in this setting.
//! * **noise** — an iid split whose train set has had a fraction of its
//!   interactions moved into per-user *noise pools*; the negative sampler can
//!   then inject these known-positive items as false negatives with a chosen
//!   probability, simulating label noise at a controlled rate.
//!
//! Splits are value types: the multiset of interactions is preserved exactly
//! (train ∪ validation ∪ test ∪ noise pool = original), and every operation
//! that draws randomness takes a [`SeededRng`] so results are reproducible.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// `round(x)` with halves rounding up, used for all fraction-to-count math so
/// split sizes are platform-independent.
pub(crate) fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// An implicit-feedback interaction set over densely indexed users and items.
///
/// Invariants: every per-user positives list is strictly increasing (sorted,
/// no duplicates) and every id is within `[0, n_users) x [0, n_items)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    n_users: usize,
    n_items: usize,
    positives: Vec<Vec<u32>>,
    n_interactions: usize,
}

impl Dataset {
    /// Build a dataset from raw pairs.  Duplicate pairs collapse to one
    /// interaction; out-of-range ids are a data error.
    pub fn new(n_users: usize, n_items: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut positives: Vec<Vec<u32>> = vec![Vec::new(); n_users];
        for &(u, i) in pairs {
            if (u as usize) >= n_users || (i as usize) >= n_items {
                return Err(Error::data(format!(
                    "interaction ({u}, {i}) outside declared shape {n_users} x {n_items}"
                )));
            }
            positives[u as usize].push(i);
        }
        let mut n_interactions = 0;
        for list in &mut positives {
            list.sort_unstable();
            list.dedup();
            n_interactions += list.len();
        }
        Ok(Self {
            n_users,
            n_items,
            positives,
            n_interactions,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_interactions(&self) -> usize {
        self.n_interactions
    }

    pub fn is_empty(&self) -> bool {
        self.n_interactions == 0
    }

    /// Sorted positive items of `user`.
    pub fn positives(&self, user: u32) -> &[u32] {
        &self.positives[user as usize]
    }

    /// Whether `(user, item)` is an interaction.
    pub fn contains(&self, user: u32, item: u32) -> bool {
        self.positives[user as usize].binary_search(&item).is_ok()
    }

    /// All interactions in canonical order (user ascending, then item).
    pub fn iter_pairs(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.positives
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i)))
    }
}

/// Original string ids by dense index, for reporting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMaps {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

/// Parse a `user<TAB>item` TSV into a dataset plus the id maps.
///
/// Lines are trimmed; blank lines and lines starting with `#` are skipped.
/// Anything else must be exactly two tab-separated non-empty fields.
pub fn load_interactions(path: &Path) -> Result<(Dataset, IdMaps)> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut users: Vec<String> = Vec::new();
    let mut items: Vec<String> = Vec::new();
    let mut pairs: Vec<(u32, u32)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected `user<TAB>item`, got {line:?}"),
                })
            }
        };
        let u = *user_index.entry(user.to_string()).or_insert_with(|| {
            users.push(user.to_string());
            (users.len() - 1) as u32
        });
        let i = *item_index.entry(item.to_string()).or_insert_with(|| {
            items.push(item.to_string());
            (items.len() - 1) as u32
        });
        pairs.push((u, i));
    }

    if pairs.is_empty() {
        return Err(Error::data(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    let dataset = Dataset::new(users.len(), items.len(), &pairs)?;
    Ok((dataset, IdMaps { users, items }))
}

/// Result of [`k_core_filter`]: the filtered dataset plus, for each surviving
/// dense index, the index it had before filtering (so id maps can follow).
#[derive(Debug, Clone)]
pub struct KCoreOutcome {
    pub dataset: Dataset,
    pub kept_users: Vec<u32>,
    pub kept_items: Vec<u32>,
}

/// Iteratively drop users and items with fewer than `k` interactions until
/// every survivor has at least `k`.  The result may be empty.
pub fn k_core_filter(dataset: &Dataset, k: usize) -> Result<KCoreOutcome> {
    if k < 1 {
        return Err(Error::config("k-core threshold must be at least 1"));
    }
    let mut user_alive = vec![true; dataset.n_users()];
    let mut item_alive = vec![true; dataset.n_items()];
    loop {
        let mut user_deg = vec![0usize; dataset.n_users()];
        let mut item_deg = vec![0usize; dataset.n_items()];
        for (u, i) in dataset.iter_pairs() {
            if user_alive[u as usize] && item_alive[i as usize] {
                user_deg[u as usize] += 1;
                item_deg[i as usize] += 1;
            }
        }
        let mut changed = false;
        for u in 0..dataset.n_users() {
            if user_alive[u] && user_deg[u] < k {
                user_alive[u] = false;
                changed = true;
            }
        }
        for i in 0..dataset.n_items() {
            if item_alive[i] && item_deg[i] < k {
                item_alive[i] = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let kept_users: Vec<u32> = (0..dataset.n_users() as u32)
        .filter(|&u| user_alive[u as usize])
        .collect();
    let kept_items: Vec<u32> = (0..dataset.n_items() as u32)
        .filter(|&i| item_alive[i as usize])
        .collect();
    let user_remap: HashMap<u32, u32> = kept_users
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();
    let item_remap: HashMap<u32, u32> = kept_items
        .iter()
        .enumerate()
        .map(|(new, &old)| (old, new as u32))
        .collect();

    let pairs: Vec<(u32, u32)> = dataset
        .iter_pairs()
        .filter(|&(u, i)| user_alive[u as usize] && item_alive[i as usize])
        .map(|(u, i)| (user_remap[&u], item_remap[&i]))
        .collect();
    let dataset = Dataset::new(kept_users.len(), kept_items.len(), &pairs)?;
    Ok(KCoreOutcome {
        dataset,
        kept_users,
        kept_items,
    })
}

/// Which evaluation regime a split was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SettingTag {
    Iid,
    Ood,
    Noise,
}

impl fmt::Display for SettingTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SettingTag::Iid => "iid",
            SettingTag::Ood => "ood",
            SettingTag::Noise => "noise",
        })
    }
}

impl FromStr for SettingTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iid" => Ok(SettingTag::Iid),
            "ood" => Ok(SettingTag::Ood),
            "noise" => Ok(SettingTag::Noise),
            other => Err(Error::config(format!(
                "unknown setting `{other}` (expected iid, ood, or noise)"
            ))),
        }
    }
}

/// A train/validation/test partition plus (in the noise setting) per-user
/// pools of withheld train positives.
///
/// The pieces always partition the original interactions exactly; nothing is
/// duplicated or lost.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub train: Dataset,
    pub validation: Option<Dataset>,
    pub test: Dataset,
    /// Per-user withheld positives (sorted); empty vectors outside the noise
    /// setting.
    pub noise_pool: Vec<Vec<u32>>,
    pub setting: SettingTag,
}

impl SplitBundle {
    pub fn n_users(&self) -> usize {
        self.train.n_users()
    }

    pub fn n_items(&self) -> usize {
        self.train.n_items()
    }

    /// Total interactions in the per-user noise pools.
    pub fn noise_pool_len(&self) -> usize {
        self.noise_pool.iter().map(Vec::len).sum()
    }
}

/// Per-user random holdout: `test_frac` of each user's positives go to test,
/// then `val_frac` of the remainder to validation.
///
/// Counts use round-half-up per user, so a user with 10 positives at
/// `test_frac = 0.2` cedes exactly 2.  `val_frac = 0` produces no validation
/// dataset at all (as opposed to an empty one).
pub fn split_iid(
    dataset: &Dataset,
    test_frac: f64,
    val_frac: f64,
    rng: &mut SeededRng,
) -> Result<SplitBundle> {
    if !(0.0..1.0).contains(&test_frac) || !(0.0..1.0).contains(&val_frac) {
        return Err(Error::config(format!(
            "split fractions must lie in [0, 1): test_frac={test_frac}, val_frac={val_frac}"
        )));
    }
    let mut train_pairs = Vec::new();
    let mut val_pairs = Vec::new();
    let mut test_pairs = Vec::new();
    for u in 0..dataset.n_users() as u32 {
        let items = dataset.positives(u);
        let n = items.len();
        let n_test = round_half_up(n as f64 * test_frac).min(n);
        let mut test_sel = index::sample(rng, n, n_test).into_vec();
        test_sel.sort_unstable();
        let mut rest: Vec<u32> = Vec::with_capacity(n - n_test);
        let mut take = test_sel.iter().copied().peekable();
        for (idx, &item) in items.iter().enumerate() {
            if take.peek() == Some(&idx) {
                take.next();
                test_pairs.push((u, item));
            } else {
                rest.push(item);
            }
        }
        let n_val = round_half_up(rest.len() as f64 * val_frac).min(rest.len());
        let mut val_sel = index::sample(rng, rest.len(), n_val).into_vec();
        val_sel.sort_unstable();
        let mut take = val_sel.iter().copied().peekable();
        for (idx, &item) in rest.iter().enumerate() {
            if take.peek() == Some(&idx) {
                take.next();
                val_pairs.push((u, item));
            } else {
                train_pairs.push((u, item));
            }
        }
    }
    let shape = (dataset.n_users(), dataset.n_items());
    Ok(SplitBundle {
        train: Dataset::new(shape.0, shape.1, &train_pairs)?,
        validation: if val_frac > 0.0 {
            Some(Dataset::new(shape.0, shape.1, &val_pairs)?)
        } else {
            None
        },
        test: Dataset::new(shape.0, shape.1, &test_pairs)?,
        noise_pool: vec![Vec::new(); shape.0],
        setting: SettingTag::Iid,
    })
}

/// Popularity-balanced test split.
///
/// With `target = round(n_interactions * test_frac)` and a per-item quota
/// `q = ceil(target / n_items)`, every item offers `min(q, popularity - 1)`
/// of its interactions (chosen at random) to the test candidate pool; the
/// pool is then downsampled to `target` if it overshot.  Head items can give
/// at most `q`, so the test item marginal is nearly flat, while each item
/// keeps at least one train interaction.  No validation split.
pub fn split_ood(dataset: &Dataset, test_frac: f64, rng: &mut SeededRng) -> Result<SplitBundle> {
    if !(0.0..1.0).contains(&test_frac) {
        return Err(Error::config(format!(
            "split fraction must lie in [0, 1): test_frac={test_frac}"
        )));
    }
    let n_items = dataset.n_items();
    let target = round_half_up(dataset.n_interactions() as f64 * test_frac);
    let quota = target.div_ceil(n_items.max(1));

    // Owners of every item, in canonical order.
    let mut owners: Vec<Vec<u32>> = vec![Vec::new(); n_items];
    for (u, i) in dataset.iter_pairs() {
        owners[i as usize].push(u);
    }

    let mut candidates: Vec<(u32, u32)> = Vec::new();
    for (i, users) in owners.iter().enumerate() {
        let give = quota.min(users.len().saturating_sub(1));
        if give == 0 {
            continue;
        }
        let mut sel = index::sample(rng, users.len(), give).into_vec();
        sel.sort_unstable();
        for idx in sel {
            candidates.push((users[idx], i as u32));
        }
    }
    candidates.sort_unstable();

    let test_pairs: Vec<(u32, u32)> = if candidates.len() > target {
        let mut sel = index::sample(rng, candidates.len(), target).into_vec();
        sel.sort_unstable();
        sel.into_iter().map(|idx| candidates[idx]).collect()
    } else {
        candidates
    };

    let test_set: std::collections::HashSet<(u32, u32)> = test_pairs.iter().copied().collect();
    let train_pairs: Vec<(u32, u32)> = dataset
        .iter_pairs()
        .filter(|pair| !test_set.contains(pair))
        .collect();

    let shape = (dataset.n_users(), dataset.n_items());
    Ok(SplitBundle {
        train: Dataset::new(shape.0, shape.1, &train_pairs)?,
        validation: None,
        test: Dataset::new(shape.0, shape.1, &test_pairs)?,
        noise_pool: vec![Vec::new(); shape.0],
        setting: SettingTag::Ood,
    })
}

/// Move `noise_frac` of the train interactions (chosen uniformly over the
/// whole train set) into per-user noise pools, turning an iid bundle into a
/// noise-setting bundle.  Validation and test are untouched.
pub fn make_noise_pool(
    bundle: &SplitBundle,
    noise_frac: f64,
    rng: &mut SeededRng,
) -> Result<SplitBundle> {
    if bundle.setting != SettingTag::Iid {
        return Err(Error::config(format!(
            "noise pools are built from an iid split, got setting `{}`",
            bundle.setting
        )));
    }
    if !(0.0..1.0).contains(&noise_frac) {
        return Err(Error::config(format!(
            "noise_frac must lie in [0, 1): {noise_frac}"
        )));
    }
    let pairs: Vec<(u32, u32)> = bundle.train.iter_pairs().collect();
    let n_remove = round_half_up(pairs.len() as f64 * noise_frac).min(pairs.len());
    let mut sel = index::sample(rng, pairs.len(), n_remove).into_vec();
    sel.sort_unstable();

    let mut noise_pool: Vec<Vec<u32>> = vec![Vec::new(); bundle.n_users()];
    let mut train_pairs: Vec<(u32, u32)> = Vec::with_capacity(pairs.len() - n_remove);
    let mut take = sel.iter().copied().peekable();
    for (idx, &(u, i)) in pairs.iter().enumerate() {
        if take.peek() == Some(&idx) {
            take.next();
            noise_pool[u as usize].push(i);
        } else {
            train_pairs.push((u, i));
        }
    }
    // Canonical iteration already sorts by item within a user.
    Ok(SplitBundle {
        train: Dataset::new(bundle.n_users(), bundle.n_items(), &train_pairs)?,
        validation: bundle.validation.clone(),
        test: bundle.test.clone(),
        noise_pool,
        setting: SettingTag::Noise,
    })
}

/// Draw `n` negative item ids for `user`, with replacement.
///
/// Each draw independently comes from the user's noise pool with probability
/// `noise_ratio_p` (falling back to 0 when the pool is empty) and otherwise
/// uniformly from the items outside the user's *train* positives.  Validation
/// and test positives are deliberately eligible — the sampler only knows what
/// training knows.  `noise_ratio_p > 0` requires a noise-setting bundle.
pub fn sample_negatives(
    bundle: &SplitBundle,
    user: u32,
    n: usize,
    noise_ratio_p: f64,
    rng: &mut SeededRng,
) -> Result<Vec<u32>> {
    if (user as usize) >= bundle.n_users() {
        return Err(Error::data(format!(
            "user {user} outside shape {}",
            bundle.n_users()
        )));
    }
    if !(0.0..=1.0).contains(&noise_ratio_p) {
        return Err(Error::config(format!(
            "noise_ratio_p must lie in [0, 1]: {noise_ratio_p}"
        )));
    }
    if noise_ratio_p > 0.0 && bundle.setting != SettingTag::Noise {
        return Err(Error::config(format!(
            "noise_ratio_p = {noise_ratio_p} requires a noise-setting split, got `{}`",
            bundle.setting
        )));
    }
    let n_items = bundle.n_items();
    if bundle.train.positives(user).len() >= n_items {
        return Err(Error::data(format!(
            "user {user} interacts with every item; no negatives exist"
        )));
    }
    let pool = &bundle.noise_pool[user as usize];
    let p = if pool.is_empty() { 0.0 } else { noise_ratio_p };

    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        if p > 0.0 && rng.random::<f64>() < p {
            out.push(pool[rng.random_range(0..pool.len())]);
        } else {
            // Rejection sampling over the complement of the train positives.
            // Train rows are sparse relative to the catalog, so this
            // terminates quickly in practice.
            loop {
                let item = rng.random_range(0..n_items) as u32;
                if !bundle.train.contains(user, item) {
                    out.push(item);
                    break;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Split directory serialization
// ---------------------------------------------------------------------------

/// Provenance recorded next to a serialized split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema: String,
    pub setting: SettingTag,
    pub seed: u64,
    pub test_frac: f64,
    pub val_frac: f64,
    pub noise_frac: f64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub n_noise: usize,
    pub has_validation: bool,
    pub user_ids: Option<Vec<String>>,
    pub item_ids: Option<Vec<String>>,
}

/// Schema marker written into every manifest.
pub const SPLIT_SCHEMA: &str = "psl-split-v1";

fn write_pairs_tsv(path: &Path, pairs: impl Iterator<Item = (u32, u32)>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for (u, i) in pairs {
        writeln!(out, "{u}\t{i}")?;
    }
    out.flush()?;
    Ok(())
}

fn read_pairs_tsv(path: &Path) -> Result<Vec<(u32, u32)>> {
    let file = fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |s: &str| -> Result<u32> {
            s.parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("expected a dense integer id, got {s:?}"),
            })
        };
        let mut fields = line.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) => pairs.push((parse(u)?, parse(i)?)),
            _ => {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected `user<TAB>item`, got {line:?}"),
                })
            }
        }
    }
    Ok(pairs)
}

/// Serialize a bundle as a directory: `train.tsv`, `val.tsv`, `test.tsv`,
/// `noise.tsv` (dense ids) plus `manifest.json` with provenance and optional
/// original-id maps.  Output bytes are a pure function of the inputs.
pub fn save_split_dir(
    dir: &Path,
    bundle: &SplitBundle,
    id_maps: Option<&IdMaps>,
    seed: u64,
    test_frac: f64,
    val_frac: f64,
    noise_frac: f64,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_pairs_tsv(&dir.join("train.tsv"), bundle.train.iter_pairs())?;
    write_pairs_tsv(
        &dir.join("val.tsv"),
        bundle
            .validation
            .iter()
            .flat_map(|dataset| dataset.iter_pairs()),
    )?;
    write_pairs_tsv(&dir.join("test.tsv"), bundle.test.iter_pairs())?;
    write_pairs_tsv(
        &dir.join("noise.tsv"),
        bundle
            .noise_pool
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as u32, i))),
    )?;

    let manifest = SplitManifest {
        schema: SPLIT_SCHEMA.to_string(),
        setting: bundle.setting,
        seed,
        test_frac,
        val_frac,
        noise_frac,
        n_users: bundle.n_users(),
        n_items: bundle.n_items(),
        n_train: bundle.train.n_interactions(),
        n_validation: bundle
            .validation
            .as_ref()
            .map_or(0, Dataset::n_interactions),
        n_test: bundle.test.n_interactions(),
        n_noise: bundle.noise_pool_len(),
        has_validation: bundle.validation.is_some(),
        user_ids: id_maps.map(|m| m.users.clone()),
        item_ids: id_maps.map(|m| m.items.clone()),
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load a directory written by [`save_split_dir`].
pub fn load_split_dir(dir: &Path) -> Result<(SplitBundle, SplitManifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: SplitManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.schema != SPLIT_SCHEMA {
        return Err(Error::data(format!(
            "{}: unknown split schema `{}`",
            manifest_path.display(),
            manifest.schema
        )));
    }
    let shape = (manifest.n_users, manifest.n_items);
    let train = Dataset::new(shape.0, shape.1, &read_pairs_tsv(&dir.join("train.tsv"))?)?;
    let val_pairs = read_pairs_tsv(&dir.join("val.tsv"))?;
    let validation = if manifest.has_validation {
        Some(Dataset::new(shape.0, shape.1, &val_pairs)?)
    } else {
        None
    };
    let test = Dataset::new(shape.0, shape.1, &read_pairs_tsv(&dir.join("test.tsv"))?)?;
    let mut noise_pool: Vec<Vec<u32>> = vec![Vec::new(); shape.0];
    for (u, i) in read_pairs_tsv(&dir.join("noise.tsv"))? {
        if (u as usize) >= shape.0 || (i as usize) >= shape.1 {
            return Err(Error::data(format!(
                "noise.tsv pair ({u}, {i}) outside shape {} x {}",
                shape.0, shape.1
            )));
        }
        noise_pool[u as usize].push(i);
    }
    for pool in &mut noise_pool {
        pool.sort_unstable();
    }

    let bundle = SplitBundle {
        train,
        validation,
        test,
        noise_pool,
        setting: manifest.setting,
    };
    let counts_ok = bundle.train.n_interactions() == manifest.n_train
        && bundle
            .validation
            .as_ref()
            .map_or(0, Dataset::n_interactions)
            == manifest.n_validation
        && bundle.test.n_interactions() == manifest.n_test
        && bundle.noise_pool_len() == manifest.n_noise;
    if !counts_ok {
        return Err(Error::data(format!(
            "{}: interaction counts disagree with the TSV contents",
            manifest_path.display()
        )));
    }
    Ok((bundle, manifest))
}

// ---------------------------------------------------------------------------
// Synthetic datasets
// ---------------------------------------------------------------------------

/// Deterministic synthetic datasets for demos and end-to-end checks.
pub mod synthetic {
    use super::*;

    /// A planted block structure: users and items split into `n_blocks`
    /// communities; every user interacts with every item of their own block
    /// and nothing else.  A model that recovers the blocks ranks perfectly.
    pub fn planted_blocks(
        n_blocks: usize,
        users_per_block: usize,
        items_per_block: usize,
    ) -> Dataset {
        let mut pairs = Vec::new();
        for b in 0..n_blocks {
            for u in 0..users_per_block {
                for i in 0..items_per_block {
                    pairs.push((
                        (b * users_per_block + u) as u32,
                        (b * items_per_block + i) as u32,
                    ));
                }
            }
        }
        Dataset::new(n_blocks * users_per_block, n_blocks * items_per_block, &pairs)
            .expect("planted construction is in range by construction")
    }

    /// A long-tail dataset: item popularity decays as `1/(rank+1)^alpha`, and
    /// each user draws a uniform-random count of distinct items in
    /// `[min_per_user, max_per_user]` from that popularity law.
    pub fn long_tail(
        n_users: usize,
        n_items: usize,
        min_per_user: usize,
        max_per_user: usize,
        alpha: f64,
        rng: &mut SeededRng,
    ) -> Dataset {
        assert!(min_per_user >= 1 && max_per_user >= min_per_user && max_per_user <= n_items);
        let weights: Vec<f64> = (0..n_items)
            .map(|i| 1.0 / ((i + 1) as f64).powf(alpha))
            .collect();
        let cumulative: Vec<f64> = weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().unwrap();

        let mut pairs = Vec::new();
        for u in 0..n_users {
            let count = rng.random_range(min_per_user..=max_per_user);
            let mut chosen: Vec<u32> = Vec::with_capacity(count);
            while chosen.len() < count {
                let x = rng.random::<f64>() * total;
                let item = cumulative.partition_point(|&c| c < x).min(n_items - 1) as u32;
                if !chosen.contains(&item) {
                    chosen.push(item);
                }
            }
            for i in chosen {
                pairs.push((u as u32, i));
            }
        }
        Dataset::new(n_users, n_items, &pairs).expect("ids in range by construction")
    }
}
