//! Binary-level tests: the `evaluate` pipeline against an independent metric
//! reimplementation, and the exit-code contract for each error class.
//!
//! The metric oracle here shares no ranking or metric code with the library;
//! it recomputes scores, masking, ranks, and the three metrics from scratch
//! so that agreement checks the whole save/load/evaluate path, not just the
//! serializer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use psl_core::data::{save_split_dir, split_iid, synthetic, SplitBundle};
use psl_core::model::{save_checkpoint, Backbone, CheckpointManifest, EmbeddingModel};
use psl_core::rng::SeededRng;
use serde_json::Value;
use tempfile::TempDir;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root exists")
}

fn psl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_psl"));
    cmd.current_dir(workspace_root());
    cmd
}

fn exit_code(cmd: &mut Command) -> i32 {
    let output = cmd.output().expect("binary runs");
    output.status.code().expect("no signal")
}

// ---------------------------------------------------------------------------
// Independent metric arithmetic
// ---------------------------------------------------------------------------

/// Halved cosine, same contract as the library scorer but recomputed here.
fn half_cosine(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    0.5 * dot / (nu * nv)
}

struct OracleReport {
    /// `k -> (recall, ndcg, mrr)`.
    per_k: BTreeMap<usize, (f64, f64, f64)>,
    n_users: usize,
}

/// Test-set metrics recomputed from first principles: train positives are
/// removed from the candidate pool, survivors are ordered by score descending
/// with ties broken by ascending item index, and per-user rows are averaged
/// over users that have at least one test positive.
fn oracle_metrics(model: &EmbeddingModel, bundle: &SplitBundle, ks: &[usize]) -> OracleReport {
    let n_items = bundle.n_items() as u32;
    let mut sums: BTreeMap<usize, (f64, f64, f64)> =
        ks.iter().map(|&k| (k, (0.0, 0.0, 0.0))).collect();
    let mut n_users = 0usize;

    for user in 0..bundle.n_users() as u32 {
        let targets = bundle.test.positives(user);
        if targets.is_empty() {
            continue;
        }
        n_users += 1;

        let masked = bundle.train.positives(user);
        let mut pool: Vec<(u32, f64)> = (0..n_items)
            .filter(|item| masked.binary_search(item).is_err())
            .map(|item| {
                let s = half_cosine(
                    model.users.row(user as usize),
                    model.items.row(item as usize),
                );
                (item, s)
            })
            .collect();
        pool.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let rank_of: BTreeMap<u32, usize> = pool
            .iter()
            .enumerate()
            .map(|(pos, &(item, _))| (item, pos + 1))
            .collect();

        for (&k, sum) in sums.iter_mut() {
            let hits: Vec<usize> = targets
                .iter()
                .map(|t| rank_of[t])
                .filter(|&r| r <= k)
                .collect();
            sum.0 += hits.len() as f64 / targets.len() as f64;
            let dcg: f64 = hits.iter().map(|&r| 1.0 / (1.0 + r as f64).log2()).sum();
            let idcg: f64 = (1..=k.min(targets.len()))
                .map(|r| 1.0 / (1.0 + r as f64).log2())
                .sum();
            sum.1 += dcg / idcg;
            if !hits.is_empty() {
                sum.2 += hits.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / hits.len() as f64;
            }
        }
    }

    for sum in sums.values_mut() {
        sum.0 /= n_users as f64;
        sum.1 /= n_users as f64;
        sum.2 /= n_users as f64;
    }
    OracleReport {
        per_k: sums,
        n_users,
    }
}

// ---------------------------------------------------------------------------
// evaluate: end-to-end agreement with the oracle
// ---------------------------------------------------------------------------

#[test]
fn evaluate_pipeline_matches_independent_oracle() {
    const KS: [usize; 2] = [5, 20];

    let dir = TempDir::new().unwrap();
    let mut data_rng = SeededRng::new(3001);
    let base = synthetic::long_tail(60, 40, 3, 8, 0.7, &mut data_rng);
    let bundle = split_iid(&base, 0.25, 0.0, &mut data_rng).unwrap();
    let split_dir = dir.path().join("split");
    save_split_dir(&split_dir, &bundle, None, 3001, 0.25, 0.0, 0.0).unwrap();

    let mut model_rng = SeededRng::new(3002);
    let model = EmbeddingModel::init(60, 40, 8, Backbone::Mf, &mut model_rng).unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let manifest = CheckpointManifest {
        seed: 3002,
        config_hash: "fixture".to_string(),
    };
    save_checkpoint(&ckpt, &model, &manifest).unwrap();

    let out = dir.path().join("evaluate.json");
    let status = psl()
        .args(["evaluate", "--checkpoint"])
        .arg(&ckpt)
        .arg("--split")
        .arg(&split_dir)
        .args(["--k", "5,20", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "evaluate exited with {status}");

    let report: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    let oracle = oracle_metrics(&model, &bundle, &KS);

    assert_eq!(
        report["n_users_evaluated"].as_u64().unwrap() as usize,
        oracle.n_users
    );
    for (&k, &(recall, ndcg, mrr)) in &oracle.per_k {
        let row = &report["metrics"][k.to_string()];
        for (name, want) in [("recall", recall), ("ndcg", ndcg), ("mrr", mrr)] {
            let got = row[name].as_f64().unwrap();
            assert!(
                (got - want).abs() <= 1e-12,
                "{name}@{k}: binary {got} vs oracle {want}"
            );
        }
    }

    // Distributional sanity: the checkpoint is one draw of a random model, so
    // its score must sit inside the spread of fresh draws from the same
    // initializer, all measured by the oracle arithmetic alone.
    let replicates: Vec<f64> = (0..300)
        .map(|r| {
            let mut rng = SeededRng::new(4000 + r);
            let m = EmbeddingModel::init(60, 40, 8, Backbone::Mf, &mut rng).unwrap();
            oracle_metrics(&m, &bundle, &[20]).per_k[&20].1
        })
        .collect();
    let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
    let var = replicates.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
        / (replicates.len() - 1) as f64;
    let band = 6.0 * var.sqrt();
    let got = report["metrics"]["20"]["ndcg"].as_f64().unwrap();
    assert!(
        (got - mean).abs() <= band,
        "ndcg@20 {got} outside {mean} +- {band} over 300 random models"
    );
}

// ---------------------------------------------------------------------------
// Exit codes per error class
// ---------------------------------------------------------------------------

#[test]
fn exit_codes_follow_error_classes() {
    // Usage errors from the argument parser.
    assert_eq!(exit_code(&mut psl()), 1, "no subcommand");
    assert_eq!(exit_code(psl().arg("frobnicate")), 1, "unknown subcommand");
    assert_eq!(exit_code(psl().arg("--help")), 0, "help");
    assert_eq!(exit_code(psl().arg("--version")), 0, "version");

    // Missing files surface as I/O failures.
    assert_eq!(
        exit_code(psl().args([
            "evaluate",
            "--checkpoint",
            "/nonexistent/ckpt.json",
            "--split",
            "/nonexistent/split"
        ])),
        2,
        "missing checkpoint"
    );
    assert_eq!(
        exit_code(psl().args([
            "train",
            "--config",
            "/nonexistent/config.toml",
            "--split",
            "/tmp",
            "--out",
            "/tmp"
        ])),
        2,
        "missing config"
    );

    // Malformed configuration is a usage problem, not a data problem.
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    let mut text = fs::read_to_string(workspace_root().join("configs/toy_iid.toml")).unwrap();
    text.push_str("\nbogus_key = 1\n");
    fs::write(&bad, text).unwrap();
    assert_eq!(
        exit_code(
            psl()
                .args(["train", "--config"])
                .arg(&bad)
                .args(["--split", "/tmp", "--out", "/tmp"])
        ),
        1,
        "unknown config key"
    );
    assert_eq!(
        exit_code(psl().args([
            "train",
            "--config",
            "configs/toy_iid.toml",
            "--set",
            "no-equals-sign",
            "--split",
            "/tmp",
            "--out",
            "/tmp"
        ])),
        1,
        "malformed --set override"
    );
}
