//! Experiment configuration.
//!
//! A run is described by one sectioned TOML file; every key can be overridden
//! from the command line with `--set section.key=value`, so a grid of related
//! runs shares a single checked-in file.  The effective configuration (file
//! plus overrides) is hashed and the hash is stamped into every report and
//! checkpoint, which makes results traceable to the exact settings that
//! produced them.
//!
//! All keys have defaults; an empty file is a valid configuration.

use std::fs;
use std::path::Path;

use psl_core::losses::{LossSpec, Placement};
use psl_core::model::Backbone;
use psl_core::optim::TrainConfig;
use psl_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub grid: GridSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            data: DataSection::default(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            grid: GridSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Raw interaction TSV, `user<TAB>item` per line.
    pub path: String,
    pub k_core: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: "data/toy.tsv".to_string(),
            k_core: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    /// `iid`, `ood`, or `noise`.
    pub kind: String,
    pub test_frac: f64,
    pub val_frac: f64,
    /// Fraction of train interactions withheld into the per-user noise pools
    /// (noise splits only).
    pub noise_frac: f64,
    /// Probability that a sampled negative is drawn from the user's noise
    /// pool instead of the uninteracted items.
    pub noise_ratio_p: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            kind: "iid".to_string(),
            test_frac: 0.2,
            val_frac: 0.1,
            noise_frac: 0.1,
            noise_ratio_p: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `mf` or `light_gcn`.
    pub backbone: String,
    pub dim: usize,
    /// Propagation depth; read only when the backbone is `light_gcn`.
    pub lightgcn_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            backbone: "mf".to_string(),
            dim: 64,
            lightgcn_layers: 2,
        }
    }
}

/// One loss description.  Which keys are read depends on `kind`: `psl` uses
/// `activation`, `tau`, and `placement`; `sl` uses `tau`; `bsl` uses `tau1`
/// and `tau2`; `bpr` uses none.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: String,
    pub activation: String,
    pub tau: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub placement: String,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            kind: "sl".to_string(),
            activation: "tanh_plus_one".to_string(),
            tau: 0.2,
            tau1: 1.0,
            tau2: 0.2,
            placement: "outside".to_string(),
        }
    }
}

impl LossSection {
    pub fn to_spec(&self) -> Result<LossSpec> {
        match self.kind.as_str() {
            "psl" => LossSpec::psl(self.activation.parse()?, self.tau, self.parse_placement()?),
            "sl" => LossSpec::sl(self.tau),
            "bpr" => Ok(LossSpec::bpr()),
            "bsl" => LossSpec::bsl(self.tau1, self.tau2),
            other => Err(Error::config(format!(
                "unknown loss kind `{other}` (expected psl, sl, bpr, or bsl)"
            ))),
        }
    }

    fn parse_placement(&self) -> Result<Placement> {
        match self.placement.as_str() {
            "outside" => Ok(Placement::Outside),
            "inside" => Ok(Placement::Inside),
            other => Err(Error::config(format!(
                "unknown placement `{other}` (expected outside or inside)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub n_negatives: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 1024,
            epochs: 200,
            n_negatives: 1000,
            eval_every: 10,
        }
    }
}

/// Hyperparameter lists for exhaustive grid search.  An empty list means
/// "use the single value from the base sections".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub tau: Vec<f64>,
}

/// Losses compared side by side by `sweep-noise`.  Empty means "just the
/// `[loss]` section".
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub losses: Vec<LossSection>,
}

/// One point of the hyperparameter grid, in deterministic enumeration order
/// (lr outermost, then weight_decay, then tau).
#[derive(Debug, Clone)]
pub struct GridCell {
    pub index: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// `None` when no tau grid was given; the base loss keeps its own value.
    pub tau: Option<f64>,
    pub spec: LossSpec,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parse a TOML document, then apply `--set` overrides in order.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config parse error: {e}")))?;
        for spec in overrides {
            apply_override(&mut table, spec)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("invalid config: {e}")))
    }

    /// SHA-256 of the canonical serialized form of the *effective*
    /// configuration, so any override changes the hash.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config is plain data and always serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn setting(&self) -> Result<psl_core::data::SettingTag> {
        self.split.kind.parse()
    }

    pub fn backbone(&self) -> Result<Backbone> {
        match self.model.backbone.as_str() {
            "mf" => Ok(Backbone::Mf),
            "light_gcn" => {
                if self.model.lightgcn_layers == 0 {
                    return Err(Error::config(
                        "light_gcn needs at least one propagation layer (use mf for zero)",
                    ));
                }
                Ok(Backbone::LightGcn {
                    layers: self.model.lightgcn_layers,
                })
            }
            other => Err(Error::config(format!(
                "unknown backbone `{other}` (expected mf or light_gcn)"
            ))),
        }
    }

    /// Base training configuration; callers adjust `lr`, `weight_decay`,
    /// `noise_ratio_p`, and `stream_base` per grid cell or sweep point.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.model.dim,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            n_negatives: self.train.n_negatives,
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            seed: self.seed,
            eval_every: self.train.eval_every,
            noise_ratio_p: self.split.noise_ratio_p,
            stream_base: 0,
        }
    }

    /// Cartesian product of the grid lists over the base configuration.
    pub fn grid_cells(&self) -> Result<Vec<GridCell>> {
        let base = self.loss.to_spec()?;
        let lrs = if self.grid.lr.is_empty() {
            vec![self.train.lr]
        } else {
            self.grid.lr.clone()
        };
        let wds = if self.grid.weight_decay.is_empty() {
            vec![self.train.weight_decay]
        } else {
            self.grid.weight_decay.clone()
        };
        let taus: Vec<Option<f64>> = if self.grid.tau.is_empty() {
            vec![None]
        } else {
            self.grid.tau.iter().copied().map(Some).collect()
        };
        let mut cells = Vec::with_capacity(lrs.len() * wds.len() * taus.len());
        for &lr in &lrs {
            for &weight_decay in &wds {
                for &tau in &taus {
                    let spec = match tau {
                        None => base,
                        Some(t) => with_tau(&base, t)?,
                    };
                    cells.push(GridCell {
                        index: cells.len(),
                        lr,
                        weight_decay,
                        tau,
                        spec,
                    });
                }
            }
        }
        Ok(cells)
    }

    /// Losses a noise sweep trains, in declaration order.
    pub fn sweep_specs(&self) -> Result<Vec<LossSpec>> {
        if self.sweep.losses.is_empty() {
            return Ok(vec![self.loss.to_spec()?]);
        }
        self.sweep.losses.iter().map(LossSection::to_spec).collect()
    }
}

/// The same loss with its temperature replaced by a grid value.
fn with_tau(spec: &LossSpec, tau: f64) -> Result<LossSpec> {
    match *spec {
        LossSpec::Psl {
            activation,
            placement,
            ..
        } => LossSpec::psl(activation, tau, placement),
        LossSpec::Sl { .. } => LossSpec::sl(tau),
        LossSpec::Bsl { tau1, .. } => LossSpec::bsl(tau1, tau),
        LossSpec::Bpr => Err(Error::config(
            "bpr has no temperature; remove the grid.tau list",
        )),
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| {
        Error::config(format!(
            "override `{spec}` is not of the form section.key=value"
        ))
    })?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_override_value(raw.trim());
    let mut current = table;
    for seg in &segments[..segments.len() - 1] {
        current = current
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                Error::config(format!(
                    "override `{spec}` walks through `{seg}`, which is not a table"
                ))
            })?;
    }
    current.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Interpret the right side of an override with the TOML value grammar, so
/// numbers, booleans, arrays, and quoted strings behave exactly as in the
/// file.  Bare words fall back to strings (`--set split.kind=ood`).
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use psl_core::activations::ActivationKind;
    use psl_core::data::SettingTag;

    #[test]
    fn empty_file_yields_protocol_defaults() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.data.k_core, 10);
        assert_eq!(cfg.split.test_frac, 0.2);
        assert_eq!(cfg.split.val_frac, 0.1);
        assert_eq!(cfg.split.noise_frac, 0.1);
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.model.lightgcn_layers, 2);
        assert_eq!(cfg.loss.placement, "outside");
        assert_eq!(cfg.train.batch_size, 1024);
        assert_eq!(cfg.train.epochs, 200);
        assert_eq!(cfg.train.n_negatives, 1000);
        assert_eq!(cfg.setting().unwrap(), SettingTag::Iid);
        assert_eq!(cfg.backbone().unwrap(), Backbone::Mf);
    }

    #[test]
    fn overrides_parse_with_toml_value_grammar() {
        let overrides = vec![
            "seed=7".to_string(),
            "train.lr=0.05".to_string(),
            "split.kind=ood".to_string(),
            "data.path=data/somewhere.tsv".to_string(),
            "grid.tau=[0.1, 0.2]".to_string(),
            "model.backbone=\"light_gcn\"".to_string(),
        ];
        let cfg = ExperimentConfig::from_toml("", &overrides).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.lr, 0.05);
        assert_eq!(cfg.split.kind, "ood");
        assert_eq!(cfg.data.path, "data/somewhere.tsv");
        assert_eq!(cfg.grid.tau, vec![0.1, 0.2]);
        assert_eq!(
            cfg.backbone().unwrap(),
            Backbone::LightGcn { layers: 2 }
        );
    }

    #[test]
    fn override_must_name_a_known_key() {
        let err = ExperimentConfig::from_toml("", &["train.learning_rate=0.1".to_string()])
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn unknown_section_in_file_is_rejected() {
        let err = ExperimentConfig::from_toml("[swep]\nlosses = []\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "got {err}");
    }

    #[test]
    fn malformed_override_is_rejected() {
        for bad in ["train.lr", "=3", "train..lr=3"] {
            let err = ExperimentConfig::from_toml("", &[bad.to_string()]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "`{bad}` gave {err}");
        }
    }

    #[test]
    fn hash_is_stable_and_sensitive_to_overrides() {
        let a = ExperimentConfig::from_toml("", &[]).unwrap();
        let b = ExperimentConfig::from_toml("", &[]).unwrap();
        let c = ExperimentConfig::from_toml("", &["seed=7".to_string()]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn loss_section_builds_every_kind() {
        let mut section = LossSection::default();
        assert_eq!(section.to_spec().unwrap(), LossSpec::sl(0.2).unwrap());

        section.kind = "psl".to_string();
        section.activation = "relu_shift".to_string();
        section.placement = "inside".to_string();
        assert_eq!(
            section.to_spec().unwrap(),
            LossSpec::psl(ActivationKind::ReluShift, 0.2, Placement::Inside).unwrap()
        );

        section.kind = "bpr".to_string();
        assert_eq!(section.to_spec().unwrap(), LossSpec::bpr());

        section.kind = "bsl".to_string();
        section.tau1 = 0.5;
        section.tau2 = 0.1;
        assert_eq!(
            section.to_spec().unwrap(),
            LossSpec::bsl(0.5, 0.1).unwrap()
        );

        section.kind = "hinge".to_string();
        assert!(section.to_spec().is_err());
    }

    #[test]
    fn grid_cells_enumerate_lr_major() {
        let text = "[grid]\nlr = [0.1, 0.01]\ntau = [0.5, 0.05]\n";
        let cfg = ExperimentConfig::from_toml(text, &[]).unwrap();
        let cells = cfg.grid_cells().unwrap();
        assert_eq!(cells.len(), 4);
        let shape: Vec<(f64, Option<f64>)> = cells.iter().map(|c| (c.lr, c.tau)).collect();
        assert_eq!(
            shape,
            vec![
                (0.1, Some(0.5)),
                (0.1, Some(0.05)),
                (0.01, Some(0.5)),
                (0.01, Some(0.05)),
            ]
        );
        assert_eq!(cells[1].spec, LossSpec::sl(0.05).unwrap());
        assert_eq!(cells[0].weight_decay, 0.0);
        assert_eq!(cells[3].index, 3);
    }

    #[test]
    fn tau_grid_over_bpr_is_rejected() {
        let text = "[loss]\nkind = \"bpr\"\n\n[grid]\ntau = [0.1]\n";
        let cfg = ExperimentConfig::from_toml(text, &[]).unwrap();
        assert!(cfg.grid_cells().is_err());
    }

    #[test]
    fn sweep_defaults_to_the_single_configured_loss() {
        let cfg = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(cfg.sweep_specs().unwrap(), vec![LossSpec::sl(0.2).unwrap()]);

        let text = concat!(
            "[[sweep.losses]]\nkind = \"sl\"\ntau = 0.2\n\n",
            "[[sweep.losses]]\nkind = \"psl\"\nactivation = \"relu_shift\"\ntau = 0.2\n",
        );
        let cfg = ExperimentConfig::from_toml(text, &[]).unwrap();
        let specs = cfg.sweep_specs().unwrap();
        assert_eq!(specs.len(), 2);
        assert!(specs[1].is_softmax_equivalent() == false);
    }
}
