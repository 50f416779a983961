//! Declarative run configuration, loadable from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::lcc::{Algorithm, LccConfig, StopRule, DEFAULT_EXP_RANGE};
use crate::nncore::{Architecture, TrainConfig, DATA_DIR_ENV};
use crate::numerics::FixedPointConfig;
use crate::par::Parallelism;
use crate::sharing::{ApConfig, Preference, ShareConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the MNIST IDX files; falls back to the environment
    /// variable and then to `data/mnist`.
    pub root: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_limit: Some(10_000),
            test_limit: None,
        }
    }
}

impl DataConfig {
    pub fn resolve_root(&self) -> PathBuf {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Group-lasso weight per layer; missing entries mean unregularized.
    pub lambdas: Vec<f64>,
    /// Groups with norm at or below this are dropped.
    pub tol: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            lambdas: Vec::new(),
            tol: crate::pruning::PRUNE_TOL,
        }
    }
}

impl PruneConfig {
    pub fn is_active(&self) -> bool {
        self.lambdas.iter().any(|&l| l > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SharingStage {
    pub enabled: bool,
    /// Dense layers to cluster.
    pub layers: Vec<usize>,
    /// Retraining epochs with tied columns.
    pub epochs: usize,
    pub preference: Preference,
    /// Cluster unit-norm columns instead of raw ones.
    pub normalize: bool,
    pub damping: f64,
    pub max_iter: usize,
    pub convergence_iter: usize,
}

impl Default for SharingStage {
    fn default() -> Self {
        let ap = ApConfig::default();
        SharingStage {
            enabled: true,
            layers: vec![0],
            epochs: 20,
            preference: Preference::default(),
            normalize: false,
            damping: ap.damping,
            max_iter: ap.max_iter,
            convergence_iter: ap.convergence_iter,
        }
    }
}

impl SharingStage {
    /// Clustering settings for a run seeded with `seed`.
    pub fn clustering(&self, seed: u64, parallelism: Parallelism) -> ShareConfig {
        ShareConfig {
            preference: self.preference,
            normalize: self.normalize,
            ap: ApConfig {
                damping: self.damping,
                max_iter: self.max_iter,
                convergence_iter: self.convergence_iter,
                seed,
                parallelism,
            },
        }
    }
}

/// Fidelity target for every decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SqnrPolicy {
    /// Reach at least the SQNR of the baseline fixed-point quantization of
    /// the same matrix.
    #[default]
    MatchBaseline,
    FixedDb(f64),
    FixedFactors(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LccAlgorithm {
    Fp,
    #[default]
    Fs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LccStage {
    pub enabled: bool,
    pub algorithm: LccAlgorithm,
    /// FP: terms per row.
    pub terms: usize,
    pub slice_width: Option<usize>,
    pub policy: SqnrPolicy,
    /// FS: candidate set size.
    pub candidates: usize,
    /// FS: addition budget per slice.
    pub budget: Option<usize>,
}

impl Default for LccStage {
    fn default() -> Self {
        LccStage {
            enabled: true,
            algorithm: LccAlgorithm::Fs,
            terms: 2,
            slice_width: None,
            policy: SqnrPolicy::MatchBaseline,
            candidates: 64,
            budget: None,
        }
    }
}

impl LccStage {
    /// Decomposition settings for a matrix whose baseline SQNR is `base_db`.
    pub fn lcc_config(&self, base_db: f64, parallelism: Parallelism) -> LccConfig {
        let stop = match self.policy {
            SqnrPolicy::MatchBaseline => StopRule::target(base_db),
            SqnrPolicy::FixedDb(db) => StopRule::target(db),
            SqnrPolicy::FixedFactors(p) => StopRule::factors(p),
        };
        LccConfig {
            algorithm: match self.algorithm {
                LccAlgorithm::Fp => Algorithm::Fp { terms: self.terms },
                LccAlgorithm::Fs => Algorithm::Fs,
            },
            slice_width: self.slice_width,
            stop: StopRule {
                budget: self.budget,
                ..stop
            },
            exp_range: DEFAULT_EXP_RANGE,
            fs_candidates: self.candidates,
            parallelism,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// First-layer lambdas, one independent run each.
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub parallelism: Parallelism,
    pub data: DataConfig,
    pub model: Architecture,
    pub train: TrainConfig,
    pub prune: PruneConfig,
    pub share: SharingStage,
    pub lcc: LccStage,
    pub baseline: FixedPointConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            parallelism: Parallelism::default(),
            data: DataConfig::default(),
            model: Architecture::default(),
            train: TrainConfig::default(),
            prune: PruneConfig::default(),
            share: SharingStage::default(),
            lcc: LccStage::default(),
            baseline: FixedPointConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is representable in TOML")
    }

    pub fn n_layers(&self) -> usize {
        match &self.model {
            Architecture::Mlp { hidden } => hidden.len() + 1,
            Architecture::Conv { hidden, .. } => hidden.len() + 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let n = self.n_layers();
        self.train.validate()?;
        self.baseline.validate()?;
        if !self.train.lambdas.is_empty() {
            return fail("set lambdas under [prune], not [train]".into());
        }
        if self.prune.lambdas.len() > n {
            return fail(format!("{} lambdas for {n} layers", self.prune.lambdas.len()));
        }
        if let Some(l) = self.prune.lambdas.iter().chain(&self.sweep.lambdas).find(|l| !(l.is_finite() && **l >= 0.0)) {
            return fail(format!("lambda must be finite and >= 0, got {l}"));
        }
        if !(self.prune.tol >= 0.0) {
            return fail("prune.tol must be >= 0".into());
        }
        if self.share.enabled {
            if !(self.share.damping >= 0.5 && self.share.damping < 1.0) {
                return fail(format!("share.damping must be in [0.5, 1), got {}", self.share.damping));
            }
            if self.share.max_iter == 0 || self.share.convergence_iter == 0 {
                return fail("share.max_iter and share.convergence_iter must be >= 1".into());
            }
            if let Some(&l) = self.share.layers.iter().find(|&&l| l >= n) {
                return fail(format!("sharing refers to layer {l}, model has {n}"));
            }
            if let Architecture::Conv { .. } = self.model {
                if self.share.layers.contains(&0) {
                    return fail("layer 0 is convolutional and cannot be shared".into());
                }
            }
        }
        if self.lcc.enabled {
            if self.lcc.algorithm == LccAlgorithm::Fp && self.lcc.terms < 2 {
                return fail("lcc.terms must be >= 2".into());
            }
            if self.lcc.slice_width == Some(0) || self.lcc.candidates == 0 {
                return fail("lcc.slice_width and lcc.candidates must be >= 1".into());
            }
            match self.lcc.policy {
                SqnrPolicy::FixedDb(db) if db.is_nan() => return fail("lcc target dB is NaN".into()),
                SqnrPolicy::FixedFactors(0) => return fail("lcc needs at least one factor".into()),
                SqnrPolicy::FixedFactors(_) if self.lcc.algorithm == LccAlgorithm::Fs => {
                    return fail("the FS algorithm stops on SQNR, not on a factor count".into())
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Training settings for the regularized run.
    pub fn regularized_train(&self) -> TrainConfig {
        TrainConfig {
            lambdas: self.prune.lambdas.clone(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Training settings for the unregularized baseline.
    pub fn baseline_train(&self) -> TrainConfig {
        TrainConfig {
            lambdas: Vec::new(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Training settings for retraining with tied columns.
    pub fn retrain(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.share.epochs,
            lambdas: Vec::new(),
            seed: self.seed.wrapping_add(1),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        let partial = PipelineConfig::from_toml_str("seed = 7\n[prune]\nlambdas = [0.5]\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.prune.lambdas, vec![0.5]);
        assert_eq!(partial.train, TrainConfig::default());
    }

    #[test]
    fn policies_parse() {
        let c = PipelineConfig::from_toml_str("[lcc]\npolicy = { fixed-db = 40.0 }\n").unwrap();
        assert_eq!(c.lcc.policy, SqnrPolicy::FixedDb(40.0));
        let c = PipelineConfig::from_toml_str("[lcc]\nalgorithm = \"fp\"\npolicy = { fixed-factors = 3 }\n").unwrap();
        assert_eq!(c.lcc.lcc_config(0.0, Parallelism::Sequential).stop, StopRule::factors(3));
        let c = PipelineConfig::from_toml_str("[lcc]\npolicy = \"match-baseline\"\n").unwrap();
        assert_eq!(c.lcc.lcc_config(50.0, Parallelism::Sequential).stop, StopRule::target(50.0));
    }

    #[test]
    fn rejects_inconsistent_configs() {
        for text in [
            "bogus = 1\n",
            "[prune]\nlambdas = [0.1, 0.0, 0.3]\n",
            "[prune]\nlambdas = [-1.0]\n",
            "[share]\nlayers = [5]\n",
            "[train]\nlambdas = [0.1]\n",
            "[lcc]\npolicy = { fixed-factors = 2 }\n",
            "[model]\narch = \"conv\"\nmaps = 2\nkernel = 3\n",
        ] {
            assert!(matches!(PipelineConfig::from_toml_str(text), Err(Error::Config(_))), "{text}");
        }
    }
}
