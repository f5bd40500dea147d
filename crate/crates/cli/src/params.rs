//! Declarative run configuration: one JSON file with a section per
//! subcommand. Unknown keys are rejected; every default is explicit and
//! seeds never come from the wall clock. Precedence is
//! flag > config file > default, applied field by field in `commands`.

use serde::{Deserialize, Serialize};
use std::path::Path;
use veritrace_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateParams {
    pub cases: usize,
    pub rare: usize,
    pub seed: u64,
}

impl Default for GenerateParams {
    fn default() -> Self {
        GenerateParams {
            cases: 1000,
            rare: 10,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectParams {
    pub fraction: f64,
    /// Anomaly type names; empty means all six.
    pub types: Vec<String>,
    pub seed: u64,
}

impl Default for InjectParams {
    fn default() -> Self {
        InjectParams {
            fraction: 0.3,
            types: Vec::new(),
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MineParams {
    /// Template names; empty means all eight.
    pub templates: Vec<String>,
    /// When true, apply the thresholds/whitelist and emit a knowledge
    /// base; otherwise emit every mined constraint.
    pub select: bool,
    pub max_support: f64,
    pub min_confidence: f64,
    /// `Template(A,B)` entries, comma-separated; empty means no whitelist.
    pub whitelist: String,
}

impl Default for MineParams {
    fn default() -> Self {
        MineParams {
            templates: Vec::new(),
            select: false,
            max_support: 0.1,
            min_confidence: 0.9,
            whitelist: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainParams {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub noise_rate: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// 0 means "use the longest trace in the input log".
    pub max_len: usize,
}

impl Default for PretrainParams {
    fn default() -> Self {
        PretrainParams {
            epochs: 50,
            lr: 1e-3,
            batch: 32,
            noise_rate: 0.1,
            seed: 17,
            hidden: vec![64, 32, 64],
            max_len: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneParams {
    pub lambda_rec: f64,
    pub lambda_sat: f64,
    pub p_exists: f64,
    pub p_forall: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub replay_fraction: f64,
    pub batch: usize,
}

impl Default for FinetuneParams {
    fn default() -> Self {
        FinetuneParams {
            lambda_rec: 1.0,
            lambda_sat: 0.5,
            p_exists: 2.0,
            p_forall: 2.0,
            epochs: 30,
            lr: 1e-3,
            seed: 17,
            replay_fraction: 0.25,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    /// One of `elbow`, `percentile`, `mean_k_sigma`.
    pub heuristic: String,
    pub percentile: f64,
    pub k_sigma: f64,
    /// Explicit threshold; overrides the heuristic when set.
    pub threshold: Option<f64>,
}

impl Default for DetectParams {
    fn default() -> Self {
        DetectParams {
            heuristic: "elbow".into(),
            percentile: 95.0,
            k_sigma: 2.0,
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateParams {
    pub cases: usize,
    pub rare_counts: Vec<usize>,
    /// Templates swept across cells.
    pub templates: Vec<String>,
    pub fraction: f64,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub max_support: f64,
    pub min_confidence: f64,
    /// Anchor constraint whose arguments every cell reuses.
    pub whitelist: String,
    /// One of `elbow`, `percentile`, `mean_k_sigma`; applies to both arms.
    pub heuristic: String,
    pub percentile: f64,
    pub k_sigma: f64,
}

impl Default for AblateParams {
    fn default() -> Self {
        AblateParams {
            cases: 1000,
            rare_counts: vec![10, 25],
            templates: vec!["response".into(), "precedence".into()],
            fraction: 0.3,
            seed: 17,
            pretrain_epochs: 30,
            finetune_epochs: 30,
            max_support: 0.1,
            min_confidence: 0.3,
            whitelist: "Response(DevelopMethod,FinalDecision)".into(),
            heuristic: "elbow".into(),
            percentile: 95.0,
            k_sigma: 2.0,
        }
    }
}

/// The whole config file: one optional section per subcommand.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenerateParams,
    pub inject: InjectParams,
    pub mine: MineParams,
    pub pretrain: PretrainParams,
    pub finetune: FinetuneParams,
    pub detect: DetectParams,
    pub ablate: AblateParams,
}

impl RunConfig {
    /// Loads the config file when given; otherwise all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Argument(format!("config file {}: {e}", p.display()))
                })
            }
        }
    }
}

/// `flag.or(config)` for copy-on-override merging.
pub fn merge<T>(flag: Option<T>, config: T) -> T {
    flag.unwrap_or(config)
}
