//! TOML run configuration. Every key is optional; values overlay the built-in
//! defaults and are in turn overridden by command-line flags.

use std::path::Path;

use clap::ValueEnum;
use serde::Deserialize;

use linmatch::encoder::{AttentionVariant, NetworkConfig};
use linmatch::matcher::{FilterConfig, SmallNeighborhoods};
use linmatch::neighborhood::NeighborhoodConfig;
use linmatch::training::LossConfig;

use crate::error::CliError;

/// Copies every `Some` field of `$src` into the same-named field of `$dst`.
macro_rules! overlay {
    ($dst:expr, $src:expr; $($field:ident),* $(,)?) => {
        $(if let Some(v) = $src.$field.clone() {
            $dst.$field = v.into();
        })*
    };
}
pub(crate) use overlay;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AttentionArg {
    Linear,
    Softmax,
}

impl From<AttentionArg> for AttentionVariant {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Linear => AttentionVariant::Linear,
            AttentionArg::Softmax => AttentionVariant::Softmax,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmallArg {
    Drop,
    PassThrough,
}

impl From<SmallArg> for SmallNeighborhoods {
    fn from(a: SmallArg) -> Self {
        match a {
            SmallArg::Drop => SmallNeighborhoods::Drop,
            SmallArg::PassThrough => SmallNeighborhoods::PassThrough,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub input_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub heads: Option<usize>,
    pub l1: Option<usize>,
    pub l2: Option<usize>,
    pub tie_weights: Option<bool>,
    pub attention: Option<AttentionArg>,
}

impl NetworkSection {
    /// Field-wise `self` over `base`.
    pub fn or(&self, base: &NetworkSection) -> NetworkSection {
        NetworkSection {
            input_dim: self.input_dim.or(base.input_dim),
            hidden_dim: self.hidden_dim.or(base.hidden_dim),
            heads: self.heads.or(base.heads),
            l1: self.l1.or(base.l1),
            l2: self.l2.or(base.l2),
            tie_weights: self.tie_weights.or(base.tie_weights),
            attention: self.attention.or(base.attention),
        }
    }

    pub fn apply(&self, cfg: &mut NetworkConfig) {
        overlay!(cfg, self; input_dim, hidden_dim, heads, l1, l2, tie_weights, attention);
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighborhoodSection {
    pub theta: Option<f64>,
    pub lambda: Option<f64>,
    pub radius: Option<f64>,
    pub radius_source: Option<f64>,
    pub radius_target: Option<f64>,
    pub min_neighborhood: Option<usize>,
}

impl NeighborhoodSection {
    pub fn apply(&self, cfg: &mut NeighborhoodConfig) {
        overlay!(cfg, self; theta, lambda, radius, radius_source, radius_target, min_neighborhood);
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub ransac_iterations: Option<usize>,
    pub inlier_threshold_factor: Option<f64>,
    pub min_inliers: Option<usize>,
    pub small_neighborhoods: Option<SmallArg>,
}

impl FilterSection {
    pub fn apply(&self, cfg: &mut FilterConfig) {
        overlay!(cfg, self; ransac_iterations, inlier_threshold_factor, min_inliers, small_neighborhoods);
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub m_p: Option<f64>,
    pub m_n: Option<f64>,
    pub learning_rate: Option<f64>,
    pub decay: Option<f64>,
    pub detach_confidence: Option<bool>,
}

impl LossSection {
    pub fn apply(&self, cfg: &mut LossConfig) {
        overlay!(cfg, self; m_p, m_n, learning_rate, decay, detach_confidence);
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub pairs: Option<usize>,
    pub kpts: Option<usize>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub dim: Option<usize>,
    pub descriptor_sigma: Option<f64>,
    pub keypoint_jitter: Option<f64>,
    pub distractors: Option<usize>,
    pub identity_homography: Option<bool>,
    pub min_matches: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySection {
    pub pairs: Option<usize>,
    pub held_out: Option<usize>,
    pub kpts: Option<usize>,
    pub steps: Option<usize>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub descriptor_sigma: Option<f64>,
    pub keypoint_jitter: Option<f64>,
    pub distractors: Option<usize>,
    pub min_matches: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub sizes: Option<Vec<usize>>,
    pub methods: Option<Vec<String>>,
    pub reps: Option<usize>,
    pub warmups: Option<usize>,
    pub min_sample_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub samples: Option<usize>,
    pub step: Option<f64>,
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub network: NetworkSection,
    pub neighborhood: NeighborhoodSection,
    pub filter: FilterSection,
    pub loss: LossSection,
    pub synth: SynthSection,
    pub toy: ToySection,
    pub bench: BenchSection,
    pub gradcheck: GradcheckSection,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("{origin}: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}
