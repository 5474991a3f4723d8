use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::federation::FederationConfig;
use crate::model::ArchConfig;
use crate::phantom::{AppearanceProfile, LesionSpec, SplitCounts};
use crate::segment::PostprocessConfig;

/// One simulated site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSpec {
    pub id: String,
    pub profile: AppearanceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub size: (usize, usize),
    pub counts: SplitCounts,
    /// Training sites; their test splits receive lesions.
    pub clients: Vec<SiteSpec>,
    /// Held-out healthy site, used for reconstruction fidelity and embeddings.
    pub unseen: SiteSpec,
    #[serde(default)]
    pub lesions: LesionSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Ascending lower bounds of the lesion-area buckets, in mm².
    pub bucket_thresholds_mm2: Vec<f64>,
    pub pixel_area_mm2: f64,
    /// Gamma range of the shifted copy used for shape-consistency embeddings.
    pub embedding_gamma_range: (f64, f64),
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            bucket_thresholds_mm2: vec![0.0, 64.0, 128.0, 256.0],
            pixel_area_mm2: 4.0,
            embedding_gamma_range: (0.5, 2.0),
        }
    }
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Row label in comparison tables; defaults to the strategy (and ablation).
    #[serde(default)]
    pub name: Option<String>,
    /// Root of every derived random stream. `federation.seed` must stay unset.
    pub seed: u64,
    pub data: DataSpec,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    #[serde(default)]
    pub postprocess: PostprocessConfig,
    #[serde(default)]
    pub metrics: MetricOptions,
    /// Run directory; the command line may override it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

/// SHA-256 of the canonical (key-sorted) JSON form of `value`.
pub(crate) fn hash_json<S: Serialize>(value: &S) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let config: Self = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        ensure!(
            !d.clients.is_empty(),
            Config,
            "data.clients must list at least one site"
        );
        let mut ids = BTreeSet::new();
        for site in d.clients.iter().chain([&d.unseen]) {
            ensure!(
                valid_id(&site.id),
                Config,
                "site id '{}' must be nonempty and use only letters, digits, '-' or '_'",
                site.id
            );
            ensure!(
                ids.insert(site.id.as_str()),
                Config,
                "site id '{}' is used twice",
                site.id
            );
            site.profile.validate()?;
        }
        ensure!(
            d.size == self.arch.input_size,
            Config,
            "data.size {:?} differs from arch.input_size {:?}",
            d.size,
            self.arch.input_size
        );
        ensure!(
            d.counts.train > 0 && d.counts.val > 0 && d.counts.test > 0,
            Config,
            "split counts must be positive, got {:?}",
            d.counts
        );
        ensure!(
            self.federation.seed == 0,
            Config,
            "federation.seed is derived from the top-level seed; leave it unset"
        );
        self.arch.validate(self.federation.strategy.disentangled())?;
        self.federation.validate()?;
        self.postprocess.validate()?;
        let m = &self.metrics;
        ensure!(
            !m.bucket_thresholds_mm2.is_empty() && m.bucket_thresholds_mm2.windows(2).all(|w| w[0] < w[1]),
            Config,
            "bucket thresholds must be nonempty and strictly increasing"
        );
        ensure!(m.pixel_area_mm2 > 0.0, Config, "pixel_area_mm2 must be positive");
        let (lo, hi) = m.embedding_gamma_range;
        ensure!(
            lo > 0.0 && lo <= hi,
            Config,
            "embedding_gamma_range must satisfy 0 < lo <= hi"
        );
        Ok(())
    }

    /// Table row label.
    pub fn label(&self) -> String {
        if let Some(name) = &self.name {
            return name.clone();
        }
        let f = &self.federation;
        let mode = f.strategy.loss_mode(f.loss_mode);
        if f.strategy.disentangled() && mode != crate::losses::LossMode::Full {
            format!("{}_{}", f.strategy, mode.as_str())
        } else {
            f.strategy.to_string()
        }
    }

    /// Federation settings with the seed derived from the global one.
    pub(crate) fn effective_federation(&self) -> FederationConfig {
        FederationConfig {
            seed: crate::seeds::derive_seed(self.seed, "federation", 0),
            ..self.federation.clone()
        }
    }

    pub fn stage_hashes(&self) -> Result<StageHashes> {
        let data = hash_json(&(self.seed, &self.data))?;
        let train = hash_json(&(&data, &self.arch, &self.federation))?;
        let segment = hash_json(&(&train, &self.postprocess))?;
        let evaluate = hash_json(&(&segment, &self.metrics))?;
        let config = hash_json(&(&evaluate, &self.name))?;
        Ok(StageHashes {
            config,
            data,
            train,
            segment,
            evaluate,
        })
    }
}

/// Each stage's key covers its own settings and every upstream stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageHashes {
    pub config: String,
    pub data: String,
    pub train: String,
    pub segment: String,
    pub evaluate: String,
}
