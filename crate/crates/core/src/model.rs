//! Versioned on-disk bundle of everything inference needs.
//!
//! Training produces one self-contained JSON artifact: the theme
//! inventory, feature configuration, weight table, the four classifier
//! models (the cosine and density systems are fully described by the
//! weight table plus their thresholds), the re-scoring evidence lists,
//! and the repair-rule configuration.  A format version is checked on
//! load — an unknown version is a hard error, never a silent
//! reinterpretation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::ThemeSet;
use crate::cosine::CosineConfig;
use crate::density::DensityConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, ThemeWeightTable};
use crate::hmm::HmmModel;
use crate::poisson::PoissonModel;
use crate::recovery::{
    CoherenceTable, MentionPatterns, ReConfig, ReFeatureSet, RecoveryRule,
};

/// Current bundle format version.
pub const BUNDLE_VERSION: u32 = 1;

/// A trained model set plus the configuration needed to apply it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    pub themes: ThemeSet,
    pub feature_config: FeatureConfig,
    /// Purity-weighted theme vectors shared by the cosine and density
    /// systems.
    pub weights: ThemeWeightTable,
    pub cosine: CosineConfig,
    pub density: DensityConfig,
    pub hmm: HmmModel,
    pub poisson: PoissonModel,
    pub re_features: ReFeatureSet,
    pub re_config: ReConfig,
    pub mentions: Option<MentionPatterns>,
    pub coherence: CoherenceTable,
    pub rules: Vec<RecoveryRule>,
}

#[derive(Deserialize)]
struct VersionProbe {
    #[serde(default)]
    version: u32,
}

impl ModelBundle {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::BundleCorrupt(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelBundle> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: VersionProbe = serde_json::from_str(&text)
            .map_err(|e| Error::BundleCorrupt(e.to_string()))?;
        if probe.version != BUNDLE_VERSION {
            return Err(Error::BundleVersionMismatch {
                found: probe.version,
                expected: BUNDLE_VERSION,
            });
        }
        serde_json::from_str(&text).map_err(|e| Error::BundleCorrupt(e.to_string()))
    }
}
