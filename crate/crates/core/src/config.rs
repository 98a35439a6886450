//! TOML run configuration. Unknown keys are errors.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/small"      # relative to the config file
//!
//! [data]
//! train_manifest = "phantoms/train/manifest.csv"
//! test_manifest = "phantoms/test/manifest.csv"
//! image_size = [128, 128]
//!
//! [synth]                         # used by `mammoclu synth`
//! train_studies = 200
//! test_studies = 50
//!
//! [backbone]
//! global_preset = "small"
//! local_preset = "small"
//!
//! [roi]
//! num_patches = 4
//!
//! [optim]
//! learning_rate = 1e-3
//! epochs = 30
//! batch_size = 8
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{ClusterConfig, Preset};
use crate::cluster::Neighborhood;
use crate::data::PhantomConfig;
use crate::error::{Error, Result};
use crate::fusion::{OverlayMode, ViewAttentionMode};
use crate::loss::LossWeights;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Only `"f64"` is supported.
    #[serde(default = "default_precision")]
    pub precision: String,
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub roi: RoiSection,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_precision() -> String {
    "f64".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub train_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    pub image_size: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_studies: usize,
    pub test_studies: usize,
    pub malignant_fraction: f64,
    pub lesion_intensity: f64,
    /// Defaults to `(side/20, side/10)` of the shorter image side.
    pub lesion_radius_range: Option<(usize, usize)>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            train_studies: 200,
            test_studies: 50,
            malignant_fraction: 0.5,
            lesion_intensity: 0.6,
            lesion_radius_range: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub global_preset: Preset,
    pub local_preset: Preset,
    /// Full stage layout; overrides `global_preset`.
    pub global: Option<ClusterConfig>,
    /// Full stage layout; overrides `local_preset`.
    pub local: Option<ClusterConfig>,
    /// Anchor neighbourhood size (4 or 8), applied to both backbones.
    pub neighbors_k: Option<Neighborhood>,
    /// Start residual projections and heads at zero (the default).
    pub zero_residual: bool,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            global_preset: Preset::Small,
            local_preset: Preset::Small,
            global: None,
            local: None,
            neighbors_k: None,
            zero_residual: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoiSection {
    pub num_patches: Option<usize>,
    /// Defaults to a quarter of each image side.
    pub patch_size: Option<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionSection {
    pub dim: Option<usize>,
    pub overlay: OverlayMode,
    pub view_attention: ViewAttentionMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop once the test split reaches both targets (when set).
    pub stop_at_auc: Option<f64>,
    pub stop_at_mdr: Option<f64>,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stop_at_auc: None,
            stop_at_mdr: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub threshold: f64,
    pub tau: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            threshold: 0.5,
            tau: crate::metrics::DEFAULT_TAU,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file; relative paths become relative to its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        cfg.data.train_manifest.as_mut().map(fix);
        cfg.data.test_manifest.as_mut().map(fix);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.precision != "f64" {
            return err(format!("precision {:?} is not supported (use \"f64\")", self.precision));
        }
        let o = &self.optim;
        if o.epochs == 0 || o.batch_size == 0 {
            return err("optim.epochs and optim.batch_size must be >= 1".into());
        }
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return err(format!("optim.learning_rate must be finite and >= 0, got {}", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return err("optim.beta1/beta2 must lie in [0, 1) and eps must be positive".into());
        }
        let (h, w) = self.data.image_size;
        if h == 0 || w == 0 {
            return err("data.image_size must be positive".into());
        }
        self.loss.validate()?;
        self.model_config().global.validate()?;
        self.model_config().local.validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let b = &self.backbone;
        let mut global = b.global.clone().unwrap_or_else(|| b.global_preset.config());
        let mut local = b.local.clone().unwrap_or_else(|| b.local_preset.config());
        if let Some(k) = b.neighbors_k {
            global.neighbors_k = k;
            local.neighbors_k = k;
        }
        let (h, w) = self.data.image_size;
        ModelConfig {
            global,
            local,
            image_size: (h, w),
            num_patches: self.roi.num_patches.unwrap_or(4),
            patch_size: self.roi.patch_size.unwrap_or(((h / 4).max(1), (w / 4).max(1))),
            dim: self.fusion.dim,
            overlay: self.fusion.overlay,
            view_attention: self.fusion.view_attention,
            zero_residual: b.zero_residual,
        }
    }

    /// Phantom settings for the training (`seed`) or test (`seed + 1`) split.
    pub fn phantom_config(&self, test: bool) -> PhantomConfig {
        let s = &self.synth;
        let (h, w) = self.data.image_size;
        let side = h.min(w);
        PhantomConfig {
            study_count: if test { s.test_studies } else { s.train_studies },
            image_size: (h, w),
            malignant_fraction: s.malignant_fraction,
            seed: self.seed + test as u64,
            lesion_intensity: s.lesion_intensity,
            lesion_radius_range: s
                .lesion_radius_range
                .unwrap_or(((side / 20).max(1), (side / 10).max(1))),
        }
    }
}
