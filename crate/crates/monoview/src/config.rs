//! TOML run configuration. Every section has defaults (desk scale); unknown
//! keys are rejected so typos cannot silently fall back to a default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use monoview_core::network::{BottleneckMode, NetworkConfig};
use monoview_core::phantom::PhantomSpec;
use monoview_core::projector::{Beam, DEFAULT_SAD, DEFAULT_SDD};
use monoview_core::training::TrainConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Where outputs go; not part of the resolved config or its hash.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
    pub phantom: PhantomSection,
    pub dataset: DatasetSection,
    pub geometry: GeometrySection,
    pub network: NetworkSection,
    pub train: TrainSection,
    pub noise: NoiseSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/desk"),
            phantom: PhantomSection::default(),
            dataset: DatasetSection::default(),
            geometry: GeometrySection::default(),
            network: NetworkSection::default(),
            train: TrainSection::default(),
            noise: NoiseSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub body_axes_mm: [f64; 2],
    pub lung_center_mm: [f64; 3],
    pub lung_axes_mm: [f64; 3],
    pub tumor_center_mm: [f64; 3],
    pub tumor_radius_mm: f64,
    pub vessel_count: usize,
    pub breathing_amplitude_mm: f64,
    pub compression: f64,
    pub hysteresis_mm: f64,
    pub lateral_mm: f64,
    pub seed: u64,
}

impl Default for PhantomSection {
    fn default() -> Self {
        let s = PhantomSpec::default();
        PhantomSection {
            dims: s.dims,
            spacing_mm: s.spacing,
            body_axes_mm: s.body_axes,
            lung_center_mm: s.lung_center,
            lung_axes_mm: s.lung_axes,
            tumor_center_mm: s.tumor_center,
            tumor_radius_mm: s.tumor_radius,
            vessel_count: s.vessel_count,
            breathing_amplitude_mm: s.breathing_amplitude,
            compression: s.compression,
            hysteresis_mm: s.hysteresis_amplitude,
            lateral_mm: s.lateral_amplitude,
            seed: s.seed,
        }
    }
}

impl PhantomSection {
    pub fn spec(&self) -> PhantomSpec {
        PhantomSpec {
            dims: self.dims,
            spacing: self.spacing_mm,
            body_axes: self.body_axes_mm,
            lung_center: self.lung_center_mm,
            lung_axes: self.lung_axes_mm,
            tumor_center: self.tumor_center_mm,
            tumor_radius: self.tumor_radius_mm,
            vessel_count: self.vessel_count,
            breathing_amplitude: self.breathing_amplitude_mm,
            compression: self.compression,
            hysteresis_amplitude: self.hysteresis_mm,
            lateral_amplitude: self.lateral_mm,
            seed: self.seed,
            ..PhantomSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub n_samples: usize,
    pub input_size: usize,
    pub output_size: usize,
    /// Rendering resolution of the DRR before it is resized to `input_size`.
    pub detector_pixels: usize,
    /// Isotropic spacing the phantom is resampled to before sampling.
    pub resample_spacing_mm: f64,
    pub pca_components: usize,
    pub extrapolation: f64,
    /// `random` or `fixed:<deg>`.
    pub angle: String,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            n_samples: 120,
            input_size: 32,
            output_size: 32,
            detector_pixels: 64,
            resample_spacing_mm: 1.0,
            pca_components: 3,
            extrapolation: monoview_core::motion::DEFAULT_EXTRAPOLATION,
            angle: "random".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySection {
    /// `parallel` or `cone`.
    pub beam: String,
    pub sad_mm: f64,
    pub sdd_mm: f64,
}

impl Default for GeometrySection {
    fn default() -> Self {
        GeometrySection {
            beam: "parallel".into(),
            sad_mm: DEFAULT_SAD,
            sdd_mm: DEFAULT_SDD,
        }
    }
}

impl GeometrySection {
    pub fn beam(&self) -> anyhow::Result<Beam> {
        match self.beam.as_str() {
            "parallel" => Ok(Beam::Parallel),
            "cone" => Ok(Beam::Cone {
                sad: self.sad_mm,
                sdd: self.sdd_mm,
            }),
            other => bail!("geometry.beam: expected `parallel` or `cone`, got `{other}`"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub levels: usize,
    pub base_channels: usize,
    pub enable_seg_branch: bool,
    pub enable_aec: bool,
    pub enable_ure: bool,
    pub attention_residual_init: f64,
    pub aec_norm: bool,
    /// `reshape` or `replicate`.
    pub bottleneck: String,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let n = NetworkConfig::desk();
        NetworkSection {
            levels: n.levels,
            base_channels: n.base_channels,
            enable_seg_branch: n.enable_seg_branch,
            enable_aec: n.enable_aec,
            enable_ure: n.enable_ure,
            attention_residual_init: n.attention_residual_init,
            aec_norm: n.aec_norm,
            bottleneck: "reshape".into(),
        }
    }
}

impl NetworkSection {
    pub fn from_config(n: &NetworkConfig) -> Self {
        NetworkSection {
            levels: n.levels,
            base_channels: n.base_channels,
            enable_seg_branch: n.enable_seg_branch,
            enable_aec: n.enable_aec,
            enable_ure: n.enable_ure,
            attention_residual_init: n.attention_residual_init,
            aec_norm: n.aec_norm,
            bottleneck: match n.bottleneck {
                BottleneckMode::Reshape => "reshape".into(),
                BottleneckMode::Replicate => "replicate".into(),
            },
        }
    }

    pub fn config(&self, input_size: usize) -> anyhow::Result<NetworkConfig> {
        let bottleneck = match self.bottleneck.as_str() {
            "reshape" => BottleneckMode::Reshape,
            "replicate" => BottleneckMode::Replicate,
            other => bail!("network.bottleneck: expected `reshape` or `replicate`, got `{other}`"),
        };
        let cfg = NetworkConfig {
            input_size,
            levels: self.levels,
            base_channels: self.base_channels,
            enable_seg_branch: self.enable_seg_branch,
            enable_aec: self.enable_aec,
            enable_ure: self.enable_ure,
            attention_residual_init: self.attention_residual_init,
            aec_norm: self.aec_norm,
            bottleneck,
        };
        cfg.validate().context("network")?;
        Ok(cfg)
    }
}

/// Stored inside checkpoints so a checkpoint fully describes its network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub input_size: usize,
    pub network: NetworkSection,
}

impl CheckpointHeader {
    pub fn from_config(cfg: &NetworkConfig) -> Self {
        CheckpointHeader {
            input_size: cfg.input_size,
            network: NetworkSection::from_config(cfg),
        }
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("checkpoint header serializes")
    }

    pub fn parse(text: &str) -> anyhow::Result<NetworkConfig> {
        let h: CheckpointHeader = toml::from_str(text).context("checkpoint header")?;
        h.network.config(h.input_size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub decay_start: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha_recon: f64,
    pub alpha_seg: f64,
    pub deep_supervision: bool,
    pub init_output_bias: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        TrainSection {
            epochs: t.epochs,
            lr: t.lr,
            decay_start: t.decay_start,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            alpha_recon: t.alpha_recon,
            alpha_seg: t.alpha_seg,
            deep_supervision: t.deep_supervision,
            init_output_bias: t.init_output_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas: Vec<f64>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        NoiseSection {
            sigmas: vec![0.0, 0.01, 0.02, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Samples whose central slices are dumped as PGM images.
    pub slice_dumps: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { slice_dumps: 3 }
    }
}

/// Angle drawn per sample, or pinned.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AngleMode {
    Random,
    Fixed(f64),
}

impl std::str::FromStr for AngleMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        if s == "random" {
            return Ok(AngleMode::Random);
        }
        let deg = s
            .strip_prefix("fixed:")
            .and_then(|d| d.parse::<f64>().ok())
            .filter(|d| d.is_finite());
        match deg {
            Some(d) => Ok(AngleMode::Fixed(d)),
            None => bail!("angle: expected `random` or `fixed:<deg>`, got `{s}`"),
        }
    }
}

impl std::fmt::Display for AngleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AngleMode::Random => write!(f, "random"),
            AngleMode::Fixed(d) => write!(f, "fixed:{d}"),
        }
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    /// Full-size protocol: 128² inputs, 128³ targets, 1080 samples, base 64.
    pub fn paper() -> Self {
        let mut c = Self::default();
        c.out_dir = PathBuf::from("runs/paper");
        c.phantom.dims = [128, 128, 128];
        c.dataset.n_samples = 1080;
        c.dataset.input_size = 128;
        c.dataset.output_size = 128;
        c.dataset.detector_pixels = 128;
        c.network.base_channels = 64;
        c.train.epochs = 100;
        c.train.decay_start = 50;
        c
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("config: {}", e.to_string().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| path.display().to_string())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.dataset;
        if d.n_samples < 3 {
            bail!("dataset.n_samples: need at least 3 samples, got {}", d.n_samples);
        }
        if d.input_size == 0 || d.output_size == 0 || d.detector_pixels == 0 {
            bail!("dataset: sizes must be positive");
        }
        if !(d.resample_spacing_mm > 0.0) {
            bail!("dataset.resample_spacing_mm must be positive");
        }
        if d.pca_components == 0 {
            bail!("dataset.pca_components must be positive");
        }
        if !(d.extrapolation > 0.0) {
            bail!("dataset.extrapolation must be positive");
        }
        self.angle_mode()?;
        self.geometry.beam()?;
        if self.phantom.dims.contains(&0) || self.phantom.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            bail!("phantom: dims and spacing_mm must be positive");
        }
        if self.noise.sigmas.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            bail!("noise.sigmas must be finite and non-negative");
        }
        self.train_config().context("train")?.validate().context("train")?;
        Ok(())
    }

    pub fn angle_mode(&self) -> anyhow::Result<AngleMode> {
        self.dataset.angle.parse().context("dataset.angle")
    }

    pub fn network_config(&self) -> anyhow::Result<NetworkConfig> {
        if self.dataset.output_size != self.dataset.input_size {
            bail!(
                "dataset: the network reconstructs input_size³ volumes, so output_size {} must equal input_size {}",
                self.dataset.output_size,
                self.dataset.input_size
            );
        }
        self.network.config(self.dataset.input_size)
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            epochs: t.epochs,
            lr: t.lr,
            decay_start: t.decay_start,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            alpha_recon: t.alpha_recon,
            alpha_seg: t.alpha_seg,
            deep_supervision: t.deep_supervision,
            init_output_bias: t.init_output_bias,
            seed: self.seed,
        })
    }

    /// All defaults expanded.
    pub fn resolved_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.resolved_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.resolved_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
