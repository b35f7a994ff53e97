//! Reconstruction configuration, loaded from TOML.
//!
//! Every section and key is optional in a file; missing keys take the
//! defaults listed in [`DEFAULT_CONFIG_TOML`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructionConfig {
    pub seed: u64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub densify: DensifyConfig,
    pub init: InitConfig,
    pub bubbles: BubbleConfig,
    pub refine: RefineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_app: f64,
    pub lambda_geo: f64,
    /// Outlier gate of the projection loss, meters.
    pub epsilon_proj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Iterations for the first frame.
    pub iterations_first: usize,
    /// Iterations for every later frame.
    pub iterations_per_frame: usize,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub gamma_init: f64,
    pub lr_position: f64,
    /// Position learning rate at the end of the first frame, as a fraction
    /// of `lr_position` (exponential decay).
    pub lr_position_final_ratio: f64,
    /// Constant position learning rate for later frames.
    pub lr_position_sequential: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_color: f64,
    pub lr_sdf: f64,
    pub lr_gamma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    pub enabled: bool,
    pub every: usize,
    pub until: usize,
    /// Mean position-gradient norm above which a surfel is cloned.
    pub grad_threshold: f64,
    /// Surfels with a larger scale component are split instead of cloned.
    pub split_scale: f64,
    pub min_opacity: f64,
    pub max_surfels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub surfel_count: usize,
    /// Candidate points drawn per kept surfel before giving up.
    pub candidate_factor: usize,
    pub scale: f64,
    pub jitter: f64,
    /// Optional carving volume `[xmin, ymin, zmin, xmax, ymax, zmax]`;
    /// derived from the cameras when absent.
    pub bounds: Option<[f64; 6]>,
    /// Keep only candidates near the hull boundary in at least one view.
    pub shell_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubbleConfig {
    /// Bind surfels to bubbles and advect them with bubble velocities.
    pub guidance: bool,
    pub min_area: usize,
    pub tau_y: f64,
    pub area_ratio: f64,
    pub nucleation_band: f64,
    pub max_jump: f64,
    pub initial_velocity_nucleation: [f64; 3],
    pub initial_velocity_bubble: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub novel_views: usize,
    pub increment_deg: f64,
    /// Orbit radius in meters; mean input-camera distance when absent.
    pub radius: Option<f64>,
    /// Orbit center; weighted surfel centroid when absent.
    pub center: Option<[f64; 3]>,
    pub strength_near: f64,
    pub strength_far: f64,
    pub weight_input: f64,
    pub weight_near: f64,
    pub weight_far: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            densify: DensifyConfig::default(),
            init: InitConfig::default(),
            bubbles: BubbleConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_app: 1.0, lambda_geo: 0.05, epsilon_proj: 0.1 }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            iterations_first: 2000,
            iterations_per_frame: 300,
            adam_eps: 1e-15,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            gamma_init: 50.0,
            lr_position: 1.6e-4,
            lr_position_final_ratio: 0.01,
            lr_position_sequential: 1.6e-4,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_color: 2.5e-3,
            lr_sdf: 0.05,
            lr_gamma: 1e-2,
            scale_min: 1e-6,
            scale_max: 0.2,
        }
    }
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            every: 200,
            until: 1200,
            grad_threshold: 2e-4,
            split_scale: 0.05,
            min_opacity: 0.005,
            max_surfels: 20000,
        }
    }
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { surfel_count: 2000, candidate_factor: 200, scale: 0.01, jitter: 0.002, bounds: None, shell_only: false }
    }
}

impl Default for BubbleConfig {
    fn default() -> Self {
        Self {
            guidance: true,
            min_area: 25,
            tau_y: 0.05,
            area_ratio: 3.0,
            nucleation_band: 0.05,
            max_jump: 0.2,
            initial_velocity_nucleation: [0.03, 0.03, 0.0],
            initial_velocity_bubble: [0.07, 0.3, 0.0],
        }
    }
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            novel_views: 11,
            increment_deg: 30.0,
            radius: None,
            center: None,
            strength_near: 0.2,
            strength_far: 0.35,
            weight_input: 1.0,
            weight_near: 0.5,
            weight_far: 0.25,
        }
    }
}

impl RefineConfig {
    /// Whether 1-based novel view `s` of `count` counts as close to the
    /// input cameras: the first and last three views of the orbit.
    pub fn is_near(&self, s: usize, count: usize) -> bool {
        s <= 3 || s + 2 >= count
    }

    pub fn strength(&self, s: usize, count: usize) -> f64 {
        if self.is_near(s, count) {
            self.strength_near
        } else {
            self.strength_far
        }
    }

    pub fn weight(&self, s: usize, count: usize) -> f64 {
        if self.is_near(s, count) {
            self.weight_near
        } else {
            self.weight_far
        }
    }
}

/// Annotated default configuration, as printed by the CLI.
pub const DEFAULT_CONFIG_TOML: &str = r#"# bubblesplat reconstruction configuration
# Units: meters, seconds, m/s. Every key is optional.

seed = 0

[loss]
lambda_app = 1.0        # appearance term weight (chosen default)
lambda_geo = 0.05       # geometry term weight (chosen default)
epsilon_proj = 0.1      # projection-loss outlier gate, m (reference setting)

[optim]
iterations_first = 2000
iterations_per_frame = 300
adam_eps = 1e-15        # reference setting
adam_beta1 = 0.9
adam_beta2 = 0.999
gamma_init = 50.0
lr_position = 1.6e-4
lr_position_final_ratio = 0.01
lr_position_sequential = 1.6e-4
lr_scale = 5e-3
lr_rotation = 1e-3
lr_color = 2.5e-3
lr_sdf = 0.05           # reference setting
lr_gamma = 1e-2
scale_min = 1e-6
scale_max = 0.2

[densify]               # first frame only
enabled = true
every = 200
until = 1200
grad_threshold = 2e-4
split_scale = 0.05
min_opacity = 0.005
max_surfels = 20000

[init]
surfel_count = 2000
candidate_factor = 200
scale = 0.01
jitter = 0.002
shell_only = false
# bounds = [xmin, ymin, zmin, xmax, ymax, zmax]

[bubbles]
guidance = true
min_area = 25           # pixels
tau_y = 0.05            # vertical association gate, fraction of image height
area_ratio = 3.0
nucleation_band = 0.05  # bottom fraction of rows marking the nucleation region
max_jump = 0.2          # frame-to-frame tracking gate, fraction of image height
initial_velocity_nucleation = [0.03, 0.03, 0.0]   # reference setting
initial_velocity_bubble = [0.07, 0.3, 0.0]        # reference setting

[refine]
novel_views = 11        # reference setting
increment_deg = 30.0    # reference setting
# radius = 2.5
# center = [0.0, 0.3, 0.0]
strength_near = 0.2     # views 1-3 and the last three (reference setting)
strength_far = 0.35     # remaining views (reference setting)
weight_input = 1.0      # reference setting
weight_near = 0.5       # reference setting
weight_far = 0.25       # reference setting
"#;

impl ReconstructionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let o = &self.optim;
        let scalars = [
            ("loss.lambda_app", self.loss.lambda_app),
            ("loss.lambda_geo", self.loss.lambda_geo),
            ("loss.epsilon_proj", self.loss.epsilon_proj),
            ("optim.adam_eps", o.adam_eps),
            ("optim.gamma_init", o.gamma_init),
            ("optim.lr_position", o.lr_position),
            ("optim.lr_position_final_ratio", o.lr_position_final_ratio),
            ("optim.lr_position_sequential", o.lr_position_sequential),
            ("optim.lr_scale", o.lr_scale),
            ("optim.lr_rotation", o.lr_rotation),
            ("optim.lr_color", o.lr_color),
            ("optim.lr_sdf", o.lr_sdf),
            ("optim.lr_gamma", o.lr_gamma),
            ("optim.scale_min", o.scale_min),
            ("optim.scale_max", o.scale_max),
            ("init.scale", self.init.scale),
            ("init.jitter", self.init.jitter),
        ];
        for (name, v) in scalars {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(o.gamma_init > 0.0) {
            return bad("optim.gamma_init must be positive".into());
        }
        if !(o.scale_min > 0.0 && o.scale_min < o.scale_max) {
            return bad("optim.scale_min must be positive and below scale_max".into());
        }
        if !(0.0..1.0).contains(&o.adam_beta1) || !(0.0..1.0).contains(&o.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        let r = &self.refine;
        for (name, v) in [
            ("refine.strength_near", r.strength_near),
            ("refine.strength_far", r.strength_far),
            ("refine.weight_input", r.weight_input),
            ("refine.weight_near", r.weight_near),
            ("refine.weight_far", r.weight_far),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if r.novel_views == 0 {
            return bad("refine.novel_views must be at least 1".into());
        }
        if let Some(rad) = r.radius {
            if !(rad > 0.0 && rad.is_finite()) {
                return bad("refine.radius must be positive".into());
            }
        }
        if self.init.surfel_count == 0 {
            return bad("init.surfel_count must be positive".into());
        }
        if self.densify.enabled && self.densify.every == 0 {
            return bad("densify.every must be positive".into());
        }
        if !(self.bubbles.area_ratio >= 1.0) {
            return bad("bubbles.area_ratio must be at least 1".into());
        }
        let all_finite = self
            .bubbles
            .initial_velocity_bubble
            .iter()
            .chain(&self.bubbles.initial_velocity_nucleation)
            .all(|v| v.is_finite());
        if !all_finite {
            return bad("initial velocities must be finite".into());
        }
        Ok(())
    }
}
