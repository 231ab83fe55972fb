//! Versioned JSON experiment configuration. Unknown keys are rejected so
//! typos fail at load time, and the network's shape chain is validated by
//! actually building it before any training starts.

use cobbkit_core::dataset::InputKind;
use cobbkit_core::imaging::AugmentParams;
use cobbkit_core::neural::{
    default_regression_network, AdamHyper, FeatureShape, LayerSpec, Network, NeuralError,
    OptimState, OptimizerKind, Schedule,
};
use cobbkit_core::tensor::Shape2D;
use serde::Deserialize;
use std::path::PathBuf;

pub const CONFIG_VERSION: u32 = 1;

fn default_lr() -> f64 {
    3e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_epochs() -> usize {
    90
}
fn default_batch() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_rescale() -> [f64; 2] {
    [0.85, 1.25]
}
fn default_rotation() -> [f64; 2] {
    [-45.0, 45.0]
}
fn default_input_height() -> usize {
    512
}
fn default_input_width() -> usize {
    256
}
fn default_schedule() -> ScheduleCfg {
    ScheduleCfg::Cosine
}
fn default_optimizer() -> OptimizerCfg {
    OptimizerCfg {
        kind: OptimizerName::Adam,
        lr: default_lr(),
        beta1: default_beta1(),
        beta2: default_beta2(),
        weight_decay: default_weight_decay(),
    }
}
fn default_augment() -> AugmentCfg {
    AugmentCfg {
        enabled: true,
        rescale: default_rescale(),
        rotation: default_rotation(),
        noise_sigma: 0.0,
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerCfg {
    pub kind: OptimizerName,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleCfg {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentCfg {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_rescale")]
    pub rescale: [f64; 2],
    #[serde(default = "default_rotation")]
    pub rotation: [f64; 2],
    #[serde(default)]
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputCfg {
    pub kind: InputKind,
    /// Input geometry; defaults to the 512x256 regression size.
    #[serde(default = "default_input_height")]
    pub height: usize,
    #[serde(default = "default_input_width")]
    pub width: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data_dir: PathBuf,
    /// Records beyond the first `train_count` (after the seeded shuffle)
    /// form the validation set; omitted means train on everything.
    #[serde(default)]
    pub train_count: Option<usize>,
    pub input: InputCfg,
    /// Layer stack; omitted selects the default small regression network
    /// (three conv blocks plus two fully connected layers).
    #[serde(default)]
    pub network: Option<Vec<LayerSpec>>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerCfg,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleCfg,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_augment")]
    pub augment: AugmentCfg,
    /// Domain-adaptation loss weight; 0 disables the domain head.
    #[serde(default)]
    pub lambda: f64,
    /// Second, unlabeled image pool for domain adaptation.
    #[serde(default)]
    pub unlabeled_dir: Option<PathBuf>,
    pub seed: u64,
    pub checkpoint_out: PathBuf,
    pub log_out: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| format!("config parse error: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.version != CONFIG_VERSION {
            return Err(format!(
                "config version {} unsupported, expected {CONFIG_VERSION}",
                self.version
            ));
        }
        if self.epochs < 1 {
            return Err("epochs must be >= 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.lambda > 0.0 && self.unlabeled_dir.is_none() {
            return Err("lambda > 0 needs an unlabeled_dir for the domain pool".into());
        }
        if self.lambda > 0.0 && !matches!(self.input.kind, InputKind::Img) {
            return Err(
                "domain adaptation needs input kind \"img\": the unlabeled pool has no landmarks"
                    .into(),
            );
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err("learning rate must be positive".into());
        }
        self.augment_params()
            .validate()
            .map_err(|e| e.to_string())?;
        // Shape-chain validation: building the network surfaces any layer
        // geometry problem with its index.
        self.build_network().map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn size(&self) -> Shape2D {
        Shape2D::new(self.input.height, self.input.width)
    }

    pub fn network_specs(&self) -> Vec<LayerSpec> {
        self.network
            .clone()
            .unwrap_or_else(default_regression_network)
    }

    pub fn build_network(&self) -> Result<Network, NeuralError> {
        let input = FeatureShape::Spatial {
            channels: self.input.kind.channels(),
            height: self.input.height,
            width: self.input.width,
        };
        let mut net = Network::build(&self.network_specs(), input, self.seed)?;
        if self.lambda > 0.0 {
            net = net.with_domain_head(self.seed)?;
        }
        Ok(net)
    }

    pub fn optim_state(&self, net: &Network) -> OptimState {
        let kind = match self.optimizer.kind {
            OptimizerName::Adam => OptimizerKind::Adam(AdamHyper {
                lr: self.optimizer.lr,
                beta1: self.optimizer.beta1,
                beta2: self.optimizer.beta2,
                eps: 1e-8,
                weight_decay: self.optimizer.weight_decay,
            }),
            OptimizerName::Sgd => OptimizerKind::Sgd {
                lr: self.optimizer.lr,
            },
        };
        let schedule = match self.schedule {
            ScheduleCfg::Cosine => Schedule::Cosine {
                total_epochs: self.epochs,
            },
            ScheduleCfg::Constant => Schedule::Constant,
        };
        OptimState::new(kind, schedule, &net.param_shapes())
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            rescale: (self.augment.rescale[0], self.augment.rescale[1]),
            rotation_deg: (self.augment.rotation[0], self.augment.rotation[1]),
            noise_sigma: self.augment.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn train_augment(&self) -> Option<AugmentParams> {
        self.augment.enabled.then(|| self.augment_params())
    }
}
