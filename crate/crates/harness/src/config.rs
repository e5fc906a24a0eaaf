//! Experiment configuration, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sesc::aware::WeightModel;
use sesc::baseline::BaselineConfig;
use sesc::channel::ChannelKind;
use sesc::tasks::TaskTrainConfig;
use sesc::CodecConfig;

use crate::HarnessError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub task: TaskTrainConfig,
    pub sweeps: SweepConfig,
    pub baseline: BaselineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub eval_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub mask_ratio: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// Masking ratio range drawn per batch; wide enough to cover every
    /// sent-feature count the sweeps visit.
    pub mask_ratio_low: f64,
    pub mask_ratio_high: f64,
    pub channel: ChannelKind,
    pub snr_db_low: f64,
    pub snr_db_high: f64,
    pub grad_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Channel seeds per grid point.
    pub replicates: usize,
    pub weight_model: WeightModel,
    pub snr_grid_db: Vec<f64>,
    pub mu_grid: Vec<f64>,
    /// Threshold set used for the SNR sweep; 0 is full transmission.
    pub snr_sweep_mu: Vec<f64>,
    pub l_sweep_snr_db: f64,
    pub l_sweep_channel: ChannelKind,
    pub mu_sweep_snr_db: f64,
    pub channel: ChannelKind,
    pub l_opt_eps: f64,
    /// Images from the evaluation split used by the L sweep.
    pub l_sweep_images: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 2024,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            task: TaskTrainConfig::default(),
            sweeps: SweepConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            train_count: 3000,
            val_count: 200,
            eval_count: 200,
        }
    }
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 100,
            mask_ratio: 0.75,
            grad_clip: 1.0,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            learning_rate: 5e-4,
            weight_decay: 0.05,
            warmup_steps: 50,
            mask_ratio_low: 0.0,
            mask_ratio_high: 0.9,
            channel: ChannelKind::RayleighSlow,
            snr_db_low: 0.0,
            snr_db_high: 20.0,
            grad_clip: 1.0,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            replicates: 3,
            weight_model: WeightModel::Task,
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            mu_grid: (0..10).map(|i| i as f64 / 10.0).collect(),
            snr_sweep_mu: vec![0.0, 0.3, 0.5],
            l_sweep_snr_db: 15.0,
            l_sweep_channel: ChannelKind::Awgn,
            mu_sweep_snr_db: 15.0,
            channel: ChannelKind::RayleighSlow,
            l_opt_eps: 0.01,
            l_sweep_images: 100,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.into()));
        self.codec.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if self.data.train_count == 0 || self.data.val_count == 0 || self.data.eval_count == 0 {
            return bad("dataset splits must be nonempty");
        }
        let s = &self.sweeps;
        if s.replicates == 0 || s.snr_grid_db.is_empty() || s.mu_grid.is_empty() || s.snr_sweep_mu.is_empty() {
            return bad("sweep grids must be nonempty");
        }
        if s.mu_grid.iter().chain(&s.snr_sweep_mu).any(|m| !(0.0..=1.0).contains(m)) {
            return bad("thresholds must lie in [0, 1]");
        }
        if s.snr_grid_db.iter().any(|x| x.is_nan()) {
            return bad("SNR grid contains NaN");
        }
        let f = &self.finetune;
        if !(0.0..1.0).contains(&f.mask_ratio_low) || f.mask_ratio_low > f.mask_ratio_high || f.mask_ratio_high >= 1.0 {
            return bad("fine-tuning mask ratio range must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_ratio) {
            return bad("pretraining mask ratio must lie in [0, 1)");
        }
        if f.snr_db_low > f.snr_db_high {
            return bad("empty fine-tuning SNR range");
        }
        if self.pretrain.batch_size == 0 || f.batch_size == 0 || self.task.batch_size == 0 {
            return bad("batch sizes must be positive");
        }
        Ok(())
    }
}
