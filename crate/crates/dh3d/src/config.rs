//! TOML pipeline configuration. Every section validates on load and
//! unknown keys are rejected so typos cannot silently fall back to
//! defaults.

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::net::{EncoderSpec, GlobalSpec, ModelSpec};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub architecture: ArchitectureConfig,
    pub loss: LossSection,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub conv_width: usize,
    pub flex1_width: usize,
    pub flex2_width: usize,
    pub k: usize,
    pub se_reduction: usize,
    pub subsample_divisor: usize,
    pub detector_hidden: Vec<usize>,
    pub proj1_width: usize,
    pub proj2_width: usize,
    pub proj_k: usize,
    pub clusters: usize,
    pub output_dim: usize,
    pub attention_hidden: Vec<usize>,
    pub global_subsample_to: Option<usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let enc = EncoderSpec::default();
        let glob = GlobalSpec::default_for(enc.flex2_width);
        Self {
            conv_width: enc.conv_width,
            flex1_width: enc.flex1_width,
            flex2_width: enc.flex2_width,
            k: enc.k,
            se_reduction: enc.se_reduction,
            subsample_divisor: enc.subsample_divisor,
            detector_hidden: vec![64, 32],
            proj1_width: glob.proj1_width,
            proj2_width: glob.proj2_width,
            proj_k: glob.proj_k,
            clusters: glob.clusters,
            output_dim: glob.output_dim,
            attention_hidden: glob.attention_hidden,
            global_subsample_to: glob.subsample_to,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub mu: f64,
    pub eta_bal: f64,
    pub kappa: f64,
    pub asr_k: usize,
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let cfg = LossConfig::<f64>::default();
        Self {
            mu: cfg.mu,
            eta_bal: cfg.eta_bal,
            kappa: cfg.kappa,
            asr_k: cfg.asr_k,
            lambda: cfg.lambda,
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub local_steps: usize,
    pub global_steps: usize,
    pub pairs_per_batch: usize,
    pub anchors_per_pair: usize,
    pub max_yaw_deg: f64,
    pub sigma_noise: f64,
    pub tau: f64,
    /// steps per schedule epoch (the synthetic datasets have no natural
    /// epoch boundary)
    pub steps_per_epoch: usize,
    pub global_decay: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            local_steps: 500,
            global_steps: 300,
            pairs_per_batch: 6,
            anchors_per_pair: 512,
            max_yaw_deg: 90.0,
            sigma_noise: crate::cloud::DEFAULT_SIGMA_NOISE,
            tau: crate::cloud::DEFAULT_TAU,
            steps_per_epoch: 100,
            global_decay: 0.5,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub inlier_thresh: f64,
    pub ransac_max_iter: usize,
    pub ransac_seed: u64,
    pub keypoints: usize,
    pub nms_radius: f64,
    pub repeat_radius: f64,
    pub positive_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            inlier_thresh: crate::registration::DEFAULT_INLIER_THRESH,
            ransac_max_iter: crate::registration::DEFAULT_MAX_ITER,
            ransac_seed: 7,
            keypoints: 256,
            nms_radius: 0.0,
            repeat_radius: crate::detect_eval::DEFAULT_KEYPOINT_RADIUS,
            positive_radius: crate::retrieval::DEFAULT_POSITIVE_RADIUS,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.architecture;
        for (name, v) in [
            ("conv_width", a.conv_width),
            ("flex1_width", a.flex1_width),
            ("flex2_width", a.flex2_width),
            ("k", a.k),
            ("se_reduction", a.se_reduction),
            ("subsample_divisor", a.subsample_divisor),
            ("proj1_width", a.proj1_width),
            ("proj2_width", a.proj2_width),
            ("proj_k", a.proj_k),
            ("clusters", a.clusters),
            ("output_dim", a.output_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("architecture.{name} must be positive")));
            }
        }
        self.loss_config::<f64>().validate()?;
        let t = &self.training;
        if t.pairs_per_batch == 0 || t.anchors_per_pair == 0 || t.steps_per_epoch == 0 {
            return Err(Error::Config(
                "training batch sizes and steps_per_epoch must be positive".to_string(),
            ));
        }
        if t.sigma_noise < 0.0 || t.tau <= 0.0 || !(0.0..=1.0).contains(&t.global_decay) {
            return Err(Error::Config(
                "training noise/tau/decay out of range".to_string(),
            ));
        }
        let e = &self.eval;
        if e.inlier_thresh <= 0.0 || e.ransac_max_iter == 0 || e.keypoints == 0 {
            return Err(Error::Config("eval thresholds must be positive".to_string()));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let a = &self.architecture;
        ModelSpec {
            encoder: EncoderSpec {
                conv_width: a.conv_width,
                flex1_width: a.flex1_width,
                flex2_width: a.flex2_width,
                k: a.k,
                se_reduction: a.se_reduction,
                subsample_divisor: a.subsample_divisor,
                subsample_seed: EncoderSpec::default().subsample_seed,
            },
            detector_hidden: a.detector_hidden.clone(),
            global: GlobalSpec {
                proj1_width: a.proj1_width,
                proj2_width: a.proj2_width,
                proj_k: a.proj_k,
                clusters: a.clusters,
                output_dim: a.output_dim,
                attention_hidden: a.attention_hidden.clone(),
                subsample_to: a.global_subsample_to,
                subsample_seed: GlobalSpec::default_for(a.flex2_width).subsample_seed,
            },
        }
    }

    pub fn loss_config<S: Real>(&self) -> LossConfig<S> {
        let l = &self.loss;
        LossConfig {
            mu: S::from_f64_lossy(l.mu),
            eta_bal: S::from_f64_lossy(l.eta_bal),
            kappa: S::from_f64_lossy(l.kappa),
            asr_k: l.asr_k,
            lambda: S::from_f64_lossy(l.lambda),
            alpha: S::from_f64_lossy(l.alpha),
            beta: S::from_f64_lossy(l.beta),
            gamma: S::from_f64_lossy(l.gamma),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn empty_config_uses_paper_defaults() {
        let cfg: PipelineConfig = toml::from_str("").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.loss.mu, 0.5);
        assert_eq!(cfg.loss.kappa, 0.6);
        assert_eq!(cfg.loss.asr_k, 5);
        assert_eq!(cfg.architecture.clusters, 64);
        assert_eq!(cfg.architecture.output_dim, 256);
        assert_eq!(cfg.training.pairs_per_batch, 6);
        assert_eq!(cfg.training.anchors_per_pair, 512);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<PipelineConfig>("[loss]\nmu = 0.5\nmargin = 0.1\n");
        assert!(err.is_err());
        let err = toml::from_str::<PipelineConfig>("[extra]\nx = 1\n");
        assert!(err.is_err());
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg: PipelineConfig =
            toml::from_str("[architecture]\nclusters = 8\n[loss]\nmu = 0.3\n").unwrap();
        assert_eq!(cfg.architecture.clusters, 8);
        assert_eq!(cfg.architecture.output_dim, 256);
        assert_eq!(cfg.loss.mu, 0.3);
        assert_eq!(cfg.loss.kappa, 0.6);
    }

    #[test]
    fn invalid_values_fail_validation() {
        let cfg: PipelineConfig = toml::from_str("[loss]\nmu = -1.0\n").unwrap();
        assert!(cfg.validate().is_err());
        let cfg: PipelineConfig = toml::from_str("[architecture]\nclusters = 0\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn load_reports_config_errors_with_path() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[loss]\nmu = \"half\"\n").unwrap();
        match PipelineConfig::load(&path).unwrap_err() {
            Error::Config(msg) => assert!(msg.contains("cfg.toml")),
            other => panic!("expected config error, got {other}"),
        }
    }
}
