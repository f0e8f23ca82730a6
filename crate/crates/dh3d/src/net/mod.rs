//! Network layers and composite model: FlexConv, SE, 1x1 convolutions, the
//! two-resolution local encoder, the detector and attention heads, and the
//! NetVLAD global aggregator. Every forward pass returns a cache; every
//! layer provides an analytic backward pass producing gradients shaped like
//! its own parameters.

pub mod attention;
pub mod detector;
pub mod encoder;
pub mod flexconv;
pub mod layers;
pub mod netvlad;
pub mod params;
pub mod se;

pub use attention::Attention;
pub use detector::Detector;
pub use encoder::{Encoder, EncoderCache, EncoderSpec};
pub use flexconv::{dilated_neighborhoods, flexconv_brute_force, FlexConvLayer};
pub use layers::{Activation, Conv1x1};
pub use netvlad::{pool_aggregate, vlad_brute_force, GlobalCache, GlobalHead, GlobalSpec, PoolMode};
pub use params::ParamSet;
pub use se::SeBlock;

use crate::error::Result;
use crate::scalar::Real;
use ndarray::{ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

/// All trainable state: encoder, detector head, global head.
#[derive(Debug, Clone)]
pub struct ModelParams<S: Real> {
    pub encoder: Encoder<S>,
    pub detector: Detector<S>,
    pub global: GlobalHead<S>,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub detector_hidden: Vec<usize>,
    pub global: GlobalSpec,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let encoder = EncoderSpec::default();
        let d = encoder.flex2_width;
        Self {
            encoder,
            detector_hidden: vec![64, 32],
            global: GlobalSpec::default_for(d),
        }
    }
}

impl<S: Real> ModelParams<S> {
    pub fn init(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = Encoder::init(&spec.encoder, rng)?;
        let d = encoder.output_dim();
        let detector = Detector::init(d, &spec.detector_hidden, rng);
        let global = GlobalHead::init(d, &spec.global, rng);
        Ok(Self {
            encoder,
            detector,
            global,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            detector: self.detector.zeros_like(),
            global: self.global.zeros_like(),
        }
    }
}

impl<S: Real> ParamSet<S> for ModelParams<S> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewD<'_, S>)) {
        self.encoder.visit(&params::join(prefix, "encoder"), f);
        self.detector.visit(&params::join(prefix, "detector"), f);
        self.global.visit(&params::join(prefix, "global"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, S>)) {
        self.encoder.visit_mut(&params::join(prefix, "encoder"), f);
        self.detector.visit_mut(&params::join(prefix, "detector"), f);
        self.global.visit_mut(&params::join(prefix, "global"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    #[test]
    fn model_param_names_unique_and_stable() {
        let spec = ModelSpec {
            encoder: EncoderSpec {
                conv_width: 4,
                flex1_width: 4,
                flex2_width: 8,
                k: 3,
                se_reduction: 2,
                subsample_divisor: 4,
                subsample_seed: 17,
            },
            detector_hidden: vec![4],
            global: GlobalSpec {
                proj1_width: 8,
                proj2_width: 8,
                proj_k: 3,
                clusters: 4,
                output_dim: 8,
                attention_hidden: vec![4],
                subsample_to: None,
                subsample_seed: 23,
            },
        };
        let model: ModelParams<f64> =
            ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut names = Vec::new();
        model.visit("", &mut |name, _| names.push(name.to_string()));
        let set: BTreeSet<_> = names.iter().cloned().collect();
        assert_eq!(set.len(), names.len(), "duplicate parameter names");
        assert!(names.iter().any(|n| n.starts_with("encoder.")));
        assert!(names.iter().any(|n| n.starts_with("detector.")));
        assert!(names.iter().any(|n| n.starts_with("global.")));
        // visit and visit_mut expose the same names in the same order
        let mut model2 = model.clone();
        let mut names2 = Vec::new();
        model2.visit_mut("", &mut |name, _| names2.push(name.to_string()));
        assert_eq!(names, names2);
    }
}
