//! Full network assembly and its configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::cofm::{Cofm, CofmConfig, FusionOutput};
use crate::data_model::Dims;
use crate::decouple::{orthogonalize, Decoupled, OrthGradient};
use crate::error::{MednError, Result};
use crate::motion_branch::{BackboneFactory, MotionBranch, MotionConfig};
use crate::nn::{Init, Linear};
use crate::params::{Bound, ParamGroup, ParamStore};
use crate::sevit::{Sevit, SevitConfig};
use crate::training::{LossWeights, OptimSchedule};

/// Component switches used by the ablations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    /// When off, the classifier reads the motion feature directly.
    pub emotion_branch: bool,
    /// When off, the orthogonal features are averaged with fixed 0.5 weights.
    pub cofm: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            emotion_branch: true,
            cofm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub motion: MotionConfig,
    pub sevit: SevitConfig,
    pub cofm: CofmConfig,
    pub components: Components,
    pub orth_gradient: OrthGradient,
    pub loss: LossWeights,
    pub optim: OptimSchedule,
    /// Runs batched attention products on the rayon pool.
    pub fast: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            motion: MotionConfig::default(),
            sevit: SevitConfig::default(),
            cofm: CofmConfig::default(),
            components: Components::default(),
            orth_gradient: OrthGradient::Both,
            loss: LossWeights::default(),
            optim: OptimSchedule::default(),
            fast: false,
        }
    }
}

impl ModelConfig {
    /// Reduced widths and schedule sized for 16 x 16 synthetic flow on a
    /// single CPU: 4-pixel patches, one transformer layer per rate, rates
    /// `[1, 2, 4]`, batch 8 and 15 epochs.
    pub fn compact() -> Self {
        let mut cfg = Self {
            feature_dim: 32,
            ..Self::default()
        };
        cfg.motion.channels = vec![8, 16, 32];
        cfg.motion.patch = 4;
        cfg.motion.embed_dim = 32;
        cfg.sevit.patch = 4;
        cfg.sevit.embed_dim = 32;
        cfg.sevit.depth = 1;
        cfg.sevit.heads = 2;
        cfg.sevit.mlp_ratio = 2;
        cfg.sevit.rates = vec![1, 2, 4];
        cfg.cofm.heads = 2;
        cfg.optim.lr = 3e-3;
        cfg.optim.batch_size = 8;
        cfg.optim.epochs = 15;
        cfg
    }

    pub fn validate(&self, dims: &Dims) -> Result<()> {
        if self.feature_dim < 2 {
            return Err(MednError::InvalidConfig(
                "feature_dim must be at least 2".into(),
            ));
        }
        if self.components.emotion_branch {
            self.sevit.validate(dims)?;
        }
        self.loss.validate()?;
        self.optim.validate()
    }
}

pub struct ForwardOutput<'g> {
    pub motion: Var<'g>,
    pub au_logits: Var<'g>,
    pub emotion: Option<Var<'g>>,
    pub rate_features: Vec<Var<'g>>,
    pub decoupled: Option<Decoupled<'g>>,
    pub fusion: Option<FusionOutput<'g>>,
    /// Feature the classifier reads.
    pub head_input: Var<'g>,
    pub logits: Var<'g>,
}

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub dims: Dims,
    pub num_classes: usize,
    pub num_aus: usize,
    pub motion: MotionBranch,
    pub sevit: Option<Sevit>,
    pub cofm: Option<Cofm>,
    pub classifier: Linear,
}

impl Model {
    /// Builds the network and its freshly initialized parameters. Motion
    /// parameters go to the motion learning-rate group.
    pub fn build(
        config: &ModelConfig,
        dims: &Dims,
        num_classes: usize,
        num_aus: usize,
        seed: u64,
        external: Option<&BackboneFactory>,
    ) -> Result<(Model, ParamStore)> {
        config.validate(dims)?;
        let d = config.feature_dim;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motion = {
            let mut init = Init::new(&mut store, &mut rng, ParamGroup::Motion);
            init.scoped("motion", |i| {
                MotionBranch::new(i, &config.motion, dims, d, num_aus, external)
            })?
        };
        let mut init = Init::new(&mut store, &mut rng, ParamGroup::Rest);
        let sevit = if config.components.emotion_branch {
            Some(init.scoped("sevit", |i| Sevit::new(i, &config.sevit, dims, d))?)
        } else {
            None
        };
        let cofm = if config.components.emotion_branch && config.components.cofm {
            Some(init.scoped("cofm", |i| Cofm::new(i, &config.cofm, d))?)
        } else {
            None
        };
        let classifier = Linear::new(&mut init, "classifier", d, num_classes, true);
        Ok((
            Model {
                config: config.clone(),
                dims: *dims,
                num_classes,
                num_aus,
                motion,
                sevit,
                cofm,
                classifier,
            },
            store,
        ))
    }

    /// `flow` is the standardized `[B, T-1, 2, H, W]` batch.
    pub fn forward<'g>(&self, p: &Bound<'g>, flow: Var<'g>) -> ForwardOutput<'g> {
        let (motion, au_logits) = self.motion.forward(p, flow);
        let Some(sevit) = &self.sevit else {
            let logits = self.classifier.forward(p, motion);
            return ForwardOutput {
                motion,
                au_logits,
                emotion: None,
                rate_features: Vec::new(),
                decoupled: None,
                fusion: None,
                head_input: motion,
                logits,
            };
        };
        let (emotion, rate_features) = sevit.forward(p, flow);
        let dec = orthogonalize(motion, emotion);
        let (fusion, head_input) = match &self.cofm {
            Some(cofm) => {
                let out = cofm.forward(p, dec.motion_perp, dec.emotion_perp);
                (Some(out), out.fusion)
            }
            None => (None, dec.motion_perp.add(dec.emotion_perp).scale(0.5)),
        };
        let logits = self.classifier.forward(p, head_input);
        ForwardOutput {
            motion,
            au_logits,
            emotion: Some(emotion),
            rate_features,
            decoupled: Some(dec),
            fusion,
            head_input,
            logits,
        }
    }
}
