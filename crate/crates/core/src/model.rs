//! The full segmentation network: backbone, part grouping (hierarchical
//! mode only) and whole-level grouping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, DecoderFeatures};
use crate::config::{Grouping, ModelConfig};
use crate::data::RgbImage;
use crate::error::Result;
use crate::params::{ParamStore, Session};
use crate::part::{PartGrouper, PartOutput};
use crate::whole::{WholeGrouper, WholeOutput};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub part: Option<PartGrouper>,
    pub whole: WholeGrouper,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub feats: DecoderFeatures,
    pub part: Option<PartOutput>,
    pub whole: WholeOutput,
}

impl Model {
    /// Builds the network and its freshly initialized parameters from
    /// `cfg.seed`.
    pub fn new(cfg: &ModelConfig) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, cfg, &mut rng);
        let part = match cfg.grouping {
            Grouping::Hierarchical => Some(PartGrouper::new(&mut store, cfg, &mut rng)),
            Grouping::Flat => None,
        };
        let whole = WholeGrouper::new(&mut store, cfg, &mut rng);
        let model = Self {
            cfg: cfg.clone(),
            backbone,
            part,
            whole,
        };
        Ok((model, store))
    }

    pub fn forward(&self, s: &mut Session, image: &RgbImage) -> Result<ModelOutput> {
        let feats = self.backbone.forward(s, image)?;
        let (part, tokens) = match &self.part {
            Some(pg) => {
                let out = pg.run(s, feats.k, feats.v, feats.k_hw)?;
                let last = out
                    .iterations
                    .last()
                    .expect("at least one iteration")
                    .tokens;
                (Some(out), last)
            }
            None => (None, feats.k),
        };
        let whole = self.whole.run(s, tokens, feats.k0)?;
        Ok(ModelOutput { feats, part, whole })
    }
}
