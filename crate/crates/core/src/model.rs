//! The full detector: backbone, encoder, decoder and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{PadMode, Tape};
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DetectionSet, DetectionVars, ForwardTrace};
use crate::encoder::{Backbone, Encoder, EncoderConfig, FeatureMap};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Rest,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Rest
        }
    }
}

pub struct Deco {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub struct ModelOutput {
    /// Backbone features `f`.
    pub features: FeatureMap,
    /// Encoder output `z_e`.
    pub encoded: FeatureMap,
    pub per_layer: Vec<DetectionVars>,
    pub trace: ForwardTrace,
}

impl ModelOutput {
    pub fn last(&self) -> DetectionVars {
        *self.per_layer.last().expect("at least one decoder layer")
    }
}

impl Deco {
    /// Build the model and a freshly initialized parameter store.
    pub fn new<T: Element>(config: &ModelConfig, seed: u64) -> Result<(Deco, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone_channels, &mut rng)?;
        let encoder = Encoder::new(&mut store, backbone.out_channels(), &EncoderConfig::from(config), &mut rng)?;
        let decoder = Decoder::new(&mut store, config, &mut rng)?;
        Ok((
            Deco {
                config: config.clone(),
                backbone,
                encoder,
                decoder,
            },
            store,
        ))
    }

    pub fn num_queries(&self) -> usize {
        self.config.num_queries
    }

    /// Record a forward pass of one normalized `[3, H0, W0]` image.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Tensor<T>) -> Result<ModelOutput> {
        let x = tape.constant(image);
        let features = self.backbone.forward(tape, store, x)?;
        let z0 = self.encoder.project(tape, store, features)?;
        let encoded = self.encoder.forward(tape, store, z0)?;
        let mut trace = ForwardTrace::default();
        let per_layer = self.decoder.forward(tape, store, encoded.var, &mut trace)?;
        Ok(ModelOutput {
            features,
            encoded,
            per_layer,
            trace,
        })
    }

    /// Final-layer predictions for one normalized image. There is no
    /// suppression step: the result always has exactly N rows.
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, image: Tensor<T>) -> Result<DetectionSet<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, image)?;
        let last = out.last();
        Ok(DetectionSet {
            logits: tape.tensor(last.logits),
            boxes: tape.tensor(last.boxes),
        })
    }

    pub fn set_pad_mode(&mut self, mode: PadMode) {
        self.encoder.set_pad_mode(mode);
        self.decoder.set_pad_mode(mode);
    }

    pub fn zero_residual_branches<T: Element>(&self, store: &mut ParamStore<T>) {
        self.encoder.zero_residual_branches(store);
        self.decoder.zero_residual_branches(store);
    }
}
