//! Encoder with a linear CTC output head.

use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_forward, Captures, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{Graph, LinearParams, ParamBuilder, ParamStore};
use crate::tensor::{Array, Real, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Number of non-blank tokens; the head emits `vocab_size + 1` classes.
    pub vocab_size: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        self.encoder.validate()
    }

    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }
}

/// Parameter layout of a full model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayout {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub head: LinearParams,
    pub builder: ParamBuilder,
}

impl ModelLayout {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new();
        let encoder = EncoderParams::new(&mut b, &config.encoder)?;
        let head = LinearParams::new(&mut b, "ctc_head", config.encoder.d_model, config.classes());
        Ok(ModelLayout {
            config: config.clone(),
            encoder,
            head,
            builder: b,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    pub layout: ModelLayout,
    pub store: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Fresh model initialized from `config.encoder.seed`.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let layout = ModelLayout::new(config)?;
        let store = layout.builder.init(config.encoder.seed);
        Ok(Model { layout, store })
    }

    /// Pairs a layout with stored values; names and shapes must match.
    pub fn from_store(config: &ModelConfig, store: ParamStore<F>) -> Result<Self> {
        let layout = ModelLayout::new(config)?;
        let expected = layout.builder.specs();
        if expected.len() != store.len() {
            return Err(Error::Format(format!(
                "model expects {} tensors, store has {}",
                expected.len(),
                store.len()
            )));
        }
        for (want, got) in expected.iter().zip(store.specs()) {
            if want.name != got.name || want.shape != got.shape {
                return Err(Error::Format(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    want.name, want.shape, got.name, got.shape
                )));
            }
        }
        // adopt the layout's init tags so loaded and fresh stores compare equal
        let arrays = store.iter().map(|(_, _, a)| a.clone()).collect();
        let store = ParamStore::from_parts(expected.to_vec(), arrays)?;
        Ok(Model { layout, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.layout.config
    }

    /// `[L, feat_dim]` features to `[T, V+1]` logits.
    pub fn forward<'t>(
        &self,
        g: &mut Graph<'t, F>,
        features: &Var<'t, F>,
        capture: bool,
    ) -> Result<(Var<'t, F>, Captures)> {
        let (h, caps) = encoder_forward(g, features, &self.layout.encoder, capture)?;
        Ok((self.layout.head.forward(g, &h)?, caps))
    }

    /// Evaluation-mode forward on a private tape.
    pub fn infer(&self, features: &Array<F>, capture: bool) -> Result<(Array<F>, Captures)> {
        let tape = Tape::new();
        let mut g = Graph::new(&tape, &self.store, false, 0);
        let x = g.input(features.clone());
        let (logits, caps) = self.forward(&mut g, &x, capture)?;
        Ok((logits.value(), caps))
    }
}
