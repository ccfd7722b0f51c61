//! The full model: auto-encoder plus paragraph generator.

use crate::cae::CaeParams;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorParams;
use crate::rng::RngStream;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct CaeLstm {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub cae: CaeParams,
    pub gen: GeneratorParams,
}

impl CaeLstm {
    /// Fresh parameters drawn from a stream seeded with `config.seed`.
    pub fn init(config: &TrainConfig, vocab_size: usize) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if vocab_size < crate::generator::vocab::SPECIALS.len() {
            return Err(Error::Config(format!("vocabulary of size {vocab_size} is too small")));
        }
        let mut rng = RngStream::new(config.seed);
        let mut store = ParamStore::new();
        let cae = CaeParams::new(&mut store, config, &mut rng)?;
        let gen = GeneratorParams::new(&mut store, config, vocab_size, &mut rng)?;
        Ok((
            Self {
                config: config.clone(),
                vocab_size,
                cae,
                gen,
            },
            store,
        ))
    }

    /// Re-derives parameter handles for a loaded store, checking that every
    /// name and shape matches the layout implied by `config`.
    pub fn bind(config: &TrainConfig, vocab_size: usize, store: &ParamStore) -> Result<Self> {
        let (model, layout) = Self::init(config, vocab_size)?;
        if layout.len() != store.len() {
            return Err(Error::Data(format!(
                "parameter count {} does not match the configured model ({})",
                store.len(),
                layout.len()
            )));
        }
        for ((_, want), (_, got)) in layout.iter().zip(store.iter()) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Data(format!(
                    "parameter {:?} {:?} does not match expected {:?} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(model)
    }
}
