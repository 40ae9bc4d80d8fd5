//! A small convolutional classifier with interchangeable linear heads,
//! reverse-mode gradients and SGD.

mod checkpoint;
mod loss;
mod model;
mod optim;
mod scalar;
mod spec;

use thiserror::Error;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use loss::{
    ewc_penalty, extract_features, forward, kl_divergence, loss_and_backward,
    nearest_mean_classify, softmax_t, BatchOutput, EwcAnchor, LossTerm,
};
pub use model::InputBatch;
pub use optim::{sgd_step, OptimizerState, SgdConfig};
pub use scalar::Scalar;
pub use spec::{init_model, ConvBlock, HeadSpec, LayerDesc, Layout, ModelSpec, ParamVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid loss term: {0}")]
    InvalidTerm(String),
    #[error("no loss terms given")]
    EmptyLossTerms,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("parameter update produced non-finite values")]
    NonFiniteUpdate,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Converts stored parameters to the computation type.
pub fn cast_params<S: Scalar>(values: &[f32]) -> Vec<S> {
    values.iter().map(|&v| S::from_f32(v)).collect()
}

/// Images per forward pass during inference.
pub const EVAL_CHUNK: usize = 256;

/// Architecture plus trained parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamVector,
}

impl Model {
    pub fn init(spec: ModelSpec) -> Result<Self, NnError> {
        let params = init_model(&spec)?;
        Ok(Model { spec, params })
    }

    /// Feature rows (`n × d`, row-major) of the images, evaluated in chunks.
    pub fn features(&self, images: &[&crate::data::RgbImage]) -> Result<Vec<f32>, NnError> {
        use rayon::prelude::*;
        let parts: Vec<Vec<f32>> = images
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let batch = InputBatch::<f32>::from_images(chunk.iter().copied())?;
                extract_features(&self.params.values, &self.spec, &batch)
            })
            .collect::<Result<_, _>>()?;
        Ok(parts.concat())
    }

    /// Logits of each image on the head given for it.
    pub fn logits(
        &self,
        images: &[&crate::data::RgbImage],
        heads: &[usize],
    ) -> Result<Vec<Vec<f64>>, NnError> {
        use rayon::prelude::*;
        if images.len() != heads.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} head ids for {} images",
                heads.len(),
                images.len()
            )));
        }
        let parts: Vec<Vec<Vec<f64>>> = images
            .par_chunks(EVAL_CHUNK)
            .zip(heads.par_chunks(EVAL_CHUNK))
            .map(|(chunk, h)| {
                let batch = InputBatch::<f32>::from_images(chunk.iter().copied())?;
                Ok(forward(&self.params.values, &self.spec, &batch, h)?.logits)
            })
            .collect::<Result<_, NnError>>()?;
        Ok(parts.concat())
    }
}

/// Scales `v` to unit Euclidean length (left unchanged when zero).
pub fn l2_normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v {
            *x = (f64::from(*x) / n) as f32;
        }
    }
}
