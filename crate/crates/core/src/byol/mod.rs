//! Self-supervised training of the peak-patch representation model: an
//! online encoder/projector/predictor regressing the projections of an
//! EMA target network on augmented views (the bootstrap-your-own-latent
//! scheme), plus encoder persistence and the confidence-summation metric
//! used to pick the epoch count.

pub mod augment;
pub mod model;
pub mod net;
pub mod train;

pub use augment::{augment, AugmentationConfig};
pub use model::EncoderModel;
pub use net::{ByolNets, Encoder, Mlp, EMBED_DIM, PROJ_DIM};
pub use train::{byol_pair_loss, confidence_sum, train_encoder, TrainingConfig, TrainingLog};
