//! Per-client non-contrastive networks: online encoder and predictor, EMA
//! target encoder, view augmentation, and manual backpropagation of the
//! combined local objective.

mod checkpoint;
mod loss;
mod mlp;
mod model;
mod train;

pub use checkpoint::{fingerprint, load_checkpoint, save_checkpoint, CheckpointManifest};
pub use loss::{augment, ssl_loss, ssl_loss_grad, AugmentConfig, ViewPair};
pub use mlp::{Activation, Dense, Mlp, MlpSpec, Tape};
pub use model::{ClientModel, OnlineParams, OnlineTape};
pub use train::{
    combined_step, objective, objective_grad, step_on_views, LossConfig, LossParts, OptimConfig, StepConfig,
    StepReport,
};

/// Convenience wrapper for [`ClientModel::init`].
pub fn init_client_model(
    spec: &MlpSpec,
    predictor_width: usize,
    tau: f64,
    rng: &mut crate::numkit::RngStream,
) -> crate::error::Result<ClientModel> {
    ClientModel::init(spec, predictor_width, tau, rng)
}

/// Convenience wrapper for [`ClientModel::ema_update`].
pub fn ema_update(model: ClientModel, tau: f64) -> crate::error::Result<ClientModel> {
    model.ema_update(tau)
}
