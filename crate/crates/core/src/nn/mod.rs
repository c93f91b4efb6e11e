pub mod checkpoint;
pub mod model;
pub mod tape;

pub use checkpoint::{ensure_arch, load_checkpoint, save_checkpoint};
pub use model::{
    encode_observation, encode_observation_cached, gmm_forward, gmm_log_likelihood, head_forward,
    init_params, loss_and_grad, optimizer_step, scene_tokens, ArchConfig, EncoderOutput, GmmOutput,
    HeadKind, PolicyParams, TrainSample,
};
pub use tape::{Gradients, Tape, Tensor, Var};
