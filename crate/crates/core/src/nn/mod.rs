//! Hand-differentiated layers, the optimizer, checkpoints and a
//! finite-difference gradient checker. Everything computes in `f64`.

mod attention;
mod checkpoint;
pub mod gradcheck;
mod layer_norm;
mod linear;
mod mlp;
mod optim;
mod param;
mod softmax;

pub use attention::{AttentionCache, MultiHeadAttention};
pub use checkpoint::{Checkpoint, Tensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layer_norm::{LayerNorm, LayerNormCache, DEFAULT_LN_EPS};
pub use linear::{affine_backward, affine_forward, Linear};
pub use mlp::{gelu, gelu_grad, Mlp, MlpCache};
pub use optim::{clip_grad_norm, cosine_lr, Adam, LrSchedule};
pub use param::{join, Param, Params, INIT_STD};
pub use softmax::{softmax_backward, softmax_in_place, softmax_rows};
