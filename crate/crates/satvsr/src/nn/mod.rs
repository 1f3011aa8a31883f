//! Minimal neural-net toolkit: named f64 parameter tensors, convolution and
//! linear layers with hand-written backward passes, and the pointwise /
//! resampling ops the rest of the model is assembled from.
//!
//! Everything runs in double precision on the CPU. Layers recompute their
//! forward intermediates during the backward pass instead of caching them;
//! activations are cheap at the resolutions this model trains on and the
//! GEMM in each convolution dominates either way.

mod conv;
mod ops;
mod params;

pub use conv::{Conv2d, Linear};
pub use ops::{
    avg_pool2, avg_pool2_backward, bilinear_resize, bilinear_resize_backward, mirror_index,
    pixel_shuffle2, pixel_shuffle2_backward, relu, relu_backward, sigmoid, softmax,
    softmax_backward,
};
pub use params::{GradStore, Init, ParamId, ParamStore};
