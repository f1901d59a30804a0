//! Minimal deterministic layer kernel.
//!
//! Dense row-major tensors, linear / MLP / layer-norm / attention layers with
//! hand-chained backward passes, low-rank adapters, an adaptive-moment
//! optimizer, a finite-difference gradient checker and the checkpoint
//! format. Every layer exposes `forward` returning a cache and `backward`
//! consuming it; parameter gradients accumulate in place.

mod attention;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod lora;
mod optim;
mod param;
mod real;
pub mod rng;
mod tensor;

pub use attention::{AttentionCache, BlockCache, SelfAttention, TransformerBlock};
pub use gradcheck::{gradcheck, Differentiable, GradCheckConfig, GradEntry, GradReport};
pub use layers::{gelu, gelu_grad, linear_forward, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};
pub use lora::{lora_forward, matrix_rank, LoraAdapter};
pub use optim::{AdamConfig, OptimizerState};
pub use param::{scoped, HasParams, Parameter};
pub use real::Real;
pub use tensor::{matmul, matmul_nt, Tensor};

use sha2::{Digest, Sha256};

/// SHA-256 over the names and exact bits of the selected parameters.
pub fn param_digest<T: Real>(params: &[(String, &Parameter<T>)], select: impl Fn(&str, &Parameter<T>) -> bool) -> String {
    let mut h = Sha256::new();
    for (name, p) in params {
        if !select(name, p) {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0u8]);
        for &v in p.value.data() {
            h.update(v.as_f64().to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
