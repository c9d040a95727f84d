//! Cross-attention prompt editing over a toy latent-diffusion stack.
//!
//! The engine edits generations by operating on text-embedding key/value
//! slots inside cross-attention: span replacement under an Otsu+box object
//! mask, padding-slot insertion for object addition, and key/value style
//! swapping, all gated to a strict time-step window.
//!
//! Everything is deterministic: a counter-based PRNG seeds latents,
//! embeddings, and projection weights, and all reductions have a fixed
//! order, so outputs are bitwise stable across runs, platforms, and thread
//! counts (the `parallel` feature only splits work across rows).

pub mod attention;
pub mod error;
pub mod maskgen;
pub mod pgm;
pub mod prompt;
pub mod rng;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};

/// Cap internal data parallelism at `n` threads (0 = auto). Without the
/// `parallel` feature this is a no-op. May only be called once per process.
#[cfg(feature = "parallel")]
pub fn set_max_threads(n: usize) -> std::result::Result<(), String> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn set_max_threads(_n: usize) -> std::result::Result<(), String> {
    Ok(())
}
