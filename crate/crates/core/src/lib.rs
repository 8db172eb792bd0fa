//! Pose-modulated sine radiance fields for articulated bodies.

pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod metrics;
pub mod model;
mod nn;
pub mod pose_encoder;
pub mod renderer;
pub mod skeleton;
pub mod synthetic;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod window;

pub use error::{Error, Result};

/// Keeps freed graph buffers in the heap instead of returning them to the
/// kernel, which otherwise dominates the cost of large batches.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        const LIMIT: libc::c_int = 1 << 30;
        libc::mallopt(libc::M_MMAP_THRESHOLD, LIMIT);
        libc::mallopt(libc::M_TRIM_THRESHOLD, LIMIT);
        libc::mallopt(libc::M_TOP_PAD, 1 << 28);
    }
}
