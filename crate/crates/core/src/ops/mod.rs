//! Forward and backward kernels on plain tensors.
//!
//! These are the building blocks the [`crate::tape::Tape`] records; they are
//! also usable directly when no gradients are needed.

mod basic;
mod conv;
mod norm;
mod resize;

pub use basic::*;
pub use conv::*;
pub use norm::*;
pub use resize::*;

/// Runs `f` for every sample index and collects results in index order.
pub(crate) fn map_samples<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if n > 1 {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
