//! Dense reverse-mode differentiation.
//!
//! [`Tape`] records matrix operations; [`Var`] is a handle into it. The
//! primitive set is the closure needed by the encoders and losses, plus
//! [`Var::stop_gradient_rows`] for per-entity freezing.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_check, finite_difference_check_sampled};
pub use tape::{hconcat, normalize_rows, Gradients, Tape, Var};

use ndarray::{Array2, ArrayView2};

use crate::error::{PmfError, Result};

/// Pairwise cosine similarities between the rows of `a` (n×d) and `b` (m×d).
///
/// Runs outside the tape. A zero-norm row has similarity 0 with everything.
pub fn cosine_similarity_matrix(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(PmfError::dim(
            "cosine_similarity_matrix",
            format!("feature dims {} and {}", a.ncols(), b.ncols()),
        ));
    }
    let an = normalize_rows(&a.to_owned());
    let bn = normalize_rows(&b.to_owned());
    Ok(an.dot(&bn.t()))
}
