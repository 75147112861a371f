//! Small dense linear-algebra helpers shared by the GP code.

use nalgebra::{Cholesky, DMatrix, Dyn};

use crate::error::{Error, Result};

/// Relative jitter schedule: starts at 1e-8 and escalates by 10x up to 1e-2.
pub const JITTER_START: f64 = 1e-8;
pub const JITTER_MAX: f64 = 1e-2;

/// Cholesky factorization with diagonal jitter `scale * j` for `j` in the
/// escalation schedule. Returns the factor and the absolute jitter used.
pub fn jittered_cholesky(m: &DMatrix<f64>, scale: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut a = m.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(a) {
            return Ok((ch, jitter));
        }
        rel *= 10.0;
    }
    Err(Error::Conditioning(format!(
        "{n}x{n} Gram matrix not positive definite after jitter {JITTER_MAX:e}",
        n = m.nrows()
    )))
}

/// log-determinant from a Cholesky factor.
pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetrize in place: `(A + A^T) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
