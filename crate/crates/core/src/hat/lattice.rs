//! Forward-backward over the transducer lattice.
//!
//! Node `(t, u)` (row-major, `u` fastest) has two outgoing arcs: blank to
//! `(t + 1, u)` and label `y_u` to `(t, u + 1)`. The path ends with the blank
//! taken at `(frames - 1, targets)`.

use crate::error::{Error, Result};
use crate::tensor::{log_add_exp, Scalar};

pub struct ForwardBackward<T> {
    pub neg_log_prob: T,
    /// d(-log P) / d(log blank) per node.
    pub d_log_blank: Vec<T>,
    /// d(-log P) / d(log emit) per node (zero in the last column).
    pub d_log_emit: Vec<T>,
}

/// Forward variables: `alpha[t*(U+1)+u]` is the log-mass of reaching `(t, u)`.
pub fn forward<T: Scalar>(log_blank: &[T], log_emit: &[T], frames: usize, targets: usize) -> Vec<T> {
    let u1 = targets + 1;
    let mut alpha = vec![T::neg_infinity(); frames * u1];
    for t in 0..frames {
        for u in 0..u1 {
            let i = t * u1 + u;
            if t == 0 && u == 0 {
                alpha[i] = T::zero();
                continue;
            }
            let mut a = T::neg_infinity();
            if t > 0 {
                a = log_add_exp(a, alpha[i - u1] + log_blank[i - u1]);
            }
            if u > 0 {
                a = log_add_exp(a, alpha[i - 1] + log_emit[i - 1]);
            }
            alpha[i] = a;
        }
    }
    alpha
}

pub fn forward_backward<T: Scalar>(
    log_blank: &[T],
    log_emit: &[T],
    frames: usize,
    targets: usize,
) -> Result<ForwardBackward<T>> {
    if frames == 0 {
        return Err(Error::ZeroProbability(format!("no frames for {targets} targets")));
    }
    let u1 = targets + 1;
    let n = frames * u1;
    if log_blank.len() != n || log_emit.len() != n {
        return Err(Error::Dimension(format!("lattice {frames}x{u1} vs {} nodes", log_blank.len())));
    }
    let alpha = forward(log_blank, log_emit, frames, targets);
    let last = n - 1;
    let log_p = alpha[last] + log_blank[last];
    if !log_p.is_finite() {
        return Err(Error::ZeroProbability(format!("{frames} frames, {targets} targets")));
    }

    // beta[i]: log-mass from node i to the end, including its outgoing arc.
    let mut beta = vec![T::neg_infinity(); n];
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            let i = t * u1 + u;
            let mut b = T::neg_infinity();
            if t + 1 < frames {
                b = log_add_exp(b, beta[i + u1] + log_blank[i]);
            } else if u == targets {
                b = log_blank[i];
            }
            if u < targets {
                b = log_add_exp(b, beta[i + 1] + log_emit[i]);
            }
            beta[i] = b;
        }
    }

    let mut d_log_blank = vec![T::zero(); n];
    let mut d_log_emit = vec![T::zero(); n];
    for t in 0..frames {
        for u in 0..u1 {
            let i = t * u1 + u;
            let next = if t + 1 < frames {
                beta[i + u1]
            } else if u == targets {
                T::zero()
            } else {
                T::neg_infinity()
            };
            d_log_blank[i] = -(alpha[i] + log_blank[i] + next - log_p).exp();
            if u < targets {
                d_log_emit[i] = -(alpha[i] + log_emit[i] + beta[i + 1] - log_p).exp();
            }
        }
    }
    Ok(ForwardBackward { neg_log_prob: -log_p, d_log_blank, d_log_emit })
}
