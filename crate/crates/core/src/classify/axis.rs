use crate::error::{Error, Result};
use crate::num::Real;

use super::features::l2_normalized;

/// Dominant right-singular direction of the uncentered row matrix `rows`,
/// by power iteration on `XᵀX`. The start vector is the row with the
/// largest norm; iteration stops when successive unit iterates differ by
/// less than `tol` in L2.
pub fn principal_axis<T: Real>(rows: &[Vec<T>], tol: T, max_iter: usize) -> Result<Vec<T>> {
    let dim = rows
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Invalid("principal axis of an empty matrix".into()))?;
    if rows.iter().any(|r| r.len() != dim) {
        return Err(Error::structural("ragged feature matrix"));
    }
    let start = rows
        .iter()
        .max_by(|a, b| norm_sq(a).partial_cmp(&norm_sq(b)).unwrap_or(std::cmp::Ordering::Equal))
        .expect("nonempty");
    let mut v = l2_normalized(start)
        .ok_or_else(|| Error::Invalid("feature matrix is all zeros".into()))?;

    for _ in 0..max_iter {
        let mut w = vec![T::zero(); dim];
        for r in rows {
            let proj = dot(r, &v);
            for (wi, ri) in w.iter_mut().zip(r) {
                *wi = *wi + proj * *ri;
            }
        }
        let next = l2_normalized(&w)
            .ok_or_else(|| Error::Invalid("power iteration collapsed to zero".into()))?;
        let delta = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (*a - *b) * (*a - *b))
            .sum::<T>()
            .sqrt();
        v = next;
        if delta < tol {
            return Ok(v);
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AxisCorrection<T> {
    pub axis: Vec<T>,
    pub visual: Vec<Vec<T>>,
    pub text: Vec<Vec<T>>,
    /// Rows that vanished after projection (zero vectors, unclassifiable).
    pub visual_zero: Vec<bool>,
    pub text_zero: Vec<bool>,
}

/// Removes the principal axis of the visual features from both the visual
/// and the text embeddings, then re-normalizes every nonzero result.
pub fn principal_axis_correction<T: Real>(
    visual: &[Vec<T>],
    text: &[Vec<T>],
) -> Result<AxisCorrection<T>> {
    if visual.len() < 2 {
        return Err(Error::Invalid(
            "principal axis correction needs at least two visual features".into(),
        ));
    }
    let axis = principal_axis(visual, T::lit(1e-8), 1000)?;
    let project_out = |rows: &[Vec<T>]| -> (Vec<Vec<T>>, Vec<bool>) {
        rows.iter()
            .map(|x| {
                let c = dot(x, &axis);
                let residual: Vec<T> = x.iter().zip(&axis).map(|(xi, ai)| *xi - c * *ai).collect();
                let floor = T::epsilon().sqrt() * norm_sq(x).sqrt();
                if norm_sq(&residual).sqrt() <= floor {
                    (vec![T::zero(); x.len()], true)
                } else {
                    (l2_normalized(&residual).expect("nonzero residual"), false)
                }
            })
            .unzip()
    };
    let (visual, visual_zero) = project_out(visual);
    let (text, text_zero) = project_out(text);
    Ok(AxisCorrection {
        axis,
        visual,
        text,
        visual_zero,
        text_zero,
    })
}
