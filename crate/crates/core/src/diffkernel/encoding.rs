use std::f64::consts::PI;

use super::graph::{Graph, Var};
use super::tensor::Real;
use super::KernelError;

pub fn encoded_dim(dim: usize, bands: usize, include_input: bool) -> usize {
    (if include_input { dim } else { 0 }) + 2 * dim * bands
}

/// Frequency encoding of each row:
/// `[x?, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]`.
pub fn positional_encode<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    bands: usize,
    include_input: bool,
) -> Result<Var, KernelError> {
    if !g.value(x).is_finite() {
        return Err(KernelError::NonFinite {
            op: "positional_encode".into(),
        });
    }
    let mut parts = Vec::with_capacity(1 + 2 * bands);
    if include_input {
        parts.push(x);
    }
    for l in 0..bands {
        let s = g.scale(x, T::from_f64_lossy(2f64.powi(l as i32) * PI));
        parts.push(g.sin(s));
        parts.push(g.cos(s));
    }
    if parts.is_empty() {
        let rows = g.value(x).rows();
        return g.constant(super::Tensor::zeros(&[rows, 0]));
    }
    g.concat_cols(&parts)
}

/// Same layout as [`positional_encode`] for a single vector, outside any tape.
pub fn encode_vec(x: &[f64], bands: usize, include_input: bool) -> Result<Vec<f64>, KernelError> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::NonFinite {
            op: "positional_encode".into(),
        });
    }
    let mut out = Vec::with_capacity(encoded_dim(x.len(), bands, include_input));
    if include_input {
        out.extend_from_slice(x);
    }
    for l in 0..bands {
        let f = 2f64.powi(l as i32) * PI;
        out.extend(x.iter().map(|v| (f * v).sin()));
        out.extend(x.iter().map(|v| (f * v).cos()));
    }
    Ok(out)
}
