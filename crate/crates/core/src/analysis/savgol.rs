use nalgebra::DMatrix;

use crate::error::{Result, VifError};

/// Savitzky–Golay smoothing. Interior points take the value at the centre of
/// the least-squares polynomial fitted over their window; the first and last
/// `window / 2` points are read off the fit of the nearest full window.
pub fn savgol(values: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || window == 0 {
        return Err(VifError::invalid(format!("savgol window must be odd, got {window}")));
    }
    if polyorder >= window {
        return Err(VifError::invalid(format!("polyorder {polyorder} must be below window {window}")));
    }
    if values.len() < window {
        return Err(VifError::invalid(format!(
            "series of length {} is shorter than the window {window}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(VifError::NonFinite("savgol input"));
    }
    let hat = hat_matrix(window, polyorder);
    let half = window / 2;
    let n = values.len();
    let apply = |row: usize, start: usize| -> f64 {
        (0..window).map(|k| hat[(row, k)] * values[start + k]).sum()
    };
    let mut out = vec![0.0; n];
    for (i, o) in out.iter_mut().enumerate() {
        *o = if i < half {
            apply(i, 0)
        } else if i + half >= n {
            apply(window - (n - i), n - window)
        } else {
            apply(half, i - half)
        };
    }
    Ok(out)
}

/// `A (AᵀA)⁻¹ Aᵀ` for the Vandermonde matrix of the window, computed as
/// `Q Qᵀ` from a thin QR factorization. Row `j` maps window samples to the
/// fitted value at offset `j`.
fn hat_matrix(window: usize, polyorder: usize) -> DMatrix<f64> {
    let half = (window / 2).max(1) as f64;
    let a = DMatrix::from_fn(window, polyorder + 1, |i, p| ((i as f64 - (window / 2) as f64) / half).powi(p as i32));
    let q = a.qr().q();
    &q * q.transpose()
}

/// Largest window/order pair not exceeding the requested one that fits a
/// series of `len` points.
pub fn fit_window(len: usize, window: usize, polyorder: usize) -> Option<(usize, usize)> {
    if len == 0 {
        return None;
    }
    let mut w = window.min(len);
    if w.is_multiple_of(2) {
        w -= 1;
    }
    Some((w, polyorder.min(w - 1)))
}
