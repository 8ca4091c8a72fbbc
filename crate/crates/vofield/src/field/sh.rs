//! Real spherical harmonics for view-direction encoding.
//!
//! Hardcoded polynomial forms up to four bands (16 coefficients), matching
//! the usual real-SH convention of fast NeRF implementations. Gradients are
//! the raw polynomial partials; callers chain them through whatever produced
//! the direction.

/// Maximum supported bands.
pub const MAX_BANDS: usize = 4;

pub fn coeff_count(bands: usize) -> usize {
    bands * bands
}

/// Evaluates the SH basis at a direction. The direction is normalized first;
/// deviations beyond 1e-3 from unit length are reported via the returned
/// flag (callers may warn).
pub fn sh_encode(dir: &[f64; 3], bands: usize, out: &mut [f64]) -> bool {
    assert!(bands <= MAX_BANDS, "sh bands > {MAX_BANDS} unsupported");
    assert_eq!(out.len(), coeff_count(bands));
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let deviated = (norm - 1.0).abs() > 1e-3;
    let inv = if norm > 0.0 { 1.0 / norm } else { 0.0 };
    let (x, y, z) = (dir[0] * inv, dir[1] * inv, dir[2] * inv);

    if bands >= 1 {
        out[0] = 0.28209479177387814;
    }
    if bands >= 2 {
        out[1] = -0.48860251190291987 * y;
        out[2] = 0.48860251190291987 * z;
        out[3] = -0.48860251190291987 * x;
    }
    if bands >= 3 {
        let (xy, yz, xz) = (x * y, y * z, x * z);
        out[4] = 1.0925484305920792 * xy;
        out[5] = -1.0925484305920792 * yz;
        out[6] = 0.94617469575755997 * z * z - 0.31539156525252005;
        out[7] = -1.0925484305920792 * xz;
        out[8] = 0.54627421529603959 * (x * x - y * y);
    }
    if bands >= 4 {
        let (x2, y2, z2) = (x * x, y * y, z * z);
        out[9] = 0.59004358992664352 * y * (-3.0 * x2 + y2);
        out[10] = 2.8906114426405538 * x * y * z;
        out[11] = 0.45704579946446572 * y * (1.0 - 5.0 * z2);
        out[12] = 0.3731763325901154 * z * (5.0 * z2 - 3.0);
        out[13] = 0.45704579946446572 * x * (1.0 - 5.0 * z2);
        out[14] = 1.4453057213202769 * z * (x2 - y2);
        out[15] = 0.59004358992664352 * x * (-x2 + 3.0 * y2);
    }
    deviated
}

/// Partial derivatives of the basis with respect to the (assumed-unit)
/// direction components: `grad[i] = d out[i] / d (x, y, z)`.
pub fn sh_gradients(dir: &[f64; 3], bands: usize, grad: &mut [[f64; 3]]) {
    assert!(bands <= MAX_BANDS);
    assert_eq!(grad.len(), coeff_count(bands));
    let (x, y, z) = (dir[0], dir[1], dir[2]);

    if bands >= 1 {
        grad[0] = [0.0, 0.0, 0.0];
    }
    if bands >= 2 {
        grad[1] = [0.0, -0.48860251190291987, 0.0];
        grad[2] = [0.0, 0.0, 0.48860251190291987];
        grad[3] = [-0.48860251190291987, 0.0, 0.0];
    }
    if bands >= 3 {
        grad[4] = [1.0925484305920792 * y, 1.0925484305920792 * x, 0.0];
        grad[5] = [0.0, -1.0925484305920792 * z, -1.0925484305920792 * y];
        grad[6] = [0.0, 0.0, 2.0 * 0.94617469575755997 * z];
        grad[7] = [-1.0925484305920792 * z, 0.0, -1.0925484305920792 * x];
        grad[8] = [
            2.0 * 0.54627421529603959 * x,
            -2.0 * 0.54627421529603959 * y,
            0.0,
        ];
    }
    if bands >= 4 {
        let (x2, y2, z2) = (x * x, y * y, z * z);
        grad[9] = [
            0.59004358992664352 * -6.0 * x * y,
            0.59004358992664352 * (-3.0 * x2 + 3.0 * y2),
            0.0,
        ];
        grad[10] = [
            2.8906114426405538 * y * z,
            2.8906114426405538 * x * z,
            2.8906114426405538 * x * y,
        ];
        grad[11] = [
            0.0,
            0.45704579946446572 * (1.0 - 5.0 * z2),
            0.45704579946446572 * y * (-10.0 * z),
        ];
        grad[12] = [0.0, 0.0, 0.3731763325901154 * (15.0 * z2 - 3.0)];
        grad[13] = [
            0.45704579946446572 * (1.0 - 5.0 * z2),
            0.0,
            0.45704579946446572 * x * (-10.0 * z),
        ];
        grad[14] = [
            1.4453057213202769 * 2.0 * x * z,
            -1.4453057213202769 * 2.0 * y * z,
            1.4453057213202769 * (x2 - y2),
        ];
        grad[15] = [
            0.59004358992664352 * (-3.0 * x2 + 3.0 * y2),
            0.59004358992664352 * 6.0 * x * y,
            0.0,
        ];
    }
}
