//! Real spherical harmonics up to degree 2.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of basis functions for degree `l_max`.
pub fn basis_size(degree: usize) -> Result<usize> {
    match degree {
        0 => Ok(1),
        1 => Ok(4),
        2 => Ok(9),
        _ => Err(Error::UnsupportedBasis((degree + 1) * (degree + 1))),
    }
}

pub fn check_basis(len: usize) -> Result<()> {
    match len {
        1 | 4 | 9 => Ok(()),
        other => Err(Error::UnsupportedBasis(other)),
    }
}

/// Basis values at `dir`; only the first `len` entries are meaningful.
#[inline]
pub fn sh_basis(dir: &Vector3<f64>, len: usize) -> [f64; 9] {
    let mut y = [0.0; 9];
    y[0] = SH_C0;
    if len > 1 {
        let (x, yy, z) = (dir.x, dir.y, dir.z);
        y[1] = -SH_C1 * yy;
        y[2] = SH_C1 * z;
        y[3] = -SH_C1 * x;
        if len > 4 {
            y[4] = SH_C2[0] * x * yy;
            y[5] = SH_C2[1] * yy * z;
            y[6] = SH_C2[2] * (2.0 * z * z - x * x - yy * yy);
            y[7] = SH_C2[3] * x * z;
            y[8] = SH_C2[4] * (x * x - yy * yy);
        }
    }
    y
}

/// Evaluates per-channel radiance from `channels × basis` coefficients laid
/// out channel-major. No clamping is applied.
pub fn eval_sh(coeffs: &[f64], channels: usize, dir: &Vector3<f64>) -> Result<[f64; 3]> {
    if channels == 0 || channels > 3 || coeffs.len() % channels != 0 {
        return Err(Error::InvalidArgument(format!(
            "{} coefficients do not split into {channels} channels",
            coeffs.len()
        )));
    }
    let basis = coeffs.len() / channels;
    check_basis(basis)?;
    let y = sh_basis(dir, basis);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate().take(channels) {
        *o = coeffs[c * basis..(c + 1) * basis]
            .iter()
            .zip(&y)
            .map(|(k, b)| k * b)
            .sum();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degree_zero_is_isotropic() {
        for dir in [Vector3::x(), -Vector3::y(), Vector3::new(1.0, 2.0, -3.0).normalize()] {
            let v = eval_sh(&[2.5], 1, &dir).unwrap();
            assert!((v[0] - 2.5 * 0.2820948).abs() < 1e-7);
        }
    }

    #[test]
    fn z_linear_term_is_odd() {
        let coeffs = [0.0, 0.0, 1.3, 0.0];
        let d = Vector3::new(0.3, -0.4, 0.866).normalize();
        let flipped = Vector3::new(d.x, d.y, -d.z);
        let (a, b) = (eval_sh(&coeffs, 1, &d).unwrap()[0], eval_sh(&coeffs, 1, &flipped).unwrap()[0]);
        assert!((a + b).abs() < 1e-12 && a.abs() > 0.1);
    }

    #[test]
    fn degree_one_along_z_matches_table() {
        // Y00 = 0.28209479, Y1-1 = -0.48860251 y, Y10 = 0.48860251 z, Y11 = -0.48860251 x.
        let coeffs = [0.7, -1.1, 0.4, 2.0];
        let v = eval_sh(&coeffs, 1, &Vector3::z()).unwrap()[0];
        let table = 0.7 * 0.28209479 + 0.4 * 0.48860251;
        assert!((v - table).abs() < 1e-8);
    }

    #[test]
    fn channels_are_independent() {
        let coeffs = [1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0];
        let v = eval_sh(&coeffs, 3, &Vector3::x()).unwrap();
        assert!((v[1] - 2.0 * v[0]).abs() < 1e-12 && (v[2] - 3.0 * v[0]).abs() < 1e-12);
    }

    #[test]
    fn rejects_unsupported_basis() {
        assert!(matches!(eval_sh(&[0.0; 2], 1, &Vector3::z()), Err(Error::UnsupportedBasis(2))));
        assert!(matches!(eval_sh(&[0.0; 16], 1, &Vector3::z()), Err(Error::UnsupportedBasis(16))));
        assert!(basis_size(3).is_err());
    }

    #[test]
    fn degree_two_constants() {
        // Check orthonormality numerically with a Fibonacci sphere quadrature.
        let n = 20_000;
        let mut gram = [[0.0f64; 9]; 9];
        for i in 0..n {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = i as f64 * std::f64::consts::PI * (3.0 - 5f64.sqrt());
            let y = sh_basis(&Vector3::new(r * phi.cos(), r * phi.sin(), z), 9);
            for a in 0..9 {
                for b in 0..9 {
                    gram[a][b] += y[a] * y[b] * 4.0 * std::f64::consts::PI / n as f64;
                }
            }
        }
        for a in 0..9 {
            for b in 0..9 {
                let expected = if a == b { 1.0 } else { 0.0 };
                assert!((gram[a][b] - expected).abs() < 1e-3, "{a},{b}: {}", gram[a][b]);
            }
        }
    }
}
