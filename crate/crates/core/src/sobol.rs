//! Sobol low-discrepancy points in Gray-code order with the Joe–Kuo
//! (new-joe-kuo-6.21201) direction numbers.

use crate::error::SamplingError;

pub const MAX_DIMENSION: usize = 64;
pub const MAX_POINTS: usize = 1 << 20;
const BITS: usize = 32;

/// `(s, a, m_1..m_s)` for dimensions 2..=64; the first dimension is van der Corput.
const DIRECTIONS: [(u32, u32, &[u32]); 63] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
    (7, 50, &[1, 3, 1, 3, 5, 53, 69]),
    (7, 55, &[1, 1, 5, 5, 23, 33, 13]),
    (7, 56, &[1, 1, 7, 7, 1, 61, 123]),
    (7, 59, &[1, 1, 7, 9, 13, 61, 49]),
    (7, 62, &[1, 3, 3, 5, 3, 55, 33]),
    (8, 14, &[1, 3, 1, 15, 31, 13, 49, 245]),
    (8, 21, &[1, 3, 5, 15, 31, 59, 63, 97]),
    (8, 22, &[1, 3, 1, 11, 11, 11, 77, 249]),
    (8, 38, &[1, 3, 1, 11, 27, 43, 71, 9]),
    (8, 47, &[1, 1, 7, 15, 21, 11, 81, 45]),
    (8, 49, &[1, 3, 7, 3, 25, 31, 65, 79]),
    (8, 50, &[1, 3, 1, 1, 19, 11, 3, 205]),
    (8, 52, &[1, 1, 5, 9, 19, 21, 29, 157]),
    (8, 56, &[1, 3, 7, 11, 1, 33, 89, 185]),
    (8, 67, &[1, 3, 3, 3, 15, 9, 79, 71]),
    (8, 70, &[1, 3, 7, 11, 15, 39, 119, 27]),
    (8, 84, &[1, 1, 3, 1, 11, 31, 97, 225]),
    (8, 97, &[1, 1, 1, 3, 23, 43, 57, 177]),
    (8, 103, &[1, 3, 7, 7, 17, 17, 37, 71]),
    (8, 115, &[1, 3, 1, 5, 27, 63, 123, 213]),
    (8, 122, &[1, 1, 3, 5, 11, 43, 53, 133]),
    (9, 8, &[1, 3, 5, 5, 29, 17, 47, 173, 479]),
    (9, 13, &[1, 3, 3, 11, 3, 1, 109, 9, 69]),
    (9, 16, &[1, 1, 1, 5, 17, 39, 23, 5, 343]),
    (9, 22, &[1, 3, 1, 5, 25, 15, 31, 103, 499]),
    (9, 25, &[1, 1, 1, 11, 11, 17, 63, 105, 183]),
    (9, 44, &[1, 1, 5, 11, 9, 29, 97, 231, 363]),
    (9, 47, &[1, 1, 5, 15, 19, 45, 41, 7, 383]),
    (9, 52, &[1, 3, 7, 7, 31, 19, 83, 137, 221]),
    (9, 55, &[1, 1, 1, 3, 23, 15, 111, 223, 83]),
    (9, 59, &[1, 1, 5, 13, 31, 15, 55, 25, 161]),
    (9, 62, &[1, 1, 3, 13, 25, 47, 39, 87, 257]),
];

fn direction_numbers(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (BITS - 1 - i);
        }
        return v;
    }
    let (s, a, m) = DIRECTIONS[dim - 1];
    let s = s as usize;
    for i in 0..BITS {
        v[i] = if i < s {
            m[i] << (BITS - 1 - i)
        } else {
            let mut x = v[i - s] ^ (v[i - s] >> s);
            for k in 1..s {
                if (a >> (s - 1 - k)) & 1 == 1 {
                    x ^= v[i - k];
                }
            }
            x
        };
    }
    v
}

/// The first `n` points of the `d`-dimensional sequence, skipping the origin.
/// Row-major, `n × d`.
pub fn sobol_points(n: usize, d: usize) -> Result<Vec<Vec<f64>>, SamplingError> {
    if d == 0 || d > MAX_DIMENSION {
        return Err(SamplingError::Dimension(d));
    }
    if n > MAX_POINTS {
        return Err(SamplingError::TooManyPoints(n));
    }
    let dirs: Vec<[u32; BITS]> = (0..d).map(direction_numbers).collect();
    let mut x = vec![0u32; d];
    let scale = 1.0 / (1u64 << BITS) as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        // Index of the lowest zero bit of i.
        let c = (!i).trailing_zeros() as usize;
        for (xj, dj) in x.iter_mut().zip(&dirs) {
            *xj ^= dj[c];
        }
        out.push(x.iter().map(|&v| v as f64 * scale).collect());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_dimension_is_van_der_corput() {
        let p = sobol_points(3, 1).unwrap();
        assert_eq!(p, vec![vec![0.5], vec![0.75], vec![0.25]]);
    }

    #[test]
    fn matches_reference_implementation() {
        // Values from an independent Joe–Kuo Sobol generator (point index k, origin excluded).
        let dims = [0, 1, 6, 29, 44, 63];
        let expected: [(usize, [f64; 6]); 6] = [
            (2, [0.75, 0.25, 0.25, 0.75, 0.75, 0.75]),
            (3, [0.25, 0.75, 0.75, 0.25, 0.25, 0.25]),
            (100, [0.4140625, 0.2578125, 0.0234375, 0.7265625, 0.2578125, 0.6484375]),
            (511, [0.001953125, 0.501953125, 0.744140625, 0.919921875, 0.494140625, 0.501953125]),
            (1000, [0.2197265625, 0.0966796875, 0.0458984375, 0.3408203125, 0.8408203125, 0.4462890625]),
            (1024, [0.00146484375, 0.37646484375, 0.24169921875, 0.04345703125, 0.40771484375, 0.96630859375]),
        ];
        let pts = sobol_points(1024, 64).unwrap();
        assert!(pts[0].iter().all(|v| *v == 0.5));
        for (k, row) in expected {
            for (j, want) in dims.iter().zip(row) {
                assert_eq!(pts[k - 1][*j], want, "point {k} dim {j}");
            }
        }
    }

    #[test]
    fn limits() {
        assert!(matches!(sobol_points(4, 65), Err(SamplingError::Dimension(65))));
        assert!(matches!(sobol_points(MAX_POINTS + 1, 2), Err(SamplingError::TooManyPoints(_))));
        let p = sobol_points(4096, 64).unwrap();
        assert!(p.iter().flatten().all(|v| *v > 0.0 && *v < 1.0));
    }
}
