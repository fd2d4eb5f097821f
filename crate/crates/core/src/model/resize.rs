use ndarray::{Array3, ArrayView3};

/// Bilinear resize with half-pixel centers, edge-clamped.
pub fn resize_bilinear(x: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let coord = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ci in 0..c {
                let top = x[[ci, y0, x0]] * (1.0 - fx) + x[[ci, y0, x1]] * fx;
                let bot = x[[ci, y1, x0]] * (1.0 - fx) + x[[ci, y1, x1]] * fx;
                out[[ci, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let x = Array3::from_shape_fn((3, 4, 5), |(c, y, x)| (c * 20 + y * 5 + x) as f64);
        assert_eq!(resize_bilinear(x.view(), 4, 5), x);
    }

    #[test]
    fn constant_stays_constant() {
        let x = Array3::from_elem((3, 7, 3), 0.25);
        let y = resize_bilinear(x.view(), 3, 3);
        assert!(y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        let x = Array3::from_shape_fn((1, 1, 4), |(_, _, x)| x as f64);
        let y = resize_bilinear(x.view(), 1, 2);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![0.5, 2.5]);
    }
}
