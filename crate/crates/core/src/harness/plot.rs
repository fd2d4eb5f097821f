//! Minimal static line plots: axes, light grid, one colored polyline per
//! series. No text; the CSV next to each plot carries the numbers.

use image::{Rgb, RgbImage};

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: u32 = 30;

pub const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Plots each series (points sorted by x as given) over a shared x range
/// and the fixed y range `y`.
pub fn line_plot(series: &[Vec<(f64, f64)>], y: (f64, f64)) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (left, right, top, bottom) = (MARGIN as i64, (W - 10) as i64, 10i64, (H - MARGIN) as i64);
    let xs: Vec<f64> = series.iter().flatten().map(|p| p.0).collect();
    let (xmin, xmax) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xs.is_empty() || xmax <= xmin { (xmin.min(0.0), xmin.max(0.0) + 1.0) } else { (xmin, xmax) };
    let (ymin, ymax) = if y.1 > y.0 { y } else { (y.0, y.0 + 1.0) };
    let px = |x: f64| left + ((x - xmin) / (xmax - xmin) * (right - left) as f64).round() as i64;
    let py = |v: f64| {
        let v = v.clamp(ymin, ymax);
        bottom - ((v - ymin) / (ymax - ymin) * (bottom - top) as f64).round() as i64
    };
    for k in 1..=4 {
        let gy = py(ymin + (ymax - ymin) * k as f64 / 4.0);
        line(&mut img, (left, gy), (right, gy), Rgb([225, 225, 225]));
    }
    let black = Rgb([0, 0, 0]);
    line(&mut img, (left, bottom), (right, bottom), black);
    line(&mut img, (left, bottom), (left, top), black);
    for (i, s) in series.iter().enumerate() {
        let c = Rgb(PALETTE[i % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = s.iter().map(|&(x, v)| (px(x), py(v))).collect();
        for w in pts.windows(2) {
            line(&mut img, w[0], w[1], c);
        }
        for &(x, yy) in &pts {
            for d in -2..=2 {
                line(&mut img, (x - 2, yy + d), (x + 2, yy + d), c);
            }
        }
        // Legend swatch, top-right, one per series.
        let lx = right - 12 - 14 * i as i64;
        for d in 0..8 {
            line(&mut img, (lx, top + 2 + d), (lx + 8, top + 2 + d), c);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_series_inside_the_frame() {
        let img = line_plot(&[vec![(1.0, 0.0), (2.0, 0.5), (3.0, 1.0)]], (0.0, 1.0));
        assert_eq!(img.dimensions(), (W, H));
        let blue = Rgb(PALETTE[0]);
        // Endpoints at the lower-left and upper-right of the plot area.
        assert_eq!(*img.get_pixel(MARGIN, H - MARGIN), blue);
        assert_eq!(*img.get_pixel(W - 10, 10), blue);
    }

    #[test]
    fn degenerate_inputs_do_not_panic() {
        line_plot(&[], (0.0, 1.0));
        line_plot(&[vec![(5.0, 2.0)]], (1.0, 1.0));
    }
}
