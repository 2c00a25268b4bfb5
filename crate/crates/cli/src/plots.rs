//! Minimal PNG plots: a confusion-matrix heatmap and a line chart.

use std::path::Path;

use bevbeam::{Error, Result};
use image::{Rgb, RgbImage};

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Map `t` in `[0, 1]` from dark blue to yellow.
fn color(t: f64) -> Rgb<u8> {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    Rgb([lerp(20.0, 250.0), lerp(20.0, 230.0), lerp(90.0, 40.0)])
}

/// Rows are true beams, columns predicted beams; each row is normalized by
/// its count.
pub fn confusion_heatmap(cm: &[Vec<u64>], path: &Path) -> Result<()> {
    let m = cm.len().max(1);
    let cell = (512 / m).clamp(2, 32) as u32;
    let side = cell * m as u32;
    let mut img = RgbImage::new(side, side);
    for (r, row) in cm.iter().enumerate() {
        let total = row.iter().sum::<u64>().max(1) as f64;
        for (c, &v) in row.iter().enumerate() {
            let px = color(v as f64 / total);
            for y in 0..cell {
                for x in 0..cell {
                    img.put_pixel(c as u32 * cell + x, r as u32 * cell + y, px);
                }
            }
        }
    }
    save(&img, path)
}

/// Points `(i, ys[i])` on a `[0, 1]` vertical scale, with the axes drawn.
pub fn line_plot(ys: &[f64], path: &Path) -> Result<()> {
    let (w, h, pad) = (480u32, 320u32, 24u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    for x in pad..w - pad {
        img.put_pixel(x, h - pad, axis);
    }
    for y in pad..=h - pad {
        img.put_pixel(pad, y, axis);
    }
    let n = ys.len();
    let to_px = |i: f64, v: f64| {
        let span = (n.max(2) - 1) as f64;
        let x = pad as f64 + i / span * (w - 2 * pad) as f64;
        let y = (h - pad) as f64 - v.clamp(0.0, 1.0) * (h - 2 * pad) as f64;
        (x, y)
    };
    let line = Rgb([200, 30, 30]);
    for i in 0..n {
        let (x0, y0) = to_px(i as f64, ys[i]);
        let (x1, y1) = if i + 1 < n {
            to_px((i + 1) as f64, ys[i + 1])
        } else {
            (x0, y0)
        };
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (px, py) = (x.round() as i64 + dx, y.round() as i64 + dy);
                    if (0..w as i64).contains(&px) && (0..h as i64).contains(&py) {
                        img.put_pixel(px as u32, py as u32, line);
                    }
                }
            }
        }
    }
    save(&img, path)
}
