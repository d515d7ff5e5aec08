//! Loss-curve and spectrogram images for run directories.
//!
//! Everything is rendered into plain RGB buffers with a built-in 5x7
//! pixel font, so the output is byte-deterministic across runs.

use crate::training::HistoryRecord;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error("image encode: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PlotError>;

const BG: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);

/// 5x7 glyphs, one row per byte, low 5 bits used.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1e, 0x01, 0x01, 0x0e, 0x01, 0x01, 0x1e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x0e, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1f],
        'a' => [0x00, 0x00, 0x0e, 0x01, 0x0f, 0x11, 0x0f],
        'c' => [0x00, 0x00, 0x0e, 0x10, 0x10, 0x11, 0x0e],
        'd' => [0x01, 0x01, 0x0f, 0x11, 0x11, 0x11, 0x0f],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        'g' => [0x00, 0x00, 0x0f, 0x11, 0x0f, 0x01, 0x0e],
        'i' => [0x04, 0x00, 0x0c, 0x04, 0x04, 0x04, 0x0e],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0c, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'm' => [0x00, 0x00, 0x1a, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0e, 0x11, 0x11, 0x11, 0x0e],
        'p' => [0x00, 0x00, 0x1e, 0x11, 0x1e, 0x10, 0x10],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0f, 0x10, 0x0e, 0x01, 0x1e],
        't' => [0x04, 0x04, 0x1f, 0x04, 0x04, 0x04, 0x03],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0d],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0f, 0x01, 0x0e],
        _ => [0; 7],
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: Rgb<u8>) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5 {
                if row & (1 << (4 - rx)) != 0 {
                    put(img, cx + rx as i64, y + ry as i64, color);
                }
            }
        }
        cx += 6;
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, mut x0: i64, mut y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x0, y0, color);
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 1000.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// Renders all four loss series over steps into one PNG.
pub fn render_loss_plot(history: &[HistoryRecord], path: &Path) -> Result<()> {
    if history.is_empty() {
        return Err(PlotError::Empty);
    }
    let series: [(&str, Rgb<u8>, Box<dyn Fn(&HistoryRecord) -> f64>); 4] = [
        ("d", Rgb([214, 69, 65]), Box::new(|r| r.loss_d)),
        ("adv", Rgb([31, 119, 180]), Box::new(|r| r.loss_g_adv)),
        ("cycle", Rgb([44, 160, 44]), Box::new(|r| r.loss_cycle)),
        ("total", Rgb([148, 103, 189]), Box::new(|r| r.loss_g_total)),
    ];

    let (width, height) = (860u32, 480u32);
    let (left, right, top, bottom) = (70i64, 20i64, 20i64, 40i64);
    let plot_w = width as i64 - left - right;
    let plot_h = height as i64 - top - bottom;

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for r in history {
        for (_, _, f) in &series {
            let v = f(r);
            if v.is_finite() {
                y_min = y_min.min(v);
                y_max = y_max.max(v);
            }
        }
    }
    if !y_min.is_finite() {
        return Err(PlotError::Empty);
    }
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }
    let x_min = history.first().unwrap().step as f64;
    let x_max = history.last().unwrap().step.max(history.first().unwrap().step + 1) as f64;

    let mut img: RgbImage = ImageBuffer::from_pixel(width, height, BG);
    let to_x = |step: f64| left + ((step - x_min) / (x_max - x_min) * plot_w as f64) as i64;
    let to_y = |v: f64| top + plot_h - ((v - y_min) / (y_max - y_min) * plot_h as f64) as i64;

    for tick in 0..=4 {
        let v = y_min + (y_max - y_min) * tick as f64 / 4.0;
        let y = to_y(v);
        draw_line(&mut img, left, y, left + plot_w, y, GRID);
        draw_text(&mut img, 4, y - 3, &format_tick(v), FRAME);
    }
    for tick in 0..=4 {
        let s = x_min + (x_max - x_min) * tick as f64 / 4.0;
        let x = to_x(s);
        draw_line(&mut img, x, top, x, top + plot_h, GRID);
        draw_text(&mut img, x - 8, top + plot_h + 6, &format_tick(s.round()), FRAME);
    }
    draw_text(&mut img, left + plot_w / 2 - 12, height as i64 - 12, "step", FRAME);

    for (name, color, f) in &series {
        let mut prev: Option<(i64, i64)> = None;
        for r in history {
            let v = f(r);
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let pt = (to_x(r.step as f64), to_y(v));
            if let Some(p) = prev {
                draw_line(&mut img, p.0, p.1, pt.0, pt.1, *color);
            }
            prev = Some(pt);
        }
        let _ = name;
    }
    let mut ly = top + 6;
    for (name, color, _) in &series {
        draw_line(&mut img, left + plot_w - 70, ly + 3, left + plot_w - 56, ly + 3, *color);
        draw_text(&mut img, left + plot_w - 52, ly, name, FRAME);
        ly += 12;
    }
    for x in [left, left + plot_w] {
        draw_line(&mut img, x, top, x, top + plot_h, FRAME);
    }
    for y in [top, top + plot_h] {
        draw_line(&mut img, left, y, left + plot_w, y, FRAME);
    }

    img.save(path).map_err(|e| PlotError::Image(e.to_string()))
}

fn magma(t: f32) -> Rgb<u8> {
    let anchors: [(f32, [f32; 3]); 5] = [
        (0.00, [0.0, 0.0, 4.0]),
        (0.25, [81.0, 18.0, 124.0]),
        (0.50, [183.0, 55.0, 121.0]),
        (0.75, [251.0, 136.0, 97.0]),
        (1.00, [252.0, 253.0, 191.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for pair in anchors.windows(2) {
        let (t0, c0) = pair[0];
        let (t1, c1) = pair[1];
        if t <= t1 {
            let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            let mix = |i: usize| (c0[i] + (c1[i] - c0[i]) * a).round() as u8;
            return Rgb([mix(0), mix(1), mix(2)]);
        }
    }
    Rgb([252, 253, 191])
}

/// Heatmap of a `[n_mels, frames]` matrix, low frequencies at the bottom.
pub fn render_spectrogram(values: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = values.dim();
    if h == 0 || w == 0 {
        return Err(PlotError::Empty);
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values.iter() {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() || hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let scale: u32 = if w < 400 { 2 } else { 1 };
    let mut img: RgbImage = ImageBuffer::new(w as u32 * scale, h as u32 * scale);
    for i in 0..h {
        for j in 0..w {
            let t = (values[[i, j]] - lo) / (hi - lo);
            let color = magma(t);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(
                        j as u32 * scale + dx,
                        (h - 1 - i) as u32 * scale + dy,
                        color,
                    );
                }
            }
        }
    }
    img.save(path).map_err(|e| PlotError::Image(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(n: u64) -> Vec<HistoryRecord> {
        (1..=n)
            .map(|step| HistoryRecord {
                step,
                loss_d: 1.5 / step as f64,
                loss_g_adv: 2.0 + (step as f64 * 0.3).sin(),
                loss_cycle: 0.8 / (step as f64).sqrt(),
                loss_g_total: 2.5 / step as f64 + 1.0,
                wall_ms: 10,
            })
            .collect()
    }

    #[test]
    fn loss_plot_renders_deterministically() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.png");
        let b = tmp.path().join("b.png");
        render_loss_plot(&history(50), &a).unwrap();
        render_loss_plot(&history(50), &b).unwrap();
        let bytes_a = std::fs::read(&a).unwrap();
        let bytes_b = std::fs::read(&b).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let img = image::open(&a).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (860, 480));
        let colored = img
            .pixels()
            .filter(|p| p.0 != [255, 255, 255] && p.0 != [40, 40, 40] && p.0 != [225, 225, 225])
            .count();
        assert!(colored > 200, "curves missing, {colored} colored pixels");
    }

    #[test]
    fn empty_history_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            render_loss_plot(&[], &tmp.path().join("x.png")),
            Err(PlotError::Empty)
        ));
    }

    #[test]
    fn spectrogram_maps_range_to_colormap() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("mel.png");
        let values = Array2::from_shape_fn((16, 30), |(i, _)| i as f32);
        render_spectrogram(&values, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (60, 32));
        // Bottom row is the minimum (near black), top row the maximum.
        let bottom = img.get_pixel(0, 31);
        let top = img.get_pixel(0, 0);
        assert!(bottom.0[0] < 30 && bottom.0[2] < 30);
        assert!(top.0[0] > 200 && top.0[1] > 200);
    }
}
