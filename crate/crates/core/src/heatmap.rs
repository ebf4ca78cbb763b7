//! Diverging heatmaps of patch grids, standalone or blended over an image.
//!
//! Negative values shade toward blue, positive toward red, zero is white. The
//! colour scale is symmetric and clipped at the 99th percentile of `|value|`.

use crate::error::{Error, Result};
use crate::pnm::RgbImage;

pub const OUTLINE: [u8; 3] = [255, 255, 0];
pub const NEUTRAL: [u8; 3] = [255, 255, 255];
pub const CLIP_PERCENTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub m1: usize,
    pub m2: usize,
    pub values: Vec<f64>,
    /// `(row, col)` cells drawn as outlines.
    pub marked: Vec<(usize, usize)>,
    /// `|value|` mapped to full saturation.
    pub scale: f64,
}

/// Nearest-rank percentile of `|values|`.
pub fn abs_percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut abs: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let rank = ((q * abs.len() as f64).ceil() as usize).clamp(1, abs.len());
    abs[rank - 1]
}

/// Colour for `t ∈ [-1, 1]`; magnitudes map identically for both signs.
pub fn diverging_color(t: f64) -> [u8; 3] {
    let t = if t.is_nan() { 0.0 } else { t.clamp(-1.0, 1.0) };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t > 0.0 {
        [255, fade, fade]
    } else if t < 0.0 {
        [fade, fade, 255]
    } else {
        NEUTRAL
    }
}

impl Heatmap {
    pub fn new(m1: usize, m2: usize, values: Vec<f64>, marked: Vec<(usize, usize)>) -> Result<Self> {
        if values.len() != m1 * m2 || m1 == 0 || m2 == 0 {
            return Err(Error::DimMismatch(format!(
                "{} values for a {m1}x{m2} heatmap",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteRow(i));
        }
        if let Some(&(r, c)) = marked.iter().find(|&&(r, c)| r >= m1 || c >= m2) {
            return Err(Error::DimMismatch(format!("marked cell ({r}, {c}) outside grid")));
        }
        let scale = abs_percentile(&values, CLIP_PERCENTILE);
        Ok(Self {
            m1,
            m2,
            values,
            marked,
            scale,
        })
    }

    pub fn cell_color(&self, row: usize, col: usize) -> [u8; 3] {
        if self.scale <= 0.0 {
            return NEUTRAL;
        }
        diverging_color(self.values[row * self.m2 + col] / self.scale)
    }

    /// Grid rendered at `cell_px` pixels per patch.
    pub fn render(&self, cell_px: usize) -> RgbImage {
        let cell_px = cell_px.max(1);
        let mut img = RgbImage::new(self.m2 * cell_px, self.m1 * cell_px, NEUTRAL);
        for r in 0..self.m1 {
            for c in 0..self.m2 {
                let color = self.cell_color(r, c);
                for y in r * cell_px..(r + 1) * cell_px {
                    for x in c * cell_px..(c + 1) * cell_px {
                        img.put(x, y, color);
                    }
                }
            }
        }
        self.draw_outlines(&mut img);
        img
    }

    /// Alpha-blends the heatmap (nearest-neighbour upscaled) over `background`.
    /// The image must have the grid's aspect ratio.
    pub fn overlay(&self, background: &RgbImage, alpha: f64) -> Result<RgbImage> {
        let (w, h) = (background.width, background.height);
        if w * self.m1 != h * self.m2 || w < self.m2 || h < self.m1 {
            return Err(Error::Image(format!(
                "image {w}x{h} does not match the aspect of a {}x{} grid",
                self.m1, self.m2
            )));
        }
        let alpha = alpha.clamp(0.0, 1.0);
        let mut img = background.clone();
        for y in 0..h {
            let r = y * self.m1 / h;
            for x in 0..w {
                let c = x * self.m2 / w;
                let heat = self.cell_color(r, c);
                let bg = background.get(x, y);
                let mut px = [0u8; 3];
                for k in 0..3 {
                    px[k] = ((1.0 - alpha) * bg[k] as f64 + alpha * heat[k] as f64).round() as u8;
                }
                img.put(x, y, px);
            }
        }
        self.draw_outlines(&mut img);
        Ok(img)
    }

    fn draw_outlines(&self, img: &mut RgbImage) {
        let (w, h) = (img.width, img.height);
        for &(r, c) in &self.marked {
            let (y0, y1) = (r * h / self.m1, ((r + 1) * h / self.m1).max(r * h / self.m1 + 1) - 1);
            let (x0, x1) = (c * w / self.m2, ((c + 1) * w / self.m2).max(c * w / self.m2 + 1) - 1);
            for x in x0..=x1 {
                img.put(x, y0, OUTLINE);
                img.put(x, y1, OUTLINE);
            }
            for y in y0..=y1 {
                img.put(x0, y, OUTLINE);
                img.put(x1, y, OUTLINE);
            }
        }
    }

    /// Raw grid as CSV, one row per line, shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        grid_to_csv(&self.values, self.m2)
    }
}

pub fn grid_to_csv(values: &[f64], m2: usize) -> String {
    let mut out = String::new();
    for row in values.chunks(m2) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Inverse of [`grid_to_csv`]; returns `(m1, m2, values)`.
pub fn grid_from_csv(text: &str) -> Result<(usize, usize, Vec<f64>)> {
    let mut values = Vec::new();
    let mut m1 = 0;
    let mut m2 = None;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("grid row {}: {e}", m1 + 1)))?;
        if *m2.get_or_insert(row.len()) != row.len() {
            return Err(Error::DimMismatch("ragged grid csv".into()));
        }
        values.extend(row);
        m1 += 1;
    }
    Ok((m1, m2.unwrap_or(0), values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grid_is_neutral() {
        let h = Heatmap::new(2, 3, vec![0.0; 6], vec![]).unwrap();
        let img = h.render(2);
        assert!(img.data.chunks(3).all(|p| p == NEUTRAL));
    }

    #[test]
    fn symmetric_colors() {
        let pos = diverging_color(0.4);
        let neg = diverging_color(-0.4);
        assert_eq!(pos, [255, neg[0], neg[1]]);
        assert_eq!(neg[2], 255);
        assert_eq!(diverging_color(1.0), [255, 0, 0]);
        assert_eq!(diverging_color(-1.0), [0, 0, 255]);
    }

    #[test]
    fn single_hot_cell_outlined() {
        let mut values = vec![0.0; 9];
        values[4] = 3.0;
        let h = Heatmap::new(3, 3, values, vec![(1, 1)]).unwrap();
        let img = h.render(4);
        // border of the centre cell is yellow, its interior red, neighbours white
        assert_eq!(img.get(4, 4), OUTLINE);
        assert_eq!(img.get(7, 7), OUTLINE);
        assert_eq!(img.get(5, 5), [255, 0, 0]);
        assert_eq!(img.get(1, 1), NEUTRAL);
    }

    #[test]
    fn outlier_clipped_by_percentile() {
        let mut values: Vec<f64> = (0..200).map(|i| (i % 10) as f64 / 10.0).collect();
        values[0] = 1000.0;
        let h = Heatmap::new(10, 20, values, vec![]).unwrap();
        assert!(h.scale < 1.0);
    }

    #[test]
    fn overlay_aspect_checked() {
        let h = Heatmap::new(2, 2, vec![1.0, -1.0, 0.0, 0.5], vec![(0, 0)]).unwrap();
        assert!(h.overlay(&RgbImage::new(8, 4, [0, 0, 0]), 0.5).is_err());
        let img = h.overlay(&RgbImage::new(8, 8, [0, 0, 0]), 0.5).unwrap();
        assert_eq!(img.get(0, 0), OUTLINE);
        assert_eq!(img.get(5, 1), [0, 0, 128]);
    }

    #[test]
    fn csv_round_trip() {
        let values = vec![0.1, -2.5e-7, 3.0, f64::MIN_POSITIVE];
        let (m1, m2, back) = grid_from_csv(&grid_to_csv(&values, 2)).unwrap();
        assert_eq!((m1, m2), (2, 2));
        assert_eq!(back, values);
    }
}
