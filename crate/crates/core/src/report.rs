//! Report artefacts: the effectiveness table on disk and example panels
//! (factual with contours, counterfactual with contours, signed difference).

use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::EffectivenessReport;
use crate::image::{Image, SoftMask};

/// Contour colours, cycled over structures.
pub const STRUCTURE_COLORS: [[u8; 3]; 4] = [[230, 40, 40], [40, 200, 60], [60, 110, 255], [240, 200, 30]];

/// Diverging map for `x̃ − x`: `−limit` → negative colour, 0 → zero colour,
/// `+limit` → positive colour, linear in between.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffColormap {
    pub limit: f32,
    pub negative: [u8; 3],
    pub zero: [u8; 3],
    pub positive: [u8; 3],
}

impl DiffColormap {
    /// Symmetric limit taken from the largest absolute difference.
    pub fn symmetric(diffs: &[&Image]) -> Self {
        let m = diffs
            .iter()
            .flat_map(|d| d.data.iter())
            .fold(0.0f32, |a, &v| a.max(v.abs()));
        Self {
            limit: if m > 0.0 { m } else { 1.0 },
            negative: [40, 80, 255],
            zero: [255, 255, 255],
            positive: [230, 30, 30],
        }
    }

    pub fn color(&self, v: f32) -> [u8; 3] {
        let t = (v / self.limit).clamp(-1.0, 1.0);
        let end = if t < 0.0 { self.negative } else { self.positive };
        let a = t.abs();
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = (self.zero[c] as f32 * (1.0 - a) + end[c] as f32 * a).round() as u8;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn put(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.width && y < self.height {
            self.data[y * self.width + x] = c;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc
                .write_header()
                .map_err(|e| Error::Config(format!("png encoding: {e}")))?;
            let bytes: Vec<u8> = self.data.iter().flatten().copied().collect();
            w.write_image_data(&bytes)
                .map_err(|e| Error::Config(format!("png encoding: {e}")))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_png_bytes()?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        std::io::Write::write_all(&mut w, &bytes).map_err(|e| Error::io(path, e))
    }
}

/// Grayscale image as RGB, each pixel repeated `scale` times.
pub fn gray_to_rgb(image: &Image, scale: usize) -> RgbImage {
    let mut out = RgbImage::new(image.width * scale, image.height * scale, [0, 0, 0]);
    for y in 0..out.height {
        for x in 0..out.width {
            let v = (image.get(y / scale, x / scale).clamp(0.0, 1.0) * 255.0).round() as u8;
            out.put(x, y, [v, v, v]);
        }
    }
    out
}

pub fn diff_to_rgb(diff: &Image, map: &DiffColormap, scale: usize) -> RgbImage {
    let mut out = RgbImage::new(diff.width * scale, diff.height * scale, map.zero);
    for y in 0..out.height {
        for x in 0..out.width {
            out.put(x, y, map.color(diff.get(y / scale, x / scale)));
        }
    }
    out
}

/// Draws the boundary of each `≥ 0.5` mask region onto an upscaled image.
/// The `thick` structure gets a wider line.
pub fn draw_contours(target: &mut RgbImage, masks: &SoftMask, scale: usize, thick: Option<&str>) {
    let (h, w) = masks.dims();
    for (k, (name, grid)) in masks.structures.iter().zip(&masks.grids).enumerate() {
        let color = STRUCTURE_COLORS[k % STRUCTURE_COLORS.len()];
        let width = if thick == Some(name.as_str()) { 2 } else { 1 };
        let inside = |y: isize, x: isize| -> bool {
            y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && grid.get(y as usize, x as usize) >= 0.5
        };
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !inside(y, x) {
                    continue;
                }
                let edges = [(-1, 0), (1, 0), (0, -1), (0, 1)];
                for (dy, dx) in edges {
                    if inside(y + dy, x + dx) {
                        continue;
                    }
                    // Paint the strip of this pixel that faces its outside neighbour.
                    for i in 0..scale {
                        for t in 0..width.min(scale) {
                            let (py, px) = match (dy, dx) {
                                (-1, 0) => (y as usize * scale + t, x as usize * scale + i),
                                (1, 0) => (y as usize * scale + scale - 1 - t, x as usize * scale + i),
                                (0, -1) => (y as usize * scale + i, x as usize * scale + t),
                                _ => (y as usize * scale + i, x as usize * scale + scale - 1 - t),
                            };
                            target.put(px, py, color);
                        }
                    }
                }
            }
        }
    }
}

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0, 0, 0, 0, 0b010],
        '-' => [0, 0, 0b111, 0, 0],
        _ => [0; 5],
    }
}

/// Pixel width of `text` at font scale `s`.
pub fn text_width(text: &str, s: usize) -> usize {
    text.chars().count() * (GLYPH_W + 1) * s
}

/// Renders digits, `.` and `-` with a 3×5 bitmap font.
pub fn draw_text(target: &mut RgbImage, x0: usize, y0: usize, text: &str, s: usize, color: [u8; 3]) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        let gx = x0 + i * (GLYPH_W + 1) * s;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 1 {
                    for dy in 0..s {
                        for dx in 0..s {
                            target.put(gx + col * s + dx, y0 + r * s + dy, color);
                        }
                    }
                }
            }
        }
    }
}

fn blit(dst: &mut RgbImage, src: &RgbImage, x0: usize, y0: usize) {
    for y in 0..src.height {
        for x in 0..src.width {
            dst.put(x0 + x, y0 + y, src.get(x, y));
        }
    }
}

/// One example: factual and counterfactual images with their masks and areas.
#[derive(Clone, Debug)]
pub struct PanelRow {
    pub factual: Image,
    pub counterfactual: Image,
    pub factual_masks: Option<SoftMask>,
    pub counterfactual_masks: Option<SoftMask>,
    pub intervened: Option<String>,
    /// Areas printed under the factual and counterfactual cells, in structure order.
    pub factual_areas: Vec<f64>,
    pub counterfactual_areas: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PanelLayout {
    pub scale: usize,
    pub gap: usize,
    pub font: usize,
}

impl Default for PanelLayout {
    fn default() -> Self {
        Self {
            scale: 4,
            gap: 6,
            font: 2,
        }
    }
}

impl PanelLayout {
    fn text_height(&self, lines: usize) -> usize {
        lines * (GLYPH_H + 2) * self.font
    }

    /// `(width, height)` of a panel for `k` rows of `h × w` images with `s` structures.
    pub fn dims(&self, k: usize, h: usize, w: usize, s: usize) -> (usize, usize) {
        let cell_w = w * self.scale;
        let row_h = h * self.scale + self.text_height(s);
        (3 * cell_w + 4 * self.gap, k * (row_h + self.gap) + self.gap)
    }
}

/// Grid of 3 columns (x, x̃, x̃ − x) × one row per example.
pub fn render_panels(rows: &[PanelRow], layout: PanelLayout) -> RgbImage {
    if rows.is_empty() {
        return RgbImage::new(4 * layout.gap, layout.gap, [255, 255, 255]);
    }
    let (h, w) = rows[0].factual.dims();
    let s = rows.iter().map(|r| r.factual_areas.len().max(r.counterfactual_areas.len())).max().unwrap_or(0);
    let (pw, ph) = layout.dims(rows.len(), h, w, s);
    let mut out = RgbImage::new(pw, ph, [255, 255, 255]);
    let diffs: Vec<Image> = rows.iter().map(|r| r.counterfactual.diff(&r.factual)).collect();
    let map = DiffColormap::symmetric(&diffs.iter().collect::<Vec<_>>());
    let cell_w = w * layout.scale;
    let row_h = h * layout.scale + layout.text_height(s);
    for (i, (r, d)) in rows.iter().zip(&diffs).enumerate() {
        let y0 = layout.gap + i * (row_h + layout.gap);
        let thick = r.intervened.as_deref();
        let mut fx = gray_to_rgb(&r.factual, layout.scale);
        if let Some(m) = &r.factual_masks {
            draw_contours(&mut fx, m, layout.scale, thick);
        }
        let mut cf = gray_to_rgb(&r.counterfactual, layout.scale);
        if let Some(m) = &r.counterfactual_masks {
            draw_contours(&mut cf, m, layout.scale, thick);
        }
        let xs = [layout.gap, 2 * layout.gap + cell_w, 3 * layout.gap + 2 * cell_w];
        blit(&mut out, &fx, xs[0], y0);
        blit(&mut out, &cf, xs[1], y0);
        blit(&mut out, &diff_to_rgb(d, &map, layout.scale), xs[2], y0);
        let ty = y0 + h * layout.scale + layout.font;
        for (col, areas) in [(0, &r.factual_areas), (1, &r.counterfactual_areas)] {
            for (k, a) in areas.iter().enumerate() {
                let color = STRUCTURE_COLORS[k % STRUCTURE_COLORS.len()];
                draw_text(&mut out, xs[col], ty + layout.text_height(k), &format!("{a:.0}"), layout.font, color);
            }
        }
    }
    out
}

/// Writes `table.csv` and, when given examples, `panels.png` into `dir`.
pub fn render_report(dir: &Path, report: &EffectivenessReport, panels: &[PanelRow]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table = dir.join("table.csv");
    std::fs::write(&table, report.to_table()).map_err(|e| Error::io(&table, e))?;
    if !panels.is_empty() {
        render_panels(panels, PanelLayout::default()).save(&dir.join("panels.png"))?;
    }
    Ok(())
}
