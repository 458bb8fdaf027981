//! Binary raster canvas, physical<->pixel coordinate mapping, and
//! deterministic straight-segment rasterization.
//!
//! The canvas is a grid of {0,1} ink cells with (0,0) at the bottom-left
//! corner and y growing upward; image files are flipped vertically on
//! import/export so they display upright. A segment covers every pixel
//! whose center lies within half a pixel of the ideal line (capsule rule),
//! evaluated in exact integer arithmetic.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Pixel position on a canvas. Valid coordinates satisfy
/// `x < width` and `y < height` for the canvas they are used with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelCoord {
    pub x: u32,
    pub y: u32,
}

impl PixelCoord {
    pub fn new(x: u32, y: u32) -> Self {
        Self { x, y }
    }
}

/// Physical position in centimeters. z = 0 is the drawing surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalCoord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PhysicalCoord {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Square pixel-grid <-> physical-extent mapping. Defaults give a 42 px
/// canvas spanning 21 cm, i.e. 0.5 cm per pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasMapping {
    pub pixels_per_side: u32,
    pub centimeters_per_side: f64,
}

impl Default for CanvasMapping {
    fn default() -> Self {
        Self { pixels_per_side: 42, centimeters_per_side: 21.0 }
    }
}

impl CanvasMapping {
    pub fn new(pixels_per_side: u32, centimeters_per_side: f64) -> Result<Self> {
        let m = Self { pixels_per_side, centimeters_per_side };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels_per_side == 0 {
            return Err(Error::InvalidValue("pixels_per_side must be > 0".into()));
        }
        if !(self.centimeters_per_side > 0.0) || !self.centimeters_per_side.is_finite() {
            return Err(Error::InvalidValue("centimeters_per_side must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn cm_per_pixel(&self) -> f64 {
        self.centimeters_per_side / self.pixels_per_side as f64
    }

    /// Physical coordinate of the last pixel center along one axis, in cm.
    pub fn max_center_cm(&self) -> f64 {
        (self.pixels_per_side - 1) as f64 * self.cm_per_pixel()
    }
}

/// Round-half-up: ties at .5 go toward positive infinity.
pub(crate) fn round_half_up(x: f64) -> f64 {
    (x + 0.5).floor()
}

/// Map a physical position to the nearest pixel, clamping to canvas bounds.
/// Rounding is half-up, so a 0.25 cm distance at the default mapping lands
/// on the next pixel while anything below it stays.
pub fn physical_to_pixel(p: PhysicalCoord, m: &CanvasMapping) -> Result<PixelCoord> {
    if !p.is_finite() {
        return Err(Error::InvalidValue(format!(
            "physical coordinate must be finite, got ({}, {}, {})",
            p.x, p.y, p.z
        )));
    }
    let cmpp = m.cm_per_pixel();
    let n = m.pixels_per_side as i64;
    let clamp = |v: f64| -> u32 {
        let r = round_half_up(v / cmpp) as i64;
        r.clamp(0, n - 1) as u32
    };
    Ok(PixelCoord::new(clamp(p.x), clamp(p.y)))
}

/// Physical position (cm) of a pixel's center; z is the drawing surface.
pub fn pixel_to_physical(px: PixelCoord, m: &CanvasMapping) -> Result<PhysicalCoord> {
    if px.x >= m.pixels_per_side || px.y >= m.pixels_per_side {
        return Err(Error::OutOfBounds(format!(
            "pixel ({}, {}) outside {0}x{0} canvas",
            px.x,
            px.y,
        )));
    }
    let cmpp = m.cm_per_pixel();
    Ok(PhysicalCoord::new(px.x as f64 * cmpp, px.y as f64 * cmpp, 0.0))
}

/// Binary ink raster. Cells are 0 (blank) or 1 (ink); a new canvas is blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Canvas {
    width: u32,
    height: u32,
    ink: Vec<u8>,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidValue(format!(
                "canvas dimensions must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height, ink: vec![0u8; (width * height) as usize] })
    }

    /// Square blank canvas matching a mapping's pixel grid.
    pub fn for_mapping(m: &CanvasMapping) -> Result<Self> {
        Self::new(m.pixels_per_side, m.pixels_per_side)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn contains(&self, p: PixelCoord) -> bool {
        p.x < self.width && p.y < self.height
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn get(&self, p: PixelCoord) -> Result<bool> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds(format!(
                "pixel ({}, {}) outside {}x{} canvas",
                p.x, p.y, self.width, self.height
            )));
        }
        Ok(self.ink[self.idx(p.x, p.y)] != 0)
    }

    pub fn set(&mut self, p: PixelCoord, on: bool) -> Result<()> {
        if !self.contains(p) {
            return Err(Error::OutOfBounds(format!(
                "pixel ({}, {}) outside {}x{} canvas",
                p.x, p.y, self.width, self.height
            )));
        }
        let i = self.idx(p.x, p.y);
        self.ink[i] = on as u8;
        Ok(())
    }

    pub fn ink_count(&self) -> usize {
        self.ink.iter().filter(|&&v| v != 0).count()
    }

    pub fn cells(&self) -> &[u8] {
        &self.ink
    }

    /// Row-major f64 copy of the grid, for network inputs.
    pub fn to_features(&self) -> Vec<f64> {
        self.ink.iter().map(|&v| v as f64).collect()
    }

    /// Mean squared pixel difference against another canvas of equal size.
    pub fn mean_squared_diff(&self, other: &Canvas) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let differing = self
            .ink
            .iter()
            .zip(&other.ink)
            .filter(|(a, b)| a != b)
            .count();
        Ok(differing as f64 / self.ink.len() as f64)
    }

    /// SHA-256 over dimensions and cells, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.ink);
        let digest = h.finalize();
        let mut s = String::with_capacity(64);
        for b in digest {
            let _ = write!(s, "{b:02x}");
        }
        s
    }

    /// Serialize as a plain-text portable bitmap (PBM P1). The top image row
    /// is the highest y row, so the file displays upright.
    pub fn to_pbm(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "P1");
        let _ = writeln!(out, "{} {}", self.width, self.height);
        for y in (0..self.height).rev() {
            let row: Vec<&str> = (0..self.width)
                .map(|x| if self.ink[self.idx(x, y)] != 0 { "1" } else { "0" })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_pbm(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(|l| l.split_whitespace());
        let magic = tokens.next().ok_or_else(|| Error::InvalidValue("empty PBM".into()))?;
        if magic != "P1" {
            return Err(Error::InvalidValue(format!("expected P1 PBM, got {magic:?}")));
        }
        let mut dim = |name: &str| -> Result<u32> {
            tokens
                .next()
                .ok_or_else(|| Error::InvalidValue(format!("PBM missing {name}")))?
                .parse::<u32>()
                .map_err(|e| Error::InvalidValue(format!("PBM {name}: {e}")))
        };
        let width = dim("width")?;
        let height = dim("height")?;
        let mut canvas = Canvas::new(width, height)?;
        for row in 0..height {
            let y = height - 1 - row;
            for x in 0..width {
                let tok = tokens
                    .next()
                    .ok_or_else(|| Error::InvalidValue("PBM truncated".into()))?;
                let v = match tok {
                    "0" => 0u8,
                    "1" => 1u8,
                    other => {
                        return Err(Error::InvalidValue(format!("PBM cell {other:?}")));
                    }
                };
                let i = canvas.idx(x, y);
                canvas.ink[i] = v;
            }
        }
        Ok(canvas)
    }

    /// Write as a black-on-white grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::GrayImage::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = if self.ink[self.idx(x, y)] != 0 { 0u8 } else { 255u8 };
                // image rows run top-down
                img.put_pixel(x, self.height - 1 - y, image::Luma([v]));
            }
        }
        img.save(path).map_err(|e| Error::Image(e.to_string()))
    }

    /// Load a PNG, thresholding luma < 128 as ink.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(e.to_string()))?.to_luma8();
        let (width, height) = (img.width(), img.height());
        let mut canvas = Canvas::new(width, height)?;
        for row in 0..height {
            for x in 0..width {
                let y = height - 1 - row;
                let i = canvas.idx(x, y);
                canvas.ink[i] = (img.get_pixel(x, row).0[0] < 128) as u8;
            }
        }
        Ok(canvas)
    }
}

/// Exact test for the capsule coverage rule: is the pixel center `(px, py)`
/// within distance 1/2 of the segment `(ax, ay)-(bx, by)`? All inputs are
/// pixel indices; the comparison is done in integer arithmetic so there are
/// no floating-point boundary ties.
fn segment_covers(ax: i64, ay: i64, bx: i64, by: i64, px: i64, py: i64) -> bool {
    let (dx, dy) = (bx - ax, by - ay);
    let (vx, vy) = (px - ax, py - ay);
    let len2 = dx * dx + dy * dy;
    if len2 == 0 {
        // degenerate segment: distance to the single point is an integer
        return vx == 0 && vy == 0;
    }
    let dot = vx * dx + vy * dy;
    if dot <= 0 {
        // nearest point is endpoint a; integer distance <= 1/2 only if 0
        return vx * vx + vy * vy == 0;
    }
    if dot >= len2 {
        let (wx, wy) = (px - bx, py - by);
        return wx * wx + wy * wy == 0;
    }
    // interior: dist^2 = |v|^2 - dot^2/len2 <= 1/4
    4 * ((vx * vx + vy * vy) * len2 - dot * dot) <= len2
}

/// Draw a straight segment onto a copy of the canvas. With the pen lifted
/// the canvas is returned unchanged. Already-inked pixels stay inked.
pub fn rasterize_segment(
    canvas: &Canvas,
    from: PixelCoord,
    to: PixelCoord,
    pen_down: bool,
) -> Result<Canvas> {
    let mut out = canvas.clone();
    rasterize_segment_into(&mut out, from, to, pen_down)?;
    Ok(out)
}

/// In-place variant of [`rasterize_segment`].
pub fn rasterize_segment_into(
    canvas: &mut Canvas,
    from: PixelCoord,
    to: PixelCoord,
    pen_down: bool,
) -> Result<()> {
    for p in [from, to] {
        if !canvas.contains(p) {
            return Err(Error::OutOfBounds(format!(
                "segment endpoint ({}, {}) outside {}x{} canvas",
                p.x,
                p.y,
                canvas.width(),
                canvas.height()
            )));
        }
    }
    if !pen_down {
        return Ok(());
    }
    let (ax, ay) = (from.x as i64, from.y as i64);
    let (bx, by) = (to.x as i64, to.y as i64);
    let x_lo = (ax.min(bx) - 1).max(0);
    let x_hi = (ax.max(bx) + 1).min(canvas.width as i64 - 1);
    let y_lo = (ay.min(by) - 1).max(0);
    let y_hi = (ay.max(by) + 1).min(canvas.height as i64 - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            if segment_covers(ax, ay, bx, by, x, y) {
                let i = canvas.idx(x as u32, y as u32);
                canvas.ink[i] = 1;
            }
        }
    }
    Ok(())
}

/// One-hot pen-position channel: 1 at `pos`, 0 elsewhere.
pub fn make_position_channel(pos: PixelCoord, width: u32, height: u32) -> Result<Canvas> {
    let mut grid = Canvas::new(width, height)?;
    grid.set(pos, true)?;
    Ok(grid)
}

/// One drawn (or pen-up travel) segment, as stored in stroke trace files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrokeRecord {
    pub down: bool,
    pub from: PixelCoord,
    pub to: PixelCoord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
}

/// Write stroke records as JSON lines.
pub fn write_stroke_records<W: Write>(mut w: W, records: &[StrokeRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| Error::InvalidValue(format!("stroke record serialize: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Read stroke records from JSON lines, reporting the offending line on error.
pub fn read_stroke_records<R: BufRead>(r: R) -> Result<Vec<StrokeRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StrokeRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}
