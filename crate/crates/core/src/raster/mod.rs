//! Page rasterization, resampling, perturbations and image persistence.

pub mod font;
mod io;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DecorationKind, DocumentRecord};
use crate::error::{Error, Result};

pub use font::{GlyphFont, ALPHABET};
pub use io::{decode_pgm, encode_pgm, read_pgm, write_pgm, write_png};

/// Default canonical render resolution (square pages).
pub const CANONICAL_RES: usize = 256;

pub const WHITE: f32 = 1.0;
pub const INK: f32 = 0.0;
pub const DECORATION_GRAY: f32 = 0.5;

/// Grayscale raster, row-major, intensities in [0, 1] (1 = white paper).
#[derive(Debug, Clone, PartialEq)]
pub struct PageImage {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl PageImage {
    pub fn filled(width: usize, height: usize, level: f32) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        Self { width, height, pixels: vec![level.clamp(0.0, 1.0); width * height] }
    }

    pub fn blank(width: usize, height: usize) -> Self {
        Self::filled(width, height, WHITE)
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::format("image", "intensity outside [0, 1]"));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f32 {
        let s: f64 = self.pixels.iter().map(|&p| p as f64).sum();
        (s / self.pixels.len() as f64) as f32
    }

    /// Sets every pixel inside `b` to white.
    pub fn blank_box(&mut self, b: &BoundingBox) {
        for y in b.y..(b.y + b.h).min(self.height) {
            for x in b.x..(b.x + b.w).min(self.width) {
                self.set(x, y, WHITE);
            }
        }
    }

    pub fn box_is_white(&self, b: &BoundingBox) -> bool {
        (b.y..b.y + b.h).all(|y| (b.x..b.x + b.w).all(|x| self.get(x, y) == WHITE))
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn new(x: usize, y: usize, w: usize, h: usize) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> usize {
        self.x + self.w
    }

    pub fn bottom(&self) -> usize {
        self.y + self.h
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.right() <= width && self.bottom() <= height
    }

    pub fn overlaps(&self, other: &BoundingBox) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }
}

/// Output of [`render`]: the page and the ground-truth box of every field.
#[derive(Debug, Clone)]
pub struct RenderedPage {
    pub image: PageImage,
    pub boxes: BTreeMap<String, BoundingBox>,
}

/// Draws `text` with its first glyph's top-left corner at (x, y).
fn draw_text(img: &mut PageImage, font: &GlyphFont, text: &str, x: usize, y: usize) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + i * font.advance;
        for (dx, dy) in font.lit_pixels(c) {
            img.set(gx + dx, y + dy, INK);
        }
    }
}

fn check_text_box(font: &GlyphFont, name: &str, text: &str, b: &BoundingBox, res: usize) -> Result<()> {
    let n = text.chars().count();
    if !b.fits(res, res) {
        return Err(Error::LayoutOverflow { field: name.to_string(), res });
    }
    if b.w != font.text_width(n) || b.h != font.text_height() {
        return Err(Error::ShapeMismatch(format!("box {b:?} does not match the glyph extent of `{text}`")));
    }
    if let Some(c) = text.chars().find(|c| !font.has_glyph(*c)) {
        return Err(Error::UnknownSymbol(c));
    }
    Ok(())
}

/// Renders a document at `canonical_res`×`canonical_res`.
///
/// White background, black glyphs, mid-gray decorations. Every returned box
/// is the union of its field's glyph rectangles.
pub fn render(doc: &DocumentRecord, canonical_res: usize) -> Result<RenderedPage> {
    let font = GlyphFont::default();
    let mut image = PageImage::blank(canonical_res, canonical_res);

    for deco in &doc.decorations {
        let b = deco.bbox;
        if !b.fits(canonical_res, canonical_res) {
            return Err(Error::LayoutOverflow { field: "decoration".into(), res: canonical_res });
        }
        match deco.kind {
            DecorationKind::Rule => {
                for y in b.y..b.bottom() {
                    for x in b.x..b.right() {
                        image.set(x, y, DECORATION_GRAY);
                    }
                }
            }
            DecorationKind::Frame => {
                for x in b.x..b.right() {
                    image.set(x, b.y, DECORATION_GRAY);
                    image.set(x, b.bottom() - 1, DECORATION_GRAY);
                }
                for y in b.y..b.bottom() {
                    image.set(b.x, y, DECORATION_GRAY);
                    image.set(b.right() - 1, y, DECORATION_GRAY);
                }
            }
        }
    }

    for span in &doc.static_text {
        check_text_box(&font, "static text", &span.text, &span.bbox, canonical_res)?;
        draw_text(&mut image, &font, &span.text, span.bbox.x, span.bbox.y);
    }

    let mut boxes = BTreeMap::new();
    for field in &doc.fields {
        check_text_box(&font, &field.name, &field.value, &field.bbox, canonical_res)?;
        draw_text(&mut image, &font, &field.value, field.bbox.x, field.bbox.y);
        boxes.insert(field.name.clone(), field.bbox);
    }
    Ok(RenderedPage { image, boxes })
}

/// Per-axis area weights: for each output index, (source index, weight).
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let mut w = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((i, overlap / scale));
                }
                i += 1;
            }
            w
        })
        .collect()
}

/// Area-averaging downsample to a `target_res`×`target_res` image.
pub fn downsample(img: &PageImage, target_res: usize) -> Result<PageImage> {
    let src = img.width.max(img.height);
    if target_res == 0 || target_res > img.width || target_res > img.height {
        return Err(Error::BadResolution { from: src, to: target_res });
    }
    if target_res == img.width && target_res == img.height {
        return Ok(img.clone());
    }
    let wx = area_weights(img.width, target_res);
    let wy = area_weights(img.height, target_res);
    let mut out = Vec::with_capacity(target_res * target_res);
    for ys in &wy {
        for xs in &wx {
            let mut acc = 0.0f64;
            for &(sy, fy) in ys {
                let row = &img.pixels[sy * img.width..(sy + 1) * img.width];
                for &(sx, fx) in xs {
                    acc += row[sx] as f64 * fx * fy;
                }
            }
            out.push((acc as f32).clamp(0.0, 1.0));
        }
    }
    PageImage::from_pixels(target_res, target_res, out)
}

/// Attack-time image perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// Multiply intensities by `factor`, clamped to [0, 1].
    Brightness { factor: f32 },
    /// Nearest-neighbor rotation about the image center.
    Rotate { degrees: f32, random_sign: bool },
    /// Integer shift along both axes.
    Translate { dx: i64, dy: i64, random_sign: bool },
    /// Whole image replaced by a constant level.
    ConstantFill { level: f32 },
}

impl Perturbation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Perturbation::Brightness { factor } if factor.is_nan() || factor <= 0.0 => {
                Err(Error::format("perturbation", "brightness factor must be > 0"))
            }
            Perturbation::ConstantFill { level } if !(0.0..=1.0).contains(&level) => {
                Err(Error::format("perturbation", "fill level must lie in [0, 1]"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in reports (B×2, R5, T1%...).
    pub fn label(&self) -> String {
        match *self {
            Perturbation::Brightness { factor } => format!("Bx{factor}"),
            Perturbation::Rotate { degrees, .. } => format!("R{degrees}"),
            Perturbation::Translate { dx, dy, .. } => format!("T{dx},{dy}px"),
            Perturbation::ConstantFill { level } => format!("Const{level}"),
        }
    }
}

/// Applies a perturbation. `seed` only matters for random-sign variants.
pub fn perturb(img: &PageImage, p: &Perturbation, seed: u64) -> PageImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sign = |random: bool| if random && rng.gen_bool(0.5) { -1 } else { 1 };
    match *p {
        Perturbation::Brightness { factor } => PageImage {
            width: img.width,
            height: img.height,
            pixels: img.pixels.iter().map(|&v| (v * factor).clamp(0.0, 1.0)).collect(),
        },
        Perturbation::ConstantFill { level } => PageImage::filled(img.width, img.height, level),
        Perturbation::Translate { dx, dy, random_sign } => {
            let dx = dx * sign(random_sign);
            let dy = dy * sign(random_sign);
            let mut out = PageImage::blank(img.width, img.height);
            for y in 0..img.height as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= img.height as i64 {
                    continue;
                }
                for x in 0..img.width as i64 {
                    let sx = x - dx;
                    if sx >= 0 && sx < img.width as i64 {
                        out.set(x as usize, y as usize, img.get(sx as usize, sy as usize));
                    }
                }
            }
            out
        }
        Perturbation::Rotate { degrees, random_sign } => {
            let theta = (degrees as f64 * sign(random_sign) as f64).to_radians();
            let (s, c) = theta.sin_cos();
            let cx = (img.width as f64 - 1.0) / 2.0;
            let cy = (img.height as f64 - 1.0) / 2.0;
            let mut out = PageImage::blank(img.width, img.height);
            for y in 0..img.height {
                for x in 0..img.width {
                    // Inverse map: output pixel pulled from the source rotated by -theta.
                    let px = x as f64 - cx;
                    let py = y as f64 - cy;
                    let sx = (c * px + s * py + cx).round();
                    let sy = (-s * px + c * py + cy).round();
                    if sx >= 0.0 && sy >= 0.0 && (sx as usize) < img.width && (sy as usize) < img.height {
                        out.set(x, y, img.get(sx as usize, sy as usize));
                    }
                }
            }
            out
        }
    }
}
