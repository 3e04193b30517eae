//! Rasterization of text lines under a writer profile.
//!
//! Glyphs are drawn as anti-aliased strokes: fixed-advance placement, shear
//! for slant, per-point jitter from a line-local seeded generator. The same
//! (text, profile, seed) always produces the same pixel buffer.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::glyphs::{has_glyph, morphed_strokes};
use super::{CorpusError, WriterProfile};

/// Grayscale line image: background 255, ink 0, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Image { height, width, pixels: vec![255; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Horizontal advance per character cell, as a fraction of line height.
pub const ADVANCE_FRAC: f32 = 0.44;
/// Width of empty renders, per the degenerate-input convention.
pub const EMPTY_WIDTH: usize = 4;

const BASELINE_FRAC: f32 = 0.72;
const UNIT_FRAC: f32 = 0.5;

/// Renders one text line. Unknown characters (anything outside the glyph set)
/// are rejected; the empty string yields a minimal blank image.
pub fn render_line(
    text: &str,
    profile: &WriterProfile,
    height: usize,
    seed: u64,
) -> Result<Image, CorpusError> {
    if let Some(bad) = text.chars().find(|&c| !has_glyph(c)) {
        return Err(CorpusError::UnknownGlyph(bad));
    }
    let n = text.chars().count();
    if n == 0 {
        return Ok(Image::blank(height, EMPTY_WIDTH));
    }
    let advance = ADVANCE_FRAC * height as f32;
    let margin = advance * 0.5;
    let width = (2.0 * margin + advance * n as f32).ceil() as usize;
    let mut img = Image::blank(height, width.max(1));

    let baseline = BASELINE_FRAC * height as f32;
    let unit = UNIT_FRAC * height as f32;
    let glyph_w = advance * 0.86;
    let slant_tan = profile.slant.tan();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut pen_x = margin;
    for c in text.chars() {
        if c != ' ' {
            let coeffs = profile.variant_map.get(&c).copied().unwrap_or([0.0, 0.5]);
            let strokes = morphed_strokes(c, coeffs).expect("glyph presence checked above");
            for stroke in &strokes {
                let mut pts = Vec::with_capacity(stroke.len());
                for &(gx, gy) in stroke {
                    let y_px = baseline - gy * unit;
                    let mut x_px = pen_x + gx * glyph_w + (gy * unit) * slant_tan;
                    let mut y_j = y_px;
                    if profile.jitter > 0.0 {
                        let (jx, jy) = gaussian_pair(&mut rng);
                        x_px += jx * profile.jitter;
                        y_j += jy * profile.jitter;
                    }
                    pts.push((x_px, y_j));
                }
                draw_polyline(&mut img, &pts, profile.stroke_width);
            }
        }
        pen_x += advance;
    }
    Ok(img)
}

/// Box-Muller transform; two standard normal draws per call.
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f32, f32) {
    let u1: f32 = rng.random_range(f32::EPSILON..1.0);
    let u2: f32 = rng.random_range(0.0..1.0);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f32::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

fn draw_polyline(img: &mut Image, pts: &[(f32, f32)], stroke_width: f32) {
    let radius = (stroke_width * 0.5).max(0.35);
    for w in pts.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len / 0.35).ceil().max(1.0) as usize;
        for i in 0..=steps {
            let t = i as f32 / steps as f32;
            stamp_disk(img, x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius);
        }
    }
    if pts.len() == 1 {
        stamp_disk(img, pts[0].0, pts[0].1, radius);
    }
}

fn stamp_disk(img: &mut Image, cx: f32, cy: f32, r: f32) {
    let x_lo = (cx - r - 1.0).floor().max(0.0) as usize;
    let x_hi = ((cx + r + 1.0).ceil() as usize).min(img.width.saturating_sub(1));
    let y_lo = (cy - r - 1.0).floor().max(0.0) as usize;
    let y_hi = ((cy + r + 1.0).ceil() as usize).min(img.height.saturating_sub(1));
    if img.width == 0 || img.height == 0 {
        return;
    }
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                let px = &mut img.pixels[y * img.width + x];
                let shade = (255.0 * (1.0 - cov)) as u8;
                if shade < *px {
                    *px = shade;
                }
            }
        }
    }
}

// ── PGM I/O ──────────────────────────────────────────────────────────────────
//
// Binary PGM: magic "P5", maxval 255, row-major payload.

pub fn write_pgm(path: &Path, img: &Image) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Image, CorpusError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_pgm(&bytes).ok_or_else(|| CorpusError::BadImage(path.display().to_string()))
}

fn parse_pgm(bytes: &[u8]) -> Option<Image> {
    let mut pos = 0usize;
    let mut token = || -> Option<Vec<u8>> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| bytes[start..pos].to_vec())
    };
    if token()? != b"P5" {
        return None;
    }
    let width: usize = String::from_utf8(token()?).ok()?.parse().ok()?;
    let height: usize = String::from_utf8(token()?).ok()?.parse().ok()?;
    let maxval: usize = String::from_utf8(token()?).ok()?.parse().ok()?;
    if maxval != 255 {
        return None;
    }
    // single whitespace byte separates header from payload
    let payload = &bytes[pos + 1..];
    if payload.len() != width * height {
        return None;
    }
    Some(Image { height, width, pixels: payload.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn plain_profile() -> WriterProfile {
        WriterProfile {
            writer_id: "t".into(),
            style_seed: 0,
            slant: 0.0,
            stroke_width: 2.0,
            jitter: 0.0,
            variant_map: BTreeMap::new(),
        }
    }

    #[test]
    fn empty_text_renders_minimal_blank_line() {
        let img = render_line("", &plain_profile(), 32, 1).unwrap();
        assert_eq!(img.height, 32);
        assert_eq!(img.width, EMPTY_WIDTH);
        assert!(img.pixels.iter().all(|&p| p == 255));
    }

    #[test]
    fn unknown_glyph_is_rejected() {
        let err = render_line("a?b", &plain_profile(), 32, 1).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownGlyph('?')));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut profile = plain_profile();
        profile.jitter = 0.4;
        profile.slant = 0.1;
        let a = render_line("hello world", &profile, 32, 99).unwrap();
        let b = render_line("hello world", &profile, 32, 99).unwrap();
        assert_eq!(a, b);
        let c = render_line("hello world", &profile, 32, 100).unwrap();
        assert_ne!(a, c, "different seeds should jitter differently");
    }

    #[test]
    fn text_produces_ink() {
        let img = render_line("abc", &plain_profile(), 32, 1).unwrap();
        assert!(img.pixels.iter().any(|&p| p < 128));
    }

    #[test]
    fn different_variant_maps_differ_in_the_morphed_region() {
        let mut p1 = plain_profile();
        let mut p2 = plain_profile();
        p1.variant_map.insert('u', [0.0, 0.5]);
        p2.variant_map.insert('u', [0.9, 0.5]);
        let a = render_line("u", &p1, 32, 7).unwrap();
        let b = render_line("u", &p2, 32, 7).unwrap();
        let diff = a.pixels.iter().zip(&b.pixels).filter(|(x, y)| x != y).count();
        assert!(diff > 0, "morph must change pixels");
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = render_line("quartz", &plain_profile(), 32, 3).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back, img);
        // exact header bytes
        let bytes = std::fs::read(&path).unwrap();
        let header = format!("P5\n{} {}\n255\n", img.width, img.height);
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + img.pixels.len());
    }
}
