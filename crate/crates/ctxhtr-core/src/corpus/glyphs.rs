//! Procedural glyph prototypes and shape morphing.
//!
//! Each character is a set of polyline strokes in a unit cell: x in [0,1],
//! y = 0 at the baseline, 1 at the ascender top, negative below the baseline.
//! Every glyph has a designated morph partner — a visually confusable shape
//! it can be interpolated toward — which is how writer-specific letter forms
//! (and the deliberately ambiguous test-writer variants) are manufactured.

use std::collections::HashMap;
use std::sync::OnceLock;

pub type Point = (f32, f32);
pub type Strokes = Vec<Vec<Point>>;

/// Points per stroke after arc-length resampling; morphs interpolate
/// point-wise between equally sampled strokes.
const RESAMPLE_POINTS: usize = 18;

const X_HEIGHT: f32 = 0.55;

fn arc(cx: f32, cy: f32, rx: f32, ry: f32, deg0: f32, deg1: f32, n: usize) -> Vec<Point> {
    (0..=n)
        .map(|i| {
            let t = deg0 + (deg1 - deg0) * i as f32 / n as f32;
            let r = t.to_radians();
            (cx + rx * r.cos(), cy + ry * r.sin())
        })
        .collect()
}

fn circle(cx: f32, cy: f32, r: f32) -> Vec<Point> {
    arc(cx, cy, r, r, 90.0, 450.0, 16)
}

fn line(points: &[Point]) -> Vec<Point> {
    points.to_vec()
}

fn glyph_table() -> &'static HashMap<char, Strokes> {
    static TABLE: OnceLock<HashMap<char, Strokes>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let bowl_r = 0.26;
        let bowl_y = X_HEIGHT / 2.0;
        let mut t: HashMap<char, Strokes> = HashMap::new();
        t.insert('a', vec![circle(0.42, bowl_y, bowl_r), line(&[(0.68, X_HEIGHT), (0.68, 0.0)])]);
        t.insert('b', vec![line(&[(0.26, 1.0), (0.26, 0.0)]), circle(0.52, bowl_y, 0.25)]);
        t.insert('c', vec![arc(0.5, bowl_y, bowl_r, bowl_r, 48.0, 312.0, 14)]);
        t.insert('d', vec![circle(0.45, bowl_y, bowl_r), line(&[(0.72, 1.0), (0.72, 0.0)])]);
        t.insert('e', vec![
            line(&[(0.25, 0.3), (0.75, 0.3)]),
            arc(0.5, bowl_y, bowl_r, bowl_r, 8.0, 310.0, 14),
        ]);
        t.insert('f', vec![
            line(&[(0.42, 0.0), (0.42, 0.78)]),
            arc(0.58, 0.78, 0.16, 0.17, 180.0, 60.0, 6),
            line(&[(0.24, X_HEIGHT), (0.64, X_HEIGHT)]),
        ]);
        t.insert('g', vec![
            circle(0.46, bowl_y, 0.25),
            line(&[(0.71, X_HEIGHT), (0.71, -0.2)]),
            arc(0.5, -0.2, 0.21, 0.23, 0.0, -160.0, 8),
        ]);
        t.insert('h', vec![
            line(&[(0.26, 1.0), (0.26, 0.0)]),
            arc(0.5, 0.33, 0.24, 0.24, 180.0, 0.0, 10),
            line(&[(0.74, 0.33), (0.74, 0.0)]),
        ]);
        t.insert('i', vec![line(&[(0.5, X_HEIGHT), (0.5, 0.0)]), circle(0.5, 0.8, 0.035)]);
        t.insert('j', vec![
            line(&[(0.56, X_HEIGHT), (0.56, -0.22)]),
            arc(0.4, -0.22, 0.16, 0.2, 0.0, -140.0, 7),
            circle(0.56, 0.8, 0.035),
        ]);
        t.insert('k', vec![
            line(&[(0.26, 1.0), (0.26, 0.0)]),
            line(&[(0.7, X_HEIGHT), (0.28, 0.24)]),
            line(&[(0.42, 0.33), (0.72, 0.0)]),
        ]);
        t.insert('l', vec![line(&[(0.5, 1.0), (0.5, 0.0)])]);
        t.insert('m', vec![
            line(&[(0.18, X_HEIGHT), (0.18, 0.0)]),
            arc(0.335, 0.33, 0.155, 0.24, 180.0, 0.0, 8),
            line(&[(0.49, 0.33), (0.49, 0.0)]),
            arc(0.645, 0.33, 0.155, 0.24, 180.0, 0.0, 8),
            line(&[(0.8, 0.33), (0.8, 0.0)]),
        ]);
        t.insert('n', vec![
            line(&[(0.26, X_HEIGHT), (0.26, 0.0)]),
            arc(0.5, 0.33, 0.24, 0.24, 180.0, 0.0, 10),
            line(&[(0.74, 0.33), (0.74, 0.0)]),
        ]);
        t.insert('o', vec![circle(0.5, bowl_y, bowl_r)]);
        t.insert('p', vec![line(&[(0.27, X_HEIGHT), (0.27, -0.45)]), circle(0.53, bowl_y, 0.25)]);
        t.insert('q', vec![circle(0.47, bowl_y, 0.25), line(&[(0.73, X_HEIGHT), (0.73, -0.45)])]);
        t.insert('r', vec![
            line(&[(0.3, X_HEIGHT), (0.3, 0.0)]),
            arc(0.52, 0.3, 0.22, 0.25, 180.0, 30.0, 8),
        ]);
        t.insert('s', vec![line(&[
            (0.7, 0.47),
            (0.58, 0.55),
            (0.4, 0.55),
            (0.3, 0.46),
            (0.35, 0.35),
            (0.5, 0.3),
            (0.65, 0.23),
            (0.69, 0.12),
            (0.58, 0.02),
            (0.38, 0.0),
            (0.27, 0.08),
        ])]);
        t.insert('t', vec![
            line(&[(0.44, 0.85), (0.44, 0.08), (0.5, 0.01), (0.64, 0.02)]),
            line(&[(0.24, X_HEIGHT), (0.68, X_HEIGHT)]),
        ]);
        t.insert('u', vec![
            line(&[(0.26, X_HEIGHT), (0.26, 0.2)])
                .into_iter()
                .chain(arc(0.5, 0.2, 0.24, 0.2, 180.0, 360.0, 10))
                .chain([(0.74, X_HEIGHT)])
                .collect(),
            line(&[(0.74, X_HEIGHT), (0.74, 0.0)]),
        ]);
        t.insert('v', vec![line(&[(0.26, X_HEIGHT), (0.5, 0.0), (0.74, X_HEIGHT)])]);
        t.insert('w', vec![line(&[
            (0.16, X_HEIGHT),
            (0.33, 0.0),
            (0.5, 0.38),
            (0.67, 0.0),
            (0.84, X_HEIGHT),
        ])]);
        t.insert('x', vec![
            line(&[(0.26, X_HEIGHT), (0.74, 0.0)]),
            line(&[(0.74, X_HEIGHT), (0.26, 0.0)]),
        ]);
        t.insert('y', vec![
            line(&[(0.26, X_HEIGHT), (0.5, 0.1)]),
            line(&[(0.74, X_HEIGHT), (0.32, -0.42)]),
        ]);
        t.insert('z', vec![line(&[(0.27, X_HEIGHT), (0.71, X_HEIGHT), (0.27, 0.0), (0.73, 0.0)])]);
        t
    })
}

/// Characters the glyph engine can draw (space is handled by the renderer).
pub fn has_glyph(c: char) -> bool {
    c == ' ' || glyph_table().contains_key(&c)
}

/// The confusable shape each character morphs toward at coefficient 1.
pub fn morph_partner(c: char) -> char {
    match c {
        'a' => 'o',
        'b' => 'h',
        'c' => 'e',
        'd' => 'a',
        'e' => 'c',
        'f' => 't',
        'g' => 'q',
        'h' => 'b',
        'i' => 'l',
        'j' => 'i',
        'k' => 'h',
        'l' => 'i',
        'm' => 'n',
        'n' => 'h',
        'o' => 'a',
        'p' => 'g',
        'q' => 'g',
        'r' => 'n',
        's' => 'z',
        't' => 'f',
        'u' => 'v',
        'v' => 'u',
        'w' => 'v',
        'x' => 'y',
        'y' => 'v',
        'z' => 's',
        other => other,
    }
}

fn resample(stroke: &[Point], n: usize) -> Vec<Point> {
    if stroke.len() == 1 {
        return vec![stroke[0]; n];
    }
    let mut cum = vec![0.0f32];
    for w in stroke.windows(2) {
        let (dx, dy) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
        cum.push(cum.last().unwrap() + (dx * dx + dy * dy).sqrt());
    }
    let total = *cum.last().unwrap();
    if total <= f32::EPSILON {
        return vec![stroke[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut seg = 0usize;
    for i in 0..n {
        let target = total * i as f32 / (n - 1) as f32;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let span = (cum[seg + 1] - cum[seg]).max(f32::EPSILON);
        let t = (target - cum[seg]) / span;
        let a = stroke[seg];
        let b = stroke[seg + 1];
        out.push((a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t));
    }
    out
}

/// Canonical strokes of a character, resampled to the fixed representation.
/// Returns `None` for characters without a glyph (including space).
pub fn canonical_strokes(c: char) -> Option<Strokes> {
    glyph_table().get(&c).map(|strokes| strokes.iter().map(|s| resample(s, RESAMPLE_POINTS)).collect())
}

/// Glyph shape under a writer's variant coefficients.
///
/// `coeffs[0]` interpolates toward the morph partner (0 = canonical shape,
/// 1 = partner shape); `coeffs[1]` is a style axis that widens or narrows
/// the glyph around its vertical center line.
pub fn morphed_strokes(c: char, coeffs: [f32; 2]) -> Option<Strokes> {
    let base = canonical_strokes(c)?;
    let partner = canonical_strokes(morph_partner(c)).unwrap_or_else(|| base.clone());
    let n = base.len().max(partner.len());
    let pad = |mut s: Strokes, n: usize| -> Strokes {
        while s.len() < n {
            s.push(s.last().unwrap().clone());
        }
        s
    };
    let base = pad(base, n);
    let partner = pad(partner, n);
    let m = coeffs[0].clamp(0.0, 1.0);
    let squeeze = 0.84 + 0.32 * coeffs[1].clamp(0.0, 1.0);
    let mut out = Vec::with_capacity(n);
    for (bs, ps) in base.iter().zip(&partner) {
        let mut stroke = Vec::with_capacity(bs.len());
        for (b, p) in bs.iter().zip(ps) {
            let x = b.0 + (p.0 - b.0) * m;
            let y = b.1 + (p.1 - b.1) * m;
            stroke.push((0.5 + (x - 0.5) * squeeze, y));
        }
        out.push(stroke);
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_lowercase_letter_has_a_glyph() {
        for c in 'a'..='z' {
            assert!(has_glyph(c), "missing glyph for {c:?}");
            let strokes = canonical_strokes(c).unwrap();
            assert!(!strokes.is_empty());
            for s in &strokes {
                assert_eq!(s.len(), RESAMPLE_POINTS);
                for &(x, y) in s {
                    assert!((0.0..=1.0).contains(&x), "{c}: x={x}");
                    assert!((-0.5..=1.05).contains(&y), "{c}: y={y}");
                }
            }
        }
        assert!(has_glyph(' '));
        assert!(!has_glyph('Ω'));
    }

    #[test]
    fn zero_morph_is_canonical() {
        let a = canonical_strokes('u').unwrap();
        let b = morphed_strokes('u', [0.0, 0.5]).unwrap();
        // style coeff 0.5 leaves width unchanged (squeeze = 1)
        for (sa, sb) in a.iter().zip(&b) {
            for (pa, pb) in sa.iter().zip(sb) {
                assert!((pa.0 - pb.0).abs() < 1e-5 && (pa.1 - pb.1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_morph_reaches_the_partner() {
        let v = canonical_strokes('v').unwrap();
        let morphed = morphed_strokes('u', [1.0, 0.5]).unwrap();
        // u has more strokes than v; the first strokes must coincide
        for (pa, pb) in v[0].iter().zip(&morphed[0]) {
            assert!((pa.0 - pb.0).abs() < 1e-5 && (pa.1 - pb.1).abs() < 1e-5);
        }
    }

    #[test]
    fn partner_map_stays_inside_the_glyph_set() {
        for c in 'a'..='z' {
            let p = morph_partner(c);
            assert!(has_glyph(p) && p != ' ');
        }
    }
}
