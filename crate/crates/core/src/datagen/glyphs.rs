//! Procedural pseudo-characters built from straight strokes and arcs, so no
//! font files are needed.

use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Segment {
    pub a: (f32, f32),
    pub b: (f32, f32),
}

impl Segment {
    /// Distance from `p` to the segment.
    pub fn distance(&self, p: (f32, f32)) -> f32 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (qx, qy) = (self.a.0 + t * dx - p.0, self.a.1 + t * dy - p.1);
        (qx * qx + qy * qy).sqrt()
    }
}

/// Stroke primitives in a unit cell; `x` to the right, `y` downwards.
fn primitive(kind: usize) -> Vec<(f32, f32)> {
    match kind {
        0 => vec![(0.0, 0.0), (0.0, 1.0)],
        1 => vec![(1.0, 0.0), (1.0, 1.0)],
        2 => vec![(0.0, 0.0), (1.0, 0.0)],
        3 => vec![(0.0, 0.5), (1.0, 0.5)],
        4 => vec![(0.0, 1.0), (1.0, 1.0)],
        5 => vec![(0.0, 0.0), (1.0, 1.0)],
        6 => vec![(0.0, 1.0), (1.0, 0.0)],
        7 => vec![(0.5, 0.0), (0.5, 1.0)],
        8 => arc((0.5, 0.5), 0.5, 0.0, std::f32::consts::PI),
        9 => arc((0.5, 0.5), 0.5, std::f32::consts::PI, 2.0 * std::f32::consts::PI),
        10 => arc((0.5, 0.3), 0.3, 0.0, 2.0 * std::f32::consts::PI),
        _ => vec![(0.0, 0.0), (0.5, 1.0), (1.0, 0.0)],
    }
}

const PRIMITIVES: usize = 12;

fn arc(c: (f32, f32), r: f32, from: f32, to: f32) -> Vec<(f32, f32)> {
    let steps = 8;
    (0..=steps)
        .map(|i| {
            let t = from + (to - from) * i as f32 / steps as f32;
            (c.0 + r * t.cos(), c.1 + r * t.sin())
        })
        .collect()
}

/// One pseudo-character as polylines in unit-cell coordinates.
pub(crate) fn random_glyph<R: Rng>(rng: &mut R) -> Vec<Vec<(f32, f32)>> {
    let strokes = rng.gen_range(2..=3);
    let mut kinds: Vec<usize> = Vec::with_capacity(strokes);
    while kinds.len() < strokes {
        let k = rng.gen_range(0..PRIMITIVES);
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    kinds.into_iter().map(primitive).collect()
}

/// Lay out a string of glyphs and map them to canvas segments.
///
/// The string runs along a baseline rotated by `angle` (radians) about its
/// centre at `centre`. Each cell is `0.6 * height` wide with a `0.25 * height`
/// gap.
pub(crate) fn layout_text(
    glyphs: &[Vec<Vec<(f32, f32)>>],
    height: f32,
    centre: (f32, f32),
    angle: f32,
) -> Vec<Segment> {
    let cell_w = 0.6 * height;
    let gap = 0.25 * height;
    let total = text_extent(glyphs.len(), height).0;
    let (s, c) = angle.sin_cos();
    let mut out = Vec::new();
    for (i, glyph) in glyphs.iter().enumerate() {
        let x0 = i as f32 * (cell_w + gap) - total / 2.0;
        for stroke in glyph {
            let pts: Vec<(f32, f32)> = stroke
                .iter()
                .map(|&(u, v)| {
                    let lx = x0 + u * cell_w;
                    let ly = (v - 0.5) * height;
                    (centre.0 + lx * c - ly * s, centre.1 + lx * s + ly * c)
                })
                .collect();
            for w in pts.windows(2) {
                out.push(Segment { a: w[0], b: w[1] });
            }
        }
    }
    out
}

/// Unrotated `(length, height)` of a string of `n` glyphs.
pub(crate) fn text_extent(n: usize, height: f32) -> (f32, f32) {
    let n = n as f32;
    (n * 0.6 * height + (n - 1.0).max(0.0) * 0.25 * height, height)
}
