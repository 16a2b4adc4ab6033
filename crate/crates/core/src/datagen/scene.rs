use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::glyphs::{layout_text, random_glyph, text_extent, Segment};
use super::ImageTriplet;
use crate::error::{param_err, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundKind {
    Gradient,
    NoiseBlobs,
    Geometric,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [
        BackgroundKind::Gradient,
        BackgroundKind::NoiseBlobs,
        BackgroundKind::Geometric,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphParams {
    /// Stroke width in pixels.
    pub stroke_width: f32,
    /// Glyph height range in pixels.
    pub height_range: (f32, f32),
    /// Baseline rotation range in degrees.
    pub rotation_range: (f32, f32),
    /// Characters per text string.
    pub chars_range: (usize, usize),
}

impl Default for GlyphParams {
    fn default() -> Self {
        Self {
            stroke_width: 3.5,
            height_range: (14.0, 20.0),
            rotation_range: (-15.0, 15.0),
            chars_range: (2, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: (usize, usize),
    pub n_texts: usize,
    pub background: BackgroundKind,
    pub glyph: GlyphParams,
}

impl SceneSpec {
    pub fn new(seed: u64, size: (usize, usize), n_texts: usize, background: BackgroundKind) -> Self {
        Self {
            seed,
            size,
            n_texts,
            background,
            glyph: GlyphParams::default(),
        }
    }

    /// Background kind chosen from the seed.
    pub fn seeded(seed: u64, size: (usize, usize), n_texts: usize) -> Self {
        let kind = BackgroundKind::ALL[(seed % 3) as usize];
        Self::new(seed, size, n_texts, kind)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size;
        if h < 16 || w < 16 {
            return Err(param_err!("scene size {h}x{w} is below the 16x16 minimum"));
        }
        let g = &self.glyph;
        if g.stroke_width.is_nan() || g.stroke_width <= 0.0 {
            return Err(param_err!("stroke width must be positive"));
        }
        let (lo, hi) = g.height_range;
        if lo.is_nan() || lo <= 0.0 || lo > hi {
            return Err(param_err!("invalid glyph height range ({lo}, {hi})"));
        }
        if g.stroke_width >= lo {
            return Err(param_err!(
                "stroke width {} swallows glyphs of height {lo}",
                g.stroke_width
            ));
        }
        if g.rotation_range.0 > g.rotation_range.1 {
            return Err(param_err!("inverted rotation range"));
        }
        if g.chars_range.0 == 0 || g.chars_range.0 > g.chars_range.1 {
            return Err(param_err!("invalid character count range"));
        }
        if self.n_texts > 0 {
            let (len, ht) = text_extent(g.chars_range.0, lo);
            if len + 2.0 > w as f32 || ht + 2.0 > h as f32 {
                return Err(param_err!("glyphs do not fit a {h}x{w} canvas"));
            }
            let rows = (h as f32 / lo).floor() as usize;
            if self.n_texts > rows.max(1) {
                return Err(param_err!(
                    "{} texts do not fit a {h}x{w} canvas at height {lo}",
                    self.n_texts
                ));
            }
        }
        Ok(())
    }
}

fn lerp(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn random_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

fn luma(c: &[f32]) -> f32 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn render_background<R: Rng>(kind: BackgroundKind, h: usize, w: usize, rng: &mut R) -> Image {
    let mut img = Image::new(h, w, 3);
    match kind {
        BackgroundKind::Gradient => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let (dx, dy) = (theta.cos(), theta.sin());
            let span = (h as f32 * dy.abs() + w as f32 * dx.abs()).max(1.0);
            for y in 0..h {
                for x in 0..w {
                    let p = (x as f32 - w as f32 / 2.0) * dx + (y as f32 - h as f32 / 2.0) * dy;
                    let c = lerp(c0, c1, (p / span + 0.5).clamp(0.0, 1.0));
                    for (ch, v) in c.iter().enumerate() {
                        img.set(y, x, ch, *v);
                    }
                }
            }
        }
        BackgroundKind::NoiseBlobs => {
            let base = random_color(rng);
            let blobs: Vec<_> = (0..rng.gen_range(4..=8))
                .map(|_| {
                    let cy = rng.gen_range(0.0..h as f32);
                    let cx = rng.gen_range(0.0..w as f32);
                    let r = rng.gen_range(0.08..0.25) * h.min(w) as f32;
                    let d = [
                        rng.gen_range(-0.35..0.35f32),
                        rng.gen_range(-0.35..0.35f32),
                        rng.gen_range(-0.35..0.35f32),
                    ];
                    (cy, cx, r, d)
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let mut c = base;
                    for (cy, cx, r, d) in &blobs {
                        let e = (-((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)) / (2.0 * r * r)).exp();
                        for ch in 0..3 {
                            c[ch] += d[ch] * e;
                        }
                    }
                    let grain: f32 = rng.gen_range(-0.02..0.02);
                    for (ch, v) in c.iter().enumerate() {
                        img.set(y, x, ch, (v + grain).clamp(0.0, 1.0));
                    }
                }
            }
        }
        BackgroundKind::Geometric => {
            let base = random_color(rng);
            for y in 0..h {
                for x in 0..w {
                    for (ch, v) in base.iter().enumerate() {
                        img.set(y, x, ch, *v);
                    }
                }
            }
            for _ in 0..rng.gen_range(3..=6) {
                let col = random_color(rng);
                let cy = rng.gen_range(0.0..h as f32);
                let cx = rng.gen_range(0.0..w as f32);
                let a = rng.gen_range(0.1..0.35) * h as f32;
                let b = rng.gen_range(0.1..0.35) * w as f32;
                let circle = rng.gen_bool(0.5);
                for y in 0..h {
                    for x in 0..w {
                        let (ny, nx) = ((y as f32 - cy) / a, (x as f32 - cx) / b);
                        let inside = if circle {
                            ny * ny + nx * nx <= 1.0
                        } else {
                            ny.abs() <= 1.0 && nx.abs() <= 1.0
                        };
                        if inside {
                            for (ch, v) in col.iter().enumerate() {
                                img.set(y, x, ch, *v);
                            }
                        }
                    }
                }
            }
        }
    }
    img
}

/// Text color far in luminance from the background under the string.
fn text_color<R: Rng>(background_luma: f32, rng: &mut R) -> [f32; 3] {
    let dark = background_luma > 0.5;
    let mut c = [0f32; 3];
    for v in &mut c {
        *v = if dark {
            rng.gen_range(0.0..0.2)
        } else {
            rng.gen_range(0.8..1.0)
        };
    }
    c
}

/// Render a deterministic synthetic triplet.
///
/// `gt` is the background alone. Glyph coverage is an anti-aliased stroke
/// profile; the mask is coverage thresholded at 0.5, and text is blended into
/// `input` only on mask pixels so the background is untouched elsewhere.
pub fn generate_triplet(spec: &SceneSpec) -> Result<ImageTriplet> {
    spec.validate()?;
    let (h, w) = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gt = render_background(spec.background, h, w, &mut rng);
    let mut input = gt.clone();
    let mut mask = Image::new(h, w, 1);
    let g = &spec.glyph;
    let half = g.stroke_width / 2.0;

    for _ in 0..spec.n_texts {
        let n = rng.gen_range(g.chars_range.0..=g.chars_range.1);
        let height = if g.height_range.0 < g.height_range.1 {
            rng.gen_range(g.height_range.0..g.height_range.1)
        } else {
            g.height_range.0
        };
        let glyphs: Vec<_> = (0..n).map(|_| random_glyph(&mut rng)).collect();
        let deg = if g.rotation_range.0 < g.rotation_range.1 {
            rng.gen_range(g.rotation_range.0..g.rotation_range.1)
        } else {
            g.rotation_range.0
        };
        let angle = deg.to_radians();
        // Shrink the string until its rotated bounding box fits.
        let mut scale = 1.0f32;
        let (bw, bh) = loop {
            let (len, ht) = text_extent(n, height * scale);
            let ext = (len + g.stroke_width, ht + g.stroke_width);
            let (s, c) = (angle.sin().abs(), angle.cos().abs());
            let bb = (ext.0 * c + ext.1 * s, ext.0 * s + ext.1 * c);
            if (bb.0 + 2.0 <= w as f32 && bb.1 + 2.0 <= h as f32) || scale < 0.3 {
                break bb;
            }
            scale *= 0.9;
        };
        let cx = rng.gen_range((bw / 2.0 + 1.0)..=(w as f32 - bw / 2.0 - 1.0).max(bw / 2.0 + 1.0));
        let cy = rng.gen_range((bh / 2.0 + 1.0)..=(h as f32 - bh / 2.0 - 1.0).max(bh / 2.0 + 1.0));
        let segments: Vec<Segment> = layout_text(&glyphs, height * scale, (cx, cy), angle);
        let colour = text_color(luma(gt.pixel(cy as usize, cx as usize)), &mut rng);

        for y in 0..h {
            for x in 0..w {
                let p = (x as f32 + 0.5, y as f32 + 0.5);
                let d = segments.iter().map(|s| s.distance(p)).fold(f32::INFINITY, f32::min);
                let alpha = (half - d + 0.5).clamp(0.0, 1.0);
                if alpha > 0.5 {
                    mask.set(y, x, 0, 1.0);
                    for (ch, col) in colour.iter().enumerate() {
                        let v = input.get(y, x, ch);
                        input.set(y, x, ch, v * (1.0 - alpha) + col * alpha);
                    }
                }
            }
        }
    }

    Ok(ImageTriplet {
        input,
        gt,
        mask,
        id: format!("syn_{:06}", spec.seed),
    })
}

/// `count` triplets with consecutive seeds starting at `seed`.
pub fn generate_corpus(seed: u64, count: usize, size: (usize, usize), n_texts: usize) -> Result<Vec<ImageTriplet>> {
    (0..count as u64)
        .map(|i| generate_triplet(&SceneSpec::seeded(seed + i, size, n_texts)))
        .collect()
}
