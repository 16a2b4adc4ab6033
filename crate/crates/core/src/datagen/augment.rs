use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ImageTriplet;
use crate::image::Image;

/// A paired geometric transform: optional horizontal flip followed by a
/// rotation about the image centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub flip: bool,
    pub angle_deg: f32,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        flip: false,
        angle_deg: 0.0,
    };

    /// Flip with probability 0.5; rotate with probability 0.5 by an angle
    /// uniform in `[-10, 10]` degrees.
    pub fn sample(seed: u64) -> Transform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.gen_bool(0.5);
        let rotate = rng.gen_bool(0.5);
        let angle = rng.gen_range(-10.0f32..=10.0);
        Transform {
            flip,
            angle_deg: if rotate { angle } else { 0.0 },
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.angle_deg == 0.0
    }
}

pub fn augment(t: &ImageTriplet, seed: u64) -> ImageTriplet {
    augment_with(t, Transform::sample(seed))
}

/// Apply one transform to all three planes. The mask is re-binarized at 0.5
/// after interpolation.
pub fn augment_with(t: &ImageTriplet, tf: Transform) -> ImageTriplet {
    let apply = |im: &Image| {
        let im = if tf.flip { im.flip_horizontal() } else { im.clone() };
        if tf.angle_deg == 0.0 {
            im
        } else {
            rotate_reflect(&im, tf.angle_deg)
        }
    };
    let mut mask = apply(&t.mask);
    for v in mask.data_mut() {
        *v = if *v >= 0.5 { 1.0 } else { 0.0 };
    }
    ImageTriplet {
        input: apply(&t.input),
        gt: apply(&t.gt),
        mask,
        id: t.id.clone(),
    }
}

fn reflect(v: f32, n: usize) -> f32 {
    let max = (n - 1) as f32;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let m = v.rem_euclid(period);
    if m > max {
        period - m
    } else {
        m
    }
}

/// Bilinear rotation by `deg` about the centre with reflect padding.
fn rotate_reflect(im: &Image, deg: f32) -> Image {
    let (h, w, c) = im.dims();
    let (s, co) = deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let mut out = Image::new(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let sx = reflect(co * dx + s * dy + cx, w);
            let sy = reflect(-s * dx + co * dy + cy, h);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            for ch in 0..c {
                let top = im.get(y0, x0, ch) * (1.0 - fx) + im.get(y0, x1, ch) * fx;
                let bot = im.get(y1, x0, ch) * (1.0 - fx) + im.get(y1, x1, ch) * fx;
                out.set(y, x, ch, top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_triplet, SceneSpec};

    fn triplet(seed: u64) -> ImageTriplet {
        generate_triplet(&SceneSpec::seeded(seed, (64, 64), 2)).unwrap()
    }

    #[test]
    fn identity_seed_leaves_triplet_untouched() {
        let seed = (0..100).find(|&s| Transform::sample(s).is_identity()).unwrap();
        let t = triplet(1);
        assert_eq!(augment(&t, seed), t);
    }

    #[test]
    fn flip_reverses_columns_and_is_an_involution() {
        let t = triplet(2);
        let flip = Transform {
            flip: true,
            angle_deg: 0.0,
        };
        let f = augment_with(&t, flip);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(f.mask.get(y, x, 0), t.mask.get(y, 63 - x, 0));
            }
        }
        f.validate().unwrap();
        assert_eq!(augment_with(&f, flip), t);
    }

    #[test]
    fn rotation_keeps_mask_binary_and_area() {
        let tf = Transform {
            flip: false,
            angle_deg: 10.0,
        };
        for seed in 0..10 {
            let t = triplet(seed);
            let r = augment_with(&t, tf);
            assert!(r.mask.is_binary());
            let (a, b) = (t.mask.count_nonzero() as f64, r.mask.count_nonzero() as f64);
            assert!((b - a).abs() <= 0.15 * a, "seed {seed}: {a} -> {b}");
        }
    }

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        assert_eq!(reflect(-1.0, 5), 1.0);
        assert_eq!(reflect(5.0, 5), 3.0);
        assert_eq!(reflect(2.5, 5), 2.5);
    }
}
