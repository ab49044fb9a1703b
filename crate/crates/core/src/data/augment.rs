use rand::Rng;
use serde::{Deserialize, Serialize};

/// Zero padding on each side before the random crop.
pub const CROP_PAD: usize = 4;
pub const FLIP_PROB: f64 = 0.5;
pub const JITTER: f64 = 0.4;
pub const GRAYSCALE_PROB: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub crop: bool,
    pub flip: bool,
    pub color_jitter: bool,
    pub grayscale: bool,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::full()
    }
}

impl AugmentPolicy {
    pub fn full() -> Self {
        AugmentPolicy {
            crop: true,
            flip: true,
            color_jitter: true,
            grayscale: true,
        }
    }

    pub fn none() -> Self {
        AugmentPolicy {
            crop: false,
            flip: false,
            color_jitter: false,
            grayscale: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::none()
    }
}

/// What one augmentation call did, for replay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentRecord {
    /// Top-left corner of the crop window in the padded canvas.
    pub crop_offset: Option<(usize, usize)>,
    pub flipped: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub grayscale: bool,
}

/// Augments a `[3, side, side]` image. Output is clamped to [0, 1].
pub fn augment<R: Rng + ?Sized>(
    image: &[f64],
    side: usize,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> (Vec<f64>, AugmentRecord) {
    let mut rec = AugmentRecord {
        crop_offset: None,
        flipped: false,
        brightness: 1.0,
        contrast: 1.0,
        grayscale: false,
    };
    let mut img = image.to_vec();
    if policy.crop {
        let dy = rng.random_range(0..=2 * CROP_PAD);
        let dx = rng.random_range(0..=2 * CROP_PAD);
        img = crop_padded(&img, side, dy, dx);
        rec.crop_offset = Some((dy, dx));
    }
    if policy.flip && rng.random_bool(FLIP_PROB) {
        hflip(&mut img, side);
        rec.flipped = true;
    }
    if policy.color_jitter {
        rec.brightness = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
        rec.contrast = rng.random_range(1.0 - JITTER..=1.0 + JITTER);
        let plane = side * side;
        for c in 0..3 {
            let ch = &mut img[c * plane..(c + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            for v in ch.iter_mut() {
                *v = ((*v - mean) * rec.contrast + mean) * rec.brightness;
            }
        }
    }
    if policy.grayscale && rng.random_bool(GRAYSCALE_PROB) {
        to_grayscale(&mut img, side);
        rec.grayscale = true;
    }
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    (img, rec)
}

/// Crop of the zero-padded canvas at offset `(dy, dx)`.
pub fn crop_padded(image: &[f64], side: usize, dy: usize, dx: usize) -> Vec<f64> {
    let plane = side * side;
    let mut out = vec![0.0; 3 * plane];
    for c in 0..3 {
        for y in 0..side {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if sx >= 0 && sx < side as isize {
                    out[c * plane + y * side + x] =
                        image[c * plane + sy as usize * side + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(image: &mut [f64], side: usize) {
    for row in image.chunks_mut(side) {
        row.reverse();
    }
}

pub fn to_grayscale(image: &mut [f64], side: usize) {
    let plane = side * side;
    for i in 0..plane {
        let y = 0.299 * image[i] + 0.587 * image[plane + i] + 0.114 * image[2 * plane + i];
        for c in 0..3 {
            image[c * plane + i] = y;
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn empty_policy_is_identity() {
        let img = image(1);
        let (out, _) = augment(
            &img,
            8,
            &AugmentPolicy::none(),
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = image(2);
        let mut f = img.clone();
        hflip(&mut f, 8);
        assert_ne!(f, img);
        hflip(&mut f, 8);
        assert_eq!(f, img);
    }

    #[test]
    fn same_rng_state_same_output() {
        let img = image(3);
        let a = augment(
            &img,
            8,
            &AugmentPolicy::full(),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = augment(
            &img,
            8,
            &AugmentPolicy::full(),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(a, b);
    }
}
