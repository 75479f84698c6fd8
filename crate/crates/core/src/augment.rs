//! Single-channel augmentation pipelines, deterministic under an explicit RNG.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::CrossLineSlice;

/// RNG stream for one sample: identical `(seed, stream)` always yields the same draws,
/// independent of which worker consumes it.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationMode {
    Contrastive,
    Finetune,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub crop_size: usize,
    /// Fraction of the source area kept by the random crop, `(lo, hi)`.
    pub scale_range: (f64, f64),
    pub flip_probability: f64,
    /// `(brightness, contrast)`.
    pub jitter_strength: (f64, f64),
    /// `(mean, std)`.
    pub normalization: (f64, f64),
    pub mode: AugmentationMode,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_size: 224,
            scale_range: (0.2, 1.0),
            flip_probability: 0.5,
            jitter_strength: (0.4, 0.4),
            normalization: (0.0, 1.0),
            mode: AugmentationMode::Contrastive,
        }
    }
}

impl AugmentationPolicy {
    pub fn with_mode(&self, mode: AugmentationMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let (b, c) = self.jitter_strength;
        let (_, std) = self.normalization;
        if self.crop_size < 1 {
            return Err(Error::Config("crop_size must be >= 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("flip_probability must be in [0, 1]".into()));
        }
        if !(b >= 0.0 && c >= 0.0 && b.is_finite() && c.is_finite()) {
            return Err(Error::Config("jitter strengths must be finite and >= 0".into()));
        }
        if !(std > 0.0 && std.is_finite()) || !self.normalization.0.is_finite() {
            return Err(Error::Config("normalization std must be > 0".into()));
        }
        Ok(())
    }

    /// Run the pipeline selected by `mode` on one image.
    pub fn apply<T: Scalar, R: Rng>(&self, img: ArrayView2<'_, T>, rng: &mut R) -> Result<Array2<T>> {
        let (mean, std) = self.normalization;
        match self.mode {
            AugmentationMode::Contrastive => {
                let cropped = random_resized_crop(img, self.crop_size, self.scale_range, rng)?;
                let flipped = horizontal_flip(cropped, self.flip_probability, rng);
                let jittered = color_jitter(flipped.view(), self.jitter_strength.0, self.jitter_strength.1, rng)?;
                normalize(jittered.view(), mean, std)
            }
            AugmentationMode::Finetune | AugmentationMode::Eval => normalize(img, mean, std),
        }
    }
}

/// Two independent contrastive augmentations of one source slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair<T> {
    pub view_a: Array2<T>,
    pub view_b: Array2<T>,
    pub source_slice_index: usize,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear<T: Scalar>(img: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, scale: f64, n: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = taps(y, sy, h);
        let (x0, x1, fx) = cols[x];
        let top = img[[y0, x0]].as_f64() * (1.0 - fx) + img[[y0, x1]].as_f64() * fx;
        let bot = img[[y1, x0]].as_f64() * (1.0 - fx) + img[[y1, x1]].as_f64() * fx;
        T::lit(top * (1.0 - fy) + bot * fy)
    })
}

/// Crop a random sub-rectangle of `[lo, hi]` of the area (aspect ratio in `[3/4, 4/3]`)
/// and resize it to `out_size x out_size`.
pub fn random_resized_crop<T: Scalar, R: Rng>(
    img: ArrayView2<'_, T>,
    out_size: usize,
    scale_range: (f64, f64),
    rng: &mut R,
) -> Result<Array2<T>> {
    let (h, w) = img.dim();
    if h < 2 || w < 2 {
        return Err(Error::Data(format!("image {h}x{w} is smaller than 2x2")));
    }
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
    }
    if out_size == 0 {
        return Err(Error::Config("out_size must be >= 1".into()));
    }
    let area = (h * w) as f64;
    let (log_r0, log_r1) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    let mut window = None;
    for _ in 0..10 {
        let target = area * (lo + (hi - lo) * rng.random::<f64>());
        let ratio = (log_r0 + (log_r1 - log_r0) * rng.random::<f64>()).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            window = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = window.unwrap_or_else(|| {
        // centre crop clamped to the allowed aspect range
        let in_ratio = w as f64 / h as f64;
        let (ch, cw) = if in_ratio < 0.75 {
            (((w as f64) / 0.75).round() as usize, w)
        } else if in_ratio > 4.0 / 3.0 {
            (h, ((h as f64) * 4.0 / 3.0).round() as usize)
        } else {
            (h, w)
        };
        ((h - ch) / 2, (w - cw) / 2, ch, cw)
    });
    let crop = img.slice(ndarray::s![top..top + ch, left..left + cw]);
    Ok(resize_bilinear(crop, out_size, out_size))
}

/// Reverse the W axis with the given probability. Always consumes one draw.
pub fn horizontal_flip<T: Scalar, R: Rng>(mut img: Array2<T>, probability: f64, rng: &mut R) -> Array2<T> {
    let u: f64 = rng.random();
    if u < probability {
        img.invert_axis(Axis(1));
        img = img.as_standard_layout().into_owned();
    }
    img
}

/// Brightness/contrast jitter for grayscale: scale about the image mean by a factor in
/// `[1 - contrast, 1 + contrast]`, then shift by `[-brightness, brightness]` times the dynamic range.
pub fn color_jitter<T: Scalar, R: Rng>(
    img: ArrayView2<'_, T>,
    brightness: f64,
    contrast: f64,
    rng: &mut R,
) -> Result<Array2<T>> {
    if !(brightness >= 0.0 && contrast >= 0.0 && brightness.is_finite() && contrast.is_finite()) {
        return Err(Error::Config("jitter strengths must be finite and >= 0".into()));
    }
    let factor = 1.0 - contrast + 2.0 * contrast * rng.random::<f64>();
    let offset = -brightness + 2.0 * brightness * rng.random::<f64>();
    if brightness == 0.0 && contrast == 0.0 {
        return Ok(img.to_owned());
    }
    let n = img.len() as f64;
    let mean = img.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let (lo, hi) = img
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v.as_f64()), b.max(v.as_f64())));
    let shift = offset * (hi - lo);
    Ok(img.mapv(|v| T::lit((v.as_f64() - mean) * factor + mean + shift)))
}

pub fn normalize<T: Scalar>(img: ArrayView2<'_, T>, mean: f64, std: f64) -> Result<Array2<T>> {
    if !(std > 0.0) {
        return Err(Error::Config(format!("normalization std must be > 0, got {std}")));
    }
    let (m, s) = (T::lit(mean), T::lit(std));
    Ok(img.mapv(|v| (v - m) / s))
}

pub fn denormalize<T: Scalar>(img: ArrayView2<'_, T>, mean: f64, std: f64) -> Result<Array2<T>> {
    if !(std > 0.0) {
        return Err(Error::Config(format!("normalization std must be > 0, got {std}")));
    }
    let (m, s) = (T::lit(mean), T::lit(std));
    Ok(img.mapv(|v| v * s + m))
}

/// Apply the contrastive pipeline twice with independent draws from `rng`.
pub fn make_view_pair<T: Scalar, R: Rng>(
    slice: &CrossLineSlice<T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Result<ViewPair<T>> {
    if policy.mode != AugmentationMode::Contrastive {
        return Err(Error::Config(format!(
            "view pairs need a contrastive policy, got {:?}",
            policy.mode
        )));
    }
    let view_a = policy.apply(slice.image.view(), rng)?;
    let view_b = policy.apply(slice.image.view(), rng)?;
    Ok(ViewPair {
        view_a,
        view_b,
        source_slice_index: slice.crossline_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ramp(h: usize, w: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(y, x)| (y * w + x) as f64 * 0.37 - 3.0)
    }

    #[test]
    fn full_scale_crop_of_square_is_identity() {
        let img = ramp(16, 16);
        let mut rng = derive_rng(1, 0);
        let out = random_resized_crop(img.view(), 16, (1.0, 1.0), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_output_shape() {
        let img = ramp(40, 30);
        let mut rng = derive_rng(2, 0);
        for _ in 0..20 {
            let out = random_resized_crop(img.view(), 224, (0.2, 1.0), &mut rng).unwrap();
            assert_eq!(out.dim(), (224, 224));
        }
    }

    #[test]
    fn crop_of_constant_is_constant() {
        let img = Array2::from_elem((9, 13), 2.5f32);
        let mut rng = derive_rng(3, 0);
        let out = random_resized_crop(img.view(), 7, (0.2, 1.0), &mut rng).unwrap();
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn crop_rejects_tiny_images() {
        let img = Array2::<f32>::zeros((1, 5));
        let mut rng = derive_rng(0, 0);
        assert!(matches!(random_resized_crop(img.view(), 4, (0.5, 1.0), &mut rng), Err(Error::Data(_))));
    }

    #[test]
    fn flip_examples() {
        let mut rng = derive_rng(0, 0);
        let img = array![[1.0f32, 2.0], [3.0, 4.0]];
        assert_eq!(horizontal_flip(img.clone(), 0.0, &mut rng), img);
        let once = horizontal_flip(img.clone(), 1.0, &mut rng);
        assert_eq!(once, array![[2.0f32, 1.0], [4.0, 3.0]]);
        assert_eq!(horizontal_flip(once, 1.0, &mut rng), img);
    }

    #[test]
    fn jitter_identity_and_contrast_scaling() {
        let img = ramp(5, 6);
        let mut rng = derive_rng(4, 0);
        assert_eq!(color_jitter(img.view(), 0.0, 0.0, &mut rng).unwrap(), img);

        // zero-mean image: std scales by the drawn contrast factor
        let centred = &img - img.mean().unwrap();
        let std0 = centred.std(0.0);
        let mut a = derive_rng(5, 0);
        let mut b = derive_rng(5, 0);
        let factor = 1.0 - 0.5 + 2.0 * 0.5 * a.random::<f64>();
        let out = color_jitter(centred.view(), 0.0, 0.5, &mut b).unwrap();
        assert!((out.std(0.0) - factor * std0).abs() < 1e-12);
    }

    #[test]
    fn jitter_then_restandardize() {
        let img = ramp(8, 8);
        let mut rng = derive_rng(6, 0);
        let j = color_jitter(img.view(), 0.3, 0.3, &mut rng).unwrap();
        let n = normalize(j.view(), j.mean().unwrap(), j.std(0.0)).unwrap();
        assert!(n.mean().unwrap().abs() < 1e-12);
        assert!((n.std(0.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let img = Array2::from_elem((3, 3), 4.0f64);
        assert!(normalize(img.view(), 4.0, 2.0).unwrap().iter().all(|&v| v == 0.0));
        let r = ramp(3, 4);
        assert_eq!(normalize(r.view(), 0.0, 1.0).unwrap(), r);
        let back = normalize(denormalize(r.view(), 1.5, 0.3).unwrap().view(), 1.5, 0.3).unwrap();
        assert!(back.iter().zip(r.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(matches!(normalize(r.view(), 0.0, 0.0), Err(Error::Config(_))));
    }

    fn identity_policy(size: usize) -> AugmentationPolicy {
        AugmentationPolicy {
            crop_size: size,
            scale_range: (1.0, 1.0),
            flip_probability: 0.0,
            jitter_strength: (0.0, 0.0),
            normalization: (0.0, 1.0),
            mode: AugmentationMode::Contrastive,
        }
    }

    #[test]
    fn identity_view_pair() {
        let slice = CrossLineSlice::new(ramp(12, 12), 5, None).unwrap();
        let mut rng = derive_rng(7, 0);
        let pair = make_view_pair(&slice, &identity_policy(12), &mut rng).unwrap();
        assert_eq!(pair.view_a, slice.image);
        assert_eq!(pair.view_b, slice.image);
        assert_eq!(pair.source_slice_index, 5);
    }

    #[test]
    fn view_pair_is_seed_deterministic_and_mode_checked() {
        let slice = CrossLineSlice::new(ramp(20, 24), 2, None).unwrap();
        let policy = AugmentationPolicy {
            crop_size: 10,
            ..Default::default()
        };
        let a = make_view_pair(&slice, &policy, &mut derive_rng(9, 3)).unwrap();
        let b = make_view_pair(&slice, &policy, &mut derive_rng(9, 3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.view_a, a.view_b);
        let eval = policy.with_mode(AugmentationMode::Eval);
        assert!(matches!(make_view_pair(&slice, &eval, &mut derive_rng(9, 3)), Err(Error::Config(_))));
    }

    #[test]
    fn non_contrastive_modes_only_normalize() {
        let img = ramp(6, 9);
        let policy = AugmentationPolicy {
            normalization: (1.0, 2.0),
            ..Default::default()
        };
        for mode in [AugmentationMode::Finetune, AugmentationMode::Eval] {
            let out = policy.with_mode(mode).apply(img.view(), &mut derive_rng(0, 0)).unwrap();
            assert_eq!(out, normalize(img.view(), 1.0, 2.0).unwrap());
        }
    }
}
