//! Feature-frame post-processing: stacking/subsampling and SpecAugment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, Scalar};

/// `time x dim` feature frames at a fixed frame period.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<T> {
    frames: Array<T>,
    pub frame_period_ms: u32,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(frames: Array<T>, frame_period_ms: u32) -> Result<Self> {
        if frames.rank() != 2 {
            return Err(Error::Dimension(format!("features must be [time, dim], got {:?}", frames.shape())));
        }
        if frame_period_ms == 0 {
            return Err(Error::Parameter("frame period must be positive".into()));
        }
        if !frames.is_finite() {
            return Err(Error::NonFinite("feature frames".into()));
        }
        Ok(Self { frames, frame_period_ms })
    }

    pub fn empty(dim: usize, frame_period_ms: u32) -> Self {
        Self { frames: Array::zeros(&[0, dim]), frame_period_ms }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames() == 0
    }

    pub fn frames(&self) -> &Array<T> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &[T] {
        self.frames.row(t)
    }

    pub fn into_frames(self) -> Array<T> {
        self.frames
    }
}

/// Concatenates each anchor frame with the `stack - 1` frames before it,
/// keeping every `stride`-th anchor. Only fully covered windows are emitted,
/// so output frame `k` covers input frames `k*stride - (stack-1) ..= k*stride`
/// for every `k` with `k*stride >= stack - 1`.
pub fn stack_frames<T: Scalar>(x: &FeatureSequence<T>, stack: usize, stride: usize) -> Result<FeatureSequence<T>> {
    if stack == 0 || stride == 0 {
        return Err(Error::Parameter(format!("stack {stack} and stride {stride} must be >= 1")));
    }
    let (n, d) = (x.num_frames(), x.dim());
    let first_k = (stack - 1).div_ceil(stride);
    let mut data = Vec::new();
    let mut count = 0;
    let mut k = first_k;
    while k * stride < n {
        let anchor = k * stride;
        for f in anchor + 1 - stack..=anchor {
            data.extend_from_slice(x.frame(f));
        }
        count += 1;
        k += 1;
    }
    let frames = Array::new(vec![count, stack * d], data)?;
    FeatureSequence::new(frames, x.frame_period_ms * stride as u32)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpecAugmentConfig {
    /// Maximum frequency-mask width `F`.
    pub freq_mask_param: usize,
    pub num_time_masks: usize,
    /// Maximum time-mask width, clamped to the sequence length when applied.
    pub time_mask_param: usize,
    pub mask_value: f64,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        Self { freq_mask_param: 27, num_time_masks: 10, time_mask_param: 40, mask_value: 0.0 }
    }
}

impl SpecAugmentConfig {
    pub fn disabled() -> Self {
        Self { freq_mask_param: 0, num_time_masks: 0, time_mask_param: 0, mask_value: 0.0 }
    }
}

/// Rectangles masked by one SpecAugment draw.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskLayout {
    /// `(start, width)` over the feature axis.
    pub freq: Option<(usize, usize)>,
    /// `(start, width)` over the time axis, one per mask.
    pub time: Vec<(usize, usize)>,
}

impl MaskLayout {
    pub fn is_masked(&self, t: usize, f: usize) -> bool {
        self.freq.is_some_and(|(s, w)| f >= s && f < s + w) || self.time.iter().any(|&(s, w)| t >= s && t < s + w)
    }
}

/// Draws a mask layout: one frequency band of width `U{0..F}` and
/// `num_time_masks` time bands of width `U{0..T_max}`, each at a uniform start.
pub fn draw_masks<R: Rng + ?Sized>(num_frames: usize, dim: usize, cfg: &SpecAugmentConfig, rng: &mut R) -> MaskLayout {
    let mut layout = MaskLayout::default();
    let f_max = cfg.freq_mask_param.min(dim);
    let w = rng.gen_range(0..=f_max);
    if w > 0 {
        layout.freq = Some((rng.gen_range(0..=dim - w), w));
    }
    let t_max = cfg.time_mask_param.min(num_frames);
    for _ in 0..cfg.num_time_masks {
        let w = rng.gen_range(0..=t_max);
        if w > 0 {
            layout.time.push((rng.gen_range(0..=num_frames - w), w));
        }
    }
    layout
}

pub fn apply_masks<T: Scalar>(x: &FeatureSequence<T>, layout: &MaskLayout, mask_value: T) -> FeatureSequence<T> {
    let mut frames = x.frames.clone();
    let d = x.dim();
    for (i, v) in frames.data_mut().iter_mut().enumerate() {
        if layout.is_masked(i / d, i % d) {
            *v = mask_value;
        }
    }
    FeatureSequence { frames, frame_period_ms: x.frame_period_ms }
}

/// Training-time masking; the input is not modified.
pub fn spec_augment<T: Scalar, R: Rng + ?Sized>(
    x: &FeatureSequence<T>,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> FeatureSequence<T> {
    let layout = draw_masks(x.num_frames(), x.dim(), cfg, rng);
    apply_masks(x, &layout, T::lit(cfg.mask_value))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn ramp(n: usize, d: usize) -> FeatureSequence<f64> {
        let data = (0..n * d).map(|i| i as f64 + 1.0).collect();
        FeatureSequence::new(Array::new(vec![n, d], data).unwrap(), 10).unwrap()
    }

    #[test]
    fn paper_configuration_twelve_frames() {
        let x = ramp(12, 128);
        let y = stack_frames(&x, 4, 3).unwrap();
        assert_eq!(y.num_frames(), 3);
        assert_eq!(y.dim(), 512);
        assert_eq!(y.frame_period_ms, 30);
        // anchors 3, 6, 9: first block of output frame 0 is input frame 0
        assert_eq!(&y.frame(0)[..128], x.frame(0));
        assert_eq!(&y.frame(0)[384..], x.frame(3));
        assert_eq!(&y.frame(2)[..128], x.frame(6));
        assert_eq!(&y.frame(2)[384..], x.frame(9));
    }

    #[test]
    fn unit_stack_is_identity() {
        let x = ramp(5, 3);
        assert_eq!(stack_frames(&x, 1, 1).unwrap(), x);
    }

    #[test]
    fn short_input_gives_empty_output() {
        let y = stack_frames(&ramp(3, 2), 4, 3).unwrap();
        assert!(y.is_empty());
        assert_eq!(y.dim(), 8);
    }

    #[test]
    fn zero_stack_rejected() {
        assert!(stack_frames(&ramp(3, 2), 0, 1).is_err());
        assert!(stack_frames(&ramp(3, 2), 1, 0).is_err());
    }

    #[test]
    fn disabled_augment_is_identity() {
        let x = ramp(20, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(spec_augment(&x, &SpecAugmentConfig::disabled(), &mut rng), x);
    }

    #[test]
    fn ten_time_masks_touch_only_mask_cells() {
        let x = ramp(100, 16);
        let cfg = SpecAugmentConfig { freq_mask_param: 0, num_time_masks: 10, time_mask_param: 5, mask_value: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = draw_masks(100, 16, &cfg, &mut rng);
        assert!(layout.time.len() <= 10);
        let y = apply_masks(&x, &layout, 0.0);
        for t in 0..100 {
            for f in 0..16 {
                let (a, b) = (x.frame(t)[f], y.frame(t)[f]);
                if layout.is_masked(t, f) {
                    assert_eq!(b, 0.0);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn same_seed_same_layout() {
        let cfg = SpecAugmentConfig::default();
        let a = draw_masks(60, 64, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = draw_masks(60, 64, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn stacking_shape_law(n in 0usize..40, d in 1usize..5, stack in 1usize..6, stride in 1usize..5) {
            let y = stack_frames(&ramp(n, d), stack, stride).unwrap();
            prop_assert_eq!(y.dim(), stack * d);
            let expected = (0..n).filter(|&a| a % stride == 0 && a + 1 >= stack).count();
            prop_assert_eq!(y.num_frames(), expected);
        }

        #[test]
        fn masks_within_bounds(n in 1usize..80, d in 1usize..40, seed in 0u64..1000) {
            let cfg = SpecAugmentConfig { freq_mask_param: 27, num_time_masks: 10, time_mask_param: 40, mask_value: 0.0 };
            let layout = draw_masks(n, d, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            if let Some((s, w)) = layout.freq {
                prop_assert!(w <= 27.min(d) && s + w <= d);
            }
            for &(s, w) in &layout.time {
                prop_assert!(w <= 40.min(n) && s + w <= n);
            }
        }
    }
}
