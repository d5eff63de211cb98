//! Effective-receptive-field maps.
//!
//! For each probe image the forward pass runs to a tapped feature map, the
//! channel sum at the map's center position is backpropagated to the input,
//! and the absolute input gradient (summed over color channels) is
//! accumulated. The average over images is max-normalized to [0, 1].

use crate::error::{Error, Result};
use crate::net::Model;
use crate::parallel;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::backward;
use crate::tensor::{mul, sum_all, Tensor};

/// Reported support threshold: a pixel counts as covered when its normalized
/// response exceeds this fraction of the maximum. Strictly-positive counting
/// is useless here because the kernel-generation pathway of the dynamic
/// convolution gives every input pixel a mathematically nonzero (if tiny)
/// influence.
pub const SUPPORT_THRESHOLD: f64 = 0.01;

/// Mean absolute input gradient of a tapped center activation, H x W,
/// max-normalized.
#[derive(Debug, Clone)]
pub struct ErfMap {
    /// Row-major H x W, in [0, 1] after normalization.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub num_images: usize,
    /// Center position used at the tapped map.
    pub center: (usize, usize),
    /// Peak of the raw (pre-normalization) mean |gradient|.
    pub max_raw: f64,
}

impl ErfMap {
    /// Fraction of pixels whose normalized value exceeds `threshold`.
    pub fn support_fraction(&self, threshold: f64) -> f64 {
        let n = self.values.iter().filter(|&&v| v > threshold).count();
        n as f64 / self.values.len() as f64
    }
}

/// Deterministic probe images: `count` tensors of shape `[1, 3, height, width]`
/// with uniform [0, 1) pixels, one SplitMix64 stream per image index, all
/// marked as requiring gradient.
pub fn seeded_images<E: Scalar>(
    seed: u64,
    count: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Tensor<E>>> {
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::stream(seed, i as u64);
            let data: Vec<E> = (0..3 * height * width)
                .map(|_| E::from_f64(rng.next_f64()))
                .collect();
            Ok(Tensor::from_vec([1, 3, height, width], data)?.requires_grad())
        })
        .collect()
}

fn single_image_map<E: Scalar>(
    model: &Model<E>,
    image: &Tensor<E>,
    tap: &str,
) -> Result<(Vec<f64>, (usize, usize))> {
    let feat = model.forward_tap(image, tap)?;
    let fs = feat.shape();
    let (hc, wc) = (fs.h() / 2, fs.w() / 2);
    let mut mask = vec![E::zero(); feat.numel()];
    for c in 0..fs.c() {
        mask[fs.at(0, c, hc, wc)] = E::one();
    }
    let mask = Tensor::from_vec(fs.0, mask)?;
    let loss = sum_all(&mul(&feat, &mask)?);
    backward(&loss)?;

    let grad = image.grad().ok_or_else(|| {
        Error::contract("probe image received no gradient; was it built with requires_grad?".into())
    })?;
    let s = image.shape();
    let (h, w) = (s.h(), s.w());
    let mut map = vec![0.0f64; h * w];
    for c in 0..3 {
        for i in 0..h * w {
            map[i] += grad[c * h * w + i].to_f64().abs();
        }
    }
    Ok((map, (hc, wc)))
}

/// Average the per-image |gradient| maps for `tap` over all probe images.
///
/// Every image must be `[1, 3, H, W]` at the model's bound resolution and
/// marked as requiring gradient. Images are processed in parallel but
/// accumulated strictly in index order.
pub fn erf_map<E: Scalar>(model: &Model<E>, images: &[Tensor<E>], tap: &str) -> Result<ErfMap> {
    if images.is_empty() {
        return Err(Error::contract("at least one probe image required".into()));
    }
    model.resolve_tap(tap)?;
    let s0 = images[0].shape();
    for img in images {
        if img.shape() != s0 || img.shape().n() != 1 {
            return Err(Error::shape(format!(
                "probe images must all be [1,3,H,W]; got {}",
                img.shape()
            )));
        }
    }
    let (h, w) = (s0.h(), s0.w());

    type ImageResult = Result<(Vec<f64>, (usize, usize))>;
    let mut per_image: Vec<ImageResult> = Vec::with_capacity(images.len());
    per_image.resize_with(images.len(), || Ok((Vec::new(), (0, 0))));
    let workers = parallel::worker_cap().min(images.len());
    if workers <= 1 {
        for (slot, img) in per_image.iter_mut().zip(images) {
            *slot = single_image_map(model, img, tap);
        }
    } else {
        let chunk = images.len().div_ceil(workers);
        std::thread::scope(|scope| {
            for (slots, imgs) in per_image.chunks_mut(chunk).zip(images.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, img) in slots.iter_mut().zip(imgs) {
                        *slot = single_image_map(model, img, tap);
                    }
                });
            }
        });
    }

    // Fixed accumulation order: image 0, 1, 2, ...
    let mut acc = vec![0.0f64; h * w];
    let mut center = (0, 0);
    for slot in per_image {
        let (map, c) = slot?;
        center = c;
        for (a, v) in acc.iter_mut().zip(map) {
            *a += v;
        }
    }
    let n = images.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    let max_raw = acc.iter().cloned().fold(0.0f64, f64::max);
    if max_raw > 0.0 {
        for a in acc.iter_mut() {
            *a /= max_raw;
        }
    }

    Ok(ErfMap {
        values: acc,
        height: h,
        width: w,
        num_images: images.len(),
        center,
        max_raw,
    })
}
