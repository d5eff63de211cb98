//! Brute-force reimplementation of the input-dependent convolution.
//!
//! Everything is recomputed with explicit loops against the raw parameter
//! buffers: pooling windows, the two pointwise projections as matrix
//! products, a plain exp/sum softmax, the bank blend, and the per-sample
//! convolution. No code is shared with the production path; agreement within
//! 1e-6 is the ground-truth check for the mixer.

use crate::error::Result;
use crate::mixer::{idconv_forward, IDConvParams};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::nn::Conv2dParams;

/// Naive-loop recomputation of the IDConv forward pass on tiny inputs.
pub fn idconv_oracle<E: Scalar>(x: &Tensor<E>, p: &IDConvParams<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = x.shape().0;
    let k = p.kernel_size;
    let g = p.groups;
    let cr = p.squeeze_conv.out_channels;
    let xd: Vec<f64> = x.data().iter().map(|v| v.to_f64()).collect();

    // adaptive mean pooling to k x k
    let mut pooled = vec![0.0f64; n * c * k * k];
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..k {
                let h0 = oh * h / k;
                let h1 = ((oh + 1) * h).div_ceil(k);
                for ow in 0..k {
                    let w0 = ow * w / k;
                    let w1 = ((ow + 1) * w).div_ceil(k);
                    let mut acc = 0.0;
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            acc += xd[((ni * c + ci) * h + ih) * w + iw];
                        }
                    }
                    pooled[((ni * c + ci) * k + oh) * k + ow] =
                        acc / ((h1 - h0) * (w1 - w0)) as f64;
                }
            }
        }
    }

    // squeeze and expand 1x1 convolutions as matrix products per position
    let sw: Vec<f64> = p.squeeze_conv.weight.data().iter().map(|v| v.to_f64()).collect();
    let sb: Vec<f64> = p
        .squeeze_conv
        .bias
        .as_ref()
        .map(|b| b.data().iter().map(|v| v.to_f64()).collect())
        .unwrap_or_else(|| vec![0.0; cr]);
    let ew: Vec<f64> = p.expand_conv.weight.data().iter().map(|v| v.to_f64()).collect();
    let eb: Vec<f64> = p
        .expand_conv
        .bias
        .as_ref()
        .map(|b| b.data().iter().map(|v| v.to_f64()).collect())
        .unwrap_or_else(|| vec![0.0; g * c]);

    let kk = k * k;
    let mut squeezed = vec![0.0f64; n * cr * kk];
    for ni in 0..n {
        for o in 0..cr {
            for pos in 0..kk {
                let mut acc = sb[o];
                for i in 0..c {
                    acc += sw[o * c + i] * pooled[(ni * c + i) * kk + pos];
                }
                squeezed[(ni * cr + o) * kk + pos] = acc;
            }
        }
    }
    let mut expanded = vec![0.0f64; n * g * c * kk];
    for ni in 0..n {
        for o in 0..g * c {
            for pos in 0..kk {
                let mut acc = eb[o];
                for i in 0..cr {
                    acc += ew[o * cr + i] * squeezed[(ni * cr + i) * kk + pos];
                }
                expanded[(ni * g * c + o) * kk + pos] = acc;
            }
        }
    }

    // softmax over the group extent; plain exp/sum
    let mut attn = vec![0.0f64; n * g * c * kk];
    for ni in 0..n {
        for ci in 0..c {
            for pos in 0..kk {
                let mut denom = 0.0;
                for gi in 0..g {
                    denom += expanded[((ni * g + gi) * c + ci) * kk + pos].exp();
                }
                for gi in 0..g {
                    let idx = ((ni * g + gi) * c + ci) * kk + pos;
                    attn[idx] = expanded[idx].exp() / denom;
                }
            }
        }
    }

    // blend the static banks
    let banks: Vec<f64> = p.static_kernels.data().iter().map(|v| v.to_f64()).collect();
    let mut kernels = vec![0.0f64; n * c * kk];
    for ni in 0..n {
        for gi in 0..g {
            for ci in 0..c {
                for pos in 0..kk {
                    kernels[(ni * c + ci) * kk + pos] +=
                        attn[((ni * g + gi) * c + ci) * kk + pos] * banks[(gi * c + ci) * kk + pos];
                }
            }
        }
    }

    // per-sample depthwise convolution, zero padding (k-1)/2
    let pad = (k - 1) / 2;
    let mut out = vec![E::zero(); n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0f64;
                    for ki in 0..k {
                        for kj in 0..k {
                            let ih = oh as isize + ki as isize - pad as isize;
                            let iw = ow as isize + kj as isize - pad as isize;
                            if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                continue;
                            }
                            acc += kernels[(ni * c + ci) * kk + ki * k + kj]
                                * xd[((ni * c + ci) * h + ih as usize) * w + iw as usize];
                        }
                    }
                    out[((ni * c + ci) * h + oh) * w + ow] = E::from_f64(acc);
                }
            }
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Result of comparing the mixer's IDConv against the oracle on random
/// instances.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub instances: usize,
    pub max_abs_diff: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.max_abs_diff < self.tolerance
    }
}

/// Run `instances` random micro IDConv instances (extents <= 8) and report
/// the worst absolute disagreement.
pub fn idconv_oracle_suite(seed: u64, instances: usize) -> Result<OracleReport> {
    let mut rng = SplitMix64::new(seed);
    let mut max_abs = 0.0f64;
    for _ in 0..instances {
        let n = 1 + (rng.next_u64() % 2) as usize;
        let c = [2usize, 4, 6, 8][(rng.next_u64() % 4) as usize];
        let g = 1 + (rng.next_u64() % 3) as usize;
        let k = [1usize, 3, 5][(rng.next_u64() % 3) as usize];
        let r = [1usize, 2, 4][(rng.next_u64() % 3) as usize];
        let h = 2 + (rng.next_u64() % 7) as usize;
        let w = 2 + (rng.next_u64() % 7) as usize;
        let cr = (c / r).max(1);

        let mut t = |extents: [usize; 4], spread: f64| -> Result<Tensor<f64>> {
            let numel: usize = extents.iter().product();
            Tensor::from_vec(extents, (0..numel).map(|_| rng.uniform(-spread, spread)).collect())
        };
        let x = t([n, c, h, w], 1.0)?;
        let squeeze = Conv2dParams::new(t([cr, c, 1, 1], 0.8)?, Some(t([1, cr, 1, 1], 0.4)?), 1, 0, 1)?;
        let expand =
            Conv2dParams::new(t([g * c, cr, 1, 1], 0.8)?, Some(t([1, g * c, 1, 1], 0.4)?), 1, 0, 1)?;
        let banks = t([g, c, k, k], 0.8)?;
        let p = IDConvParams::new(c, k, g, r, squeeze, expand, banks)?;

        let fast = idconv_forward(&x, &p)?;
        let slow = idconv_oracle(&x, &p)?;
        for (a, b) in fast.data().iter().zip(slow.data()) {
            max_abs = max_abs.max((a - b).abs());
        }
    }
    Ok(OracleReport { instances, max_abs_diff: max_abs, tolerance: 1e-6 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_a_handful() {
        let report = idconv_oracle_suite(42, 5).unwrap();
        assert!(report.passed(), "max abs diff {}", report.max_abs_diff);
    }
}
