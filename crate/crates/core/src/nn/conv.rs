//! Grouped 2-D cross-correlation and the per-sample depthwise variant.
//!
//! Convolution follows the deep-learning convention: no kernel flip. The
//! inner loops run over the output width so both the accumulator and the
//! input row are contiguous; each output element has one fixed reduction
//! order (input channel, then kernel row, then kernel column).

use crate::error::{Error, Result};
use crate::parallel::for_each_slab;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Parameters of a grouped 2-D convolution.
pub struct Conv2dParams<E: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    /// `[out_channels, in_channels/groups, kH, kW]`
    pub weight: Tensor<E>,
    /// Per-output-channel bias, stored `[1, out_channels, 1, 1]`.
    pub bias: Option<Tensor<E>>,
}

impl<E: Scalar> Conv2dParams<E> {
    pub fn new(
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let ws = weight.shape();
        let [out_channels, cin_g, kernel_h, kernel_w] = ws.0;
        if groups == 0 || stride == 0 {
            return Err(Error::contract("stride and groups must be >= 1".into()));
        }
        if out_channels % groups != 0 {
            return Err(Error::shape(format!(
                "out_channels {out_channels} not divisible by groups {groups}"
            )));
        }
        let in_channels = cin_g * groups;
        if let Some(b) = &bias {
            if b.shape().0 != [1, out_channels, 1, 1] {
                return Err(Error::shape(format!(
                    "bias shape {} does not match out_channels {out_channels}",
                    b.shape()
                )));
            }
        }
        Ok(Conv2dParams {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            groups,
            weight,
            bias,
        })
    }

    /// Depthwise convolution: groups == in_channels == out_channels.
    pub fn depthwise(
        weight: Tensor<E>,
        bias: Option<Tensor<E>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let channels = weight.shape().0[0];
        if weight.shape().0[1] != 1 {
            return Err(Error::shape(format!(
                "depthwise weight must be [C,1,kH,kW], got {}",
                weight.shape()
            )));
        }
        Self::new(weight, bias, stride, padding, channels)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels
    }

    /// Number of learnable elements (weight plus bias when present).
    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Valid output range for one kernel offset: all `o` with
/// `0 <= o*stride + k_off - pad < extent_in`.
#[inline]
fn valid_range(
    extent_in: usize,
    extent_out: usize,
    k_off: usize,
    pad: usize,
    stride: usize,
) -> (usize, usize) {
    let s = stride as i64;
    let off = k_off as i64 - pad as i64;
    let lo = (-off).div_euclid(s) + i64::from((-off).rem_euclid(s) != 0);
    let lo = lo.max(0);
    let hi = ((extent_in as i64 - 1 - off).div_euclid(s) + 1).min(extent_out as i64);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let numer = input as i64 + 2 * padding as i64 - kernel as i64;
    if numer < 0 {
        return Err(Error::shape(format!(
            "kernel {kernel} with padding {padding} exceeds input extent {input}"
        )));
    }
    let out = numer as usize / stride + 1;
    Ok(out)
}

/// Grouped 2-D cross-correlation plus bias.
pub fn conv2d<E: Scalar>(x: &Tensor<E>, p: &Conv2dParams<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let [n, cin, h, w] = xs.0;
    if cin != p.in_channels {
        return Err(Error::shape(format!(
            "input has {cin} channels, conv expects {}",
            p.in_channels
        )));
    }
    let ho = conv_out_extent(h, p.kernel_h, p.stride, p.padding)?;
    let wo = conv_out_extent(w, p.kernel_w, p.stride, p.padding)?;
    let (cout, groups) = (p.out_channels, p.groups);
    let (cin_g, cout_g) = (cin / groups, cout / groups);
    let (kh, kw, stride, pad) = (p.kernel_h, p.kernel_w, p.stride, p.padding);

    let mut out = vec![E::zero(); n * cout * ho * wo];
    let (xd, wd) = (x.data(), p.weight.data());
    let bias_data = p.bias.as_ref().map(|b| b.data());

    for_each_slab(&mut out, ho * wo, |slab, acc| {
        let (ni, oc) = (slab / cout, slab % cout);
        let g = oc / cout_g;
        for icg in 0..cin_g {
            let ic = g * cin_g + icg;
            let x_chan = &xd[xs.at(ni, ic, 0, 0)..xs.at(ni, ic, 0, 0) + h * w];
            for ki in 0..kh {
                let (oh_lo, oh_hi) = valid_range(h, ho, ki, pad, stride);
                for kj in 0..kw {
                    let wv = wd[((oc * cin_g + icg) * kh + ki) * kw + kj];
                    if wv == E::zero() {
                        continue;
                    }
                    let (ow_lo, ow_hi) = valid_range(w, wo, kj, pad, stride);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * stride + ki - pad;
                        let x_row = &x_chan[ih * w..(ih + 1) * w];
                        let acc_row = &mut acc[oh * wo..oh * wo + wo];
                        let col0 = ow_lo * stride + kj - pad;
                        if stride == 1 {
                            for (a, &xv) in acc_row[ow_lo..ow_hi]
                                .iter_mut()
                                .zip(&x_row[col0..col0 + (ow_hi - ow_lo)])
                            {
                                *a = *a + wv * xv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                acc_row[ow] = acc_row[ow] + wv * x_row[ow * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bd) = bias_data {
            let bv = bd[oc];
            for a in acc.iter_mut() {
                *a = *a + bv;
            }
        }
    });

    let out_shape = Shape::new([n, cout, ho, wo])?;
    let (xh, wh) = (x.clone(), p.weight.clone());
    let mut inputs = vec![x.clone(), p.weight.clone()];
    if let Some(b) = &p.bias {
        inputs.push(b.clone());
    }
    let has_bias = p.bias.is_some();

    Ok(Tensor::from_op(
        out_shape,
        out,
        inputs,
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let xs = xh.shape();
            let [n, cin, h, w] = xs.0;
            let (cin_g, cout_g) = (cin / groups, cout / groups);
            let wd = wh.data();
            let xd = xh.data();

            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![E::zero(); xh.numel()];
                for ni in 0..n {
                    for oc in 0..cout {
                        let grp = oc / cout_g;
                        let g_chan = &g[((ni * cout + oc) * ho) * wo..((ni * cout + oc) * ho + ho) * wo];
                        for icg in 0..cin_g {
                            let ic = grp * cin_g + icg;
                            let dx_chan = &mut dx[xs.at(ni, ic, 0, 0)..xs.at(ni, ic, 0, 0) + h * w];
                            for ki in 0..kh {
                                let (oh_lo, oh_hi) = valid_range(h, ho, ki, pad, stride);
                                for kj in 0..kw {
                                    let wv = wd[((oc * cin_g + icg) * kh + ki) * kw + kj];
                                    if wv == E::zero() {
                                        continue;
                                    }
                                    let (ow_lo, ow_hi) = valid_range(w, wo, kj, pad, stride);
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh * stride + ki - pad;
                                        for ow in ow_lo..ow_hi {
                                            let iw = ow * stride + kj - pad;
                                            dx_chan[ih * w + iw] =
                                                dx_chan[ih * w + iw] + wv * g_chan[oh * wo + ow];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                dx
            });

            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![E::zero(); wh.numel()];
                for oc in 0..cout {
                    let grp = oc / cout_g;
                    for icg in 0..cin_g {
                        let ic = grp * cin_g + icg;
                        for ki in 0..kh {
                            let (oh_lo, oh_hi) = valid_range(h, ho, ki, pad, stride);
                            for kj in 0..kw {
                                let (ow_lo, ow_hi) = valid_range(w, wo, kj, pad, stride);
                                let mut acc = E::zero();
                                for ni in 0..n {
                                    let g_chan = &g[((ni * cout + oc) * ho) * wo
                                        ..((ni * cout + oc) * ho + ho) * wo];
                                    let x_chan =
                                        &xd[xs.at(ni, ic, 0, 0)..xs.at(ni, ic, 0, 0) + h * w];
                                    for oh in oh_lo..oh_hi {
                                        let ih = oh * stride + ki - pad;
                                        for ow in ow_lo..ow_hi {
                                            let iw = ow * stride + kj - pad;
                                            acc = acc + g_chan[oh * wo + ow] * x_chan[ih * w + iw];
                                        }
                                    }
                                }
                                dw[((oc * cin_g + icg) * kh + ki) * kw + kj] = acc;
                            }
                        }
                    }
                }
                dw
            });

            let mut grads = vec![dx, dw];
            if has_bias {
                let db = ctx.needs[2].then(|| {
                    let mut db = vec![E::zero(); cout];
                    for ni in 0..n {
                        for oc in 0..cout {
                            let base = ((ni * cout + oc) * ho) * wo;
                            let mut acc = E::zero();
                            for &gv in &g[base..base + ho * wo] {
                                acc = acc + gv;
                            }
                            db[oc] = db[oc] + acc;
                        }
                    }
                    db
                });
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Depthwise convolution with one kernel per (sample, channel). Stride is
/// fixed at 1 and the padding must keep the output extent equal to the
/// input's, i.e. `(K-1)/2` for odd `K`.
pub fn depthwise_conv_per_sample<E: Scalar>(
    x: &Tensor<E>,
    kernels: &Tensor<E>,
    padding: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ks = kernels.shape();
    let [n, c, h, w] = xs.0;
    if ks.n() != n || ks.c() != c || ks.h() != ks.w() {
        return Err(Error::shape(format!(
            "kernels {} do not match input {} (want [N,C,K,K])",
            ks, xs
        )));
    }
    let k = ks.h();
    if k % 2 == 0 {
        return Err(Error::contract(format!("kernel size {k} must be odd")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::contract(format!(
            "padding {padding} must be (K-1)/2 = {} to preserve the extent",
            (k - 1) / 2
        )));
    }

    let mut out = vec![E::zero(); x.numel()];
    let (xd, kd) = (x.data(), kernels.data());
    for_each_slab(&mut out, h * w, |slab, acc| {
        let (ni, ci) = (slab / c, slab % c);
        let x_chan = &xd[slab * h * w..(slab + 1) * h * w];
        let kbase = ((ni * c + ci) * k) * k;
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range(h, h, ki, padding, 1);
            for kj in 0..k {
                let wv = kd[kbase + ki * k + kj];
                if wv == E::zero() {
                    continue;
                }
                let (ow_lo, ow_hi) = valid_range(w, w, kj, padding, 1);
                for oh in oh_lo..oh_hi {
                    let ih = oh + ki - padding;
                    let x_row = &x_chan[ih * w..(ih + 1) * w];
                    let acc_row = &mut acc[oh * w..(oh + 1) * w];
                    let col0 = ow_lo + kj - padding;
                    for (a, &xv) in acc_row[ow_lo..ow_hi]
                        .iter_mut()
                        .zip(&x_row[col0..col0 + (ow_hi - ow_lo)])
                    {
                        *a = *a + wv * xv;
                    }
                }
            }
        }
    });

    let (xh, kh_t) = (x.clone(), kernels.clone());
    Ok(Tensor::from_op(
        xs,
        out,
        vec![x.clone(), kernels.clone()],
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let (xd, kd) = (xh.data(), kh_t.data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![E::zero(); xh.numel()];
                for slab in 0..n * c {
                    let g_chan = &g[slab * h * w..(slab + 1) * h * w];
                    let dx_chan = &mut dx[slab * h * w..(slab + 1) * h * w];
                    let kbase = slab * k * k;
                    for ki in 0..k {
                        let (oh_lo, oh_hi) = valid_range(h, h, ki, padding, 1);
                        for kj in 0..k {
                            let wv = kd[kbase + ki * k + kj];
                            if wv == E::zero() {
                                continue;
                            }
                            let (ow_lo, ow_hi) = valid_range(w, w, kj, padding, 1);
                            for oh in oh_lo..oh_hi {
                                let ih = oh + ki - padding;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow + kj - padding;
                                    dx_chan[ih * w + iw] =
                                        dx_chan[ih * w + iw] + wv * g_chan[oh * w + ow];
                                }
                            }
                        }
                    }
                }
                dx
            });
            let dk = ctx.needs[1].then(|| {
                let mut dk = vec![E::zero(); kh_t.numel()];
                for slab in 0..n * c {
                    let g_chan = &g[slab * h * w..(slab + 1) * h * w];
                    let x_chan = &xd[slab * h * w..(slab + 1) * h * w];
                    let kbase = slab * k * k;
                    for ki in 0..k {
                        let (oh_lo, oh_hi) = valid_range(h, h, ki, padding, 1);
                        for kj in 0..k {
                            let (ow_lo, ow_hi) = valid_range(w, w, kj, padding, 1);
                            let mut acc = E::zero();
                            for oh in oh_lo..oh_hi {
                                let ih = oh + ki - padding;
                                for ow in ow_lo..ow_hi {
                                    let iw = ow + kj - padding;
                                    acc = acc + g_chan[oh * w + ow] * x_chan[ih * w + iw];
                                }
                            }
                            dk[kbase + ki * k + kj] = acc;
                        }
                    }
                }
                dk
            });
            vec![dx, dk]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(
        x: &Tensor<f64>,
        weight: Tensor<f64>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let p = Conv2dParams::new(weight, None, stride, padding, groups).unwrap();
        conv2d(x, &p).unwrap()
    }

    #[test]
    fn identity_pointwise_kernel() {
        let x = Tensor::from_vec([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let w = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv(&x, w, 1, 0, 1);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn depthwise_box_response() {
        // One-hot center, all-ones 3x3 kernel, pad 1: a 3x3 box of ones.
        let mut xd = vec![0.0; 9];
        xd[4] = 1.0;
        let x = Tensor::from_vec([1, 1, 3, 3], xd).unwrap();
        let w = Tensor::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let y = conv(&x, w, 1, 1, 1);
        assert_eq!(y.data(), &[1.0; 9]);
    }

    #[test]
    fn frozen_strided_case() {
        // 1x1x5x5 ramp input, k=3, s=2, p=1; values cross-checked externally.
        let x = Tensor::from_vec([1, 1, 5, 5], (0..25).map(|v| v as f64 / 10.0).collect()).unwrap();
        let w = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.1, -0.3],
        )
        .unwrap();
        let y = conv(&x, w, 2, 1, 1);
        let expected = [
            -0.13999999999999999,
            0.02,
            0.45000000000000007,
            0.13999999999999987,
            0.5800000000000001,
            1.15,
            0.9699999999999999,
            1.2300000000000002,
            1.0,
        ];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([1, 3, 4, 4]).unwrap();
        let w = Tensor::<f64>::zeros([4, 2, 1, 1]).unwrap();
        let p = Conv2dParams::new(w, None, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::zeros([1, 1, 5, 5]).unwrap();
        let p = Conv2dParams::new(w, None, 1, 0, 1).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn per_sample_identity_1x1() {
        let x = Tensor::from_vec([2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let k = Tensor::<f64>::ones([2, 1, 1, 1]).unwrap();
        let y = depthwise_conv_per_sample(&x, &k, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn per_sample_even_kernel_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]).unwrap();
        let k = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        assert!(matches!(
            depthwise_conv_per_sample(&x, &k, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn per_sample_batch_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([2, 1, 4, 4]).unwrap();
        let k = Tensor::<f64>::zeros([1, 1, 3, 3]).unwrap();
        assert!(matches!(
            depthwise_conv_per_sample(&x, &k, 1),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn per_sample_matches_shared_kernel_conv2d() {
        // Batch-constant kernels reduce to a plain depthwise conv2d.
        let mut rng = crate::rng::SplitMix64::new(11);
        let x = Tensor::from_vec(
            [2, 3, 5, 5],
            (0..150).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        )
        .unwrap();
        let kdata: Vec<f64> = (0..27).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut per_sample = kdata.clone();
        per_sample.extend_from_slice(&kdata);
        let ks = Tensor::from_vec([2, 3, 3, 3], per_sample).unwrap();
        let y = depthwise_conv_per_sample(&x, &ks, 1).unwrap();

        let w = Tensor::from_vec([3, 1, 3, 3], kdata).unwrap();
        let p = Conv2dParams::depthwise(w, None, 1, 1).unwrap();
        let y_ref = conv2d(&x, &p).unwrap();
        for (a, b) in y.data().iter().zip(y_ref.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
