//! Adaptive average pooling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Window `i` of `out` cells over an extent of `inp`:
/// `[floor(i*inp/out), ceil((i+1)*inp/out))`.
#[inline]
fn window(i: usize, inp: usize, out: usize) -> (usize, usize) {
    (i * inp / out, ((i + 1) * inp).div_ceil(out))
}

/// Mean over adaptive windows. Each output cell is the arithmetic mean of its
/// input window, summed in row-major order.
pub fn adaptive_avg_pool<E: Scalar>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Result<Tensor<E>> {
    let [_, _, h, w] = x.shape().0;
    if out_h > h || out_w > w {
        return Err(Error::contract(format!(
            "pool output {out_h}x{out_w} exceeds input {h}x{w}"
        )));
    }
    adaptive_avg_pool_any(x, out_h, out_w)
}

/// Pooling core without the downsample-only restriction: when an output
/// extent exceeds the input's, the floor/ceil windows degenerate to repeated
/// single cells. The kernel generator relies on this for maps smaller than
/// its kernel size.
pub(crate) fn adaptive_avg_pool_any<E: Scalar>(
    x: &Tensor<E>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let [n, c, h, w] = xs.0;
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("pool output extents must be >= 1".into()));
    }

    let mut out = vec![E::zero(); n * c * out_h * out_w];
    let xd = x.data();
    for slab in 0..n * c {
        let x_chan = &xd[slab * h * w..(slab + 1) * h * w];
        let o_chan = &mut out[slab * out_h * out_w..(slab + 1) * out_h * out_w];
        for oh in 0..out_h {
            let (h0, h1) = window(oh, h, out_h);
            for ow in 0..out_w {
                let (w0, w1) = window(ow, w, out_w);
                let mut acc = E::zero();
                for ih in h0..h1 {
                    for iw in w0..w1 {
                        acc = acc + x_chan[ih * w + iw];
                    }
                }
                let area = E::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                o_chan[oh * out_w + ow] = acc / area;
            }
        }
    }

    Ok(Tensor::from_op(
        Shape::new([n, c, out_h, out_w])?,
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![E::zero(); n * c * h * w];
                for slab in 0..n * c {
                    let g_chan = &ctx.out_grad[slab * out_h * out_w..(slab + 1) * out_h * out_w];
                    let dx_chan = &mut dx[slab * h * w..(slab + 1) * h * w];
                    for oh in 0..out_h {
                        let (h0, h1) = window(oh, h, out_h);
                        for ow in 0..out_w {
                            let (w0, w1) = window(ow, w, out_w);
                            let area = E::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                            let share = g_chan[oh * out_w + ow] / area;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    dx_chan[ih * w + iw] = dx_chan[ih * w + iw] + share;
                                }
                            }
                        }
                    }
                }
                dx
            });
            vec![dx]
        }),
    ))
}

/// Global mean per channel: adaptive pooling to 1x1.
pub fn global_avg_pool<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    adaptive_avg_pool(x, 1, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_mean() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = adaptive_avg_pool(&x, 1, 1).unwrap();
        assert_eq!(y.item().unwrap(), 2.5);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_vec([1, 2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        let y = adaptive_avg_pool(&x, 2, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn frozen_uneven_case() {
        // 5x5 ramp to 3x3; windows overlap because 3 does not divide 5.
        let x = Tensor::from_vec([1, 1, 5, 5], (0..25).map(|v| v as f64 / 10.0).collect()).unwrap();
        let y = adaptive_avg_pool(&x, 3, 3).unwrap();
        let expected = [0.3, 0.45, 0.6, 1.05, 1.2, 1.35, 1.8, 1.95, 2.1];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn divisible_blocks_exact() {
        let x = Tensor::from_vec([1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = adaptive_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn zero_output_extent_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 4, 4]).unwrap();
        assert!(matches!(adaptive_avg_pool(&x, 0, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn upsampling_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        assert!(matches!(adaptive_avg_pool(&x, 3, 2), Err(Error::Contract(_))));
    }
}
