//! Softmax and GELU.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Exp-normalization along `axis` with max-subtraction for stability. Every
/// slice along the axis sums to 1.
pub fn softmax<E: Scalar>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    if axis >= 4 {
        return Err(Error::contract(format!("softmax axis {axis} out of range")));
    }
    let shape = x.shape();
    let len = shape.0[axis];
    let (outer, inner) = shape.outer_inner(axis);

    let mut out = x.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = out[base];
            for l in 1..len {
                let v = out[base + l * inner];
                if v > max {
                    max = v;
                }
            }
            let mut sum = E::zero();
            for l in 0..len {
                let e = (out[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                sum = sum + e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / sum;
            }
        }
    }

    Ok(Tensor::from_op(
        shape,
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let dx = ctx.needs[0].then(|| {
                let y = ctx.out_data;
                let g = ctx.out_grad;
                let mut dx = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = E::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot = dot + g[idx] * y[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                dx
            });
            vec![dx]
        }),
    ))
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation: `0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715 x^3)))`.
pub fn gelu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let out: Vec<E> = x
        .data()
        .iter()
        .map(|&v| {
            let u = c * (v + a * v * v * v);
            half * v * (E::one() + u.tanh())
        })
        .collect();
    let xh = x.clone();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let dx = ctx.needs[0].then(|| {
                xh.data()
                    .iter()
                    .zip(ctx.out_grad)
                    .map(|(&v, &g)| {
                        let three_a = E::from_f64(3.0 * GELU_A);
                        let u = c * (v + a * v * v * v);
                        let t = u.tanh();
                        let sech2 = E::one() - t * t;
                        let du = c * (E::one() + three_a * v * v);
                        let d = half * (E::one() + t) + half * v * sech2 * du;
                        g * d
                    })
                    .collect()
            });
            vec![dx]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn constant_slice_is_uniform() {
        let x = Tensor::full([1, 4, 1, 1], 2.5).unwrap();
        let y = softmax(&x, 1).unwrap();
        for &v in y.data() {
            assert!((v - 0.25f64).abs() < 1e-12);
        }
    }

    #[test]
    fn large_logit_does_not_overflow() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 50.0]).unwrap();
        let y = softmax(&x, 3).unwrap();
        assert!((y.data()[0] - 1.9287498479639178e-22).abs() < 1e-30);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn slices_sum_to_one_any_axis() {
        let mut rng = SplitMix64::new(3);
        let x = Tensor::from_vec([2, 3, 4, 5], (0..120).map(|_| rng.uniform(-4.0, 4.0)).collect())
            .unwrap();
        for axis in 0..4 {
            let y = softmax(&x, axis).unwrap();
            let len = y.shape().0[axis];
            let (outer, inner) = y.shape().outer_inner(axis);
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0;
                    for l in 0..len {
                        s += y.data()[o * len * inner + l * inner + i];
                    }
                    assert!((s - 1.0f64).abs() < 1e-6, "axis {axis}: slice sums to {s}");
                }
            }
        }
    }

    #[test]
    fn shift_invariance() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.1, -1.2, 2.0]).unwrap();
        let shifted = crate::tensor::add_scalar(&x, 37.5);
        let a = softmax(&x, 3).unwrap();
        let b = softmax(&shifted, 3).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![-1.0, 0.0, 1.0, 6.0]).unwrap();
        let y = gelu(&x);
        let expected = [-0.15880800939172324, 0.0, 0.8411919906082768, 5.9999999999156035];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        // asymptote: gelu(x) -> x for large positive x
        assert!((y.data()[3] - 6.0f64).abs() < 1e-4);
    }
}
