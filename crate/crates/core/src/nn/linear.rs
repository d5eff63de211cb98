//! Linear projection over the last extent.

use crate::error::{Error, Result};
use crate::parallel::for_each_slab;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

/// Batched matrix product plus bias over the trailing extent: an input of
/// shape `[d0, d1, d2, C_in]` is treated as `d0*d1*d2` feature rows. The
/// weight is `[1, 1, C_out, C_in]`, the bias `[1, 1, 1, C_out]`. Token
/// tensors `[1, N, L, C]` and flat feature rows both fit this contract.
pub fn linear<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let xs = x.shape();
    let ws = weight.shape();
    let (cout, cin) = (ws.h(), ws.w());
    if ws.n() != 1 || ws.c() != 1 {
        return Err(Error::shape(format!(
            "linear weight must be [1,1,C_out,C_in], got {ws}"
        )));
    }
    if xs.w() != cin {
        return Err(Error::shape(format!(
            "input features {} do not match weight C_in {cin}",
            xs.w()
        )));
    }
    if let Some(b) = bias {
        if b.shape().0 != [1, 1, 1, cout] {
            return Err(Error::shape(format!(
                "bias shape {} does not match C_out {cout}",
                b.shape()
            )));
        }
    }
    let rows = xs.n() * xs.c() * xs.h();
    let (xd, wd) = (x.data(), weight.data());
    let bd = bias.map(|b| b.data());

    let mut out = vec![E::zero(); rows * cout];
    for_each_slab(&mut out, cout, |r, out_row| {
        let x_row = &xd[r * cin..(r + 1) * cin];
        for (o, slot) in out_row.iter_mut().enumerate() {
            let w_row = &wd[o * cin..(o + 1) * cin];
            let mut acc = E::zero();
            for (&xv, &wv) in x_row.iter().zip(w_row) {
                acc = acc + xv * wv;
            }
            *slot = match bd {
                Some(bd) => acc + bd[o],
                None => acc,
            };
        }
    });

    let out_shape = Shape::new([xs.n(), xs.c(), xs.h(), cout])?;
    let mut inputs = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (xh, wh) = (x.clone(), weight.clone());

    Ok(Tensor::from_op(
        out_shape,
        out,
        inputs,
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let (xd, wd) = (xh.data(), wh.data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![E::zero(); rows * cin];
                for r in 0..rows {
                    let g_row = &g[r * cout..(r + 1) * cout];
                    let dx_row = &mut dx[r * cin..(r + 1) * cin];
                    for (o, &gv) in g_row.iter().enumerate() {
                        if gv == E::zero() {
                            continue;
                        }
                        let w_row = &wd[o * cin..(o + 1) * cin];
                        for (d, &wv) in dx_row.iter_mut().zip(w_row) {
                            *d = *d + gv * wv;
                        }
                    }
                }
                dx
            });
            let dw = ctx.needs[1].then(|| {
                let mut dw = vec![E::zero(); cout * cin];
                for r in 0..rows {
                    let g_row = &g[r * cout..(r + 1) * cout];
                    let x_row = &xd[r * cin..(r + 1) * cin];
                    for (o, &gv) in g_row.iter().enumerate() {
                        if gv == E::zero() {
                            continue;
                        }
                        let dw_row = &mut dw[o * cin..(o + 1) * cin];
                        for (d, &xv) in dw_row.iter_mut().zip(x_row) {
                            *d = *d + gv * xv;
                        }
                    }
                }
                dw
            });
            let mut grads = vec![dx, dw];
            if has_bias {
                let db = ctx.needs[2].then(|| {
                    let mut db = vec![E::zero(); cout];
                    for r in 0..rows {
                        for (o, &gv) in g[r * cout..(r + 1) * cout].iter().enumerate() {
                            db[o] = db[o] + gv;
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::from_vec([1, 1, 2, 3], (0..6).map(f64::from).collect()).unwrap();
        let w = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = linear(&x, &w, None).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn single_token_dot_plus_bias() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 1, 2], vec![0.5, -1.0]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 1], vec![0.5]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.item().unwrap(), 2.0 * 0.5 - 3.0 + 0.5);
    }

    #[test]
    fn frozen_matmul_case() {
        let x = Tensor::from_vec([1, 1, 2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
        let w = Tensor::from_vec([1, 1, 2, 3], vec![0.2, -0.1, 0.05, 0.3, 0.7, -0.2]).unwrap();
        let b = Tensor::from_vec([1, 1, 1, 2], vec![0.01, -0.02]).unwrap();
        let y = linear(&x, &w, Some(&b)).unwrap();
        let expected = [0.065, -0.19, 0.01000000000000001, 0.57];
        for (a, e) in y.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn mismatched_features_rejected() {
        let x = Tensor::<f64>::zeros([1, 1, 2, 3]).unwrap();
        let w = Tensor::<f64>::zeros([1, 1, 2, 4]).unwrap();
        assert!(matches!(linear(&x, &w, None), Err(Error::Shape(_))));
    }
}
