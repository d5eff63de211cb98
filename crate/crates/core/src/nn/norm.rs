//! Inference-mode batch normalization.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-channel affine normalization with stored statistics. All four tensors
/// are `[1, C, 1, 1]`.
pub struct NormParams<E: Scalar> {
    pub num_channels: usize,
    pub scale: Tensor<E>,
    pub shift: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
}

impl<E: Scalar> NormParams<E> {
    pub fn new(
        scale: Tensor<E>,
        shift: Tensor<E>,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: f64,
    ) -> Result<Self> {
        let c = scale.shape().c();
        for (name, t) in [
            ("scale", &scale),
            ("shift", &shift),
            ("running_mean", &running_mean),
            ("running_var", &running_var),
        ] {
            if t.shape().0 != [1, c, 1, 1] {
                return Err(Error::shape(format!(
                    "norm {name} must be [1,{c},1,1], got {}",
                    t.shape()
                )));
            }
        }
        if !(eps > 0.0) {
            return Err(Error::contract(format!("eps must be positive, got {eps}")));
        }
        if running_var.data().iter().any(|v| v.to_f64() < 0.0) {
            return Err(Error::contract("running variance has negative entries".into()));
        }
        Ok(NormParams {
            num_channels: c,
            scale,
            shift,
            running_mean,
            running_var,
            eps,
        })
    }

    /// Number of learnable elements (scale and shift; statistics are state,
    /// not parameters).
    pub fn param_count(&self) -> usize {
        self.scale.numel() + self.shift.numel()
    }
}

/// `(x - mean) / sqrt(var + eps) * scale + shift`, per channel, using the
/// stored statistics.
pub fn batch_norm_inference<E: Scalar>(x: &Tensor<E>, p: &NormParams<E>) -> Result<Tensor<E>> {
    let xs = x.shape();
    let [n, c, h, w] = xs.0;
    if c != p.num_channels {
        return Err(Error::shape(format!(
            "input has {c} channels, norm expects {}",
            p.num_channels
        )));
    }
    let hw = h * w;
    let inv: Vec<E> = p
        .running_var
        .data()
        .iter()
        .map(|v| E::from_f64(1.0 / (v.to_f64() + p.eps).sqrt()))
        .collect();

    let mut out = vec![E::zero(); x.numel()];
    let (xd, md, sd, bd) = (x.data(), p.running_mean.data(), p.scale.data(), p.shift.data());
    for ni in 0..n {
        for ci in 0..c {
            let (m, iv, sc, sh) = (md[ci], inv[ci], sd[ci], bd[ci]);
            let base = (ni * c + ci) * hw;
            for i in 0..hw {
                out[base + i] = (xd[base + i] - m) * iv * sc + sh;
            }
        }
    }

    let (xh, mh) = (x.clone(), p.running_mean.clone());
    let scale_h = p.scale.clone();
    Ok(Tensor::from_op(
        xs,
        out,
        vec![x.clone(), p.scale.clone(), p.shift.clone()],
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let (xd, md, sd) = (xh.data(), mh.data(), scale_h.data());
            let dx = ctx.needs[0].then(|| {
                let mut dx = vec![E::zero(); xh.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        let k = sd[ci] * inv[ci];
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = g[base + i] * k;
                        }
                    }
                }
                dx
            });
            let dscale = ctx.needs[1].then(|| {
                let mut dg = vec![E::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mut acc = E::zero();
                        for i in 0..hw {
                            acc = acc + g[base + i] * (xd[base + i] - md[ci]) * inv[ci];
                        }
                        dg[ci] = dg[ci] + acc;
                    }
                }
                dg
            });
            let dshift = ctx.needs[2].then(|| {
                let mut db = vec![E::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * hw;
                        let mut acc = E::zero();
                        for i in 0..hw {
                            acc = acc + g[base + i];
                        }
                        db[ci] = db[ci] + acc;
                    }
                }
                db
            });
            vec![dx, dscale, dshift]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_stats(c: usize, eps: f64) -> NormParams<f64> {
        NormParams::new(
            Tensor::ones([1, c, 1, 1]).unwrap(),
            Tensor::zeros([1, c, 1, 1]).unwrap(),
            Tensor::zeros([1, c, 1, 1]).unwrap(),
            Tensor::ones([1, c, 1, 1]).unwrap(),
            eps,
        )
        .unwrap()
    }

    #[test]
    fn identity_statistics_near_identity() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![0.5, -1.0, 0.25, 0.75]).unwrap();
        let y = batch_norm_inference(&x, &identity_stats(2, 1e-5)).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn shift_only_affine() {
        let mut p = identity_stats(2, 1e-5);
        p.shift = Tensor::full([1, 2, 1, 1], 5.0).unwrap();
        let x = Tensor::from_vec([1, 2, 1, 1], vec![2.0, -4.0]).unwrap();
        let y = batch_norm_inference(&x, &p).unwrap();
        let k = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] - (2.0 * k + 5.0)).abs() < 1e-12);
        assert!((y.data()[1] - (-4.0 * k + 5.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_scalar_formula() {
        let p = NormParams::new(
            Tensor::from_vec([1, 2, 1, 1], vec![1.5, -0.5]).unwrap(),
            Tensor::from_vec([1, 2, 1, 1], vec![0.1, 0.2]).unwrap(),
            Tensor::from_vec([1, 2, 1, 1], vec![0.3, -0.7]).unwrap(),
            Tensor::from_vec([1, 2, 1, 1], vec![2.0, 0.5]).unwrap(),
            1e-5,
        )
        .unwrap();
        let x = Tensor::from_vec([1, 2, 2, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let y = batch_norm_inference(&x, &p).unwrap();
        let expect = |v: f64, m: f64, var: f64, s: f64, b: f64| (v - m) / (var + 1e-5).sqrt() * s + b;
        let want = [
            expect(1.0, 0.3, 2.0, 1.5, 0.1),
            expect(-2.0, 0.3, 2.0, 1.5, 0.1),
            expect(0.5, -0.7, 0.5, -0.5, 0.2),
            expect(3.0, -0.7, 0.5, -0.5, 0.2),
        ];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros([1, 3, 2, 2]).unwrap();
        assert!(matches!(
            batch_norm_inference(&x, &identity_stats(2, 1e-5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn negative_variance_rejected() {
        let r = NormParams::new(
            Tensor::ones([1, 1, 1, 1]).unwrap(),
            Tensor::zeros([1, 1, 1, 1]).unwrap(),
            Tensor::zeros([1, 1, 1, 1]).unwrap(),
            Tensor::from_vec([1, 1, 1, 1], vec![-0.5]).unwrap(),
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
