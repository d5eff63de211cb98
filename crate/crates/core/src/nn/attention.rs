//! Multi-head scaled dot-product attention over token tensors.

use crate::error::{Error, Result};
use crate::parallel::for_each_slab;
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::Tensor;

struct AttnDims {
    n: usize,
    lq: usize,
    lkv: usize,
    c: usize,
    heads: usize,
    d: usize,
}

fn check_dims<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: Option<&Tensor<E>>,
    heads: usize,
    bias: Option<&Tensor<E>>,
) -> Result<AttnDims> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.n() != 1 || ks.n() != 1 {
        return Err(Error::shape(format!(
            "attention expects token tensors [1,N,L,C], got {qs} and {ks}"
        )));
    }
    let (n, lq, c) = (qs.c(), qs.h(), qs.w());
    let (nk, lkv, ck) = (ks.c(), ks.h(), ks.w());
    if nk != n || ck != c {
        return Err(Error::shape(format!(
            "key tokens {ks} do not match query tokens {qs}"
        )));
    }
    if let Some(v) = v {
        if v.shape().0 != ks.0 {
            return Err(Error::shape(format!(
                "value tokens {} do not match key tokens {ks}",
                v.shape()
            )));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!(
            "channel count {c} not divisible into {heads} heads"
        )));
    }
    if let Some(b) = bias {
        if b.shape().0 != [1, heads, lq, lkv] {
            return Err(Error::Config(format!(
                "relative position bias {} does not match [1,{heads},{lq},{lkv}]",
                b.shape()
            )));
        }
    }
    Ok(AttnDims { n, lq, lkv, c, heads, d: c / heads })
}

/// Row-softmaxed attention weights `[N, heads, Lq, Lkv]` for the given
/// queries/keys. Scores are `Q K^T / sqrt(d)` plus the optional bias.
fn compute_probs<E: Scalar>(
    qd: &[E],
    kd: &[E],
    bias: Option<&[E]>,
    dims: &AttnDims,
) -> Vec<E> {
    let &AttnDims { n, lq, lkv, c, heads, d } = dims;
    let scale = E::from_f64(1.0 / (d as f64).sqrt());
    let mut probs = vec![E::zero(); n * heads * lq * lkv];
    for_each_slab(&mut probs, lq * lkv, |slab, rows| {
        let (ni, hi) = (slab / heads, slab % heads);
        for i in 0..lq {
            let q_row = &qd[(ni * lq + i) * c + hi * d..(ni * lq + i) * c + hi * d + d];
            let row = &mut rows[i * lkv..(i + 1) * lkv];
            for (j, slot) in row.iter_mut().enumerate() {
                let k_row = &kd[(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                let mut acc = E::zero();
                for (&qv, &kv) in q_row.iter().zip(k_row) {
                    acc = acc + qv * kv;
                }
                acc = acc * scale;
                if let Some(bd) = bias {
                    acc = acc + bd[(hi * lq + i) * lkv + j];
                }
                *slot = acc;
            }
            // row softmax with max subtraction
            let mut max = row[0];
            for &s in row.iter().skip(1) {
                if s > max {
                    max = s;
                }
            }
            let mut sum = E::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum = sum + *s;
            }
            for s in row.iter_mut() {
                *s = *s / sum;
            }
        }
    });
    probs
}

/// `softmax(Q K^T / sqrt(d) + B) V` per head over token tensors.
///
/// `q` is `[1, N, Lq, C]`; `k` and `v` are `[1, N, Lkv, C]`; the optional
/// relative position bias is `[1, heads, Lq, Lkv]` and receives gradient.
/// Output is `[1, N, Lq, C]`.
pub fn multi_head_attention<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let dims = check_dims(q, k, Some(v), heads, bias)?;
    let AttnDims { n, lq, lkv, c, d, .. } = dims;
    let probs = compute_probs(q.data(), k.data(), bias.map(|b| b.data()), &dims);

    let mut out = vec![E::zero(); n * lq * c];
    let vd = v.data();
    for_each_slab(&mut out, lq * c, |ni, sample| {
        for hi in 0..heads {
            let p_head = &probs[((ni * heads + hi) * lq) * lkv..((ni * heads + hi) * lq + lq) * lkv];
            for i in 0..lq {
                let out_row = &mut sample[i * c + hi * d..i * c + hi * d + d];
                for j in 0..lkv {
                    let p = p_head[i * lkv + j];
                    let v_row = &vd[(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                    for (o, &vv) in out_row.iter_mut().zip(v_row) {
                        *o = *o + p * vv;
                    }
                }
            }
        }
    });

    let mut inputs = vec![q.clone(), k.clone(), v.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (qh, kh, vh) = (q.clone(), k.clone(), v.clone());
    let saved_probs = probs;

    Ok(Tensor::from_op(
        Shape::new([1, n, lq, c])?,
        out,
        inputs,
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let (qd, kd, vd) = (qh.data(), kh.data(), vh.data());
            let scale = E::from_f64(1.0 / (d as f64).sqrt());

            let mut dq = ctx.needs[0].then(|| vec![E::zero(); qd.len()]);
            let mut dk = ctx.needs[1].then(|| vec![E::zero(); kd.len()]);
            let mut dv = ctx.needs[2].then(|| vec![E::zero(); vd.len()]);
            let want_bias = has_bias && ctx.needs[3];
            let mut db = want_bias.then(|| vec![E::zero(); heads * lq * lkv]);

            let mut ds_row = vec![E::zero(); lkv];
            for ni in 0..n {
                for hi in 0..heads {
                    let p_head =
                        &saved_probs[((ni * heads + hi) * lq) * lkv..((ni * heads + hi) * lq + lq) * lkv];
                    for i in 0..lq {
                        let g_row = &g[(ni * lq + i) * c + hi * d..(ni * lq + i) * c + hi * d + d];
                        let p_row = &p_head[i * lkv..(i + 1) * lkv];

                        // dP[j] = <dZ_row, V_j>, then softmax backward to dS.
                        let mut dot = E::zero();
                        for j in 0..lkv {
                            let v_row =
                                &vd[(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                            let mut dp = E::zero();
                            for (&gv, &vv) in g_row.iter().zip(v_row) {
                                dp = dp + gv * vv;
                            }
                            ds_row[j] = dp;
                            dot = dot + dp * p_row[j];
                        }
                        for j in 0..lkv {
                            ds_row[j] = p_row[j] * (ds_row[j] - dot);
                        }

                        if let Some(dv) = dv.as_mut() {
                            for j in 0..lkv {
                                let p = p_row[j];
                                if p == E::zero() {
                                    continue;
                                }
                                let dv_row = &mut dv
                                    [(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                                for (o, &gv) in dv_row.iter_mut().zip(g_row) {
                                    *o = *o + p * gv;
                                }
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            let dq_row =
                                &mut dq[(ni * lq + i) * c + hi * d..(ni * lq + i) * c + hi * d + d];
                            for j in 0..lkv {
                                let s = ds_row[j] * scale;
                                let k_row = &kd
                                    [(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                                for (o, &kv) in dq_row.iter_mut().zip(k_row) {
                                    *o = *o + s * kv;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            let q_row =
                                &qd[(ni * lq + i) * c + hi * d..(ni * lq + i) * c + hi * d + d];
                            for j in 0..lkv {
                                let s = ds_row[j] * scale;
                                let dk_row = &mut dk
                                    [(ni * lkv + j) * c + hi * d..(ni * lkv + j) * c + hi * d + d];
                                for (o, &qv) in dk_row.iter_mut().zip(q_row) {
                                    *o = *o + s * qv;
                                }
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            let db_row = &mut db[(hi * lq + i) * lkv..(hi * lq + i + 1) * lkv];
                            for (o, &s) in db_row.iter_mut().zip(&ds_row) {
                                *o = *o + s;
                            }
                        }
                    }
                }
            }

            let mut grads = vec![dq, dk, dv];
            if has_bias {
                grads.push(db);
            }
            grads
        }),
    ))
}

/// Attention weights only, as a `[N, heads, Lq, Lkv]` tensor. Forward-only
/// introspection for tests and invariants; carries no backward rule.
pub fn attention_probs<E: Scalar>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    heads: usize,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let dims = check_dims(q, k, None, heads, bias)?;
    let probs = compute_probs(q.data(), k.data(), bias.map(|b| b.data()), &dims);
    Tensor::from_vec([dims.n, dims.heads, dims.lq, dims.lkv], probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn single_token_passes_value_through() {
        let q = Tensor::from_vec([1, 1, 1, 2], vec![0.3, -0.8]).unwrap();
        let k = Tensor::from_vec([1, 1, 1, 2], vec![1.5, 0.2]).unwrap();
        let v = Tensor::from_vec([1, 1, 1, 2], vec![-2.0, 4.0]).unwrap();
        let z = multi_head_attention(&q, &k, &v, 1, None).unwrap();
        assert_eq!(z.data(), v.data());
    }

    #[test]
    fn frozen_four_token_case() {
        let q = Tensor::from_vec([1, 1, 4, 2], vec![0.1, 0.2, -0.3, 0.5, 0.7, -0.1, 0.0, 0.4])
            .unwrap();
        let k = Tensor::from_vec([1, 1, 4, 2], vec![0.2, -0.2, 0.5, 0.1, -0.4, 0.3, 0.1, 0.6])
            .unwrap();
        let v = Tensor::from_vec([1, 1, 4, 2], vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5, -1.0, 2.0])
            .unwrap();
        let z = multi_head_attention(&q, &k, &v, 1, None).unwrap();
        let expected = [
            0.09567780696034478,
            0.659762812604084,
            0.06780092922521358,
            0.6471051317835212,
            0.12239190616976911,
            0.6864626278814933,
            0.07165284404745192,
            0.6720474363010446,
        ];
        for (a, e) in z.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = SplitMix64::new(5);
        let q = Tensor::from_vec([1, 2, 6, 4], (0..48).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let k = Tensor::from_vec([1, 2, 3, 4], (0..24).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .unwrap();
        let p = attention_probs(&q, &k, 2, None).unwrap();
        for row in p.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn bias_shape_mismatch_is_config_error() {
        let q = Tensor::<f64>::zeros([1, 1, 4, 2]).unwrap();
        let k = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        let v = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        let b = Tensor::<f64>::zeros([1, 1, 4, 3]).unwrap();
        assert!(matches!(
            multi_head_attention(&q, &k, &v, 1, Some(&b)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn head_mismatch_rejected() {
        let q = Tensor::<f64>::zeros([1, 1, 4, 6]).unwrap();
        let k = Tensor::<f64>::zeros([1, 1, 4, 6]).unwrap();
        let v = Tensor::<f64>::zeros([1, 1, 4, 6]).unwrap();
        assert!(multi_head_attention(&q, &k, &v, 4, None).is_err());
    }
}
