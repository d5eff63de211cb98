//! Dense NCHW tensors with optional gradient tracking.
//!
//! A `Tensor` is an immutable handle: data never changes after creation and
//! only the gradient buffer is written (once, by `backward`). Ops that see a
//! tracked input attach a `Recording` — the input handles plus a backward
//! rule — to their output, which is what the tape replays in reverse.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Context handed to a backward rule.
pub(crate) struct BwdCtx<'a, E: Scalar> {
    /// Gradient of the loss w.r.t. this op's output.
    pub out_grad: &'a [E],
    /// The op's forward output, for rules that reuse it (softmax, GELU tail).
    pub out_data: &'a [E],
    /// Which input slots actually need a gradient.
    pub needs: &'a [bool],
}

/// Per-input gradient contributions; `None` for slots that need nothing.
pub(crate) type InputGrads<E> = Vec<Option<Vec<E>>>;

pub(crate) type BackwardFn<E> = Box<dyn Fn(&BwdCtx<'_, E>) -> InputGrads<E> + Send + Sync>;

pub(crate) struct Recording<E: Scalar> {
    pub inputs: Vec<Tensor<E>>,
    pub backward: BackwardFn<E>,
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Shape,
    data: Vec<E>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<E>>>,
    recording: Option<Recording<E>>,
}

/// N×C×H×W numeric array node. Cloning copies the handle, not the buffer.
pub struct Tensor<E: Scalar>(Arc<Inner<E>>);

impl<E: Scalar> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("recorded", &self.0.recording.is_some())
            .finish()
    }
}

impl<E: Scalar> Tensor<E> {
    fn make(shape: Shape, data: Vec<E>, requires_grad: bool, recording: Option<Recording<E>>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced in tensor of shape {shape}"
        );
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            recording,
        }))
    }

    /// Constant-filled tensor.
    pub fn full(extents: [usize; 4], value: E) -> Result<Self> {
        let shape = Shape::new(extents)?;
        Ok(Self::make(shape, vec![value; shape.numel()], false, None))
    }

    pub fn zeros(extents: [usize; 4]) -> Result<Self> {
        Self::full(extents, E::zero())
    }

    pub fn ones(extents: [usize; 4]) -> Result<Self> {
        Self::full(extents, E::one())
    }

    pub fn from_vec(extents: [usize; 4], data: Vec<E>) -> Result<Self> {
        let shape = Shape::new(extents)?;
        if shape.numel() != data.len() {
            return Err(Error::size(format!(
                "shape {shape} wants {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self::make(shape, data, false, None))
    }

    /// Output of an op. Records a backward rule iff some input is tracked.
    pub(crate) fn from_op(
        shape: Shape,
        data: Vec<E>,
        inputs: Vec<Tensor<E>>,
        backward: BackwardFn<E>,
    ) -> Self {
        let tracked = inputs.iter().any(|t| t.tracked());
        let recording = tracked.then_some(Recording { inputs, backward });
        Self::make(shape, data, false, recording)
    }

    /// A new handle to the same data that requests a gradient. Intended for
    /// leaves (parameters, probe inputs); the buffer is shared, the identity
    /// is new.
    pub fn requires_grad(&self) -> Self {
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape: self.0.shape,
            data: self.0.data.clone(),
            requires_grad: true,
            grad: Mutex::new(None),
            recording: None,
        }))
    }

    #[inline]
    pub fn id(&self) -> u64 {
        self.0.id
    }
    #[inline]
    pub fn shape(&self) -> Shape {
        self.0.shape
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.shape.numel()
    }
    #[inline]
    pub fn data(&self) -> &[E] {
        &self.0.data
    }
    #[inline]
    pub fn requests_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True when this tensor participates in gradient flow.
    #[inline]
    pub(crate) fn tracked(&self) -> bool {
        self.0.requires_grad || self.0.recording.is_some()
    }

    pub(crate) fn recording(&self) -> Option<&Recording<E>> {
        self.0.recording.as_ref()
    }

    /// Copy of the accumulated gradient, if `backward` has filled one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.lock().expect("grad lock").clone()
    }

    pub(crate) fn set_grad(&self, g: Vec<E>) {
        *self.0.grad.lock().expect("grad lock") = Some(g);
    }

    pub fn clear_grad(&self) {
        *self.0.grad.lock().expect("grad lock") = None;
    }

    /// Ids of the inputs recorded for this tensor's producing op.
    pub fn parent_ids(&self) -> Vec<u64> {
        self.0
            .recording
            .as_ref()
            .map(|r| r.inputs.iter().map(|t| t.id()).collect())
            .unwrap_or_default()
    }

    /// Single element of a scalar-like tensor.
    pub fn item(&self) -> Result<E> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() needs a single-element tensor, shape is {}",
                self.shape()
            )));
        }
        Ok(self.0.data[0])
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops

enum Broadcast {
    Same,
    PerChannel,
}

fn broadcast_kind<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    let bs = b.shape();
    if bs.n() == 1 && bs.h() == 1 && bs.w() == 1 && bs.c() == a.shape().c() {
        return Ok(Broadcast::PerChannel);
    }
    Err(Error::shape(format!(
        "operands {} and {} are neither equal-shaped nor per-channel [1,C,1,1]",
        a.shape(),
        bs
    )))
}

/// Sum `g` over N, H, W into a per-channel `[1,C,1,1]` buffer.
fn reduce_per_channel<E: Scalar>(g: &[E], shape: Shape) -> Vec<E> {
    let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
    let mut out = vec![E::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut acc = E::zero();
            for v in &g[base..base + hw] {
                acc = acc + *v;
            }
            out[ci] = out[ci] + acc;
        }
    }
    out
}

/// Elementwise sum. `b` is either the same shape as `a` or a per-channel
/// `[1,C,1,1]` tensor broadcast over N, H, W.
pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let kind = broadcast_kind(a, b)?;
    let shape = a.shape();
    let mut out = a.data().to_vec();
    match kind {
        Broadcast::Same => {
            for (o, &bv) in out.iter_mut().zip(b.data()) {
                *o = *o + bv;
            }
        }
        Broadcast::PerChannel => {
            let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
            for ni in 0..n {
                for ci in 0..c {
                    let bv = b.data()[ci];
                    let base = (ni * c + ci) * hw;
                    for o in &mut out[base..base + hw] {
                        *o = *o + bv;
                    }
                }
            }
        }
    }
    let per_channel = matches!(kind, Broadcast::PerChannel);
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0].then(|| ctx.out_grad.to_vec());
            let db = ctx.needs[1].then(|| {
                if per_channel {
                    reduce_per_channel(ctx.out_grad, shape)
                } else {
                    ctx.out_grad.to_vec()
                }
            });
            vec![da, db]
        }),
    ))
}

/// Elementwise product with the same broadcast rules as `add`.
pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let kind = broadcast_kind(a, b)?;
    let shape = a.shape();
    let mut out = a.data().to_vec();
    match kind {
        Broadcast::Same => {
            for (o, &bv) in out.iter_mut().zip(b.data()) {
                *o = *o * bv;
            }
        }
        Broadcast::PerChannel => {
            let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
            for ni in 0..n {
                for ci in 0..c {
                    let bv = b.data()[ci];
                    let base = (ni * c + ci) * hw;
                    for o in &mut out[base..base + hw] {
                        *o = *o * bv;
                    }
                }
            }
        }
    }
    let per_channel = matches!(kind, Broadcast::PerChannel);
    let (ah, bh) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |ctx| {
            let (n, c, hw) = (shape.n(), shape.c(), shape.h() * shape.w());
            let da = ctx.needs[0].then(|| {
                let mut g = ctx.out_grad.to_vec();
                if per_channel {
                    for ni in 0..n {
                        for ci in 0..c {
                            let bv = bh.data()[ci];
                            let base = (ni * c + ci) * hw;
                            for v in &mut g[base..base + hw] {
                                *v = *v * bv;
                            }
                        }
                    }
                } else {
                    for (v, &bv) in g.iter_mut().zip(bh.data()) {
                        *v = *v * bv;
                    }
                }
                g
            });
            let db = ctx.needs[1].then(|| {
                let mut cross: Vec<E> = ctx
                    .out_grad
                    .iter()
                    .zip(ah.data())
                    .map(|(&g, &av)| g * av)
                    .collect();
                if per_channel {
                    cross = reduce_per_channel(&cross, shape);
                }
                cross
            });
            vec![da, db]
        }),
    ))
}

/// Multiply by a scalar constant.
pub fn scale<E: Scalar>(a: &Tensor<E>, k: E) -> Tensor<E> {
    let out = a.data().iter().map(|&v| v * k).collect();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0].then(|| ctx.out_grad.iter().map(|&g| g * k).collect());
            vec![da]
        }),
    )
}

/// Add a scalar constant.
pub fn add_scalar<E: Scalar>(a: &Tensor<E>, k: E) -> Tensor<E> {
    let out = a.data().iter().map(|&v| v + k).collect();
    Tensor::from_op(
        a.shape(),
        out,
        vec![a.clone()],
        Box::new(|ctx| {
            let da = ctx.needs[0].then(|| ctx.out_grad.to_vec());
            vec![da]
        }),
    )
}

/// Sum of all elements as a `[1,1,1,1]` tensor.
pub fn sum_all<E: Scalar>(a: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::zero();
    for &v in a.data() {
        acc = acc + v;
    }
    let numel = a.numel();
    Tensor::from_op(
        Shape([1, 1, 1, 1]),
        vec![acc],
        vec![a.clone()],
        Box::new(move |ctx| {
            let g = ctx.out_grad[0];
            let da = ctx.needs[0].then(|| vec![g; numel]);
            vec![da]
        }),
    )
}

// ---------------------------------------------------------------------------
// Shape ops (all copy; there are no strided views)

/// Same data, new extents. Element count must match.
pub fn reshape<E: Scalar>(a: &Tensor<E>, extents: [usize; 4]) -> Result<Tensor<E>> {
    let shape = Shape::new(extents)?;
    if shape.numel() != a.numel() {
        return Err(Error::shape(format!(
            "cannot reshape {} ({} elements) to {} ({} elements)",
            a.shape(),
            a.numel(),
            shape,
            shape.numel()
        )));
    }
    Ok(Tensor::from_op(
        shape,
        a.data().to_vec(),
        vec![a.clone()],
        Box::new(|ctx| {
            let da = ctx.needs[0].then(|| ctx.out_grad.to_vec());
            vec![da]
        }),
    ))
}

/// Contiguous slice `[start, start+len)` along `axis`.
pub fn narrow_axis<E: Scalar>(
    a: &Tensor<E>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<E>> {
    if axis >= 4 {
        return Err(Error::contract(format!("axis {axis} out of range")));
    }
    let extent = a.shape().0[axis];
    if len == 0 || start + len > extent {
        return Err(Error::split(format!(
            "slice [{start}, {}) exceeds extent {extent} of axis {axis}",
            start + len
        )));
    }
    let (outer, inner) = a.shape().outer_inner(axis);
    let mut extents = a.shape().0;
    extents[axis] = len;
    let shape = Shape::new(extents)?;

    let mut out = Vec::with_capacity(shape.numel());
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let in_numel = a.numel();
    Ok(Tensor::from_op(
        shape,
        out,
        vec![a.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0].then(|| {
                let mut g = vec![E::zero(); in_numel];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner]
                        .copy_from_slice(&ctx.out_grad[src..src + len * inner]);
                }
                g
            });
            vec![da]
        }),
    ))
}

/// Concatenate along `axis`; all other extents must agree.
pub fn concat_axis<E: Scalar>(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(Error::contract("concat of zero tensors".to_string()));
    }
    if axis >= 4 {
        return Err(Error::contract(format!("axis {axis} out of range")));
    }
    let first = parts[0].shape();
    let mut total = 0usize;
    for p in parts {
        let s = p.shape();
        for ax in 0..4 {
            if ax != axis && s.0[ax] != first.0[ax] {
                return Err(Error::shape(format!(
                    "concat operand {} disagrees with {} outside axis {axis}",
                    s, first
                )));
            }
        }
        total += s.0[axis];
    }
    let mut extents = first.0;
    extents[axis] = total;
    let shape = Shape::new(extents)?;
    let (outer, inner) = shape.outer_inner(axis);

    let mut out = vec![E::zero(); shape.numel()];
    let mut offset = 0usize;
    for p in parts {
        let len = p.shape().0[axis];
        for o in 0..outer {
            let dst = (o * total + offset) * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&p.data()[src..src + len * inner]);
        }
        offset += len;
    }

    let lens: Vec<usize> = parts.iter().map(|p| p.shape().0[axis]).collect();
    Ok(Tensor::from_op(
        shape,
        out,
        parts.to_vec(),
        Box::new(move |ctx| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut offset = 0usize;
            for (i, &len) in lens.iter().enumerate() {
                let g = ctx.needs[i].then(|| {
                    let mut g = vec![E::zero(); outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        g[dst..dst + len * inner]
                            .copy_from_slice(&ctx.out_grad[src..src + len * inner]);
                    }
                    g
                });
                grads.push(g);
                offset += len;
            }
            grads
        }),
    ))
}

/// Split the channel extent into `parts` equal tensors; concatenating them in
/// order reconstructs the input exactly.
pub fn split_channels<E: Scalar>(x: &Tensor<E>, parts: usize) -> Result<Vec<Tensor<E>>> {
    let c = x.shape().c();
    if parts == 0 || c % parts != 0 {
        return Err(Error::split(format!(
            "channel extent {c} not divisible into {parts} parts"
        )));
    }
    let each = c / parts;
    (0..parts)
        .map(|i| narrow_axis(x, 1, i * each, each))
        .collect()
}

/// Concatenate along the channel extent.
pub fn concat_channels<E: Scalar>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    concat_axis(parts, 1)
}

// ---------------------------------------------------------------------------
// Map <-> token layout

/// View an `[N,C,H,W]` feature map as `[1, N, H*W, C]` tokens (one channel
/// vector per spatial position).
pub fn map_to_tokens<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let s = x.shape();
    let (n, c, hw) = (s.n(), s.c(), s.h() * s.w());
    let mut out = vec![E::zero(); x.numel()];
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let src = (ni * c + ci) * hw;
            for l in 0..hw {
                out[(ni * hw + l) * c + ci] = xd[src + l];
            }
        }
    }
    Tensor::from_op(
        Shape([1, n, hw, c]),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0].then(|| {
                let mut g = vec![E::zero(); n * c * hw];
                for ni in 0..n {
                    for ci in 0..c {
                        let dst = (ni * c + ci) * hw;
                        for l in 0..hw {
                            g[dst + l] = ctx.out_grad[(ni * hw + l) * c + ci];
                        }
                    }
                }
                g
            });
            vec![da]
        }),
    )
}

/// Inverse of `map_to_tokens`: `[1, N, H*W, C]` back to `[N, C, H, W]`.
pub fn tokens_to_map<E: Scalar>(t: &Tensor<E>, h: usize, w: usize) -> Result<Tensor<E>> {
    let s = t.shape();
    let (n, l, c) = (s.c(), s.h(), s.w());
    if s.n() != 1 || l != h * w {
        return Err(Error::shape(format!(
            "token tensor {} does not match target map {h}x{w}",
            s
        )));
    }
    let mut out = vec![E::zero(); t.numel()];
    let td = t.data();
    for ni in 0..n {
        for ci in 0..c {
            let dst = (ni * c + ci) * l;
            for li in 0..l {
                out[dst + li] = td[(ni * l + li) * c + ci];
            }
        }
    }
    Ok(Tensor::from_op(
        Shape([n, c, h, w]),
        out,
        vec![t.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0].then(|| {
                let mut g = vec![E::zero(); n * l * c];
                for ni in 0..n {
                    for ci in 0..c {
                        let src = (ni * c + ci) * l;
                        for li in 0..l {
                            g[(ni * l + li) * c + ci] = ctx.out_grad[src + li];
                        }
                    }
                }
                g
            });
            vec![da]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_fills_constant() {
        let t = Tensor::<f64>::full([1, 1, 2, 2], 3.0).unwrap();
        assert_eq!(t.data(), &[3.0, 3.0, 3.0, 3.0]);
        assert!(!t.requests_grad());
    }

    #[test]
    fn zeros_counts_elements() {
        let t = Tensor::<f32>::zeros([2, 3, 4, 4]).unwrap();
        assert_eq!(t.numel(), 96);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ones_scalar_like() {
        let t = Tensor::<f64>::ones([1, 1, 1, 1]).unwrap();
        assert_eq!(t.item().unwrap(), 1.0);
    }

    #[test]
    fn zero_extent_is_size_error() {
        assert!(matches!(Tensor::<f64>::zeros([0, 1, 1, 1]), Err(Error::Size(_))));
    }

    #[test]
    fn add_identity_and_arithmetic() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let z = Tensor::zeros([1, 1, 1, 2]).unwrap();
        assert_eq!(add(&x, &z).unwrap().data(), x.data());
        let y = Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap();
        assert_eq!(add(&x, &y).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_identity() {
        let x = Tensor::from_vec([1, 2, 1, 1], vec![5.0, -3.0]).unwrap();
        let one = Tensor::ones([1, 2, 1, 1]).unwrap();
        assert_eq!(mul(&x, &one).unwrap().data(), x.data());
    }

    #[test]
    fn per_channel_broadcast() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec([1, 2, 1, 1], vec![10.0, 20.0]).unwrap();
        assert_eq!(add(&x, &b).unwrap().data(), &[11.0, 12.0, 23.0, 24.0]);
        assert_eq!(mul(&x, &b).unwrap().data(), &[10.0, 20.0, 60.0, 80.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let x = Tensor::<f64>::zeros([1, 2, 2, 2]).unwrap();
        let y = Tensor::<f64>::zeros([1, 2, 2, 3]).unwrap();
        assert!(matches!(add(&x, &y), Err(Error::Shape(_))));
    }

    #[test]
    fn split_concat_round_trip() {
        let x = Tensor::from_vec([1, 4, 1, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let parts = split_channels(&x, 2).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parts[1].data(), &[4.0, 5.0, 6.0, 7.0]);
        let back = concat_channels(&parts).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn split_one_is_identity() {
        let x = Tensor::from_vec([1, 3, 1, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let parts = split_channels(&x, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].data(), x.data());
    }

    #[test]
    fn indivisible_split_rejected() {
        let x = Tensor::<f64>::zeros([1, 3, 1, 1]).unwrap();
        assert!(matches!(split_channels(&x, 2), Err(Error::Split(_))));
    }

    #[test]
    fn concat_mismatched_spatial_rejected() {
        let a = Tensor::<f64>::zeros([1, 1, 2, 2]).unwrap();
        let b = Tensor::<f64>::zeros([1, 1, 3, 2]).unwrap();
        assert!(matches!(concat_channels(&[a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn tokens_round_trip() {
        let x = Tensor::from_vec([2, 3, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let t = map_to_tokens(&x);
        assert_eq!(t.shape().0, [1, 2, 4, 3]);
        let back = tokens_to_map(&t, 2, 2).unwrap();
        assert_eq!(back.data(), x.data());
    }
}
