//! Multi-scale feed-forward network and the dynamic position encoding.

use crate::error::{Error, Result};
use crate::nn::{conv2d, gelu, Conv2dParams};
use crate::scalar::Scalar;
use crate::tensor::{add, concat_channels, split_channels, Tensor};

/// FFN whose hidden channels are split into equal groups, each aggregated by
/// a depthwise convolution of its own kernel size.
pub struct MsFfnParams<E: Scalar> {
    pub channels: usize,
    pub expansion: usize,
    pub hidden: usize,
    pub scales: Vec<usize>,
    /// 1x1 `C -> hidden`, bias.
    pub fc1: Conv2dParams<E>,
    /// One depthwise conv per scale, each over `hidden / scales.len()`
    /// channels, kernel `k`, padding `(k-1)/2`.
    pub scale_convs: Vec<Conv2dParams<E>>,
    /// 1x1 `hidden -> C`, bias.
    pub fc2: Conv2dParams<E>,
}

impl<E: Scalar> MsFfnParams<E> {
    pub fn new(
        channels: usize,
        expansion: usize,
        scales: Vec<usize>,
        fc1: Conv2dParams<E>,
        scale_convs: Vec<Conv2dParams<E>>,
        fc2: Conv2dParams<E>,
    ) -> Result<Self> {
        let hidden = channels * expansion;
        if scales.is_empty() || hidden % scales.len() != 0 {
            return Err(Error::config(format!(
                "hidden width {hidden} not divisible into {} scale groups",
                scales.len()
            )));
        }
        if scales.iter().any(|k| k % 2 == 0) {
            return Err(Error::config("all FFN scale kernels must be odd".into()));
        }
        if scale_convs.len() != scales.len() {
            return Err(Error::config("one depthwise conv per scale required".into()));
        }
        let group = hidden / scales.len();
        for (k, conv) in scales.iter().zip(&scale_convs) {
            if !conv.is_depthwise() || conv.in_channels != group || conv.kernel_h != *k {
                return Err(Error::config(format!(
                    "scale-{k} conv must be depthwise {k}x{k} over {group} channels"
                )));
            }
        }
        if fc1.in_channels != channels || fc1.out_channels != hidden {
            return Err(Error::config(format!("fc1 must map {channels}->{hidden}")));
        }
        if fc2.in_channels != hidden || fc2.out_channels != channels {
            return Err(Error::config(format!("fc2 must map {hidden}->{channels}")));
        }
        Ok(MsFfnParams { channels, expansion, hidden, scales, fc1, scale_convs, fc2 })
    }
}

/// `fc2(gelu(concat(dw_k(split_k(gelu(fc1(x)))))))`; shape-preserving.
pub fn msffn_forward<E: Scalar>(x: &Tensor<E>, p: &MsFfnParams<E>) -> Result<Tensor<E>> {
    if x.shape().c() != p.channels {
        return Err(Error::shape(format!(
            "input has {} channels, FFN expects {}",
            x.shape().c(),
            p.channels
        )));
    }
    let hidden = gelu(&conv2d(x, &p.fc1)?);
    let groups = split_channels(&hidden, p.scales.len())?;
    let mut mixed = Vec::with_capacity(groups.len());
    for (g, conv) in groups.iter().zip(&p.scale_convs) {
        mixed.push(conv2d(g, conv)?);
    }
    let merged = gelu(&concat_channels(&mixed)?);
    conv2d(&merged, &p.fc2)
}

/// Dynamic position encoding: residual depthwise convolution.
pub fn dpe_forward<E: Scalar>(x: &Tensor<E>, conv: &Conv2dParams<E>) -> Result<Tensor<E>> {
    add(&conv2d(x, conv)?, x)
}
