//! The Dual Dynamic Token Mixer.
//!
//! A feature map is split along channels; the first segment goes through
//! overlapping spatial-reduction attention (OSRA), the second through an
//! input-dependent depthwise convolution (IDConv). The concatenated result is
//! fused by the Squeezed Token Enhancer (STE), which replaces the usual
//! post-mixer 1x1 projection.

use crate::error::{Error, Result};
use crate::nn::pool::adaptive_avg_pool_any;
use crate::nn::{
    batch_norm_inference, conv2d, depthwise_conv_per_sample, linear, multi_head_attention, softmax,
    Conv2dParams, NormParams,
};
use crate::scalar::Scalar;
use crate::shape::Shape;
use crate::tensor::{
    add, concat_channels, map_to_tokens, narrow_axis, reshape, tokens_to_map, Tensor,
};

/// Input-dependent depthwise convolution: G static kernel banks blended by
/// softmax attention derived from pooled input features.
pub struct IDConvParams<E: Scalar> {
    pub channels: usize,
    pub kernel_size: usize,
    pub groups: usize,
    pub reduction: usize,
    /// 1x1 conv `C -> max(C/r, 1)`, with bias.
    pub squeeze_conv: Conv2dParams<E>,
    /// 1x1 conv `max(C/r, 1) -> G*C`, with bias.
    pub expand_conv: Conv2dParams<E>,
    /// Learnable kernel banks `[G, C, K, K]`.
    pub static_kernels: Tensor<E>,
}

/// Squeezed channel count of the IDConv attention pathway.
pub fn idconv_squeezed_channels(channels: usize, reduction: usize) -> usize {
    (channels / reduction).max(1)
}

impl<E: Scalar> IDConvParams<E> {
    pub fn new(
        channels: usize,
        kernel_size: usize,
        groups: usize,
        reduction: usize,
        squeeze_conv: Conv2dParams<E>,
        expand_conv: Conv2dParams<E>,
        static_kernels: Tensor<E>,
    ) -> Result<Self> {
        if groups == 0 {
            return Err(Error::config("IDConv needs at least one attention group".into()));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::contract(format!(
                "IDConv kernel size {kernel_size} must be odd"
            )));
        }
        let squeezed = idconv_squeezed_channels(channels, reduction);
        if squeeze_conv.in_channels != channels
            || squeeze_conv.out_channels != squeezed
            || squeeze_conv.kernel_h != 1
        {
            return Err(Error::shape(format!(
                "IDConv squeeze conv must be 1x1 {channels}->{squeezed}"
            )));
        }
        if expand_conv.in_channels != squeezed
            || expand_conv.out_channels != groups * channels
            || expand_conv.kernel_h != 1
        {
            return Err(Error::shape(format!(
                "IDConv expand conv must be 1x1 {squeezed}->{}",
                groups * channels
            )));
        }
        if static_kernels.shape().0 != [groups, channels, kernel_size, kernel_size] {
            return Err(Error::shape(format!(
                "static kernels must be [{groups},{channels},{kernel_size},{kernel_size}], got {}",
                static_kernels.shape()
            )));
        }
        Ok(IDConvParams {
            channels,
            kernel_size,
            groups,
            reduction,
            squeeze_conv,
            expand_conv,
            static_kernels,
        })
    }

    /// Weight elements excluding biases: `(C^2/r)(G+1) + G*C*K^2` when `r`
    /// divides `C`.
    pub fn weight_param_count(&self) -> usize {
        self.squeeze_conv.weight.numel()
            + self.expand_conv.weight.numel()
            + self.static_kernels.numel()
    }

    /// All learnable elements including the squeeze/expand biases.
    pub fn param_count(&self) -> usize {
        self.squeeze_conv.param_count() + self.expand_conv.param_count()
            + self.static_kernels.numel()
    }
}

/// Generate the per-sample depthwise kernels `W` of shape `[N, C, K, K]`.
///
/// Pool to KxK, squeeze/expand through the two 1x1 convs, softmax over the
/// group extent, then blend the static banks: `W[n] = sum_g P[g] * A[n,g]`.
/// The attention slices `A[n, :, c, i, j]` sum to 1.
pub fn idconv_generate_kernels<E: Scalar>(
    x: &Tensor<E>,
    p: &IDConvParams<E>,
) -> Result<Tensor<E>> {
    let (c, k, g) = (p.channels, p.kernel_size, p.groups);
    if x.shape().c() != c {
        return Err(Error::shape(format!(
            "input has {} channels, IDConv expects {c}",
            x.shape().c()
        )));
    }
    let n = x.shape().n();
    let pooled = adaptive_avg_pool_any(x, k, k)?;
    let raw = conv2d(&conv2d(&pooled, &p.squeeze_conv)?, &p.expand_conv)?; // [N, G*C, K, K]
    let grouped = reshape(&raw, [n, g, c, k * k])?;
    let attn = softmax(&grouped, 1)?;
    idconv_blend(&attn, &p.static_kernels)
}

/// `W[n,c,ij] = sum_g A[n,g,c,ij] * P[g,c,ij]` with gradients to both sides.
fn idconv_blend<E: Scalar>(attn: &Tensor<E>, banks: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, g, c, kk] = attn.shape().0;
    let bs = banks.shape();
    if bs.n() != g || bs.c() != c || bs.h() * bs.w() != kk {
        return Err(Error::shape(format!(
            "kernel banks {} do not match attention {}",
            bs,
            attn.shape()
        )));
    }
    let (k_h, k_w) = (bs.h(), bs.w());
    let (ad, pd) = (attn.data(), banks.data());
    let mut out = vec![E::zero(); n * c * kk];
    for ni in 0..n {
        for gi in 0..g {
            let a_base = (ni * g + gi) * c * kk;
            let p_base = gi * c * kk;
            for i in 0..c * kk {
                out[ni * c * kk + i] = out[ni * c * kk + i] + ad[a_base + i] * pd[p_base + i];
            }
        }
    }
    let (ah, ph) = (attn.clone(), banks.clone());
    Ok(Tensor::from_op(
        Shape::new([n, c, k_h, k_w])?,
        out,
        vec![attn.clone(), banks.clone()],
        Box::new(move |ctx| {
            let (ad, pd) = (ah.data(), ph.data());
            let gr = ctx.out_grad;
            let da = ctx.needs[0].then(|| {
                let mut da = vec![E::zero(); ad.len()];
                for ni in 0..n {
                    for gi in 0..g {
                        let a_base = (ni * g + gi) * c * kk;
                        for i in 0..c * kk {
                            da[a_base + i] = gr[ni * c * kk + i] * pd[gi * c * kk + i];
                        }
                    }
                }
                da
            });
            let dp = ctx.needs[1].then(|| {
                let mut dp = vec![E::zero(); pd.len()];
                for ni in 0..n {
                    for gi in 0..g {
                        let a_base = (ni * g + gi) * c * kk;
                        for i in 0..c * kk {
                            dp[gi * c * kk + i] =
                                dp[gi * c * kk + i] + gr[ni * c * kk + i] * ad[a_base + i];
                        }
                    }
                }
                dp
            });
            vec![da, dp]
        }),
    ))
}

/// Apply the generated kernels: same-shape depthwise convolution with one
/// kernel per sample and channel.
pub fn idconv_forward<E: Scalar>(x: &Tensor<E>, p: &IDConvParams<E>) -> Result<Tensor<E>> {
    let kernels = idconv_generate_kernels(x, p)?;
    depthwise_conv_per_sample(x, &kernels, (p.kernel_size - 1) / 2)
}

/// Overlapping spatial-reduction attention.
pub struct OsraParams<E: Scalar> {
    pub channels: usize,
    pub heads: usize,
    pub sr_stride: usize,
    /// Strided depthwise conv (kernel = stride + 3) plus BN; absent when the
    /// stride is 1, in which case attention runs over all tokens.
    pub osr: Option<(Conv2dParams<E>, NormParams<E>)>,
    /// Local refinement: depthwise 3x3 on the reduced map.
    pub lr_conv: Conv2dParams<E>,
    /// `[1, 1, C, C]`, no bias.
    pub q_weight: Tensor<E>,
    /// `[1, 1, 2C, C]`, no bias.
    pub kv_weight: Tensor<E>,
    /// Relative position bias `[1, heads, N_q, N_kv]`, bound to the stage
    /// resolution and shared by every block of the stage.
    pub rel_bias: Tensor<E>,
}

impl<E: Scalar> OsraParams<E> {
    pub fn new(
        channels: usize,
        heads: usize,
        sr_stride: usize,
        osr: Option<(Conv2dParams<E>, NormParams<E>)>,
        lr_conv: Conv2dParams<E>,
        q_weight: Tensor<E>,
        kv_weight: Tensor<E>,
        rel_bias: Tensor<E>,
    ) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "OSRA channels {channels} not divisible by heads {heads}"
            )));
        }
        match (&osr, sr_stride) {
            (None, 1) => {}
            (Some((conv, _)), s) if s > 1 => {
                if conv.kernel_h != s + 3 || conv.stride != s || !conv.is_depthwise() {
                    return Err(Error::config(format!(
                        "OSR conv must be depthwise kernel {} stride {s}",
                        s + 3
                    )));
                }
            }
            _ => {
                return Err(Error::config(
                    "OSR is present iff the spatial-reduction stride exceeds 1".into(),
                ))
            }
        }
        if q_weight.shape().0 != [1, 1, channels, channels] {
            return Err(Error::shape(format!("q weight must be [1,1,{channels},{channels}]")));
        }
        if kv_weight.shape().0 != [1, 1, 2 * channels, channels] {
            return Err(Error::shape(format!("kv weight must be [1,1,{},{channels}]", 2 * channels)));
        }
        Ok(OsraParams {
            channels,
            heads,
            sr_stride,
            osr,
            lr_conv,
            q_weight,
            kv_weight,
            rel_bias,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// OSRA forward: tokens of `x` query tokens of the reduced, locally refined
/// map; `Z = softmax(Q K^T / sqrt(d) + B) V` reshaped back to the input map.
pub fn osra_forward<E: Scalar>(x: &Tensor<E>, p: &OsraParams<E>) -> Result<Tensor<E>> {
    let [_, c, h, w] = x.shape().0;
    if c != p.channels {
        return Err(Error::shape(format!(
            "input has {c} channels, OSRA expects {}",
            p.channels
        )));
    }
    let reduced = match &p.osr {
        Some((conv, norm)) => batch_norm_inference(&conv2d(x, conv)?, norm)?,
        None => x.clone(),
    };
    let refined = add(&reduced, &conv2d(&reduced, &p.lr_conv)?)?;

    let q = linear(&map_to_tokens(x), &p.q_weight, None)?;
    let kv = linear(&map_to_tokens(&refined), &p.kv_weight, None)?;
    let key = narrow_axis(&kv, 3, 0, c)?;
    let value = narrow_axis(&kv, 3, c, c)?;

    let z = multi_head_attention(&q, &key, &value, p.heads, Some(&p.rel_bias))?;
    tokens_to_map(&z, h, w)
}

/// Squeezed Token Enhancer.
pub struct SteParams<E: Scalar> {
    pub channels: usize,
    pub reduction: usize,
    /// Depthwise 3x3, bias.
    pub dw_conv: Conv2dParams<E>,
    /// 1x1 `C -> C_s`, bias.
    pub squeeze: Conv2dParams<E>,
    /// 1x1 `C_s -> C`, bias.
    pub expand: Conv2dParams<E>,
}

/// Squeezed channel count: `max(round(C/r), 16)`.
pub fn ste_squeezed_channels(channels: usize, reduction: usize) -> usize {
    ((channels as f64 / reduction as f64).round() as usize).max(16)
}

impl<E: Scalar> SteParams<E> {
    pub fn new(
        channels: usize,
        reduction: usize,
        dw_conv: Conv2dParams<E>,
        squeeze: Conv2dParams<E>,
        expand: Conv2dParams<E>,
    ) -> Result<Self> {
        let squeezed = ste_squeezed_channels(channels, reduction);
        if !dw_conv.is_depthwise() || dw_conv.in_channels != channels || dw_conv.kernel_h != 3 {
            return Err(Error::config("STE needs a depthwise 3x3 over all channels".into()));
        }
        if squeeze.in_channels != channels || squeeze.out_channels != squeezed {
            return Err(Error::config(format!("STE squeeze must map {channels}->{squeezed}")));
        }
        if expand.in_channels != squeezed || expand.out_channels != channels {
            return Err(Error::config(format!("STE expand must map {squeezed}->{channels}")));
        }
        Ok(SteParams { channels, reduction, dw_conv, squeeze, expand })
    }

    pub fn param_count(&self) -> usize {
        self.dw_conv.param_count() + self.squeeze.param_count() + self.expand.param_count()
    }
}

/// `expand(squeeze(dwconv3x3(x))) + x`.
pub fn ste_forward<E: Scalar>(x: &Tensor<E>, p: &SteParams<E>) -> Result<Tensor<E>> {
    if x.shape().c() != p.channels {
        return Err(Error::shape(format!(
            "input has {} channels, STE expects {}",
            x.shape().c(),
            p.channels
        )));
    }
    let path = conv2d(&conv2d(&conv2d(x, &p.dw_conv)?, &p.squeeze)?, &p.expand)?;
    add(&path, x)
}

/// The full mixer: channel split, parallel OSRA/IDConv, concat, STE.
pub struct DMixerParams<E: Scalar> {
    pub channels: usize,
    pub attention_ratio: f64,
    pub osra: OsraParams<E>,
    pub idconv: IDConvParams<E>,
    pub ste: SteParams<E>,
}

impl<E: Scalar> DMixerParams<E> {
    pub fn new(
        channels: usize,
        attention_ratio: f64,
        osra: OsraParams<E>,
        idconv: IDConvParams<E>,
        ste: SteParams<E>,
    ) -> Result<Self> {
        let ca = attention_split(channels, attention_ratio)?;
        if osra.channels != ca || idconv.channels != channels - ca || ste.channels != channels {
            return Err(Error::config(format!(
                "mixer branch widths {}/{}/{} disagree with C={channels}, ratio {attention_ratio}",
                osra.channels, idconv.channels, ste.channels
            )));
        }
        Ok(DMixerParams { channels, attention_ratio, osra, idconv, ste })
    }
}

/// Channels routed to the attention branch; both `ratio*C` and `(1-ratio)*C`
/// must be positive integers.
pub fn attention_split(channels: usize, ratio: f64) -> Result<usize> {
    let exact = ratio * channels as f64;
    let ca = exact.round() as usize;
    if (exact - ca as f64).abs() > 1e-9 || ca == 0 || ca >= channels {
        return Err(Error::config(format!(
            "attention ratio {ratio} does not split {channels} channels into positive integers"
        )));
    }
    Ok(ca)
}

/// Branch outputs captured for receptive-field taps.
pub struct MixerTrace<E: Scalar> {
    pub osra: Tensor<E>,
    pub idconv: Tensor<E>,
}

pub fn dmixer_forward<E: Scalar>(x: &Tensor<E>, p: &DMixerParams<E>) -> Result<Tensor<E>> {
    Ok(dmixer_forward_traced(x, p)?.0)
}

/// Forward pass returning the pre-concat branch outputs alongside the result.
pub fn dmixer_forward_traced<E: Scalar>(
    x: &Tensor<E>,
    p: &DMixerParams<E>,
) -> Result<(Tensor<E>, MixerTrace<E>)> {
    let c = x.shape().c();
    if c != p.channels {
        return Err(Error::shape(format!(
            "input has {c} channels, mixer expects {}",
            p.channels
        )));
    }
    let ca = p.osra.channels;
    let x1 = narrow_axis(x, 1, 0, ca)?;
    let x2 = narrow_axis(x, 1, ca, c - ca)?;
    let global = osra_forward(&x1, &p.osra)?;
    let local = idconv_forward(&x2, &p.idconv)?;
    let merged = concat_channels(&[global.clone(), local.clone()])?;
    let out = ste_forward(&merged, &p.ste)?;
    Ok((out, MixerTrace { osra: global, idconv: local }))
}
