//! Model assembly and the forward pass with tap points.

use crate::error::{Error, Result};
use crate::mixer::{
    attention_split, dmixer_forward, dmixer_forward_traced, idconv_squeezed_channels,
    ste_squeezed_channels, DMixerParams, IDConvParams, OsraParams, SteParams,
};
use crate::net::config::{reduced_extent, MixerMode, ModelConfig, DEFAULT_FFN_SCALES};
use crate::net::ffn::{dpe_forward, msffn_forward, MsFfnParams};
use crate::net::params::{Init, ParamSource, ParamStore};
use crate::nn::{batch_norm_inference, conv2d, global_avg_pool, linear, Conv2dParams, NormParams};
use crate::scalar::Scalar;
use crate::tensor::{add, reshape, Tensor};

/// IDConv squeeze/expand channel reduction.
pub const IDCONV_REDUCTION: usize = 4;
/// STE channel reduction (floored at 16 squeezed channels).
pub const STE_REDUCTION: usize = 8;
const BN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    /// Mark learnable parameters as requiring gradient. Leave off for plain
    /// inference so forward passes record nothing.
    pub grad_params: bool,
}

pub struct EmbedParams<E: Scalar> {
    pub conv: Conv2dParams<E>,
    pub norm: NormParams<E>,
}

pub enum MixerKind<E: Scalar> {
    Dual(DMixerParams<E>),
    /// Plain depthwise 7x7 followed by STE; the receptive-field baseline.
    DwBaseline { dw: Conv2dParams<E>, ste: SteParams<E> },
}

pub struct BlockParams<E: Scalar> {
    pub dpe: Conv2dParams<E>,
    pub norm1: NormParams<E>,
    pub mixer: MixerKind<E>,
    pub norm2: NormParams<E>,
    pub ffn: MsFfnParams<E>,
}

pub struct StageParams<E: Scalar> {
    pub embed: EmbedParams<E>,
    pub blocks: Vec<BlockParams<E>>,
}

pub struct Model<E: Scalar> {
    pub(crate) cfg: ModelConfig,
    pub(crate) store: ParamStore<E>,
    pub(crate) stages: Vec<StageParams<E>>,
    pub(crate) head_weight: Tensor<E>,
    pub(crate) head_bias: Tensor<E>,
}

struct Builder<'s, E: Scalar> {
    store: ParamStore<E>,
    source: &'s mut dyn ParamSource<E>,
    grad: bool,
}

impl<'s, E: Scalar> Builder<'s, E> {
    fn tensor(
        &mut self,
        name: String,
        extents: [usize; 4],
        init: Init,
        learnable: bool,
    ) -> Result<Tensor<E>> {
        self.store.register(
            self.source,
            &name,
            extents,
            init,
            learnable,
            self.grad && learnable,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        prefix: &str,
        out_channels: usize,
        in_per_group: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Conv2dParams<E>> {
        let weight = self.tensor(
            format!("{prefix}.weight"),
            [out_channels, in_per_group, kernel, kernel],
            Init::TruncNormal { std: INIT_STD },
            true,
        )?;
        let bias = if bias {
            Some(self.tensor(format!("{prefix}.bias"), [1, out_channels, 1, 1], Init::Zeros, true)?)
        } else {
            None
        };
        Conv2dParams::new(weight, bias, stride, padding, groups)
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> Result<NormParams<E>> {
        let scale = self.tensor(format!("{prefix}.scale"), [1, channels, 1, 1], Init::Ones, true)?;
        let shift = self.tensor(format!("{prefix}.shift"), [1, channels, 1, 1], Init::Zeros, true)?;
        let mean = self.tensor(
            format!("{prefix}.running_mean"),
            [1, channels, 1, 1],
            Init::Zeros,
            false,
        )?;
        let var = self.tensor(
            format!("{prefix}.running_var"),
            [1, channels, 1, 1],
            Init::Ones,
            false,
        )?;
        NormParams::new(scale, shift, mean, var, BN_EPS)
    }

    fn ste(&mut self, prefix: &str, channels: usize) -> Result<SteParams<E>> {
        let squeezed = ste_squeezed_channels(channels, STE_REDUCTION);
        let dw = self.conv(&format!("{prefix}.dw"), channels, 1, 3, 1, 1, channels, true)?;
        let squeeze = self.conv(&format!("{prefix}.squeeze"), squeezed, channels, 1, 1, 0, 1, true)?;
        let expand = self.conv(&format!("{prefix}.expand"), channels, squeezed, 1, 1, 0, 1, true)?;
        SteParams::new(channels, STE_REDUCTION, dw, squeeze, expand)
    }
}

/// Assemble a model from its configuration, drawing parameter data from
/// `source`. Registration order is the forward order, so identical
/// (seed, config) pairs yield identical stores.
pub fn build_model<E: Scalar>(
    cfg: &ModelConfig,
    opts: BuildOptions,
    source: &mut dyn ParamSource<E>,
) -> Result<Model<E>> {
    cfg.validate()?;
    let mut b = Builder { store: ParamStore::new(), source, grad: opts.grad_params };

    let mut stages = Vec::with_capacity(4);
    let mut in_channels = 3usize;
    for (i, s) in cfg.stages.iter().enumerate() {
        let sn = i + 1;
        let c = s.channels;
        let (k, stride, pad) = if i == 0 { (7, 4, 3) } else { (3, 2, 1) };
        let embed = EmbedParams {
            conv: b.conv(&format!("stage{sn}.embed.conv"), c, in_channels, k, stride, pad, 1, false)?,
            norm: b.norm(&format!("stage{sn}.embed.norm"), c)?,
        };

        let rel_bias = if cfg.mixer_mode == MixerMode::Dmixer {
            let nq = s.resolution[0] * s.resolution[1];
            let nkv = reduced_extent(s.resolution[0], s.sr_stride)
                * reduced_extent(s.resolution[1], s.sr_stride);
            Some(b.tensor(
                format!("stage{sn}.attn_bias"),
                [1, s.heads, nq, nkv],
                Init::Zeros,
                true,
            )?)
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(s.blocks);
        for j in 0..s.blocks {
            let p = format!("stage{sn}.block{j}");
            let dpe = b.conv(&format!("{p}.dpe"), c, 1, 7, 1, 3, c, true)?;
            let norm1 = b.norm(&format!("{p}.norm1"), c)?;

            let mixer = match cfg.mixer_mode {
                MixerMode::Dmixer => {
                    let ca = attention_split(c, cfg.attention_ratio)?;
                    let cc = c - ca;
                    let osr = if s.sr_stride > 1 {
                        let ok = s.sr_stride + 3;
                        let conv = b.conv(
                            &format!("{p}.mixer.osra.osr"),
                            ca,
                            1,
                            ok,
                            s.sr_stride,
                            (ok - 1) / 2,
                            ca,
                            false,
                        )?;
                        let norm = b.norm(&format!("{p}.mixer.osra.osr_norm"), ca)?;
                        Some((conv, norm))
                    } else {
                        None
                    };
                    let lr = b.conv(&format!("{p}.mixer.osra.lr"), ca, 1, 3, 1, 1, ca, true)?;
                    let q_weight = b.tensor(
                        format!("{p}.mixer.osra.q.weight"),
                        [1, 1, ca, ca],
                        Init::TruncNormal { std: INIT_STD },
                        true,
                    )?;
                    let kv_weight = b.tensor(
                        format!("{p}.mixer.osra.kv.weight"),
                        [1, 1, 2 * ca, ca],
                        Init::TruncNormal { std: INIT_STD },
                        true,
                    )?;
                    let osra = OsraParams::new(
                        ca,
                        s.heads,
                        s.sr_stride,
                        osr,
                        lr,
                        q_weight,
                        kv_weight,
                        rel_bias.clone().expect("dual mixer has a bias table"),
                    )?;

                    let squeezed = idconv_squeezed_channels(cc, IDCONV_REDUCTION);
                    let squeeze =
                        b.conv(&format!("{p}.mixer.idconv.squeeze"), squeezed, cc, 1, 1, 0, 1, true)?;
                    let expand = b.conv(
                        &format!("{p}.mixer.idconv.expand"),
                        s.idconv_groups * cc,
                        squeezed,
                        1,
                        1,
                        0,
                        1,
                        true,
                    )?;
                    let banks = b.tensor(
                        format!("{p}.mixer.idconv.kernels"),
                        [s.idconv_groups, cc, s.idconv_kernel, s.idconv_kernel],
                        Init::TruncNormal { std: INIT_STD },
                        true,
                    )?;
                    let idconv = IDConvParams::new(
                        cc,
                        s.idconv_kernel,
                        s.idconv_groups,
                        IDCONV_REDUCTION,
                        squeeze,
                        expand,
                        banks,
                    )?;
                    let ste = b.ste(&format!("{p}.mixer.ste"), c)?;
                    MixerKind::Dual(DMixerParams::new(c, cfg.attention_ratio, osra, idconv, ste)?)
                }
                MixerMode::DwconvBaseline => {
                    let dw = b.conv(&format!("{p}.mixer.dw"), c, 1, 7, 1, 3, c, true)?;
                    let ste = b.ste(&format!("{p}.mixer.ste"), c)?;
                    MixerKind::DwBaseline { dw, ste }
                }
            };

            let norm2 = b.norm(&format!("{p}.norm2"), c)?;
            let hidden = s.ffn_expansion * c;
            let group = hidden / DEFAULT_FFN_SCALES.len();
            let fc1 = b.conv(&format!("{p}.ffn.fc1"), hidden, c, 1, 1, 0, 1, true)?;
            let mut scale_convs = Vec::new();
            for sk in DEFAULT_FFN_SCALES {
                scale_convs.push(b.conv(
                    &format!("{p}.ffn.dw{sk}"),
                    group,
                    1,
                    sk,
                    1,
                    (sk - 1) / 2,
                    group,
                    true,
                )?);
            }
            let fc2 = b.conv(&format!("{p}.ffn.fc2"), c, hidden, 1, 1, 0, 1, true)?;
            let ffn = MsFfnParams::new(
                c,
                s.ffn_expansion,
                DEFAULT_FFN_SCALES.to_vec(),
                fc1,
                scale_convs,
                fc2,
            )?;

            blocks.push(BlockParams { dpe, norm1, mixer, norm2, ffn });
        }
        stages.push(StageParams { embed, blocks });
        in_channels = c;
    }

    let c4 = cfg.stages[3].channels;
    let head_weight = b.tensor(
        "head.fc.weight".to_string(),
        [1, 1, cfg.num_classes, c4],
        Init::TruncNormal { std: INIT_STD },
        true,
    )?;
    let head_bias = b.tensor("head.fc.bias".to_string(), [1, 1, 1, cfg.num_classes], Init::Zeros, true)?;

    Ok(Model { cfg: cfg.clone(), store: b.store, stages, head_weight, head_bias })
}

/// A point in the forward pass whose feature map can be extracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    /// Output of the first patch embed.
    Stem,
    /// Output of the stage's last block (1-based).
    Stage(usize),
    /// A branch inside one block's mixer.
    Branch { stage: usize, block: usize, sel: BranchSel },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSel {
    Osra,
    IdConv,
    /// The mixer output after STE.
    Mixer,
}

impl Tap {
    /// Parse `stem`, `stageN`, or `stageN.blockM.{osra|idconv|mixer}`.
    fn parse(text: &str) -> Option<Tap> {
        if text == "stem" {
            return Some(Tap::Stem);
        }
        let mut parts = text.split('.');
        let stage = parts.next()?.strip_prefix("stage")?.parse::<usize>().ok()?;
        let Some(block_part) = parts.next() else {
            return Some(Tap::Stage(stage));
        };
        let block = block_part.strip_prefix("block")?.parse::<usize>().ok()?;
        let sel = match parts.next()? {
            "osra" => BranchSel::Osra,
            "idconv" => BranchSel::IdConv,
            "mixer" => BranchSel::Mixer,
            _ => return None,
        };
        if parts.next().is_some() {
            return None;
        }
        Some(Tap::Branch { stage, block, sel })
    }
}

struct BlockTrace<E: Scalar> {
    osra: Option<Tensor<E>>,
    idconv: Option<Tensor<E>>,
    mixer: Tensor<E>,
}

fn block_run<E: Scalar>(
    x: &Tensor<E>,
    b: &BlockParams<E>,
    trace: bool,
) -> Result<(Tensor<E>, Option<BlockTrace<E>>)> {
    let pos = dpe_forward(x, &b.dpe)?;
    let normed = batch_norm_inference(&pos, &b.norm1)?;
    let (mixed, tr) = match &b.mixer {
        MixerKind::Dual(p) => {
            if trace {
                let (m, t) = dmixer_forward_traced(&normed, p)?;
                let tr = BlockTrace { osra: Some(t.osra), idconv: Some(t.idconv), mixer: m.clone() };
                (m, Some(tr))
            } else {
                (dmixer_forward(&normed, p)?, None)
            }
        }
        MixerKind::DwBaseline { dw, ste } => {
            let m = crate::mixer::ste_forward(&conv2d(&normed, dw)?, ste)?;
            let tr = trace.then(|| BlockTrace { osra: None, idconv: None, mixer: m.clone() });
            (m, tr)
        }
    };
    let y = add(&mixed, &pos)?;
    let ffned = msffn_forward(&batch_norm_inference(&y, &b.norm2)?, &b.ffn)?;
    let out = add(&ffned, &y)?;
    Ok((out, tr))
}

/// One block: `X = DPE(x); Y = mixer(norm1(X)) + X; Z = FFN(norm2(Y)) + Y`.
pub fn block_forward<E: Scalar>(x: &Tensor<E>, b: &BlockParams<E>) -> Result<Tensor<E>> {
    Ok(block_run(x, b, false)?.0)
}

impl<E: Scalar> Model<E> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.store
    }

    /// Every tap selector this model accepts.
    pub fn available_taps(&self) -> Vec<String> {
        let mut taps = vec!["stem".to_string()];
        for (i, s) in self.cfg.stages.iter().enumerate() {
            let sn = i + 1;
            taps.push(format!("stage{sn}"));
            for j in 0..s.blocks {
                if self.cfg.mixer_mode == MixerMode::Dmixer {
                    taps.push(format!("stage{sn}.block{j}.osra"));
                    taps.push(format!("stage{sn}.block{j}.idconv"));
                }
                taps.push(format!("stage{sn}.block{j}.mixer"));
            }
        }
        taps
    }

    /// Parse and range-check a tap selector against this model.
    pub fn resolve_tap(&self, text: &str) -> Result<Tap> {
        let unknown = || {
            Error::selector(format!(
                "unknown tap '{text}'; available: {}",
                self.available_taps().join(", ")
            ))
        };
        let tap = Tap::parse(text).ok_or_else(unknown)?;
        match tap {
            Tap::Stem => {}
            Tap::Stage(s) => {
                if s == 0 || s > self.stages.len() {
                    return Err(unknown());
                }
            }
            Tap::Branch { stage, block, sel } => {
                if stage == 0 || stage > self.stages.len() {
                    return Err(unknown());
                }
                if block >= self.cfg.stages[stage - 1].blocks {
                    return Err(unknown());
                }
                if self.cfg.mixer_mode == MixerMode::DwconvBaseline && sel != BranchSel::Mixer {
                    return Err(unknown());
                }
            }
        }
        Ok(tap)
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let want = self.cfg.input_resolution();
        let s = x.shape();
        if s.c() != 3 || s.h() != want[0] || s.w() != want[1] {
            return Err(Error::config(format!(
                "input {} does not match the bound resolution [N,3,{},{}]",
                s, want[0], want[1]
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<E>, want: Option<&Tap>) -> Result<Tensor<E>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            cur = batch_norm_inference(&conv2d(&cur, &stage.embed.conv)?, &stage.embed.norm)?;
            if i == 0 && want == Some(&Tap::Stem) {
                return Ok(cur);
            }
            for (j, blk) in stage.blocks.iter().enumerate() {
                let branch = match want {
                    Some(&Tap::Branch { stage: s, block: b, sel }) if s == i + 1 && b == j => {
                        Some(sel)
                    }
                    _ => None,
                };
                let (next, trace) = block_run(&cur, blk, branch.is_some())?;
                if let Some(sel) = branch {
                    let tr = trace.expect("trace requested");
                    let picked = match sel {
                        BranchSel::Osra => tr.osra,
                        BranchSel::IdConv => tr.idconv,
                        BranchSel::Mixer => Some(tr.mixer),
                    };
                    return picked.ok_or_else(|| {
                        Error::selector("branch not present in this mixer mode".into())
                    });
                }
                cur = next;
            }
            if want == Some(&Tap::Stage(i + 1)) {
                return Ok(cur);
            }
        }
        if want.is_some() {
            // resolve_tap already range-checked; this is unreachable in practice.
            return Err(Error::selector("tap not reached".into()));
        }
        let n = cur.shape().n();
        let c = cur.shape().c();
        let pooled = global_avg_pool(&cur)?;
        let feats = reshape(&pooled, [1, 1, n, c])?;
        linear(&feats, &self.head_weight, Some(&self.head_bias))
    }

    /// Classify a batch: logits of shape `[1, 1, N, num_classes]`.
    pub fn forward_classify(&self, images: &Tensor<E>) -> Result<Tensor<E>> {
        self.run(images, None)
    }

    /// Run forward up to a tap point and return that feature map.
    pub fn forward_tap(&self, images: &Tensor<E>, tap: &str) -> Result<Tensor<E>> {
        let tap = self.resolve_tap(tap)?;
        self.run(images, Some(&tap))
    }
}
