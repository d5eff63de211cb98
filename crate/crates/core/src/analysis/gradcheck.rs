//! Central-finite-difference gradient verification.
//!
//! Every case evaluates a scalar loss twice per sampled coordinate (double
//! precision, step 1e-4) and compares against the recorded backward rules.
//! Losses are random projections of the op output so directional errors
//! cannot cancel.

use crate::error::{Error, Result};
use crate::mixer::{DMixerParams, IDConvParams, OsraParams, SteParams};
use crate::net::{block_forward, dpe_forward, msffn_forward, BlockParams, MixerKind, MsFfnParams};
use crate::nn::{
    adaptive_avg_pool, batch_norm_inference, conv2d, depthwise_conv_per_sample, gelu, linear,
    multi_head_attention, softmax, Conv2dParams, NormParams,
};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tape::backward;
use crate::tensor::{
    add, add_scalar, concat_channels, map_to_tokens, mul, scale, split_channels, sum_all,
    tokens_to_map, Tensor,
};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is
    /// smaller).
    pub coords_per_tensor: usize,
    /// Seed of the coordinate sampler.
    pub seed: u64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator
    /// so near-zero gradients are judged absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-4, coords_per_tensor: 32, seed: 0x5eed, denom_floor: 1e-6 }
    }
}

/// Outcome of one case.
#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type LossFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + Send + Sync>;

/// One verification case: tracked input tensors plus a scalar-loss builder
/// that reconstructs the computation from those exact handles.
pub struct SuiteCase {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<Tensor<f64>>,
    pub f: LossFn,
}

/// Compare analytic and central-difference gradients of `f` at `inputs`.
pub fn grad_check(case: &SuiteCase, opts: &GradCheckOptions) -> Result<CaseResult> {
    let loss = (case.f)(&case.inputs)?;
    if loss.numel() != 1 {
        return Err(Error::contract(format!("case {}: loss must be scalar", case.name)));
    }
    backward(&loss)?;
    let analytic: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = SplitMix64::new(opts.seed);
    let mut worst = (0usize, 0usize);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;

    for (ti, t) in case.inputs.iter().enumerate() {
        let coords = sample_coords(t.numel(), opts.coords_per_tensor, &mut rng);
        for ci in coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = t.data().to_vec();
                data[ci] += delta;
                let probe = Tensor::from_vec(t.shape().0, data)?;
                let mut inputs: Vec<Tensor<f64>> = case.inputs.clone();
                inputs[ti] = probe;
                (case.f)(&inputs)?.item()
            };
            let plus = eval(opts.step)?;
            let minus = eval(-opts.step)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[ti][ci];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.denom_floor);
            if rel > max_rel {
                max_rel = rel;
                worst = (ti, ci);
            }
            checked += 1;
        }
    }

    Ok(CaseResult {
        name: case.name.clone(),
        tolerance: case.tolerance,
        max_rel_err: max_rel,
        worst,
        coords_checked: checked,
    })
}

fn sample_coords(numel: usize, want: usize, rng: &mut SplitMix64) -> Vec<usize> {
    if numel <= want {
        return (0..numel).collect();
    }
    // Partial Fisher-Yates over the index range.
    let mut idx: Vec<usize> = (0..numel).collect();
    for i in 0..want {
        let j = i + (rng.next_u64() as usize) % (numel - i);
        idx.swap(i, j);
    }
    idx.truncate(want);
    idx
}

/// A named collection of cases.
pub struct GradCheckSuite {
    pub cases: Vec<SuiteCase>,
}

/// Report of a full suite run.
pub struct SuiteReport {
    pub results: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed())
    }

    pub fn worst(&self) -> Option<&CaseResult> {
        self.results
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl GradCheckSuite {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<SuiteReport> {
        let results = self
            .cases
            .iter()
            .map(|c| grad_check(c, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(SuiteReport { results })
    }
}

// ---------------------------------------------------------------------------
// Case construction

fn tracked(rng: &mut SplitMix64, extents: [usize; 4], spread: f64) -> Tensor<f64> {
    let numel: usize = extents.iter().product();
    Tensor::from_vec(extents, (0..numel).map(|_| rng.uniform(-spread, spread)).collect())
        .unwrap()
        .requires_grad()
}

fn constant(rng: &mut SplitMix64, extents: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = extents.iter().product();
    Tensor::from_vec(extents, (0..numel).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

/// Random projection making the loss sensitive to every output coordinate.
fn project(rng: &mut SplitMix64, out: &Tensor<f64>) -> Tensor<f64> {
    constant(rng, out.shape().0, -1.0, 1.0)
}

fn loss_through(out: Tensor<f64>, proj: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(sum_all(&mul(&out, proj)?))
}

fn conv_from(ts: &[Tensor<f64>], w: usize, b: Option<usize>, stride: usize, pad: usize, groups: usize) -> Result<Conv2dParams<f64>> {
    Conv2dParams::new(ts[w].clone(), b.map(|i| ts[i].clone()), stride, pad, groups)
}

fn norm_from(
    ts: &[Tensor<f64>],
    scale_i: usize,
    shift_i: usize,
    mean: &Tensor<f64>,
    var: &Tensor<f64>,
) -> Result<NormParams<f64>> {
    NormParams::new(ts[scale_i].clone(), ts[shift_i].clone(), mean.clone(), var.clone(), 1e-5)
}

/// The tolerances follow the verification contract: 1e-5 for linear and
/// data-movement ops (1e-8 for the linear projection itself), 1e-5 for
/// softmax, 1e-3 for everything nonlinear.
pub fn standard_op_suite() -> GradCheckSuite {
    let mut rng = SplitMix64::new(0xC0FFEE);
    let mut cases: Vec<SuiteCase> = Vec::new();
    let r = &mut rng;

    // add / mul, equal shapes and per-channel broadcast
    {
        let (a, b) = (tracked(r, [1, 2, 3, 3], 1.0), tracked(r, [1, 2, 3, 3], 1.0));
        let proj = project(r, &a);
        cases.push(SuiteCase {
            name: "add".into(),
            tolerance: 1e-5,
            inputs: vec![a, b],
            f: Box::new(move |ts| loss_through(add(&ts[0], &ts[1])?, &proj)),
        });
    }
    {
        let (a, b) = (tracked(r, [2, 3, 2, 2], 1.0), tracked(r, [1, 3, 1, 1], 1.0));
        let proj = project(r, &a);
        cases.push(SuiteCase {
            name: "add_per_channel".into(),
            tolerance: 1e-5,
            inputs: vec![a, b],
            f: Box::new(move |ts| loss_through(add(&ts[0], &ts[1])?, &proj)),
        });
    }
    {
        let (a, b) = (tracked(r, [1, 2, 3, 3], 1.0), tracked(r, [1, 2, 3, 3], 1.0));
        let proj = project(r, &a);
        cases.push(SuiteCase {
            name: "mul".into(),
            tolerance: 1e-5,
            inputs: vec![a, b],
            f: Box::new(move |ts| loss_through(mul(&ts[0], &ts[1])?, &proj)),
        });
    }
    {
        let (a, b) = (tracked(r, [2, 3, 2, 2], 1.0), tracked(r, [1, 3, 1, 1], 1.0));
        let proj = project(r, &a);
        cases.push(SuiteCase {
            name: "mul_per_channel".into(),
            tolerance: 1e-5,
            inputs: vec![a, b],
            f: Box::new(move |ts| loss_through(mul(&ts[0], &ts[1])?, &proj)),
        });
    }
    {
        let a = tracked(r, [1, 2, 3, 3], 1.0);
        let proj = project(r, &a);
        cases.push(SuiteCase {
            name: "scale_shift".into(),
            tolerance: 1e-5,
            inputs: vec![a],
            f: Box::new(move |ts| loss_through(add_scalar(&scale(&ts[0], 1.7), 0.3), &proj)),
        });
    }
    {
        let x = tracked(r, [1, 4, 3, 3], 1.0);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "split_concat".into(),
            tolerance: 1e-5,
            inputs: vec![x],
            f: Box::new(move |ts| {
                let parts = split_channels(&ts[0], 2)?;
                // swapped order so the slices move
                loss_through(concat_channels(&[parts[1].clone(), parts[0].clone()])?, &proj)
            }),
        });
    }
    {
        let x = tracked(r, [2, 3, 2, 2], 1.0);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "token_layout".into(),
            tolerance: 1e-5,
            inputs: vec![x],
            f: Box::new(move |ts| {
                loss_through(tokens_to_map(&map_to_tokens(&ts[0]), 2, 2)?, &proj)
            }),
        });
    }

    // conv2d, grouped strided and depthwise
    {
        let x = tracked(r, [2, 4, 5, 5], 1.0);
        let w = tracked(r, [6, 2, 3, 3], 0.5);
        let b = tracked(r, [1, 6, 1, 1], 0.5);
        let out = conv2d(&x, &conv_from(&[x.clone(), w.clone(), b.clone()], 1, Some(2), 2, 1, 2).unwrap()).unwrap();
        let proj = project(r, &out);
        cases.push(SuiteCase {
            name: "conv2d_grouped".into(),
            tolerance: 1e-5,
            inputs: vec![x, w, b],
            f: Box::new(move |ts| {
                loss_through(conv2d(&ts[0], &conv_from(ts, 1, Some(2), 2, 1, 2)?)?, &proj)
            }),
        });
    }
    {
        let x = tracked(r, [1, 3, 5, 5], 1.0);
        let w = tracked(r, [3, 1, 3, 3], 0.5);
        let b = tracked(r, [1, 3, 1, 1], 0.5);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "conv2d_depthwise".into(),
            tolerance: 1e-5,
            inputs: vec![x, w, b],
            f: Box::new(move |ts| {
                loss_through(conv2d(&ts[0], &conv_from(ts, 1, Some(2), 1, 1, 3)?)?, &proj)
            }),
        });
    }
    {
        let x = tracked(r, [2, 3, 4, 4], 1.0);
        let k = tracked(r, [2, 3, 3, 3], 0.5);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "depthwise_per_sample".into(),
            tolerance: 1e-5,
            inputs: vec![x, k],
            f: Box::new(move |ts| {
                loss_through(depthwise_conv_per_sample(&ts[0], &ts[1], 1)?, &proj)
            }),
        });
    }
    {
        let x = tracked(r, [1, 2, 5, 5], 1.0);
        let out = adaptive_avg_pool(&x, 3, 3).unwrap();
        let proj = project(r, &out);
        cases.push(SuiteCase {
            name: "adaptive_pool".into(),
            tolerance: 1e-5,
            inputs: vec![x],
            f: Box::new(move |ts| loss_through(adaptive_avg_pool(&ts[0], 3, 3)?, &proj)),
        });
    }

    for (axis, name) in [(1usize, "softmax_channels"), (3usize, "softmax_rows")] {
        let x = tracked(r, [2, 4, 2, 3], 2.0);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: name.into(),
            tolerance: 1e-5,
            inputs: vec![x],
            f: Box::new(move |ts| loss_through(softmax(&ts[0], axis)?, &proj)),
        });
    }

    {
        let x = tracked(r, [2, 3, 2, 2], 1.0);
        let sc = tracked(r, [1, 3, 1, 1], 1.0);
        let sh = tracked(r, [1, 3, 1, 1], 1.0);
        let mean = constant(r, [1, 3, 1, 1], -0.5, 0.5);
        let var = constant(r, [1, 3, 1, 1], 0.5, 2.0);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "batch_norm".into(),
            tolerance: 1e-5,
            inputs: vec![x, sc, sh],
            f: Box::new(move |ts| {
                loss_through(batch_norm_inference(&ts[0], &norm_from(ts, 1, 2, &mean, &var)?)?, &proj)
            }),
        });
    }
    {
        let x = tracked(r, [1, 1, 4, 3], 1.0);
        let w = tracked(r, [1, 1, 2, 3], 0.8);
        let b = tracked(r, [1, 1, 1, 2], 0.5);
        let out = linear(&x, &w, Some(&b)).unwrap();
        let proj = project(r, &out);
        cases.push(SuiteCase {
            name: "linear".into(),
            tolerance: 1e-8,
            inputs: vec![x, w, b],
            f: Box::new(move |ts| loss_through(linear(&ts[0], &ts[1], Some(&ts[2]))?, &proj)),
        });
    }
    {
        let x = tracked(r, [1, 1, 2, 8], 2.0);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "gelu".into(),
            tolerance: 1e-3,
            inputs: vec![x],
            f: Box::new(move |ts| loss_through(gelu(&ts[0]), &proj)),
        });
    }
    {
        let q = tracked(r, [1, 2, 4, 4], 1.0);
        let k = tracked(r, [1, 2, 3, 4], 1.0);
        let v = tracked(r, [1, 2, 3, 4], 1.0);
        let b = tracked(r, [1, 2, 4, 3], 0.5);
        let proj = project(r, &q);
        cases.push(SuiteCase {
            name: "attention".into(),
            tolerance: 1e-3,
            inputs: vec![q, k, v, b],
            f: Box::new(move |ts| {
                loss_through(multi_head_attention(&ts[0], &ts[1], &ts[2], 2, Some(&ts[3]))?, &proj)
            }),
        });
    }

    // IDConv: kernel generation alone, then the full op.
    // C=4, K=3, G=2, r=2 (squeezed 2).
    let idconv_from = |ts: &[Tensor<f64>]| -> Result<IDConvParams<f64>> {
        IDConvParams::new(
            4,
            3,
            2,
            2,
            conv_from(ts, 1, Some(2), 1, 0, 1)?,
            conv_from(ts, 3, Some(4), 1, 0, 1)?,
            ts[5].clone(),
        )
    };
    let idconv_inputs = |r: &mut SplitMix64| {
        vec![
            tracked(r, [2, 4, 5, 5], 1.0),
            tracked(r, [2, 4, 1, 1], 0.8),
            tracked(r, [1, 2, 1, 1], 0.5),
            tracked(r, [8, 2, 1, 1], 0.8),
            tracked(r, [1, 8, 1, 1], 0.5),
            tracked(r, [2, 4, 3, 3], 0.8),
        ]
    };
    {
        let inputs = idconv_inputs(r);
        let proj = constant(r, [2, 4, 3, 3], -1.0, 1.0);
        cases.push(SuiteCase {
            name: "idconv_kernels".into(),
            tolerance: 1e-3,
            inputs,
            f: Box::new(move |ts| {
                loss_through(crate::mixer::idconv_generate_kernels(&ts[0], &idconv_from(ts)?)?, &proj)
            }),
        });
    }
    {
        let inputs = idconv_inputs(r);
        let proj = constant(r, [2, 4, 5, 5], -1.0, 1.0);
        cases.push(SuiteCase {
            name: "idconv_forward".into(),
            tolerance: 1e-3,
            inputs,
            f: Box::new(move |ts| {
                loss_through(crate::mixer::idconv_forward(&ts[0], &idconv_from(ts)?)?, &proj)
            }),
        });
    }

    // STE over 4 channels (squeezed floor pushes it to 16).
    {
        let x = tracked(r, [1, 4, 4, 4], 1.0);
        let dww = tracked(r, [4, 1, 3, 3], 0.5);
        let dwb = tracked(r, [1, 4, 1, 1], 0.3);
        let sqw = tracked(r, [16, 4, 1, 1], 0.5);
        let sqb = tracked(r, [1, 16, 1, 1], 0.3);
        let exw = tracked(r, [4, 16, 1, 1], 0.5);
        let exb = tracked(r, [1, 4, 1, 1], 0.3);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "ste".into(),
            tolerance: 1e-3,
            inputs: vec![x, dww, dwb, sqw, sqb, exw, exb],
            f: Box::new(move |ts| {
                let p = SteParams::new(
                    4,
                    8,
                    conv_from(ts, 1, Some(2), 1, 1, 4)?,
                    conv_from(ts, 3, Some(4), 1, 0, 1)?,
                    conv_from(ts, 5, Some(6), 1, 0, 1)?,
                )?;
                loss_through(crate::mixer::ste_forward(&ts[0], &p)?, &proj)
            }),
        });
    }

    // OSRA: C=4, 2 heads, reduction stride 2 on a 4x4 map (16 -> 4 tokens).
    let osra_from = move |ts: &[Tensor<f64>], mean: &Tensor<f64>, var: &Tensor<f64>| -> Result<OsraParams<f64>> {
        OsraParams::new(
            4,
            2,
            2,
            Some((conv_from(ts, 1, None, 2, 2, 4)?, norm_from(ts, 7, 8, mean, var)?)),
            conv_from(ts, 2, Some(3), 1, 1, 4)?,
            ts[4].clone(),
            ts[5].clone(),
            ts[6].clone(),
        )
    };
    {
        let x = tracked(r, [1, 4, 4, 4], 1.0);
        let osrw = tracked(r, [4, 1, 5, 5], 0.4);
        let lrw = tracked(r, [4, 1, 3, 3], 0.4);
        let lrb = tracked(r, [1, 4, 1, 1], 0.3);
        let qw = tracked(r, [1, 1, 4, 4], 0.6);
        let kvw = tracked(r, [1, 1, 8, 4], 0.6);
        let bias = tracked(r, [1, 2, 16, 4], 0.5);
        let nsc = tracked(r, [1, 4, 1, 1], 1.0);
        let nsh = tracked(r, [1, 4, 1, 1], 0.5);
        let mean = constant(r, [1, 4, 1, 1], -0.3, 0.3);
        let var = constant(r, [1, 4, 1, 1], 0.5, 1.5);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "osra".into(),
            tolerance: 1e-3,
            inputs: vec![x, osrw, lrw, lrb, qw, kvw, bias, nsc, nsh],
            f: Box::new(move |ts| {
                loss_through(crate::mixer::osra_forward(&ts[0], &osra_from(ts, &mean, &var)?)?, &proj)
            }),
        });
    }

    // DPE and MS-FFN (scales {1,3} over hidden=8).
    {
        let x = tracked(r, [1, 3, 5, 5], 1.0);
        let w = tracked(r, [3, 1, 7, 7], 0.3);
        let b = tracked(r, [1, 3, 1, 1], 0.3);
        let proj = project(r, &x);
        cases.push(SuiteCase {
            name: "dpe".into(),
            tolerance: 1e-3,
            inputs: vec![x, w, b],
            f: Box::new(move |ts| {
                loss_through(dpe_forward(&ts[0], &conv_from(ts, 1, Some(2), 1, 3, 3)?)?, &proj)
            }),
        });
    }
    let ffn_from = |ts: &[Tensor<f64>], base: usize| -> Result<MsFfnParams<f64>> {
        MsFfnParams::new(
            4,
            2,
            vec![1, 3],
            conv_from(ts, base, Some(base + 1), 1, 0, 1)?,
            vec![
                conv_from(ts, base + 2, Some(base + 3), 1, 0, 4)?,
                conv_from(ts, base + 4, Some(base + 5), 1, 1, 4)?,
            ],
            conv_from(ts, base + 6, Some(base + 7), 1, 0, 1)?,
        )
    };
    let ffn_inputs = |r: &mut SplitMix64| {
        vec![
            tracked(r, [8, 4, 1, 1], 0.5),
            tracked(r, [1, 8, 1, 1], 0.3),
            tracked(r, [4, 1, 1, 1], 0.5),
            tracked(r, [1, 4, 1, 1], 0.3),
            tracked(r, [4, 1, 3, 3], 0.5),
            tracked(r, [1, 4, 1, 1], 0.3),
            tracked(r, [4, 8, 1, 1], 0.5),
            tracked(r, [1, 4, 1, 1], 0.3),
        ]
    };
    {
        let mut inputs = vec![tracked(r, [1, 4, 4, 4], 1.0)];
        inputs.extend(ffn_inputs(r));
        let proj = constant(r, [1, 4, 4, 4], -1.0, 1.0);
        cases.push(SuiteCase {
            name: "msffn".into(),
            tolerance: 1e-3,
            inputs,
            f: Box::new(move |ts| loss_through(msffn_forward(&ts[0], &ffn_from(ts, 1)?)?, &proj)),
        });
    }

    // Full dual mixer: C=4 (2 attention + 2 conv channels) on a 4x4 map.
    // Input slots: x,
    //   osra: osr_w, lr_w, lr_b, q_w, kv_w, bias, osr_scale, osr_shift (1..=8)
    //   idconv: sq_w, sq_b, ex_w, ex_b, banks (9..=13)
    //   ste: dw_w, dw_b, sq_w, sq_b, ex_w, ex_b (14..=19)
    let dmixer_from = move |ts: &[Tensor<f64>], mean: &Tensor<f64>, var: &Tensor<f64>| -> Result<DMixerParams<f64>> {
        let osra = OsraParams::new(
            2,
            1,
            2,
            Some((conv_from(ts, 1, None, 2, 2, 2)?, norm_from(ts, 7, 8, mean, var)?)),
            conv_from(ts, 2, Some(3), 1, 1, 2)?,
            ts[4].clone(),
            ts[5].clone(),
            ts[6].clone(),
        )?;
        let idconv = IDConvParams::new(
            2,
            3,
            2,
            4,
            conv_from(ts, 9, Some(10), 1, 0, 1)?,
            conv_from(ts, 11, Some(12), 1, 0, 1)?,
            ts[13].clone(),
        )?;
        let ste = SteParams::new(
            4,
            8,
            conv_from(ts, 14, Some(15), 1, 1, 4)?,
            conv_from(ts, 16, Some(17), 1, 0, 1)?,
            conv_from(ts, 18, Some(19), 1, 0, 1)?,
        )?;
        DMixerParams::new(4, 0.5, osra, idconv, ste)
    };
    let dmixer_inputs = |r: &mut SplitMix64| {
        vec![
            tracked(r, [1, 4, 4, 4], 1.0),
            tracked(r, [2, 1, 5, 5], 0.4),
            tracked(r, [2, 1, 3, 3], 0.4),
            tracked(r, [1, 2, 1, 1], 0.3),
            tracked(r, [1, 1, 2, 2], 0.6),
            tracked(r, [1, 1, 4, 2], 0.6),
            tracked(r, [1, 1, 16, 4], 0.4),
            tracked(r, [1, 2, 1, 1], 1.0),
            tracked(r, [1, 2, 1, 1], 0.4),
            tracked(r, [1, 2, 1, 1], 0.6),
            tracked(r, [1, 1, 1, 1], 0.3),
            tracked(r, [4, 1, 1, 1], 0.6),
            tracked(r, [1, 4, 1, 1], 0.3),
            tracked(r, [2, 2, 3, 3], 0.6),
            tracked(r, [4, 1, 3, 3], 0.4),
            tracked(r, [1, 4, 1, 1], 0.3),
            tracked(r, [16, 4, 1, 1], 0.4),
            tracked(r, [1, 16, 1, 1], 0.3),
            tracked(r, [4, 16, 1, 1], 0.4),
            tracked(r, [1, 4, 1, 1], 0.3),
        ]
    };
    {
        let inputs = dmixer_inputs(r);
        let mean = constant(r, [1, 2, 1, 1], -0.3, 0.3);
        let var = constant(r, [1, 2, 1, 1], 0.5, 1.5);
        let proj = constant(r, [1, 4, 4, 4], -1.0, 1.0);
        cases.push(SuiteCase {
            name: "dmixer".into(),
            tolerance: 1e-3,
            inputs,
            f: Box::new(move |ts| {
                loss_through(crate::mixer::dmixer_forward(&ts[0], &dmixer_from(ts, &mean, &var)?)?, &proj)
            }),
        });
    }

    // Full block around the same mixer: DPE, two norms, and a {1,3} FFN.
    // Slots 0..=19 as in the mixer case, then:
    //   dpe_w, dpe_b (20, 21), n1_scale, n1_shift (22, 23),
    //   n2_scale, n2_shift (24, 25), ffn (26..=33)
    {
        let mut inputs = dmixer_inputs(r);
        inputs.push(tracked(r, [4, 1, 7, 7], 0.3));
        inputs.push(tracked(r, [1, 4, 1, 1], 0.3));
        inputs.push(tracked(r, [1, 4, 1, 1], 1.0));
        inputs.push(tracked(r, [1, 4, 1, 1], 0.4));
        inputs.push(tracked(r, [1, 4, 1, 1], 1.0));
        inputs.push(tracked(r, [1, 4, 1, 1], 0.4));
        inputs.extend(ffn_inputs(r));
        let osr_mean = constant(r, [1, 2, 1, 1], -0.3, 0.3);
        let osr_var = constant(r, [1, 2, 1, 1], 0.5, 1.5);
        let n_mean = constant(r, [1, 4, 1, 1], -0.3, 0.3);
        let n_var = constant(r, [1, 4, 1, 1], 0.5, 1.5);
        let proj = constant(r, [1, 4, 4, 4], -1.0, 1.0);
        cases.push(SuiteCase {
            name: "block".into(),
            tolerance: 1e-3,
            inputs,
            f: Box::new(move |ts| {
                let block = BlockParams {
                    dpe: conv_from(ts, 20, Some(21), 1, 3, 4)?,
                    norm1: norm_from(ts, 22, 23, &n_mean, &n_var)?,
                    mixer: MixerKind::Dual(dmixer_from(ts, &osr_mean, &osr_var)?),
                    norm2: norm_from(ts, 24, 25, &n_mean, &n_var)?,
                    ffn: ffn_from(ts, 26)?,
                };
                loss_through(block_forward(&ts[0], &block)?, &proj)
            }),
        });
    }

    GradCheckSuite { cases }
}

/// Test fixture: a scale op whose backward rule is deliberately wrong (it
/// claims twice the true gradient). Exists so the checker's failure path can
/// be exercised.
#[doc(hidden)]
pub fn corrupted_scale_fixture(x: &Tensor<f64>, k: f64) -> Tensor<f64> {
    let out = x.data().iter().map(|&v| v * k).collect();
    Tensor::from_op(
        x.shape(),
        out,
        vec![x.clone()],
        Box::new(move |ctx| {
            let da = ctx.needs[0]
                .then(|| ctx.out_grad.iter().map(|&g| g * (2.0 * k)).collect());
            vec![da]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_case_is_nearly_exact() {
        let suite = standard_op_suite();
        let case = suite.cases.iter().find(|c| c.name == "linear").unwrap();
        let res = grad_check(case, &GradCheckOptions::default()).unwrap();
        assert!(res.passed(), "linear max rel err {}", res.max_rel_err);
        assert!(res.max_rel_err < 1e-8);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut rng = SplitMix64::new(1);
        let x = tracked(&mut rng, [1, 1, 2, 4], 1.0);
        let proj = constant(&mut rng, [1, 1, 2, 4], -1.0, 1.0);
        let case = SuiteCase {
            name: "corrupted".into(),
            tolerance: 1e-3,
            inputs: vec![x],
            f: Box::new(move |ts| loss_through(corrupted_scale_fixture(&ts[0], 1.5), &proj)),
        };
        let res = grad_check(&case, &GradCheckOptions::default()).unwrap();
        assert!(!res.passed(), "corrupted rule must fail, err {}", res.max_rel_err);
    }
}
