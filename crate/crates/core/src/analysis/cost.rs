//! Analytic parameter and FLOPs accounting.
//!
//! Counting convention (documented in full in `docs/cost_accounting.md`):
//! one multiply-accumulate is one FLOP. Convolutions, linear layers, and the
//! two attention matrix products are counted as MACs; pooling, softmax, and
//! normalization as one op per element; elementwise residual adds,
//! activation evaluations, and bias additions are not counted. Parameter
//! counts cover learnable tensors only (normalization running statistics are
//! state, not parameters).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixer::ste_squeezed_channels;
use crate::net::{reduced_extent, MixerKind, MixerMode, Model};
use crate::nn::Conv2dParams;
use crate::scalar::Scalar;

pub const CONVENTION: &str = "1 MAC = 1 FLOP; pool/softmax/norm 1 op per element; \
elementwise adds, activations, and biases uncounted; learnable parameters only";

#[derive(Debug, Clone, Serialize)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer parameter counts and FLOPs with declared convention.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub convention: String,
    /// Resolution the FLOPs column was evaluated at; absent for parameter-only
    /// reports.
    pub resolution: Option<[usize; 2]>,
}

impl CostReport {
    fn from_rows(rows: Vec<CostRow>, resolution: Option<[usize; 2]>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        CostReport {
            rows,
            total_params,
            total_flops,
            convention: CONVENTION.to_string(),
            resolution,
        }
    }

    /// Collapse rows to their first `depth` dot-separated name components.
    pub fn aggregate(&self, depth: usize) -> Vec<CostRow> {
        let mut out: Vec<CostRow> = Vec::new();
        for row in &self.rows {
            let key: String = row
                .name
                .split('.')
                .take(depth)
                .collect::<Vec<_>>()
                .join(".");
            match out.last_mut() {
                Some(last) if last.name == key => {
                    last.params += row.params;
                    last.flops += row.flops;
                }
                _ => out.push(CostRow { name: key, params: row.params, flops: row.flops }),
            }
        }
        out
    }

    /// Aligned plain-text table.
    pub fn render_text(&self, depth: usize) -> String {
        let rows = self.aggregate(depth);
        let name_w = rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        s.push_str(&format!("{:<name_w$}  {:>14}  {:>16}\n", "layer", "params", "flops"));
        for r in &rows {
            s.push_str(&format!("{:<name_w$}  {:>14}  {:>16}\n", r.name, r.params, r.flops));
        }
        s.push_str(&format!("{:<name_w$}  {:>14}  {:>16}\n", "total", self.total_params, self.total_flops));
        if let Some(res) = self.resolution {
            s.push_str(&format!("resolution: {}x{}\n", res[0], res[1]));
        }
        s.push_str(&format!("convention: {}\n", self.convention));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// STE FLOPs at one resolution: `H*W*(9C + 2*C*C_s)`, which reduces to the
/// closed form `H*W*C*(2C/r + 9)` whenever `C/r >= 16`.
pub fn ste_flops(channels: usize, reduction: usize, h: usize, w: usize) -> u64 {
    let cs = ste_squeezed_channels(channels, reduction) as u64;
    let c = channels as u64;
    (h * w) as u64 * (9 * c + 2 * c * cs)
}

fn conv_flops<E: Scalar>(p: &Conv2dParams<E>, out_h: usize, out_w: usize) -> u64 {
    (out_h * out_w * p.out_channels * (p.in_channels / p.groups) * p.kernel_h * p.kernel_w) as u64
}

/// Total window area of an adaptive pool (1 op per element read).
fn pool_flops(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> u64 {
    let area = |i: usize, inp: usize, out: usize| ((i + 1) * inp).div_ceil(out) - i * inp / out;
    let rows: u64 = (0..out_h).map(|i| area(i, in_h, out_h) as u64).sum();
    let cols: u64 = (0..out_w).map(|j| area(j, in_w, out_w) as u64).sum();
    rows * cols
}

struct Walker<'m, E: Scalar> {
    model: &'m Model<E>,
    rows: Vec<CostRow>,
}

impl<'m, E: Scalar> Walker<'m, E> {
    fn params_of(&self, name: &str) -> u64 {
        let store = self.model.params();
        let mut total = 0u64;
        if let Some(e) = store.get(name) {
            if e.learnable {
                total += e.tensor.numel() as u64;
            }
        }
        total
    }

    /// A layer row: params from the named `.weight`/`.bias` tensors, flops
    /// supplied by the caller.
    fn layer(&mut self, name: &str, flops: u64) {
        let params = self.params_of(&format!("{name}.weight")) + self.params_of(&format!("{name}.bias"));
        self.rows.push(CostRow { name: name.to_string(), params, flops });
    }

    fn norm(&mut self, name: &str, elems: u64) {
        let params = self.params_of(&format!("{name}.scale")) + self.params_of(&format!("{name}.shift"));
        self.rows.push(CostRow { name: name.to_string(), params, flops: elems });
    }

    fn compute(&mut self, name: &str, flops: u64) {
        self.rows.push(CostRow { name: name.to_string(), params: 0, flops });
    }

    fn tensor_row(&mut self, name: &str, flops: u64) {
        let params = self.params_of(name);
        self.rows.push(CostRow { name: name.to_string(), params, flops });
    }

    fn walk(&mut self) {
        let cfg = self.model.config().clone();
        for (i, (s, stage)) in cfg.stages.iter().zip(&self.model.stages).enumerate() {
            let sn = i + 1;
            let [rh, rw] = s.resolution;
            let hw = (rh * rw) as u64;
            let c = s.channels as u64;

            self.layer(&format!("stage{sn}.embed.conv"), conv_flops(&stage.embed.conv, rh, rw));
            self.norm(&format!("stage{sn}.embed.norm"), hw * c);
            if cfg.mixer_mode == MixerMode::Dmixer {
                self.tensor_row(&format!("stage{sn}.attn_bias"), 0);
            }

            for (j, blk) in stage.blocks.iter().enumerate() {
                let p = format!("stage{sn}.block{j}");
                self.layer(&format!("{p}.dpe"), conv_flops(&blk.dpe, rh, rw));
                self.norm(&format!("{p}.norm1"), hw * c);

                match &blk.mixer {
                    MixerKind::Dual(m) => {
                        let ca = m.osra.channels as u64;
                        let kvh = reduced_extent(rh, s.sr_stride);
                        let kvw = reduced_extent(rw, s.sr_stride);
                        let nq = hw;
                        let nkv = (kvh * kvw) as u64;
                        if let Some((conv, _)) = &m.osra.osr {
                            self.layer(&format!("{p}.mixer.osra.osr"), conv_flops(conv, kvh, kvw));
                            self.norm(&format!("{p}.mixer.osra.osr_norm"), nkv * ca);
                        }
                        self.layer(&format!("{p}.mixer.osra.lr"), conv_flops(&m.osra.lr_conv, kvh, kvw));
                        self.tensor_row(&format!("{p}.mixer.osra.q.weight"), nq * ca * ca);
                        self.tensor_row(&format!("{p}.mixer.osra.kv.weight"), nkv * 2 * ca * ca);
                        self.compute(
                            &format!("{p}.mixer.osra.attn"),
                            2 * nq * nkv * ca + s.heads as u64 * nq * nkv,
                        );

                        let cc = m.idconv.channels as u64;
                        let k = m.idconv.kernel_size;
                        let kk = (k * k) as u64;
                        let g = m.idconv.groups as u64;
                        let cr = m.idconv.squeeze_conv.out_channels as u64;
                        self.compute(
                            &format!("{p}.mixer.idconv.pool"),
                            cc * pool_flops(rh, rw, k, k),
                        );
                        self.layer(&format!("{p}.mixer.idconv.squeeze"), kk * cr * cc);
                        self.layer(&format!("{p}.mixer.idconv.expand"), kk * g * cc * cr);
                        self.compute(&format!("{p}.mixer.idconv.softmax"), g * cc * kk);
                        self.compute(&format!("{p}.mixer.idconv.blend"), g * cc * kk);
                        self.tensor_row(&format!("{p}.mixer.idconv.kernels"), 0);
                        self.compute(&format!("{p}.mixer.idconv.conv"), hw * cc * kk);

                        self.ste_rows(&format!("{p}.mixer.ste"), &m.ste, rh, rw);
                    }
                    MixerKind::DwBaseline { dw, ste } => {
                        self.layer(&format!("{p}.mixer.dw"), conv_flops(dw, rh, rw));
                        self.ste_rows(&format!("{p}.mixer.ste"), ste, rh, rw);
                    }
                }

                self.norm(&format!("{p}.norm2"), hw * c);
                self.layer(&format!("{p}.ffn.fc1"), conv_flops(&blk.ffn.fc1, rh, rw));
                for (sk, conv) in blk.ffn.scales.iter().zip(&blk.ffn.scale_convs) {
                    self.layer(&format!("{p}.ffn.dw{sk}"), conv_flops(conv, rh, rw));
                }
                self.layer(&format!("{p}.ffn.fc2"), conv_flops(&blk.ffn.fc2, rh, rw));
            }
        }
        let [rh, rw] = cfg.stages[3].resolution;
        let c4 = cfg.stages[3].channels as u64;
        self.compute("head.pool", (rh * rw) as u64 * c4);
        self.layer("head.fc", c4 * cfg.num_classes as u64);
    }
}

impl<'m, E: Scalar> Walker<'m, E> {
    fn ste_rows(&mut self, prefix: &str, ste: &crate::mixer::SteParams<E>, rh: usize, rw: usize) {
        self.layer(&format!("{prefix}.dw"), conv_flops(&ste.dw_conv, rh, rw));
        self.layer(&format!("{prefix}.squeeze"), conv_flops(&ste.squeeze, rh, rw));
        self.layer(&format!("{prefix}.expand"), conv_flops(&ste.expand, rh, rw));
    }
}

/// Exact per-layer parameter counts; resolution-independent.
pub fn count_params<E: Scalar>(model: &Model<E>) -> CostReport {
    let mut w = Walker { model, rows: Vec::new() };
    w.walk();
    let rows = w
        .rows
        .into_iter()
        .map(|mut r| {
            r.flops = 0;
            r
        })
        .collect();
    CostReport::from_rows(rows, None)
}

/// Per-layer MAC counts at the bound resolution for a batch of one.
pub fn count_flops<E: Scalar>(model: &Model<E>, resolution: [usize; 2]) -> Result<CostReport> {
    let bound = model.config().input_resolution();
    if resolution != bound {
        return Err(Error::contract(format!(
            "flops requested at {}x{} but the model is bound to {}x{}",
            resolution[0], resolution[1], bound[0], bound[1]
        )));
    }
    let mut w = Walker { model, rows: Vec::new() };
    w.walk();
    Ok(CostReport::from_rows(w.rows, Some(resolution)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ste_formula_matches_closed_form_when_cs_is_c_over_r() {
        // C = 128, r = 8 => C_s = 16 = C/r: H*W*C*(2C/r + 9).
        assert_eq!(ste_flops(128, 8, 7, 7), 49 * 128 * 41);
    }

    #[test]
    fn pool_cost_of_divisible_grid_is_input_count() {
        assert_eq!(pool_flops(56, 56, 7, 7), 56 * 56);
        assert_eq!(pool_flops(4, 4, 1, 1), 16);
    }
}
