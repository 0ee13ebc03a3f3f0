//! Event-driven inference over pruned models, with exact MAC accounting.
//!
//! Gate matrices are compiled to CSC and split column-wise into an input
//! block and a recurrent block, so a step touches only the columns whose
//! driving signal is nonzero: the bottom layer's input block is charged in
//! full (token embeddings are dense), higher input blocks follow the layer
//! below's active set, and every recurrent block follows its own layer's
//! active set. Skipped columns multiply exact zeros, so the engine
//! reproduces the dense reference forward; the MAC counters are exact
//! column-nnz sums, not estimates.
//!
//! Costs cover the gate matvecs inside the recurrent layers only.
//! Elementwise gate arithmetic, the embedding lookup, and the decoder
//! matvec are excluded from headline numbers; the decoder is reported
//! separately for context. LSTM layers model the dense baseline: every
//! column is charged every step.

use crate::egru::{active_set, egru_cell_update, EgruState, StepMode, SurrogateCfg};
use crate::lm::{CellKind, LayerParams, LayerState, LmConfig, LmModel};
use crate::lstm::LstmState;
use crate::math::{sigmoid, CscMatrix, DenseMatrix, DenseVector};
use crate::prune::PruneMasks;
use std::fmt::Write as _;
use std::path::Path;

/// One gate matrix, split at the input/recurrent column boundary.
#[derive(Clone, Debug)]
pub struct CompiledGate {
    pub input_block: CscMatrix,
    pub recurrent_block: CscMatrix,
}

impl CompiledGate {
    fn from_dense(w: &DenseMatrix<f32>, mask: Option<&[bool]>, d: usize) -> CompiledGate {
        let h = w.rows;
        let hh = w.cols - d;
        let mut input = DenseMatrix::zeros(h, d);
        let mut rec = DenseMatrix::zeros(h, hh);
        let mut m_in = mask.map(|_| vec![true; h * d]);
        let mut m_rec = mask.map(|_| vec![true; h * hh]);
        for i in 0..h {
            for j in 0..w.cols {
                let v = w.get(i, j);
                let kept = mask.map_or(true, |m| m[i * w.cols + j]);
                if j < d {
                    input.set(i, j, v);
                    if let Some(m) = &mut m_in {
                        m[i * d + j] = kept;
                    }
                } else {
                    rec.set(i, j - d, v);
                    if let Some(m) = &mut m_rec {
                        m[i * hh + (j - d)] = kept;
                    }
                }
            }
        }
        CompiledGate {
            input_block: CscMatrix::from_dense(&input, m_in.as_deref()),
            recurrent_block: CscMatrix::from_dense(&rec, m_rec.as_deref()),
        }
    }

    /// Reassembles the full dense matrix the blocks were compiled from.
    pub fn to_dense(&self) -> DenseMatrix<f32> {
        let h = self.input_block.rows;
        let d = self.input_block.cols;
        let hh = self.recurrent_block.cols;
        let input = self.input_block.to_dense();
        let rec = self.recurrent_block.to_dense();
        let mut w = DenseMatrix::zeros(h, d + hh);
        for i in 0..h {
            for j in 0..d {
                w.set(i, j, input.get(i, j));
            }
            for j in 0..hh {
                w.set(i, d + j, rec.get(i, j));
            }
        }
        w
    }

    pub fn nnz(&self) -> usize {
        self.input_block.nnz() + self.recurrent_block.nnz()
    }
}

#[derive(Clone, Debug)]
pub enum CompiledLayer {
    Egru {
        w_u: CompiledGate,
        w_r: CompiledGate,
        w_z: CompiledGate,
        b_u: Vec<f32>,
        b_r: Vec<f32>,
        b_z: Vec<f32>,
        theta: Vec<f32>,
    },
    Lstm {
        w_i: CompiledGate,
        w_f: CompiledGate,
        w_g: CompiledGate,
        w_o: CompiledGate,
        b_i: Vec<f32>,
        b_f: Vec<f32>,
        b_g: Vec<f32>,
        b_o: Vec<f32>,
    },
}

impl CompiledLayer {
    pub fn hidden_dim(&self) -> usize {
        match self {
            CompiledLayer::Egru { w_u, .. } => w_u.input_block.rows,
            CompiledLayer::Lstm { w_i, .. } => w_i.input_block.rows,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            CompiledLayer::Egru { w_u, .. } => w_u.input_block.cols,
            CompiledLayer::Lstm { w_i, .. } => w_i.input_block.cols,
        }
    }

    pub fn gates(&self) -> Vec<&CompiledGate> {
        match self {
            CompiledLayer::Egru { w_u, w_r, w_z, .. } => vec![w_u, w_r, w_z],
            CompiledLayer::Lstm { w_i, w_f, w_g, w_o, .. } => vec![w_i, w_f, w_g, w_o],
        }
    }
}

#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub cfg: LmConfig,
    pub embedding: DenseMatrix<f32>,
    pub layers: Vec<CompiledLayer>,
}

/// Compiles a model (with its pruning masks, if any) for event-driven
/// inference. The CSC blocks hold exactly the kept nonzero weights, so
/// decompiling reproduces the masked dense tensors.
pub fn compile(model: &LmModel<f32>, masks: Option<&PruneMasks>) -> CompiledModel {
    let metas = model.cfg.slot_metas();
    let gate_mask = |slot: usize| -> Option<&[bool]> {
        masks.and_then(|m| m.per_slot[slot].as_deref())
    };
    // Slot 0 is the embedding; layer slots follow in declaration order.
    let mut slot = 1;
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let d = layer.input_dim();
        match layer {
            LayerParams::Egru(p) => {
                let w_u = CompiledGate::from_dense(&p.w_u, gate_mask(slot), d);
                let w_r = CompiledGate::from_dense(&p.w_r, gate_mask(slot + 2), d);
                let w_z = CompiledGate::from_dense(&p.w_z, gate_mask(slot + 4), d);
                layers.push(CompiledLayer::Egru {
                    w_u,
                    w_r,
                    w_z,
                    b_u: p.b_u.clone(),
                    b_r: p.b_r.clone(),
                    b_z: p.b_z.clone(),
                    theta: p.theta.clone(),
                });
                slot += 7;
            }
            LayerParams::Lstm(p) => {
                let w_i = CompiledGate::from_dense(&p.w_i, gate_mask(slot), d);
                let w_f = CompiledGate::from_dense(&p.w_f, gate_mask(slot + 2), d);
                let w_g = CompiledGate::from_dense(&p.w_g, gate_mask(slot + 4), d);
                let w_o = CompiledGate::from_dense(&p.w_o, gate_mask(slot + 6), d);
                layers.push(CompiledLayer::Lstm {
                    w_i,
                    w_f,
                    w_g,
                    w_o,
                    b_i: p.b_i.clone(),
                    b_f: p.b_f.clone(),
                    b_g: p.b_g.clone(),
                    b_o: p.b_o.clone(),
                });
                slot += 8;
            }
        }
    }
    debug_assert_eq!(slot, metas.len());
    CompiledModel { cfg: model.cfg.clone(), embedding: model.embedding.clone(), layers }
}

/// Gate matvec MACs one layer spent in one step, split at the column
/// boundary the engine skips on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerStepMacs {
    pub input: u64,
    pub recurrent: u64,
}

impl LayerStepMacs {
    pub fn total(&self) -> u64 {
        self.input + self.recurrent
    }
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub logits: DenseVector<f32>,
    pub macs: Vec<LayerStepMacs>,
    /// Decoder matvec MACs, reported for context; not part of headline
    /// recurrent-layer totals.
    pub decoder_macs: u64,
}

enum Drive<'a> {
    /// Charge every column (token embeddings; dense-mode layers; LSTM).
    Dense(&'a [f32]),
    /// Charge only the active columns; the rest are exact zeros.
    Active(&'a [f32], &'a [u32]),
}

impl Drive<'_> {
    fn accumulate(&self, block: &CscMatrix, acc: &mut [f64]) -> u64 {
        match self {
            Drive::Dense(x) => block.accumulate_all(x, acc),
            Drive::Active(x, active) => block.accumulate_active(x, active, acc),
        }
    }
}

fn round_gate(acc: &[f64], bias: &[f32], squash: impl Fn(f32) -> f32) -> Vec<f32> {
    acc.iter().zip(bias).map(|(&a, &b)| squash(a as f32 + b)).collect()
}

impl CompiledModel {
    pub fn zero_states(&self) -> Vec<LayerState<f32>> {
        self.layers
            .iter()
            .map(|l| match l {
                CompiledLayer::Egru { .. } => LayerState::Egru(EgruState::zeros(l.hidden_dim())),
                CompiledLayer::Lstm { .. } => LayerState::Lstm(LstmState::zeros(l.hidden_dim())),
            })
            .collect()
    }

    /// One token through the stack. Logits match the dense reference
    /// forward; MAC counts are exact column-nnz sums for the columns
    /// actually touched.
    pub fn infer_step(
        &self,
        token: u32,
        states: &[LayerState<f32>],
    ) -> (Vec<LayerState<f32>>, StepOutput) {
        assert!((token as usize) < self.cfg.vocab_size, "token {token} out of vocabulary");
        assert_eq!(states.len(), self.layers.len());
        let mode = self.cfg.mode;
        let sur = SurrogateCfg::default();

        let mut next_states = Vec::with_capacity(self.layers.len());
        let mut macs = Vec::with_capacity(self.layers.len());
        // The bottom layer reads the embedding row, dense by definition.
        let mut x_owned: Vec<f32> = self.embedding.row(token as usize).to_vec();
        let mut x_active: Option<Vec<u32>> = None;

        for (layer, state) in self.layers.iter().zip(states) {
            let h = layer.hidden_dim();
            let drive = match (&x_active, mode) {
                (_, StepMode::Dense) | (None, _) => Drive::Dense(&x_owned),
                (Some(a), _) => Drive::Active(&x_owned, a),
            };
            let mut step_macs = LayerStepMacs::default();
            match (layer, state) {
                (
                    CompiledLayer::Egru { w_u, w_r, w_z, b_u, b_r, b_z, theta },
                    LayerState::Egru(prev),
                ) => {
                    let rec: Box<dyn Fn(&CompiledGate, &[f32], &mut [f64]) -> u64> =
                        if mode == StepMode::Dense {
                            Box::new(|g, a, acc| g.recurrent_block.accumulate_all(a, acc))
                        } else {
                            Box::new(|g, a, acc| {
                                g.recurrent_block.accumulate_active(a, &prev.active, acc)
                            })
                        };

                    let mut acc_u = vec![0.0f64; h];
                    step_macs.input += drive.accumulate(&w_u.input_block, &mut acc_u);
                    step_macs.recurrent += rec(w_u, &prev.y, &mut acc_u);
                    let u = round_gate(&acc_u, b_u, sigmoid);

                    let mut acc_r = vec![0.0f64; h];
                    step_macs.input += drive.accumulate(&w_r.input_block, &mut acc_r);
                    step_macs.recurrent += rec(w_r, &prev.y, &mut acc_r);
                    let r = round_gate(&acc_r, b_r, sigmoid);

                    // r preserves y's zero pattern, so the z-gate recurrent
                    // block reuses the same active set.
                    let ry: Vec<f32> = r.iter().zip(&prev.y).map(|(&ri, &yi)| ri * yi).collect();
                    let mut acc_z = vec![0.0f64; h];
                    step_macs.input += drive.accumulate(&w_z.input_block, &mut acc_z);
                    step_macs.recurrent += rec(w_z, &ry, &mut acc_z);
                    let z = round_gate(&acc_z, b_z, |v| v.tanh());

                    let (_, _, y, c) = egru_cell_update(&u, &z, &prev.c, theta, mode, &sur);
                    let active = active_set(&y);
                    x_owned = y.clone();
                    x_active = if mode == StepMode::Dense { None } else { Some(active.clone()) };
                    next_states.push(LayerState::Egru(EgruState { y, c, active }));
                }
                (
                    CompiledLayer::Lstm { w_i, w_f, w_g, w_o, b_i, b_f, b_g, b_o },
                    LayerState::Lstm(prev),
                ) => {
                    let mut gate = |g: &CompiledGate, b: &[f32]| {
                        let mut acc = vec![0.0f64; h];
                        step_macs.input += drive.accumulate(&g.input_block, &mut acc);
                        step_macs.recurrent += g.recurrent_block.accumulate_all(&prev.h, &mut acc);
                        (acc, b.to_vec())
                    };
                    let (acc_i, bi) = gate(w_i, b_i);
                    let (acc_f, bf) = gate(w_f, b_f);
                    let (acc_g, bg) = gate(w_g, b_g);
                    let (acc_o, bo) = gate(w_o, b_o);
                    let i = round_gate(&acc_i, &bi, sigmoid);
                    let f = round_gate(&acc_f, &bf, sigmoid);
                    let g = round_gate(&acc_g, &bg, |v| v.tanh());
                    let o = round_gate(&acc_o, &bo, sigmoid);
                    let mut c = Vec::with_capacity(h);
                    let mut hh = Vec::with_capacity(h);
                    for k in 0..h {
                        let ck = f[k] * prev.c[k] + i[k] * g[k];
                        c.push(ck);
                        hh.push(o[k] * ck.tanh());
                    }
                    x_owned = hh.clone();
                    x_active = None;
                    next_states.push(LayerState::Lstm(LstmState { h: hh, c }));
                }
                _ => panic!("state kind does not match compiled layer"),
            }
            macs.push(step_macs);
        }

        // Tied decoder: logits = E * y_top, charged per active unit. Rows
        // accumulate in ascending column order like the dense kernel, so
        // skipped zero columns are exact no-ops.
        let y_top = &x_owned;
        let vocab = self.cfg.vocab_size;
        let embed = self.cfg.embed_dim;
        let mut logits = Vec::with_capacity(vocab);
        let (decoder_macs, cols): (u64, Vec<u32>) = match &x_active {
            Some(a) => ((a.len() * vocab) as u64, a.clone()),
            None => ((embed * vocab) as u64, (0..embed as u32).collect()),
        };
        for i in 0..vocab {
            let row = self.embedding.row(i);
            let mut acc = 0.0f64;
            for &j in &cols {
                acc += (row[j as usize] as f64) * (y_top[j as usize] as f64);
            }
            logits.push(acc as f32);
        }

        (next_states, StepOutput { logits, macs, decoder_macs })
    }

    /// Kept fraction over one layer's gate matrices, both blocks.
    pub fn layer_lambda_w(&self, l: usize) -> f64 {
        let layer = &self.layers[l];
        let (d, h) = (layer.input_dim(), layer.hidden_dim());
        let gates = layer.gates();
        let nnz: usize = gates.iter().map(|g| g.nnz()).sum();
        nnz as f64 / (gates.len() * (d + h) * h) as f64
    }

    /// Kept fraction over one layer's recurrent blocks only.
    pub fn layer_rec_lambda_w(&self, l: usize) -> f64 {
        let layer = &self.layers[l];
        let h = layer.hidden_dim();
        let gates = layer.gates();
        let nnz: usize = gates.iter().map(|g| g.recurrent_block.nnz()).sum();
        nnz as f64 / (gates.len() * h * h) as f64
    }
}

/// Structural gate-matvec MACs per token over the recurrent layers at the
/// given weight density: sum of gates x (input + hidden) x hidden x
/// lambda_w. Embedding lookup and decoder are excluded.
pub fn count_macs_structural(cfg: &LmConfig, lambda_w: f64) -> f64 {
    let gates = match cfg.cell {
        CellKind::Egru => 3.0,
        CellKind::Lstm => 4.0,
    };
    let mut total = 0.0;
    for (l, &h) in cfg.hidden_dims.iter().enumerate() {
        let d = cfg.layer_input_dim(l);
        total += gates * ((d + h) * h) as f64 * lambda_w;
    }
    total
}

fn layer_structural(cfg: &LmConfig, l: usize) -> (u64, u64) {
    let gates = match cfg.cell {
        CellKind::Egru => 3u64,
        CellKind::Lstm => 4u64,
    };
    let h = cfg.hidden_dims[l] as u64;
    let d = cfg.layer_input_dim(l) as u64;
    (gates * (d + h) * h, gates * h * h)
}

#[derive(Clone, Debug)]
pub struct LayerMacs {
    pub layer: usize,
    /// Structural per-token MACs at full density, both blocks.
    pub dense_macs: u64,
    pub lambda_w: f64,
    /// Mean active fraction of this layer's outputs over the stream.
    pub lambda_a: f64,
    /// Measured mean per-token MACs, both blocks.
    pub effective_macs: f64,
    pub reduction: f64,
    /// Recurrent-block split: the event-skippable part, where activity and
    /// weight sparsity compose multiplicatively.
    pub rec_dense_macs: u64,
    pub rec_lambda_w: f64,
    pub rec_effective_macs: f64,
    /// Expectation model lambda_a x lambda_w x dense for the recurrent block.
    pub rec_predicted_macs: f64,
    /// |measured - predicted| / predicted.
    pub rec_gap: f64,
}

#[derive(Clone, Debug)]
pub struct MacReport {
    pub per_layer: Vec<LayerMacs>,
    pub dense_total: u64,
    pub effective_total: f64,
    pub reduction_factor: f64,
    /// Decoder cost, informational: structural and measured mean per token.
    pub decoder_dense_macs: u64,
    pub decoder_effective_macs: f64,
    pub tokens: usize,
}

/// Runs the stream from zero state and reports exact mean per-token MACs
/// against the structural and expectation-model baselines. The bottom
/// layer's input block is charged at full activity (token embeddings are
/// dense), which the report reflects in its per-layer totals.
pub fn measure_effective_macs(cm: &CompiledModel, tokens: &[u32]) -> MacReport {
    assert!(!tokens.is_empty(), "measure: empty stream");
    let n_layers = cm.layers.len();
    let mut states = cm.zero_states();
    let mut input_sums = vec![0u64; n_layers];
    let mut rec_sums = vec![0u64; n_layers];
    let mut active_sums = vec![0u64; n_layers];
    let mut decoder_sum = 0u64;
    for &t in tokens {
        let (next, out) = cm.infer_step(t, &states);
        for l in 0..n_layers {
            input_sums[l] += out.macs[l].input;
            rec_sums[l] += out.macs[l].recurrent;
            active_sums[l] += match &next[l] {
                LayerState::Egru(s) => s.active.len() as u64,
                LayerState::Lstm(_) => cm.layers[l].hidden_dim() as u64,
            };
        }
        decoder_sum += out.decoder_macs;
        states = next;
    }
    let n = tokens.len() as f64;

    let mut per_layer = Vec::with_capacity(n_layers);
    let mut dense_total = 0u64;
    let mut effective_total = 0.0f64;
    for l in 0..n_layers {
        let (dense, rec_dense) = layer_structural(&cm.cfg, l);
        let lambda_w = cm.layer_lambda_w(l);
        let rec_lambda_w = cm.layer_rec_lambda_w(l);
        let lambda_a = if cm.cfg.mode == StepMode::Dense {
            1.0
        } else {
            active_sums[l] as f64 / (n * cm.layers[l].hidden_dim() as f64)
        };
        let effective = (input_sums[l] + rec_sums[l]) as f64 / n;
        let rec_effective = rec_sums[l] as f64 / n;
        let rec_predicted = lambda_a * rec_lambda_w * rec_dense as f64;
        let rec_gap = if rec_predicted > 0.0 {
            (rec_effective - rec_predicted).abs() / rec_predicted
        } else if rec_effective == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        dense_total += dense;
        effective_total += effective;
        per_layer.push(LayerMacs {
            layer: l,
            dense_macs: dense,
            lambda_w,
            lambda_a,
            effective_macs: effective,
            reduction: if effective > 0.0 { dense as f64 / effective } else { f64::INFINITY },
            rec_dense_macs: rec_dense,
            rec_lambda_w,
            rec_effective_macs: rec_effective,
            rec_predicted_macs: rec_predicted,
            rec_gap,
        });
    }
    MacReport {
        per_layer,
        dense_total,
        effective_total,
        reduction_factor: if effective_total > 0.0 {
            dense_total as f64 / effective_total
        } else {
            f64::INFINITY
        },
        decoder_dense_macs: (cm.cfg.vocab_size * cm.cfg.embed_dim) as u64,
        decoder_effective_macs: decoder_sum as f64 / n,
        tokens: tokens.len(),
    }
}

/// CSV report: layer, dense_macs, lambda_w, lambda_a, effective_macs,
/// reduction. The totals row uses layer = "total".
pub fn write_mac_report(path: &Path, report: &MacReport) -> std::io::Result<()> {
    let mut out = String::from("layer,dense_macs,lambda_w,lambda_a,effective_macs,reduction\n");
    for l in &report.per_layer {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.1},{:.3}",
            l.layer, l.dense_macs, l.lambda_w, l.lambda_a, l.effective_macs, l.reduction
        );
    }
    let _ = writeln!(
        out,
        "total,{},,,{:.1},{:.3}",
        report.dense_total, report.effective_total, report.reduction_factor
    );
    std::fs::write(path, out)
}

/// Human-readable table with the recurrent-block expectation check.
pub fn render_mac_table(report: &MacReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>5} {:>12} {:>8} {:>8} {:>14} {:>9} {:>14} {:>14} {:>7}",
        "layer",
        "dense_macs",
        "l_w",
        "l_a",
        "effective",
        "reduce",
        "rec_measured",
        "rec_predicted",
        "gap"
    );
    for l in &report.per_layer {
        let _ = writeln!(
            out,
            "{:>5} {:>12} {:>8.4} {:>8.4} {:>14.1} {:>9.3} {:>14.1} {:>14.1} {:>6.1}%",
            l.layer,
            l.dense_macs,
            l.lambda_w,
            l.lambda_a,
            l.effective_macs,
            l.reduction,
            l.rec_effective_macs,
            l.rec_predicted_macs,
            l.rec_gap * 100.0
        );
    }
    let _ = writeln!(
        out,
        "{:>5} {:>12} {:>8} {:>8} {:>14.1} {:>9.3}",
        "total", report.dense_total, "", "", report.effective_total, report.reduction_factor
    );
    let _ = writeln!(
        out,
        "decoder (informational): dense {} effective {:.1} per token over {} tokens",
        report.decoder_dense_macs, report.decoder_effective_macs, report.tokens
    );
    out
}
