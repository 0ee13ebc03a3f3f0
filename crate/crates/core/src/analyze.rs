//! Post-hoc diagnostics over trained models: per-neuron activity histograms,
//! shifted cell-state distributions, weight distributions, a mean-field
//! preactivation check, and summary tables aggregated across seeded runs.
//!
//! CSV is the contract for every output; the SVG renderings are a
//! convenience for quick inspection. Histogram files are named
//! `{quantity}_{layer}.csv` inside a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::data::window_spans;
use crate::lm::{LayerParams, LayerState, LmModel};
use crate::math::{dense_matvec, DenseMatrix, Real};
use crate::train::evaluate;

pub const DEFAULT_BINS: usize = 50;

/// File each run directory leaves behind for [`emit_tables`].
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, thiserror::Error)]
pub enum AnalyzeError {
    #[error("empty stream: need at least two tokens for one step")]
    EmptyStream,
    #[error("no runs: no {SUMMARY_FILE} found under {}", .0.display())]
    NoRuns(PathBuf),
    #[error("bad summary {}: {detail}", .path.display())]
    BadSummary { path: PathBuf, detail: String },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

// ---------------------------------------------------------------------------
// Histograms

/// Uniform-bin histogram with provenance metadata. The first and last bins
/// absorb out-of-range values, so the counts always sum to the number of
/// recorded values.
#[derive(Clone, Debug)]
pub struct Histogram {
    /// `bins + 1` strictly increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub layer: usize,
    pub quantity: String,
    pub split: String,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize, layer: usize, quantity: &str, split: &str) -> Self {
        assert!(bins > 0, "histogram needs at least one bin");
        assert!(hi > lo && lo.is_finite() && hi.is_finite(), "bad histogram range [{lo}, {hi}]");
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> =
            (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        debug_assert!(edges.windows(2).all(|e| e[1] > e[0]));
        Histogram {
            edges,
            counts: vec![0; bins],
            total: 0,
            layer,
            quantity: quantity.to_string(),
            split: split.to_string(),
        }
    }

    /// Bins are half-open `[lo, hi)` except the last, which is closed.
    pub fn record(&mut self, v: f64) {
        assert!(v.is_finite(), "histogram value must be finite, got {v}");
        let bins = self.counts.len();
        let lo = self.edges[0];
        let width = (self.edges[bins] - lo) / bins as f64;
        let idx = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
        self.counts[idx] += 1;
        self.total += 1;
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Count of values recorded at or above `x` when `x` is an exact bin
    /// edge. Clamped tail values are counted where they landed.
    pub fn mass_at_or_above(&self, x: f64) -> u64 {
        self.edges
            .iter()
            .position(|&e| e >= x)
            .map(|i| self.counts[i..].iter().sum())
            .unwrap_or(0)
    }
}

/// Writes `{quantity}_{layer}.csv` with columns `bin_lo,bin_hi,count`.
pub fn write_histogram_csv(dir: &Path, h: &Histogram) -> io::Result<PathBuf> {
    let path = dir.join(format!("{}_{}.csv", h.quantity, h.layer));
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, &c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", h.edges[i], h.edges[i + 1], c);
    }
    fs::write(&path, out)?;
    Ok(path)
}

/// Self-contained bar rendering of a histogram, no external references.
pub fn histogram_svg(h: &Histogram) -> String {
    let (w, ht, ml, mb, mt) = (640.0, 360.0, 10.0, 24.0, 28.0);
    let plot_w = w - 2.0 * ml;
    let plot_h = ht - mb - mt;
    let max = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = plot_w / h.bins() as f64;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" \
         viewBox=\"0 0 {w} {ht}\">\n<rect width=\"{w}\" height=\"{ht}\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{ml}\" y=\"18\" font-family=\"monospace\" font-size=\"13\">{} layer {} \
         ({}), n={}, max bin {}</text>",
        h.quantity, h.layer, h.split, h.total, max as u64
    );
    for (i, &c) in h.counts.iter().enumerate() {
        let bar = plot_h * c as f64 / max;
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4477aa\"/>",
            ml + bw * i as f64,
            mt + plot_h - bar,
            (bw - 1.0).max(0.5),
            bar
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        mt + plot_h,
        ml + plot_w
    );
    let _ = writeln!(
        s,
        "<text x=\"{ml}\" y=\"{0}\" font-family=\"monospace\" font-size=\"12\">{1:.4}</text>\n\
         <text x=\"{2}\" y=\"{0}\" font-family=\"monospace\" font-size=\"12\" \
         text-anchor=\"end\">{3:.4}</text>",
        ht - 6.0,
        h.edges[0],
        ml + plot_w,
        h.edges[h.bins()]
    );
    s.push_str("</svg>\n");
    s
}

pub fn write_histogram_svg(dir: &Path, h: &Histogram) -> io::Result<PathBuf> {
    let path = dir.join(format!("{}_{}.svg", h.quantity, h.layer));
    fs::write(&path, histogram_svg(h))?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// Activity

/// Per-neuron activity fractions over a stream, one entry per unit.
#[derive(Clone, Debug)]
pub struct ActivityProfile {
    pub steps: usize,
    /// `fractions[layer][unit]`: share of steps with nonzero output.
    pub fractions: Vec<Vec<f64>>,
    /// Mean activity per layer, identical to what `evaluate` reports.
    pub lambda_a: Vec<f64>,
}

impl ActivityProfile {
    /// Mean of the per-neuron fractions, computed from the raw counts so it
    /// matches `evaluate`'s λ_a exactly rather than up to summation order.
    pub fn mean_fraction(&self, layer: usize) -> f64 {
        self.lambda_a[layer]
    }
}

pub fn activity_profile(model: &LmModel<f32>, ids: &[u32]) -> Result<ActivityProfile, AnalyzeError> {
    if ids.len() < 2 {
        return Err(AnalyzeError::EmptyStream);
    }
    let ev = evaluate(model, ids);
    let steps = ev.stats.steps;
    let fractions = ev
        .stats
        .neuron_active
        .iter()
        .map(|counts| counts.iter().map(|&c| c as f64 / steps as f64).collect())
        .collect();
    Ok(ActivityProfile { steps, fractions, lambda_a: ev.lambda_a })
}

/// Per-layer histograms of per-neuron activity fractions on [0, 1].
/// Each histogram's total equals the layer's hidden size.
pub fn activity_histogram(
    model: &LmModel<f32>,
    ids: &[u32],
    bins: usize,
    split: &str,
) -> Result<Vec<Histogram>, AnalyzeError> {
    let prof = activity_profile(model, ids)?;
    Ok(prof
        .fractions
        .iter()
        .enumerate()
        .map(|(l, fr)| {
            let mut h = Histogram::new(0.0, 1.0, bins, l, "activity", split);
            for &f in fr {
                h.record(f);
            }
            h
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Cell states

/// Post-step shifted cell states for one layer, in stream order.
#[derive(Clone, Debug)]
pub struct CellTrace {
    pub hidden: usize,
    /// `values[step][unit]` = c − ϑ after the step (raw c for LSTM layers,
    /// which have no threshold). For a unit that just spiked this is
    /// ĉ − 2ϑ: once for the reset, once for the shift.
    pub values: Vec<Vec<f32>>,
    /// Active-unit count per step.
    pub active: Vec<usize>,
}

/// Walks the stream once with carried state and records every layer's
/// post-step cell values. Holds hidden × steps floats per layer, sized for
/// analysis streams rather than full training corpora.
pub fn trace_cells(model: &LmModel<f32>, ids: &[u32]) -> Result<Vec<CellTrace>, AnalyzeError> {
    if ids.len() < 2 {
        return Err(AnalyzeError::EmptyStream);
    }
    let inputs = &ids[..ids.len() - 1];
    let sur = model.cfg.surrogate::<f32>();
    let mut states = model.zero_states();
    let mut traces: Vec<CellTrace> = model
        .layers
        .iter()
        .map(|p| CellTrace {
            hidden: p.hidden_dim(),
            values: Vec::with_capacity(inputs.len()),
            active: Vec::with_capacity(inputs.len()),
        })
        .collect();
    for &tok in inputs {
        let mut x = model.embedding.row(tok as usize).to_vec();
        for (l, layer) in model.layers.iter().enumerate() {
            let (s2, _) = layer.step(&x, &states[l], model.cfg.mode, &sur, false);
            let row = match (&s2, layer) {
                (LayerState::Egru(s), LayerParams::Egru(p)) => {
                    s.c.iter().zip(&p.theta).map(|(&c, &t)| c - t).collect()
                }
                (LayerState::Lstm(s), _) => s.c.clone(),
                _ => unreachable!("state kind follows params kind"),
            };
            traces[l].values.push(row);
            traces[l].active.push(s2.active_count());
            x = s2.output().to_vec();
            states[l] = s2;
        }
    }
    Ok(traces)
}

/// Per-layer histograms of c − ϑ over all neurons and timesteps, binned on
/// [−3σ, +3σ] of the observed values (σ about zero; tails clamp inward).
/// Each histogram's total equals hidden × steps.
pub fn cell_state_histogram(
    model: &LmModel<f32>,
    ids: &[u32],
    bins: usize,
    split: &str,
) -> Result<Vec<Histogram>, AnalyzeError> {
    let traces = trace_cells(model, ids)?;
    Ok(traces
        .iter()
        .enumerate()
        .map(|(l, tr)| {
            let mut sumsq = 0.0f64;
            let mut n = 0u64;
            for row in &tr.values {
                for &v in row {
                    sumsq += (v as f64) * (v as f64);
                    n += 1;
                }
            }
            let sigma = if n == 0 { 0.0 } else { (sumsq / n as f64).sqrt() };
            let half = if sigma > 0.0 { 3.0 * sigma } else { 1.0 };
            let mut h = Histogram::new(-half, half, bins, l, "cell_state", split);
            for row in &tr.values {
                for &v in row {
                    h.record(v as f64);
                }
            }
            h
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Weights

/// Per-layer histograms of gate-matrix entries (all gates pooled), binned on
/// [−3σ, +3σ] of the stored values. Zeroed (pruned) entries are included:
/// the stored tensor is the distribution being shown.
pub fn weight_histogram(model: &LmModel<f32>, bins: usize) -> Vec<Histogram> {
    model
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mats = gate_matrices(layer);
            let mut sumsq = 0.0f64;
            let mut n = 0u64;
            for m in &mats {
                for &w in &m.data {
                    sumsq += (w as f64) * (w as f64);
                    n += 1;
                }
            }
            let sigma = (sumsq / n.max(1) as f64).sqrt();
            let half = if sigma > 0.0 { 3.0 * sigma } else { 1.0 };
            let mut h = Histogram::new(-half, half, bins, l, "weights", "model");
            for m in &mats {
                for &w in &m.data {
                    h.record(w as f64);
                }
            }
            h
        })
        .collect()
}

/// Mean of all gate-matrix entries across layers. Drifts toward zero as
/// weight decay pulls the weights in.
pub fn gate_weight_mean(model: &LmModel<f32>) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0u64;
    for layer in &model.layers {
        for m in gate_matrices(layer) {
            for &w in &m.data {
                sum += w as f64;
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}

fn gate_matrices<R: Real>(layer: &LayerParams<R>) -> Vec<&DenseMatrix<R>> {
    match layer {
        LayerParams::Egru(p) => vec![&p.w_u, &p.w_r, &p.w_z],
        LayerParams::Lstm(p) => vec![&p.w_i, &p.w_f, &p.w_g, &p.w_o],
    }
}

fn gate_biases<R: Real>(layer: &LayerParams<R>) -> Vec<&[R]> {
    match layer {
        LayerParams::Egru(p) => vec![&p.b_u, &p.b_r, &p.b_z],
        LayerParams::Lstm(p) => vec![&p.b_i, &p.b_f, &p.b_g, &p.b_o],
    }
}

// ---------------------------------------------------------------------------
// Preactivation expectation check

/// Two sides of the mean-field identity E[Wa + b] ≈ E[W]·E[a]·fan_in + E[b]
/// for one layer, with flat means: E[W] over all gate-matrix entries, E[a]
/// over every input component each gate consumed, E[b] over all bias
/// entries, measured over every preactivation component. The identity is
/// exact only when weights and activations are independent, so the gap is
/// reported, never asserted, on trained models.
#[derive(Clone, Debug)]
pub struct PreactRow {
    pub layer: usize,
    pub fan_in: usize,
    pub e_w: f64,
    pub e_a: f64,
    pub e_b: f64,
    pub predicted: f64,
    pub measured: f64,
    /// |measured − predicted| / max(|measured|, 1e-12).
    pub rel_gap: f64,
}

fn finish_row(
    layer: usize,
    fan_in: usize,
    e_w: f64,
    e_b: f64,
    a_sum: f64,
    a_n: u64,
    pre_sum: f64,
    pre_n: u64,
) -> PreactRow {
    let e_a = a_sum / a_n.max(1) as f64;
    let measured = pre_sum / pre_n.max(1) as f64;
    let predicted = e_w * e_a * fan_in as f64 + e_b;
    let rel_gap = (measured - predicted).abs() / measured.abs().max(1e-12);
    PreactRow { layer, fan_in, e_w, e_a, e_b, predicted, measured, rel_gap }
}

fn mean_all<R: Real>(mats: &[&DenseMatrix<R>]) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0u64;
    for m in mats {
        for &w in &m.data {
            sum += w.to_f64();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Evaluates both sides of the identity on one gate matrix over a set of
/// input vectors. This is the primitive the per-layer diagnostic repeats
/// per gate; on constructed independent data the two sides agree within
/// Monte-Carlo error.
pub fn preact_stats(w: &DenseMatrix<f32>, bias: &[f32], inputs: &[Vec<f32>]) -> PreactRow {
    assert_eq!(w.rows, bias.len(), "bias length must match rows");
    let e_w = mean_all(&[w]);
    let e_b = bias.iter().map(|&b| b as f64).sum::<f64>() / bias.len().max(1) as f64;
    let (mut a_sum, mut a_n, mut pre_sum, mut pre_n) = (0.0f64, 0u64, 0.0f64, 0u64);
    for a in inputs {
        for &v in a {
            a_sum += v as f64;
        }
        a_n += a.len() as u64;
        for (i, p) in dense_matvec(w, a).iter().enumerate() {
            pre_sum += (*p + bias[i]) as f64;
        }
        pre_n += w.rows as u64;
    }
    finish_row(0, w.cols, e_w, e_b, a_sum, a_n, pre_sum, pre_n)
}

/// Runs the stream through the model and reports the identity per layer,
/// pooling all gates. The candidate gate's recurrent input is the
/// reset-scaled output, taken as the gate actually saw it.
pub fn preactivation_diagnostic(
    model: &LmModel<f32>,
    ids: &[u32],
) -> Result<Vec<PreactRow>, AnalyzeError> {
    if ids.len() < 2 {
        return Err(AnalyzeError::EmptyStream);
    }
    let n_layers = model.layers.len();
    let mut a_sum = vec![0.0f64; n_layers];
    let mut a_n = vec![0u64; n_layers];
    let mut pre_sum = vec![0.0f64; n_layers];
    let mut pre_n = vec![0u64; n_layers];

    let mut states = model.zero_states();
    for &(start, len) in &window_spans(ids.len(), 256) {
        let fwd =
            model.forward_window(&model.layers, &ids[start..start + len], &states, None, false);
        for (l, layer) in model.layers.iter().enumerate() {
            for tape in &fwd.tape.layer_tapes[l] {
                match (layer, tape) {
                    (LayerParams::Egru(p), crate::lm::LayerStepTape::Egru(t)) => {
                        let a: Vec<f32> = t.x.iter().chain(&t.y_prev).copied().collect();
                        let az: Vec<f32> = t
                            .x
                            .iter()
                            .copied()
                            .chain(t.r.iter().zip(&t.y_prev).map(|(&r, &y)| r * y))
                            .collect();
                        for (w, b, input) in
                            [(&p.w_u, &p.b_u, &a), (&p.w_r, &p.b_r, &a), (&p.w_z, &p.b_z, &az)]
                        {
                            for (i, v) in dense_matvec(w, input).iter().enumerate() {
                                pre_sum[l] += (*v + b[i]) as f64;
                            }
                            pre_n[l] += w.rows as u64;
                            a_sum[l] += input.iter().map(|&v| v as f64).sum::<f64>();
                            a_n[l] += input.len() as u64;
                        }
                    }
                    (LayerParams::Lstm(p), crate::lm::LayerStepTape::Lstm(t)) => {
                        let a: Vec<f32> = t.x.iter().chain(&t.h_prev).copied().collect();
                        for (w, b) in
                            [(&p.w_i, &p.b_i), (&p.w_f, &p.b_f), (&p.w_g, &p.b_g), (&p.w_o, &p.b_o)]
                        {
                            for (i, v) in dense_matvec(w, &a).iter().enumerate() {
                                pre_sum[l] += (*v + b[i]) as f64;
                            }
                            pre_n[l] += w.rows as u64;
                            a_sum[l] += a.iter().map(|&v| v as f64).sum::<f64>();
                            a_n[l] += a.len() as u64;
                        }
                    }
                    _ => unreachable!("tape kind follows params kind"),
                }
            }
        }
        states = fwd.final_states;
    }

    Ok((0..n_layers)
        .map(|l| {
            let layer = &model.layers[l];
            let e_w = mean_all(&gate_matrices(layer));
            let biases = gate_biases(layer);
            let b_total: f64 =
                biases.iter().map(|b| b.iter().map(|v| v.to_f64()).sum::<f64>()).sum();
            let b_count: usize = biases.iter().map(|b| b.len()).sum();
            let e_b = b_total / b_count.max(1) as f64;
            let fan_in = layer.input_dim() + layer.hidden_dim();
            finish_row(l, fan_in, e_w, e_b, a_sum[l], a_n[l], pre_sum[l], pre_n[l])
        })
        .collect())
}

/// CSV: layer, fan_in, e_w, e_a, e_b, predicted, measured, rel_gap.
pub fn write_preact_csv(path: &Path, rows: &[PreactRow]) -> io::Result<()> {
    let mut out = String::from("layer,fan_in,e_w,e_a,e_b,predicted,measured,rel_gap\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer, r.fan_in, r.e_w, r.e_a, r.e_b, r.predicted, r.measured, r.rel_gap
        );
    }
    fs::write(path, out)
}

// ---------------------------------------------------------------------------
// Run summary tables

/// One run's headline numbers, written as `summary.csv` in its run
/// directory and aggregated across seeds by [`emit_tables`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub model: String,
    pub seed: u64,
    pub weight_sparsity: f64,
    pub effective_macs: f64,
    pub valid_ppl: f64,
    pub test_ppl: f64,
}

pub fn write_run_summary(dir: &Path, s: &RunSummary) -> io::Result<()> {
    let out = format!(
        "model,seed,weight_sparsity,effective_macs,valid_ppl,test_ppl\n{},{},{},{},{},{}\n",
        s.model, s.seed, s.weight_sparsity, s.effective_macs, s.valid_ppl, s.test_ppl
    );
    fs::write(dir.join(SUMMARY_FILE), out)
}

pub fn read_run_summary(path: &Path) -> Result<RunSummary, AnalyzeError> {
    let bad = |detail: &str| AnalyzeError::BadSummary {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    if header.trim() != "model,seed,weight_sparsity,effective_macs,valid_ppl,test_ppl" {
        return Err(bad("unexpected header"));
    }
    let row = lines.next().ok_or_else(|| bad("missing data row"))?;
    let f: Vec<&str> = row.trim().split(',').collect();
    if f.len() != 6 {
        return Err(bad(&format!("expected 6 fields, got {}", f.len())));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| bad(&format!("bad number {s:?}: {e}")));
    Ok(RunSummary {
        model: f[0].to_string(),
        seed: f[1].parse().map_err(|e| bad(&format!("bad seed {:?}: {e}", f[1])))?,
        weight_sparsity: num(f[2])?,
        effective_macs: num(f[3])?,
        valid_ppl: num(f[4])?,
        test_ppl: num(f[5])?,
    })
}

/// One table row: a (model, weight sparsity) group aggregated over seeds.
#[derive(Clone, Debug)]
pub struct TableRow {
    pub model: String,
    pub weight_sparsity: f64,
    pub effective_macs: f64,
    pub seeds: usize,
    pub valid_min: f64,
    pub valid_mean: f64,
    pub valid_std: f64,
    pub test_min: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

#[derive(Clone, Debug)]
pub struct SummaryTable {
    pub rows: Vec<TableRow>,
    pub csv: String,
    pub text: String,
}

fn min_mean_std(xs: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
    (min, mean, var.sqrt())
}

/// Scans `root` for run directories containing a summary file, groups them
/// by (model, weight sparsity), and renders CSV and aligned-text tables
/// with min/mean±std perplexities over seeds. Errors if no run has left a
/// summary behind.
pub fn emit_tables(root: &Path) -> Result<SummaryTable, AnalyzeError> {
    let mut names: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(root)? {
        let p = entry?.path();
        if p.is_dir() && p.join(SUMMARY_FILE).is_file() {
            names.push(p);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(AnalyzeError::NoRuns(root.to_path_buf()));
    }

    let mut groups: BTreeMap<(String, u64), Vec<RunSummary>> = BTreeMap::new();
    for dir in &names {
        let s = read_run_summary(&dir.join(SUMMARY_FILE))?;
        groups.entry((s.model.clone(), s.weight_sparsity.to_bits())).or_default().push(s);
    }

    let mut rows = Vec::with_capacity(groups.len());
    for ((model, _), runs) in groups {
        let (valid_min, valid_mean, valid_std) =
            min_mean_std(&runs.iter().map(|r| r.valid_ppl).collect::<Vec<_>>());
        let (test_min, test_mean, test_std) =
            min_mean_std(&runs.iter().map(|r| r.test_ppl).collect::<Vec<_>>());
        let macs = runs.iter().map(|r| r.effective_macs).sum::<f64>() / runs.len() as f64;
        rows.push(TableRow {
            model,
            weight_sparsity: runs[0].weight_sparsity,
            effective_macs: macs,
            seeds: runs.len(),
            valid_min,
            valid_mean,
            valid_std,
            test_min,
            test_mean,
            test_std,
        });
    }
    rows.sort_by(|a, b| {
        a.model.cmp(&b.model).then(a.weight_sparsity.total_cmp(&b.weight_sparsity))
    });

    let mut csv = String::from(
        "model,weight_sparsity,effective_macs,seeds,valid_ppl_min,valid_ppl_mean,\
         valid_ppl_std,test_ppl_min,test_ppl_mean,test_ppl_std\n",
    );
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{}",
            r.model,
            r.weight_sparsity,
            r.effective_macs,
            r.seeds,
            r.valid_min,
            r.valid_mean,
            r.valid_std,
            r.test_min,
            r.test_mean,
            r.test_std
        );
    }

    let mut text = format!(
        "{:<14} {:>8} {:>14} {:>5} {:>9} {:>16} {:>9} {:>16}\n",
        "model", "sparsity", "macs", "seeds", "valid min", "valid mean±std", "test min",
        "test mean±std"
    );
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<14} {:>8.3} {:>14.1} {:>5} {:>9.2} {:>9.2} ± {:>4.2} {:>9.2} {:>9.2} ± {:>4.2}",
            r.model,
            r.weight_sparsity,
            r.effective_macs,
            r.seeds,
            r.valid_min,
            r.valid_mean,
            r.valid_std,
            r.test_min,
            r.test_mean,
            r.test_std
        );
    }

    Ok(SummaryTable { rows, csv, text })
}
