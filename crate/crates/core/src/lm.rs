//! Stacked recurrent language model with a tied decoder.
//!
//! Tokens index an embedding table, the embedding feeds a stack of recurrent
//! cells, and the top layer's output is decoded back to vocabulary logits
//! through the transpose of the same embedding table (no decoder bias), so
//! the top hidden width must equal the embedding width.
//!
//! Everything the optimizer, the pruner, and the checkpoint writer need to
//! know about the parameter tensors lives in one canonical slot enumeration:
//! embedding first, then per layer the gate matrices, biases, and thresholds
//! in a fixed order. Gradients and moment buffers mirror the same order.

use crate::egru::{EgruGrads, EgruParams, EgruState, EgruStepTape, StepMode, SurrogateCfg};
use crate::lstm::{LstmGrads, LstmParams, LstmState, LstmStepTape};
use crate::math::{DenseMatrix, DenseVector, Real};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum CellKind {
    Egru,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Hidden width per layer; the last entry must equal `embed_dim`.
    pub hidden_dims: Vec<usize>,
    pub cell: CellKind,
    /// Step mode for gated cells; ignored by the LSTM baseline.
    pub mode: StepMode,
    /// Drop probability on the embedding entering the stack and on the top
    /// output entering the decoder. Inverted scaling, fresh mask per step.
    pub dropout_p: f64,
    /// Drop probability on recurrent weight columns, resampled per window.
    pub dropconnect_p: f64,
    /// When false the thresholds keep their initial values.
    pub train_theta: bool,
    pub surrogate_lambda: f64,
    pub surrogate_epsilon: f64,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab_size < 2 {
            return Err(format!("vocab_size {} too small", self.vocab_size));
        }
        if self.hidden_dims.is_empty() {
            return Err("hidden_dims is empty".into());
        }
        if *self.hidden_dims.last().unwrap() != self.embed_dim {
            return Err(format!(
                "tied decoder needs top hidden width {} to equal embed_dim {}",
                self.hidden_dims.last().unwrap(),
                self.embed_dim
            ));
        }
        for &p in &[self.dropout_p, self.dropconnect_p] {
            if !(0.0..1.0).contains(&p) {
                return Err(format!("drop probability {p} outside [0, 1)"));
            }
        }
        if self.surrogate_epsilon <= 0.0 {
            return Err("surrogate_epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.hidden_dims[layer - 1]
        }
    }

    pub fn surrogate<R: Real>(&self) -> SurrogateCfg<R> {
        SurrogateCfg { lambda: R::c(self.surrogate_lambda), epsilon: R::c(self.surrogate_epsilon) }
    }
}

/// What a parameter tensor is, which decides how it is decayed, whether it
/// can be pruned, and whether it trains at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotKind {
    Embedding,
    GateMatrix,
    Bias,
    Threshold,
}

#[derive(Clone, Debug)]
pub struct SlotMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: SlotKind,
}

impl SlotMeta {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Only gate matrices take part in magnitude pruning.
    pub fn prunable(&self) -> bool {
        self.kind == SlotKind::GateMatrix
    }
}

impl LmConfig {
    /// Canonical parameter slots: embedding, then per layer the gates in a
    /// fixed order. `LmModel::slots` and `LmGrads::slots_mut` enumerate
    /// their storage in exactly this order.
    pub fn slot_metas(&self) -> Vec<SlotMeta> {
        let mut metas = vec![SlotMeta {
            name: "embedding".into(),
            rows: self.vocab_size,
            cols: self.embed_dim,
            kind: SlotKind::Embedding,
        }];
        for (l, &h) in self.hidden_dims.iter().enumerate() {
            let d = self.layer_input_dim(l);
            let mat = |g: &str| SlotMeta {
                name: format!("layer{l}.w_{g}"),
                rows: h,
                cols: d + h,
                kind: SlotKind::GateMatrix,
            };
            let bias = |g: &str| SlotMeta {
                name: format!("layer{l}.b_{g}"),
                rows: h,
                cols: 1,
                kind: SlotKind::Bias,
            };
            match self.cell {
                CellKind::Egru => {
                    for g in ["u", "r", "z"] {
                        metas.push(mat(g));
                        metas.push(bias(g));
                    }
                    metas.push(SlotMeta {
                        name: format!("layer{l}.theta"),
                        rows: h,
                        cols: 1,
                        kind: SlotKind::Threshold,
                    });
                }
                CellKind::Lstm => {
                    for g in ["i", "f", "g", "o"] {
                        metas.push(mat(g));
                        metas.push(bias(g));
                    }
                }
            }
        }
        metas
    }
}

#[derive(Clone, Debug)]
pub enum LayerParams<R: Real = f32> {
    Egru(EgruParams<R>),
    Lstm(LstmParams<R>),
}

#[derive(Clone, Debug)]
pub enum LayerState<R: Real = f32> {
    Egru(EgruState<R>),
    Lstm(LstmState<R>),
}

pub enum LayerStepTape<R: Real = f32> {
    Egru(EgruStepTape<R>),
    Lstm(LstmStepTape<R>),
}

#[derive(Clone, Debug)]
pub enum LayerGrads<R: Real = f32> {
    Egru(EgruGrads<R>),
    Lstm(LstmGrads<R>),
}

impl<R: Real> LayerParams<R> {
    pub fn hidden_dim(&self) -> usize {
        match self {
            LayerParams::Egru(p) => p.hidden_dim,
            LayerParams::Lstm(p) => p.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            LayerParams::Egru(p) => p.input_dim,
            LayerParams::Lstm(p) => p.input_dim,
        }
    }

    pub fn zero_state(&self) -> LayerState<R> {
        match self {
            LayerParams::Egru(_) => LayerState::Egru(EgruState::zeros(self.hidden_dim())),
            LayerParams::Lstm(_) => LayerState::Lstm(LstmState::zeros(self.hidden_dim())),
        }
    }

    pub fn step(
        &self,
        x: &[R],
        prev: &LayerState<R>,
        mode: StepMode,
        sur: &SurrogateCfg<R>,
        fast: bool,
    ) -> (LayerState<R>, LayerStepTape<R>) {
        match (self, prev) {
            (LayerParams::Egru(p), LayerState::Egru(s)) => {
                let (s2, t) = p.step(x, s, mode, sur, fast);
                (LayerState::Egru(s2), LayerStepTape::Egru(t))
            }
            (LayerParams::Lstm(p), LayerState::Lstm(s)) => {
                let (s2, t) = p.step(x, s, fast);
                (LayerState::Lstm(s2), LayerStepTape::Lstm(t))
            }
            _ => panic!("layer state kind does not match layer params"),
        }
    }

    pub fn backward(
        &self,
        tape: &[LayerStepTape<R>],
        grad_y: &[Vec<R>],
        mode: StepMode,
        sur: &SurrogateCfg<R>,
    ) -> (LayerGrads<R>, Vec<Vec<R>>) {
        let zero_c = vec![R::ZERO; self.hidden_dim()];
        match self {
            LayerParams::Egru(p) => {
                let steps: Vec<&EgruStepTape<R>> = tape
                    .iter()
                    .map(|t| match t {
                        LayerStepTape::Egru(t) => t,
                        _ => panic!("tape kind does not match layer params"),
                    })
                    .collect();
                let (g, dx) = p.backward_ref(&steps, grad_y, &zero_c, mode, sur);
                (LayerGrads::Egru(g), dx)
            }
            LayerParams::Lstm(p) => {
                let steps: Vec<&LstmStepTape<R>> = tape
                    .iter()
                    .map(|t| match t {
                        LayerStepTape::Lstm(t) => t,
                        _ => panic!("tape kind does not match layer params"),
                    })
                    .collect();
                let (g, dx) = p.backward_ref(&steps, grad_y, &zero_c);
                (LayerGrads::Lstm(g), dx)
            }
        }
    }

    pub fn cast<T: Real>(&self) -> LayerParams<T> {
        match self {
            LayerParams::Egru(p) => LayerParams::Egru(p.cast()),
            LayerParams::Lstm(p) => LayerParams::Lstm(p.cast()),
        }
    }

    fn gate_matrices_mut(&mut self) -> Vec<&mut DenseMatrix<R>> {
        match self {
            LayerParams::Egru(p) => vec![&mut p.w_u, &mut p.w_r, &mut p.w_z],
            LayerParams::Lstm(p) => vec![&mut p.w_i, &mut p.w_f, &mut p.w_g, &mut p.w_o],
        }
    }
}

impl<R: Real> LayerState<R> {
    pub fn output(&self) -> &[R] {
        match self {
            LayerState::Egru(s) => &s.y,
            LayerState::Lstm(s) => &s.h,
        }
    }

    /// Units that communicated this step. For the LSTM baseline that is
    /// every unit; activity sparsity is an event-cell property.
    pub fn active_count(&self) -> usize {
        match self {
            LayerState::Egru(s) => s.active.len(),
            LayerState::Lstm(s) => s.h.len(),
        }
    }

    pub fn active_units(&self) -> Vec<u32> {
        match self {
            LayerState::Egru(s) => s.active.clone(),
            LayerState::Lstm(s) => (0..s.h.len() as u32).collect(),
        }
    }
}

impl<R: Real> LayerGrads<R> {
    pub fn zeros_for(params: &LayerParams<R>) -> LayerGrads<R> {
        let (d, h) = (params.input_dim(), params.hidden_dim());
        match params {
            LayerParams::Egru(_) => LayerGrads::Egru(EgruGrads::zeros(d, h)),
            LayerParams::Lstm(_) => LayerGrads::Lstm(LstmGrads::zeros(d, h)),
        }
    }

    pub fn add(&mut self, other: &LayerGrads<R>) {
        fn add_vec<R: Real>(a: &mut [R], b: &[R]) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        match (self, other) {
            (LayerGrads::Egru(a), LayerGrads::Egru(b)) => {
                add_vec(&mut a.w_u.data, &b.w_u.data);
                add_vec(&mut a.w_r.data, &b.w_r.data);
                add_vec(&mut a.w_z.data, &b.w_z.data);
                add_vec(&mut a.b_u, &b.b_u);
                add_vec(&mut a.b_r, &b.b_r);
                add_vec(&mut a.b_z, &b.b_z);
                add_vec(&mut a.theta, &b.theta);
            }
            (LayerGrads::Lstm(a), LayerGrads::Lstm(b)) => {
                add_vec(&mut a.w_i.data, &b.w_i.data);
                add_vec(&mut a.w_f.data, &b.w_f.data);
                add_vec(&mut a.w_g.data, &b.w_g.data);
                add_vec(&mut a.w_o.data, &b.w_o.data);
                add_vec(&mut a.b_i, &b.b_i);
                add_vec(&mut a.b_f, &b.b_f);
                add_vec(&mut a.b_g, &b.b_g);
                add_vec(&mut a.b_o, &b.b_o);
            }
            _ => panic!("gradient kinds differ"),
        }
    }

    fn gate_matrices_mut(&mut self) -> Vec<&mut DenseMatrix<R>> {
        match self {
            LayerGrads::Egru(g) => vec![&mut g.w_u, &mut g.w_r, &mut g.w_z],
            LayerGrads::Lstm(g) => vec![&mut g.w_i, &mut g.w_f, &mut g.w_g, &mut g.w_o],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmModel<R: Real = f32> {
    pub cfg: LmConfig,
    /// vocab × embed; rows are input vectors, and the same matrix maps the
    /// top output to logits.
    pub embedding: DenseMatrix<R>,
    pub layers: Vec<LayerParams<R>>,
}

#[derive(Clone, Debug)]
pub struct LmGrads<R: Real = f32> {
    pub embedding: DenseMatrix<R>,
    pub layers: Vec<LayerGrads<R>>,
}

impl LmModel<f32> {
    pub fn init(cfg: &LmConfig, rng: &Rng) -> LmModel<f32> {
        cfg.validate().expect("invalid model config");
        let mut embedding = DenseMatrix::zeros(cfg.vocab_size, cfg.embed_dim);
        rng.substream("embedding").fill_uniform(&mut embedding.data, -0.1, 0.1);
        let lrng = rng.substream("layers");
        let layers = cfg
            .hidden_dims
            .iter()
            .enumerate()
            .map(|(l, &h)| {
                let r = lrng.substream_n(l as u64);
                let d = cfg.layer_input_dim(l);
                match cfg.cell {
                    CellKind::Egru => LayerParams::Egru(EgruParams::<f32>::init(d, h, &r)),
                    CellKind::Lstm => LayerParams::Lstm(LstmParams::<f32>::init(d, h, &r)),
                }
            })
            .collect();
        LmModel { cfg: cfg.clone(), embedding, layers }
    }
}

impl<R: Real> LmModel<R> {
    pub fn zeros(cfg: &LmConfig) -> LmModel<R> {
        cfg.validate().expect("invalid model config");
        let layers = cfg
            .hidden_dims
            .iter()
            .enumerate()
            .map(|(l, &h)| {
                let d = cfg.layer_input_dim(l);
                match cfg.cell {
                    CellKind::Egru => LayerParams::Egru(EgruParams::zeros(d, h)),
                    CellKind::Lstm => LayerParams::Lstm(LstmParams::zeros(d, h)),
                }
            })
            .collect();
        LmModel { cfg: cfg.clone(), embedding: DenseMatrix::zeros(cfg.vocab_size, cfg.embed_dim), layers }
    }

    pub fn cast<T: Real>(&self) -> LmModel<T> {
        LmModel {
            cfg: self.cfg.clone(),
            embedding: crate::math::cast_matrix(&self.embedding),
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn zero_states(&self) -> Vec<LayerState<R>> {
        self.layers.iter().map(|l| l.zero_state()).collect()
    }

    /// Storage for every parameter slot, in `LmConfig::slot_metas` order.
    pub fn slots_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out: Vec<&mut Vec<R>> = vec![&mut self.embedding.data];
        for layer in &mut self.layers {
            match layer {
                LayerParams::Egru(p) => {
                    out.push(&mut p.w_u.data);
                    out.push(&mut p.b_u);
                    out.push(&mut p.w_r.data);
                    out.push(&mut p.b_r);
                    out.push(&mut p.w_z.data);
                    out.push(&mut p.b_z);
                    out.push(&mut p.theta);
                }
                LayerParams::Lstm(p) => {
                    out.push(&mut p.w_i.data);
                    out.push(&mut p.b_i);
                    out.push(&mut p.w_f.data);
                    out.push(&mut p.b_f);
                    out.push(&mut p.w_g.data);
                    out.push(&mut p.b_g);
                    out.push(&mut p.w_o.data);
                    out.push(&mut p.b_o);
                }
            }
        }
        out
    }

    pub fn slots(&self) -> Vec<&Vec<R>> {
        let mut out: Vec<&Vec<R>> = vec![&self.embedding.data];
        for layer in &self.layers {
            match layer {
                LayerParams::Egru(p) => {
                    out.push(&p.w_u.data);
                    out.push(&p.b_u);
                    out.push(&p.w_r.data);
                    out.push(&p.b_r);
                    out.push(&p.w_z.data);
                    out.push(&p.b_z);
                    out.push(&p.theta);
                }
                LayerParams::Lstm(p) => {
                    out.push(&p.w_i.data);
                    out.push(&p.b_i);
                    out.push(&p.w_f.data);
                    out.push(&p.b_f);
                    out.push(&p.w_g.data);
                    out.push(&p.b_g);
                    out.push(&p.w_o.data);
                    out.push(&p.b_o);
                }
            }
        }
        out
    }
}

impl<R: Real> LmGrads<R> {
    pub fn zeros_for(model: &LmModel<R>) -> LmGrads<R> {
        LmGrads {
            embedding: DenseMatrix::zeros(model.cfg.vocab_size, model.cfg.embed_dim),
            layers: model.layers.iter().map(LayerGrads::zeros_for).collect(),
        }
    }

    /// Same order as `LmModel::slots`.
    pub fn slots(&self) -> Vec<&Vec<R>> {
        let mut out: Vec<&Vec<R>> = vec![&self.embedding.data];
        for layer in &self.layers {
            match layer {
                LayerGrads::Egru(g) => {
                    out.push(&g.w_u.data);
                    out.push(&g.b_u);
                    out.push(&g.w_r.data);
                    out.push(&g.b_r);
                    out.push(&g.w_z.data);
                    out.push(&g.b_z);
                    out.push(&g.theta);
                }
                LayerGrads::Lstm(g) => {
                    out.push(&g.w_i.data);
                    out.push(&g.b_i);
                    out.push(&g.w_f.data);
                    out.push(&g.b_f);
                    out.push(&g.w_g.data);
                    out.push(&g.b_g);
                    out.push(&g.w_o.data);
                    out.push(&g.b_o);
                }
            }
        }
        out
    }

    /// Same order as `LmModel::slots_mut`.
    pub fn slots_mut(&mut self) -> Vec<&mut Vec<R>> {
        let mut out: Vec<&mut Vec<R>> = vec![&mut self.embedding.data];
        for layer in &mut self.layers {
            match layer {
                LayerGrads::Egru(g) => {
                    out.push(&mut g.w_u.data);
                    out.push(&mut g.b_u);
                    out.push(&mut g.w_r.data);
                    out.push(&mut g.b_r);
                    out.push(&mut g.w_z.data);
                    out.push(&mut g.b_z);
                    out.push(&mut g.theta);
                }
                LayerGrads::Lstm(g) => {
                    out.push(&mut g.w_i.data);
                    out.push(&mut g.b_i);
                    out.push(&mut g.w_f.data);
                    out.push(&mut g.b_f);
                    out.push(&mut g.w_g.data);
                    out.push(&mut g.b_g);
                    out.push(&mut g.w_o.data);
                    out.push(&mut g.b_o);
                }
            }
        }
        out
    }
}

/// Per-window multipliers for recurrent weight dropout: 1 on the input
/// column block, 0 or 1/(1-p) on the recurrent block. Applying them to the
/// weights before the forward pass and to the weight gradients after the
/// backward pass implements dropped connections exactly.
pub struct DropConnectMasks<R: Real = f32> {
    pub mults: Vec<Vec<DenseMatrix<R>>>,
}

pub fn sample_dropconnect<R: Real>(
    layers: &[LayerParams<R>],
    p: f64,
    rng: &mut Rng,
) -> Option<DropConnectMasks<R>> {
    if p <= 0.0 {
        return None;
    }
    let scale = R::c(1.0 / (1.0 - p));
    let mults = layers
        .iter()
        .map(|layer| {
            let d = layer.input_dim();
            let h = layer.hidden_dim();
            let n_gates = match layer {
                LayerParams::Egru(_) => 3,
                LayerParams::Lstm(_) => 4,
            };
            (0..n_gates)
                .map(|_| {
                    let mut m = DenseMatrix::zeros(h, d + h);
                    m.fill(R::ONE);
                    for i in 0..h {
                        for j in d..d + h {
                            m.set(i, j, if rng.bernoulli(p) { R::ZERO } else { scale });
                        }
                    }
                    m
                })
                .collect()
        })
        .collect();
    Some(DropConnectMasks { mults })
}

pub fn apply_dropconnect<R: Real>(
    layers: &[LayerParams<R>],
    masks: &DropConnectMasks<R>,
) -> Vec<LayerParams<R>> {
    layers
        .iter()
        .zip(&masks.mults)
        .map(|(layer, mults)| {
            let mut eff = layer.clone();
            for (w, m) in eff.gate_matrices_mut().into_iter().zip(mults) {
                for (wi, &mi) in w.data.iter_mut().zip(&m.data) {
                    *wi *= mi;
                }
            }
            eff
        })
        .collect()
}

/// Chain rule through the mask: gradients w.r.t. the effective weights
/// become gradients w.r.t. the stored weights.
pub fn fold_dropconnect_grads<R: Real>(grads: &mut LmGrads<R>, masks: &DropConnectMasks<R>) {
    for (layer, mults) in grads.layers.iter_mut().zip(&masks.mults) {
        for (g, m) in layer.gate_matrices_mut().into_iter().zip(mults) {
            for (gi, &mi) in g.data.iter_mut().zip(&m.data) {
                *gi *= mi;
            }
        }
    }
}

/// Logits from the top output through the shared embedding. Both the
/// training stack and the event-driven engine decode through this one
/// function, so their logits agree exactly when their inputs do.
pub fn decode_logits<R: Real>(embedding: &DenseMatrix<R>, y_top: &[R], fast: bool) -> DenseVector<R> {
    R::matvec(embedding, y_top, fast)
}

/// Mean negative log likelihood pieces for one step: returns the nll (in
/// f64, for stable accumulation) and the unscaled logit gradient
/// softmax(logits) - onehot(target).
pub fn softmax_nll<R: Real>(logits: &[R], target: u32) -> (f64, Vec<R>) {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        max = max.max(v.to_f64());
    }
    let mut sum = 0.0f64;
    let exps: Vec<f64> = logits
        .iter()
        .map(|&v| {
            let e = (v.to_f64() - max).exp();
            sum += e;
            e
        })
        .collect();
    let nll = sum.ln() - (logits[target as usize].to_f64() - max);
    let mut dlogits: Vec<R> = exps.iter().map(|&e| R::c(e / sum)).collect();
    dlogits[target as usize] -= R::ONE;
    (nll, dlogits)
}

/// Spike counts per layer collected during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActivityStats {
    pub steps: usize,
    /// Active-unit count per layer per step.
    pub step_active: Vec<Vec<u32>>,
    /// Total activations per layer per unit.
    pub neuron_active: Vec<Vec<u64>>,
}

impl ActivityStats {
    pub fn new(hidden_dims: &[usize]) -> ActivityStats {
        ActivityStats {
            steps: 0,
            step_active: vec![Vec::new(); hidden_dims.len()],
            neuron_active: hidden_dims.iter().map(|&h| vec![0u64; h]).collect(),
        }
    }

    pub fn record(&mut self, layer: usize, state: &LayerState<impl Real>) {
        self.step_active[layer].push(state.active_count() as u32);
        for &u in &state.active_units() {
            self.neuron_active[layer][u as usize] += 1;
        }
    }

    /// Mean fraction of units active per step.
    pub fn lambda_a(&self, layer: usize) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        let total: u64 = self.step_active[layer].iter().map(|&c| c as u64).sum();
        total as f64 / (self.steps as f64 * self.neuron_active[layer].len() as f64)
    }

    pub fn lambda_a_all(&self) -> Vec<f64> {
        (0..self.step_active.len()).map(|l| self.lambda_a(l)).collect()
    }

    pub fn merge(&mut self, other: &ActivityStats) {
        self.steps += other.steps;
        for l in 0..self.step_active.len() {
            self.step_active[l].extend_from_slice(&other.step_active[l]);
            for (a, &b) in self.neuron_active[l].iter_mut().zip(&other.neuron_active[l]) {
                *a += b;
            }
        }
    }
}

pub struct WindowTape<R: Real = f32> {
    pub tokens: Vec<u32>,
    /// Indexed `[layer][step]`.
    pub layer_tapes: Vec<Vec<LayerStepTape<R>>>,
    /// Inverted dropout multipliers, present only when dropout was applied.
    pub in_mask: Option<Vec<Vec<R>>>,
    pub out_mask: Option<Vec<Vec<R>>>,
    /// Decoder input per step (after output dropout).
    pub y_top: Vec<Vec<R>>,
}

pub struct WindowForward<R: Real = f32> {
    pub logits: Vec<DenseVector<R>>,
    pub final_states: Vec<LayerState<R>>,
    pub tape: WindowTape<R>,
    pub stats: ActivityStats,
}

fn dropout_mask<R: Real>(n: usize, p: f64, rng: &mut Rng) -> Vec<R> {
    let scale = R::c(1.0 / (1.0 - p));
    (0..n).map(|_| if rng.bernoulli(p) { R::ZERO } else { scale }).collect()
}

impl<R: Real> LmModel<R> {
    /// Runs one token window through `layers` (pass `&self.layers` unless a
    /// dropped-connection copy is in play), carrying `states` in and
    /// returning the final states for the next window. `dropout_rng`
    /// enables input/output dropout; pass `None` when evaluating.
    pub fn forward_window(
        &self,
        layers: &[LayerParams<R>],
        tokens: &[u32],
        states: &[LayerState<R>],
        mut dropout_rng: Option<&mut Rng>,
        fast: bool,
    ) -> WindowForward<R> {
        assert_eq!(layers.len(), self.layers.len());
        let sur = self.cfg.surrogate::<R>();
        let mode = self.cfg.mode;
        let p = self.cfg.dropout_p;
        let use_dropout = dropout_rng.is_some() && p > 0.0;

        let mut states: Vec<LayerState<R>> = states.to_vec();
        let mut stats = ActivityStats::new(&self.cfg.hidden_dims);
        let mut tape = WindowTape {
            tokens: tokens.to_vec(),
            layer_tapes: (0..layers.len()).map(|_| Vec::with_capacity(tokens.len())).collect(),
            in_mask: use_dropout.then(Vec::new),
            out_mask: use_dropout.then(Vec::new),
            y_top: Vec::with_capacity(tokens.len()),
        };
        let mut logits = Vec::with_capacity(tokens.len());

        for &tok in tokens {
            assert!((tok as usize) < self.cfg.vocab_size, "token {tok} outside vocabulary");
            let mut x: Vec<R> = self.embedding.row(tok as usize).to_vec();
            if use_dropout {
                let rng = dropout_rng.as_deref_mut().unwrap();
                let m = dropout_mask::<R>(x.len(), p, rng);
                for (xi, &mi) in x.iter_mut().zip(&m) {
                    *xi *= mi;
                }
                tape.in_mask.as_mut().unwrap().push(m);
            }
            for (l, layer) in layers.iter().enumerate() {
                let (s2, t) = layer.step(&x, &states[l], mode, &sur, fast);
                stats.record(l, &s2);
                x = s2.output().to_vec();
                states[l] = s2;
                tape.layer_tapes[l].push(t);
            }
            stats.steps += 1;
            if use_dropout {
                let rng = dropout_rng.as_deref_mut().unwrap();
                let m = dropout_mask::<R>(x.len(), p, rng);
                for (xi, &mi) in x.iter_mut().zip(&m) {
                    *xi *= mi;
                }
                tape.out_mask.as_mut().unwrap().push(m);
            }
            logits.push(decode_logits(&self.embedding, &x, fast));
            tape.y_top.push(x);
        }

        WindowForward { logits, final_states: states, tape, stats }
    }

    /// Backward through one forwarded window, accumulating into `grads`.
    /// `loss_scale` multiplies the per-step logit gradients (pass
    /// 1 / (window length × batch rows) for a mean loss). Returns the
    /// summed, unscaled negative log likelihood of the window.
    pub fn backward_window(
        &self,
        layers: &[LayerParams<R>],
        fwd: &WindowForward<R>,
        targets: &[u32],
        loss_scale: f64,
        grads: &mut LmGrads<R>,
    ) -> f64 {
        let t_len = targets.len();
        assert_eq!(t_len, fwd.logits.len());
        let sur = self.cfg.surrogate::<R>();
        let mode = self.cfg.mode;
        let scale = R::c(loss_scale);

        let mut nll_sum = 0.0f64;
        // Decoder side: dE += dlogits ⊗ y_top, dy_top = Eᵀ dlogits.
        let mut dy: Vec<Vec<R>> = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let (nll, mut dlogits) = softmax_nll(&fwd.logits[t], targets[t]);
            nll_sum += nll;
            for v in dlogits.iter_mut() {
                *v *= scale;
            }
            R::outer_acc(&mut grads.embedding, &dlogits, &fwd.tape.y_top[t]);
            let mut d = R::matvec_t(&self.embedding, &dlogits);
            if let Some(masks) = &fwd.tape.out_mask {
                for (di, &mi) in d.iter_mut().zip(&masks[t]) {
                    *di *= mi;
                }
            }
            dy.push(d);
        }

        // Stack, top layer first: each layer's input gradients become the
        // output gradients of the layer below.
        for l in (0..layers.len()).rev() {
            let (lg, dx) = layers[l].backward(&fwd.tape.layer_tapes[l], &dy, mode, &sur);
            grads.layers[l].add(&lg);
            dy = dx;
        }

        // Input side of the tied embedding.
        for t in 0..t_len {
            if let Some(masks) = &fwd.tape.in_mask {
                for (di, &mi) in dy[t].iter_mut().zip(&masks[t]) {
                    *di *= mi;
                }
            }
            let row = fwd.tape.tokens[t] as usize;
            let dst = &mut grads.embedding.data[row * self.cfg.embed_dim..(row + 1) * self.cfg.embed_dim];
            for (ei, &di) in dst.iter_mut().zip(&dy[t]) {
                *ei += di;
            }
        }
        nll_sum
    }
}
