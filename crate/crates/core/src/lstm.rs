//! Standard LSTM cell, the dense baseline the event-based cell is compared
//! against. Same storage conventions as the EGRU cell: each gate matrix is
//! hidden x (input + hidden) over the concatenated [input; hidden] vector.

use crate::math::{concat, sigmoid, DenseMatrix, Real};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct LstmParams<R: Real = f32> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: DenseMatrix<R>,
    pub w_f: DenseMatrix<R>,
    pub w_g: DenseMatrix<R>,
    pub w_o: DenseMatrix<R>,
    pub b_i: Vec<R>,
    pub b_f: Vec<R>,
    pub b_g: Vec<R>,
    pub b_o: Vec<R>,
}

#[derive(Clone, Debug)]
pub struct LstmState<R: Real = f32> {
    pub h: Vec<R>,
    pub c: Vec<R>,
}

impl<R: Real> LstmState<R> {
    pub fn zeros(hidden_dim: usize) -> LstmState<R> {
        LstmState { h: vec![R::ZERO; hidden_dim], c: vec![R::ZERO; hidden_dim] }
    }
}

#[derive(Clone, Debug)]
pub struct LstmStepTape<R: Real = f32> {
    pub x: Vec<R>,
    pub h_prev: Vec<R>,
    pub c_prev: Vec<R>,
    pub i: Vec<R>,
    pub f: Vec<R>,
    pub g: Vec<R>,
    pub o: Vec<R>,
    /// tanh of the new cell state.
    pub tc: Vec<R>,
}

#[derive(Clone, Debug)]
pub struct LstmGrads<R: Real = f32> {
    pub w_i: DenseMatrix<R>,
    pub w_f: DenseMatrix<R>,
    pub w_g: DenseMatrix<R>,
    pub w_o: DenseMatrix<R>,
    pub b_i: Vec<R>,
    pub b_f: Vec<R>,
    pub b_g: Vec<R>,
    pub b_o: Vec<R>,
}

impl<R: Real> LstmGrads<R> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> LstmGrads<R> {
        let m = || DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim);
        let v = || vec![R::ZERO; hidden_dim];
        LstmGrads { w_i: m(), w_f: m(), w_g: m(), w_o: m(), b_i: v(), b_f: v(), b_g: v(), b_o: v() }
    }
}

impl LstmParams<f32> {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &Rng) -> LstmParams<f32> {
        let fan = (input_dim + hidden_dim + hidden_dim) as f64;
        let bound = (6.0 / fan).sqrt() as f32;
        let mat = |label: &str| {
            let mut w = DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim);
            rng.substream(label).fill_uniform(&mut w.data, -bound, bound);
            w
        };
        LstmParams {
            input_dim,
            hidden_dim,
            w_i: mat("w_i"),
            w_f: mat("w_f"),
            w_g: mat("w_g"),
            w_o: mat("w_o"),
            b_i: vec![0.0; hidden_dim],
            b_f: vec![0.0; hidden_dim],
            b_g: vec![0.0; hidden_dim],
            b_o: vec![0.0; hidden_dim],
        }
    }
}

impl<R: Real> LstmParams<R> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> LstmParams<R> {
        let m = || DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim);
        let v = || vec![R::ZERO; hidden_dim];
        LstmParams {
            input_dim,
            hidden_dim,
            w_i: m(),
            w_f: m(),
            w_g: m(),
            w_o: m(),
            b_i: v(),
            b_f: v(),
            b_g: v(),
            b_o: v(),
        }
    }

    pub fn cast<T: Real>(&self) -> LstmParams<T> {
        LstmParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_i: crate::math::cast_matrix(&self.w_i),
            w_f: crate::math::cast_matrix(&self.w_f),
            w_g: crate::math::cast_matrix(&self.w_g),
            w_o: crate::math::cast_matrix(&self.w_o),
            b_i: crate::math::cast_vec(&self.b_i),
            b_f: crate::math::cast_vec(&self.b_f),
            b_g: crate::math::cast_vec(&self.b_g),
            b_o: crate::math::cast_vec(&self.b_o),
        }
    }

    pub fn step(&self, x: &[R], prev: &LstmState<R>, fast: bool) -> (LstmState<R>, LstmStepTape<R>) {
        assert_eq!(x.len(), self.input_dim, "step: input {} vs {}", x.len(), self.input_dim);
        let h = self.hidden_dim;
        let a = concat(x, &prev.h);
        let mut i = R::matvec(&self.w_i, &a, fast);
        let mut f = R::matvec(&self.w_f, &a, fast);
        let mut g = R::matvec(&self.w_g, &a, fast);
        let mut o = R::matvec(&self.w_o, &a, fast);
        let mut c = Vec::with_capacity(h);
        let mut tc = Vec::with_capacity(h);
        let mut hh = Vec::with_capacity(h);
        for k in 0..h {
            i[k] = sigmoid(i[k] + self.b_i[k]);
            f[k] = sigmoid(f[k] + self.b_f[k]);
            g[k] = (g[k] + self.b_g[k]).tanh();
            o[k] = sigmoid(o[k] + self.b_o[k]);
            let ck = f[k] * prev.c[k] + i[k] * g[k];
            c.push(ck);
            tc.push(ck.tanh());
            hh.push(o[k] * tc[k]);
        }
        let tape = LstmStepTape {
            x: x.to_vec(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            i,
            f,
            g,
            o,
            tc,
        };
        (LstmState { h: hh, c }, tape)
    }

    /// Truncated backprop over a taped window; mirrors the EGRU signature.
    pub fn backward(
        &self,
        tape: &[LstmStepTape<R>],
        grad_h: &[Vec<R>],
        grad_c_final: &[R],
    ) -> (LstmGrads<R>, Vec<Vec<R>>) {
        let refs: Vec<&LstmStepTape<R>> = tape.iter().collect();
        self.backward_ref(&refs, grad_h, grad_c_final)
    }

    /// Same as `backward` over borrowed steps.
    pub fn backward_ref(
        &self,
        tape: &[&LstmStepTape<R>],
        grad_h: &[Vec<R>],
        grad_c_final: &[R],
    ) -> (LstmGrads<R>, Vec<Vec<R>>) {
        assert_eq!(tape.len(), grad_h.len());
        let h = self.hidden_dim;
        let d = self.input_dim;
        let mut gr = LstmGrads::zeros(d, h);
        let mut dx_seq = vec![Vec::new(); tape.len()];
        let mut dc: Vec<R> = grad_c_final.to_vec();
        let mut dh_carry = vec![R::ZERO; h];

        for t in (0..tape.len()).rev() {
            let s = tape[t];
            let mut dpi = vec![R::ZERO; h];
            let mut dpf = vec![R::ZERO; h];
            let mut dpg = vec![R::ZERO; h];
            let mut dpo = vec![R::ZERO; h];
            let mut dc_prev = vec![R::ZERO; h];
            for k in 0..h {
                let dh = grad_h[t][k] + dh_carry[k];
                let d_o = dh * s.tc[k];
                let dct = dc[k] + dh * s.o[k] * (R::ONE - s.tc[k] * s.tc[k]);
                let d_i = dct * s.g[k];
                let d_f = dct * s.c_prev[k];
                let d_g = dct * s.i[k];
                dc_prev[k] = dct * s.f[k];
                dpi[k] = d_i * s.i[k] * (R::ONE - s.i[k]);
                dpf[k] = d_f * s.f[k] * (R::ONE - s.f[k]);
                dpg[k] = d_g * (R::ONE - s.g[k] * s.g[k]);
                dpo[k] = d_o * s.o[k] * (R::ONE - s.o[k]);
                gr.b_i[k] += dpi[k];
                gr.b_f[k] += dpf[k];
                gr.b_g[k] += dpg[k];
                gr.b_o[k] += dpo[k];
            }

            let a = concat(&s.x, &s.h_prev);
            R::outer_acc(&mut gr.w_i, &dpi, &a);
            R::outer_acc(&mut gr.w_f, &dpf, &a);
            R::outer_acc(&mut gr.w_g, &dpg, &a);
            R::outer_acc(&mut gr.w_o, &dpo, &a);
            let da_i = R::matvec_t(&self.w_i, &dpi);
            let da_f = R::matvec_t(&self.w_f, &dpf);
            let da_g = R::matvec_t(&self.w_g, &dpg);
            let da_o = R::matvec_t(&self.w_o, &dpo);

            let mut dx = vec![R::ZERO; d];
            for j in 0..d {
                dx[j] = da_i[j] + da_f[j] + da_g[j] + da_o[j];
            }
            let mut dh_prev = vec![R::ZERO; h];
            for k in 0..h {
                dh_prev[k] = da_i[d + k] + da_f[d + k] + da_g[d + k] + da_o[d + k];
            }

            dx_seq[t] = dx;
            dh_carry = dh_prev;
            dc = dc_prev;
        }
        (gr, dx_seq)
    }
}
