//! Event-based gated recurrent cell.
//!
//! A GRU-style cell whose output is gated by a per-unit learned threshold:
//! a unit communicates its value only at steps where the candidate state
//! reaches the threshold, and firing subtracts the threshold from the state
//! it keeps. Everything below threshold stays local to the cell and the
//! output vector is exactly zero there, which is what the event-driven
//! engine exploits.
//!
//! The step function is not differentiable at the threshold, so the backward
//! pass substitutes a triangular surrogate derivative. `StepMode::Smooth`
//! replaces the hard gate with the surrogate's antiderivative, making the
//! whole forward differentiable so finite differences can validate the
//! backward pass exactly as implemented.

use crate::math::{concat, sigmoid, DenseMatrix, Real};
use crate::rng::Rng;

/// Slope and half-width of the triangular surrogate derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateCfg<R: Real = f32> {
    pub lambda: R,
    pub epsilon: R,
}

impl<R: Real> Default for SurrogateCfg<R> {
    fn default() -> Self {
        SurrogateCfg { lambda: R::c(0.3), epsilon: R::c(1.0) }
    }
}

impl<R: Real> SurrogateCfg<R> {
    pub fn cast<T: Real>(&self) -> SurrogateCfg<T> {
        SurrogateCfg { lambda: T::c(self.lambda.to_f64()), epsilon: T::c(self.epsilon.to_f64()) }
    }
}

/// Pseudo-derivative of the spike gate at distance `v` from threshold:
/// lambda * max(0, 1 - |v| / epsilon).
#[inline]
pub fn surrogate_pd<R: Real>(v: R, cfg: &SurrogateCfg<R>) -> R {
    let t = R::ONE - v.abs() / cfg.epsilon;
    cfg.lambda * t.max(R::ZERO)
}

/// Antiderivative of `surrogate_pd`: a smooth ramp from 0 at v <= -epsilon
/// to lambda * epsilon at v >= epsilon. Used by `StepMode::Smooth`.
#[inline]
pub fn surrogate_ramp<R: Real>(v: R, cfg: &SurrogateCfg<R>) -> R {
    let e = cfg.epsilon;
    let l = cfg.lambda;
    let half = R::c(0.5);
    if v <= -e {
        R::ZERO
    } else if v <= R::ZERO {
        let s = v + e;
        l * s * s * half / e
    } else if v < e {
        l * e * half + l * (v - v * v * half / e)
    } else {
        l * e
    }
}

/// How the threshold gate is applied during a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StepMode {
    /// Hard gate, firing at the boundary, threshold subtracted on fire.
    Event,
    /// Gate forced open and no reset: reduces the cell to a plain GRU.
    Dense,
    /// Hard gate replaced by the surrogate's antiderivative; differentiable.
    Smooth,
}

/// Output gating: y_i = c_hat_i where c_hat_i >= theta_i, else 0.
/// The boundary fires. Returns the gated output and the spike mask.
pub fn heaviside_output<R: Real>(c_hat: &[R], theta: &[R]) -> (Vec<R>, Vec<bool>) {
    assert_eq!(c_hat.len(), theta.len());
    let spikes: Vec<bool> = c_hat.iter().zip(theta).map(|(&c, &t)| c >= t).collect();
    let y = c_hat
        .iter()
        .zip(&spikes)
        .map(|(&c, &s)| if s { c } else { R::ZERO })
        .collect();
    (y, spikes)
}

/// Gate weights over the concatenated [input; own output] vector, plus the
/// per-unit thresholds.
#[derive(Clone, Debug)]
pub struct EgruParams<R: Real = f32> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Update gate, hidden x (input + hidden).
    pub w_u: DenseMatrix<R>,
    /// Reset gate, same shape.
    pub w_r: DenseMatrix<R>,
    /// Candidate, same shape; its recurrent block sees the reset-scaled output.
    pub w_z: DenseMatrix<R>,
    pub b_u: Vec<R>,
    pub b_r: Vec<R>,
    pub b_z: Vec<R>,
    pub theta: Vec<R>,
}

impl EgruParams<f32> {
    /// Uniform init with gate-matrix bounds from fan-in and fan-out, zero
    /// biases, thresholds uniform in [0, 1]. Each tensor draws from its own
    /// labeled substream.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &Rng) -> EgruParams<f32> {
        let fan = (input_dim + hidden_dim + hidden_dim) as f64;
        let bound = (6.0 / fan).sqrt() as f32;
        let mat = |label: &str| {
            let mut w = DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim);
            rng.substream(label).fill_uniform(&mut w.data, -bound, bound);
            w
        };
        let w_u = mat("w_u");
        let w_r = mat("w_r");
        let w_z = mat("w_z");
        // Biases must not start at exactly zero: a layer whose input is all
        // zeros then has c_hat identically zero, and y = c_hat * H makes both
        // product-rule terms vanish there, so no gradient ever crosses the
        // layer and a silent stack is a fixed point of training.
        let bias_bound = (1.0 / hidden_dim as f64).sqrt() as f32;
        let bias = |label: &str| {
            let mut b = vec![0.0f32; hidden_dim];
            rng.substream(label).fill_uniform(&mut b, -bias_bound, bias_bound);
            b
        };
        let mut theta = vec![0.0f32; hidden_dim];
        rng.substream("theta").fill_uniform(&mut theta, 0.0, 1.0);
        EgruParams {
            input_dim,
            hidden_dim,
            w_u,
            w_r,
            w_z,
            b_u: bias("b_u"),
            b_r: bias("b_r"),
            b_z: bias("b_z"),
            theta,
        }
    }
}

impl<R: Real> EgruParams<R> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> EgruParams<R> {
        EgruParams {
            input_dim,
            hidden_dim,
            w_u: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            w_r: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            w_z: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            b_u: vec![R::ZERO; hidden_dim],
            b_r: vec![R::ZERO; hidden_dim],
            b_z: vec![R::ZERO; hidden_dim],
            theta: vec![R::ZERO; hidden_dim],
        }
    }

    pub fn cast<T: Real>(&self) -> EgruParams<T> {
        EgruParams {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_u: crate::math::cast_matrix(&self.w_u),
            w_r: crate::math::cast_matrix(&self.w_r),
            w_z: crate::math::cast_matrix(&self.w_z),
            b_u: crate::math::cast_vec(&self.b_u),
            b_r: crate::math::cast_vec(&self.b_r),
            b_z: crate::math::cast_vec(&self.b_z),
            theta: crate::math::cast_vec(&self.theta),
        }
    }
}

/// Post-step state. `y` holds the pre-reset candidate at active units and
/// exact zeros elsewhere; `active` lists the nonzero positions of `y`.
#[derive(Clone, Debug)]
pub struct EgruState<R: Real = f32> {
    pub y: Vec<R>,
    pub c: Vec<R>,
    pub active: Vec<u32>,
}

impl<R: Real> EgruState<R> {
    pub fn zeros(hidden_dim: usize) -> EgruState<R> {
        EgruState { y: vec![R::ZERO; hidden_dim], c: vec![R::ZERO; hidden_dim], active: Vec::new() }
    }
}

pub fn active_set<R: Real>(y: &[R]) -> Vec<u32> {
    y.iter()
        .enumerate()
        .filter(|(_, &v)| v != R::ZERO)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Everything one step caches for backprop.
#[derive(Clone, Debug)]
pub struct EgruStepTape<R: Real = f32> {
    pub x: Vec<R>,
    pub y_prev: Vec<R>,
    pub c_prev: Vec<R>,
    pub u: Vec<R>,
    pub r: Vec<R>,
    pub z: Vec<R>,
    pub c_hat: Vec<R>,
    /// Gate value per unit: 0/1 in Event mode, 1 in Dense, ramp value in Smooth.
    pub m: Vec<R>,
}

/// State transition shared by training, evaluation, and the event-driven
/// engine: from gate activations to (c_hat, gate value, y, c).
pub fn egru_cell_update<R: Real>(
    u: &[R],
    z: &[R],
    c_prev: &[R],
    theta: &[R],
    mode: StepMode,
    sur: &SurrogateCfg<R>,
) -> (Vec<R>, Vec<R>, Vec<R>, Vec<R>) {
    let n = u.len();
    let mut c_hat = Vec::with_capacity(n);
    for i in 0..n {
        c_hat.push(u[i] * z[i] + (R::ONE - u[i]) * c_prev[i]);
    }
    let mut m = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    match mode {
        StepMode::Event => {
            for i in 0..n {
                if c_hat[i] >= theta[i] {
                    m.push(R::ONE);
                    y.push(c_hat[i]);
                    c.push(c_hat[i] - theta[i]);
                } else {
                    m.push(R::ZERO);
                    y.push(R::ZERO);
                    c.push(c_hat[i]);
                }
            }
        }
        StepMode::Dense => {
            for i in 0..n {
                m.push(R::ONE);
                y.push(c_hat[i]);
                c.push(c_hat[i]);
            }
        }
        StepMode::Smooth => {
            for i in 0..n {
                let g = surrogate_ramp(c_hat[i] - theta[i], sur);
                m.push(g);
                y.push(c_hat[i] * g);
                c.push(c_hat[i] - theta[i] * g);
            }
        }
    }
    (c_hat, m, y, c)
}

impl<R: Real> EgruParams<R> {
    /// One step. `fast` selects the lane f32 kernels (training); the
    /// sequential reference kernels otherwise.
    pub fn step(
        &self,
        x: &[R],
        prev: &EgruState<R>,
        mode: StepMode,
        sur: &SurrogateCfg<R>,
        fast: bool,
    ) -> (EgruState<R>, EgruStepTape<R>) {
        assert_eq!(x.len(), self.input_dim, "step: input {} vs {}", x.len(), self.input_dim);
        assert_eq!(prev.y.len(), self.hidden_dim);
        let h = self.hidden_dim;

        let a = concat(x, &prev.y);
        let mut u = R::matvec(&self.w_u, &a, fast);
        let mut r = R::matvec(&self.w_r, &a, fast);
        for i in 0..h {
            u[i] = sigmoid(u[i] + self.b_u[i]);
            r[i] = sigmoid(r[i] + self.b_r[i]);
        }
        let ry: Vec<R> = r.iter().zip(&prev.y).map(|(&ri, &yi)| ri * yi).collect();
        let az = concat(x, &ry);
        let mut z = R::matvec(&self.w_z, &az, fast);
        for i in 0..h {
            z[i] = (z[i] + self.b_z[i]).tanh();
        }

        let (c_hat, m, y, c) = egru_cell_update(&u, &z, &prev.c, &self.theta, mode, sur);
        let active = active_set(&y);
        let tape = EgruStepTape {
            x: x.to_vec(),
            y_prev: prev.y.clone(),
            c_prev: prev.c.clone(),
            u,
            r,
            z,
            c_hat,
            m,
        };
        (EgruState { y, c, active }, tape)
    }

    /// Truncated backprop over a taped window.
    ///
    /// `grad_y[t]` is the loss gradient on the communicated state at step t;
    /// `grad_c_final` the gradient on the final cell state (usually zero).
    /// Gate discontinuities backpropagate through the surrogate: the spike
    /// derivative with respect to its argument is `surrogate_pd`, applied on
    /// both the output path and the reset path. Gradients with respect to
    /// the pre-window state are dropped (windows are detached).
    ///
    /// Returns parameter gradients and per-step input gradients.
    pub fn backward(
        &self,
        tape: &[EgruStepTape<R>],
        grad_y: &[Vec<R>],
        grad_c_final: &[R],
        mode: StepMode,
        sur: &SurrogateCfg<R>,
    ) -> (EgruGrads<R>, Vec<Vec<R>>) {
        let refs: Vec<&EgruStepTape<R>> = tape.iter().collect();
        self.backward_ref(&refs, grad_y, grad_c_final, mode, sur)
    }

    /// Same as `backward` over borrowed steps; the stacked model tapes steps
    /// behind an enum and hands them over by reference.
    pub fn backward_ref(
        &self,
        tape: &[&EgruStepTape<R>],
        grad_y: &[Vec<R>],
        grad_c_final: &[R],
        mode: StepMode,
        sur: &SurrogateCfg<R>,
    ) -> (EgruGrads<R>, Vec<Vec<R>>) {
        assert_eq!(tape.len(), grad_y.len(), "backward: tape {} vs grad_y {}", tape.len(), grad_y.len());
        let h = self.hidden_dim;
        let d = self.input_dim;
        let mut g = EgruGrads::zeros(d, h);
        let mut dx_seq = vec![Vec::new(); tape.len()];
        let mut dc: Vec<R> = grad_c_final.to_vec();
        let mut dy_carry = vec![R::ZERO; h];

        for t in (0..tape.len()).rev() {
            let s = tape[t];
            let mut g_chat = vec![R::ZERO; h];
            for i in 0..h {
                let dy = grad_y[t][i] + dy_carry[i];
                let pd = match mode {
                    StepMode::Dense => R::ZERO,
                    _ => surrogate_pd(s.c_hat[i] - self.theta[i], sur),
                };
                let m = s.m[i];
                g_chat[i] = dy * (m + s.c_hat[i] * pd) + dc[i] * (R::ONE - self.theta[i] * pd);
                if mode != StepMode::Dense {
                    // Threshold feels the output gate and the reset; in dense
                    // mode it does not exist in the forward at all.
                    g.theta[i] += dy * (-s.c_hat[i] * pd) + dc[i] * (self.theta[i] * pd - m);
                }
            }

            // Through c_hat = u z + (1 - u) c_prev.
            let mut g_pu = vec![R::ZERO; h];
            let mut g_pz = vec![R::ZERO; h];
            let mut dc_prev = vec![R::ZERO; h];
            for i in 0..h {
                let gu = g_chat[i] * (s.z[i] - s.c_prev[i]);
                let gz = g_chat[i] * s.u[i];
                dc_prev[i] = g_chat[i] * (R::ONE - s.u[i]);
                g_pu[i] = gu * s.u[i] * (R::ONE - s.u[i]);
                g_pz[i] = gz * (R::ONE - s.z[i] * s.z[i]);
                g.b_u[i] += g_pu[i];
                g.b_z[i] += g_pz[i];
            }

            let ry: Vec<R> = s.r.iter().zip(&s.y_prev).map(|(&ri, &yi)| ri * yi).collect();
            let az = concat(&s.x, &ry);
            R::outer_acc(&mut g.w_z, &g_pz, &az);
            let g_az = R::matvec_t(&self.w_z, &g_pz);

            let mut dy_prev = vec![R::ZERO; h];
            let mut g_pr = vec![R::ZERO; h];
            for i in 0..h {
                let g_ry = g_az[d + i];
                dy_prev[i] = g_ry * s.r[i];
                let gr = g_ry * s.y_prev[i];
                g_pr[i] = gr * s.r[i] * (R::ONE - s.r[i]);
                g.b_r[i] += g_pr[i];
            }

            let a = concat(&s.x, &s.y_prev);
            R::outer_acc(&mut g.w_r, &g_pr, &a);
            R::outer_acc(&mut g.w_u, &g_pu, &a);
            let g_a_r = R::matvec_t(&self.w_r, &g_pr);
            let g_a_u = R::matvec_t(&self.w_u, &g_pu);

            let mut dx = vec![R::ZERO; d];
            for j in 0..d {
                dx[j] = g_az[j] + g_a_r[j] + g_a_u[j];
            }
            for i in 0..h {
                dy_prev[i] += g_a_r[d + i] + g_a_u[d + i];
            }

            dx_seq[t] = dx;
            dy_carry = dy_prev;
            dc = dc_prev;
        }
        (g, dx_seq)
    }
}

/// Gradients, same shapes as the parameters.
#[derive(Clone, Debug)]
pub struct EgruGrads<R: Real = f32> {
    pub w_u: DenseMatrix<R>,
    pub w_r: DenseMatrix<R>,
    pub w_z: DenseMatrix<R>,
    pub b_u: Vec<R>,
    pub b_r: Vec<R>,
    pub b_z: Vec<R>,
    pub theta: Vec<R>,
}

impl<R: Real> EgruGrads<R> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> EgruGrads<R> {
        EgruGrads {
            w_u: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            w_r: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            w_z: DenseMatrix::zeros(hidden_dim, input_dim + hidden_dim),
            b_u: vec![R::ZERO; hidden_dim],
            b_r: vec![R::ZERO; hidden_dim],
            b_z: vec![R::ZERO; hidden_dim],
            theta: vec![R::ZERO; hidden_dim],
        }
    }
}
