//! Neural layers shared by both models: embedding lookup, LSTM cell and
//! masked sequence runner, bidirectional wrapper, inverted dropout,
//! affine+softmax head, and masked cross-entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Uniform init in `[-r, r]` with `r = sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let r = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
    Tensor::new(&[rows, cols], data).expect("valid init shape")
}

/// Gate parameters of one LSTM direction.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
    pub w_c: Tensor,
    pub u_c: Tensor,
    pub b_c: Tensor,
}

impl LstmParams {
    /// Fresh parameters: input-to-gate and recurrent matrices uniform in
    /// `[-r, r]`, biases zero except the forget-gate bias at 1.0.
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut impl Rng) -> LstmParams {
        let w = |rng: &mut _| uniform_init(input_dim, hidden_dim, rng);
        let u = |rng: &mut _| uniform_init(hidden_dim, hidden_dim, rng);
        LstmParams {
            w_i: w(rng),
            u_i: u(rng),
            b_i: Tensor::zeros(&[hidden_dim]),
            w_f: w(rng),
            u_f: u(rng),
            b_f: Tensor::fill(&[hidden_dim], 1.0).expect("bias shape"),
            w_o: w(rng),
            u_o: u(rng),
            b_o: Tensor::zeros(&[hidden_dim]),
            w_c: w(rng),
            u_c: u(rng),
            b_c: Tensor::zeros(&[hidden_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_i.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_i.shape()[1]
    }

    /// Register every tensor on a tape, returning tracked aliases.
    pub fn watch(&self, tape: &mut Tape) -> LstmParams {
        LstmParams {
            w_i: tape.param(&self.w_i),
            u_i: tape.param(&self.u_i),
            b_i: tape.param(&self.b_i),
            w_f: tape.param(&self.w_f),
            u_f: tape.param(&self.u_f),
            b_f: tape.param(&self.b_f),
            w_o: tape.param(&self.w_o),
            u_o: tape.param(&self.u_o),
            b_o: tape.param(&self.b_o),
            w_c: tape.param(&self.w_c),
            u_c: tape.param(&self.u_c),
            b_c: tape.param(&self.b_c),
        }
    }

    /// Visit every tensor with a stable name, in a fixed order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (name, t) in self.named() {
            f(format!("{prefix}.{name}"), t);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.w_i"), &mut self.w_i);
        f(format!("{prefix}.u_i"), &mut self.u_i);
        f(format!("{prefix}.b_i"), &mut self.b_i);
        f(format!("{prefix}.w_f"), &mut self.w_f);
        f(format!("{prefix}.u_f"), &mut self.u_f);
        f(format!("{prefix}.b_f"), &mut self.b_f);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.u_o"), &mut self.u_o);
        f(format!("{prefix}.b_o"), &mut self.b_o);
        f(format!("{prefix}.w_c"), &mut self.w_c);
        f(format!("{prefix}.u_c"), &mut self.u_c);
        f(format!("{prefix}.b_c"), &mut self.b_c);
    }

    fn named(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("w_i", &self.w_i),
            ("u_i", &self.u_i),
            ("b_i", &self.b_i),
            ("w_f", &self.w_f),
            ("u_f", &self.u_f),
            ("b_f", &self.b_f),
            ("w_o", &self.w_o),
            ("u_o", &self.u_o),
            ("b_o", &self.b_o),
            ("w_c", &self.w_c),
            ("u_c", &self.u_c),
            ("b_c", &self.b_c),
        ]
    }
}

/// Hidden and cell state of an LSTM; both start at zero.
#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> LstmState {
        LstmState {
            h: Tensor::zeros(&[hidden_dim]),
            c: Tensor::zeros(&[hidden_dim]),
        }
    }
}

/// Per-time-step real/padding flags. Real steps must be contiguous and
/// precede all padding steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepMask(Vec<bool>);

impl StepMask {
    pub fn new(flags: Vec<bool>) -> Result<StepMask> {
        let mut seen_pad = false;
        for &f in &flags {
            if f && seen_pad {
                return Err(Error::Validation(
                    "step mask must be contiguous: real steps before padding".into(),
                ));
            }
            if !f {
                seen_pad = true;
            }
        }
        Ok(StepMask(flags))
    }

    /// Mask with `real` leading ones padded to `total`.
    pub fn with_prefix(real: usize, total: usize) -> StepMask {
        StepMask((0..total).map(|t| t < real).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_real(&self, t: usize) -> bool {
        self.0[t]
    }

    pub fn n_real(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }

    pub fn flags(&self) -> &[bool] {
        &self.0
    }
}

/// Row-gather of word embeddings: `ids` into a `[vocab, k]` table.
pub fn embedding_lookup(tape: &mut Tape, ids: &[usize], table: &Tensor) -> Result<Tensor> {
    tape.gather_rows(table, ids)
}

/// One LSTM step:
/// `i = σ(W_i x + U_i h + b_i)`, `f = σ(W_f x + U_f h + b_f)`,
/// `o = σ(W_o x + U_o h + b_o)`, `g = tanh(W_c x + U_c h + b_c)`,
/// `c_t = f ⊙ c + i ⊙ g`, `h_t = o ⊙ tanh(c_t)`.
pub fn lstm_step(
    tape: &mut Tape,
    x: &Tensor,
    state: &LstmState,
    p: &LstmParams,
) -> Result<LstmState> {
    let gate = |tape: &mut Tape, w: &Tensor, u: &Tensor, b: &Tensor| -> Result<Tensor> {
        let xa = tape.matmul(x, w)?;
        let ha = tape.matmul(&state.h, u)?;
        let s = tape.add(&xa, &ha)?;
        tape.add(&s, b)
    };
    let i_pre = gate(tape, &p.w_i, &p.u_i, &p.b_i)?;
    let f_pre = gate(tape, &p.w_f, &p.u_f, &p.b_f)?;
    let o_pre = gate(tape, &p.w_o, &p.u_o, &p.b_o)?;
    let g_pre = gate(tape, &p.w_c, &p.u_c, &p.b_c)?;
    let i = tape.sigmoid(&i_pre)?;
    let f = tape.sigmoid(&f_pre)?;
    let o = tape.sigmoid(&o_pre)?;
    let g = tape.tanh(&g_pre)?;
    let keep = tape.mul(&f, &state.c)?;
    let write = tape.mul(&i, &g)?;
    let c = tape.add(&keep, &write)?;
    let c_act = tape.tanh(&c)?;
    let h = tape.mul(&o, &c_act)?;
    Ok(LstmState { h, c })
}

/// Run an LSTM over `xs[len, input]`. Padding steps copy the state through
/// and emit a zero vector; `final` is the state after the last real step in
/// processing order. `reverse` iterates indices high-to-low.
pub fn lstm_sequence(
    tape: &mut Tape,
    xs: &Tensor,
    mask: &StepMask,
    p: &LstmParams,
    reverse: bool,
) -> Result<(Tensor, LstmState)> {
    if xs.rank() != 2 {
        return Err(Error::Shape(format!(
            "lstm_sequence expects [len, input], got {:?}",
            xs.shape()
        )));
    }
    let len = xs.shape()[0];
    if mask.len() != len {
        return Err(Error::Shape(format!(
            "mask length {} does not match sequence length {}",
            mask.len(),
            len
        )));
    }
    let hidden = p.hidden_dim();
    let mut state = LstmState::zeros(hidden);
    let mut rows: Vec<Tensor> = vec![Tensor::zeros(&[hidden]); len];
    let order: Vec<usize> = if reverse {
        (0..len).rev().collect()
    } else {
        (0..len).collect()
    };
    for t in order {
        if !mask.is_real(t) {
            continue;
        }
        let x_t = tape.select_row(xs, t)?;
        state = lstm_step(tape, &x_t, &state, p)?;
        rows[t] = state.h.clone();
    }
    let hs = tape.stack_rows(&rows)?;
    Ok((hs, state))
}

/// Forward and backward LSTM over the same sequence; per-step outputs are
/// `[h_fw_t ; h_bw_t]`.
pub fn bilstm(
    tape: &mut Tape,
    xs: &Tensor,
    mask: &StepMask,
    p_fw: &LstmParams,
    p_bw: &LstmParams,
) -> Result<(Tensor, (LstmState, LstmState))> {
    let (hs_fw, final_fw) = lstm_sequence(tape, xs, mask, p_fw, false)?;
    let (hs_bw, final_bw) = lstm_sequence(tape, xs, mask, p_bw, true)?;
    let hs = tape.concat(&hs_fw, &hs_bw, 1)?;
    Ok((hs, (final_fw, final_bw)))
}

/// Inverted dropout: at train time zero each element with probability
/// `rate` and scale survivors by `1/(1-rate)`; at inference the identity.
pub fn dropout(
    tape: &mut Tape,
    x: &Tensor,
    rate: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {}",
            rate
        )));
    }
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let boost = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { boost })
        .collect();
    let mask = Tensor::new(x.shape(), mask)?;
    tape.mul(x, &mask)
}

/// Affine projection followed by a stable softmax: `softmax(h·W + b)`.
pub fn affine_softmax(tape: &mut Tape, h: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let logits = tape.matmul(h, w)?;
    let logits = tape.add(&logits, b)?;
    tape.softmax(&logits)
}

/// Mean negative log-likelihood over real instances. Returns the loss and
/// the number of real instances; zero real instances give a zero loss and
/// are worth a warning at the call site.
pub fn masked_cross_entropy(
    tape: &mut Tape,
    probs: &Tensor,
    labels: &[usize],
    mask: &[bool],
) -> Result<(Tensor, usize)> {
    let n_real = mask.iter().filter(|&&m| m).count();
    if n_real == 0 {
        log::warn!("cross-entropy over zero real instances; loss fixed at 0");
    }
    let loss = tape.masked_nll(probs, labels, mask)?;
    Ok((loss, n_real))
}
