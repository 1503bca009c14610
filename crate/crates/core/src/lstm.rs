//! LSTM sentence encoder with full-matrix peephole connections.
//!
//! Row-vector convention: for a batch `X_t` (B x K),
//!
//! ```text
//! I_t = σ(X_t W_xi + M_{t-1} W_hi + C_{t-1} W_ci + b_i)
//! F_t = σ(X_t W_xf + M_{t-1} W_hf + C_{t-1} W_cf + b_f)
//! C_t = F_t • C_{t-1} + I_t • tanh(X_t W_xc + M_{t-1} W_hc + b_c)
//! O_t = σ(X_t W_xo + M_{t-1} W_ho + C_t W_co + b_o)
//! M_t = O_t • tanh(C_t)
//! ```
//!
//! The output-gate peephole reads the current cell `C_t`.

use crate::error::{Error, Result};
use crate::ingest::{Vocabulary, INIT_SCALE};
use crate::numcore::{
    sigmoid, sigmoid_grad_from_output, tanh_grad_from_output, Matrix, Parameters, SeededRng,
};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_xi: Matrix,
    pub w_hi: Matrix,
    pub w_ci: Matrix,
    pub b_i: Matrix,
    pub w_xf: Matrix,
    pub w_hf: Matrix,
    pub w_cf: Matrix,
    pub b_f: Matrix,
    pub w_xc: Matrix,
    pub w_hc: Matrix,
    pub b_c: Matrix,
    pub w_xo: Matrix,
    pub w_ho: Matrix,
    pub w_co: Matrix,
    pub b_o: Matrix,
}

impl Parameters for LstmParams {
    fn for_each_param(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("W_xi", &self.w_xi);
        f("W_hi", &self.w_hi);
        f("W_ci", &self.w_ci);
        f("b_i", &self.b_i);
        f("W_xf", &self.w_xf);
        f("W_hf", &self.w_hf);
        f("W_cf", &self.w_cf);
        f("b_f", &self.b_f);
        f("W_xc", &self.w_xc);
        f("W_hc", &self.w_hc);
        f("b_c", &self.b_c);
        f("W_xo", &self.w_xo);
        f("W_ho", &self.w_ho);
        f("W_co", &self.w_co);
        f("b_o", &self.b_o);
    }

    fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("W_xi", &mut self.w_xi);
        f("W_hi", &mut self.w_hi);
        f("W_ci", &mut self.w_ci);
        f("b_i", &mut self.b_i);
        f("W_xf", &mut self.w_xf);
        f("W_hf", &mut self.w_hf);
        f("W_cf", &mut self.w_cf);
        f("b_f", &mut self.b_f);
        f("W_xc", &mut self.w_xc);
        f("W_hc", &mut self.w_hc);
        f("b_c", &mut self.b_c);
        f("W_xo", &mut self.w_xo);
        f("W_ho", &mut self.w_ho);
        f("W_co", &mut self.w_co);
        f("b_o", &mut self.b_o);
    }
}

impl LstmParams {
    pub fn zeros(k: usize) -> Self {
        let m = || Matrix::zeros(k, k);
        let b = || Matrix::zeros(k, 1);
        LstmParams {
            w_xi: m(),
            w_hi: m(),
            w_ci: m(),
            b_i: b(),
            w_xf: m(),
            w_hf: m(),
            w_cf: m(),
            b_f: b(),
            w_xc: m(),
            w_hc: m(),
            b_c: b(),
            w_xo: m(),
            w_ho: m(),
            w_co: m(),
            b_o: b(),
        }
    }

    /// Every weight and bias drawn from `uniform[-scale, scale)`.
    pub fn uniform(k: usize, scale: f64, rng: &mut SeededRng) -> Self {
        let mut p = LstmParams::zeros(k);
        p.for_each_param_mut(&mut |_, m| *m = Matrix::uniform(m.rows(), m.cols(), -scale, scale, rng));
        p
    }

    /// Default initialisation, `uniform[-0.08, 0.08)`.
    pub fn init(k: usize, rng: &mut SeededRng) -> Self {
        LstmParams::uniform(k, INIT_SCALE, rng)
    }

    pub fn dim(&self) -> usize {
        self.w_xi.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dim();
        let mut err = None;
        self.for_each_param(&mut |name, m| {
            if err.is_some() {
                return;
            }
            let cols = if name.starts_with('b') { 1 } else { k };
            if let Err(e) = m.ensure_shape(name, k, cols) {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

/// Cell and hidden state for a batch (one row per sequence).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Matrix,
    pub m: Matrix,
}

impl LstmState {
    pub fn zeros(batch: usize, k: usize) -> Self {
        LstmState {
            c: Matrix::zeros(batch, k),
            m: Matrix::zeros(batch, k),
        }
    }
}

/// Gate activations of one batched step.
#[derive(Debug, Clone)]
pub struct Gates {
    pub input: Matrix,
    pub forget: Matrix,
    pub output: Matrix,
}

fn add_bias_rows(m: &mut Matrix, b: &Matrix) {
    for r in 0..m.rows() {
        for (v, bb) in m.row_mut(r).iter_mut().zip(b.as_slice()) {
            *v += bb;
        }
    }
}

fn affine(terms: &[(&Matrix, &Matrix)], bias: &Matrix) -> Result<Matrix> {
    let mut acc = terms[0].0.matmul(terms[0].1)?;
    for (x, w) in &terms[1..] {
        acc.axpy(1.0, &x.matmul(w)?);
    }
    add_bias_rows(&mut acc, bias);
    Ok(acc)
}

fn map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let mut out = m.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = f(*v));
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (o, y) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *o *= y;
    }
    out
}

/// One batched recurrence step.
pub fn lstm_step(x: &Matrix, prev: &LstmState, params: &LstmParams) -> Result<LstmState> {
    lstm_step_with_gates(x, prev, params).map(|(s, _)| s)
}

pub fn lstm_step_with_gates(
    x: &Matrix,
    prev: &LstmState,
    params: &LstmParams,
) -> Result<(LstmState, Gates)> {
    params.validate()?;
    let k = params.dim();
    let b = x.rows();
    x.ensure_shape("X_t", b, k)?;
    prev.c.ensure_shape("C_{t-1}", b, k)?;
    prev.m.ensure_shape("M_{t-1}", b, k)?;
    let p = params;
    let input = map(
        &affine(&[(x, &p.w_xi), (&prev.m, &p.w_hi), (&prev.c, &p.w_ci)], &p.b_i)?,
        sigmoid,
    );
    let forget = map(
        &affine(&[(x, &p.w_xf), (&prev.m, &p.w_hf), (&prev.c, &p.w_cf)], &p.b_f)?,
        sigmoid,
    );
    let cand = map(&affine(&[(x, &p.w_xc), (&prev.m, &p.w_hc)], &p.b_c)?, f64::tanh);
    let mut c = hadamard(&forget, &prev.c);
    c.axpy(1.0, &hadamard(&input, &cand));
    let output = map(
        &affine(&[(x, &p.w_xo), (&prev.m, &p.w_ho), (&c, &p.w_co)], &p.b_o)?,
        sigmoid,
    );
    let m = hadamard(&output, &map(&c, f64::tanh));
    Ok((
        LstmState { c, m },
        Gates {
            input,
            forget,
            output,
        },
    ))
}

/// Encodes a batch of variable-length sentences with right padding and a
/// mask. Padded steps carry the state forward, so row `b` of the result is
/// the hidden state at the last real token of sentence `b`.
pub fn encode_batch(sentences: &[Vec<usize>], vocab: &Vocabulary, params: &LstmParams) -> Result<Matrix> {
    if sentences.is_empty() {
        return Err(Error::Empty("sentence batch"));
    }
    let k = params.dim();
    if vocab.dim() != k {
        return Err(Error::shape("word embedding dimension", k, vocab.dim()));
    }
    for s in sentences {
        if s.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        for &t in s {
            vocab.check_id(t)?;
        }
    }
    let batch = sentences.len();
    let steps = sentences.iter().map(Vec::len).max().unwrap_or(0);
    let mut state = LstmState::zeros(batch, k);
    for t in 0..steps {
        let mut x = Matrix::zeros(batch, k);
        for (b, s) in sentences.iter().enumerate() {
            if let Some(&tok) = s.get(t) {
                x.row_mut(b).copy_from_slice(vocab.embedding(tok));
            }
        }
        let next = lstm_step(&x, &state, params)?;
        for (b, s) in sentences.iter().enumerate() {
            if t < s.len() {
                state.c.row_mut(b).copy_from_slice(next.c.row(b));
                state.m.row_mut(b).copy_from_slice(next.m.row(b));
            }
        }
    }
    Ok(state.m)
}

/// Sentence representation: the hidden state after the last token, starting
/// from a zero state.
pub fn encode_sentence(tokens: &[usize], vocab: &Vocabulary, params: &LstmParams) -> Result<Vec<f64>> {
    Ok(forward(tokens, vocab.table(), params)?.output().to_vec())
}

/// Cached activations of one step, used by backpropagation through time.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    m_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
    m: Vec<f64>,
}

/// Forward pass over one sentence with everything needed for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    tokens: Vec<usize>,
    steps: Vec<StepCache>,
}

impl LstmTrace {
    pub fn output(&self) -> &[f64] {
        &self.steps.last().expect("non-empty trace").m
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

fn gate(
    x: &[f64],
    m_prev: &[f64],
    c: &[f64],
    wx: &Matrix,
    wh: &Matrix,
    wc: Option<&Matrix>,
    b: &Matrix,
) -> Vec<f64> {
    let mut a = b.as_slice().to_vec();
    wx.tmatvec_acc(x, &mut a);
    wh.tmatvec_acc(m_prev, &mut a);
    if let Some(wc) = wc {
        wc.tmatvec_acc(c, &mut a);
    }
    a
}

fn step_vec(x: &[f64], m_prev: &[f64], c_prev: &[f64], p: &LstmParams) -> StepCache {
    let i: Vec<f64> = gate(x, m_prev, c_prev, &p.w_xi, &p.w_hi, Some(&p.w_ci), &p.b_i)
        .into_iter()
        .map(sigmoid)
        .collect();
    let f: Vec<f64> = gate(x, m_prev, c_prev, &p.w_xf, &p.w_hf, Some(&p.w_cf), &p.b_f)
        .into_iter()
        .map(sigmoid)
        .collect();
    let g: Vec<f64> = gate(x, m_prev, c_prev, &p.w_xc, &p.w_hc, None, &p.b_c)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let c: Vec<f64> = (0..g.len()).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
    let o: Vec<f64> = gate(x, m_prev, &c, &p.w_xo, &p.w_ho, Some(&p.w_co), &p.b_o)
        .into_iter()
        .map(sigmoid)
        .collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let m: Vec<f64> = o.iter().zip(&tanh_c).map(|(a, b)| a * b).collect();
    StepCache {
        x: x.to_vec(),
        m_prev: m_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        g,
        c,
        o,
        tanh_c,
        m,
    }
}

/// Runs the recurrence over `tokens`, reading inputs from rows of `table`.
pub fn forward(tokens: &[usize], table: &Matrix, params: &LstmParams) -> Result<LstmTrace> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    params.validate()?;
    let k = params.dim();
    if table.cols() != k {
        return Err(Error::shape("word embedding dimension", k, table.cols()));
    }
    let mut steps = Vec::with_capacity(tokens.len());
    let mut m = vec![0.0; k];
    let mut c = vec![0.0; k];
    for &tok in tokens {
        if tok >= table.rows() {
            return Err(Error::OutOfRange {
                what: "vocabulary",
                index: tok,
                size: table.rows(),
            });
        }
        let s = step_vec(table.row(tok), &m, &c, params);
        m.clone_from(&s.m);
        c.clone_from(&s.c);
        steps.push(s);
    }
    Ok(LstmTrace {
        tokens: tokens.to_vec(),
        steps,
    })
}

/// Backpropagation through time from `d_out = dL/dM_N`. Parameter gradients
/// are accumulated into `grads`; the returned vectors are `dL/dX_t` for each
/// step.
pub fn backward(
    trace: &LstmTrace,
    d_out: &[f64],
    params: &LstmParams,
    grads: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let k = params.dim();
    let p = params;
    let mut dm = d_out.to_vec();
    let mut dc_next = vec![0.0; k];
    let mut dxs = vec![Vec::new(); trace.steps.len()];
    for (t, s) in trace.steps.iter().enumerate().rev() {
        let mut da_o = vec![0.0; k];
        let mut dc = dc_next.clone();
        for j in 0..k {
            da_o[j] = dm[j] * s.tanh_c[j] * sigmoid_grad_from_output(s.o[j]);
            dc[j] += dm[j] * s.o[j] * tanh_grad_from_output(s.tanh_c[j]);
        }
        // output peephole reads C_t
        p.w_co.matvec_acc(&da_o, &mut dc);

        let mut da_i = vec![0.0; k];
        let mut da_f = vec![0.0; k];
        let mut da_g = vec![0.0; k];
        for j in 0..k {
            da_i[j] = dc[j] * s.g[j] * sigmoid_grad_from_output(s.i[j]);
            da_f[j] = dc[j] * s.c_prev[j] * sigmoid_grad_from_output(s.f[j]);
            da_g[j] = dc[j] * s.i[j] * tanh_grad_from_output(s.g[j]);
        }

        grads.w_xi.add_outer(1.0, &s.x, &da_i);
        grads.w_hi.add_outer(1.0, &s.m_prev, &da_i);
        grads.w_ci.add_outer(1.0, &s.c_prev, &da_i);
        grads.w_xf.add_outer(1.0, &s.x, &da_f);
        grads.w_hf.add_outer(1.0, &s.m_prev, &da_f);
        grads.w_cf.add_outer(1.0, &s.c_prev, &da_f);
        grads.w_xc.add_outer(1.0, &s.x, &da_g);
        grads.w_hc.add_outer(1.0, &s.m_prev, &da_g);
        grads.w_xo.add_outer(1.0, &s.x, &da_o);
        grads.w_ho.add_outer(1.0, &s.m_prev, &da_o);
        grads.w_co.add_outer(1.0, &s.c, &da_o);
        for (bias, d) in [
            (&mut grads.b_i, &da_i),
            (&mut grads.b_f, &da_f),
            (&mut grads.b_c, &da_g),
            (&mut grads.b_o, &da_o),
        ] {
            for (b, v) in bias.as_mut_slice().iter_mut().zip(d.iter()) {
                *b += v;
            }
        }

        let mut dx = vec![0.0; k];
        let mut dm_prev = vec![0.0; k];
        let mut dc_prev: Vec<f64> = (0..k).map(|j| dc[j] * s.f[j]).collect();
        for (wx, wh, d) in [
            (&p.w_xi, &p.w_hi, &da_i),
            (&p.w_xf, &p.w_hf, &da_f),
            (&p.w_xc, &p.w_hc, &da_g),
            (&p.w_xo, &p.w_ho, &da_o),
        ] {
            wx.matvec_acc(d, &mut dx);
            wh.matvec_acc(d, &mut dm_prev);
        }
        p.w_ci.matvec_acc(&da_i, &mut dc_prev);
        p.w_cf.matvec_acc(&da_f, &mut dc_prev);

        dxs[t] = dx;
        dm = dm_prev;
        dc_next = dc_prev;
    }
    dxs
}
