//! Linear and LSTM layers over the tape.

use alloc::format;
use alloc::vec::Vec;

use crate::graph::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// How a parameter array is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Uniform(f64),
    Zeros,
    /// LSTM bias: zeros except the forget-gate block, which is set to 1.
    ForgetBias,
}

/// Source of parameter arrays; building a model asks it for every named array
/// in a fixed order.
pub trait ParamSource {
    fn take(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize, init: Init) -> ParamId;
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(src: &mut dyn ParamSource, store: &mut ParamStore, name: &str, inp: usize, out: usize, bias: bool) -> Self {
        let scale = 1.0 / libm::sqrt(inp as f64);
        let w = src.take(store, &format!("{name}.w"), inp, out, Init::Uniform(scale));
        let b = bias.then(|| src.take(store, &format!("{name}.b"), 1, out, Init::Zeros));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    /// `(input + hidden) x 4 hidden`, gate blocks ordered input, forget, cell, output.
    w: ParamId,
    b: ParamId,
    input: usize,
    hidden: usize,
}

impl LstmLayer {
    pub fn new(src: &mut dyn ParamSource, store: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        let scale = 1.0 / libm::sqrt(hidden as f64);
        let w = src.take(store, &format!("{name}.w"), input + hidden, 4 * hidden, Init::Uniform(scale));
        let b = src.take(store, &format!("{name}.b"), 1, 4 * hidden, Init::ForgetBias);
        Self { w, b, input, hidden }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, s: LstmState) -> LstmState {
        let h = self.hidden;
        let xh = tape.concat_cols(&[x, s.h]);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let z = tape.matmul(xh, w);
        let z = tape.add_row(z, b);
        let i = tape.slice_cols(z, 0, h);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(z, h, 2 * h);
        let f = tape.sigmoid(f);
        let g = tape.slice_cols(z, 2 * h, 3 * h);
        let g = tape.tanh(g);
        let o = tape.slice_cols(z, 3 * h, 4 * h);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, s.c);
        let ig = tape.mul(i, g);
        let c = tape.add(fc, ig);
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc);
        LstmState { h, c }
    }
}

/// Stacked LSTM. Layer `n > 0` reads `input(n-1) + output(n-1)` when the two
/// widths agree (residual stacking), otherwise `output(n-1)`.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

impl Lstm {
    pub fn new(src: &mut dyn ParamSource, store: &mut ParamStore, name: &str, input: usize, hidden: usize, layers: usize) -> Self {
        let layers = (0..layers)
            .map(|n| LstmLayer::new(src, store, &format!("{name}.l{n}"), if n == 0 { input } else { hidden }, hidden))
            .collect();
        Self { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> Vec<LstmState> {
        let zeros = tape.constant(Matrix::zeros(batch, self.hidden()));
        self.layers.iter().map(|_| LstmState { h: zeros, c: zeros }).collect()
    }

    /// One time step through every layer; returns the new states (top layer last).
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, states: &[LstmState]) -> Vec<LstmState> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for (n, (layer, s)) in self.layers.iter().zip(states).enumerate() {
            let next = layer.step(tape, store, input, *s);
            input = if n + 1 < self.layers.len() && layer.input == layer.hidden {
                tape.add(input, next.h)
            } else {
                next.h
            };
            out.push(next);
        }
        out
    }
}
