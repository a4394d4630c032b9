use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

/// `y = x W^T + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(&format!("{name}.w"), outputs, inputs, inputs, rng);
        let b = store.add_uniform(&format!("{name}.b"), 1, outputs, inputs, rng);
        Dense { w, b, inputs, outputs }
    }

    pub fn forward(&self, tape: &mut Tape, store: usize, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Stack of dense layers with a shared hidden activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, hidden, output }
    }

    pub fn forward(&self, tape: &mut Tape, store: usize, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            h = if i == last { self.output.apply(tape, h) } else { self.hidden.apply(tape, h) };
        }
        Ok(h)
    }
}

/// Long short-term memory cell with gate order (input, forget, candidate,
/// output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

/// Parameter handles of an [`Lstm`] bound to one tape.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    w_ih: Var,
    w_hh: Var,
    b: Var,
}

impl Lstm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add_uniform(&format!("{name}.w_ih"), 4 * hidden, inputs, hidden, rng);
        let w_hh = store.add_uniform(&format!("{name}.w_hh"), 4 * hidden, hidden, hidden, rng);
        let b = store.add_uniform(&format!("{name}.b"), 1, 4 * hidden, hidden, rng);
        // Forget-gate bias starts at one so early training keeps memory.
        for v in &mut store.value_mut(b).data[hidden..2 * hidden] {
            *v += 1.0;
        }
        Lstm { w_ih, w_hh, b, inputs, hidden }
    }

    pub fn bind(&self, tape: &mut Tape, store: usize) -> LstmVars {
        LstmVars { w_ih: tape.param(store, self.w_ih), w_hh: tape.param(store, self.w_hh), b: tape.param(store, self.b) }
    }

    pub fn zero_state(&self, tape: &mut Tape, batch: usize) -> (Var, Var) {
        let h = tape.constant(Tensor::zeros(batch, self.hidden));
        let c = tape.constant(Tensor::zeros(batch, self.hidden));
        (h, c)
    }

    /// One recurrent step; returns the new `(hidden, cell)`.
    pub fn step(&self, tape: &mut Tape, vars: LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let from_x = tape.linear(x, vars.w_ih, Some(vars.b))?;
        let from_h = tape.linear(h, vars.w_hh, None)?;
        let gates = tape.add(from_x, from_h)?;
        let i = tape.slice_cols(gates, 0, n)?;
        let f = tape.slice_cols(gates, n, n)?;
        let g = tape.slice_cols(gates, 2 * n, n)?;
        let o = tape.slice_cols(gates, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let g = tape.tanh(g);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        let c_next = tape.add(keep, write)?;
        let squashed = tape.tanh(c_next);
        let h_next = tape.mul(o, squashed)?;
        Ok((h_next, c_next))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::rng_for;

    #[test]
    fn zero_lstm_keeps_hidden_zero() {
        let mut store = ParamStore::new("t");
        let mut rng = rng_for(0, 0);
        let lstm = Lstm::new(&mut store, "lstm", 3, 8, &mut rng);
        for p in &mut store.params {
            p.value.fill(0.0);
        }
        let mut tape = Tape::new(&[&store]);
        let vars = lstm.bind(&mut tape, 0);
        let (mut h, mut c) = lstm.zero_state(&mut tape, 1);
        for _ in 0..3 {
            let x = tape.constant(Tensor::row_vector(vec![0.3, -1.0, 2.0]));
            (h, c) = lstm.step(&mut tape, vars, x, h, c).unwrap();
            assert!(tape.value(h).data.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn lstm_first_step_is_deterministic() {
        let mut store = ParamStore::new("t");
        let mut rng = rng_for(4, 0);
        let lstm = Lstm::new(&mut store, "lstm", 2, 5, &mut rng);
        let run = || {
            let mut tape = Tape::new(&[&store]);
            let vars = lstm.bind(&mut tape, 0);
            let (h, c) = lstm.zero_state(&mut tape, 1);
            let x = tape.constant(Tensor::row_vector(vec![0.5, -0.25]));
            let (h, _) = lstm.step(&mut tape, vars, x, h, c).unwrap();
            tape.value(h).clone()
        };
        assert_eq!(run(), run());
    }
}
