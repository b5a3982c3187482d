//! Recurrent state-transition cells and the linear readout head.
//!
//! Parameters live in a [`ParamStore`] under a name prefix; the `*Params`
//! structs here hold the graph handles for one forward pass and are created
//! with `bind`. Every operand is batched by rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Initial bias of the LSTM forget gate.
pub const FORGET_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell {other:?} (rnn|lstm)"))),
        }
    }
}

/// Hidden state; `c` is the LSTM cell memory and absent for the vanilla RNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellState {
    pub h: Var,
    pub c: Option<Var>,
}

fn uniform_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

fn expect_shape(g: &Graph, v: Var, shape: &[usize], name: &str) -> Result<()> {
    let got = g.value(v).shape();
    if got != shape {
        return Err(Error::dim("bind", format!("{name}: expected {shape:?}, got {got:?}")));
    }
    Ok(())
}

fn check_input(g: &Graph, x: Var, width: usize, op: &'static str) -> Result<()> {
    let (_, cols) = g.value(x).dims2();
    if cols != width {
        return Err(Error::dim(op, format!("input width {cols}, cell expects {width}")));
    }
    Ok(())
}

/// `h' = tanh(W_in·x + W_rec·h + b)`.
#[derive(Clone, Copy, Debug)]
pub struct RnnParams {
    pub w_in: Var,
    pub w_rec: Var,
    pub b: Var,
    pub input: usize,
    pub hidden: usize,
}

impl RnnParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = input + hidden;
        store.insert(format!("{prefix}.w_in"), uniform_init(&[hidden, input], fan_in, rng))?;
        store.insert(format!("{prefix}.w_rec"), uniform_init(&[hidden, hidden], fan_in, rng))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[hidden]))?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_in = g.param(store, &format!("{prefix}.w_in"))?;
        let (hidden, input) = g.value(w_in).dims2();
        let w_rec = g.param(store, &format!("{prefix}.w_rec"))?;
        let b = g.param(store, &format!("{prefix}.b"))?;
        expect_shape(g, w_rec, &[hidden, hidden], "w_rec")?;
        expect_shape(g, b, &[hidden], "b")?;
        Ok(Self {
            w_in,
            w_rec,
            b,
            input,
            hidden,
        })
    }
}

pub fn rnn_step(g: &mut Graph, p: &RnnParams, s: &CellState, x: Var) -> Result<CellState> {
    check_input(g, x, p.input, "rnn_step")?;
    let from_input = g.affine(x, p.w_in, Some(p.b))?;
    let from_state = g.affine(s.h, p.w_rec, None)?;
    let pre = g.add(from_input, from_state)?;
    Ok(CellState { h: g.tanh(pre), c: None })
}

#[derive(Clone, Copy, Debug)]
pub struct Gate {
    pub w: Var,
    pub b: Var,
}

/// Input, forget and output gates plus the candidate, each an affine map
/// of `[x; h]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
    pub input: usize,
    pub hidden: usize,
}

const LSTM_GATES: [&str; 4] = ["i", "f", "o", "g"];

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = input + hidden;
        for gate in LSTM_GATES {
            store.insert(format!("{prefix}.w_{gate}"), uniform_init(&[hidden, fan_in], fan_in, rng))?;
            let bias = if gate == "f" { FORGET_BIAS_INIT } else { 0.0 };
            store.insert(format!("{prefix}.b_{gate}"), Tensor::full(&[hidden], bias))?;
        }
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut gates = Vec::with_capacity(4);
        for gate in LSTM_GATES {
            let w = g.param(store, &format!("{prefix}.w_{gate}"))?;
            let b = g.param(store, &format!("{prefix}.b_{gate}"))?;
            gates.push(Gate { w, b });
        }
        let (hidden, fan_in) = g.value(gates[0].w).dims2();
        if fan_in <= hidden {
            return Err(Error::dim("bind", format!("lstm weight {hidden}x{fan_in} leaves no input")));
        }
        for (gate, name) in gates.iter().zip(LSTM_GATES) {
            expect_shape(g, gate.w, &[hidden, fan_in], name)?;
            expect_shape(g, gate.b, &[hidden], name)?;
        }
        Ok(Self {
            input_gate: gates[0],
            forget_gate: gates[1],
            output_gate: gates[2],
            candidate: gates[3],
            input: fan_in - hidden,
            hidden,
        })
    }
}

pub fn lstm_step(g: &mut Graph, p: &LstmParams, s: &CellState, x: Var) -> Result<CellState> {
    check_input(g, x, p.input, "lstm_step")?;
    let c = s
        .c
        .ok_or_else(|| Error::Usage("lstm_step needs a cell-memory vector".into()))?;
    let xh = g.concat_cols(x, s.h)?;
    let pre_i = g.affine(xh, p.input_gate.w, Some(p.input_gate.b))?;
    let pre_f = g.affine(xh, p.forget_gate.w, Some(p.forget_gate.b))?;
    let pre_o = g.affine(xh, p.output_gate.w, Some(p.output_gate.b))?;
    let pre_g = g.affine(xh, p.candidate.w, Some(p.candidate.b))?;
    let i = g.sigmoid(pre_i);
    let f = g.sigmoid(pre_f);
    let o = g.sigmoid(pre_o);
    let cand = g.tanh(pre_g);
    let kept = g.mul(f, c)?;
    let written = g.mul(i, cand)?;
    let c_next = g.add(kept, written)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok(CellState {
        h: h_next,
        c: Some(c_next),
    })
}

/// A bound cell of either kind.
#[derive(Clone, Copy, Debug)]
pub enum Cell {
    Rnn(RnnParams),
    Lstm(LstmParams),
}

impl Cell {
    pub fn init<R: Rng + ?Sized>(
        kind: CellKind,
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<()> {
        match kind {
            CellKind::Rnn => RnnParams::init(store, prefix, input, hidden, rng),
            CellKind::Lstm => LstmParams::init(store, prefix, input, hidden, rng),
        }
    }

    pub fn bind(kind: CellKind, g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(match kind {
            CellKind::Rnn => Cell::Rnn(RnnParams::bind(g, store, prefix)?),
            CellKind::Lstm => Cell::Lstm(LstmParams::bind(g, store, prefix)?),
        })
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Rnn(_) => CellKind::Rnn,
            Cell::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Rnn(p) => p.hidden,
            Cell::Lstm(p) => p.hidden,
        }
    }

    pub fn input(&self) -> usize {
        match self {
            Cell::Rnn(p) => p.input,
            Cell::Lstm(p) => p.input,
        }
    }

    pub fn step(&self, g: &mut Graph, s: &CellState, x: Var) -> Result<CellState> {
        match self {
            Cell::Rnn(p) => rnn_step(g, p, s, x),
            Cell::Lstm(p) => lstm_step(g, p, s, x),
        }
    }

    /// All-zero state for `rows` samples.
    pub fn zero_state(&self, g: &mut Graph, rows: usize) -> CellState {
        let h = g.constant(Tensor::zeros(&[rows, self.hidden()]));
        let c = match self {
            Cell::Rnn(_) => None,
            Cell::Lstm(_) => Some(g.constant(Tensor::zeros(&[rows, self.hidden()]))),
        };
        CellState { h, c }
    }
}

/// Affine head applied to the hidden vector.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
    pub outputs: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<()> {
        store.insert(format!("{prefix}.w"), uniform_init(&[outputs, input], input, rng))?;
        store.insert(format!("{prefix}.b"), Tensor::zeros(&[outputs]))?;
        Ok(())
    }

    pub fn bind(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = g.param(store, &format!("{prefix}.w"))?;
        let b = g.param(store, &format!("{prefix}.b"))?;
        let (outputs, _) = g.value(w).dims2();
        expect_shape(g, b, &[outputs], "b")?;
        Ok(Self { w, b, outputs })
    }
}

/// Logits of the task head from the hidden vector of `s`.
pub fn readout(g: &mut Graph, head: &Linear, s: &CellState) -> Result<Var> {
    g.affine(s.h, head.w, Some(head.b))
}
