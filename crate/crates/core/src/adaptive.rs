//! Per-token computation allocation: fixed repetition and adaptive halting.
//!
//! Both wrappers feed the cell a flag-augmented copy of the token, `(δ, x)`,
//! where `δ` is 1 on the first presentation of a token and 0 on repeats.
//! The Repeat wrapper runs the cell a fixed `rho` times per token and emits
//! the last intermediate state. The ACT wrapper asks a sigmoid halting unit
//! after every intermediate step whether to stop, emits the weighted average
//! of the intermediate states, and charges a ponder cost `N + R` per token.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::cells::{Cell, CellState, Linear};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_MAX_STEPS: usize = 50;
/// Initial bias of the halting unit.
pub const HALTING_BIAS_INIT: f64 = 1.0;

/// Tolerance for `Σp = 1` on a halting record.
const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatConfig {
    pub rho: usize,
}

impl RepeatConfig {
    pub fn new(rho: usize) -> Result<Self> {
        if rho == 0 {
            return Err(Error::Config("rho must be at least 1".into()));
        }
        Ok(Self { rho })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActConfig {
    /// Time penalty on the ponder cost.
    pub tau: f64,
    pub epsilon: f64,
    pub max_steps: usize,
}

impl ActConfig {
    pub fn new(tau: f64, epsilon: f64, max_steps: usize) -> Result<Self> {
        if !tau.is_finite() || tau < 0.0 {
            return Err(Error::Config(format!("tau must be finite and >= 0, got {tau}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        if max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        Ok(Self {
            tau,
            epsilon,
            max_steps,
        })
    }

    pub fn with_tau(tau: f64) -> Result<Self> {
        Self::new(tau, DEFAULT_EPSILON, DEFAULT_MAX_STEPS)
    }
}

/// Halting trace of one token of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HaltingRecord {
    /// Intermediate steps taken, `N`.
    pub steps: usize,
    /// Halting values `h₁..h_N`.
    pub halting: Vec<f64>,
    /// State weights `p₁..p_N`: `pₙ = hₙ` for `n < N`, `p_N = R`.
    pub weights: Vec<f64>,
    pub remainder: f64,
    /// `N + R`.
    pub ponder: f64,
}

impl HaltingRecord {
    /// Verifies the bookkeeping identities of a finished record.
    pub fn check(&self, max_steps: usize) -> Result<()> {
        let fail = |what: String| Err(Error::Usage(format!("halting record: {what}")));
        if self.steps == 0 || self.steps > max_steps {
            return fail(format!("N = {} outside 1..={max_steps}", self.steps));
        }
        if self.halting.len() != self.steps || self.weights.len() != self.steps {
            return fail("trace lengths differ from N".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return fail(format!("weights sum to {total}"));
        }
        if self.weights[self.steps - 1] != self.remainder {
            return fail("last weight differs from the remainder".into());
        }
        if self.weights[..self.steps - 1] != self.halting[..self.steps - 1] {
            return fail("leading weights differ from halting values".into());
        }
        if !(0.0..=1.0).contains(&self.remainder) {
            return fail(format!("remainder {} outside [0, 1]", self.remainder));
        }
        if self.ponder != self.steps as f64 + self.remainder {
            return fail("ponder differs from N + R".into());
        }
        Ok(())
    }
}

/// Online form of the halting rule: feed halting values one at a time until
/// it reports a finished record.
#[derive(Clone, Debug)]
pub struct HaltingSchedule {
    epsilon: f64,
    max_steps: usize,
    cumulative: f64,
    /// `cumulative` before the latest push, i.e. `Σ_{n<N} hₙ`.
    before_last: f64,
    halting: Vec<f64>,
    done: Option<HaltingRecord>,
}

/// What the schedule decided for the value just pushed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Weight is the halting value itself; keep stepping.
    Continue,
    /// Weight is the remainder; this was the last step.
    Halt,
    /// The schedule had already halted; the value is ignored.
    Finished,
}

impl HaltingSchedule {
    pub fn new(epsilon: f64, max_steps: usize) -> Self {
        Self {
            epsilon,
            max_steps,
            cumulative: 0.0,
            before_last: 0.0,
            halting: Vec::new(),
            done: None,
        }
    }

    pub fn push(&mut self, h: f64) -> Decision {
        if self.done.is_some() {
            return Decision::Finished;
        }
        self.halting.push(h);
        self.before_last = self.cumulative;
        let n = self.halting.len();
        if self.cumulative + h >= 1.0 - self.epsilon || n >= self.max_steps {
            self.finish();
            Decision::Halt
        } else {
            self.cumulative += h;
            Decision::Continue
        }
    }

    /// Halts at the current step. Used by [`act_schedule`] when the supplied
    /// values run out before the rule fires.
    fn finish(&mut self) {
        let steps = self.halting.len();
        let remainder = 1.0 - self.before_last;
        let mut weights = self.halting[..steps - 1].to_vec();
        weights.push(remainder);
        self.done = Some(HaltingRecord {
            steps,
            halting: std::mem::take(&mut self.halting),
            weights,
            remainder,
            ponder: steps as f64 + remainder,
        });
    }

    pub fn is_done(&self) -> bool {
        self.done.is_some()
    }

    /// Sum of the halting values of the steps taken before the current one.
    pub fn cumulative(&self) -> f64 {
        self.cumulative
    }

    pub fn record(&self) -> Option<&HaltingRecord> {
        self.done.as_ref()
    }

    pub fn into_record(self) -> Option<HaltingRecord> {
        self.done
    }
}

/// Applies the halting rule to a finite list of halting values:
/// `N` is the first step whose running sum reaches `1 − epsilon`, capped at
/// `max_steps`; `R = 1 − Σ_{n<N} hₙ`. If the list ends before either
/// condition, its last value is treated as the final step.
pub fn act_schedule(h: &[f64], epsilon: f64, max_steps: usize) -> Result<HaltingRecord> {
    if h.is_empty() {
        return Err(Error::Usage("act_schedule needs at least one halting value".into()));
    }
    let mut sched = HaltingSchedule::new(epsilon, max_steps);
    for &v in h {
        if sched.push(v) != Decision::Continue {
            break;
        }
    }
    if !sched.is_done() {
        sched.finish();
    }
    Ok(sched.into_record().expect("finished above"))
}

/// Prepends the first-presentation flag `δ₁,ₙ` to `x` (to every row when
/// `x` is a batch).
pub fn augment_input(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::Usage("presentation index starts at 1".into()));
    }
    let flag = if n == 1 { 1.0 } else { 0.0 };
    let (rows, cols) = x.dims2();
    let mut out = Vec::with_capacity(rows * (cols + 1));
    for r in 0..rows {
        out.push(flag);
        out.extend_from_slice(x.row(r));
    }
    let shape = if x.shape().len() == 1 { vec![cols + 1] } else { vec![rows, cols + 1] };
    Tensor::new(shape, out)
}

/// The input sequence as the Repeat wrapper sees it: each token `rho` times,
/// flagged on its first copy.
pub fn repeat_expand(seq: &[Tensor], rho: usize) -> Result<Vec<Tensor>> {
    RepeatConfig::new(rho)?;
    let mut out = Vec::with_capacity(seq.len() * rho);
    for x in seq {
        for n in 1..=rho {
            out.push(augment_input(x, n)?);
        }
    }
    Ok(out)
}

/// A recurrent state update, `s' = S(s, x)`.
pub trait Transition {
    fn step(&self, g: &mut Graph, s: &CellState, x: Var) -> Result<CellState>;
}

impl Transition for Cell {
    fn step(&self, g: &mut Graph, s: &CellState, x: Var) -> Result<CellState> {
        Cell::step(self, g, s, x)
    }
}

/// One cell step per token on the raw (unflagged) inputs.
pub fn plain_rollout<T: Transition>(g: &mut Graph, cell: &T, seq: &[Tensor], s0: CellState) -> Result<Vec<CellState>> {
    let mut s = s0;
    let mut out = Vec::with_capacity(seq.len());
    for x in seq {
        let x = g.constant(x.clone());
        s = cell.step(g, &s, x)?;
        out.push(s);
    }
    Ok(out)
}

/// Runs the cell `rho` times per token on flag-augmented inputs and emits
/// the last intermediate state of each token.
pub fn repeat_rollout<T: Transition>(
    g: &mut Graph,
    cell: &T,
    seq: &[Tensor],
    rho: usize,
    s0: CellState,
) -> Result<Vec<CellState>> {
    RepeatConfig::new(rho)?;
    let mut s = s0;
    let mut out = Vec::with_capacity(seq.len());
    for x in seq {
        let first = g.constant(augment_input(x, 1)?);
        let again = if rho > 1 { Some(g.constant(augment_input(x, 2)?)) } else { None };
        for n in 1..=rho {
            let xn = if n == 1 { first } else { again.expect("rho > 1") };
            s = cell.step(g, &s, xn)?;
        }
        out.push(s);
    }
    Ok(out)
}

/// Halting traces for one token across the batch.
#[derive(Clone, Debug)]
pub struct ActToken {
    /// One record per batch row.
    pub records: Vec<HaltingRecord>,
    /// Remainders `R` per row, as a differentiable `[rows, 1]` node.
    pub remainder: Var,
}

#[derive(Clone, Debug)]
pub struct ActRollout {
    /// Emitted (weighted-average) state per token.
    pub states: Vec<CellState>,
    pub tokens: Vec<ActToken>,
}

impl ActRollout {
    pub fn records(&self) -> impl Iterator<Item = &HaltingRecord> {
        self.tokens.iter().flat_map(|t| t.records.iter())
    }
}

/// Initializes a single-output halting unit reading the hidden vector.
pub fn init_halting_unit<R: rand::Rng + ?Sized>(
    store: &mut crate::autodiff::ParamStore,
    prefix: &str,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    Linear::init(store, prefix, hidden, 1, rng)?;
    store.get_mut(&format!("{prefix}.b"))?.values_mut().fill(HALTING_BIAS_INIT);
    Ok(())
}

/// Adaptive rollout. Per token, steps the cell on flag-augmented input and
/// evaluates `h = sigmoid(halt(s))` after each step until the halting rule
/// fires for every row. The emitted state is `Σ pₙ sₙ` (hidden and, for the
/// LSTM, cell memory alike) and seeds the next token.
pub fn act_rollout<T: Transition>(
    g: &mut Graph,
    cell: &T,
    halt: &Linear,
    seq: &[Tensor],
    cfg: &ActConfig,
    s0: CellState,
) -> Result<ActRollout> {
    if halt.outputs != 1 {
        return Err(Error::dim("act_rollout", format!("halting unit has {} outputs", halt.outputs)));
    }
    let mut s = s0;
    let mut states = Vec::with_capacity(seq.len());
    let mut tokens = Vec::with_capacity(seq.len());
    for x in seq {
        let (rows, _) = x.dims2();
        let first = g.constant(augment_input(x, 1)?);
        let again = g.constant(augment_input(x, 2)?);
        let mut schedules = vec![HaltingSchedule::new(cfg.epsilon, cfg.max_steps); rows];
        let mut inter: Vec<CellState> = Vec::new();
        let mut weights: Vec<Var> = Vec::new();
        let mut remainder_terms: Vec<Var> = Vec::new();
        // Σ of halting values before the current step, [rows, 1]; None at n = 1.
        let mut cumulative: Option<Var> = None;
        let mut step_state = s;
        for n in 1..=cfg.max_steps {
            let xn = if n == 1 { first } else { again };
            step_state = cell.step(g, &step_state, xn)?;
            let logit = g.affine(step_state.h, halt.w, Some(halt.b))?;
            let h = g.sigmoid(logit);
            let mut go = vec![0.0; rows];
            let mut stop = vec![0.0; rows];
            for (r, sched) in schedules.iter_mut().enumerate() {
                match sched.push(g.values(h)[r]) {
                    Decision::Continue => go[r] = 1.0,
                    Decision::Halt => stop[r] = 1.0,
                    Decision::Finished => {}
                }
            }
            let go = g.constant(Tensor::new(vec![rows, 1], go)?);
            let stop = g.constant(Tensor::new(vec![rows, 1], stop)?);
            let left = match cumulative {
                Some(c) => g.scale_shift(c, -1.0, 1.0),
                None => g.constant(Tensor::full(&[rows, 1], 1.0)),
            };
            let kept = g.mul(go, h)?;
            let rem = g.mul(stop, left)?;
            let p = g.add(kept, rem)?;
            inter.push(step_state);
            weights.push(p);
            remainder_terms.push(rem);
            if schedules.iter().all(HaltingSchedule::is_done) {
                break;
            }
            cumulative = Some(match cumulative {
                Some(c) => g.add(c, h)?,
                None => h,
            });
        }
        let hs: Vec<Var> = inter.iter().map(|st| st.h).collect();
        let h_out = g.weighted_sum(&hs, &weights)?;
        let c_out = match inter[0].c {
            Some(_) => {
                let cs: Vec<Var> = inter.iter().map(|st| st.c.expect("uniform cell kind")).collect();
                Some(g.weighted_sum(&cs, &weights)?)
            }
            None => None,
        };
        let remainder = match remainder_terms.as_slice() {
            [only] => *only,
            terms => {
                let mut acc = terms[0];
                for &t in &terms[1..] {
                    acc = g.add(acc, t)?;
                }
                acc
            }
        };
        s = CellState { h: h_out, c: c_out };
        states.push(s);
        tokens.push(ActToken {
            records: schedules
                .into_iter()
                .map(|sc| sc.into_record().expect("every row halts by max_steps"))
                .collect(),
            remainder,
        });
    }
    Ok(ActRollout { states, tokens })
}

/// `tau · mean over rows of Σ_t (N + R)`. Only the remainders carry gradient.
pub fn ponder_loss(g: &mut Graph, rollout: &ActRollout, tau: f64) -> Result<Var> {
    let rows = rollout
        .tokens
        .first()
        .map(|t| t.records.len())
        .ok_or_else(|| Error::Usage("ponder_loss of an empty rollout".into()))?;
    let steps: usize = rollout.records().map(|r| r.steps).sum();
    let mut total: Option<Var> = None;
    for t in &rollout.tokens {
        let s = g.sum(t.remainder);
        total = Some(match total {
            Some(acc) => g.add(acc, s)?,
            None => s,
        });
    }
    let scale = tau / rows as f64;
    Ok(g.scale_shift(total.expect("non-empty"), scale, scale * steps as f64))
}

/// Mean number of intermediate steps per token.
pub fn mean_repetitions<I: IntoIterator<Item = usize>>(steps: I) -> Result<f64> {
    let (count, total) = steps
        .into_iter()
        .fold((0u64, 0u64), |(c, t), n| (c + 1, t + n as u64));
    if count == 0 {
        return Err(Error::Usage("mean_repetitions of an empty set".into()));
    }
    Ok(total as f64 / count as f64)
}
