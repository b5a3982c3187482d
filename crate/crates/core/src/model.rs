//! A task model: one recurrent cell, an optional per-token wrapper, and the
//! readout head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{
    act_rollout, init_halting_unit, plain_rollout, ponder_loss, repeat_rollout, ActConfig, ActRollout,
    RepeatConfig,
};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::cells::{readout, Cell, CellKind, Linear};
use crate::config::{ExperimentConfig, WrapperKind};
use crate::error::Result;
use crate::tasks::{Batch, Task};

const CELL: &str = "cell";
const HALT: &str = "halt";
const OUT: &str = "out";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Wrapper {
    /// One step per token on the raw input.
    None,
    Repeat(RepeatConfig),
    Act(ActConfig),
}

impl Wrapper {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.wrapper {
            WrapperKind::None => Wrapper::None,
            WrapperKind::Repeat => Wrapper::Repeat(RepeatConfig::new(cfg.rho.unwrap_or(1))?),
            WrapperKind::Act => Wrapper::Act(ActConfig::new(cfg.tau.unwrap_or(0.0), cfg.epsilon, cfg.max_steps)?),
        })
    }

    /// Extra input column for the first-presentation flag.
    fn flag_width(&self) -> usize {
        match self {
            Wrapper::None => 0,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub task: Task,
    pub cell: CellKind,
    pub wrapper: Wrapper,
    pub hidden: usize,
    pub params: ParamStore,
}

/// Result of one forward pass over a batch.
#[derive(Debug)]
pub struct Forward {
    /// Logits per timestep, `[batch, outputs]`.
    pub outputs: Vec<Var>,
    pub act: Option<ActRollout>,
    /// Intermediate steps taken per token (all tokens, all rows).
    pub steps: Vec<usize>,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(task: Task, cell: CellKind, wrapper: Wrapper, hidden: usize, rng: &mut R) -> Result<Self> {
        let mut params = ParamStore::new();
        let input = task.input_size() + wrapper.flag_width();
        Cell::init(cell, &mut params, CELL, input, hidden, rng)?;
        Linear::init(&mut params, OUT, hidden, task.output_size(), rng)?;
        if let Wrapper::Act(_) = wrapper {
            init_halting_unit(&mut params, HALT, hidden, rng)?;
        }
        Ok(Self {
            task,
            cell,
            wrapper,
            hidden,
            params,
        })
    }

    pub fn from_config<R: Rng + ?Sized>(cfg: &ExperimentConfig, rng: &mut R) -> Result<Self> {
        Self::new(cfg.build_task(), cfg.cell, Wrapper::from_config(cfg)?, cfg.hidden, rng)
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Forward> {
        self.forward_with(g, &self.params, batch)
    }

    /// Forward pass with an explicit parameter set (e.g. a perturbed copy).
    pub fn forward_with(&self, g: &mut Graph, params: &ParamStore, batch: &Batch) -> Result<Forward> {
        let seq = batch.inputs()?;
        let rows = batch.len();
        let cell = Cell::bind(self.cell, g, params, CELL)?;
        let head = Linear::bind(g, params, OUT)?;
        let s0 = cell.zero_state(g, rows);
        let (states, act, steps) = match self.wrapper {
            Wrapper::None => (plain_rollout(g, &cell, &seq, s0)?, None, vec![1; rows * seq.len()]),
            Wrapper::Repeat(r) => (
                repeat_rollout(g, &cell, &seq, r.rho, s0)?,
                None,
                vec![r.rho; rows * seq.len()],
            ),
            Wrapper::Act(cfg) => {
                let halt = Linear::bind(g, params, HALT)?;
                let out = act_rollout(g, &cell, &halt, &seq, &cfg, s0)?;
                let steps = out.records().map(|r| r.steps).collect();
                (out.states.clone(), Some(out), steps)
            }
        };
        let outputs = states.iter().map(|s| readout(g, &head, s)).collect::<Result<_>>()?;
        Ok(Forward { outputs, act, steps })
    }

    /// Task loss plus, for ACT, the time-penalized ponder cost.
    pub fn loss(&self, g: &mut Graph, fwd: &Forward, batch: &Batch) -> Result<Var> {
        let task = self.task.batch_loss(g, &fwd.outputs, batch)?;
        match (&self.wrapper, &fwd.act) {
            (Wrapper::Act(cfg), Some(rollout)) => {
                let ponder = ponder_loss(g, rollout, cfg.tau)?;
                g.add(task, ponder)
            }
            _ => Ok(task),
        }
    }
}
