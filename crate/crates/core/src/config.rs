//! Experiment configuration and its resolution from profile defaults,
//! config-file values and command-line overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adaptive::{ActConfig, RepeatConfig, DEFAULT_EPSILON, DEFAULT_MAX_STEPS};
use crate::cells::CellKind;
use crate::error::{Error, Result};
use crate::tasks::{AdditionTask, ParityTask, Task, DEFAULT_BATCH};

pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_CLIP_NORM: f64 = 1.0;
pub const DEFAULT_EVAL_INTERVAL: u64 = 1000;
pub const DEFAULT_EVAL_BATCHES: usize = 20;
/// Evaluation accuracy at which a task counts as solved.
pub const SOLVED_THRESHOLD: f64 = 0.98;

macro_rules! string_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($variant),+ }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " {:?}; expected one of: ", $($text, " "),+),
                        other
                    ))),
                }
            }
        }
    };
}

string_enum!(TaskKind { Parity => "parity", Addition => "addition" });
string_enum!(WrapperKind { None => "none", Repeat => "repeat", Act => "act" });
string_enum!(
    /// `paper` uses the full task sizes; `desk` scales the addition task down.
    Profile { Paper => "paper", Desk => "desk" }
);
string_enum!(OptimizerKind { Sgd => "sgd", Adam => "adam" });

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub cell: CellKind,
    pub wrapper: WrapperKind,
    pub rho: Option<usize>,
    pub tau: Option<f64>,
    pub epsilon: f64,
    pub max_steps: usize,
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Training-step budget.
    pub budget: u64,
    pub eval_interval: u64,
    pub eval_batches: usize,
    /// Gradient-norm clipping on/off.
    pub clip: bool,
    pub clip_norm: f64,
    pub profile: Profile,
    pub optimizer: OptimizerKind,
    /// Parity counts −1 entries as ones too.
    pub parity_count_all: bool,
    /// Stop as soon as the solved threshold is reached.
    pub stop_on_solve: bool,
}

/// Partial configuration: every field optional. Used for config files and
/// command-line flags alike.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub task: Option<TaskKind>,
    pub cell: Option<CellKind>,
    pub wrapper: Option<WrapperKind>,
    pub rho: Option<usize>,
    pub tau: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_steps: Option<usize>,
    pub hidden: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub seed: Option<u64>,
    pub budget: Option<u64>,
    pub eval_interval: Option<u64>,
    pub eval_batches: Option<usize>,
    pub clip: Option<bool>,
    pub clip_norm: Option<f64>,
    pub profile: Option<Profile>,
    pub optimizer: Option<OptimizerKind>,
    pub parity_count_all: Option<bool>,
    pub stop_on_solve: Option<bool>,
}

impl ConfigOverrides {
    /// Fields set in `other` win.
    pub fn merge(self, other: ConfigOverrides) -> ConfigOverrides {
        macro_rules! pick {
            ($($f:ident),+) => { ConfigOverrides { $($f: other.$f.or(self.$f)),+ } };
        }
        pick!(
            task, cell, wrapper, rho, tau, epsilon, max_steps, hidden, lr, batch, seed, budget,
            eval_interval, eval_batches, clip, clip_norm, profile, optimizer, parity_count_all,
            stop_on_solve
        )
    }

    /// Fills unset fields from the profile defaults and validates.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let task = self.task.unwrap_or(TaskKind::Parity);
        let profile = self.profile.unwrap_or(Profile::Desk);
        let default_cell = match task {
            TaskKind::Parity => CellKind::Rnn,
            TaskKind::Addition => CellKind::Lstm,
        };
        let default_hidden = match (task, profile) {
            (TaskKind::Parity, _) => 128,
            (TaskKind::Addition, Profile::Paper) => 512,
            (TaskKind::Addition, Profile::Desk) => 128,
        };
        let default_budget = match (task, profile) {
            (TaskKind::Parity, _) => 200_000,
            (TaskKind::Addition, Profile::Paper) => 1_200_000,
            (TaskKind::Addition, Profile::Desk) => 100_000,
        };
        let cfg = ExperimentConfig {
            task,
            cell: self.cell.unwrap_or(default_cell),
            wrapper: self.wrapper.unwrap_or(WrapperKind::None),
            rho: self.rho,
            tau: self.tau,
            epsilon: self.epsilon.unwrap_or(DEFAULT_EPSILON),
            max_steps: self.max_steps.unwrap_or(DEFAULT_MAX_STEPS),
            hidden: self.hidden.unwrap_or(default_hidden),
            lr: self.lr.unwrap_or(DEFAULT_LR),
            batch: self.batch.unwrap_or(DEFAULT_BATCH),
            seed: self.seed.unwrap_or(1),
            budget: self.budget.unwrap_or(default_budget),
            eval_interval: self.eval_interval.unwrap_or(DEFAULT_EVAL_INTERVAL),
            eval_batches: self.eval_batches.unwrap_or(DEFAULT_EVAL_BATCHES),
            clip: self.clip.unwrap_or(true),
            clip_norm: self.clip_norm.unwrap_or(DEFAULT_CLIP_NORM),
            profile,
            optimizer: self.optimizer.unwrap_or(OptimizerKind::Sgd),
            parity_count_all: self.parity_count_all.unwrap_or(false),
            stop_on_solve: self.stop_on_solve.unwrap_or(true),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self.wrapper {
            WrapperKind::Repeat if self.rho.is_none() => return bad("wrapper=repeat requires rho".into()),
            WrapperKind::Act if self.tau.is_none() => return bad("wrapper=act requires tau".into()),
            _ => {}
        }
        if let Some(rho) = self.rho {
            RepeatConfig::new(rho)?;
        }
        if self.wrapper == WrapperKind::Act {
            ActConfig::new(self.tau.unwrap_or(0.0), self.epsilon, self.max_steps)?;
        }
        if self.hidden == 0 || self.batch == 0 {
            return bad("hidden and batch must be positive".into());
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.eval_interval == 0 || self.eval_batches == 0 {
            return bad("eval_interval and eval_batches must be positive".into());
        }
        if self.clip && (self.clip_norm.is_nan() || self.clip_norm <= 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        self.build_task().validate_sizes()
    }

    pub fn build_task(&self) -> Task {
        match (self.task, self.profile) {
            (TaskKind::Parity, _) => Task::Parity(ParityTask {
                count_all_nonzero: self.parity_count_all,
                ..ParityTask::default()
            }),
            (TaskKind::Addition, Profile::Paper) => Task::Addition(AdditionTask::full()),
            (TaskKind::Addition, Profile::Desk) => Task::Addition(AdditionTask::desk()),
        }
    }

    /// Hyperparameter label used in file names and summaries.
    pub fn hyperparameter(&self) -> String {
        match self.wrapper {
            WrapperKind::None => String::new(),
            WrapperKind::Repeat => format!("rho={}", self.rho.unwrap_or(1)),
            WrapperKind::Act => format!("tau={}", self.tau.unwrap_or(0.0)),
        }
    }

    /// Directory-friendly run name, e.g. `parity-rnn-repeat-rho2-seed1`.
    pub fn run_name(&self) -> String {
        let hp = match self.wrapper {
            WrapperKind::None => String::new(),
            WrapperKind::Repeat => format!("-rho{}", self.rho.unwrap_or(1)),
            WrapperKind::Act => format!("-tau{}", self.tau.unwrap_or(0.0)),
        };
        let clip = if self.clip { "" } else { "-noclip" };
        format!("{}-{}-{}{hp}{clip}-seed{}", self.task, self.cell, self.wrapper, self.seed)
    }
}

impl Task {
    fn validate_sizes(&self) -> Result<()> {
        match self {
            Task::Parity(p) if p.size == 0 => Err(Error::Config("parity size must be positive".into())),
            Task::Parity(_) => Ok(()),
            Task::Addition(a) => a.validate(),
        }
    }
}
