//! Synthetic benchmarks: parity of a single vector and cumulative addition.

mod addition;
mod parity;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use addition::{addition_metrics, addition_oracle, AdditionTask, COMPLETE_MARKER, DIGIT_CLASSES};
pub use parity::{parity_metrics, parity_oracle, ParityTask, PARITY_SIZE};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Targets {
    Parity(u8),
    /// Class index per head, per timestep.
    Addition(Vec<Vec<usize>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub targets: Targets,
    /// Whether each timestep has a target.
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub samples: Vec<Sample>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.samples.first().map_or(0, |s| s.inputs.len())
    }

    /// Inputs as one `[batch, width]` matrix per timestep.
    pub fn inputs(&self) -> Result<Vec<Tensor>> {
        let t = self.seq_len();
        if self.samples.iter().any(|s| s.inputs.len() != t) {
            return Err(Error::dim("batch", "sequence lengths differ within a batch"));
        }
        (0..t)
            .map(|step| {
                let rows: Vec<&Tensor> = self.samples.iter().map(|s| &s.inputs[step]).collect();
                Tensor::stack_rows(&rows)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Task {
    Parity(ParityTask),
    Addition(AdditionTask),
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Parity(_) => "parity",
            Task::Addition(_) => "addition",
        }
    }

    pub fn input_size(&self) -> usize {
        match self {
            Task::Parity(p) => p.size,
            Task::Addition(a) => a.input_size(),
        }
    }

    /// Width of the readout: one logit for parity, `heads × 11` for addition.
    pub fn output_size(&self) -> usize {
        match self {
            Task::Parity(_) => 1,
            Task::Addition(a) => a.output_size(),
        }
    }

    pub fn seq_len(&self) -> usize {
        match self {
            Task::Parity(_) => 1,
            Task::Addition(a) => a.numbers,
        }
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        match self {
            Task::Parity(p) => p.generate(rng),
            Task::Addition(a) => a.generate(rng),
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Batch {
        Batch {
            samples: (0..size).map(|_| self.generate(rng)).collect(),
        }
    }

    /// Task loss over a batch given per-timestep logits, averaged over
    /// samples. Addition sums the six (or `heads`) cross-entropies over
    /// every timestep that has a target.
    pub fn batch_loss(&self, g: &mut Graph, outputs: &[Var], batch: &Batch) -> Result<Var> {
        let rows = batch.len();
        if rows == 0 {
            return Err(Error::Usage("loss of an empty batch".into()));
        }
        if outputs.len() != batch.seq_len() {
            return Err(Error::dim("batch_loss", format!("{} outputs for {} steps", outputs.len(), batch.seq_len())));
        }
        let inv = 1.0 / rows as f64;
        match self {
            Task::Parity(_) => {
                let targets: Vec<f64> = batch
                    .samples
                    .iter()
                    .map(|s| match s.targets {
                        Targets::Parity(t) => Ok(f64::from(t)),
                        _ => Err(Error::Input("expected parity targets".into())),
                    })
                    .collect::<Result<_>>()?;
                g.bce_with_logits(outputs[0], &targets, &vec![inv; rows])
            }
            Task::Addition(a) => {
                let mut total: Option<Var> = None;
                for (step, &out) in outputs.iter().enumerate() {
                    let mut classes = Vec::with_capacity(rows * a.heads);
                    let mut weights = Vec::with_capacity(rows);
                    for s in &batch.samples {
                        let Targets::Addition(t) = &s.targets else {
                            return Err(Error::Input("expected addition targets".into()));
                        };
                        classes.extend_from_slice(&t[step]);
                        weights.push(if s.mask[step] { inv } else { 0.0 });
                    }
                    if weights.iter().all(|w| *w == 0.0) {
                        continue;
                    }
                    let l = g.softmax_xent(out, a.heads, &classes, &weights)?;
                    total = Some(match total {
                        Some(acc) => g.add(acc, l)?,
                        None => l,
                    });
                }
                total.ok_or_else(|| Error::Usage("batch has no masked-in steps".into()))
            }
        }
    }

    /// `(correct, counted)` accuracy units in a batch: samples for parity,
    /// masked-in timesteps with every head right for addition.
    pub fn batch_correct(&self, g: &Graph, outputs: &[Var], batch: &Batch) -> Result<(usize, usize)> {
        let mut correct = 0;
        let mut counted = 0;
        for (r, s) in batch.samples.iter().enumerate() {
            match (&s.targets, self) {
                (Targets::Parity(t), Task::Parity(_)) => {
                    let z = g.value(outputs[0]).row(r)[0];
                    counted += 1;
                    correct += usize::from(parity_metrics(z, *t).1);
                }
                (Targets::Addition(t), Task::Addition(_)) => {
                    let logits: Vec<Vec<f64>> = outputs.iter().map(|&o| g.value(o).row(r).to_vec()).collect();
                    let (_, steps) = addition_metrics(&logits, t, &s.mask)?;
                    for ok in steps.into_iter().flatten() {
                        counted += 1;
                        correct += usize::from(ok);
                    }
                }
                _ => return Err(Error::Input("targets do not match the task".into())),
            }
        }
        Ok((correct, counted))
    }
}

/// One line of a sample fixture file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDump {
    pub task: String,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Targets,
    pub mask: Vec<bool>,
    pub seed: u64,
}

/// Writes `count` samples as JSON lines; sample `i` is drawn from a fresh
/// generator seeded with `seed + i`.
pub fn dump_samples<W: Write>(task: &Task, seed: u64, count: usize, mut out: W) -> Result<()> {
    for i in 0..count as u64 {
        let s = seed.wrapping_add(i);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let sample = task.generate(&mut rng);
        let line = SampleDump {
            task: task.name().to_string(),
            inputs: sample.inputs.iter().map(|x| x.values().to_vec()).collect(),
            targets: sample.targets,
            mask: sample.mask,
            seed: s,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<sample dump>", e))?;
    }
    Ok(())
}
