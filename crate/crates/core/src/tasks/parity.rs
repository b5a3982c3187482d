use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Targets};
use crate::autodiff::{bce_logit, sigmoid, Tensor};
use crate::error::{Error, Result};

pub const PARITY_SIZE: usize = 64;

/// Parity of a single vector with between 1 and `size` entries set to ±1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParityTask {
    pub size: usize,
    /// Count every nonzero entry instead of only the `+1` entries.
    #[serde(default)]
    pub count_all_nonzero: bool,
}

impl Default for ParityTask {
    fn default() -> Self {
        Self {
            size: PARITY_SIZE,
            count_all_nonzero: false,
        }
    }
}

impl ParityTask {
    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let k = rng.gen_range(1..=self.size);
        let mut x = vec![0.0; self.size];
        for i in sample(rng, self.size, k) {
            x[i] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        }
        let target = parity_oracle(&x, self.count_all_nonzero).expect("generated entries are in {-1, 0, 1}");
        Sample {
            inputs: vec![Tensor::vector(x)],
            targets: Targets::Parity(target),
            mask: vec![true],
        }
    }
}

/// 1 when the vector holds an odd number of ones, else 0.
///
/// By default only `+1` entries count; `count_all_nonzero` counts `−1`
/// entries as well.
pub fn parity_oracle(x: &[f64], count_all_nonzero: bool) -> Result<u8> {
    let mut ones = 0usize;
    for &v in x {
        if v == 1.0 || (count_all_nonzero && v == -1.0) {
            ones += 1;
        } else if v != 0.0 && v != -1.0 {
            return Err(Error::Input(format!("parity entry {v} outside {{-1, 0, 1}}")));
        }
    }
    Ok((ones % 2) as u8)
}

/// Binary cross-entropy of `sigmoid(logit)` and whether the thresholded
/// prediction matches.
pub fn parity_metrics(logit: f64, target: u8) -> (f64, bool) {
    let loss = bce_logit(logit, f64::from(target));
    let predicted = u8::from(sigmoid(logit) >= 0.5);
    (loss, predicted == target)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn oracle_examples() {
        let mut x = vec![0.0; 64];
        x[3] = 1.0;
        x[10] = 1.0;
        x[63] = 1.0;
        assert_eq!(parity_oracle(&x, false).unwrap(), 1);
        assert_eq!(parity_oracle(&[-1.0; 64], false).unwrap(), 0);
        assert_eq!(parity_oracle(&[1.0, 1.0, -1.0, 0.0], false).unwrap(), 0);
        assert_eq!(parity_oracle(&[1.0, 1.0, -1.0, 0.0], true).unwrap(), 1);
        assert!(matches!(parity_oracle(&[0.5], false), Err(Error::Input(_))));
    }

    #[test]
    fn generated_samples_follow_the_format() {
        let task = ParityTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 65];
        let mut odd = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let s = task.generate(&mut rng);
            assert_eq!(s.inputs.len(), 1);
            assert_eq!(s.mask, vec![true]);
            let x = s.inputs[0].values();
            assert_eq!(x.len(), 64);
            let nonzero = x.iter().filter(|v| **v != 0.0).count();
            assert!((1..=64).contains(&nonzero));
            assert!(x.iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
            seen[nonzero] = true;
            let Targets::Parity(t) = s.targets else { panic!("parity target") };
            assert!(t <= 1);
            odd += t as usize;
        }
        let mean = odd as f64 / n as f64;
        assert!((0.4..=0.6).contains(&mean), "target mean {mean}");
        assert!(seen[1..].iter().all(|s| *s), "nonzero counts must cover 1..=64");
    }

    #[test]
    fn metrics_cases() {
        let (loss, _) = parity_metrics(0.0, 1);
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        let (loss, ok) = parity_metrics(40.0, 1);
        assert!(loss < 1e-6 && ok);
        let (loss, ok) = parity_metrics(-40.0, 0);
        assert!(loss < 1e-6 && ok);
        let logit = (0.7f64 / 0.3).ln();
        assert!(parity_metrics(logit, 1).1);
        assert!(!parity_metrics(logit, 0).1);
    }
}
