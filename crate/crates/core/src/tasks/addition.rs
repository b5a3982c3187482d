use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Targets};
use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

/// Classes per output digit: ten digits plus the "number complete" marker.
pub const DIGIT_CLASSES: usize = 11;
pub const COMPLETE_MARKER: usize = 10;

/// Cumulative sum of a sequence of numbers given as one-hot digit blocks,
/// least-significant digit first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdditionTask {
    /// Sequence length.
    pub numbers: usize,
    /// Each number has between 1 and `max_digits` digits.
    pub max_digits: usize,
    /// Output digit positions of the rendered sum.
    pub heads: usize,
}

impl Default for AdditionTask {
    fn default() -> Self {
        Self::full()
    }
}

impl AdditionTask {
    /// Five numbers of up to five digits, six output digits.
    pub fn full() -> Self {
        Self {
            numbers: 5,
            max_digits: 5,
            heads: 6,
        }
    }

    /// Two numbers of up to two digits, three output digits.
    pub fn desk() -> Self {
        Self {
            numbers: 2,
            max_digits: 2,
            heads: 3,
        }
    }

    pub fn input_size(&self) -> usize {
        self.max_digits * 10
    }

    pub fn output_size(&self) -> usize {
        self.heads * DIGIT_CLASSES
    }

    pub fn validate(&self) -> Result<()> {
        if self.numbers == 0 || self.max_digits == 0 || self.heads == 0 {
            return Err(Error::Config("addition task sizes must be positive".into()));
        }
        // the largest possible cumulative sum must fit the heads
        let largest = (self.numbers as u128) * (10u128.pow(self.max_digits as u32) - 1);
        if digits_of(largest) > self.heads {
            return Err(Error::Config(format!(
                "{} heads cannot render sums up to {largest}",
                self.heads
            )));
        }
        Ok(())
    }

    /// One-hot blocks for the `digits` least-significant digits of `value`
    /// (leading zeros included), zero-padded to the task's input width.
    pub fn encode_number(&self, value: u64, digits: usize) -> Result<Tensor> {
        if digits == 0 || digits > self.max_digits {
            return Err(Error::Input(format!("digit count {digits} outside 1..={}", self.max_digits)));
        }
        if u128::from(value) >= 10u128.pow(digits as u32) {
            return Err(Error::Input(format!("{value} does not fit in {digits} digits")));
        }
        let mut x = vec![0.0; self.input_size()];
        let mut rest = value;
        for d in 0..digits {
            x[d * 10 + (rest % 10) as usize] = 1.0;
            rest /= 10;
        }
        Ok(Tensor::vector(x))
    }

    /// Inverse of [`encode_number`](Self::encode_number): reads blocks until
    /// the first all-zero one.
    pub fn decode_number(&self, x: &[f64]) -> Result<u64> {
        if x.len() != self.input_size() {
            return Err(Error::Input(format!("encoding of length {}", x.len())));
        }
        let mut value = 0u64;
        let mut scale = 1u64;
        let mut ended = false;
        for block in x.chunks_exact(10) {
            let hot: Vec<usize> = block.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, _)| i).collect();
            match (hot.as_slice(), ended) {
                ([], _) => ended = true,
                ([d], false) if block[*d] == 1.0 => {
                    value += *d as u64 * scale;
                    scale *= 10;
                }
                _ => return Err(Error::Input("malformed digit block".into())),
            }
        }
        if scale == 1 {
            return Err(Error::Input("encoding holds no digits".into()));
        }
        Ok(value)
    }

    pub fn generate<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let mut values = Vec::with_capacity(self.numbers);
        let mut inputs = Vec::with_capacity(self.numbers);
        for _ in 0..self.numbers {
            let digits = rng.gen_range(1..=self.max_digits);
            let mut value = 0u64;
            let mut scale = 1u64;
            for _ in 0..digits {
                value += rng.gen_range(0..10u64) * scale;
                scale *= 10;
            }
            inputs.push(self.encode_number(value, digits).expect("drawn within range"));
            values.push(value);
        }
        let targets = addition_oracle(&values, self.heads).expect("validated task sizes");
        let mut mask = vec![true; self.numbers];
        mask[0] = false;
        Sample {
            inputs,
            targets: Targets::Addition(targets),
            mask,
        }
    }
}

fn digits_of(mut v: u128) -> usize {
    let mut n = 1;
    while v >= 10 {
        v /= 10;
        n += 1;
    }
    n
}

/// Per-timestep targets: the running sum rendered least-significant digit
/// first over `heads` positions, with [`COMPLETE_MARKER`] past its last digit.
pub fn addition_oracle(values: &[u64], heads: usize) -> Result<Vec<Vec<usize>>> {
    let mut total = 0u128;
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        total += u128::from(v);
        if digits_of(total) > heads {
            return Err(Error::Input(format!("sum {total} needs more than {heads} digits")));
        }
        let mut classes = vec![COMPLETE_MARKER; heads];
        let mut rest = total;
        for slot in classes.iter_mut().take(digits_of(total)) {
            *slot = (rest % 10) as usize;
            rest /= 10;
        }
        out.push(classes);
    }
    Ok(out)
}

/// Loss and correctness of one sample's per-step logits (`heads × 11` each).
/// Masked-out steps contribute no loss and report `None`.
pub fn addition_metrics(logits: &[Vec<f64>], targets: &[Vec<usize>], mask: &[bool]) -> Result<(f64, Vec<Option<bool>>)> {
    if logits.len() != targets.len() || logits.len() != mask.len() {
        return Err(Error::dim("addition_metrics", "steps of logits, targets and mask differ"));
    }
    let mut loss = 0.0;
    let mut correct = Vec::with_capacity(mask.len());
    for ((z, t), &m) in logits.iter().zip(targets).zip(mask) {
        if !m {
            correct.push(None);
            continue;
        }
        if z.len() != t.len() * DIGIT_CLASSES {
            return Err(Error::dim("addition_metrics", format!("{} logits for {} heads", z.len(), t.len())));
        }
        let mut all = true;
        for (head, &class) in z.chunks_exact(DIGIT_CLASSES).zip(t) {
            loss += log_sum_exp(head) - head[class];
            all &= argmax(head) == class;
        }
        correct.push(Some(all));
    }
    Ok((loss, correct))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn encode_examples() {
        let task = AdditionTask::full();
        let x = task.encode_number(7, 1).unwrap();
        assert_eq!(x.len(), 50);
        assert_eq!(x.values()[7], 1.0);
        assert_eq!(x.values().iter().sum::<f64>(), 1.0);
        assert!(x.values()[10..].iter().all(|v| *v == 0.0));

        let x = task.encode_number(0, 1).unwrap();
        assert_eq!(x.values()[0], 1.0);

        let x = task.encode_number(90_210, 5).unwrap();
        assert_eq!(x.values().iter().filter(|v| **v == 1.0).count(), 5);
        // least-significant digit first
        assert_eq!(x.values()[0], 1.0);
        assert_eq!(x.values()[10 + 1], 1.0);
        assert_eq!(x.values()[40 + 9], 1.0);

        assert!(matches!(task.encode_number(100, 2), Err(Error::Input(_))));
        assert!(task.encode_number(1, 6).is_err());
    }

    #[test]
    fn encode_decode_round_trips_every_value() {
        let task = AdditionTask::full();
        for v in 0..100_000u64 {
            let digits = digits_of(u128::from(v));
            assert_eq!(task.decode_number(task.encode_number(v, digits).unwrap().values()).unwrap(), v);
        }
        // leading zeros survive as explicit digits
        assert_eq!(task.decode_number(task.encode_number(42, 4).unwrap().values()).unwrap(), 42);
    }

    #[test]
    fn oracle_examples() {
        let t = addition_oracle(&[5, 3, 9, 0, 2], 6).unwrap();
        assert_eq!(t[1], vec![8, 10, 10, 10, 10, 10]);
        assert_eq!(t[4], vec![9, 1, 10, 10, 10, 10]);
        let t = addition_oracle(&[99_999; 5], 6).unwrap();
        assert_eq!(t[1], vec![8, 9, 9, 9, 9, 1]);
        let t = addition_oracle(&[0], 6).unwrap();
        assert_eq!(t[0], vec![0, 10, 10, 10, 10, 10]);
        assert!(addition_oracle(&[999, 1], 3).is_err());
    }

    #[test]
    fn generated_samples_follow_the_format() {
        for task in [AdditionTask::full(), AdditionTask::desk()] {
            task.validate().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            for _ in 0..200 {
                let s = task.generate(&mut rng);
                assert_eq!(s.inputs.len(), task.numbers);
                assert!(s.inputs.iter().all(|x| x.len() == task.input_size()));
                assert!(!s.mask[0] && s.mask[1..].iter().all(|m| *m));
                let Targets::Addition(t) = &s.targets else { panic!() };
                let values: Vec<u64> = s.inputs.iter().map(|x| task.decode_number(x.values()).unwrap()).collect();
                assert_eq!(t, &addition_oracle(&values, task.heads).unwrap());
            }
        }
        assert!(AdditionTask { numbers: 5, max_digits: 5, heads: 5 }.validate().is_err());
    }

    #[test]
    fn metrics_cases() {
        let targets = vec![vec![3, 10], vec![4, 1]];
        let uniform = vec![vec![0.0; 22]; 2];
        let (loss, correct) = addition_metrics(&uniform, &targets, &[false, true]).unwrap();
        assert!((loss - 2.0 * 11f64.ln()).abs() < 1e-12);
        assert_eq!(correct[0], None);

        let mut confident = vec![vec![-50.0; 22]; 2];
        confident[1][4] = 50.0;
        confident[1][11 + 1] = 50.0;
        let (loss, correct) = addition_metrics(&confident, &targets, &[false, true]).unwrap();
        assert!(loss < 1e-6);
        assert_eq!(correct[1], Some(true));

        confident[1][11 + 2] = 60.0;
        let (_, correct) = addition_metrics(&confident, &targets, &[false, true]).unwrap();
        assert_eq!(correct[1], Some(false));
    }
}
