//! Dual-labeled datasets: every example carries a desired-task label and a
//! harmful-task label over the same input.

mod jsonl;
mod synth;

pub use jsonl::{censor_pronouns, export_jsonl, fnv1a64, hash_text, load_jsonl, tokenize};
pub use synth::{gen_synthetic, SynthConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y_desired: usize,
    pub y_harmful: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Not yet partitioned.
    Full,
    Train,
    Val,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Desired,
    Harmful,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    examples: Vec<Example>,
    num_desired_classes: usize,
    num_harmful_classes: usize,
    split: Split,
}

impl TaskDataset {
    pub fn new(examples: Vec<Example>, num_desired_classes: usize, num_harmful_classes: usize, split: Split) -> Result<Self> {
        let Some(first) = examples.first() else {
            return Err(Error::Data("dataset is empty".into()));
        };
        let dim = first.x.len();
        if dim == 0 {
            return Err(Error::Data("examples have zero-length inputs".into()));
        }
        for (i, ex) in examples.iter().enumerate() {
            if ex.x.len() != dim {
                return Err(Error::DimensionMismatch { what: format!("example {i} input"), expected: dim, got: ex.x.len() });
            }
            if ex.y_desired >= num_desired_classes {
                return Err(Error::LabelOutOfRange { label: ex.y_desired, classes: num_desired_classes });
            }
            if ex.y_harmful >= num_harmful_classes {
                return Err(Error::LabelOutOfRange { label: ex.y_harmful, classes: num_harmful_classes });
            }
        }
        Ok(TaskDataset { examples, num_desired_classes, num_harmful_classes, split })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.examples[0].x.len()
    }

    pub fn num_desired_classes(&self) -> usize {
        self.num_desired_classes
    }

    pub fn num_harmful_classes(&self) -> usize {
        self.num_harmful_classes
    }

    pub fn num_classes(&self, task: Task) -> usize {
        match task {
            Task::Desired => self.num_desired_classes,
            Task::Harmful => self.num_harmful_classes,
        }
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Input rows at `idx` as a `(idx.len(), input_dim)` tensor.
    pub fn inputs<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let dim = self.input_dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend(self.examples[i].x.iter().map(|&v| T::lit(v)));
        }
        Tensor::from_parts(vec![idx.len(), dim], data)
    }

    pub fn all_inputs<T: Scalar>(&self) -> Tensor<T> {
        self.inputs(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels(&self, task: Task, idx: &[usize]) -> Vec<usize> {
        idx.iter()
            .map(|&i| match task {
                Task::Desired => self.examples[i].y_desired,
                Task::Harmful => self.examples[i].y_harmful,
            })
            .collect()
    }

    pub fn all_labels(&self, task: Task) -> Vec<usize> {
        self.labels(task, &(0..self.len()).collect::<Vec<_>>())
    }

    fn select(&self, idx: &[usize], split: Split) -> TaskDataset {
        TaskDataset {
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
            num_desired_classes: self.num_desired_classes,
            num_harmful_classes: self.num_harmful_classes,
            split,
        }
    }

    /// Uniform subset of `n` examples drawn without replacement.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<TaskDataset> {
        if n > self.len() {
            return Err(Error::Data(format!("cannot draw {n} examples from {}", self.len())));
        }
        if n == 0 {
            return Err(Error::Data("subsample size must be positive".into()));
        }
        let idx = rand::seq::index::sample(&mut seed::rng(seed), self.len(), n).into_vec();
        Ok(self.select(&idx, self.split))
    }

    /// Index partition into train/val/eval after a seeded shuffle.
    ///
    /// Fractions are for train and val; eval gets the remainder. Each part
    /// must be nonempty.
    pub fn split_into(&self, train_frac: f64, val_frac: f64, seed: u64) -> Result<Splits> {
        if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
            return Err(Error::Config(format!("invalid split fractions {train_frac}/{val_frac}")));
        }
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut seed::rng(seed));
        let a = (train_frac * n as f64).round() as usize;
        let b = a + (val_frac * n as f64).round() as usize;
        if a == 0 || b <= a || b >= n {
            return Err(Error::Data(format!("{n} examples are too few to split")));
        }
        Ok(Splits {
            train: self.select(&idx[..a], Split::Train),
            val: self.select(&idx[a..b], Split::Val),
            eval: self.select(&idx[b..], Split::Eval),
        })
    }

    /// One shuffled epoch of index batches; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seed::rng(seed));
        Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
    }

    /// Counts per class for `task`.
    pub fn class_counts(&self, task: Task) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes(task)];
        for y in self.all_labels(task) {
            counts[y] += 1;
        }
        counts
    }
}

/// The 70/15/15 partition used throughout.
pub const DEFAULT_SPLIT: (f64, f64) = (0.70, 0.15);

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TaskDataset,
    pub val: TaskDataset,
    pub eval: TaskDataset,
}

/// Endless batch stream that reshuffles at every epoch boundary.
#[derive(Debug)]
pub struct BatchSampler {
    len: usize,
    batch: usize,
    perm: Vec<usize>,
    pos: usize,
    rng: seed::Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(Error::Config(format!("cannot batch {len} examples in groups of {batch}")));
        }
        let batch = batch.min(len);
        Ok(BatchSampler { len, batch, perm: Vec::new(), pos: len, rng: seed::rng(seed) })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.len {
            self.perm = (0..self.len).collect();
            self.perm.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.perm[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> TaskDataset {
        let ex = (0..n).map(|i| Example { x: vec![i as f64, 1.0], y_desired: i % 3, y_harmful: i % 2 }).collect();
        TaskDataset::new(ex, 3, 2, Split::Full).unwrap()
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        assert!(TaskDataset::new(vec![], 2, 2, Split::Full).is_err());
        let ex = vec![Example { x: vec![0.0], y_desired: 2, y_harmful: 0 }];
        assert!(matches!(TaskDataset::new(ex, 2, 2, Split::Full), Err(Error::LabelOutOfRange { .. })));
        let ex = vec![Example { x: vec![0.0], y_desired: 0, y_harmful: 0 }, Example { x: vec![0.0, 1.0], y_desired: 0, y_harmful: 0 }];
        assert!(TaskDataset::new(ex, 2, 2, Split::Full).is_err());
    }

    #[test]
    fn full_subsample_is_a_permutation() {
        let ds = toy(20);
        let sub = ds.subsample(20, 3).unwrap();
        let mut xs: Vec<_> = sub.examples().iter().map(|e| e.x[0] as usize).collect();
        xs.sort();
        assert_eq!(xs, (0..20).collect::<Vec<_>>());
        assert!(ds.subsample(21, 0).is_err());
    }

    #[test]
    fn subsample_is_seed_deterministic() {
        let ds = toy(50);
        assert_eq!(ds.subsample(1, 9).unwrap(), ds.subsample(1, 9).unwrap());
    }

    #[test]
    fn splits_partition_the_indices() {
        let ds = toy(100);
        let s = ds.split_into(0.7, 0.15, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.eval.len()), (70, 15, 15));
        let mut all: Vec<_> = [&s.train, &s.val, &s.eval]
            .iter()
            .flat_map(|d| d.examples().iter().map(|e| e.x[0] as usize))
            .collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(s.val.split(), Split::Val);
    }

    #[test]
    fn batches_cover_partition_and_repeat() {
        let ds = toy(10);
        let b = ds.batches(4, 2).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<_> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(b, ds.batches(4, 2).unwrap());
        assert!(ds.batches(0, 2).is_err());
    }

    #[test]
    fn sampler_cycles_full_epochs() {
        let mut s = BatchSampler::new(6, 3, 0).unwrap();
        let mut epoch = [s.next_batch(), s.next_batch()].concat();
        epoch.sort();
        assert_eq!(epoch, (0..6).collect::<Vec<_>>());
        assert_eq!(s.next_batch().len(), 3);
    }

    #[test]
    fn inputs_gather_rows() {
        let ds = toy(5);
        let x = ds.inputs::<f64>(&[3, 1]);
        assert_eq!(x.shape(), &[2, 2]);
        assert_eq!(x.data(), &[3.0, 1.0, 1.0, 1.0]);
        assert_eq!(ds.labels(Task::Harmful, &[3, 1]), vec![1, 1]);
    }
}
