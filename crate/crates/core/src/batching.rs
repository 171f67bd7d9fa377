//! Labelled datasets and class-partitioned batch construction.
//!
//! Two samplers are provided. The original one draws `b` seed samples and
//! expands each into a same-class sub-batch of size `n`. The `K + 1` loader
//! draws one sub-batch per class plus a class-agnostic "standard" sub-batch
//! that cycles through the dataset without replacement.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::LengthMismatch {
                left: inputs.rows(),
                right: labels.len(),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `1 + max label`.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn with_inputs(&self, inputs: Matrix) -> Result<Dataset> {
        Dataset::new(inputs, self.labels.clone())
    }
}

/// Per-class index lists, one per observed label, ordered by label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPartition {
    labels: Vec<usize>,
    indices: Vec<Vec<usize>>,
    total: usize,
}

impl ClassPartition {
    /// Number of classes `K`.
    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    /// Label of the `k`-th class.
    pub fn label(&self, k: usize) -> usize {
        self.labels[k]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class(&self, k: usize) -> &[usize] {
        &self.indices[k]
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.indices
    }

    /// Size of the partitioned dataset.
    pub fn total(&self) -> usize {
        self.total
    }

    fn class_of_label(&self, label: usize) -> usize {
        self.labels.binary_search(&label).expect("label present")
    }
}

pub fn partition_by_class(labels: &[usize]) -> Result<ClassPartition> {
    let max = *labels.iter().max().ok_or(Error::EmptyDataset)?;
    let mut by_label = vec![Vec::new(); max + 1];
    for (i, &l) in labels.iter().enumerate() {
        by_label[l].push(i);
    }
    let (labels_out, indices) = by_label
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .unzip();
    Ok(ClassPartition {
        labels: labels_out,
        indices,
        total: labels.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Samples of the `k`-th class of the partition.
    Class(usize),
    Standard,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBatch {
    pub role: Role,
    pub indices: Vec<usize>,
}

/// `K` class-pure sub-batches followed by one standard sub-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TopoBatch {
    sub_batches: Vec<SubBatch>,
    n: usize,
}

impl TopoBatch {
    pub fn sub_batches(&self) -> &[SubBatch] {
        &self.sub_batches
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.sub_batches.iter().map(|s| s.indices.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn standard(&self) -> &[usize] {
        &self.sub_batches.last().expect("standard sub-batch").indices
    }

    pub fn gather(&self, dataset: &Dataset) -> TrainBatch {
        let mut order = Vec::with_capacity(self.len());
        let mut class_rows = Vec::new();
        let mut standard_rows = Vec::new();
        for sb in &self.sub_batches {
            let rows: Vec<usize> = (order.len()..order.len() + sb.indices.len()).collect();
            order.extend_from_slice(&sb.indices);
            match sb.role {
                Role::Class(_) => class_rows.push(rows),
                Role::Standard => standard_rows = rows,
            }
        }
        TrainBatch::from_order(dataset, &order, class_rows, standard_rows)
    }

    fn check(&self, partition: &ClassPartition, labels: &[usize]) {
        debug_assert_eq!(self.sub_batches.len(), partition.num_classes() + 1);
        for (k, sb) in self.sub_batches.iter().enumerate() {
            debug_assert_eq!(sb.indices.len(), self.n);
            if k < partition.num_classes() {
                debug_assert_eq!(sb.role, Role::Class(k));
                debug_assert!(sb.indices.iter().all(|&i| labels[i] == partition.label(k)));
            } else {
                debug_assert_eq!(sb.role, Role::Standard);
            }
        }
    }
}

/// Rows gathered from a dataset, with the groups the objective uses.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Source dataset index of every row.
    pub indices: Vec<usize>,
    /// Row groups fed to the densification loss.
    pub class_rows: Vec<Vec<usize>>,
    /// Rows providing normalization statistics.
    pub standard_rows: Vec<usize>,
}

impl TrainBatch {
    fn from_order(
        dataset: &Dataset,
        order: &[usize],
        class_rows: Vec<Vec<usize>>,
        standard_rows: Vec<usize>,
    ) -> Self {
        Self {
            inputs: dataset.inputs().select_rows(order),
            labels: order.iter().map(|&i| dataset.labels()[i]).collect(),
            indices: order.to_vec(),
            class_rows,
            standard_rows,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        Err(Error::SubBatchTooSmall(n))
    } else {
        Ok(())
    }
}

fn sample_class<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
}

fn class_sub_batches<R: Rng + ?Sized>(partition: &ClassPartition, n: usize, rng: &mut R) -> Vec<SubBatch> {
    (0..partition.num_classes())
        .map(|k| SubBatch {
            role: Role::Class(k),
            indices: sample_class(partition.class(k), n, rng),
        })
        .collect()
}

/// One stand-alone `K + 1` batch; the standard sub-batch holds `n` distinct indices.
pub fn build_topo_batch<R: Rng + ?Sized>(
    partition: &ClassPartition,
    n: usize,
    rng: &mut R,
) -> Result<TopoBatch> {
    check_n(n)?;
    if n > partition.total() {
        return Err(Error::NotEnoughSamples {
            requested: n,
            available: partition.total(),
        });
    }
    let mut sub_batches = class_sub_batches(partition, n, rng);
    sub_batches.push(SubBatch {
        role: Role::Standard,
        indices: rand::seq::index::sample(rng, partition.total(), n).into_vec(),
    });
    Ok(TopoBatch { sub_batches, n })
}

/// `b` seed samples, each expanded with `n − 1` same-class draws.
pub fn build_original_batch<R: Rng + ?Sized>(
    partition: &ClassPartition,
    labels: &[usize],
    b: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    check_n(n)?;
    if b == 0 {
        return Err(Error::SubBatchTooSmall(0));
    }
    (0..b)
        .map(|_| {
            let seed = rng.random_range(0..partition.total());
            Ok(expand(partition, labels, seed, n, rng))
        })
        .collect()
}

fn expand<R: Rng + ?Sized>(partition: &ClassPartition, labels: &[usize], seed: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let pool = partition.class(partition.class_of_label(labels[seed]));
    let mut sub = Vec::with_capacity(n);
    sub.push(seed);
    sub.extend(sample_class(pool, n - 1, rng));
    sub
}

/// How many samples a loader has delivered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TouchCounters {
    /// Samples delivered through the standard pool (or as seeds).
    pub standard: u64,
    /// Samples delivered through class-specific pools.
    pub class: u64,
    pub batches: u64,
    pub epochs_started: u64,
}

impl TouchCounters {
    pub fn total(&self) -> u64 {
        self.standard + self.class
    }

    /// Standard-pool samples per dataset size.
    pub fn standard_passes(&self, dataset_len: usize) -> f64 {
        self.standard as f64 / dataset_len as f64
    }

    /// All delivered samples per dataset size.
    pub fn total_passes(&self, dataset_len: usize) -> f64 {
        self.total() as f64 / dataset_len as f64
    }
}

/// Epoch-cycling shuffled order over `0..len`.
#[derive(Debug, Clone)]
struct Cycle {
    order: Vec<usize>,
    cursor: usize,
    epochs_started: u64,
}

impl Cycle {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            cursor: len,
            epochs_started: 0,
        }
    }

    fn take<R: Rng + ?Sized>(&mut self, n: usize, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
                self.epochs_started += 1;
            }
            let take = (n - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Stateful `K + 1` loader.
#[derive(Debug, Clone)]
pub struct TopoLoader {
    partition: ClassPartition,
    labels: Vec<usize>,
    n: usize,
    rng: ChaCha8Rng,
    cycle: Cycle,
    counters: TouchCounters,
}

impl TopoLoader {
    pub fn new(labels: &[usize], n: usize, seed: u64) -> Result<Self> {
        check_n(n)?;
        let partition = partition_by_class(labels)?;
        Ok(Self {
            cycle: Cycle::new(labels.len()),
            partition,
            labels: labels.to_vec(),
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: TouchCounters::default(),
        })
    }

    pub fn partition(&self) -> &ClassPartition {
        &self.partition
    }

    /// Batches per epoch, `⌈N / n⌉`.
    pub fn epoch_len(&self) -> usize {
        self.labels.len().div_ceil(self.n)
    }

    pub fn counters(&self) -> &TouchCounters {
        &self.counters
    }

    pub fn next_batch(&mut self) -> TopoBatch {
        let mut sub_batches = class_sub_batches(&self.partition, self.n, &mut self.rng);
        let standard = self.cycle.take(self.n, &mut self.rng);
        sub_batches.push(SubBatch {
            role: Role::Standard,
            indices: standard,
        });
        let batch = TopoBatch {
            sub_batches,
            n: self.n,
        };
        batch.check(&self.partition, &self.labels);
        let k = self.partition.num_classes() as u64;
        self.counters.standard += self.n as u64;
        self.counters.class += k * self.n as u64;
        self.counters.batches += 1;
        self.counters.epochs_started = self.cycle.epochs_started;
        batch
    }
}

/// Stateful original loader; seeds cycle through the dataset without replacement.
#[derive(Debug, Clone)]
pub struct OriginalLoader {
    partition: ClassPartition,
    labels: Vec<usize>,
    b: usize,
    n: usize,
    rng: ChaCha8Rng,
    cycle: Cycle,
    counters: TouchCounters,
}

impl OriginalLoader {
    pub fn new(labels: &[usize], b: usize, n: usize, seed: u64) -> Result<Self> {
        check_n(n)?;
        if b == 0 {
            return Err(Error::SubBatchTooSmall(0));
        }
        Ok(Self {
            partition: partition_by_class(labels)?,
            cycle: Cycle::new(labels.len()),
            labels: labels.to_vec(),
            b,
            n,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: TouchCounters::default(),
        })
    }

    /// Batches per epoch, `⌈N / b⌉`.
    pub fn epoch_len(&self) -> usize {
        self.labels.len().div_ceil(self.b)
    }

    pub fn counters(&self) -> &TouchCounters {
        &self.counters
    }

    pub fn next_batch(&mut self) -> Vec<Vec<usize>> {
        let seeds = self.cycle.take(self.b, &mut self.rng);
        let out: Vec<Vec<usize>> = seeds
            .into_iter()
            .map(|s| expand(&self.partition, &self.labels, s, self.n, &mut self.rng))
            .collect();
        self.counters.standard += (self.b * self.n) as u64;
        self.counters.batches += 1;
        self.counters.epochs_started = self.cycle.epochs_started;
        out
    }

    /// Gather an original batch; every row contributes to the normalization statistics.
    pub fn gather(batch: &[Vec<usize>], dataset: &Dataset) -> TrainBatch {
        let mut order = Vec::new();
        let mut class_rows = Vec::new();
        for sub in batch {
            class_rows.push((order.len()..order.len() + sub.len()).collect());
            order.extend_from_slice(sub);
        }
        let standard_rows = (0..order.len()).collect();
        TrainBatch::from_order(dataset, &order, class_rows, standard_rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn partition_examples() {
        let p = partition_by_class(&[0, 1, 0, 2]).unwrap();
        assert_eq!(p.classes(), &[vec![0, 2], vec![1], vec![3]]);
        assert_eq!(p.num_classes(), 3);
        let single = partition_by_class(&[4, 4, 4]).unwrap();
        assert_eq!(single.num_classes(), 1);
        assert_eq!(single.label(0), 4);
        assert!(matches!(partition_by_class(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn topo_batch_shape() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let p = partition_by_class(&labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = build_topo_batch(&p, 4, &mut rng).unwrap();
        assert_eq!(b.len(), 16);
        assert_eq!(b.sub_batches().len(), 4);
        for (k, sb) in b.sub_batches()[..3].iter().enumerate() {
            assert!(sb.indices.iter().all(|&i| labels[i] == k));
        }
        let mut std = b.standard().to_vec();
        std.sort();
        std.dedup();
        assert_eq!(std.len(), 4);
        assert!(matches!(build_topo_batch(&p, 1, &mut rng), Err(Error::SubBatchTooSmall(1))));
    }

    #[test]
    fn original_batch_is_class_pure() {
        let labels = [0, 0, 1, 1, 1, 2];
        let p = partition_by_class(&labels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = build_original_batch(&p, &labels, 1, 2, &mut rng).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].len(), 2);
        assert_eq!(labels[b[0][0]], labels[b[0][1]]);
        for sub in build_original_batch(&p, &labels, 50, 5, &mut rng).unwrap() {
            assert!(sub.iter().all(|&i| labels[i] == labels[sub[0]]));
        }
        assert!(build_original_batch(&p, &labels, 0, 2, &mut rng).is_err());
        assert!(build_original_batch(&p, &labels, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn loader_epoch_covers_dataset_once() {
        let labels: Vec<usize> = (0..103).map(|i| (i * 7) % 4).collect();
        let mut loader = TopoLoader::new(&labels, 8, 3).unwrap();
        assert_eq!(loader.epoch_len(), 13);
        let mut seen = vec![0; labels.len()];
        let mut drawn = Vec::new();
        for _ in 0..loader.epoch_len() {
            drawn.extend_from_slice(loader.next_batch().standard());
        }
        for &i in &drawn[..labels.len()] {
            seen[i] += 1;
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(loader.counters().standard, 13 * 8);
        assert_eq!(loader.counters().class, 13 * 8 * 4);
    }

    #[test]
    fn loaders_are_deterministic() {
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let mut a = TopoLoader::new(&labels, 4, 9).unwrap();
        let mut b = TopoLoader::new(&labels, 4, 9).unwrap();
        for _ in 0..30 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
        let mut a = OriginalLoader::new(&labels, 3, 4, 9).unwrap();
        let mut b = OriginalLoader::new(&labels, 3, 4, 9).unwrap();
        for _ in 0..30 {
            assert_eq!(a.next_batch(), b.next_batch());
        }
    }

    #[test]
    fn gather_tracks_roles() {
        let inputs = Matrix::from_fn(12, 2, |r, c| (r * 2 + c) as f64);
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let ds = Dataset::new(inputs, labels.clone()).unwrap();
        let mut loader = TopoLoader::new(&labels, 3, 0).unwrap();
        let batch = loader.next_batch();
        let tb = batch.gather(&ds);
        assert_eq!(tb.len(), 9);
        assert_eq!(tb.class_rows, vec![vec![0, 1, 2], vec![3, 4, 5]]);
        assert_eq!(tb.standard_rows, vec![6, 7, 8]);
        for (r, &i) in tb.indices.iter().enumerate() {
            assert_eq!(tb.inputs.row(r), ds.inputs().row(i));
            assert_eq!(tb.labels[r], labels[i]);
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(Dataset::new(Matrix::zeros(0, 2), vec![]), Err(Error::EmptyDataset)));
        assert!(Dataset::new(Matrix::zeros(2, 2), vec![0]).is_err());
        let d = Dataset::new(Matrix::zeros(3, 1), vec![0, 3, 1]).unwrap();
        assert_eq!(d.num_classes(), 4);
        assert_eq!(d.subset(&[1]).labels(), &[3]);
    }

    proptest! {
        #[test]
        fn partition_covers_every_index(labels in prop::collection::vec(0usize..6, 1..60)) {
            let p = partition_by_class(&labels).unwrap();
            let mut all: Vec<usize> = p.classes().concat();
            all.sort();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for (k, c) in p.classes().iter().enumerate() {
                prop_assert!(!c.is_empty());
                prop_assert!(c.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(c.iter().all(|&i| labels[i] == p.label(k)));
            }
        }

        #[test]
        fn every_class_present_in_every_batch(labels in prop::collection::vec(0usize..4, 2..40), n in 2usize..6, seed in any::<u64>()) {
            let mut loader = TopoLoader::new(&labels, n, seed).unwrap();
            let k = loader.partition().num_classes();
            for _ in 0..10 {
                let b = loader.next_batch();
                prop_assert_eq!(b.sub_batches().len(), k + 1);
                for (c, sb) in b.sub_batches()[..k].iter().enumerate() {
                    prop_assert_eq!(sb.indices.len(), n);
                    let label = loader.partition().label(c);
                    prop_assert!(sb.indices.iter().all(|&i| labels[i] == label));
                }
            }
        }
    }
}
