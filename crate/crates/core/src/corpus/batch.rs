use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use super::instance::ParaphraseInstance;
use super::vocab::{WordId, PAD};

/// A padded `rows x cols` grid of word ids with its mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<WordId>,
    pub mask: Vec<bool>,
}

impl IdGrid {
    pub fn from_rows(seqs: &[&[WordId]]) -> Self {
        let rows = seqs.len();
        let cols = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = alloc::vec![PAD; rows * cols];
        let mut mask = alloc::vec![false; rows * cols];
        for (r, s) in seqs.iter().enumerate() {
            ids[r * cols..r * cols + s.len()].copy_from_slice(s);
            mask[r * cols..r * cols + s.len()].iter_mut().for_each(|m| *m = true);
        }
        Self { rows, cols, ids, mask }
    }

    #[inline]
    pub fn id(&self, r: usize, c: usize) -> WordId {
        self.ids[r * self.cols + c]
    }

    #[inline]
    pub fn valid(&self, r: usize, c: usize) -> bool {
        self.mask[r * self.cols + c]
    }

    pub fn len_of(&self, r: usize) -> usize {
        self.mask[r * self.cols..(r + 1) * self.cols].iter().filter(|&&m| m).count()
    }

    /// Unpadded ids of row `r`.
    pub fn row(&self, r: usize) -> Vec<WordId> {
        (0..self.cols).filter(|&c| self.valid(r, c)).map(|c| self.id(r, c)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the instances in the input list.
    pub indices: Vec<usize>,
    pub source: IdGrid,
    /// Targets include the trailing EOS.
    pub target: IdGrid,
    pub target_bow: Vec<Vec<WordId>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    /// Batch over the given instances, using target `choice[i]` for instance `i`.
    pub fn gather(instances: &[ParaphraseInstance], indices: &[usize], choice: &[usize]) -> Self {
        let src: Vec<&[WordId]> = indices.iter().map(|&i| instances[i].source.as_slice()).collect();
        let tgt: Vec<&[WordId]> = indices
            .iter()
            .zip(choice)
            .map(|(&i, &c)| instances[i].targets[c].as_slice())
            .collect();
        Self {
            indices: indices.to_vec(),
            source: IdGrid::from_rows(&src),
            target: IdGrid::from_rows(&tgt),
            target_bow: indices.iter().map(|&i| instances[i].target_bow.clone()).collect(),
        }
    }
}

/// Lazily materialized padded batches.
pub struct Batches<'a> {
    instances: &'a [ParaphraseInstance],
    order: Vec<usize>,
    choice: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        let choice: Vec<usize> = idx.iter().map(|&i| self.choice[i]).collect();
        self.pos = end;
        Some(Batch::gather(self.instances, idx, &choice))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// One epoch of batches. With `shuffle`, the order is permuted by `rng`; for
/// instances with several targets, one is drawn uniformly from `rng` as well.
/// All random draws happen up front, so the rng state after this call does not
/// depend on how far the iterator is consumed.
pub fn batches<'a, R: Rng>(
    instances: &'a [ParaphraseInstance],
    batch_size: usize,
    rng: &mut R,
    shuffle: bool,
) -> Batches<'a> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..instances.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let choice = instances
        .iter()
        .map(|inst| if inst.targets.len() > 1 { rng.gen_range(0..inst.targets.len()) } else { 0 })
        .collect();
    Batches { instances, order, choice, batch_size, pos: 0 }
}

/// Unshuffled batches that always use the first target.
pub fn sequential_batches(instances: &[ParaphraseInstance], batch_size: usize) -> Batches<'_> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    Batches {
        instances,
        order: (0..instances.len()).collect(),
        choice: alloc::vec![0; instances.len()],
        batch_size,
        pos: 0,
    }
}
