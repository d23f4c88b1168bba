use rand::seq::SliceRandom;

use crate::rng;

/// Epoch-wise shuffled index stream over `n` examples.
///
/// The permutation of epoch `e` is drawn from the stream
/// `{label}/epoch{e}` of the root seed, so the example at any position is a
/// pure function of `(seed, label, position)`. Resuming a run therefore only
/// needs the number of examples already consumed.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    label: String,
    cached: Option<(usize, Vec<usize>)>,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64, label: impl Into<String>) -> Self {
        assert!(n > 0, "sampler over an empty dataset");
        EpochSampler {
            n,
            seed,
            label: label.into(),
            cached: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..self.n).collect();
            let mut r = rng::stream(self.seed, &format!("{}/epoch{epoch}", self.label));
            perm.shuffle(&mut r);
            self.cached = Some((epoch, perm));
        }
        &self.cached.as_ref().unwrap().1
    }

    /// Example index at stream position `pos`.
    pub fn at(&mut self, pos: usize) -> usize {
        let n = self.n;
        self.permutation(pos / n)[pos % n]
    }

    /// `count` consecutive indices starting at stream position `start`.
    pub fn batch(&mut self, start: usize, count: usize) -> Vec<usize> {
        (start..start + count).map(|p| self.at(p)).collect()
    }
}
