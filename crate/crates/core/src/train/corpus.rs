use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::LmBatch;

/// Byte-level corpus cut into non-overlapping windows of `context + 1` bytes.
/// Window order is reshuffled at the start of every epoch from the seed.
#[derive(Debug, Clone)]
pub struct Corpus {
    bytes: Vec<u8>,
    window: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl Corpus {
    pub fn open(path: &Path, context: usize, vocab: usize, seed: u64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|_| Error::CorpusNotFound(path.to_path_buf()))?;
        Self::from_bytes(bytes, context, vocab, seed)
    }

    pub fn from_bytes(bytes: Vec<u8>, context: usize, vocab: usize, seed: u64) -> Result<Self> {
        let window = context + 1;
        if context == 0 || bytes.len() < window {
            return Err(Error::Config(format!("corpus of {} bytes is shorter than one window of {window}", bytes.len())));
        }
        if let Some(&b) = bytes.iter().find(|&&b| b as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id: b as usize, vocab });
        }
        let mut c = Self { bytes, window, seed, epoch: 0, order: Vec::new(), cursor: 0 };
        c.shuffle();
        Ok(c)
    }

    fn shuffle(&mut self) {
        self.order = (0..self.bytes.len() / self.window).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0xD1B5_4A32_D192_ED03));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn len_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Window `i` of the unshuffled sequence.
    pub fn window(&self, i: usize) -> Vec<usize> {
        self.bytes[i * self.window..(i + 1) * self.window].iter().map(|&b| b as usize).collect()
    }

    pub fn next_window(&mut self) -> Vec<usize> {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let w = self.window(self.order[self.cursor]);
        self.cursor += 1;
        w
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<LmBatch> {
        let windows: Vec<_> = (0..batch).map(|_| self.next_window()).collect();
        LmBatch::from_windows(&windows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(seed: u64) -> Corpus {
        Corpus::from_bytes((0..=99u8).collect(), 9, 256, seed).unwrap()
    }

    #[test]
    fn windows_do_not_overlap_and_cover_epoch() {
        let mut c = corpus(1);
        assert_eq!(c.windows_per_epoch(), 10);
        let mut starts: Vec<usize> = (0..10).map(|_| c.next_window()[0]).collect();
        starts.sort();
        assert_eq!(starts, (0..10).map(|i| i * 10).collect::<Vec<_>>());
        assert_eq!(c.epoch(), 0);
        c.next_window();
        assert_eq!(c.epoch(), 1);
    }

    #[test]
    fn seeded_and_reshuffled() {
        let take = |c: &mut Corpus| (0..20).map(|_| c.next_window()[0]).collect::<Vec<_>>();
        let a = take(&mut corpus(4));
        assert_eq!(a, take(&mut corpus(4)));
        assert_ne!(a, take(&mut corpus(5)));
        assert_ne!(a[..10], a[10..]);
    }

    #[test]
    fn rejects_short_or_out_of_vocab() {
        assert!(Corpus::from_bytes(vec![1, 2, 3], 8, 256, 0).is_err());
        assert!(matches!(Corpus::from_bytes(vec![200; 20], 4, 100, 0), Err(Error::TokenOutOfRange { .. })));
        assert!(matches!(Corpus::open(Path::new("/no/such/file"), 4, 256, 0), Err(Error::CorpusNotFound(_))));
    }

    #[test]
    fn batch_targets_shift_inputs() {
        let mut c = corpus(2);
        let b = c.next_batch(3).unwrap();
        assert_eq!(b.inputs.batch(), 3);
        assert_eq!(b.inputs.seq(), 9);
        for r in 0..3 {
            assert_eq!(b.inputs.row(r)[1..], b.targets[r * 9..r * 9 + 8]);
        }
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn epoch_visits_each_window_once(len in 20usize..400, context in 1usize..16, seed in 0u64..100) {
            let bytes: Vec<u8> = (0..len).map(|i| (i % 251) as u8).collect();
            let mut c = Corpus::from_bytes(bytes, context, 256, seed).unwrap();
            let n = c.windows_per_epoch();
            let window = context + 1;
            prop_assert_eq!(n, len / window);
            let mut starts: Vec<usize> = (0..n).map(|_| c.next_window()[0]).collect();
            starts.sort_unstable();
            let mut expected: Vec<usize> = (0..n).map(|i| (i * window) % 251).collect();
            expected.sort_unstable();
            prop_assert_eq!(starts, expected);
        }
    }
}
