use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::DataSource;
use crate::error::{Error, Result};

/// Successors per token in the synthetic chain; the best achievable loss is
/// `ln(SUCCESSORS)`.
pub const SUCCESSORS: usize = 4;

/// Seed of the synthetic chain itself, shared by every run so that runs with
/// different seeds learn the same task.
const TASK_SEED: u64 = 0x5ca1_ab1e;

/// Produces `(inputs, targets)` token batches, each `batch * seq_len` long,
/// where `targets` is `inputs` shifted by one position.
pub struct Batcher {
    source: Source,
    rng: ChaCha8Rng,
    batch: usize,
    seq_len: usize,
}

enum Source {
    Chain { next: Vec<[usize; SUCCESSORS]> },
    Tokens(Vec<usize>),
}

impl Batcher {
    pub fn new(src: &DataSource, vocab: usize, batch: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let source = match src {
            DataSource::Synthetic => {
                let mut task = ChaCha8Rng::seed_from_u64(TASK_SEED ^ vocab as u64);
                let all: Vec<usize> = (0..vocab).collect();
                let next = (0..vocab)
                    .map(|_| {
                        let mut row = [0; SUCCESSORS];
                        for r in &mut row {
                            *r = *all.choose(&mut task).expect("non-empty vocabulary");
                        }
                        row
                    })
                    .collect();
                Source::Chain { next }
            }
            DataSource::TokenFile(path) => {
                let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
                if bytes.len() <= seq_len + 1 {
                    return Err(Error::Config(format!(
                        "{}: needs more than {} bytes",
                        path.display(),
                        seq_len + 1
                    )));
                }
                Source::Tokens(bytes.into_iter().map(usize::from).collect())
            }
        };
        Ok(Batcher {
            source,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch,
            seq_len,
        })
    }

    pub fn next_batch(&mut self) -> (Vec<usize>, Vec<usize>) {
        let n = self.batch * self.seq_len;
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..self.batch {
            let seq = self.sequence();
            x.extend_from_slice(&seq[..self.seq_len]);
            y.extend_from_slice(&seq[1..]);
        }
        (x, y)
    }

    /// `seq_len + 1` consecutive tokens.
    fn sequence(&mut self) -> Vec<usize> {
        let len = self.seq_len + 1;
        match &self.source {
            Source::Chain { next } => {
                let mut tok = self.rng.random_range(0..next.len());
                let mut seq = Vec::with_capacity(len);
                seq.push(tok);
                for _ in 1..len {
                    tok = next[tok][self.rng.random_range(0..SUCCESSORS)];
                    seq.push(tok);
                }
                seq
            }
            Source::Tokens(t) => {
                let start = self.rng.random_range(0..t.len() - len + 1);
                t[start..start + len].to_vec()
            }
        }
    }
}
