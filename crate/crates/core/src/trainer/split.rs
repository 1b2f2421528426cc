use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;

pub const MIN_RECORDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { ratio: 0.7, seed: 2207 }
    }
}

impl SplitSpec {
    pub fn new(ratio: f64, seed: u64) -> Result<Self, TrainError> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(TrainError::InvalidRatio(ratio));
        }
        Ok(SplitSpec { ratio, seed })
    }

    pub fn train_size(&self, n: usize) -> usize {
        // The epsilon keeps products like 0.7 * 10 from landing just under
        // an integer.
        (self.ratio * n as f64 + 1e-9).floor() as usize
    }
}

/// Train and test indices, in shuffled order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n`; the first `floor(ratio * n)` indices train.
pub fn split(n: usize, spec: SplitSpec) -> Result<Split, TrainError> {
    let spec = SplitSpec::new(spec.ratio, spec.seed)?;
    if n < MIN_RECORDS {
        return Err(TrainError::TooFewRecords { n, min: MIN_RECORDS });
    }
    let cut = spec.train_size(n);
    if cut == 0 || cut == n {
        return Err(TrainError::InvalidRatio(spec.ratio));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);
    let test = indices.split_off(cut);
    Ok(Split { train: indices, test })
}
