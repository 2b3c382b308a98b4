//! Training-target derivation: reconstruction labels, offline k-means
//! pseudo-labels, and EMA-teacher online clustering.

pub mod kmeans;
pub mod online;
pub mod relabel;

pub use kmeans::{assign_clusters, kmeans_fit, KMeansModel};
pub use online::{ema_decay_at, ema_update_teacher, EmaSchedule, TeacherState};
pub use relabel::{relabel_dataset, TargetProvenance, TargetStore};

use crate::units::CodecUnitSequence;

/// Per-frame integer labels for one utterance, one stream per prediction
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    pub streams: Vec<Vec<u32>>,
    /// Vocabulary size per stream; labels lie in `[0, vocab)`.
    pub vocab_sizes: Vec<usize>,
}

impl TargetAssignment {
    pub fn frames(&self) -> usize {
        self.streams.first().map_or(0, |s| s.len())
    }
}

/// Reconstruction targets: stream `i` at frame `t` is the input code
/// `codes[t][i]`. A bijective re-indexing of the units; quantizer dropout on
/// the input never touches these.
pub fn reconstruction_targets(units: &CodecUnitSequence) -> TargetAssignment {
    let streams = (0..units.n_codebooks())
        .map(|i| units.codes.column(i).to_vec())
        .collect();
    TargetAssignment {
        streams,
        vocab_sizes: units.codebook_sizes.iter().map(|&k| k as usize).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reconstruction_targets_are_the_codes() {
        let units =
            CodecUnitSequence::new(array![[3u32, 5], [1, 0]], 50, vec![8, 8], "u").unwrap();
        let targets = reconstruction_targets(&units);
        assert_eq!(targets.streams, vec![vec![3, 1], vec![5, 0]]);
        assert_eq!(targets.vocab_sizes, vec![8, 8]);
        // Bijective re-indexing: reassembling the streams recovers the codes.
        for t in 0..2 {
            for i in 0..2 {
                assert_eq!(targets.streams[i][t], units.codes[[t, i]]);
            }
        }
    }
}
