//! Discrete codec-unit sequences: the exchange type between the codec, the
//! packed container, and the encoder.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-utterance matrix of discrete codes, `T` frames by `n_codebooks`
/// columns, plus the metadata needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecUnitSequence {
    /// `codes[[t, i]]` is the code emitted for frame `t` by codebook `i`.
    pub codes: Array2<u32>,
    pub frame_rate_hz: u32,
    pub codebook_sizes: Vec<u32>,
}

impl CodecUnitSequence {
    /// Builds a sequence and checks every invariant: at least one frame, one
    /// codebook, positive sizes and rate, and every code within its
    /// codebook's range. `name` is used only for error reporting.
    pub fn new(
        codes: Array2<u32>,
        frame_rate_hz: u32,
        codebook_sizes: Vec<u32>,
        name: &str,
    ) -> Result<Self> {
        if codes.nrows() == 0 {
            return Err(Error::InvalidConfig(format!(
                "utterance {name:?} has no frames"
            )));
        }
        if codebook_sizes.is_empty() || codes.ncols() != codebook_sizes.len() {
            return Err(Error::ShapeMismatch(format!(
                "utterance {name:?}: {} code columns vs {} codebook sizes",
                codes.ncols(),
                codebook_sizes.len()
            )));
        }
        if frame_rate_hz == 0 {
            return Err(Error::InvalidConfig("frame_rate_hz must be positive".into()));
        }
        if let Some(i) = codebook_sizes.iter().position(|&k| k == 0) {
            return Err(Error::InvalidConfig(format!(
                "codebook {i} has size 0"
            )));
        }
        let seq = Self {
            codes,
            frame_rate_hz,
            codebook_sizes,
        };
        seq.check_ranges(name)?;
        Ok(seq)
    }

    pub fn check_ranges(&self, name: &str) -> Result<()> {
        for (t, row) in self.codes.outer_iter().enumerate() {
            for (i, &code) in row.iter().enumerate() {
                if code >= self.codebook_sizes[i] {
                    return Err(Error::CodeOutOfRange {
                        utterance: name.to_string(),
                        frame: t,
                        codebook: i,
                        code,
                        size: self.codebook_sizes[i],
                    });
                }
            }
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.codes.nrows()
    }

    pub fn n_codebooks(&self) -> usize {
        self.codes.ncols()
    }

    /// Bits needed per code for codebook `i`: `ceil(log2 K_i)`, minimum 1.
    pub fn bits_for(size: u32) -> u32 {
        if size <= 1 {
            1
        } else {
            32 - (size - 1).leading_zeros()
        }
    }

    /// Bits occupied by one frame across all codebooks.
    pub fn bits_per_frame(codebook_sizes: &[u32]) -> u64 {
        codebook_sizes
            .iter()
            .map(|&k| Self::bits_for(k) as u64)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bits_for_matches_ceil_log2() {
        assert_eq!(CodecUnitSequence::bits_for(1), 1);
        assert_eq!(CodecUnitSequence::bits_for(2), 1);
        assert_eq!(CodecUnitSequence::bits_for(3), 2);
        assert_eq!(CodecUnitSequence::bits_for(8), 3);
        assert_eq!(CodecUnitSequence::bits_for(9), 4);
        assert_eq!(CodecUnitSequence::bits_for(1024), 10);
        assert_eq!(CodecUnitSequence::bits_for(1025), 11);
    }

    #[test]
    fn rejects_out_of_range_code() {
        let err = CodecUnitSequence::new(array![[3u32, 9]], 50, vec![8, 8], "u0").unwrap_err();
        match err {
            Error::CodeOutOfRange {
                frame, codebook, ..
            } => {
                assert_eq!((frame, codebook), (0, 1));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(CodecUnitSequence::new(
            Array2::<u32>::zeros((0, 2)),
            50,
            vec![4, 4],
            "u0"
        )
        .is_err());
        assert!(CodecUnitSequence::new(array![[1u32, 1]], 50, vec![4], "u0").is_err());
    }
}
