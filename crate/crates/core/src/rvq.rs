//! Residual vector quantizer: the stand-in codec that turns frame features
//! into multi-codebook unit sequences.
//!
//! Stage `i`'s codebook is k-means over the residuals left by stages
//! `1..i`; encoding is greedy per stage with argmin ties broken to the
//! lowest codeword index. Immutable after training; encode/decode are pure.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::targets::kmeans::kmeans_fit;
use crate::units::CodecUnitSequence;

pub const CODEC_MAGIC: &[u8; 4] = b"C2C1";
pub const CODEC_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyCodec {
    /// One K x D codeword matrix per stage, in residual order.
    pub stages: Vec<Array2<f32>>,
}

fn nearest_codeword(residual: &[f32], codebook: &Array2<f32>) -> u32 {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for (j, row) in codebook.outer_iter().enumerate() {
        let d: f32 = residual
            .iter()
            .zip(row.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best as u32
}

impl ToyCodec {
    pub fn n_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.stages[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.stages[0].ncols()
    }

    pub fn codebook_sizes(&self) -> Vec<u32> {
        self.stages.iter().map(|s| s.nrows() as u32).collect()
    }

    /// Trains `n_stages` codebooks of `k` codewords each on `features`
    /// (n x d), each stage fit on the previous stage's residuals.
    pub fn train(
        features: ArrayView2<f32>,
        n_stages: usize,
        k: usize,
        kmeans_iters: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_stages == 0 {
            return Err(Error::InvalidConfig("need at least one stage".into()));
        }
        if features.nrows() < k {
            return Err(Error::TooFewPoints {
                k,
                n: features.nrows(),
            });
        }
        let mut residuals = features.to_owned();
        let mut stages = Vec::with_capacity(n_stages);
        for stage in 0..n_stages {
            let model = kmeans_fit(
                residuals.view(),
                k,
                kmeans_iters,
                seed.wrapping_add(stage as u64),
            )?;
            for mut row in residuals.outer_iter_mut() {
                let code = nearest_codeword(row.as_slice().unwrap(), &model.centroids);
                let cw = model.centroids.row(code as usize);
                row.iter_mut().zip(cw.iter()).for_each(|(r, c)| *r -= c);
            }
            stages.push(model.centroids);
        }
        Ok(Self { stages })
    }

    /// Greedy residual encoding of `features` (T x D).
    pub fn encode(
        &self,
        features: ArrayView2<f32>,
        frame_rate_hz: u32,
    ) -> Result<CodecUnitSequence> {
        if features.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature dim {} vs codec dim {}",
                features.ncols(),
                self.dim()
            )));
        }
        let t_len = features.nrows();
        let n_cb = self.n_stages();
        let mut codes = Array2::<u32>::zeros((t_len, n_cb));
        let mut residual = vec![0f32; self.dim()];
        for (t, frame) in features.outer_iter().enumerate() {
            residual.copy_from_slice(frame.as_slice().unwrap());
            for (i, codebook) in self.stages.iter().enumerate() {
                let code = nearest_codeword(&residual, codebook);
                codes[[t, i]] = code;
                let cw = codebook.row(code as usize);
                residual.iter_mut().zip(cw.iter()).for_each(|(r, c)| *r -= c);
            }
        }
        CodecUnitSequence::new(codes, frame_rate_hz, self.codebook_sizes(), "<encoded>")
    }

    /// Reconstruction from codes: each frame is the sum of the selected
    /// codewords across all stages.
    pub fn decode(&self, units: &CodecUnitSequence) -> Result<Array2<f32>> {
        self.decode_prefix(units, self.n_stages())
    }

    /// Reconstruction using only the first `n_stages` codebooks.
    pub fn decode_prefix(&self, units: &CodecUnitSequence, n_stages: usize) -> Result<Array2<f32>> {
        if units.n_codebooks() != self.n_stages() {
            return Err(Error::ShapeMismatch(format!(
                "{} code columns vs {} codec stages",
                units.n_codebooks(),
                self.n_stages()
            )));
        }
        if n_stages > self.n_stages() {
            return Err(Error::InvalidConfig(format!(
                "prefix {n_stages} exceeds {} stages",
                self.n_stages()
            )));
        }
        let mut out = Array2::<f32>::zeros((units.frames(), self.dim()));
        for (t, row) in units.codes.outer_iter().enumerate() {
            for (i, &code) in row.iter().take(n_stages).enumerate() {
                if code as usize >= self.stages[i].nrows() {
                    return Err(Error::CodeOutOfRange {
                        utterance: "<decode>".into(),
                        frame: t,
                        codebook: i,
                        code,
                        size: self.stages[i].nrows() as u32,
                    });
                }
                let cw = self.stages[i].row(code as usize);
                let mut frame = out.row_mut(t);
                frame += &cw;
            }
        }
        Ok(out)
    }

    /// Per-frame residual norms after each stage prefix (0..=n_stages),
    /// evaluated with greedy encoding.
    pub fn residual_norms(&self, features: ArrayView2<f32>) -> Result<Vec<Vec<f32>>> {
        let units = self.encode(features, 1)?;
        let mut norms = Vec::with_capacity(self.n_stages() + 1);
        for prefix in 0..=self.n_stages() {
            let recon = self.decode_prefix(&units, prefix)?;
            let per_frame: Vec<f32> = features
                .outer_iter()
                .zip(recon.outer_iter())
                .map(|(f, r)| {
                    f.iter()
                        .zip(r.iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f32>()
                        .sqrt()
                })
                .collect();
            norms.push(per_frame);
        }
        Ok(norms)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut f = File::create(path)?;
        f.write_all(CODEC_MAGIC)?;
        f.write_all(&[CODEC_VERSION])?;
        f.write_all(&(self.n_stages() as u32).to_le_bytes())?;
        f.write_all(&(self.codebook_size() as u32).to_le_bytes())?;
        f.write_all(&(self.dim() as u32).to_le_bytes())?;
        for stage in &self.stages {
            for &v in stage.iter() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != CODEC_MAGIC {
            return Err(Error::BadHeader("not a codec file".into()));
        }
        let mut byte = [0u8; 1];
        f.read_exact(&mut byte)?;
        if byte[0] != CODEC_VERSION {
            return Err(Error::BadHeader(format!(
                "unsupported codec version {}",
                byte[0]
            )));
        }
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf)?;
        let n_stages = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let k = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        let mut stages = Vec::with_capacity(n_stages);
        for _ in 0..n_stages {
            let mut vals = vec![0f32; k * dim];
            for v in vals.iter_mut() {
                f.read_exact(&mut u32buf)?;
                *v = f32::from_le_bytes(u32buf);
            }
            stages.push(Array2::from_shape_vec((k, dim), vals).unwrap());
        }
        if stages.is_empty() {
            return Err(Error::BadHeader("codec has no stages".into()));
        }
        Ok(Self { stages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthesize_corpus, CorpusConfig};
    use ndarray::{array, Axis};

    fn flat_features(corpus: &crate::synth::SyntheticCorpus) -> Array2<f32> {
        let views: Vec<_> = corpus.features.iter().map(|f| f.view()).collect();
        ndarray::concatenate(Axis(0), &views).unwrap()
    }

    fn toy_corpus(noise: f64) -> crate::synth::SyntheticCorpus {
        synthesize_corpus(
            &CorpusConfig {
                n_utterances: 8,
                frames_min: 40,
                frames_max: 60,
                feature_dim: 6,
                n_phonemes: 4,
                n_speakers: 2,
                noise_level: noise,
                frame_rate_hz: 50,
            },
            17,
        )
        .unwrap()
    }

    #[test]
    fn single_stage_k1_is_mean() {
        let feats = array![[1.0f32, 3.0], [3.0, 5.0]];
        let codec = ToyCodec::train(feats.view(), 1, 1, 50, 0).unwrap();
        assert!((codec.stages[0][[0, 0]] - 2.0).abs() < 1e-6);
        assert!((codec.stages[0][[0, 1]] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn two_stages_do_not_hurt_reconstruction() {
        let corpus = toy_corpus(0.3);
        let feats = flat_features(&corpus);
        let err = |stages: usize| {
            let codec = ToyCodec::train(feats.view(), stages, 8, 50, 5).unwrap();
            let units = codec.encode(feats.view(), 50).unwrap();
            let recon = codec.decode(&units).unwrap();
            (&feats - &recon).mapv(|x| x * x).sum()
        };
        assert!(err(2) <= err(1) + 1e-4);
    }

    #[test]
    fn stage_one_separates_clean_two_phoneme_clusters() {
        let corpus = synthesize_corpus(
            &CorpusConfig {
                n_utterances: 4,
                frames_min: 30,
                frames_max: 40,
                feature_dim: 6,
                n_phonemes: 2,
                n_speakers: 1,
                noise_level: 0.0,
                frame_rate_hz: 50,
            },
            23,
        )
        .unwrap();
        let feats = flat_features(&corpus);
        let codec = ToyCodec::train(feats.view(), 2, 2, 50, 1).unwrap();
        let units = codec.encode(feats.view(), 50).unwrap();
        // Brute-force check: stage-1 assignment must be constant within a
        // phoneme and differ across the two phonemes.
        let labels: Vec<u32> = corpus.phoneme_labels.iter().flatten().copied().collect();
        let mut code_for_label = [None::<u32>; 2];
        for (t, &ph) in labels.iter().enumerate() {
            let code = units.codes[[t, 0]];
            match code_for_label[ph as usize] {
                None => code_for_label[ph as usize] = Some(code),
                Some(c) => assert_eq!(c, code, "phoneme {ph} split across stage-1 codes"),
            }
        }
        assert_ne!(code_for_label[0], code_for_label[1]);
    }

    #[test]
    fn exact_residual_match_encodes_to_expected_tuple() {
        // Frame equal to codeword_{1,a} + codeword_{2,b} encodes to [a, b].
        let stage1 = array![[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let stage2 = array![[0.0f32, 0.0], [1.0, 0.5], [-0.5, 1.0]];
        let codec = ToyCodec {
            stages: vec![stage1, stage2],
        };
        let frame = array![[10.0f32 + 1.0, 0.5]];
        let units = codec.encode(frame.view(), 50).unwrap();
        assert_eq!(units.codes, array![[1u32, 1]]);
    }

    #[test]
    fn encode_is_deterministic_and_permutation_equivariant() {
        let corpus = toy_corpus(0.2);
        let feats = flat_features(&corpus);
        let codec = ToyCodec::train(feats.view(), 3, 4, 50, 2).unwrap();
        let a = codec.encode(feats.view(), 50).unwrap();
        let b = codec.encode(feats.view(), 50).unwrap();
        assert_eq!(a.codes, b.codes);
        // Reverse frame order: codes follow frames.
        let rev = feats.slice(ndarray::s![..;-1, ..]).to_owned();
        let r = codec.encode(rev.view(), 50).unwrap();
        let n = feats.nrows();
        for t in 0..n {
            assert_eq!(r.codes.row(t), a.codes.row(n - 1 - t));
        }
    }

    #[test]
    fn greedy_is_optimal_on_coarse_fine_fixture() {
        // Stage 1 is a coarse grid; stage 2 perturbations (max norm ~1) are
        // far smaller than the residual gap between competing grid cells for
        // frames sampled well inside a cell. On such instances greedy equals
        // the exhaustive optimum over all code tuples.
        let stage1 = array![
            [0.0f32, 0.0],
            [10.0, 0.0],
            [0.0, 10.0],
            [10.0, 10.0]
        ];
        let stage2 = array![
            [0.0f32, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [-1.0, 0.0],
            [0.0, -1.0],
            [0.7, 0.7]
        ];
        let codec = ToyCodec {
            stages: vec![stage1.clone(), stage2.clone()],
        };
        let mut rng = crate::rng::stream_rng(3, crate::rng::Purpose::KMeansInit, 0);
        use rand::Rng;
        for _ in 0..50 {
            let cell = rng.random_range(0..stage1.nrows());
            let frame = array![[
                stage1[[cell, 0]] + rng.random::<f32>() * 3.0 - 1.5,
                stage1[[cell, 1]] + rng.random::<f32>() * 3.0 - 1.5
            ]];
            let units = codec.encode(frame.view(), 50).unwrap();
            let greedy_recon = codec.decode(&units).unwrap();
            let greedy_err: f32 = (&frame - &greedy_recon).mapv(|x| x * x).sum();
            for a in 0..stage1.nrows() {
                for b in 0..stage2.nrows() {
                    let recon = &stage1.row(a) + &stage2.row(b);
                    let err: f32 = frame
                        .row(0)
                        .iter()
                        .zip(recon.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    assert!(greedy_err <= err + 1e-5);
                }
            }
        }
    }

    #[test]
    fn quantization_idempotent_on_coarse_fine_fixture() {
        let stage1 = array![[0.0f32, 0.0], [10.0, 0.0]];
        let stage2 = array![[0.5f32, 0.0], [0.0, 0.5]];
        let codec = ToyCodec {
            stages: vec![stage1, stage2],
        };
        let frames = array![[9.3f32, 0.2], [0.4, 0.6], [10.4, 0.1]];
        let once = codec.encode(frames.view(), 50).unwrap();
        let recon = codec.decode(&once).unwrap();
        let twice = codec.encode(recon.view(), 50).unwrap();
        assert_eq!(once.codes, twice.codes);
    }

    #[test]
    fn decode_edge_cases() {
        let zero = ToyCodec {
            stages: vec![Array2::<f32>::zeros((3, 4)); 2],
        };
        let units = CodecUnitSequence::new(
            Array2::<u32>::from_elem((5, 2), 1),
            50,
            vec![3, 3],
            "u",
        )
        .unwrap();
        assert_eq!(zero.decode(&units).unwrap(), Array2::<f32>::zeros((5, 4)));

        let u = array![[2.0f32, 0.0]];
        let v = array![[0.0f32, 3.0]];
        let codec = ToyCodec {
            stages: vec![ndarray::concatenate(Axis(0), &[u.view(), v.view()]).unwrap()],
        };
        let units =
            CodecUnitSequence::new(array![[0u32], [1]], 50, vec![2], "u").unwrap();
        let out = codec.decode(&units).unwrap();
        assert_eq!(out, array![[2.0f32, 0.0], [0.0, 3.0]]);
    }

    #[test]
    fn mean_error_decreases_with_prefix_length() {
        let corpus = toy_corpus(0.4);
        let feats = flat_features(&corpus);
        let codec = ToyCodec::train(feats.view(), 4, 6, 50, 9).unwrap();
        let units = codec.encode(feats.view(), 50).unwrap();
        let mut last = f32::INFINITY;
        for prefix in 0..=4 {
            let recon = codec.decode_prefix(&units, prefix).unwrap();
            let err = (&feats - &recon).mapv(|x| x * x).mean().unwrap();
            assert!(err <= last + 1e-6, "prefix {prefix}: {err} > {last}");
            last = err;
        }
    }

    #[test]
    fn mean_residual_monotone_on_trained_corpus() {
        // On training data the mean residual norm cannot grow stage over
        // stage: each codebook's centroids are cluster means of the previous
        // residuals, and argmin assignment only improves on the fitted
        // assignment.
        let corpus = toy_corpus(0.3);
        let feats = flat_features(&corpus);
        let codec = ToyCodec::train(feats.view(), 3, 8, 50, 11).unwrap();
        let norms = codec.residual_norms(feats.view()).unwrap();
        let mean = |v: &Vec<f32>| v.iter().map(|x| x * x).sum::<f32>() / v.len() as f32;
        for stage in 1..norms.len() {
            assert!(
                mean(&norms[stage]) <= mean(&norms[stage - 1]) + 1e-6,
                "stage {stage}"
            );
        }
    }

    #[test]
    fn residual_monotone_per_frame_on_coarse_fine_fixture() {
        // Per-frame monotonicity needs a codebook geometry where the nearest
        // codeword never overshoots: coarse grid + zero-containing fine
        // stage. (With arbitrary k-means codebooks a frame whose residual is
        // already tiny can be pushed away by a sizeable nearest codeword.)
        let stage1 = array![[0.0f32, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let stage2 = array![[0.0f32, 0.0], [1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]];
        let codec = ToyCodec {
            stages: vec![stage1, stage2],
        };
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(12, crate::rng::Purpose::KMeansInit, 1);
        let feats = Array2::<f32>::from_shape_fn((60, 2), |_| rng.random::<f32>() * 12.0 - 1.0);
        let norms = codec.residual_norms(feats.view()).unwrap();
        for stage in 1..norms.len() {
            for (frame, (&after, &before)) in
                norms[stage].iter().zip(&norms[stage - 1]).enumerate()
            {
                assert!(
                    after <= before + 1e-5,
                    "frame {frame}, stage {stage}: {after} > {before}"
                );
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let corpus = toy_corpus(0.2);
        let feats = flat_features(&corpus);
        let codec = ToyCodec::train(feats.view(), 2, 4, 50, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.c2c");
        codec.save(&path).unwrap();
        let back = ToyCodec::load(&path).unwrap();
        assert_eq!(back, codec);
    }

    #[test]
    fn train_rejects_too_few_frames() {
        let feats = Array2::<f32>::zeros((3, 4));
        assert!(matches!(
            ToyCodec::train(feats.view(), 1, 5, 10, 0),
            Err(Error::TooFewPoints { .. })
        ));
    }
}
