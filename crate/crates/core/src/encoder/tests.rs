use ndarray::{array, Array2};

use super::gradcheck::finite_difference_check;
use super::*;
use crate::masking::{sample_mask, MaskSpec};
use crate::rng::{stream_rng, Purpose};
use crate::units::CodecUnitSequence;

fn tiny_config(n_layers: usize, temperature: f64) -> EncoderConfig {
    EncoderConfig {
        codebook_sizes: vec![8, 8],
        d_model: 8,
        n_layers,
        n_heads: 2,
        ffn_width: 16,
        max_positions: 32,
        temperature,
        quantizer_dropout_prob: 0.0,
        seed: 11,
    }
}

fn units_from(codes: Array2<u32>) -> CodecUnitSequence {
    CodecUnitSequence::new(codes, 50, vec![8, 8], "test").unwrap()
}

#[test]
fn embed_units_sums_active_tables() {
    let config = EncoderConfig {
        codebook_sizes: vec![8, 8],
        d_model: 2,
        n_layers: 0,
        n_heads: 1,
        ffn_width: 1,
        max_positions: 8,
        temperature: 1.0,
        quantizer_dropout_prob: 0.0,
        seed: 0,
    };
    let mut state = EncoderState::<f64>::init(config, HeadSpec::none()).unwrap();
    state.params.embeddings[0].fill(0.0);
    state.params.embeddings[1].fill(0.0);
    state.params.embeddings[0][[3, 0]] = 1.0;
    state.params.embeddings[0][[3, 1]] = 2.0;
    state.params.embeddings[1][[5, 0]] = 3.0;
    state.params.embeddings[1][[5, 1]] = 4.0;
    let units = units_from(array![[3u32, 5]]);
    let z = state.embed_units(&units, 2).unwrap();
    assert_eq!(z, array![[4.0, 6.0]]);
    // Prefix of one: only the first table contributes.
    let z1 = state.embed_units(&units, 1).unwrap();
    assert_eq!(z1, array![[1.0, 2.0]]);
}

#[test]
fn embed_expectation_over_dropout_matches_weighted_prefixes() {
    let state = EncoderState::<f64>::init(tiny_config(0, 1.0), HeadSpec::none()).unwrap();
    let units = units_from(array![[2u32, 7], [5, 0]]);
    let n_cb = 2;
    let q_p = 0.4;
    // E[Z] = (1 - q_p) * Z(n_cb) + (q_p / n_cb) * sum over prefixes.
    let mut expected = state.embed_units(&units, n_cb).unwrap() * (1.0 - q_p);
    for n_q in 1..=n_cb {
        expected = expected + state.embed_units(&units, n_q).unwrap() * (q_p / n_cb as f64);
    }
    // Enumerating the draw distribution directly gives the same mixture.
    let mut enumerated = Array2::<f64>::zeros(expected.raw_dim());
    enumerated = enumerated + state.embed_units(&units, n_cb).unwrap() * (1.0 - q_p);
    for n_q in 1..=n_cb {
        enumerated = enumerated + state.embed_units(&units, n_q).unwrap() * (q_p / n_cb as f64);
    }
    assert!((&expected - &enumerated).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn embedding_sum_is_linear_in_tables() {
    let config = tiny_config(0, 1.0);
    let state_a = EncoderState::<f64>::init(config.clone(), HeadSpec::none()).unwrap();
    let mut state_b = state_a.clone();
    let mut rng = stream_rng(9, Purpose::ParamInit, 1);
    use rand::Rng;
    for table in state_b.params.embeddings.iter_mut() {
        table.mapv_inplace(|_| rng.random::<f64>());
    }
    let mut state_sum = state_a.clone();
    for (i, table) in state_sum.params.embeddings.iter_mut().enumerate() {
        *table = &*table + &state_b.params.embeddings[i];
    }
    let units = units_from(array![[1u32, 2], [7, 7], [0, 3]]);
    let za = state_a.embed_units(&units, 2).unwrap();
    let zb = state_b.embed_units(&units, 2).unwrap();
    let zsum = state_sum.embed_units(&units, 2).unwrap();
    assert!((&za + &zb - &zsum).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn quantizer_dropout_distribution() {
    let mut rng = stream_rng(4, Purpose::QuantizerDropout, 0);
    // q_p = 0: always the full prefix.
    for _ in 0..100 {
        assert_eq!(sample_quantizer_dropout(0.0, 4, &mut rng), 4);
    }
    // q_p = 1: uniform over {1..4} within +-0.02 across 1e5 draws.
    let mut counts = [0usize; 4];
    let trials = 100_000;
    for _ in 0..trials {
        let n_q = sample_quantizer_dropout(1.0, 4, &mut rng);
        assert!((1..=4).contains(&n_q));
        counts[n_q - 1] += 1;
    }
    for &count in &counts {
        let freq = count as f64 / trials as f64;
        assert!((freq - 0.25).abs() < 0.02, "freq {freq}");
    }
}

#[test]
fn codec_init_copies_tables_when_dims_match() {
    let config = EncoderConfig {
        codebook_sizes: vec![4, 4],
        d_model: 6,
        n_layers: 0,
        n_heads: 1,
        ffn_width: 1,
        max_positions: 8,
        temperature: 1.0,
        quantizer_dropout_prob: 0.0,
        seed: 2,
    };
    let mut state = EncoderState::<f64>::init(config, HeadSpec::none()).unwrap();
    let stage0 = Array2::<f32>::from_shape_fn((4, 6), |(r, c)| (r * 6 + c) as f32);
    let stage1 = stage0.mapv(|v| v * 0.5);
    state
        .init_embeddings_from_codec(&[stage0.clone(), stage1.clone()], 7)
        .unwrap();
    for (table, stage) in state.params.embeddings.iter().zip([&stage0, &stage1]) {
        for (a, b) in table.iter().zip(stage.iter()) {
            assert_eq!(*a, *b as f64);
        }
    }
    // Composition: embed of [a, b] equals stage0[a] + stage1[b].
    let units = CodecUnitSequence::new(array![[2u32, 3]], 50, vec![4, 4], "u").unwrap();
    let z = state.embed_units(&units, 2).unwrap();
    for j in 0..6 {
        let expected = stage0[[2, j]] as f64 + stage1[[3, j]] as f64;
        assert!((z[[0, j]] - expected).abs() < 1e-12);
    }
}

#[test]
fn codec_init_projects_mismatched_dims_deterministically() {
    let config = tiny_config(0, 1.0);
    let mut a = EncoderState::<f64>::init(config.clone(), HeadSpec::none()).unwrap();
    let mut b = EncoderState::<f64>::init(config, HeadSpec::none()).unwrap();
    let stages = vec![
        Array2::<f32>::from_shape_fn((8, 3), |(r, c)| (r + c) as f32),
        Array2::<f32>::from_shape_fn((8, 3), |(r, c)| (r * c) as f32),
    ];
    a.init_embeddings_from_codec(&stages, 5).unwrap();
    b.init_embeddings_from_codec(&stages, 5).unwrap();
    assert_eq!(a.params.embeddings, b.params.embeddings);
    // Wrong codeword count is a shape error.
    let bad = vec![Array2::<f32>::zeros((3, 3)), Array2::<f32>::zeros((8, 3))];
    assert!(a.init_embeddings_from_codec(&bad, 5).is_err());
}

#[test]
fn zero_layer_forward_is_identity() {
    let state = EncoderState::<f64>::init(tiny_config(0, 1.0), HeadSpec::none()).unwrap();
    let z = Array2::<f64>::from_shape_fn((5, 8), |(t, j)| (t as f64) - (j as f64) * 0.3);
    let (outputs, _) = state.forward(&z).unwrap();
    assert_eq!(outputs.n_layers(), 0);
    assert_eq!(outputs.final_output(), &z);
}

#[test]
fn sequences_do_not_interact() {
    let state = EncoderState::<f64>::init(tiny_config(2, 1.0), HeadSpec::none()).unwrap();
    let za = Array2::<f64>::from_shape_fn((4, 8), |(t, j)| ((t + j) as f64).sin());
    let zb = Array2::<f64>::from_shape_fn((6, 8), |(t, j)| ((t * j) as f64).cos());
    let (a1, _) = state.forward(&za).unwrap();
    let (b1, _) = state.forward(&zb).unwrap();
    // Forward in the other order: outputs identical.
    let (b2, _) = state.forward(&zb).unwrap();
    let (a2, _) = state.forward(&za).unwrap();
    assert_eq!(a1.final_output(), a2.final_output());
    assert_eq!(b1.final_output(), b2.final_output());
}

#[test]
fn predict_distribution_examples() {
    // Equal logits, two classes.
    let head = Array2::<f64>::zeros((2, 4));
    let h = array![1.0f64, -2.0, 0.5, 3.0];
    let p = predict_distribution(h.view(), &head, 0.1);
    assert!((p[0] - 0.5).abs() < 1e-12);
    assert!((p[1] - 0.5).abs() < 1e-12);

    // Logits [1, 0] at temperature 1.
    let mut head = Array2::<f64>::zeros((2, 1));
    head[[0, 0]] = 1.0;
    let h = array![1.0f64];
    let p = predict_distribution(h.view(), &head, 1.0);
    let e = std::f64::consts::E;
    assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
    assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);

    // Argmax invariant under temperature.
    let head = Array2::<f64>::from_shape_fn((5, 3), |(r, c)| ((r * 3 + c) as f64).sin());
    let h = array![0.3f64, -1.0, 2.0];
    let base = predict_distribution(h.view(), &head, 1.0);
    let argmax = |p: &ndarray::Array1<f64>| {
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    };
    for tau in [0.05, 0.5, 3.0, 10.0] {
        let p = predict_distribution(h.view(), &head, tau);
        assert_eq!(argmax(&p), argmax(&base));
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn uniform_head_loss_is_log_c() {
    // A zeroed head gives a uniform distribution over C = 500 targets.
    let config = EncoderConfig {
        codebook_sizes: vec![8],
        d_model: 8,
        n_layers: 0,
        n_heads: 1,
        ffn_width: 1,
        max_positions: 16,
        temperature: 0.1,
        quantizer_dropout_prob: 0.0,
        seed: 1,
    };
    let mut state = EncoderState::<f64>::init(
        config,
        HeadSpec {
            class_counts: vec![500],
        },
    )
    .unwrap();
    state.params.heads[0].fill(0.0);
    let units = CodecUnitSequence::new(array![[1u32], [2], [3]], 50, vec![8], "u").unwrap();
    let mask = MaskSpec {
        t_len: 3,
        span: 1,
        start_prob: 1.0,
        masked: vec![0, 1, 2],
    };
    let targets: Vec<u32> = vec![7, 499, 0];
    let examples = [SequenceExample {
        units: &units,
        mask: &mask,
        n_active_codebooks: 1,
        targets: vec![&targets],
    }];
    let (loss, stats) = state.masked_loss(&examples).unwrap();
    assert!((loss - 500.0f64.ln()).abs() < 1e-9, "loss {loss}");
    assert_eq!(stats.pairs, 3);
}

#[test]
fn perfect_prediction_loss_vanishes() {
    let config = EncoderConfig {
        codebook_sizes: vec![8],
        d_model: 4,
        n_layers: 0,
        n_heads: 1,
        ffn_width: 1,
        max_positions: 16,
        temperature: 1.0,
        quantizer_dropout_prob: 0.0,
        seed: 1,
    };
    let mut state = EncoderState::<f64>::init(
        config,
        HeadSpec {
            class_counts: vec![3],
        },
    )
    .unwrap();
    state.params.embeddings[0].fill(0.0);
    state.params.embeddings[0][[2, 0]] = 1.0;
    state.params.mask_embedding.fill(0.0);
    state.params.mask_embedding[[0, 0]] = 1.0;
    // Head drives the target logit to +1000 at the masked frame.
    state.params.heads[0].fill(0.0);
    state.params.heads[0][[1, 0]] = 1000.0;
    let units = CodecUnitSequence::new(array![[2u32]], 50, vec![8], "u").unwrap();
    let mask = MaskSpec {
        t_len: 1,
        span: 1,
        start_prob: 1.0,
        masked: vec![0],
    };
    let targets: Vec<u32> = vec![1];
    let (loss, stats) = state
        .masked_loss(&[SequenceExample {
            units: &units,
            mask: &mask,
            n_active_codebooks: 1,
            targets: vec![&targets],
        }])
        .unwrap();
    assert!(loss < 1e-9, "loss {loss}");
    assert_eq!(stats.correct_per_head, vec![1]);
}

#[test]
fn empty_mask_yields_zero_loss_and_grads() {
    let state = EncoderState::<f64>::init(
        tiny_config(1, 0.1),
        HeadSpec {
            class_counts: vec![8, 8],
        },
    )
    .unwrap();
    let units = units_from(array![[1u32, 2], [3, 4]]);
    let mask = MaskSpec::empty(2);
    let t0: Vec<u32> = vec![1, 3];
    let t1: Vec<u32> = vec![2, 4];
    let (loss, grads, stats) = state
        .compute_loss_and_grads(&[SequenceExample {
            units: &units,
            mask: &mask,
            n_active_codebooks: 2,
            targets: vec![&t0, &t1],
        }])
        .unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(stats.pairs, 0);
    for (_, t) in grads.tensors() {
        assert!(t.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn mask_embedding_gradient_nonzero_iff_masked() {
    let state = EncoderState::<f64>::init(
        tiny_config(1, 0.1),
        HeadSpec {
            class_counts: vec![8, 8],
        },
    )
    .unwrap();
    let units = units_from(array![[1u32, 2], [3, 4], [5, 6]]);
    let t0: Vec<u32> = vec![1, 3, 5];
    let t1: Vec<u32> = vec![2, 4, 6];
    let masked = MaskSpec {
        t_len: 3,
        span: 1,
        start_prob: 0.5,
        masked: vec![1],
    };
    let (_, grads, _) = state
        .compute_loss_and_grads(&[SequenceExample {
            units: &units,
            mask: &masked,
            n_active_codebooks: 2,
            targets: vec![&t0, &t1],
        }])
        .unwrap();
    let gnorm: f64 = grads.mask_embedding.iter().map(|v| v * v).sum();
    assert!(gnorm > 0.0);

    // Finite-difference confirmation on one coordinate.
    let eps = 1e-6;
    let mut plus = state.clone();
    plus.params.mask_embedding[[0, 0]] += eps;
    let mut minus = state.clone();
    minus.params.mask_embedding[[0, 0]] -= eps;
    let ex = |s: &EncoderState<f64>| {
        s.masked_loss(&[SequenceExample {
            units: &units,
            mask: &masked,
            n_active_codebooks: 2,
            targets: vec![&t0, &t1],
        }])
        .unwrap()
        .0
    };
    let fd = (ex(&plus) - ex(&minus)) / (2.0 * eps);
    assert!((fd - grads.mask_embedding[[0, 0]]).abs() < 1e-6);
}

#[test]
fn gradients_match_finite_differences_small() {
    // Fast sanity version; the acceptance suite runs the full 2-layer,
    // d_model 16 sweep.
    let config = EncoderConfig {
        codebook_sizes: vec![6, 6],
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ffn_width: 12,
        max_positions: 8,
        temperature: 0.1,
        quantizer_dropout_prob: 0.0,
        seed: 13,
    };
    let state = EncoderState::<f64>::init(
        config,
        HeadSpec {
            class_counts: vec![6, 6],
        },
    )
    .unwrap();
    let units = CodecUnitSequence::new(
        array![[1u32, 2], [3, 4], [5, 0], [2, 2], [0, 5]],
        50,
        vec![6, 6],
        "u",
    )
    .unwrap();
    let mask = MaskSpec {
        t_len: 5,
        span: 2,
        start_prob: 0.3,
        masked: vec![1, 2, 4],
    };
    let t0: Vec<u32> = vec![1, 3, 5, 2, 0];
    let t1: Vec<u32> = vec![2, 4, 0, 2, 5];
    let examples = [SequenceExample {
        units: &units,
        mask: &mask,
        n_active_codebooks: 2,
        targets: vec![&t0, &t1],
    }];
    let report = finite_difference_check(&state, &examples, 1e-5).unwrap();
    assert!(
        report.max_rel_error < 1e-4,
        "max rel error {} at {} {:?}",
        report.max_rel_error,
        report.worst_tensor,
        report.worst_index
    );
}

#[test]
fn loss_is_deterministic() {
    let state = EncoderState::<f32>::init(
        tiny_config(2, 0.1),
        HeadSpec {
            class_counts: vec![8, 8],
        },
    )
    .unwrap();
    let mut rng = stream_rng(3, Purpose::Mask, 0);
    let units = units_from(Array2::from_shape_fn((24, 2), |_| {
        use rand::Rng;
        rng.random_range(0..8u32)
    }));
    let mask = sample_mask(24, 4, 0.2, &mut rng).unwrap();
    let t0: Vec<u32> = units.codes.column(0).to_vec();
    let t1: Vec<u32> = units.codes.column(1).to_vec();
    let run = || {
        state
            .masked_loss(&[SequenceExample {
                units: &units,
                mask: &mask,
                n_active_codebooks: 2,
                targets: vec![&t0, &t1],
            }])
            .unwrap()
            .0
    };
    let a = run();
    let b = run();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn codec_initialized_model_beats_random_on_held_out_loss() {
    // Paired 200-step runs on a fixed seed and corpus; codec-initialized
    // embeddings generalize better, so the held-out masked loss must come
    // out lower. (Training loss alone favors random near-orthogonal tables,
    // which memorize single batches more easily.)
    use crate::rvq::ToyCodec;
    use crate::synth::{synthesize_corpus, CorpusConfig};
    use ndarray::Axis;

    let n_cb = 2usize;
    let k = 32usize;
    let corpus = synthesize_corpus(
        &CorpusConfig {
            n_utterances: 12,
            frames_min: 60,
            frames_max: 80,
            feature_dim: 8,
            n_phonemes: 10,
            n_speakers: 2,
            noise_level: 0.5,
            frame_rate_hz: 50,
        },
        31,
    )
    .unwrap();
    let views: Vec<_> = corpus.features.iter().take(6).map(|f| f.view()).collect();
    let feats = ndarray::concatenate(Axis(0), &views).unwrap();
    let codec = ToyCodec::train(feats.view(), n_cb, k, 30, 1).unwrap();
    let train_units: Vec<CodecUnitSequence> = corpus
        .features
        .iter()
        .take(6)
        .map(|f| codec.encode(f.view(), 50).unwrap())
        .collect();
    let held_units: Vec<CodecUnitSequence> = corpus
        .features
        .iter()
        .skip(6)
        .map(|f| codec.encode(f.view(), 50).unwrap())
        .collect();

    let config = EncoderConfig {
        codebook_sizes: vec![k as u32; n_cb],
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        ffn_width: 64,
        max_positions: 128,
        temperature: 0.1,
        quantizer_dropout_prob: 0.0,
        seed: 6,
    };
    let head_spec = HeadSpec {
        class_counts: vec![k; n_cb],
    };

    let eval_held = |state: &EncoderState<f32>| -> f64 {
        let cols: Vec<Vec<Vec<u32>>> = held_units
            .iter()
            .map(|u| (0..n_cb).map(|i| u.codes.column(i).to_vec()).collect())
            .collect();
        let masks: Vec<_> = held_units
            .iter()
            .enumerate()
            .map(|(u, uu)| {
                let mut rng = stream_rng(999, Purpose::Mask, u as u64);
                sample_mask(uu.frames(), 10, 0.08, &mut rng).unwrap()
            })
            .collect();
        let examples: Vec<SequenceExample> = held_units
            .iter()
            .enumerate()
            .map(|(u, uu)| SequenceExample {
                units: uu,
                mask: &masks[u],
                n_active_codebooks: n_cb,
                targets: cols[u].iter().map(|v| v.as_slice()).collect(),
            })
            .collect();
        state.masked_loss(&examples).unwrap().0
    };

    let train = |init_codec: bool| -> f64 {
        let mut state = EncoderState::<f32>::init(config.clone(), head_spec.clone()).unwrap();
        if init_codec {
            state.init_embeddings_from_codec(&codec.stages, 5).unwrap();
        }
        let adam_cfg = AdamConfig::default();
        for step in 0..200u64 {
            let mut masks = Vec::new();
            for (u, units) in train_units.iter().enumerate() {
                let mut rng = stream_rng(7, Purpose::Mask, step * 100 + u as u64);
                masks.push(sample_mask(units.frames(), 10, 0.08, &mut rng).unwrap());
            }
            let cols: Vec<Vec<Vec<u32>>> = train_units
                .iter()
                .map(|u| (0..n_cb).map(|i| u.codes.column(i).to_vec()).collect())
                .collect();
            let examples: Vec<SequenceExample> = train_units
                .iter()
                .enumerate()
                .map(|(u, units)| SequenceExample {
                    units,
                    mask: &masks[u],
                    n_active_codebooks: n_cb,
                    targets: cols[u].iter().map(|v| v.as_slice()).collect(),
                })
                .collect();
            let (_, grads, _) = state.compute_loss_and_grads(&examples).unwrap();
            state.opt.apply(&mut state.params, &grads, 1e-3, &adam_cfg);
        }
        eval_held(&state)
    };

    let held_codec = train(true);
    let held_random = train(false);
    assert!(
        held_codec < held_random,
        "codec init {held_codec} vs random {held_random}"
    );
}
