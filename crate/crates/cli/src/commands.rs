use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use c2v_core::config::FlatConfig;
use c2v_core::encoder::checkpoint::{file_sha256, Checkpoint};
use c2v_core::encoder::EncoderState;
use c2v_core::probe::{
    evaluate_probe, extract_features, split_utterances, train_probe, ProbeConfig, ProbeLabels,
    ProbeTask,
};
use c2v_core::store::{import_external_units, ImportSchema};
use c2v_core::targets::relabel_dataset;
use c2v_core::trainer::{bench_throughput, pretrain, TrainConfig};
use c2v_core::{
    extract_corpus, pack_dataset, storage_report, CorpusLabels, Error, ExtractConfig,
    PackedDataset, Result, ToyCodec,
};

use crate::provenance::{output_root, Provenance};

#[derive(Parser)]
#[command(
    name = "c2v",
    version,
    about = "Discrete codec-unit pretraining pipeline: extract units, pack them, pretrain with masked prediction, derive k-means or online targets, and probe frozen encoders"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize a labeled corpus, train the toy codec, and write the
    /// packed dataset plus labels sidecar and codec file
    Extract(ExtractArgs),
    /// Pack externally extracted unit text files into a dataset container
    Pack(PackArgs),
    /// Pretrain an encoder over a packed dataset
    Pretrain(PretrainArgs),
    /// Fit k-means on checkpoint latents and label the whole dataset
    Relabel(RelabelArgs),
    /// Train and evaluate frozen-encoder probes
    Probe(ProbeArgs),
    /// Compare in-RAM vs streaming loader throughput on a dataset
    Bench(BenchArgs),
    /// Print a summary of any artifact file (dataset, checkpoint, targets, codec)
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Flat key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_utterances: Option<usize>,
    #[arg(long)]
    frames_min: Option<usize>,
    #[arg(long)]
    frames_max: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    phonemes: Option<usize>,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    noise_level: Option<f64>,
    #[arg(long)]
    frame_rate_hz: Option<u32>,
    #[arg(long)]
    codec_stages: Option<usize>,
    #[arg(long)]
    codec_k: Option<usize>,
    #[arg(long)]
    rvq_iters: Option<usize>,
}

#[derive(Args)]
pub struct PackArgs {
    /// A unit text file, or a directory of them (one utterance per file)
    #[arg(long)]
    input: PathBuf,
    /// Space/comma-separated codebook sizes; falls back to `#` metadata lines
    #[arg(long)]
    codebook_sizes: Option<String>,
    /// Frames per second; falls back to `#` metadata lines
    #[arg(long)]
    frame_rate_hz: Option<u32>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PretrainArgs {
    /// Flat key = value config file; CLI flags override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// reconstruction | offline_kmeans | online
    #[arg(long)]
    strategy: Option<String>,
    /// desk | paper
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label store for offline_kmeans
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Codec file for embedding initialization
    #[arg(long)]
    codec: Option<PathBuf>,
    #[arg(long)]
    init_from_codec: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from this checkpoint (config hash must match)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Allow writing into a directory holding a previous run
    #[arg(long)]
    force: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    quantizer_dropout: Option<f64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    log_every: Option<u64>,
    #[arg(long)]
    batch_frames: Option<usize>,
    #[arg(long)]
    crop_frames: Option<usize>,
    #[arg(long)]
    mask_span: Option<usize>,
    #[arg(long)]
    mask_start_prob: Option<f64>,
    /// hubert | dino
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    peak_lr: Option<f64>,
    #[arg(long)]
    lr_warmup: Option<u64>,
    #[arg(long)]
    lr_total: Option<u64>,
    #[arg(long)]
    lr_constant: Option<u64>,
    #[arg(long)]
    lr_decay: Option<u64>,
    #[arg(long)]
    adam_beta1: Option<f64>,
    #[arg(long)]
    adam_beta2: Option<f64>,
    #[arg(long)]
    adam_eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    online_codebook_size: Option<usize>,
    #[arg(long)]
    online_codebook_decay: Option<f64>,
    /// "upper_half", "5-12", or "2,4"
    #[arg(long)]
    clustered_layers: Option<String>,
    #[arg(long)]
    ema_start: Option<f64>,
    #[arg(long)]
    ema_end: Option<f64>,
    #[arg(long)]
    ema_warmup_steps: Option<u64>,
    #[arg(long)]
    ema_freeze_step: Option<u64>,
}

#[derive(Args)]
pub struct RelabelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Layer to cluster; defaults to the middle of the stack
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 50)]
    k: usize,
    #[arg(long, default_value_t = 0.01)]
    sample_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding dataset.c2v, labels.txt, codec.c2c (as written by
    /// extract); individual flags override
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    codec: Option<PathBuf>,
    /// both | phoneme | speaker
    #[arg(long, default_value = "both")]
    task: String,
    #[arg(long, default_value_t = 0.75)]
    train_fraction: f64,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// Emit the report as JSON on stdout
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectArgs {
    path: PathBuf,
    /// Emit a JSON summary instead of text
    #[arg(long)]
    json: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(args) => run_extract(args),
        Command::Pack(args) => run_pack(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::Relabel(args) => run_relabel(args),
        Command::Probe(args) => run_probe(args),
        Command::Bench(args) => run_bench(args),
        Command::Inspect(args) => run_inspect(args),
    }
}

fn run_extract(args: ExtractArgs) -> Result<()> {
    let mut flat = match &args.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::new(),
    };
    macro_rules! overlay {
        ($key:literal, $field:expr) => {
            if let Some(v) = $field {
                flat.set($key, v);
            }
        };
    }
    overlay!("n_utterances", args.n_utterances);
    overlay!("frames_min", args.frames_min);
    overlay!("frames_max", args.frames_max);
    overlay!("feature_dim", args.feature_dim);
    overlay!("phonemes", args.phonemes);
    overlay!("speakers", args.speakers);
    overlay!("noise_level", args.noise_level);
    overlay!("frame_rate_hz", args.frame_rate_hz);
    overlay!("codec_stages", args.codec_stages);
    overlay!("codec_k", args.codec_k);
    overlay!("rvq_iters", args.rvq_iters);
    let config = ExtractConfig::from_flat(&flat)?;
    let seed = args.seed.unwrap_or(0);
    let out_dir = args.out.unwrap_or_else(|| output_root().join("extract"));

    let outputs = extract_corpus(&config, seed, &out_dir)?;
    Provenance {
        command: "extract",
        config_hash: config.to_flat().sha256_hex(),
        seed: Some(seed),
        inputs: Vec::new(),
    }
    .write(&out_dir)?;

    println!("dataset: {}", outputs.dataset_path.display());
    println!("labels:  {}", outputs.labels_path.display());
    println!("codec:   {}", outputs.codec_path.display());
    println!(
        "dataset sha256: {}",
        file_sha256(&outputs.dataset_path)?
    );
    print!("{}", storage_report(&outputs.manifest).render());
    Ok(())
}

fn run_pack(args: PackArgs) -> Result<()> {
    let schema = ImportSchema {
        codebook_sizes: match &args.codebook_sizes {
            None => None,
            Some(raw) => Some(
                raw.split(|c: char| c == ',' || c.is_whitespace())
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<u32>().map_err(|_| {
                            Error::InvalidConfig(format!("bad codebook size {s:?}"))
                        })
                    })
                    .collect::<Result<Vec<u32>>>()?,
            ),
        },
        frame_rate_hz: args.frame_rate_hz,
    };
    let out_dir = args.out.unwrap_or_else(|| output_root().join("pack"));
    std::fs::create_dir_all(&out_dir)?;
    let sequences = import_external_units(&args.input, &schema)?;
    let dataset_path = out_dir.join("dataset.c2v");
    let manifest = pack_dataset(&sequences, &dataset_path)?;
    Provenance {
        command: "pack",
        config_hash: FlatConfig::new().sha256_hex(),
        seed: None,
        inputs: vec![("units".to_string(), args.input.clone())],
    }
    .write(&out_dir)?;
    println!("dataset: {}", dataset_path.display());
    print!("{}", storage_report(&manifest).render());
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> Result<()> {
    let mut flat = match &args.config {
        Some(path) => FlatConfig::load(path)?,
        None => FlatConfig::new(),
    };
    macro_rules! overlay {
        ($key:literal, $field:expr) => {
            if let Some(v) = $field {
                flat.set($key, v);
            }
        };
    }
    overlay!("strategy", args.strategy.as_deref());
    overlay!("preset", args.preset.as_deref());
    overlay!("dataset", args.dataset.as_ref().map(|p| p.display()));
    overlay!("targets", args.targets.as_ref().map(|p| p.display()));
    overlay!("codec", args.codec.as_ref().map(|p| p.display()));
    overlay!("init_from_codec", args.init_from_codec);
    overlay!("seed", args.seed);
    overlay!("d_model", args.d_model);
    overlay!("n_layers", args.n_layers);
    overlay!("n_heads", args.n_heads);
    overlay!("ffn_width", args.ffn_width);
    overlay!("max_positions", args.max_positions);
    overlay!("temperature", args.temperature);
    overlay!("quantizer_dropout", args.quantizer_dropout);
    overlay!("total_steps", args.total_steps);
    overlay!("checkpoint_every", args.checkpoint_every);
    overlay!("log_every", args.log_every);
    overlay!("batch_frames", args.batch_frames);
    overlay!("crop_frames", args.crop_frames);
    overlay!("mask_span", args.mask_span);
    overlay!("mask_start_prob", args.mask_start_prob);
    overlay!("lr_schedule", args.lr_schedule.as_deref());
    overlay!("peak_lr", args.peak_lr);
    overlay!("lr_warmup", args.lr_warmup);
    overlay!("lr_total", args.lr_total);
    overlay!("lr_constant", args.lr_constant);
    overlay!("lr_decay", args.lr_decay);
    overlay!("adam_beta1", args.adam_beta1);
    overlay!("adam_beta2", args.adam_beta2);
    overlay!("adam_eps", args.adam_eps);
    overlay!("weight_decay", args.weight_decay);
    overlay!("clip_norm", args.clip_norm);
    overlay!("online_codebook_size", args.online_codebook_size);
    overlay!("online_codebook_decay", args.online_codebook_decay);
    overlay!("clustered_layers", args.clustered_layers.as_deref());
    overlay!("ema_start", args.ema_start);
    overlay!("ema_end", args.ema_end);
    overlay!("ema_warmup_steps", args.ema_warmup_steps);
    overlay!("ema_freeze_step", args.ema_freeze_step);

    let mut config = TrainConfig::from_flat(&flat)?;
    if config.dataset.as_os_str().is_empty() {
        return Err(Error::InvalidConfig("no dataset given".into()));
    }
    // Bind codebook sizes now so the provenance hash matches checkpoints.
    let dataset = PackedDataset::load(&config.dataset)?;
    config.bind_dataset(dataset.manifest())?;
    drop(dataset);

    let out_dir = args
        .out
        .unwrap_or_else(|| output_root().join(format!("pretrain-{}", config.strategy.as_str())));
    // Training logs carry wall-clock timings, so a rerun cannot reproduce
    // them bit-exactly; refuse instead unless resuming or forced.
    if out_dir.join("final.c2m").exists() && args.resume.is_none() && !args.force {
        return Err(Error::InvalidConfig(format!(
            "{} already holds a finished run; pass --force to overwrite or --resume to continue",
            out_dir.display()
        )));
    }

    let mut inputs = vec![("dataset".to_string(), config.dataset.clone())];
    if let Some(p) = &config.targets_path {
        inputs.push(("targets".to_string(), p.clone()));
    }
    if let Some(p) = &config.codec_path {
        inputs.push(("codec".to_string(), p.clone()));
    }
    std::fs::create_dir_all(&out_dir)?;
    Provenance {
        command: "pretrain",
        config_hash: config.config_hash(),
        seed: Some(config.seed()),
        inputs,
    }
    .write(&out_dir)?;
    std::fs::write(out_dir.join("config.txt"), config.to_flat().to_text())?;

    let outcome = pretrain(&config, &out_dir, args.resume.as_deref())?;
    println!("final checkpoint: {}", outcome.final_checkpoint.display());
    println!("metrics: {}", outcome.metrics_path.display());
    if let Ok(records) = c2v_core::trainer::read_metrics(&outcome.metrics_path) {
        if let Some(last) = records.last() {
            println!(
                "last: step {} loss {:.4} accuracy {:.4}",
                last.step,
                last.loss,
                last.mean_accuracy()
            );
        }
    }
    Ok(())
}

fn run_relabel(args: RelabelArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let state = ckpt.to_encoder_state()?;
    let layer = args.layer.unwrap_or_else(|| {
        // Middle of the stack by default.
        (state.config.n_layers + 1) / 2
    });
    let dataset = PackedDataset::load(&args.dataset)?;
    let ckpt_hash = file_sha256(&args.checkpoint)?;
    let store = relabel_dataset(
        &state,
        &ckpt_hash,
        &dataset,
        layer,
        args.k,
        args.sample_fraction,
        args.seed,
    )?;
    let out_dir = args.out.unwrap_or_else(|| output_root().join("relabel"));
    std::fs::create_dir_all(&out_dir)?;
    let targets_path = out_dir.join("targets.c2t");
    store.save(&targets_path)?;
    let mut flat = FlatConfig::new();
    flat.set("layer", layer);
    flat.set("k", args.k);
    flat.set("sample_fraction", args.sample_fraction);
    Provenance {
        command: "relabel",
        config_hash: flat.sha256_hex(),
        seed: Some(args.seed),
        inputs: vec![
            ("checkpoint".to_string(), args.checkpoint.clone()),
            ("dataset".to_string(), args.dataset.clone()),
        ],
    }
    .write(&out_dir)?;
    println!("targets: {}", targets_path.display());
    println!(
        "layer {layer}, k {}, vocab {}, {} utterances",
        args.k,
        store.vocab,
        store.labels.len()
    );
    Ok(())
}

struct ProbeRow {
    task: &'static str,
    strategy: String,
    seed: u64,
    accuracy: f64,
    baseline_accuracy: Option<f64>,
    alpha: Vec<f64>,
}

fn probe_one_task(
    state: &EncoderState<f32>,
    baseline_state: Option<&EncoderState<f32>>,
    sequences: &[c2v_core::CodecUnitSequence],
    labels: &CorpusLabels,
    ids: &[String],
    task: ProbeTask,
    strategy: &str,
    train_fraction: f64,
    epochs: usize,
    seed: u64,
) -> Result<ProbeRow> {
    let (train_idx, test_idx) = split_utterances(sequences.len(), train_fraction, seed);
    let features = extract_features(state, sequences)?;
    let pick = |idx: &[usize]| -> Vec<c2v_core::LayerOutputs<f32>> {
        idx.iter().map(|&i| features[i].clone()).collect()
    };
    let make_labels = |idx: &[usize]| -> Result<(ProbeLabels, usize)> {
        match task {
            ProbeTask::FramePhoneme => {
                let mut per_utt = Vec::with_capacity(idx.len());
                let mut classes = 0u32;
                for &i in idx {
                    let run = labels
                        .phonemes
                        .get(&ids[i])
                        .ok_or_else(|| Error::UnknownUtterance(ids[i].clone()))?;
                    classes = classes.max(run.iter().copied().max().unwrap_or(0) + 1);
                    per_utt.push(run.clone());
                }
                Ok((ProbeLabels::Frame(per_utt), classes as usize))
            }
            ProbeTask::UtteranceSpeaker => {
                let mut speakers = Vec::with_capacity(idx.len());
                let mut classes = 0u32;
                for &i in idx {
                    let s = *labels
                        .speakers
                        .get(&ids[i])
                        .ok_or_else(|| Error::UnknownUtterance(ids[i].clone()))?;
                    classes = classes.max(s + 1);
                    speakers.push(s);
                }
                Ok((ProbeLabels::Utterance(speakers), classes as usize))
            }
        }
    };
    // Class count must cover both splits.
    let (train_labels, c1) = make_labels(&train_idx)?;
    let (test_labels, c2) = make_labels(&test_idx)?;
    let classes = c1.max(c2);
    let config = ProbeConfig {
        task,
        epochs,
        seed,
        ..ProbeConfig::new(task, state.config.n_layers)
    };
    let model = train_probe(&pick(&train_idx), &train_labels, classes, &config)?;
    let report = evaluate_probe(&model, &pick(&test_idx), &test_labels)?;

    let baseline_accuracy = match baseline_state {
        None => None,
        Some(base) => {
            let base_features = extract_features(base, sequences)?;
            let base_pick = |idx: &[usize]| -> Vec<c2v_core::LayerOutputs<f32>> {
                idx.iter().map(|&i| base_features[i].clone()).collect()
            };
            let base_config = ProbeConfig {
                task,
                layers: vec![0],
                epochs,
                lr: config.lr,
                seed,
            };
            let base_model = train_probe(&base_pick(&train_idx), &train_labels, classes, &base_config)?;
            Some(evaluate_probe(&base_model, &base_pick(&test_idx), &test_labels)?.accuracy)
        }
    };

    Ok(ProbeRow {
        task: task.as_str(),
        strategy: strategy.to_string(),
        seed,
        accuracy: report.accuracy,
        baseline_accuracy,
        alpha: report.alpha,
    })
}

fn run_probe(args: ProbeArgs) -> Result<()> {
    let data_dir = args.data_dir.clone();
    let resolve = |explicit: &Option<PathBuf>, name: &str| -> Option<PathBuf> {
        explicit
            .clone()
            .or_else(|| data_dir.as_ref().map(|d| d.join(name)))
    };
    let dataset_path = resolve(&args.dataset, "dataset.c2v")
        .ok_or_else(|| Error::InvalidConfig("no dataset given (use --data-dir or --dataset)".into()))?;
    let labels_path = resolve(&args.labels, "labels.txt")
        .ok_or_else(|| Error::InvalidConfig("no labels given (use --data-dir or --labels)".into()))?;
    let codec_path = resolve(&args.codec, "codec.c2c").filter(|p| p.exists());

    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let state = ckpt.to_encoder_state()?;
    let flat = FlatConfig::parse_text(&ckpt.config_text, "<checkpoint>")?;
    let strategy = flat.get("strategy").unwrap_or("unknown").to_string();

    let dataset = PackedDataset::load(&dataset_path)?;
    let ids = dataset.manifest().utterance_ids.clone();
    let sequences: Vec<_> = dataset
        .unpack_all()?
        .into_iter()
        .map(|(_, seq)| seq)
        .collect();
    let labels = CorpusLabels::load(&labels_path)?;

    // Raw-unit baseline: random-init encoder with codec-initialized
    // embeddings, probed at layer 0 only.
    let baseline_state = match &codec_path {
        None => None,
        Some(path) => {
            let codec = ToyCodec::load(path)?;
            let mut base_config = state.config.clone();
            base_config.seed = args.seed;
            let mut base = EncoderState::<f32>::init(base_config, c2v_core::HeadSpec::none())?;
            base.init_embeddings_from_codec(&codec.stages, args.seed)?;
            Some(base)
        }
    };

    let tasks: Vec<ProbeTask> = match args.task.as_str() {
        "both" => vec![ProbeTask::FramePhoneme, ProbeTask::UtteranceSpeaker],
        other => vec![ProbeTask::parse(other)?],
    };

    let mut rows = Vec::new();
    for task in tasks {
        rows.push(probe_one_task(
            &state,
            baseline_state.as_ref(),
            &sequences,
            &labels,
            &ids,
            task,
            &strategy,
            args.train_fraction,
            args.epochs,
            args.seed,
        )?);
    }

    let out_dir = args.out.unwrap_or_else(|| output_root().join("probe"));
    std::fs::create_dir_all(&out_dir)?;
    let mut table = String::from("# task strategy seed accuracy baseline_accuracy alpha\n");
    for row in &rows {
        let alpha: Vec<String> = row.alpha.iter().map(|a| format!("{a:.4}")).collect();
        let baseline = row
            .baseline_accuracy
            .map(|b| format!("{b:.4}"))
            .unwrap_or_else(|| "-".to_string());
        writeln!(
            table,
            "{} {} {} {:.4} {} {}",
            row.task,
            row.strategy,
            row.seed,
            row.accuracy,
            baseline,
            alpha.join(",")
        )
        .unwrap();
    }
    let results_path = out_dir.join("results.txt");
    std::fs::write(&results_path, &table)?;
    let mut inputs = vec![
        ("checkpoint".to_string(), args.checkpoint.clone()),
        ("dataset".to_string(), dataset_path.clone()),
        ("labels".to_string(), labels_path.clone()),
    ];
    if let Some(p) = &codec_path {
        inputs.push(("codec".to_string(), p.clone()));
    }
    let mut flat = FlatConfig::new();
    flat.set("task", &args.task);
    flat.set("train_fraction", args.train_fraction);
    flat.set("epochs", args.epochs);
    Provenance {
        command: "probe",
        config_hash: flat.sha256_hex(),
        seed: Some(args.seed),
        inputs,
    }
    .write(&out_dir)?;
    print!("{table}");
    println!("results: {}", results_path.display());
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let report = bench_throughput(&args.dataset, args.repetitions)?;
    if args.json {
        let value = serde_json::json!({
            "utterances": report.utterances,
            "total_frames": report.total_frames,
            "in_ram_frames_per_sec": report.in_ram_frames_per_sec,
            "streaming_frames_per_sec": report.streaming_frames_per_sec,
            "ratio": report.ratio,
            "checksums_equal": report.checksums_equal,
            "repetitions": report.repetitions,
            "reference_end_to_end_speedup_not_measured_here": "2.3x",
        });
        println!("{}", serde_json::to_string_pretty(&value).expect("json"));
    } else {
        print!("{}", report.render());
    }
    let out_dir = args.out.unwrap_or_else(|| output_root().join("bench"));
    Provenance {
        command: "bench",
        config_hash: FlatConfig::new().sha256_hex(),
        seed: None,
        inputs: vec![("dataset".to_string(), args.dataset.clone())],
    }
    .write(&out_dir)?;
    Ok(())
}

fn detect_magic(path: &Path) -> Result<[u8; 4]> {
    use std::io::Read;
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    Ok(magic)
}

fn run_inspect(args: InspectArgs) -> Result<()> {
    let magic = detect_magic(&args.path)?;
    match &magic {
        b"C2V1" => {
            let (manifest, _) = c2v_core::store::read_manifest(&args.path)?;
            let report = storage_report(&manifest);
            if args.json {
                let value = serde_json::json!({
                    "kind": "dataset",
                    "utterances": manifest.n_utterances(),
                    "n_codebooks": manifest.n_codebooks(),
                    "codebook_sizes": manifest.codebook_sizes,
                    "frame_rate_hz": manifest.frame_rate_hz,
                    "total_frames": report.total_frames,
                    "duration_seconds": report.duration_seconds,
                    "packed_bytes": report.packed_bytes,
                    "file_bytes": report.file_bytes,
                    "word16_bytes": report.word16_bytes,
                    "pcm16_equivalent_bytes": report.pcm16_equivalent_bytes,
                    "ratio": report.ratio,
                    "ratio_with_header": report.ratio_with_header,
                    "theoretical_bits_per_second": report.theoretical_bits_per_second,
                    "theoretical_bitrate_ratio": report.theoretical_bitrate_ratio(),
                });
                println!("{}", serde_json::to_string_pretty(&value).expect("json"));
            } else {
                println!("dataset container ({})", args.path.display());
                println!(
                    "utterances: {}  codebooks: {}  sizes: {:?}  rate: {} Hz",
                    manifest.n_utterances(),
                    manifest.n_codebooks(),
                    manifest.codebook_sizes,
                    manifest.frame_rate_hz
                );
                print!("{}", report.render());
                println!(
                    "theoretical bitrate ratio vs pcm16: {:.1}x",
                    report.theoretical_bitrate_ratio()
                );
            }
        }
        b"C2M1" => {
            let ckpt = Checkpoint::load(&args.path)?;
            let params: usize = ckpt
                .params
                .tensors()
                .iter()
                .map(|(_, t)| t.len())
                .sum();
            println!("checkpoint ({})", args.path.display());
            println!("step: {}", ckpt.step);
            println!("config hash: {}", ckpt.config_hash()?);
            println!("parameters: {params}");
            println!("heads: {:?}", ckpt.head_class_counts);
            println!("teacher section: {}", ckpt.teacher.is_some());
            if let Some(t) = &ckpt.teacher {
                println!(
                    "  clustered layers: {:?}  codebook size: {}  frozen: {}",
                    t.clustered_layers, t.codebook_size, t.frozen
                );
            }
        }
        b"C2T1" => {
            let store = c2v_core::TargetStore::load(&args.path)?;
            println!("target store ({})", args.path.display());
            println!(
                "strategy: {}  vocab: {}  utterances: {}",
                store.provenance.strategy,
                store.vocab,
                store.labels.len()
            );
            println!(
                "from checkpoint {} layer {} k {} seed {} sample_fraction {}",
                store.provenance.checkpoint_hash,
                store.provenance.layer,
                store.provenance.k,
                store.provenance.seed,
                store.provenance.sample_fraction
            );
        }
        b"C2C1" => {
            let codec = ToyCodec::load(&args.path)?;
            println!("codec ({})", args.path.display());
            println!(
                "stages: {}  codewords per stage: {}  dim: {}",
                codec.n_stages(),
                codec.codebook_size(),
                codec.dim()
            );
        }
        other => {
            return Err(Error::BadHeader(format!(
                "unrecognized magic {:?} in {}",
                other,
                args.path.display()
            )));
        }
    }
    Ok(())
}
