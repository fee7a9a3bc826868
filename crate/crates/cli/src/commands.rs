use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use fastpitch::corpus::{
    load_dataset, preprocess, read_manifest, toy_model_config, toy_train_config, write_toy_corpus, AlignmentSource,
    PreprocessConfig, TOY_TRANSCRIPTS,
};
use fastpitch::dsp::wav::write_wav;
use fastpitch::dsp::{MelConfig, PitchConfig};
use fastpitch::inference::{benchmark, mel_difference, synthesize, synthesize_from, PitchTransform};
use fastpitch::model::{Checkpoint, FastPitch, ModelConfig, Speaker};
use fastpitch::prosody::AlignmentMode;
use fastpitch::ranking::{rank, read_match_log, render_table};
use fastpitch::tensor_file::{read_tensor, write_tensor, Dtype, Sidecar};
use fastpitch::text::Vocabulary;
use fastpitch::training::{read_trace_csv, write_trace_csv, OptimizerState, TrainConfig, Trainer};
use fastpitch_server::ServerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{
    BenchArgs, Cli, Command, PreprocessArgs, RankArgs, ServeArgs, SynthArgs, SyntheticAlignment, ToyCorpusArgs,
    TrainArgs,
};

const TRACE_FILE: &str = "trace.csv";
const FINAL_CHECKPOINT: &str = "checkpoint";
const TRAIN_CONFIG_FILE: &str = "train_config.json";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        ensure!(jobs > 0, "--jobs must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::ToyCorpus(args) => toy_corpus(args, seed.unwrap_or(0)),
        Command::Preprocess(args) => preprocess_cmd(args, seed.unwrap_or(0)),
        Command::Train(args) => train(args, seed),
        Command::Synth(args) => synth(args),
        Command::Bench(args) => bench(args),
        Command::Rank(args) => rank_cmd(args),
        Command::Serve(args) => serve(args),
    }
}

/// Reads a TOML or JSON file, chosen by extension.
fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("invalid config {}", path.display())),
        Some("json") => serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display())),
        _ => bail!("{}: config files must end in .toml or .json", path.display()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn toy_corpus(args: ToyCorpusArgs, seed: u64) -> Result<()> {
    let manifest = write_toy_corpus(&args.out, args.count, seed, &MelConfig::default())?;
    println!("wrote {} utterances; manifest {}", args.count, manifest.display());
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreprocessFile {
    #[serde(default)]
    mel: MelConfig,
    #[serde(default)]
    pitch: PitchConfig,
}

fn preprocess_cmd(args: PreprocessArgs, seed: u64) -> Result<()> {
    let file: PreprocessFile = match &args.config {
        Some(path) => read_config(path)?,
        None => PreprocessFile::default(),
    };
    let alignment = match (args.alignments, args.synthetic) {
        (Some(dir), _) => AlignmentSource::Attention(dir),
        (None, Some(SyntheticAlignment::Uniform)) => AlignmentSource::Synthetic(AlignmentMode::Uniform),
        (None, Some(SyntheticAlignment::Random)) => AlignmentSource::Synthetic(AlignmentMode::Random),
        (None, None) => bail!("pass --alignments or --synthetic"),
    };
    let cfg = PreprocessConfig {
        mel: file.mel,
        pitch: file.pitch,
        alignment,
        seed,
    };
    let entries = read_manifest(&args.manifest)?;
    let summary = preprocess(&entries, &Vocabulary::default(), &cfg, &args.out)?;
    println!(
        "utterances {}  skipped {}  frames {}  voiced fraction {:.3}  pitch mean {:.2} Hz  std {:.2} Hz",
        summary.utterances,
        summary.skipped,
        summary.frames,
        summary.voiced_fraction,
        summary.stats.mean_hz,
        summary.stats.std_hz
    );
    Ok(())
}

fn save_checkpoint(dir: &Path, trainer: &Trainer, template: &Checkpoint) -> Result<()> {
    let checkpoint = Checkpoint {
        model: trainer.model.clone(),
        step: trainer.step(),
        ..template.clone()
    };
    checkpoint.save(dir)?;
    trainer.optimizer.save(dir)?;
    write_json(&dir.join(TRAIN_CONFIG_FILE), &trainer.config)
}

fn train(args: TrainArgs, seed: Option<u64>) -> Result<()> {
    let mut train_cfg: TrainConfig = match (&args.config, args.toy) {
        (Some(path), _) => read_config(path)?,
        (None, true) => toy_train_config(),
        (None, false) => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        train_cfg.seed = seed;
    }
    if let Some(steps) = args.max_steps {
        train_cfg.max_steps = steps;
    }
    train_cfg.validate()?;

    let resumed = match &args.resume {
        Some(dir) => {
            if args.model_config.is_some() || args.toy {
                log::warn!("resuming: the architecture comes from {}", dir.display());
            }
            let checkpoint = Checkpoint::load(dir)?;
            let optimizer = OptimizerState::load(dir)?;
            Some((checkpoint, optimizer))
        }
        None => None,
    };
    let mut model_cfg: ModelConfig = match (&resumed, &args.model_config, args.toy) {
        (Some((ckpt, _)), _, _) => ckpt.model.config().clone(),
        (None, Some(path), _) => read_config(path)?,
        (None, None, true) => toy_model_config(),
        (None, None, false) => ModelConfig::default(),
    };
    let data = load_dataset(&args.data, model_cfg.pitch_values_per_symbol)
        .with_context(|| format!("loading preprocessed data from {}", args.data.display()))?;
    let speakers = data
        .metadata
        .utterances
        .iter()
        .map(|u| u.speaker_id + 1)
        .max()
        .unwrap_or(1);
    if resumed.is_none() {
        model_cfg.vocab_size = data.metadata.vocabulary.len();
        model_cfg.n_mels = data.metadata.mel.n_mels;
        model_cfg.n_speakers = model_cfg.n_speakers.max(speakers);
    }

    let (mut trainer, template) = match resumed {
        Some((checkpoint, optimizer)) => {
            ensure!(
                checkpoint.vocabulary == data.metadata.vocabulary && checkpoint.audio == data.metadata.mel,
                "checkpoint vocabulary or audio settings differ from the data"
            );
            ensure!(
                speakers <= model_cfg.n_speakers,
                "data has {speakers} speakers but the checkpoint supports {}",
                model_cfg.n_speakers
            );
            let trainer = Trainer::resume(checkpoint.model.clone(), optimizer, train_cfg.clone())?;
            (trainer, checkpoint)
        }
        None => {
            let model = FastPitch::new(model_cfg, train_cfg.seed)?;
            let template = Checkpoint {
                model: model.clone(),
                pitch_stats: data.stats,
                vocabulary: data.metadata.vocabulary.clone(),
                audio: data.metadata.mel.clone(),
                step: 0,
            };
            (Trainer::new(model, train_cfg.clone())?, template)
        }
    };

    let start = trainer.step();
    let remaining = train_cfg.max_steps.saturating_sub(start);
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let trace_path = args.out.join(TRACE_FILE);
    let mut trace = if start > 0 && trace_path.exists() {
        let mut rows = read_trace_csv(&trace_path)?;
        rows.retain(|r| r.step <= start);
        rows
    } else {
        Vec::new()
    };
    trainer.config.max_steps = remaining;
    let every = train_cfg.checkpoint_every;
    let out = args.out.clone();
    let new_rows = trainer.run(&data.examples, |row, t| {
        if row.step % 100 == 0 || row.step == train_cfg.max_steps {
            log::info!(
                "step {}  lr {:.3e}  mel {:.4}  pitch {:.4}  dur {:.4}",
                row.step,
                row.lr,
                row.mel_loss,
                row.pitch_loss,
                row.dur_loss
            );
        }
        if every > 0 && row.step % every == 0 {
            save_checkpoint(&out.join(format!("checkpoint-{:06}", row.step)), t, &template)
                .map_err(|e| fastpitch::Error::Config(format!("saving checkpoint: {e:#}")))?;
        }
        Ok(())
    })?;
    trainer.config.max_steps = train_cfg.max_steps;
    trace.extend(new_rows);
    write_trace_csv(&trace_path, &trace)?;
    save_checkpoint(&args.out.join(FINAL_CHECKPOINT), &trainer, &template)?;
    match trace.last() {
        Some(last) => println!(
            "step {}  mel {:.4}  pitch {:.4}  dur {:.4}  → {}",
            last.step,
            last.mel_loss,
            last.pitch_loss,
            last.dur_loss,
            args.out.join(FINAL_CHECKPOINT).display()
        ),
        None => println!("no steps to run; checkpoint at step {start}"),
    }
    Ok(())
}

/// Per-symbol report written next to the tensors.
#[derive(Serialize)]
struct PitchReport<'a> {
    text: &'a str,
    symbols: Vec<String>,
    durations: &'a [usize],
    predicted_pitch_hz: &'a [Option<f64>],
    pitch_hz: &'a [Option<f64>],
}

fn transforms_from(args: &SynthArgs) -> Result<Vec<PitchTransform>> {
    let mut chosen = Vec::new();
    if let Some(v) = args.shift_hz {
        chosen.push(("--shift-hz", PitchTransform::ShiftHz(v)));
    }
    if let Some(v) = args.shift_std {
        chosen.push(("--shift-std", PitchTransform::ShiftStd(v)));
    }
    if let Some(v) = args.scale {
        chosen.push(("--scale", PitchTransform::Scale(v)));
    }
    if args.invert {
        chosen.push(("--invert", PitchTransform::Invert));
    }
    if args.flatten {
        chosen.push(("--flatten", PitchTransform::Flatten));
    }
    if chosen.len() > 1 {
        let names: Vec<&str> = chosen.iter().map(|(n, _)| *n).collect();
        bail!("conflicting pitch transforms {}; pass at most one", names.join(", "));
    }
    Ok(chosen.into_iter().map(|(_, t)| t).collect())
}

fn synth(args: SynthArgs) -> Result<()> {
    let transforms = transforms_from(&args)?;
    let text = match (&args.text, &args.text_file) {
        (Some(t), _) => t.clone(),
        (None, Some(path)) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .trim()
            .to_string(),
        (None, None) => bail!("pass --text or --text-file"),
    };
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let speaker = Speaker::Id(args.speaker);
    let base_pitch = match &args.pitch_in {
        Some(stem) => Some(read_tensor(stem)?.0),
        None => None,
    };
    let out = synthesize_from(
        &checkpoint,
        &text,
        speaker,
        base_pitch.as_ref(),
        &transforms,
        args.wav.then_some(args.griffin_lim_iters),
    )?;

    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let audio = &checkpoint.audio;
    let mel_sidecar =
        Sidecar::new(out.mel.frames.shape().to_vec(), Dtype::F64).with_audio(audio.sample_rate, audio.hop_length);
    write_tensor(&args.out.join("mel"), &out.mel.frames, Some(mel_sidecar.clone()))?;
    write_tensor(&args.out.join("pitch"), &out.pitch, None)?;
    write_json(
        &args.out.join("symbols.json"),
        &PitchReport {
            text: &text,
            symbols: out.symbols.iter().map(char::to_string).collect(),
            durations: &out.durations,
            predicted_pitch_hz: &out.predicted_pitch_hz,
            pitch_hz: &out.pitch_hz,
        },
    )?;
    if let Some(clip) = &out.audio {
        write_wav(&args.out.join("audio.wav"), clip)?;
    }
    if args.diff {
        let baseline = synthesize(&checkpoint, &text, speaker, &[], None)?;
        let diff = mel_difference(&out.mel.frames, &baseline.mel.frames)?;
        write_tensor(&args.out.join("mel_diff"), &diff, Some(mel_sidecar))?;
    }
    println!(
        "{} symbols, {} frames ({:.2} s) → {}",
        out.symbols.len(),
        out.mel.n_frames(),
        out.mel.n_frames() as f64 * audio.frame_seconds(),
        args.out.display()
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let texts: Vec<String> = match &args.text_file {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect(),
        None => TOY_TRANSCRIPTS.iter().map(|s| s.to_string()).collect(),
    };
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let report = benchmark(&checkpoint, &texts, args.batch_size, args.repeats)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &args.out {
        write_json(path, &report)?;
    }
    Ok(())
}

fn rank_cmd(args: RankArgs) -> Result<()> {
    let log = read_match_log(&args.log)?;
    let ranking = rank(&log, args.period_size, args.tau)?;
    print!("{}", render_table(&ranking));
    if let Some(path) = &args.json {
        write_json(path, &ranking)?;
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = match (args.config, args.checkpoint, args.data_dir) {
        (Some(path), _, _) => ServerConfig::from_file(&path)?,
        (None, Some(checkpoint), Some(data_dir)) => ServerConfig::new(checkpoint, data_dir),
        _ => bail!("pass --config, or --checkpoint with --data-dir"),
    };
    let mut config = config.with_env_port(|key| std::env::var(key).ok())?;
    if let Some(port) = args.port {
        config.port = port;
    }
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime.block_on(fastpitch_server::serve(config))?;
    Ok(())
}
