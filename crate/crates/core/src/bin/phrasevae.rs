//! Command-line entry point: dataset preparation, training, evaluation,
//! ablations and generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use phrasevae::corpus::cache::{ingest_directory, DatasetCache};
use phrasevae::corpus::synth::{synth_corpus, SynthOptions};
use phrasevae::corpus::{PhraseSample, PHRASE_STEPS, STEPS_PER_BAR};
use phrasevae::evaluation::{
    default_mode, disentanglement_probe, emit_curves, reconstruction_accuracy, run_ablations, CurveSeries,
};
use phrasevae::generation::{generate, write_pieces, ChordPolicy, GenRequest, Operation};
use phrasevae::model::{load_checkpoint, AnyModel};
use phrasevae::training::{run_pipeline, Ablation, Config, Dataset, Phase, PipelineOptions, RunRecord};
use phrasevae::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "phrasevae", version, about = "Long-term disentangled melody representations")]
struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted `key=value` override, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to the configured `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Record that outputs must be bit-reproducible (the pipeline is
    /// single-threaded and seeded either way).
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tokenize a MIDI directory (or a synthetic corpus) into a dataset cache.
    Prep {
        #[arg(long, required_unless_present = "synthetic")]
        midi_dir: Option<PathBuf>,
        #[arg(long)]
        chord_dir: Option<PathBuf>,
        /// Generate this many synthetic songs instead of reading MIDI.
        #[arg(long)]
        synthetic: Option<usize>,
        #[arg(long, default_value_t = 8)]
        synthetic_bars: usize,
        #[arg(long)]
        with_chords: bool,
    },
    /// Run one phase, or the whole pipeline.
    Train {
        #[arg(long)]
        phase: Option<String>,
        #[arg(long)]
        no_contrastive: bool,
        #[arg(long)]
        no_fixed: bool,
        /// Keep finished phases found in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Accuracy, transposition probe, or accuracy curves.
    Eval {
        #[arg(long, required_unless_present = "records")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Which::Acc)]
        which: Which,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Run directories (`name=dir`) whose records feed `--which curves`.
        #[arg(long)]
        records: Vec<String>,
    },
    /// Train and evaluate the ablation table.
    Ablate,
    /// Swap, interpolate or vary phrases from the dataset.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        op: Op,
        /// Source phrase as `song_id@bar_offset`, or an index into the split.
        #[arg(long = "phrase", required = true)]
        phrases: Vec<String>,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.25, 0.5, 0.75, 1.0])]
        weights: Vec<f64>,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
enum Which {
    Acc,
    Probe,
    Curves,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Op {
    Swap,
    Interpolate,
    Variate,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    args: Vec<String>,
    version: &'a str,
    config_hash: String,
    seed: u64,
    deterministic: bool,
    outputs: Vec<PathBuf>,
}

struct Ctx {
    config: Config,
    out: PathBuf,
    deterministic: bool,
}

impl Ctx {
    fn cache_path(&self) -> PathBuf {
        self.config.cache.clone().unwrap_or_else(|| self.out.join("dataset.cache"))
    }

    fn dataset(&self) -> Result<(DatasetCache, Dataset)> {
        let cache = DatasetCache::read(&self.cache_path())?;
        let data = Dataset::from_cache(&cache);
        Ok((cache, data))
    }

    fn write_manifest(&self, command: &str, outputs: Vec<PathBuf>) -> Result<()> {
        let manifest = Manifest {
            command,
            args: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            deterministic: self.deterministic,
            outputs,
        };
        let path = self.out.join(format!("{command}.manifest.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| io(&path, e))?;
        std::fs::write(self.out.join("config.toml"), self.config.to_toml()?).map_err(|e| io(&self.out, e))
    }
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(path.to_path_buf())
}

fn prep(
    ctx: &Ctx,
    midi_dir: Option<&Path>,
    chord_dir: Option<&Path>,
    synthetic: Option<usize>,
    synthetic_bars: usize,
    with_chords: bool,
) -> Result<Vec<PathBuf>> {
    let (songs, sources, report) = match synthetic {
        Some(n) => {
            let songs = synth_corpus(&SynthOptions {
                songs: n,
                bars: synthetic_bars,
                with_chords,
                seed: ctx.config.seed,
            })?;
            let sources = songs.iter().map(|s| format!("synthetic:{}", s.id)).collect();
            (songs, sources, Default::default())
        }
        None => {
            let dir = midi_dir.ok_or_else(|| Error::InvalidArgument("--midi-dir is required".into()))?;
            ingest_directory(dir, chord_dir)?
        }
    };
    if songs.is_empty() {
        return Err(Error::Ingest {
            path: midi_dir.map(Path::to_path_buf).unwrap_or_default(),
            reason: "no usable melodies".into(),
        });
    }
    let cache = DatasetCache::build(
        songs,
        sources,
        ctx.config.data.split_ratio,
        ctx.config.data.phrase_hop_bars,
        ctx.config.seed,
    )?;
    let path = ctx.cache_path();
    cache.write(&path)?;
    log::info!(
        "{} songs ({} train / {} test), {} phrases",
        cache.songs.len(),
        cache.header.split.train.len(),
        cache.header.split.test.len(),
        cache.header.windows.len()
    );
    Ok(vec![
        path,
        write(&ctx.out.join("split.json"), &serde_json::to_string_pretty(&cache.header.split)?)?,
        write(&ctx.out.join("ingest_report.json"), &serde_json::to_string_pretty(&report)?)?,
    ])
}

fn train(ctx: &Ctx, phase: Option<&str>, ablation: Ablation, resume: bool) -> Result<Vec<PathBuf>> {
    let phases = phase.map(|p| Phase::from_name(p).map(|p| vec![p])).transpose()?;
    let (_, data) = ctx.dataset()?;
    let result = run_pipeline(
        &ctx.config,
        &data,
        &PipelineOptions {
            out_dir: ctx.out.clone(),
            ablation,
            phases,
            resume,
            ..Default::default()
        },
    )?;
    Ok(result.checkpoints.into_values().collect())
}

fn split_windows(ctx: &Ctx, split: Split) -> Result<Vec<PhraseSample>> {
    let (cache, _) = ctx.dataset()?;
    cache.phrases(split == Split::Train)
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>, which: Which, split: Split, records: &[String]) -> Result<Vec<PathBuf>> {
    match which {
        Which::Curves => {
            let mut loaded = Vec::new();
            for spec in records {
                let (name, dir) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--records expects name=dir, got {spec:?}")))?;
                let recs: Vec<RunRecord> = Phase::ALL
                    .iter()
                    .filter_map(|&p| RunRecord::read(&RunRecord::path(Path::new(dir), p)).ok())
                    .collect();
                loaded.push((name.to_string(), recs));
            }
            let series: Vec<CurveSeries> = loaded
                .iter()
                .map(|(name, recs)| CurveSeries {
                    variant: name.clone(),
                    records: recs.iter().collect(),
                })
                .collect();
            Ok(vec![write(&ctx.out.join("curves.tsv"), &emit_curves(&series))?])
        }
        Which::Acc | Which::Probe => {
            let path = checkpoint.ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
            let (_, model) = load_checkpoint(path)?;
            let windows = match &model {
                // shorter flat models are scored on non-overlapping windows of their own length
                AnyModel::Flat(m) if m.steps() != PHRASE_STEPS => {
                    let (_, data) = ctx.dataset()?;
                    let bars = m.steps() / STEPS_PER_BAR;
                    data.windows(split == Split::Train, bars, bars)?.0
                }
                _ => split_windows(ctx, split)?,
            };
            if matches!(which, Which::Acc) {
                let acc = reconstruction_accuracy(&model, &windows, default_mode(&model))?;
                println!("recon_acc {:.4} rhythm_acc {:.4} ({} sequences)", acc.recon_acc, acc.rhythm_acc, acc.n_sequences);
                Ok(vec![write(&ctx.out.join("accuracy.json"), &serde_json::to_string_pretty(&acc)?)?])
            } else {
                let shifts: Vec<i32> = (1..=12).collect();
                let res = match &model {
                    AnyModel::Flat(m) => disentanglement_probe(m, &windows, &shifts)?,
                    AnyModel::Hier(m) => disentanglement_probe(m, &windows, &shifts)?,
                };
                print!("{}", res.to_tsv());
                Ok(vec![
                    write(&ctx.out.join("probe.tsv"), &res.to_tsv())?,
                    write(&ctx.out.join("probe.json"), &serde_json::to_string_pretty(&res)?)?,
                ])
            }
        }
    }
}

fn ablate(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let (_, data) = ctx.dataset()?;
    let report = run_ablations(&ctx.config, &data, &ctx.out)?;
    print!("{}", report.to_tsv());
    let series: Vec<CurveSeries> = report
        .runs
        .iter()
        .map(|(name, run)| CurveSeries {
            variant: name.clone(),
            records: run.ordered(),
        })
        .collect();
    Ok(vec![
        write(&ctx.out.join("ablation.tsv"), &report.to_tsv())?,
        write(&ctx.out.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?,
        write(&ctx.out.join("curves.tsv"), &emit_curves(&series))?,
    ])
}

fn pick_phrase(windows: &[PhraseSample], spec: &str) -> Result<PhraseSample> {
    let found = match spec.split_once('@') {
        Some((id, bar)) => {
            let bar: usize = bar
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad bar offset in {spec:?}")))?;
            windows.iter().find(|w| w.song_id == id && w.bar_offset == bar)
        }
        None => spec.parse::<usize>().ok().and_then(|i| windows.get(i)),
    };
    found
        .cloned()
        .ok_or_else(|| Error::InvalidArgument(format!("no phrase {spec:?} in the split")))
}

#[allow(clippy::too_many_arguments)]
fn generate_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    op: Op,
    specs: &[String],
    split: Split,
    weights: Vec<f64>,
    sigma: f64,
    samples: usize,
) -> Result<Vec<PathBuf>> {
    let (_, model) = load_checkpoint(checkpoint)?;
    let windows = split_windows(ctx, split)?;
    let phrases = specs.iter().map(|s| pick_phrase(&windows, s)).collect::<Result<Vec<_>>>()?;
    let request = GenRequest {
        operation: match op {
            Op::Swap => Operation::Swap,
            Op::Interpolate => Operation::Interpolate,
            Op::Variate => Operation::Variate,
        },
        weights,
        sigma,
        samples,
        seed: ctx.config.seed,
        chords: ChordPolicy::from_name(&ctx.config.generation.chord_source)?,
    };
    let pieces = generate(&model, &request, &phrases)?;
    let manifest = write_pieces(&pieces, &ctx.out, ctx.config.generation.bpm, &request, checkpoint, &phrases)?;
    Ok(manifest.files)
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let mut config = Config::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    let out = config.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let ctx = Ctx {
        config,
        out,
        deterministic: cli.deterministic,
    };
    let (name, outputs) = match &cli.command {
        Command::Prep {
            midi_dir,
            chord_dir,
            synthetic,
            synthetic_bars,
            with_chords,
        } => (
            "prep",
            prep(&ctx, midi_dir.as_deref(), chord_dir.as_deref(), *synthetic, *synthetic_bars, *with_chords)?,
        ),
        Command::Train {
            phase,
            no_contrastive,
            no_fixed,
            resume,
        } => (
            "train",
            train(
                &ctx,
                phase.as_deref(),
                Ablation {
                    no_contrastive: *no_contrastive,
                    no_fixed: *no_fixed,
                },
                *resume,
            )?,
        ),
        Command::Eval {
            checkpoint,
            which,
            split,
            records,
        } => ("eval", eval(&ctx, checkpoint.as_deref(), *which, *split, records)?),
        Command::Ablate => ("ablate", ablate(&ctx)?),
        Command::Generate {
            checkpoint,
            op,
            phrases,
            split,
            weights,
            sigma,
            samples,
        } => (
            "generate",
            generate_cmd(&ctx, checkpoint, *op, phrases, *split, weights.clone(), *sigma, *samples)?,
        ),
    };
    ctx.write_manifest(name, outputs)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
