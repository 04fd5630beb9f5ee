//! The `melmix` command line: data generation, fitting, sampling, filtering,
//! metrics, vocoding and the end-to-end smoothness study.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::filters::{sharpen, smooth, var_laplacian};
use crate::formats::{load_dataset, load_spectrogram, save_dataset, save_spectrogram};
use crate::grid::Grid;
use crate::sampling::{mean_field, sample, SampleConfig, SampleMode};
use crate::spectral::{
    griffin_lim, mel_filterbank, mel_spectrogram, read_wav, write_wav, GriffinLimConfig, MelConfig,
    MelInversion, MelInverter, MelSpectrogram, StftConfig,
};
use crate::synth::{generate, generating_field, ConditionedDataset, Record, SynthSpec};
use crate::trainer::{fit, sample_seed, Head, ModelBundle, TrainConfig};
use crate::tvcgmm::{chain_targets, nll_batch, ChainTargets, TvcGmmField};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "MELMIX_THREADS";

/// Frames per patch when `study --wav` cuts an utterance into records.
pub const STUDY_PATCH_FRAMES: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "melmix", version, about = "TVC-GMM modelling of mel-spectrograms")]
pub struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multimodal dataset (TVDS).
    Gen(GenArgs),
    /// Fit per-condition models to a dataset.
    Fit(FitArgs),
    /// Draw a spectrogram from a fitted model.
    Sample(SampleArgs),
    /// Smooth or sharpen a spectrogram.
    Filter(FilterArgs),
    /// Print the variance of the Laplacian of a spectrogram.
    Varl(VarlArgs),
    /// Reconstruct audio from a log-mel spectrogram with Griffin-Lim.
    Vocode(VocodeArgs),
    /// Log-mel analysis of a WAV file.
    Analyze(AnalyzeArgs),
    /// Print the log-spectral distance between two spectrograms.
    Lsd(LsdArgs),
    /// Fit mse and TVC-GMM models, sample every mode and tabulate Var_L, NLL and LSD.
    Study(StudyArgs),
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct SpecSource {
    /// JSON synthetic spec.
    #[arg(long, group = "source")]
    pub spec: Option<PathBuf>,
    /// Built-in 4-condition bimodal spec.
    #[arg(long, group = "source")]
    pub default: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub source: SpecSource,
    #[arg(long)]
    pub out: PathBuf,
    /// Records per condition.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "tvcgmm")]
    pub head: Head,
    /// Mixture components per bin (default 2).
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Initial learning rate (head default when omitted).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Final learning rate as a fraction of the initial one.
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub condition: u32,
    #[arg(long, default_value = "naive")]
    pub mode: SampleMode,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FilterOp {
    Smooth,
    Sharpen,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub op: FilterOp,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    pub strength: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VarlArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct AudioArgs {
    #[arg(long, default_value_t = 22050)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 1024)]
    pub fft_size: usize,
    #[arg(long, default_value_t = 256)]
    pub hop_size: usize,
    #[arg(long, default_value_t = 1024)]
    pub win_size: usize,
    #[arg(long, default_value_t = 80)]
    pub n_mels: usize,
    #[arg(long, default_value_t = 0.0)]
    pub f_min: f64,
    #[arg(long, default_value_t = 8000.0)]
    pub f_max: f64,
}

impl AudioArgs {
    pub fn stft(&self) -> StftConfig {
        StftConfig {
            fft_size: self.fft_size,
            hop_size: self.hop_size,
            win_size: self.win_size,
        }
    }

    pub fn mel(&self) -> MelConfig {
        MelConfig {
            n_mels: self.n_mels,
            f_min: self.f_min,
            f_max: self.f_max,
            sample_rate: self.sample_rate,
            ..MelConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct VocodeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.99)]
    pub momentum: f64,
    /// Invert the mel filterbank by NNLS with this many iterations instead
    /// of the clamped pseudo-inverse.
    #[arg(long)]
    pub nnls: Option<usize>,
    #[command(flatten)]
    pub audio: AudioArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub audio: AudioArgs,
}

#[derive(Debug, Args)]
pub struct LsdArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
#[group(id = "input", required = true, multiple = false)]
pub struct StudyInput {
    #[arg(long, group = "input")]
    pub data: Option<PathBuf>,
    /// Analyse a WAV file and use its 16-frame patches as one condition.
    #[arg(long, group = "input")]
    pub wav: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub input: StudyInput,
    #[arg(long)]
    pub out: PathBuf,
    /// Optimisation steps per model.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    /// Sampled spectrograms per (model, mode, condition).
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[command(flatten)]
    pub audio: AudioArgs,
}

/// Root-mean-square difference of two log-mel spectrograms.
pub fn log_spectral_distance(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::domain(format!(
            "spectrograms differ in shape: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (x, y) = (a.values().as_slice(), b.values().as_slice());
    let sum: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
    Ok((sum / x.len() as f64).sqrt())
}

/// Mel inversion followed by Griffin-Lim.
pub fn vocode(
    mel: &MelSpectrogram,
    audio: &AudioArgs,
    gl: &GriffinLimConfig,
    inversion: MelInversion,
) -> Result<crate::spectral::GriffinLimOutput> {
    let mel_cfg = audio.mel();
    if mel.bins() != mel_cfg.n_mels {
        return Err(Error::domain(format!(
            "spectrogram has {} mel bins, expected {}",
            mel.bins(),
            mel_cfg.n_mels
        )));
    }
    let inverter = MelInverter::new(mel_filterbank(&mel_cfg, audio.fft_size)?, inversion)?;
    let magnitude = inverter.invert(mel)?;
    griffin_lim(&magnitude, &audio.stft(), gl, audio.sample_rate)
}

fn parse_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let spec: SynthSpec = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    spec.validate()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    Ok(spec)
}

fn cmd_gen(args: &GenArgs, seed: Option<u64>) -> Result<()> {
    let mut spec = match &args.source.spec {
        Some(path) => parse_spec(path)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate(&spec, args.n)?;
    save_dataset(&args.out, &data)?;
    eprintln!(
        "wrote {} records ({} conditions) to {}",
        data.len(),
        spec.n_conditions(),
        args.out.display()
    );
    Ok(())
}

fn train_config(head: Head, k: Option<usize>, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        k: k.unwrap_or(2),
        steps,
        seed,
        ..TrainConfig::for_head(head)
    }
}

fn cmd_fit(args: &FitArgs, seed: u64) -> Result<()> {
    if args.head == Head::Mse && args.k.is_some() {
        eprintln!("warning: --k is ignored by the mse head");
    }
    let data = load_dataset(&args.data)?;
    let mut cfg = train_config(args.head, args.k, args.steps, seed);
    cfg.log_every = args.log_every;
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(decay) = args.lr_decay {
        cfg.lr_decay = decay;
    }
    let bundle = fit(&data, &cfg)?;
    bundle.save(&args.out)?;
    for (c, loss) in bundle.conditions.iter().zip(&bundle.final_losses) {
        eprintln!("condition {c}: final loss {loss:.6}");
    }
    Ok(())
}

fn cmd_sample(args: &SampleArgs, seed: u64) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let field = bundle.field(args.condition)?;
    let cfg = SampleConfig {
        mode: args.mode,
        seed,
        temperature: args.temperature,
    };
    save_spectrogram(&args.out, &sample(field, &cfg)?)
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let spec = load_spectrogram(&args.input)?;
    let out = match args.op {
        FilterOp::Smooth => smooth(&spec, args.sigma)?,
        FilterOp::Sharpen => sharpen(&spec, args.strength)?,
    };
    save_spectrogram(&args.out, &out)
}

fn cmd_vocode(args: &VocodeArgs) -> Result<f64> {
    let mel = load_spectrogram(&args.input)?;
    let gl = GriffinLimConfig {
        n_iter: args.iters,
        momentum: args.momentum,
    };
    let inversion = match args.nnls {
        Some(iterations) => MelInversion::Nnls { iterations },
        None => MelInversion::ClampedPinv,
    };
    let out = vocode(&mel, &args.audio, &gl, inversion)?;
    write_wav(&args.out, &out.audio)?;
    Ok(out.convergence)
}

fn analyze(path: &Path, audio: &AudioArgs) -> Result<MelSpectrogram> {
    let wav = read_wav(path)?;
    let mut audio = audio.clone();
    audio.sample_rate = wav.sample_rate;
    audio.f_max = audio.f_max.min(wav.sample_rate as f64 / 2.0);
    mel_spectrogram(&wav, &audio.stft(), &audio.mel())
}

/// One line of the study report; empty cells are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub model: String,
    pub mode: String,
    pub condition: u32,
    pub var_l: f64,
    pub nll: Option<f64>,
    pub lsd: f64,
}

fn mean_lsd(spec: &MelSpectrogram, records: &[&MelSpectrogram]) -> Result<f64> {
    let mut total = 0.0;
    for r in records {
        total += log_spectral_distance(spec, r)?;
    }
    Ok(total / records.len() as f64)
}

fn model_rows(
    name: &str,
    bundle: &ModelBundle,
    data: &ConditionedDataset,
    samples: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for (&condition, field) in bundle.conditions.iter().zip(&bundle.fields) {
        let records: Vec<&MelSpectrogram> = data.for_condition(condition).collect();
        let nll = match bundle.config.head {
            Head::Tvcgmm => {
                let batch: Vec<ChainTargets> =
                    records.iter().map(|s| chain_targets(s)).collect::<Result<_>>()?;
                Some(nll_batch(field, &batch)?)
            }
            Head::Mse => None,
        };
        for mode in [SampleMode::Mean, SampleMode::Naive, SampleMode::Conditional] {
            let draws: Vec<MelSpectrogram> = if mode == SampleMode::Mean {
                vec![mean_field(field)]
            } else {
                (0..samples.max(1))
                    .map(|j| sample(field, &SampleConfig::new(mode, sample_seed(seed, j))))
                    .collect::<Result<_>>()?
            };
            let (mut var_l, mut lsd) = (0.0, 0.0);
            for d in &draws {
                var_l += var_laplacian(d)?;
                lsd += mean_lsd(d, &records)?;
            }
            let n = draws.len() as f64;
            rows.push(StudyRow {
                model: name.to_string(),
                mode: mode.to_string(),
                condition,
                var_l: var_l / n,
                nll,
                lsd: lsd / n,
            });
        }
    }
    Ok(rows)
}

fn ground_truth_rows(data: &ConditionedDataset) -> Result<Vec<StudyRow>> {
    let mut rows = Vec::new();
    for (index, condition) in data.conditions().into_iter().enumerate() {
        let records: Vec<&MelSpectrogram> = data.for_condition(condition).collect();
        let mut var_l = 0.0;
        for r in &records {
            var_l += var_laplacian(r)?;
        }
        let mut lsd = 0.0;
        if records.len() > 1 {
            for (i, a) in records.iter().enumerate() {
                let mut sum = 0.0;
                for (j, b) in records.iter().enumerate() {
                    if i != j {
                        sum += log_spectral_distance(a, b)?;
                    }
                }
                lsd += sum / (records.len() - 1) as f64;
            }
            lsd /= records.len() as f64;
        }
        let nll = match &data.spec {
            Some(spec) if spec.n_conditions() == data.conditions().len() => {
                let field: TvcGmmField = generating_field(spec, index)?;
                let batch: Vec<ChainTargets> =
                    records.iter().map(|s| chain_targets(s)).collect::<Result<_>>()?;
                Some(nll_batch(&field, &batch)?)
            }
            _ => None,
        };
        rows.push(StudyRow {
            model: "ground-truth".to_string(),
            mode: "data".to_string(),
            condition,
            var_l: var_l / records.len() as f64,
            nll,
            lsd,
        });
    }
    Ok(rows)
}

fn patches(mel: &MelSpectrogram) -> Result<ConditionedDataset> {
    let n = mel.frames() / STUDY_PATCH_FRAMES;
    if n == 0 {
        return Err(Error::domain(format!(
            "audio yields {} frames, need at least {STUDY_PATCH_FRAMES}",
            mel.frames()
        )));
    }
    let records = (0..n)
        .map(|p| {
            let grid = Grid::from_fn(STUDY_PATCH_FRAMES, mel.bins(), |t, f| {
                mel.get(p * STUDY_PATCH_FRAMES + t, f)
            });
            Ok(Record {
                condition: 0,
                spec: MelSpectrogram::new(grid)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ConditionedDataset { records, spec: None })
}

/// Runs the full study and returns its rows: three models × three modes per
/// condition, followed by one ground-truth row per condition.
pub fn study(data: &ConditionedDataset, steps: usize, samples: usize, seed: u64) -> Result<Vec<StudyRow>> {
    let models = [
        ("mse", train_config(Head::Mse, None, steps, seed)),
        ("tvcgmm-k1", train_config(Head::Tvcgmm, Some(1), steps, seed)),
        ("tvcgmm-k5", train_config(Head::Tvcgmm, Some(5), steps, seed)),
    ];
    let mut rows = Vec::new();
    for (name, cfg) in models {
        eprintln!("fitting {name}");
        let bundle = fit(data, &cfg)?;
        rows.extend(model_rows(name, &bundle, data, samples, seed)?);
    }
    rows.extend(ground_truth_rows(data)?);
    Ok(rows)
}

pub fn write_study_csv(rows: &[StudyRow], out: impl Write) -> Result<()> {
    let err = |e: csv::Error| Error::format(format!("study csv: {e}"));
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "mode", "condition", "var_l", "nll", "lsd"])
        .map_err(err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.mode.clone(),
            r.condition.to_string(),
            format!("{:.6}", r.var_l),
            r.nll.map(|v| format!("{v:.6}")).unwrap_or_default(),
            format!("{:.6}", r.lsd),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::format(format!("study csv: {e}")))?;
    Ok(())
}

fn cmd_study(args: &StudyArgs, seed: u64) -> Result<()> {
    let data = match (&args.input.data, &args.input.wav) {
        (Some(path), _) => load_dataset(path)?,
        (None, Some(path)) => patches(&analyze(path, &args.audio)?)?,
        (None, None) => return Err(Error::config("study needs --data or --wav")),
    };
    let rows = study(&data, args.steps, args.samples, seed)?;
    let mut buf = Vec::new();
    write_study_csv(&rows, &mut buf)?;
    fs::write(&args.out, buf).map_err(|e| Error::io(&args.out, e))
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    // A pool may already exist when the library is driven from tests.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Executes a parsed command. Data goes to files or standard output.
pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Gen(args) => cmd_gen(args, cli.seed),
        Command::Fit(args) => cmd_fit(args, seed),
        Command::Sample(args) => cmd_sample(args, seed),
        Command::Filter(args) => cmd_filter(args),
        Command::Varl(args) => {
            println!("{:.6}", var_laplacian(&load_spectrogram(&args.input)?)?);
            Ok(())
        }
        Command::Vocode(args) => {
            println!("{:.6}", cmd_vocode(args)?);
            Ok(())
        }
        Command::Analyze(args) => save_spectrogram(&args.out, &analyze(&args.input, &args.audio)?),
        Command::Lsd(args) => {
            let a = load_spectrogram(&args.a)?;
            let b = load_spectrogram(&args.b)?;
            println!("{:.6}", log_spectral_distance(&a, &b)?);
            Ok(())
        }
        Command::Study(args) => cmd_study(args, seed),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
