//! Command-line pipeline: synthetic corpus generation, vocabulary
//! construction, training, evaluation, attention export and parameter
//! sweeps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 internal
//! invariant violation.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};

use tempovec::corpus::{self, Corpus, Vocabulary};
use tempovec::eval::{self, EvalOptions};
use tempovec::model::{
    read_embeddings, write_attention_csv, write_embeddings, AttentionProfile, EmbeddingSet,
    ModelParams, VectorKind,
};
use tempovec::synthgen::{self, profile_concentration, profile_mass, SynthConfig};
use tempovec::trainer::{self, TrainConfig, TrainError, TrainMode};

enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Internal(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "{msg}"),
            Failure::Data(err) | Failure::Internal(err) => write!(f, "{err:#}"),
        }
    }
}

fn data<E: Into<anyhow::Error>>(err: E) -> Failure {
    Failure::Data(err.into())
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn open_reader(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(anyhow!("cannot open {}: {e}", path.display())))
}

fn create_writer(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(anyhow!("cannot create {}: {e}", path.display())))
}

/// Output paths are checked before any long-running work starts.
fn validate_output_path(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        None => Ok(()),
        Some(parent) if parent.as_os_str().is_empty() || parent.is_dir() => Ok(()),
        Some(parent) => Err(usage(format!(
            "output directory {} does not exist",
            parent.display()
        ))),
    }
}

#[derive(Parser)]
#[command(
    name = "tempovec",
    version,
    about = "Embeddings of event codes with learned soft temporal scopes",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted clusters and temporal profiles
    GenSynth(GenSynthArgs),
    /// Build a vocabulary file from an event corpus
    BuildVocab(BuildVocabArgs),
    /// Train embeddings (attention model or CBOW baseline)
    Train(TrainArgs),
    /// Score embeddings against cluster/neighbour label files
    Eval(EvalArgs),
    /// Summarize an attention CSV into per-code concentration columns
    ExportAttention(ExportAttentionArgs),
    /// Repeat train+eval over a list of gamma or scope values
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Mce,
    Cbow,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Vectors {
    Input,
    Output,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Embedding dimension d
    #[arg(long, default_value_t = 100)]
    dim: usize,
    /// Temporal scope S in time units
    #[arg(long, default_value_t = 20)]
    scope: usize,
    /// Context threshold: max context occurrences per target
    #[arg(long, default_value_t = 60)]
    gamma: usize,
    /// Negative samples per target
    #[arg(long, default_value_t = 5)]
    negative: usize,
    /// Starting learning rate
    #[arg(long, default_value_t = 0.025)]
    alpha: f64,
    /// Training epochs
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Discard codes occurring fewer than this many times
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    /// Frequency-subsampling rejection threshold
    #[arg(long, default_value_t = 1e-4)]
    sample: f64,
    /// Days per time unit
    #[arg(long, default_value_t = 7)]
    time_unit: u32,
    /// Worker threads (runs are bit-reproducible only with 1)
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Training objective
    #[arg(long, value_enum, default_value_t = Mode::Mce)]
    mode: Mode,
    /// Keep attention scores frozen at zero (reduces mce to the baseline)
    #[arg(long)]
    freeze_attention: bool,
    /// Shuffle entity order each epoch
    #[arg(long)]
    shuffle: bool,
}

impl TrainOpts {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            scope: self.scope,
            gamma: self.gamma,
            negatives: self.negative,
            alpha: self.alpha,
            epochs: self.epochs,
            min_count: self.min_count,
            sample_threshold: self.sample,
            time_unit_days: self.time_unit,
            workers: self.threads,
            seed: self.seed,
            mode: match self.mode {
                Mode::Mce => TrainMode::Mce,
                Mode::Cbow => TrainMode::Cbow,
            },
            freeze_attention: self.freeze_attention,
            shuffle: self.shuffle,
        }
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// Output directory for events.tsv, clusters.tsv, neighbors.tsv and
    /// manifest.json
    #[arg(long, default_value = "synth")]
    out_dir: PathBuf,
    /// Number of planted groups
    #[arg(long, default_value_t = 10)]
    groups: usize,
    /// Codes per group
    #[arg(long, default_value_t = 20)]
    codes_per_group: usize,
    /// Number of entities
    #[arg(long, default_value_t = 2000)]
    entities: usize,
    /// Poisson mean of episodes per entity
    #[arg(long, default_value_t = 5.0)]
    episodes: f64,
    /// Horizon in time units
    #[arg(long, default_value_t = 52)]
    horizon: u32,
    /// Probability of a background code per (entity, unit)
    #[arg(long, default_value_t = 0.1)]
    noise_rate: f64,
    /// Size of the background code pool
    #[arg(long, default_value_t = 50)]
    noise_codes: usize,
    /// Probability a unit is silenced per entity (visit gaps)
    #[arg(long, default_value_t = 0.0)]
    gap_rate: f64,
    /// Days per time unit in emitted day stamps
    #[arg(long, default_value_t = 7)]
    time_unit: u32,
    /// RNG seed
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Event corpus file (entity<TAB>day<TAB>code)
    #[arg(long)]
    input: PathBuf,
    /// Vocabulary output path
    #[arg(long)]
    output: PathBuf,
    /// Discard codes occurring fewer than this many times
    #[arg(long, default_value_t = 5)]
    min_count: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Event corpus file (entity<TAB>day<TAB>code)
    #[arg(long)]
    input: PathBuf,
    /// Pre-built vocabulary file; by default one is built from the corpus
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Embeddings output path
    #[arg(long)]
    output: PathBuf,
    /// Attention CSV path [default: <output>.attention.csv]
    #[arg(long)]
    attention: Option<PathBuf>,
    /// Training report JSON path [default: <output>.report.json]
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the vocabulary here
    #[arg(long)]
    save_vocab: Option<PathBuf>,
    /// Which embedding matrix to export
    #[arg(long, value_enum, default_value_t = Vectors::Input)]
    vectors: Vectors,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalArgs {
    /// Embeddings file as written by `train`
    #[arg(long)]
    embeddings: PathBuf,
    /// Cluster ground truth (code<TAB>label)
    #[arg(long)]
    clusters: PathBuf,
    /// Neighbour ground truth (code<TAB>label)
    #[arg(long)]
    neighbors: PathBuf,
    /// Number of k-means clusters [default: number of distinct labels]
    #[arg(long)]
    k: Option<usize>,
    /// k-means restarts
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// k-means iteration cap
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    /// RNG seed for k-means
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Metrics JSON path; prints to stdout when omitted
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ExportAttentionArgs {
    /// Attention CSV as written by `train`
    #[arg(long)]
    profiles: PathBuf,
    /// Concentration window in time units
    #[arg(long, default_value_t = 1)]
    window: usize,
    /// Summary CSV path; prints to stdout when omitted
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Gamma,
    Scope,
}

#[derive(Args)]
struct SweepArgs {
    /// Event corpus file
    #[arg(long)]
    input: PathBuf,
    /// Cluster ground truth (code<TAB>label)
    #[arg(long)]
    clusters: PathBuf,
    /// Neighbour ground truth (code<TAB>label)
    #[arg(long)]
    neighbors: PathBuf,
    /// Hyperparameter to sweep
    #[arg(long, value_enum)]
    param: SweepParam,
    /// Comma-separated list of values, e.g. 10,20,30
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    /// Sweep results CSV path
    #[arg(long)]
    output: PathBuf,
    /// Number of k-means clusters [default: number of distinct labels]
    #[arg(long)]
    k: Option<usize>,
    /// k-means restarts
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    #[command(flatten)]
    opts: TrainOpts,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = u8::from(err.use_stderr());
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenSynth(args) => run_gen_synth(args),
        Command::BuildVocab(args) => run_build_vocab(args),
        Command::Train(args) => run_train(args),
        Command::Eval(args) => run_eval(args),
        Command::ExportAttention(args) => run_export_attention(args),
        Command::Sweep(args) => run_sweep(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}

fn run_gen_synth(args: GenSynthArgs) -> Result<(), Failure> {
    let config = SynthConfig {
        n_groups: args.groups,
        codes_per_group: args.codes_per_group,
        n_entities: args.entities,
        episodes_per_entity: args.episodes,
        horizon_units: args.horizon,
        noise_rate: args.noise_rate,
        noise_codes: args.noise_codes,
        gap_rate: args.gap_rate,
        time_unit_days: args.time_unit,
        seed: args.seed,
    };
    if config.horizon_units < 1 {
        return Err(usage("--horizon must be at least 1"));
    }
    let corpus = synthgen::generate(&config);
    fs::create_dir_all(&args.out_dir).map_err(data)?;
    corpus
        .write_corpus(create_writer(&args.out_dir.join("events.tsv"))?)
        .map_err(data)?;
    corpus
        .write_cluster_truth(create_writer(&args.out_dir.join("clusters.tsv"))?)
        .map_err(data)?;
    corpus
        .write_neighbor_truth(create_writer(&args.out_dir.join("neighbors.tsv"))?)
        .map_err(data)?;
    corpus
        .write_manifest(create_writer(&args.out_dir.join("manifest.json"))?)
        .map_err(data)?;
    eprintln!(
        "generated {} events over {} entities ({} unique codes) into {}",
        corpus.manifest.stats.events,
        corpus.manifest.stats.entities,
        corpus.manifest.stats.unique_codes,
        args.out_dir.display()
    );
    Ok(())
}

fn run_build_vocab(args: BuildVocabArgs) -> Result<(), Failure> {
    validate_output_path(&args.output)?;
    let parsed = corpus::parse_events(open_reader(&args.input)?).map_err(data)?;
    let corpus = corpus::build_vocab(parsed, args.min_count).map_err(data)?;
    corpus
        .vocab
        .write_to(create_writer(&args.output)?)
        .map_err(data)?;
    eprintln!(
        "vocabulary: {} codes, {} occurrences",
        corpus.vocab.len(),
        corpus.vocab.total_count()
    );
    Ok(())
}

fn load_corpus(input: &Path, vocab_path: Option<&Path>, min_count: u64) -> Result<Corpus, Failure> {
    let parsed = corpus::parse_events(open_reader(input)?).map_err(data)?;
    match vocab_path {
        Some(path) => {
            let vocab = Vocabulary::read_from(open_reader(path)?).map_err(data)?;
            Ok(corpus::encode_with_vocab(parsed, vocab))
        }
        None => corpus::build_vocab(parsed, min_count).map_err(data),
    }
}

fn train_failure(err: TrainError) -> Failure {
    match err {
        TrainError::InvalidConfig(msg) => usage(msg),
        other => data(other),
    }
}

fn embedding_set(params: &ModelParams<f32>, vocab: &Vocabulary) -> EmbeddingSet {
    EmbeddingSet::new(
        vocab.codes().to_vec(),
        params.dim(),
        params.input_vectors().to_vec(),
    )
}

fn run_train(args: TrainArgs) -> Result<(), Failure> {
    let config = args.opts.to_config();
    config.validate().map_err(train_failure)?;
    let attention_path = args
        .attention
        .clone()
        .unwrap_or_else(|| suffixed(&args.output, ".attention.csv"));
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| suffixed(&args.output, ".report.json"));
    for path in [
        Some(&args.output),
        Some(&attention_path),
        Some(&report_path),
    ]
    .into_iter()
    .flatten()
    .chain(args.save_vocab.as_ref())
    {
        validate_output_path(path)?;
    }
    let corpus = load_corpus(&args.input, args.vocab.as_deref(), config.min_count)?;
    eprintln!(
        "corpus: {} entities, {} events, {} codes",
        corpus.records.len(),
        corpus.event_count(),
        corpus.vocab.len()
    );

    let out = trainer::train(&corpus, &config).map_err(train_failure)?;
    if !out.params.all_finite() {
        return Err(Failure::Internal(anyhow!(
            "training produced non-finite parameters"
        )));
    }
    eprintln!(
        "trained: {} steps over {} epochs in {:.2}s (mean loss {:.4} -> {:.4})",
        out.report.steps,
        out.report.epochs,
        out.report.wall_seconds,
        out.report.mean_loss_per_epoch.first().unwrap_or(&f64::NAN),
        out.report.mean_loss_per_epoch.last().unwrap_or(&f64::NAN),
    );

    let kind = match args.vectors {
        Vectors::Input => VectorKind::Input,
        Vectors::Output => VectorKind::Output,
    };
    write_embeddings(
        &out.params,
        &corpus.vocab,
        kind,
        create_writer(&args.output)?,
    )
    .map_err(data)?;
    write_attention_csv(&out.params, &corpus.vocab, create_writer(&attention_path)?)
        .map_err(data)?;
    let mut report_writer = create_writer(&report_path)?;
    serde_json::to_writer_pretty(&mut report_writer, &out.report).map_err(data)?;
    writeln!(report_writer).map_err(data)?;

    if let Some(path) = &args.save_vocab {
        corpus.vocab.write_to(create_writer(path)?).map_err(data)?;
    }
    eprintln!(
        "wrote {} and {}",
        args.output.display(),
        attention_path.display()
    );
    Ok(())
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(suffix);
    PathBuf::from(os)
}

fn run_eval(args: EvalArgs) -> Result<(), Failure> {
    if let Some(path) = &args.output {
        validate_output_path(path)?;
    }
    let embeddings = read_embeddings(open_reader(&args.embeddings)?).map_err(data)?;
    let truth = eval::load_ground_truth(
        open_reader(&args.clusters)?,
        open_reader(&args.neighbors)?,
        &embeddings.codes,
    )
    .map_err(data)?;
    if truth.dropped > 0 {
        eprintln!(
            "warning: {} labeled codes missing from the embeddings",
            truth.dropped
        );
    }
    let opts = EvalOptions {
        k: args.k,
        restarts: args.restarts,
        max_iters: args.max_iters,
        seed: args.seed,
    };
    let metrics = eval::evaluate(&embeddings, &truth, &opts).map_err(data)?;
    if !(0.0..=1.0).contains(&metrics.nmi) || !(0.0..=1.0).contains(&metrics.p_at_1) {
        return Err(Failure::Internal(anyhow!("metric out of [0, 1] range")));
    }
    let rendered = serde_json::to_string_pretty(&metrics).map_err(data)?;
    match &args.output {
        Some(path) => {
            let mut w = create_writer(path)?;
            writeln!(w, "{rendered}").map_err(data)?;
        }
        None => println!("{rendered}"),
    }
    Ok(())
}

fn read_attention_profiles(path: &Path) -> Result<(Vec<String>, Vec<AttentionProfile>), Failure> {
    let reader = open_reader(path)?;
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(data)?
        .ok_or_else(|| Failure::Data(anyhow!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 2 || columns[0] != "code" || !columns.len().is_multiple_of(2) {
        return Err(Failure::Data(anyhow!(
            "{}: malformed attention header",
            path.display()
        )));
    }
    let slots = columns.len() - 1;
    let mut codes = Vec::new();
    let mut profiles = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(data)?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let code = fields.next().unwrap_or_default().to_string();
        let weights: Result<Vec<f64>, _> = fields.map(|f| f.parse::<f64>()).collect();
        let weights = weights
            .map_err(|e| Failure::Data(anyhow!("{} line {}: {e}", path.display(), i + 2)))?;
        if weights.len() != slots {
            return Err(Failure::Data(anyhow!(
                "{} line {}: expected {} weights, found {}",
                path.display(),
                i + 2,
                slots,
                weights.len()
            )));
        }
        profiles.push(AttentionProfile {
            code: codes.len() as u32,
            weights,
        });
        codes.push(code);
    }
    Ok((codes, profiles))
}

fn run_export_attention(args: ExportAttentionArgs) -> Result<(), Failure> {
    if let Some(path) = &args.output {
        validate_output_path(path)?;
    }
    let (codes, profiles) = read_attention_profiles(&args.profiles)?;
    let scope = profiles
        .first()
        .map(|p| (p.weights.len() - 1) / 2)
        .ok_or_else(|| Failure::Data(anyhow!("no profiles in input")))?;
    if args.window > scope {
        return Err(usage(format!(
            "--window {} exceeds the profile scope {scope}",
            args.window
        )));
    }
    let mut out = String::new();
    out.push_str("code,window_mass,past_mass,future_mass\n");
    for (code, profile) in codes.iter().zip(&profiles) {
        let window_mass = profile_concentration(profile, args.window);
        let (past, future) = if scope >= 1 {
            (
                profile_mass(profile, -(scope as i32), -1),
                profile_mass(profile, 1, scope as i32),
            )
        } else {
            (0.0, 0.0)
        };
        out.push_str(&format!("{code},{window_mass},{past},{future}\n"));
    }
    match &args.output {
        Some(path) => {
            let mut w = create_writer(path)?;
            w.write_all(out.as_bytes()).map_err(data)?;
        }
        None => print!("{out}"),
    }
    Ok(())
}

fn run_sweep(args: SweepArgs) -> Result<(), Failure> {
    if args.values.is_empty() {
        return Err(usage("--values must list at least one setting"));
    }
    validate_output_path(&args.output)?;
    let base = args.opts.to_config();
    let corpus = load_corpus(&args.input, None, base.min_count)?;
    let truth = eval::load_ground_truth(
        open_reader(&args.clusters)?,
        open_reader(&args.neighbors)?,
        corpus.vocab.codes(),
    )
    .map_err(data)?;

    let mut w = create_writer(&args.output)?;
    writeln!(w, "param,value,nmi,p_at_1,n_clustered,n_nns_eligible,steps").map_err(data)?;
    for &value in &args.values {
        let mut config = base.clone();
        let name = match args.param {
            SweepParam::Gamma => {
                config.gamma = value;
                "gamma"
            }
            SweepParam::Scope => {
                config.scope = value;
                "scope"
            }
        };
        eprintln!("sweep: {name} = {value}");
        let out = trainer::train(&corpus, &config).map_err(train_failure)?;
        let embeddings = embedding_set(&out.params, &corpus.vocab);
        let opts = EvalOptions {
            k: args.k,
            restarts: args.restarts,
            max_iters: 100,
            seed: base.seed,
        };
        let metrics = eval::evaluate(&embeddings, &truth, &opts).map_err(data)?;
        writeln!(
            w,
            "{name},{value},{},{},{},{},{}",
            metrics.nmi,
            metrics.p_at_1,
            metrics.n_clustered,
            metrics.n_nns_eligible,
            out.report.steps
        )
        .map_err(data)?;
    }
    eprintln!("wrote {}", args.output.display());
    Ok(())
}
