//! `forumlm` command-line entry point.

mod config;

use std::error::Error as StdError;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use forumlm::annotation::{compute_results, plot_data_csv, read_answer_log, render_table, ReportOptions};
use forumlm::bpe::{train_bpe, Vocabulary, RECORD_TOKEN};
use forumlm::decode::{generate, parse_word_list, DecodeConfig, DecodeError};
use forumlm::exec::Execution;
use forumlm::format::{read_record_file, render_thread, write_record_file, RecordFormatter};
use forumlm::lm::{train_ngram, NGramModel};
use forumlm::study::{build_study, select_threads, Study, StudyError};
use forumlm::thread::{parse_thread_file, ForumThread};
use thiserror::Error;

use crate::config::{PipelineConfig, CONFIG_ENV};

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{module}: {source}")]
    Validation {
        module: &'static str,
        source: Box<dyn StdError + Send + Sync>,
    },
    #[error("{module}: {source}")]
    Runtime {
        module: &'static str,
        source: Box<dyn StdError + Send + Sync>,
    },
}

impl CliError {
    fn validation(module: &'static str) -> impl FnOnce(Box<dyn StdError + Send + Sync>) -> CliError {
        move |source| CliError::Validation { module, source }
    }

    fn runtime(module: &'static str) -> impl FnOnce(Box<dyn StdError + Send + Sync>) -> CliError {
        move |source| CliError::Runtime { module, source }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation { .. } => 2,
            CliError::Runtime { .. } => 3,
        }
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "forumlm", version, about = "Forum-thread language modelling pipeline")]
struct Cli {
    /// Pipeline config file (TOML)
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Run every stage on one thread
    #[arg(long, global = true)]
    sequential: bool,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Serialize threads into token-bounded training records
    Format(FormatArgs),
    /// Train a byte-level BPE vocabulary on rendered threads
    TrainBpe(TrainBpeArgs),
    /// Train an n-gram model on a record file
    TrainLm(TrainLmArgs),
    /// Continue a context with constrained beam sampling
    Generate(GenerateArgs),
    /// Select threads and build a blinded evaluation study
    BuildStudy(BuildStudyArgs),
    /// Serve the annotation API
    Serve(ServeArgs),
    /// Aggregate collected answers into the results table
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct FormatArgs {
    /// Threads, one JSON object per line
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Maximum tokens per record
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainBpeArgs {
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainLmArgs {
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Prompt text, used verbatim
    #[arg(long)]
    context: PathBuf,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// 0 disables n-gram blocking
    #[arg(long)]
    no_repeat_ngram: Option<usize>,
    /// Extra banned words, one per line
    #[arg(long)]
    banned_words: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BuildStudyArgs {
    /// Held-out threads to draw from
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Annotator-facing study file
    #[arg(long)]
    out: Option<PathBuf>,
    /// Provenance ledger; defaults next to the study file
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    study: Option<PathBuf>,
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Answer log, created if missing
    #[arg(long)]
    answers: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    /// Directory with the annotation UI bundle
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    study: Option<PathBuf>,
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    answers: Option<PathBuf>,
    /// Skip items that lack answers instead of failing
    #[arg(long)]
    partial: bool,
    /// Parenthesize full agreement in either direction
    #[arg(long)]
    agreement: bool,
    /// Write per-forum shares as CSV
    #[arg(long)]
    plot_data: Option<PathBuf>,
}

fn required(flag: Option<PathBuf>, config: &Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| CliError::Usage(format!("missing --{name} (or paths.{key} in the config file)")))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Validation {
        module: "io",
        source: format!("cannot read {}: {e}", path.display()).into(),
    })
}

fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime {
            module: "io",
            source: format!("cannot create {}: {e}", dir.display()).into(),
        })?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime {
        module: "io",
        source: format!("cannot write {}: {e}", path.display()).into(),
    })
}

fn load_threads(path: &Path) -> Result<Vec<ForumThread>> {
    let bytes = fs::read(path).map_err(|e| CliError::Validation {
        module: "io",
        source: format!("cannot read {}: {e}", path.display()).into(),
    })?;
    parse_thread_file(&bytes).map_err(|e| CliError::validation("thread_model")(e.into()))
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::from_file_str(&read_text(path)?).map_err(|e| CliError::validation("bpe_tokenizer")(e.into()))
}

fn load_model(path: &Path) -> Result<NGramModel> {
    NGramModel::from_file_str(&read_text(path)?).map_err(|e| CliError::validation("ngram_lm")(e.into()))
}

fn provenance_path(flag: Option<PathBuf>, cfg: &PipelineConfig, study: &Path) -> PathBuf {
    flag.or_else(|| cfg.paths.provenance.clone())
        .unwrap_or_else(|| study.with_extension("provenance.json"))
}

fn load_study(study: &Path, provenance: &Path) -> Result<Study> {
    Study::from_json(&read_text(study)?, &read_text(provenance)?)
        .map_err(|e| CliError::validation("study_builder")(e.into()))
}

fn banned_words(cfg: &PipelineConfig, extra: Option<&Path>) -> Result<Vec<String>> {
    let mut words = cfg.generation.banned_words.clone();
    for file in cfg.generation.banned_words_file.as_deref().into_iter().chain(extra) {
        words.extend(parse_word_list(&read_text(file)?));
    }
    Ok(words)
}

fn decode_error(e: DecodeError) -> CliError {
    match e {
        DecodeError::DeadEnd { .. } => CliError::runtime("decoder")(e.into()),
        _ => CliError::validation("decoder")(e.into()),
    }
}

fn cmd_format(cfg: &PipelineConfig, exec: Execution, a: FormatArgs) -> Result<()> {
    let input = required(a.input, &cfg.paths.threads, "in", "threads")?;
    let vocab = load_vocab(&required(a.vocab, &cfg.paths.vocab, "vocab", "vocab")?)?;
    let out = required(a.out, &cfg.paths.records, "out", "records")?;
    let budget = a.budget.unwrap_or(cfg.format.budget);
    if budget == 0 {
        return Err(CliError::Usage("--budget must be positive".into()));
    }
    let threads = load_threads(&input)?;
    let formatted = RecordFormatter::new(&vocab, budget).format_corpus(&threads, exec);
    for w in &formatted.warnings {
        log::warn!("record_formatter: {w:?}");
    }
    write_text(&out, &write_record_file(&formatted.records))?;
    eprintln!(
        "{} records from {} threads ({} warnings)",
        formatted.records.len(),
        threads.len(),
        formatted.warnings.len()
    );
    Ok(())
}

fn cmd_train_bpe(cfg: &PipelineConfig, exec: Execution, a: TrainBpeArgs) -> Result<()> {
    let input = required(a.input, &cfg.paths.threads, "in", "threads")?;
    let out = required(a.out, &cfg.paths.vocab, "out", "vocab")?;
    let threads = load_threads(&input)?;
    let corpus: Vec<String> = exec.map(&threads, render_thread);
    let size = a.vocab_size.unwrap_or(cfg.bpe.vocab_size);
    let trained = train_bpe(&corpus, size, exec).map_err(|e| CliError::validation("bpe_tokenizer")(e.into()))?;
    write_text(&out, &trained.vocab.to_file_string())?;
    eprintln!(
        "vocabulary of {} tokens{}",
        trained.vocab.size(),
        if trained.stopped_early {
            " (corpus exhausted early)"
        } else {
            ""
        }
    );
    Ok(())
}

fn cmd_train_lm(cfg: &PipelineConfig, exec: Execution, a: TrainLmArgs) -> Result<()> {
    let records_path = required(a.records, &cfg.paths.records, "records", "records")?;
    let vocab = load_vocab(&required(a.vocab, &cfg.paths.vocab, "vocab", "vocab")?)?;
    let out = required(a.out, &cfg.paths.model, "out", "model")?;
    let records = read_record_file(&read_text(&records_path)?);
    let encoded = exec.map(&records, |r| vocab.encode(r));
    let model = train_ngram(
        &encoded,
        vocab.size(),
        a.order.unwrap_or(cfg.lm.order),
        a.alpha.unwrap_or(cfg.lm.alpha),
        Some(RECORD_TOKEN),
    )
    .map_err(|e| CliError::validation("ngram_lm")(e.into()))?;
    write_text(&out, &model.to_file_string())?;
    eprintln!("order-{} model over {} records", model.order(), records.len());
    Ok(())
}

fn decode_config(cfg: &PipelineConfig, seed: Option<u64>) -> DecodeConfig {
    let mut d = cfg.decode.clone();
    if let Some(s) = seed.or(cfg.seed) {
        d.rng_seed = s;
    }
    d
}

fn cmd_generate(cfg: &PipelineConfig, a: GenerateArgs) -> Result<()> {
    let model = load_model(&required(a.model, &cfg.paths.model, "model", "model")?)?;
    let vocab = load_vocab(&required(a.vocab, &cfg.paths.vocab, "vocab", "vocab")?)?;
    let context = read_text(&a.context)?;
    let mut d = decode_config(cfg, a.seed);
    if let Some(b) = a.beam {
        d.beam_size = b;
    }
    if let Some(k) = a.top_k {
        d.top_k = k;
    }
    if let Some(n) = a.max_new_tokens {
        d.max_new_tokens = n;
    }
    if let Some(n) = a.no_repeat_ngram {
        d.no_repeat_ngram = n;
    }
    d.ban_words(&vocab, &banned_words(cfg, a.banned_words.as_deref())?, false);
    let response = generate(&model, &vocab, &vocab.encode(&context), &d).map_err(decode_error)?;
    println!("{}", response.text);
    println!("log-likelihood: {:.6}", response.joint_log_prob);
    log::info!("{} tokens, finished by {:?}", response.steps, response.finish);
    Ok(())
}

fn study_error(e: StudyError) -> CliError {
    match e {
        StudyError::ReservesExhausted { .. } => CliError::runtime("study_builder")(e.into()),
        _ => CliError::validation("study_builder")(e.into()),
    }
}

fn cmd_build_study(cfg: &PipelineConfig, exec: Execution, a: BuildStudyArgs) -> Result<()> {
    let pool = load_threads(&required(a.pool, &cfg.paths.pool, "pool", "pool")?)?;
    let vocab = load_vocab(&required(a.vocab, &cfg.paths.vocab, "vocab", "vocab")?)?;
    let model = load_model(&required(a.model, &cfg.paths.model, "model", "model")?)?;
    let out = required(a.out, &cfg.paths.study, "out", "study")?;
    let provenance = provenance_path(a.provenance, cfg, &out);
    let seed = a.seed.or(cfg.seed);
    let mut study_cfg = cfg.study.clone();
    if let Some(s) = seed {
        study_cfg.rng_seed = s;
    }
    let mut decode = decode_config(cfg, seed);
    decode.ban_words(&vocab, &banned_words(cfg, None)?, false);
    let selection = select_threads(&pool, &vocab, &study_cfg, exec).map_err(study_error)?;
    let study = build_study(&selection, &model, &vocab, &decode, &study_cfg, exec).map_err(study_error)?;
    write_text(&out, &study.study_json())?;
    write_text(&provenance, &study.ledger_json())?;
    eprintln!(
        "{}: {} items in {} groups, {} replacements",
        study.id(),
        study.items().len(),
        study.file.groups.len(),
        study.ledger.replacements.len()
    );
    Ok(())
}

fn cmd_serve(cfg: &PipelineConfig, a: ServeArgs) -> Result<()> {
    let study_path = required(a.study, &cfg.paths.study, "study", "study")?;
    let provenance = provenance_path(a.provenance, cfg, &study_path);
    let answers = required(a.answers, &cfg.paths.answers, "answers", "answers")?;
    let addr: SocketAddr = a
        .addr
        .unwrap_or_else(|| cfg.serve.addr.clone())
        .parse()
        .map_err(|e| CliError::Usage(format!("bad --addr: {e}")))?;
    let ui_dir = a.ui_dir.or_else(|| cfg.serve.ui_dir.clone());
    let study = Arc::new(load_study(&study_path, &provenance)?);
    let store = forumlm::annotation::AnswerStore::open(study.clone(), &answers)
        .map_err(|e| CliError::validation("annotation_service")(e.into()))?;
    eprintln!("serving {} at http://{addr}/api/study/{}/", study.id(), study.id());
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime("annotation_service")(e.into()))?;
    runtime
        .block_on(forumlm_server::serve(
            addr,
            forumlm_server::AppState::new([store]),
            ui_dir,
        ))
        .map_err(|e| CliError::runtime("annotation_service")(e.into()))
}

fn cmd_score(cfg: &PipelineConfig, a: ScoreArgs) -> Result<()> {
    let study_path = required(a.study, &cfg.paths.study, "study", "study")?;
    let provenance = provenance_path(a.provenance, cfg, &study_path);
    let answers_path = required(a.answers, &cfg.paths.answers, "answers", "answers")?;
    let study = load_study(&study_path, &provenance)?;
    let log = read_answer_log(&answers_path).map_err(|e| CliError::validation("annotation_service")(e.into()))?;
    let results = compute_results(&study, &log.answers, !a.partial)
        .map_err(|e| CliError::validation("annotation_service")(e.into()))?;
    let opts = ReportOptions {
        agreement_in_parens: a.agreement,
        ..ReportOptions::default()
    };
    print!("{}", render_table(&results, &opts));
    if let Some(p) = a.plot_data.or_else(|| cfg.paths.plot_data.clone()) {
        write_text(&p, &plot_data_csv(&results))?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let base = path.parent().unwrap_or(Path::new("."));
    PipelineConfig::parse(&read_text(path)?, base).map_err(|e| CliError::validation("config")(e.into()))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::Format(a) => cmd_format(&cfg, exec, a),
        Command::TrainBpe(a) => cmd_train_bpe(&cfg, exec, a),
        Command::TrainLm(a) => cmd_train_lm(&cfg, exec, a),
        Command::Generate(a) => cmd_generate(&cfg, a),
        Command::BuildStudy(a) => cmd_build_study(&cfg, exec, a),
        Command::Serve(a) => cmd_serve(&cfg, a),
        Command::Score(a) => cmd_score(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("run `forumlm --help` for usage");
            }
            ExitCode::from(e.exit_code())
        }
    }
}
