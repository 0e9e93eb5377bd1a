//! Argument parsing and dispatch.
//!
//! Each stage subcommand accepts `--config <file.json>` holding the stage's
//! parameters; flags given on the command line replace the matching fields.
//! Relative paths in a config file resolve against the file's directory,
//! paths given as flags against the working directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result, EXIT_VALIDATION};
use crate::pipeline::{self, PipelineConfig, ReportNaming};
use crate::stages::StageConfig;

#[derive(Debug, Parser)]
#[command(name = "mixkit", version, about = "Corpus curation and training-mix planning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every randomized component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for stage reports.
    #[arg(long, global = true, env = "MIXKIT_REPORT_DIR")]
    pub report_dir: Option<PathBuf>,
    /// Print the merged configuration and exit without running.
    #[arg(long, global = true)]
    pub print_effective_config: bool,
    /// More log output (repeat for debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-(lang, source) size, document and token counts as CSV.
    Stats(StatsFlags),
    /// Heuristic quality rules.
    Filter(FilterFlags),
    /// Keep documents whose n-gram perplexity lies in a band.
    PplFilter(PplFilterFlags),
    /// Drop documents whose normalized text repeats.
    DedupExact(DedupExactFlags),
    /// MinHash/LSH near-duplicate removal.
    DedupFuzzy(DedupFuzzyFlags),
    /// Three-stage cleaning of sentence pairs.
    CleanParallel(CleanParallelFlags),
    /// Kneser-Ney n-gram language model.
    TrainLm(TrainLmFlags),
    /// Byte-fallback BPE tokenizer.
    TrainTokenizer(TrainTokenizerFlags),
    /// Tokens-per-word matrix across tokenizers and corpora.
    Fertility(FertilityFlags),
    /// Sampling ratios for a data mix.
    PlanMix(PlanMixFlags),
    /// Batch, compute, energy and parameter arithmetic.
    Budget(BudgetFlags),
    /// Joint scaling-law fit and language-weight trade-off.
    FitScaling(FitScalingFlags),
    /// Run a multi-stage pipeline config.
    Run(RunFlags),
}

fn abs_path(s: &str) -> std::result::Result<PathBuf, String> {
    if s.is_empty() {
        return Err("empty path".into());
    }
    Ok(pipeline::absolute(Path::new(s)))
}

fn named_path(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got {s:?}"))?;
    if name.is_empty() {
        return Err(format!("empty name in {s:?}"));
    }
    let path = if path == "@bytes" { PathBuf::from(path) } else { abs_path(path)? };
    Ok((name.to_string(), path))
}

fn as_map<S: Serializer>(v: &[(String, PathBuf)], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_map(v.iter().map(|(k, p)| (k, p)))
}

fn is_false(b: &bool) -> bool {
    !*b
}

macro_rules! flags {
    (
        $(#[$meta:meta])*
        $name:ident {
            $(
                $(#[$fmeta:meta])*
                $field:ident : $ty:ty
            ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Args, Serialize)]
        pub struct $name {
            /// Stage parameters as JSON; flags override its fields.
            #[arg(long)]
            #[serde(skip)]
            pub config: Option<PathBuf>,
            $(
                $(#[$fmeta])*
                pub $field: $ty,
            )*
        }
    };
}

flags!(StatsFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    /// Count tokens with this tokenizer instead of whitespace words.
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    tokenizer: Option<PathBuf>,
    /// Skip malformed records instead of failing.
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(FilterFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    /// Rule list (JSON).
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    rules: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    rejected: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    decisions: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(PplFilterFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    /// Language model file written by train-lm.
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    low: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    high: Option<f64>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    rejected: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(DedupExactFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(DedupFuzzyFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    num_perm: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    shingle_k: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    bands: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    /// Write the signature store here.
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    signatures: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(CleanParallelFlags {
    /// Pairs TSV: src, tgt, src_lang, tgt_lang, quality.
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    /// Exact duplicates only.
    #[arg(long, action = ArgAction::SetFalse)] #[serde(skip_serializing_if = "is_true")]
    no_fuzzy: bool,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    num_perm: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    bands: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    rows: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    shingle_k: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    fuzzy_threshold: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    length_ratio_min: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    length_ratio_max: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    min_chars: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    max_chars: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    quality_threshold: Option<f64>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    src_model: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    tgt_model: Option<PathBuf>,
});

fn is_true(b: &bool) -> bool {
    *b
}

flags!(TrainLmFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    order: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    min_count: Option<u64>,
    /// Fixed discount; estimated per order when omitted.
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    discount: Option<f64>,
    /// Pure continuation counts at the unigram level.
    #[arg(long, action = ArgAction::SetFalse)] #[serde(skip_serializing_if = "is_true")]
    no_unigram_floor: bool,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(TrainTokenizerFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    vocab_size: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    placeholders: Option<usize>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(FertilityFlags {
    /// NAME=PATH, repeatable; PATH may be @bytes.
    #[arg(long = "tokenizer", value_parser = named_path)]
    #[serde(rename = "tokenizers", serialize_with = "as_map", skip_serializing_if = "Vec::is_empty")]
    tokenizers: Vec<(String, PathBuf)>,
    /// NAME=PATH, repeatable.
    #[arg(long = "corpus", value_parser = named_path)]
    #[serde(rename = "corpora", serialize_with = "as_map", skip_serializing_if = "Vec::is_empty")]
    corpora: Vec<(String, PathBuf)>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    relative_output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "is_false")]
    skip_bad: bool,
});

flags!(PlanMixFlags {
    /// Mix specification (JSON).
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
});

flags!(BudgetFlags {
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    micro_batch: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    grad_accum: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    devices: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    tokens_total: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    mean_tflops: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    gpu_hours: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    energy_gpu_hours: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    tdp_watts: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    grid_gco2_per_kwh: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    pue: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    hidden: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    intermediate: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    heads: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    kv_heads: Option<u64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    chinchilla_params: Option<f64>,
});

flags!(FitScalingFlags {
    /// Observations CSV.
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<PathBuf>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    param_unit: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    fixed_c: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    max_iterations: Option<usize>,
    #[arg(long, value_parser = abs_path)] #[serde(skip_serializing_if = "Option::is_none")]
    tradeoff_output: Option<PathBuf>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    varied: Option<String>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    other: Option<String>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    tradeoff_params: Option<f64>,
    #[arg(long)] #[serde(skip_serializing_if = "Option::is_none")]
    grid_steps: Option<usize>,
});

#[derive(Debug, Args)]
pub struct RunFlags {
    /// Pipeline config (JSON).
    #[arg(long)]
    pub config: PathBuf,
}

/// Merges a stage's config file with its flags into a stage definition.
fn merge_stage(kind: &str, config: Option<&Path>, flags: Value) -> Result<(StageConfig, PathBuf)> {
    let (mut merged, base) = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let value: Value =
                serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            let Value::Object(map) = value else {
                return Err(CliError::validation(format!("{}: expected a JSON object", path.display())));
            };
            let base = pipeline::absolute(path.parent().unwrap_or(Path::new("")));
            (map, base)
        }
        None => (Map::new(), pipeline::absolute(Path::new("."))),
    };
    if let Value::Object(over) = flags {
        for (k, v) in over {
            let key = match k.as_str() {
                "no_fuzzy" => "fuzzy".to_string(),
                "no_unigram_floor" => "unigram_floor".to_string(),
                _ => k,
            };
            merged.insert(key, v);
        }
    }
    merged.insert("stage".into(), Value::String(kind.into()));
    let stage: StageConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::validation(format!("{kind}: {e}")))?;
    Ok((stage, base))
}

fn stage_flags(command: &Command) -> Option<(&'static str, Option<&Path>, Value)> {
    macro_rules! pack {
        ($kind:expr, $f:expr) => {
            Some(($kind, $f.config.as_deref(), serde_json::to_value($f).expect("flag serialization")))
        };
    }
    match command {
        Command::Stats(f) => pack!("stats", f),
        Command::Filter(f) => pack!("filter", f),
        Command::PplFilter(f) => pack!("ppl-filter", f),
        Command::DedupExact(f) => pack!("dedup-exact", f),
        Command::DedupFuzzy(f) => pack!("dedup-fuzzy", f),
        Command::CleanParallel(f) => pack!("clean-parallel", f),
        Command::TrainLm(f) => pack!("train-lm", f),
        Command::TrainTokenizer(f) => pack!("train-tokenizer", f),
        Command::Fertility(f) => pack!("fertility", f),
        Command::PlanMix(f) => pack!("plan-mix", f),
        Command::Budget(f) => pack!("budget", f),
        Command::FitScaling(f) => pack!("fit-scaling", f),
        Command::Run(_) => None,
    }
}

fn print_json(value: &Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json"));
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Run(run) = &cli.command {
        let (mut config, base) = PipelineConfig::load(&run.config)?;
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        if let Some(dir) = &cli.report_dir {
            config.report_dir = Some(pipeline::absolute(dir));
        }
        if cli.print_effective_config {
            print_json(&serde_json::to_value(&config).expect("json"));
            return Ok(());
        }
        let plan =
            pipeline::prepare(&config.stages, config.seed, &base, config.report_dir.as_deref(), ReportNaming::Indexed)?;
        pipeline::run_plan(&plan)?;
        log::info!("pipeline finished: {} stages", plan.stages.len());
        return Ok(());
    }

    let (kind, config, flags) = stage_flags(&cli.command).expect("stage subcommand");
    let (stage, base) = merge_stage(kind, config, flags)?;
    let seed = cli.seed.unwrap_or(0);
    if cli.print_effective_config {
        print_json(&json!({ "seed": seed, "stage": stage }));
        return Ok(());
    }
    let report_dir = cli.report_dir.as_deref().map(pipeline::absolute);
    let plan =
        pipeline::prepare(std::slice::from_ref(&stage), seed, &base, report_dir.as_deref(), ReportNaming::ByKind)?;
    pipeline::run_plan(&plan)?;
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
