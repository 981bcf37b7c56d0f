//! File-based pipeline commands behind the `klite` binary.
//!
//! Every option can come from a flat `key = value` config file
//! (`--config`), from a `KLITE_<KEY>` environment variable, or from a
//! `--key` flag, in increasing order of precedence. Each command prints a
//! single-line JSON summary on success. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgMatches, Command};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::encoder::Checkpoint;
use crate::error::Error;
use crate::evaluation::{
    breakdown_csv, build_class_embeddings, concept_overlap, config_digest, dataset_stats, image_embeddings,
    linear_probe, zero_shot_classify, BranchMode, EvalReport,
};
use crate::grounding::{
    category_texts, classify_scores, encode_phrases_parallel, encode_regions, ground_scores, load_categories,
    load_regions, region_accuracy, train_grounding, FocalParams, GroundTrainConfig,
};
use crate::encoder::LossSpec;
use crate::knowledge::{knowledge_coverage, KnowledgeCache, KnowledgeSource, KnowledgeStore};
use crate::prompt::{CaptionScheme, PromptTemplate};
use crate::query::{build_frequency_table, construct_query, FrequencyTable, Lexicon, TextKind};
use crate::synth::{run_bench, SynthConfig};
use crate::trainer::{
    assign_labels, augment_dataset, load_dataset, save_dataset, trace_csv, train, AugmentConfig, Mode, OptimizerKind,
    TrainConfig, Triplet,
};

pub const ENV_PREFIX: &str = "KLITE_";

const SNAPSHOT_KEYS: &[&str] = &["wordnet", "wiktionary", "source"];
const MODEL_KEYS: &[&str] = &[
    "batch_size",
    "epochs",
    "lr",
    "optimizer",
    "seed",
    "mode",
    "embed_dim",
    "text_layers",
    "heads",
    "hidden",
    "max_tokens",
    "adapter_bottleneck",
    "oov_buckets",
];

/// Keys that name files which must exist before a command runs.
const INPUT_PATHS: &[&str] = &[
    "dataset",
    "wordnet",
    "wiktionary",
    "lexicon",
    "freq",
    "queries",
    "base",
    "checkpoint",
    "classes",
    "templates",
    "pretrain",
    "regions",
    "categories",
];

struct CommandSpec {
    name: &'static str,
    about: &'static str,
    keys: &'static [&'static [&'static str]],
}

const COMMANDS: &[CommandSpec] = &[
    CommandSpec {
        name: "augment",
        about: "Attach retrieved knowledge to every text of a dataset",
        keys: &[
            &["dataset", "output", "lexicon", "freq", "scheme", "template", "keep_vanilla", "max_tokens"],
            SNAPSHOT_KEYS,
        ],
    },
    CommandSpec {
        name: "stats",
        about: "Concept and vocabulary statistics of a dataset",
        keys: &[&["dataset", "lexicon", "freq", "min_freq", "output"]],
    },
    CommandSpec {
        name: "coverage",
        about: "Fraction of queries with non-empty knowledge",
        keys: &[&["queries", "output"], SNAPSHOT_KEYS],
    },
    CommandSpec {
        name: "train",
        about: "Contrastive pretraining on a triplet dataset",
        keys: &[&["dataset", "output", "trace", "base"], MODEL_KEYS],
    },
    CommandSpec {
        name: "eval-zeroshot",
        about: "Zero-shot classification with class-name embeddings",
        keys: &[
            &[
                "checkpoint",
                "dataset",
                "classes",
                "template",
                "templates",
                "branch_mode",
                "pretrain",
                "report",
                "breakdown",
                "name",
            ],
            SNAPSHOT_KEYS,
        ],
    },
    CommandSpec {
        name: "eval-probe",
        about: "Few-shot linear probe on frozen image features",
        keys: &[&["checkpoint", "dataset", "shots", "seed", "report"]],
    },
    CommandSpec {
        name: "ground-train",
        about: "Train the region classification head with focal loss",
        keys: &[
            &[
                "checkpoint",
                "regions",
                "categories",
                "output",
                "trace",
                "alpha",
                "gamma",
                "epochs",
                "lr",
                "optimizer",
                "seed",
                "use_adapters",
            ],
            SNAPSHOT_KEYS,
        ],
    },
    CommandSpec {
        name: "ground-eval",
        about: "Classify regions against category texts",
        keys: &[&["checkpoint", "regions", "categories", "output", "use_adapters"], SNAPSHOT_KEYS],
    },
    CommandSpec {
        name: "bench-synth",
        about: "Knowledge transfer benchmark on a generated toy world",
        keys: &[&["seed", "seeds", "epochs", "empty_knowledge", "output"]],
    },
];

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => CliError::Usage(m),
            other => CliError::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn command_keys(spec: &CommandSpec) -> Vec<&'static str> {
    spec.keys.iter().flat_map(|k| k.iter().copied()).collect()
}

fn all_keys() -> BTreeSet<&'static str> {
    COMMANDS.iter().flat_map(command_keys).collect()
}

fn build_cli() -> Command {
    let mut cmd = Command::new("klite")
        .about("Knowledge-augmented contrastive pretraining pipeline")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key = value configuration file"),
        );
    for spec in COMMANDS {
        let mut sub = Command::new(spec.name).about(spec.about);
        for key in command_keys(spec) {
            sub = sub.arg(Arg::new(key).long(flag(key)).value_name("VALUE"));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Resolved key/value options for one command.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn require(&self, key: &str) -> CliResult<&str> {
        self.get(key)
            .ok_or_else(|| CliError::Usage(format!("missing required option --{}", flag(key))))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn require_path(&self, key: &str) -> CliResult<PathBuf> {
        self.require(key).map(PathBuf::from)
    }

    fn parse<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Usage(format!("invalid value '{v}' for --{}: {e}", flag(key))))
            })
            .transpose()
    }

    fn parse_or<T: FromStr>(&self, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }
}

/// Parse `key = value` lines; `#` starts a comment line.
pub fn parse_config_file(body: &str, origin: &Path) -> Result<BTreeMap<String, String>, Error> {
    let known = all_keys();
    let mut out = BTreeMap::new();
    for (i, raw) in body.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: "expected key = value".into(),
            });
        };
        let key = k.trim().replace('-', "_");
        if !known.contains(key.as_str()) {
            return Err(Error::Config(format!(
                "{}:{}: unknown key '{key}'",
                origin.display(),
                i + 1
            )));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

fn resolve(
    spec: &CommandSpec,
    matches: &ArgMatches,
    config: Option<&str>,
    env: &BTreeMap<String, String>,
) -> CliResult<Settings> {
    let known = all_keys();
    let mut values = BTreeMap::new();
    if let Some(path) = config {
        let path = Path::new(path);
        let body = fs::read_to_string(path).map_err(|e| CliError::Data(Error::io(path, e)))?;
        values.extend(parse_config_file(&body, path)?);
    }
    for (name, value) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let key = rest.to_lowercase();
        if !known.contains(key.as_str()) {
            return Err(CliError::Usage(format!("unknown environment override {name}")));
        }
        values.insert(key, value.clone());
    }
    for key in command_keys(spec) {
        if let Some(v) = matches.get_one::<String>(key) {
            values.insert(key.to_string(), v.clone());
        }
    }
    let relevant: BTreeSet<&str> = command_keys(spec).into_iter().collect();
    values.retain(|k, _| relevant.contains(k.as_str()));
    for key in INPUT_PATHS {
        if let Some(p) = values.get(*key) {
            if !Path::new(p).exists() {
                return Err(CliError::Data(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                )));
            }
        }
    }
    Ok(Settings { values })
}

/// Run the CLI with the process environment.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env: BTreeMap<String, String> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    run_with_env(args, &env, out, err)
}

pub fn run_with_env<I, T>(args: I, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match build_cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = write!(err, "{text}");
                    1
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let spec = COMMANDS.iter().find(|c| c.name == name).expect("registered command");
    let config = sub.get_one::<String>("config").or_else(|| matches.get_one::<String>("config"));
    let result = resolve(spec, sub, config.map(String::as_str), env).and_then(|s| dispatch(name, &s));
    match result {
        Ok(summary) => {
            let _ = writeln!(out, "{summary}");
            0
        }
        Err(CliError::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            let _ = writeln!(err, "run `klite {name} --help` for usage");
            1
        }
        Err(CliError::Data(e)) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn dispatch(name: &str, s: &Settings) -> CliResult<Value> {
    match name {
        "augment" => cmd_augment(s),
        "stats" => cmd_stats(s),
        "coverage" => cmd_coverage(s),
        "train" => cmd_train(s),
        "eval-zeroshot" => cmd_eval_zeroshot(s),
        "eval-probe" => cmd_eval_probe(s),
        "ground-train" => cmd_ground_train(s),
        "ground-eval" => cmd_ground_eval(s),
        "bench-synth" => cmd_bench_synth(s),
        other => Err(CliError::Usage(format!("unknown command {other}"))),
    }
}

fn write_file(path: &Path, body: &str) -> CliResult<()> {
    fs::write(path, body).map_err(|e| CliError::Data(Error::io(path, e)))
}

fn store(s: &Settings) -> CliResult<KnowledgeStore> {
    Ok(KnowledgeStore::load(
        s.path("wordnet").as_deref(),
        s.path("wiktionary").as_deref(),
    )?)
}

fn source(s: &Settings) -> CliResult<Option<KnowledgeSource>> {
    match s.get("source") {
        None | Some("none") => Ok(None),
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|e: Error| CliError::Usage(e.to_string())),
    }
}

fn lexicon(s: &Settings) -> CliResult<Lexicon> {
    Ok(match s.path("lexicon") {
        Some(p) => Lexicon::load(p)?,
        None => Lexicon::default(),
    })
}

fn frequency(s: &Settings, data: &[Triplet], lex: &Lexicon) -> CliResult<FrequencyTable> {
    if let Some(p) = s.path("freq") {
        return Ok(FrequencyTable::load(p)?);
    }
    let captions: Vec<&str> = data
        .iter()
        .filter(|t| t.kind == TextKind::Caption)
        .map(|t| t.text.as_str())
        .collect();
    if captions.is_empty() {
        return Ok(FrequencyTable::default());
    }
    Ok(build_frequency_table(captions, lex)?)
}

fn templates(s: &Settings) -> CliResult<Vec<PromptTemplate>> {
    if let Some(p) = s.path("templates") {
        return Ok(PromptTemplate::load_file(p)?);
    }
    Ok(vec![match s.get("template") {
        Some(t) => PromptTemplate::new(t).map_err(|e| CliError::Usage(e.to_string()))?,
        None => PromptTemplate::default(),
    }])
}

fn cmd_augment(s: &Settings) -> CliResult<Value> {
    let data = load_dataset(s.require_path("dataset")?)?;
    let output = s.require_path("output")?;
    let lex = lexicon(s)?;
    let freq = frequency(s, &data, &lex)?;
    let cfg = AugmentConfig {
        source: source(s)?,
        scheme: s.parse_or("scheme", CaptionScheme::Concat)?,
        template: templates(s)?.remove(0),
        keep_vanilla: s.parse_or("keep_vanilla", false)?,
        token_budget: s.parse_or("max_tokens", 64usize)?.saturating_sub(1),
    };
    let (out, audit) = augment_dataset(&data, &store(s)?, &freq, &lex, &cfg)?;
    save_dataset(&output, &out)?;
    Ok(serde_json::to_value(audit).map_err(Error::from)?)
}

fn cmd_stats(s: &Settings) -> CliResult<Value> {
    let data = load_dataset(s.require_path("dataset")?)?;
    let lex = lexicon(s)?;
    let freq = frequency(s, &data, &lex)?;
    let stats = dataset_stats(&data, &freq, &lex, s.parse_or("min_freq", 5usize)?)?;
    let value = serde_json::to_value(&stats).map_err(Error::from)?;
    if let Some(p) = s.path("output") {
        write_file(&p, &format!("{value}\n"))?;
    }
    Ok(value)
}

fn cmd_coverage(s: &Settings) -> CliResult<Value> {
    let path = s.require_path("queries")?;
    let body = fs::read_to_string(&path).map_err(|e| CliError::Data(Error::io(&path, e)))?;
    let queries: Vec<&str> = body.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let src = source(s)?.ok_or_else(|| CliError::Usage("--source is required".into()))?;
    let store = store(s)?;
    let coverage = knowledge_coverage(&queries, &store, &src)?;
    if let Some(p) = s.path("output") {
        let mut cache = KnowledgeCache::for_store(&store);
        for q in &queries {
            cache.retrieve(&store, q, &src)?;
        }
        cache.save(p)?;
    }
    Ok(json!({ "coverage": coverage }))
}

fn train_config(s: &Settings) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        epochs: s.parse_or("epochs", d.epochs)?,
        lr: s.parse_or("lr", d.lr)?,
        optimizer: s.parse_or::<OptimizerKind>("optimizer", d.optimizer)?,
        seed: s.parse_or("seed", d.seed)?,
        mode: s.parse_or::<Mode>("mode", d.mode)?,
        embed_dim: s.parse_or("embed_dim", d.embed_dim)?,
        text_layers: s.parse_or("text_layers", d.text_layers)?,
        heads: s.parse_or("heads", d.heads)?,
        hidden: s.parse_or("hidden", d.hidden)?,
        max_tokens: s.parse_or("max_tokens", d.max_tokens)?,
        adapter_bottleneck: s.parse_or("adapter_bottleneck", d.adapter_bottleneck)?,
        oov_buckets: s.parse_or("oov_buckets", d.oov_buckets)?,
    })
}

fn cmd_train(s: &Settings) -> CliResult<Value> {
    let mut data = load_dataset(s.require_path("dataset")?)?;
    assign_labels(&mut data);
    let output = s.require_path("output")?;
    let cfg = train_config(s)?;
    let base = s.path("base").map(Checkpoint::load).transpose()?;
    let base_params = base.as_ref().map(Checkpoint::params).transpose()?;
    let base_ref = base.as_ref().zip(base_params.as_ref()).map(|(ck, p)| (p, &ck.vocab));
    let outcome = match train(&cfg, &data, base_ref) {
        Ok(o) => o,
        Err(Error::Diverged { step, component, batch }) => {
            let dump: Vec<&Triplet> = batch.iter().map(|&i| &data[i]).collect();
            let mut body = String::new();
            for t in dump {
                body.push_str(&serde_json::to_string(t).map_err(Error::from)?);
                body.push('\n');
            }
            let mut dump_path = output.clone().into_os_string();
            dump_path.push(".diverged.jsonl");
            write_file(Path::new(&dump_path), &body)?;
            return Err(CliError::Data(Error::Diverged { step, component, batch }));
        }
        Err(e) => return Err(e.into()),
    };
    Checkpoint::new(&outcome.params, &outcome.vocab, cfg.seed).save(&output)?;
    if let Some(p) = s.path("trace") {
        write_file(&p, &trace_csv(&outcome.trace))?;
    }
    Ok(json!({
        "steps": outcome.trace.len(),
        "initial_loss": outcome.trace.first().map(|r| r.l_ic),
        "final_loss": outcome.trace.last().map(|r| r.l_ic),
        "tau": outcome.params.scale(),
        "vanilla_samples": outcome.branches.vanilla,
        "knowledge_samples": outcome.branches.knowledge,
    }))
}

fn class_list(s: &Settings, data: &[Triplet]) -> CliResult<Vec<String>> {
    if let Some(p) = s.path("classes") {
        return Ok(load_categories(p)?);
    }
    let mut seen = BTreeSet::new();
    Ok(data
        .iter()
        .filter(|t| seen.insert(t.text.trim().to_lowercase()))
        .map(|t| t.text.trim().to_lowercase())
        .collect())
}

fn cmd_eval_zeroshot(s: &Settings) -> CliResult<Value> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let params = ck.params()?;
    let data = load_dataset(s.require_path("dataset")?)?;
    let classes = class_list(s, &data)?;
    let labels = data
        .iter()
        .map(|t| {
            let name = t.text.trim().to_lowercase();
            classes
                .iter()
                .position(|c| c.trim().to_lowercase() == name)
                .ok_or_else(|| CliError::Data(Error::invalid(format!("'{}' is not a listed class", t.text))))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let src = source(s)?;
    let store = store(s)?;
    let mode = s.parse_or::<BranchMode>("branch_mode", BranchMode::OneBranch)?;
    let emb = build_class_embeddings(&params, &ck.vocab, &classes, &store, src.as_ref(), &templates(s)?, mode)?;
    let images: Vec<Vec<f64>> = data.iter().map(|t| t.image.clone()).collect();
    let result = zero_shot_classify(&params, &images, &labels, &emb)?;
    let coverage = match &src {
        Some(src) => Some(knowledge_coverage(&classes, &store, src)? * 100.0),
        None => None,
    };
    let overlap = match s.path("pretrain") {
        Some(p) => {
            let pre = load_dataset(p)?;
            let empty = FrequencyTable::default();
            let lex = Lexicon::default();
            let concepts = pre
                .iter()
                .map(|t| Ok(construct_query(&t.text, t.kind, &empty, &lex)?.text))
                .collect::<Result<Vec<_>, Error>>()?;
            Some(concept_overlap(&concepts, &classes)?)
        }
        None => None,
    };
    let report = EvalReport {
        dataset: s.get("name").unwrap_or("eval").to_string(),
        top1: result.accuracy,
        per_class: result
            .per_class
            .iter()
            .map(|(&k, &v)| (classes[k].clone(), v))
            .collect(),
        concept_overlap: overlap,
        knowledge_coverage: coverage,
        config_digest: config_digest(&digest_view(s)?)?,
    };
    if let Some(p) = s.path("report") {
        report.save(p)?;
    }
    if let Some(p) = s.path("breakdown") {
        write_file(&p, &breakdown_csv(std::slice::from_ref(&report)))?;
    }
    Ok(json!({
        "top1": report.top1,
        "classes": classes.len(),
        "concept_overlap": report.concept_overlap,
        "knowledge_coverage": report.knowledge_coverage,
    }))
}

/// Settings as they affect results: input files by content hash, output
/// locations dropped.
fn digest_view(s: &Settings) -> CliResult<BTreeMap<String, String>> {
    const OUTPUTS: &[&str] = &["output", "report", "breakdown", "trace"];
    let mut view = BTreeMap::new();
    for (k, v) in &s.values {
        if OUTPUTS.contains(&k.as_str()) {
            continue;
        }
        let value = if INPUT_PATHS.contains(&k.as_str()) {
            let bytes = fs::read(v).map_err(|e| CliError::Data(Error::io(v, e)))?;
            format!("sha256:{}", hex::encode(Sha256::digest(&bytes)))
        } else {
            v.clone()
        };
        view.insert(k.clone(), value);
    }
    Ok(view)
}

fn cmd_eval_probe(s: &Settings) -> CliResult<Value> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let params = ck.params()?;
    let mut data = load_dataset(s.require_path("dataset")?)?;
    assign_labels(&mut data);
    let images: Vec<Vec<f64>> = data.iter().map(|t| t.image.clone()).collect();
    let labels: Vec<usize> = data.iter().map(|t| t.label).collect();
    let shots = s.parse_or("shots", 5usize)?;
    let accuracy = linear_probe(&image_embeddings(&params, &images)?, &labels, shots, s.parse_or("seed", 0u64)?)?;
    let value = json!({ "accuracy": accuracy, "shots": shots });
    if let Some(p) = s.path("report") {
        write_file(&p, &format!("{value}\n"))?;
    }
    Ok(value)
}

fn grounding_inputs(s: &Settings, max_tokens: usize) -> CliResult<Vec<String>> {
    let names = load_categories(s.require_path("categories")?)?;
    let texts = category_texts(&names, &store(s)?, source(s)?.as_ref(), max_tokens)?;
    Ok(texts.into_iter().map(|(t, _)| t).collect())
}

fn cmd_ground_train(s: &Settings) -> CliResult<Value> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let mut params = ck.params()?;
    let output = s.require_path("output")?;
    let records = load_regions(s.require_path("regions")?)?;
    let texts = grounding_inputs(s, params.config.max_tokens)?;
    let d = GroundTrainConfig::default();
    let use_adapters = s.parse_or("use_adapters", false)?;
    let cfg = GroundTrainConfig {
        epochs: s.parse_or("epochs", d.epochs)?,
        lr: s.parse_or("lr", d.lr)?,
        optimizer: s.parse_or::<OptimizerKind>("optimizer", d.optimizer)?,
        seed: s.parse_or("seed", ck.seed)?,
        focal: FocalParams::new(
            s.parse_or("alpha", d.focal.alpha)?,
            s.parse_or("gamma", d.focal.gamma)?,
        )?,
        use_adapters,
        spec: if use_adapters {
            LossSpec::adapters_only()
        } else {
            d.spec
        },
    };
    let trace = train_grounding(&mut params, &ck.vocab, &records, &texts, &cfg)?;
    Checkpoint::new(&params, &ck.vocab, cfg.seed).save(&output)?;
    if let Some(p) = s.path("trace") {
        let mut body = String::from("step,loss\n");
        for (i, l) in trace.iter().enumerate() {
            body.push_str(&format!("{i},{l}\n"));
        }
        write_file(&p, &body)?;
    }
    Ok(json!({
        "steps": trace.len(),
        "initial_loss": trace.first(),
        "final_loss": trace.last(),
    }))
}

fn cmd_ground_eval(s: &Settings) -> CliResult<Value> {
    let ck = Checkpoint::load(s.require_path("checkpoint")?)?;
    let params = ck.params()?;
    let records = load_regions(s.require_path("regions")?)?;
    let texts = grounding_inputs(s, params.config.max_tokens)?;
    let use_adapters = s.parse_or("use_adapters", false)?;
    let bank = encode_phrases_parallel(&params, &ck.vocab, &texts, use_adapters)?;
    let mut lines = String::new();
    let (mut preds_all, mut labels_all) = (Vec::new(), Vec::new());
    for r in &records {
        let v = encode_regions(&params, &r.feature_matrix()?)?;
        let preds = classify_scores(&ground_scores(&v, &bank.u)?);
        lines.push_str(&serde_json::to_string(&json!({ "image_id": r.image_id, "predictions": preds })).map_err(Error::from)?);
        lines.push('\n');
        if let Some(l) = r.region_labels() {
            preds_all.extend(preds.iter().copied());
            labels_all.extend(l);
        }
    }
    if let Some(p) = s.path("output") {
        write_file(&p, &lines)?;
    }
    Ok(json!({
        "regions": records.iter().map(|r| r.features.len()).sum::<usize>(),
        "accuracy": region_accuracy(&preds_all, &labels_all),
    }))
}

fn cmd_bench_synth(s: &Settings) -> CliResult<Value> {
    let mut cfg = SynthConfig::default();
    if let Some(e) = s.parse("epochs")? {
        cfg.train.epochs = e;
    }
    cfg.empty_knowledge = s.parse_or("empty_knowledge", false)?;
    let first = s.parse_or("seed", 0u64)?;
    let n = s.parse_or("seeds", 5u64)?;
    let seeds: Vec<u64> = (first..first + n).collect();
    let report = run_bench(&cfg, &seeds)?;
    if let Some(p) = s.path("output") {
        let mut body = serde_json::to_string_pretty(&report).map_err(Error::from)?;
        body.push('\n');
        write_file(&p, &body)?;
    }
    Ok(serde_json::to_value(&report.summary).map_err(Error::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str], env: &[(&str, &str)]) -> (i32, String, String) {
        let env: BTreeMap<String, String> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = run_with_env(args.iter().copied(), &env, &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn unknown_subcommand_and_flag_exit_one() {
        assert_eq!(run_capture(&["klite", "frobnicate"], &[]).0, 1);
        assert_eq!(run_capture(&["klite", "stats", "--bogus", "1"], &[]).0, 1);
    }

    #[test]
    fn help_exits_zero() {
        let (code, out, _) = run_capture(&["klite", "--help"], &[]);
        assert_eq!(code, 0);
        assert!(out.contains("bench-synth"));
    }

    #[test]
    fn missing_input_file_exits_two_with_path() {
        let (code, _, err) = run_capture(
            &["klite", "coverage", "--queries", "/nonexistent/q.txt", "--source", "wiki_def"],
            &[],
        );
        assert_eq!(code, 2);
        assert!(err.contains("/nonexistent/q.txt"));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(parse_config_file("seed = 3\n# note\n", Path::new("c")).is_ok());
        assert!(matches!(
            parse_config_file("colour = red\n", Path::new("c")),
            Err(Error::Config(_))
        ));
        let (code, _, err) = run_capture(&["klite", "stats"], &[("KLITE_NOPE", "1")]);
        assert_eq!(code, 1);
        assert!(err.contains("KLITE_NOPE"));
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.conf");
        fs::write(&cfg, "seed = 1\nlr = 0.5\nepochs = 2\n").unwrap();
        let spec = COMMANDS.iter().find(|c| c.name == "train").unwrap();
        let m = build_cli()
            .try_get_matches_from(["klite", "train", "--seed", "3"])
            .unwrap();
        let sub = m.subcommand_matches("train").unwrap();
        let env: BTreeMap<String, String> = [("KLITE_SEED".to_string(), "2".to_string()), ("KLITE_LR".to_string(), "0.25".to_string())]
            .into_iter()
            .collect();
        let s = resolve(spec, sub, Some(cfg.to_str().unwrap()), &env).unwrap();
        assert_eq!(s.get("seed"), Some("3"));
        assert_eq!(s.get("lr"), Some("0.25"));
        assert_eq!(s.get("epochs"), Some("2"));
    }
}
