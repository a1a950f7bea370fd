mod config;
mod manifest;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use hkgx_core::evaluator::{evaluate_split, FilterIndex};
use hkgx_core::ingest::{load_dataset, parse_canonical_line, write_canonical, DatasetBuilder, IngestOptions, LabeledFact, SourceFormat};
use hkgx_core::model::{HkgDataset, HyperFact, Split, SplitSelector, Vocab};
use hkgx_core::trainer::{curve_csv, train, Checkpoint, Model};
use hkgx_core::transform::{read_kg, recover, recover_with_provenance, sidecar_path, transform, verify_stats, Variant};
use hkgx_core::Error;

use config::RunConfig;
use manifest::{beside, InputDigest, RunManifest};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (build ", env!("HKGX_BUILD_HASH"), ")");

const TOY: [(Split, &str); 3] = [
    (Split::Train, include_str!("../../../data/toy/train.txt")),
    (Split::Valid, include_str!("../../../data/toy/valid.txt")),
    (Split::Test, include_str!("../../../data/toy/test.txt")),
];

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "hkgx", version = VERSION, about = "Hyper-relational knowledge graph toolkit")]
struct Cli {
    /// Seed for every random stream; a random seed is drawn and logged when omitted.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Where to write the run manifest instead of next to the outputs.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Dataset directory with train/valid/test files; the bundled toy
    /// dataset is used when omitted.
    #[arg(long = "data", alias = "in")]
    dir: Option<PathBuf>,
    #[arg(long, default_value = "canonical")]
    format: SourceFormat,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a raw benchmark dataset and write it in canonical form.
    Ingest {
        #[arg(long)]
        format: SourceFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reject valid/test facts with entities unseen in train.
        #[arg(long)]
        strict: bool,
        /// Skip malformed lines with a warning instead of failing.
        #[arg(long)]
        skip_malformed: bool,
    },
    /// Turn a dataset into a triple KG plus its sidecar.
    Transform {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "equivalent")]
        variant: Variant,
        /// `all` or one split name.
        #[arg(long, default_value = "all")]
        split: SplitSelector,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild canonical split files from an equivalent-transformed KG.
    Recover {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print dataset statistics, and transformed-graph counts with --variant.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, default_value = "all")]
        split: SplitSelector,
    },
    /// Train an encoder/decoder and save the best-validation checkpoint.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Flat key=value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Config override, applied after the file. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Learning-curve CSV; defaults to `<out>.curve.csv`.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Filtered link-prediction evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Per-query ranks as CSV.
        #[arg(long)]
        dump_ranks: Option<PathBuf>,
    },
    /// Write eval-mode embeddings as `label<TAB>values` rows.
    ExportEmbeddings {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `entities` or `relations`.
        #[arg(long, default_value = "entities")]
        table: Table,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum Table {
    Entities,
    Relations,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            writeln!(
                buf,
                "ts={} level={} target={} {}",
                buf.timestamp_millis(),
                record.level(),
                record.target(),
                record.args()
            )
        })
        .init();
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => EXIT_USAGE,
        Some(Error::Numeric(_) | Error::Shape { .. }) => EXIT_NUMERIC,
        Some(_) => EXIT_DATA,
        None => EXIT_DATA,
    }
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.ends_with(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            let msg = describe(&e);
            log::error!("event=failed exit_code={code} error={msg:?}");
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    log::info!("event=start version=\"{VERSION}\" threads={}", rayon::current_num_threads());
    let manifest_path = cli.manifest.clone();
    let out = |default: PathBuf| manifest_path.clone().unwrap_or(default);
    match cli.command {
        Command::Ingest { format, input, out: dir, strict, skip_malformed } => {
            let mut m = RunManifest::start("ingest");
            let opts = IngestOptions { strict, skip_malformed };
            m.config = serde_json::json!({ "format": format, "strict": strict, "skip_malformed": skip_malformed });
            let (ds, report) = load_dataset(&input, format, &opts)?;
            m.inputs = digest_files(&report.files)?;
            for p in write_canonical(&ds, &dir)? {
                m.output(&p);
            }
            log::info!(
                "event=ingested files={} skipped={} duplicates_dropped={}",
                report.files.len(),
                report.skipped.len(),
                report.duplicates_dropped
            );
            print!("{}", stats_table(&ds));
            m.finish(&out(dir.join("manifest.json")))?;
        }
        Command::Transform { data, variant, split, out: file } => {
            let mut m = RunManifest::start("transform");
            m.config = serde_json::json!({ "format": data.format, "variant": variant, "split": split });
            let ds = load(&data, &mut m)?;
            let kg = transform(&ds, split, variant)?;
            let stats = verify_stats(&kg, &ds)?;
            if !stats.holds() {
                log::warn!(
                    "event=stats_mismatch nodes={}/{} edges={}/{} relations={}/{}",
                    stats.node_count,
                    stats.expected_nodes,
                    stats.edge_count,
                    stats.expected_edges,
                    stats.relation_count,
                    stats.expected_relations
                );
            }
            let (triples, side) = hkgx_core::transform::write_kg(&kg, &file)?;
            m.output(&triples);
            m.output(&side);
            log::info!(
                "event=transformed variant={variant} triples={} mediators={} relations={}",
                kg.triples.len(),
                kg.num_mediators(),
                kg.relations.len()
            );
            m.finish(&out(beside(&file)))?;
        }
        Command::Recover { input, out: dir } => {
            let mut m = RunManifest::start("recover");
            m.inputs.push(InputDigest::of_file(&input)?);
            let side = sidecar_path(&input);
            let with_sidecar = side.is_file();
            if with_sidecar {
                m.inputs.push(InputDigest::of_file(&side)?);
            } else {
                log::warn!("event=no_sidecar path={} note=\"standalone provenance unavailable\"", side.display());
            }
            m.config = serde_json::json!({ "provenance": with_sidecar });
            let kg = read_kg(&input)?;
            let facts = if with_sidecar { recover_with_provenance(&kg)? } else { recover(&kg)? }.facts;
            for p in write_recovered(&facts, &kg.entities, &kg.relations, &kg.split_sizes, &dir)? {
                m.output(&p);
            }
            log::info!("event=recovered facts={}", facts.len());
            m.finish(&out(dir.join("manifest.json")))?;
        }
        Command::Stats { data, variant, split } => {
            let mut m = RunManifest::start("stats");
            m.config = serde_json::json!({ "format": data.format, "variant": variant, "split": split });
            let ds = load(&data, &mut m)?;
            let mut table = stats_table(&ds);
            if let Some(v) = variant {
                let kg = transform(&ds, split, v)?;
                let s = verify_stats(&kg, &ds)?;
                let _ = writeln!(table, "variant\t{v}");
                let _ = writeln!(table, "nodes\t{}\t(expected {})", s.node_count, s.expected_nodes);
                let _ = writeln!(table, "edges\t{}\t(expected {})", s.edge_count, s.expected_edges);
                let _ = writeln!(table, "relations\t{}\t(expected {})", s.relation_count, s.expected_relations);
            }
            print!("{table}");
            if let Some(p) = &manifest_path {
                m.finish(p)?;
            }
        }
        Command::Train { data, config, overrides, out: ckpt_path, curve } => {
            let mut m = RunManifest::start("train");
            let mut cfg = RunConfig::default();
            if let Some(path) = &config {
                cfg.apply_file(path)?;
                m.inputs.push(InputDigest::of_file(path)?);
            }
            for o in &overrides {
                cfg.assign(o)?;
            }
            cfg.train.seed = resolve_seed(cli.seed, cfg.seed_set.then_some(cfg.train.seed));
            m.seed = Some(cfg.train.seed);
            m.config = serde_json::to_value(&cfg)?;
            let ds = load(&data, &mut m)?;
            log::info!(
                "event=train_start seed={} dim={} epochs={} batch={} lr={}",
                cfg.train.seed,
                cfg.encoder.dim,
                cfg.train.epochs,
                cfg.train.batch_size,
                cfg.train.learning_rate
            );
            let outcome = train(&ds, cfg.encoder, cfg.decoder, cfg.train)?;
            if let Some(parent) = ckpt_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            outcome.checkpoint.save(&ckpt_path)?;
            m.output(&ckpt_path);
            let curve_path = curve.unwrap_or_else(|| with_suffix(&ckpt_path, ".curve.csv"));
            write(&curve_path, curve_csv(&outcome.curve))?;
            m.output(&curve_path);
            log::info!(
                "event=train_done steps={} first_loss={} last_loss={} best_valid_mrr={}",
                outcome.steps,
                outcome.first_loss,
                outcome.last_loss,
                outcome.checkpoint.header.best_valid_mrr.map_or("none".into(), |v| v.to_string())
            );
            m.finish(&out(beside(&ckpt_path)))?;
        }
        Command::Eval { data, ckpt, split, out: report_path, dump_ranks } => {
            let mut m = RunManifest::start("eval");
            m.inputs.push(InputDigest::of_file(&ckpt)?);
            let checkpoint = Checkpoint::load(&ckpt)?;
            m.seed = Some(checkpoint.header.train.seed);
            m.config = serde_json::json!({ "format": data.format, "split": split });
            let ds = load(&data, &mut m)?;
            let model = Model::from_checkpoint(&ds, &checkpoint)?;
            let index = FilterIndex::build(&ds);
            let mut report = evaluate_split(&model.scorer()?, &ds, split, &index)?;
            if let Some(p) = &dump_ranks {
                write(p, report.ranks_csv())?;
                m.output(p);
            }
            report.queries.clear();
            write(&report_path, serde_json::to_string_pretty(&report)?)?;
            m.output(&report_path);
            let o = report.overall;
            println!(
                "split={} queries={} mrr={:.4} hits@1={:.4} hits@3={:.4} hits@10={:.4}",
                report.split, o.count, o.mrr, o.hits_at_1, o.hits_at_3, o.hits_at_10
            );
            m.finish(&out(beside(&report_path)))?;
        }
        Command::ExportEmbeddings { data, ckpt, out: tsv, table } => {
            let mut m = RunManifest::start("export-embeddings");
            m.inputs.push(InputDigest::of_file(&ckpt)?);
            let checkpoint = Checkpoint::load(&ckpt)?;
            m.config = serde_json::json!({ "format": data.format, "table": format!("{table:?}").to_lowercase() });
            let ds = load(&data, &mut m)?;
            let scorer = Model::from_checkpoint(&ds, &checkpoint)?.scorer()?;
            let (matrix, labels) = match table {
                Table::Entities => (&scorer.entities, ds.entities().labels()),
                Table::Relations => (&scorer.relations, ds.relations().labels()),
            };
            let mut text = String::new();
            for (i, label) in labels.iter().enumerate().take(matrix.rows()) {
                text.push_str(label);
                for v in matrix.row(i) {
                    let _ = write!(text, "\t{v}");
                }
                text.push('\n');
            }
            write(&tsv, text)?;
            m.output(&tsv);
            m.finish(&out(beside(&tsv)))?;
        }
    }
    Ok(())
}

fn resolve_seed(flag: Option<u64>, configured: Option<u64>) -> u64 {
    match flag.or(configured) {
        Some(s) => s,
        None => {
            let s = rand::random::<u64>();
            log::info!("event=random_seed seed={s}");
            s
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn digest_files(files: &[String]) -> Result<Vec<InputDigest>> {
    files.iter().map(|f| InputDigest::of_file(Path::new(f))).collect()
}

fn toy_dataset() -> Result<HkgDataset> {
    let mut b = DatasetBuilder::new();
    for (split, text) in TOY {
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let fact = parse_canonical_line(line).map_err(|e| anyhow!(Error::Validation(e)))?;
            b.push(split, &fact)?;
        }
    }
    Ok(b.build()?)
}

fn load(data: &DataArgs, m: &mut RunManifest) -> Result<HkgDataset> {
    match &data.dir {
        Some(dir) => {
            let (ds, report) = load_dataset(dir, data.format, &IngestOptions::default())?;
            m.inputs.extend(digest_files(&report.files)?);
            Ok(ds)
        }
        None => {
            log::info!("event=dataset source=bundled-toy");
            for (split, text) in TOY {
                m.inputs
                    .push(InputDigest::of_bytes(format!("<bundled toy>/{}.txt", split.name()), text.as_bytes()));
            }
            toy_dataset()
        }
    }
}

fn stats_table(ds: &HkgDataset) -> String {
    let s = ds.stats();
    let mut t = String::new();
    for (k, v) in [
        ("n_e", s.n_e),
        ("n_r", s.n_r),
        ("n_r_primary", s.n_r_pri),
        ("n_r_qualifier", s.n_r_qua),
        ("max_arity", s.n_a),
        ("facts_without_qualifiers", s.n_pri),
        ("facts_with_qualifiers", s.n_qua),
    ] {
        let _ = writeln!(t, "{k}\t{v}");
    }
    for split in Split::ALL {
        let _ = writeln!(t, "{}\t{}", split.name(), ds.split(split).len());
    }
    t
}

/// Writes recovered facts as canonical split files. Without recorded split
/// sizes every fact goes to `train.txt`.
fn write_recovered(
    facts: &[HyperFact],
    entities: &Vocab,
    relations: &Vocab,
    split_sizes: &[(Split, usize)],
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let sizes: Vec<(Split, usize)> = if split_sizes.is_empty() {
        log::warn!("event=no_split_sizes note=\"writing every recovered fact to train\"");
        vec![(Split::Train, facts.len())]
    } else {
        split_sizes.to_vec()
    };
    if sizes.iter().map(|(_, n)| n).sum::<usize>() != facts.len() {
        return Err(anyhow!(Error::Structure(format!(
            "recovered {} facts but the sidecar records {:?}",
            facts.len(),
            sizes
        ))));
    }
    let label = |v: &Vocab, id: u32| -> Result<String> {
        v.label(id)
            .map(str::to_owned)
            .ok_or_else(|| anyhow!(Error::Vocabulary { kind: "recovered", id: id as usize }))
    };
    let mut texts: Vec<(Split, String)> = Split::ALL.iter().map(|&s| (s, String::new())).collect();
    let mut rest = facts;
    for (split, n) in sizes {
        let (chunk, tail) = rest.split_at(n);
        rest = tail;
        let text = &mut texts.iter_mut().find(|(s, _)| *s == split).expect("every split").1;
        for f in chunk {
            let lf = LabeledFact {
                subject: label(entities, f.subject.0)?,
                relation: label(relations, f.relation.0)?,
                object: label(entities, f.object.0)?,
                qualifiers: f
                    .qualifiers()
                    .iter()
                    .map(|q| Ok((label(relations, q.attribute.0)?, label(entities, q.value.0)?)))
                    .collect::<Result<_>>()?,
            };
            text.push_str(&lf.to_canonical_line());
            text.push('\n');
        }
    }
    let mut written = Vec::new();
    for (split, text) in texts {
        let path = dir.join(format!("{}.txt", split.name()));
        write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}
