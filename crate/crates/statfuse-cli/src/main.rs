//! Command-line surface for the fusion engine: train, fuse, analyze,
//! validate, simulate. Every run writes a manifest (engine version, config
//! hash, input fingerprints, wall time) into the output directory, and logs
//! line-oriented key=value records to stderr.
//!
//! Exit codes: 0 success, 1 validation/contract error, 2 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{ArgAction, Parser, Subcommand};

use statfuse::analysis::{estimate, estimates_to_csv, AnalysisRequest, Statistic};
use statfuse::gbdt::TrainParams;
use statfuse::microdata::{load_microdata, load_schema, write_schema, Microdata};
use statfuse::pipeline::{
    fuse_streaming, load_bundle, load_implicates, save_bundle, train_fusion, DiskSink, FusionSpec,
    OutputFormat,
};
use statfuse::synthbench::{generate_population, SynthConfig};
use statfuse::validation::{build_curves, emit_report, internal_validate};
use statfuse::Error;

#[derive(Parser)]
#[command(
    name = "statfuse",
    version,
    about = "Statistical data fusion: train on a donor survey, simulate its variables onto a recipient"
)]
struct Cli {
    /// Worker threads (overridden by STATFUSE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Verbose key=value logging.
    #[arg(short, long, global = true, action = ArgAction::SetTrue)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train fusion models on a donor table.
    Train {
        /// Donor CSV.
        #[arg(long)]
        donor: PathBuf,
        /// Donor schema sidecar (defaults to <donor>.schema.toml).
        #[arg(long)]
        donor_schema: Option<PathBuf>,
        /// Fusion spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// Boosting iteration cap.
        #[arg(long, default_value_t = 500)]
        max_iterations: usize,
        /// CV early-stopping patience (0 disables).
        #[arg(long, default_value_t = 30)]
        early_stop: usize,
    },
    /// Simulate fusion variables onto a recipient table.
    Fuse {
        /// Trained bundle directory.
        #[arg(long)]
        bundle: PathBuf,
        /// Recipient CSV.
        #[arg(long)]
        recipient: PathBuf,
        /// Recipient schema sidecar (defaults to <recipient>.schema.toml).
        #[arg(long)]
        recipient_schema: Option<PathBuf>,
        /// Number of implicates M.
        #[arg(long)]
        implicates: usize,
        /// Simulation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Write one long CSV with an implicate column instead of
        /// per-implicate files.
        #[arg(long, action = ArgAction::SetTrue)]
        long: bool,
        /// Recipient rows per processing chunk.
        #[arg(long)]
        chunk_rows: Option<usize>,
        /// Approximate memory budget (e.g. 512M, 2G); converted to
        /// chunk_rows from the schema's bytes-per-row estimate.
        #[arg(long)]
        memory_budget: Option<String>,
        /// Skip the donor/recipient compatibility check.
        #[arg(long, action = ArgAction::SetTrue)]
        skip_compat: bool,
    },
    /// Pooled estimates over fused implicates.
    Analyze {
        /// Fusion output directory (per-implicate format).
        #[arg(long)]
        implicates: PathBuf,
        /// Recipient CSV (weights and subgroup columns).
        #[arg(long)]
        recipient: PathBuf,
        #[arg(long)]
        recipient_schema: Option<PathBuf>,
        /// Statistic: mean, proportion, sum, count, median.
        #[arg(long)]
        stat: String,
        /// Target variable.
        #[arg(long)]
        var: String,
        /// Comma-separated subgroup variables.
        #[arg(long)]
        by: Option<String>,
        /// Augment variance with recipient replicate weights.
        #[arg(long, action = ArgAction::SetTrue)]
        replicate_weights: bool,
        /// Confidence level for the MOE.
        #[arg(long, default_value_t = 0.90)]
        confidence: f64,
        /// Output CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Internal validation: fuse back onto the donor and compare estimates.
    Validate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        donor_schema: Option<PathBuf>,
        /// Comma-separated categorical variables defining subsets.
        #[arg(long)]
        subset_vars: String,
        #[arg(long, default_value_t = 40)]
        implicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report directory (CSV tables + SVG plots).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic donor/recipient pair with analytic truth.
    Simulate {
        /// Synthetic population config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(run(&argv));
}

fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are success; anything else is a contract
            // error with usage text.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_threads(cli.threads);
    let started = Instant::now();
    match dispatch(&cli, argv) {
        Ok(()) => {
            log(
                cli.verbose,
                "done",
                &[(
                    "wall_seconds",
                    format!("{:.3}", started.elapsed().as_secs_f64()),
                )],
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Csv { .. } | Error::PartialOutput(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: &Cli, argv: &[String]) -> Result<(), Error> {
    match &cli.command {
        Command::Train {
            donor,
            donor_schema,
            spec,
            out,
            max_iterations,
            early_stop,
        } => {
            let started = Instant::now();
            let schema_path = sidecar(donor, donor_schema.as_deref());
            let schema = load_schema(&schema_path)?;
            let donor_md = load_microdata(donor, &schema)?;
            let spec_text = fs::read_to_string(spec).map_err(|e| Error::io(spec.clone(), e))?;
            let fusion_spec = FusionSpec::from_toml(&spec_text)?;
            log(
                cli.verbose,
                "train.start",
                &[
                    ("donor_rows", donor_md.n_rows().to_string()),
                    ("steps", fusion_spec.steps.len().to_string()),
                ],
            );
            let params = TrainParams {
                max_iterations: *max_iterations,
                early_stop_rounds: if *early_stop == 0 {
                    None
                } else {
                    Some(*early_stop)
                },
                seed: fusion_spec.seed,
                ..TrainParams::default()
            };
            let bundle = train_fusion(&donor_md, &fusion_spec, &params)?;
            save_bundle(&bundle, out)?;
            write_run_manifest(out, "train", argv, &[("donor", donor), ("spec", spec)], started)?;
            log(cli.verbose, "train.saved", &[("out", out.display().to_string())]);
            Ok(())
        }
        Command::Fuse {
            bundle,
            recipient,
            recipient_schema,
            implicates,
            seed,
            out,
            long,
            chunk_rows,
            memory_budget,
            skip_compat,
        } => {
            let started = Instant::now();
            let schema_path = sidecar(recipient, recipient_schema.as_deref());
            let schema = load_schema(&schema_path)?;
            let recipient_md = load_microdata(recipient, &schema)?;
            let mut fusion_bundle = load_bundle(bundle)?;
            if let Some(rows) = resolve_chunk_rows(
                *chunk_rows,
                memory_budget.as_deref(),
                schema.len() + fusion_bundle.fusion_specs.len(),
            )? {
                fusion_bundle.spec.chunk_rows = rows;
            }
            log(
                cli.verbose,
                "fuse.start",
                &[
                    ("recipient_rows", recipient_md.n_rows().to_string()),
                    ("implicates", implicates.to_string()),
                    ("chunk_rows", fusion_bundle.spec.chunk_rows.to_string()),
                ],
            );
            if !skip_compat {
                let problems = compat_from_bundle(&fusion_bundle, &recipient_md);
                if !problems.is_empty() {
                    return Err(Error::Schema(format!(
                        "compatibility violations: {}",
                        problems.join("; ")
                    )));
                }
            }
            let format = if *long {
                OutputFormat::Long
            } else {
                OutputFormat::PerImplicate
            };
            let mut sink = DiskSink::create(out, format)?;
            fuse_streaming(&fusion_bundle, &recipient_md, *implicates, *seed, &mut sink)?;
            write_run_manifest(out, "fuse", argv, &[("recipient", recipient)], started)?;
            log(cli.verbose, "fuse.saved", &[("out", out.display().to_string())]);
            Ok(())
        }
        Command::Analyze {
            implicates,
            recipient,
            recipient_schema,
            stat,
            var,
            by,
            replicate_weights,
            confidence,
            out,
        } => {
            let schema_path = sidecar(recipient, recipient_schema.as_deref());
            let schema = load_schema(&schema_path)?;
            let recipient_md = load_microdata(recipient, &schema)?;
            let set = load_implicates(implicates)?;
            let statistic: Statistic = stat.parse()?;
            let mut request = AnalysisRequest::new(statistic, var);
            request.confidence = *confidence;
            request.use_replicate_weights = *replicate_weights;
            if let Some(by) = by {
                request.subgroup_by = by
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            let rows = estimate(&set, &recipient_md, &request)?;
            let csv = estimates_to_csv(statistic, var, &rows);
            match out {
                Some(path) => fs::write(path, csv).map_err(|e| Error::io(path.clone(), e))?,
                None => print!("{csv}"),
            }
            log(
                cli.verbose,
                "analyze.done",
                &[("estimates", rows.len().to_string())],
            );
            Ok(())
        }
        Command::Validate {
            bundle,
            donor,
            donor_schema,
            subset_vars,
            implicates,
            seed,
            out,
        } => {
            let started = Instant::now();
            let schema_path = sidecar(donor, donor_schema.as_deref());
            let schema = load_schema(&schema_path)?;
            let donor_md = load_microdata(donor, &schema)?;
            let fusion_bundle = load_bundle(bundle)?;
            let vars: Vec<String> = subset_vars
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            log(
                cli.verbose,
                "validate.start",
                &[
                    ("subset_vars", vars.join("+")),
                    ("implicates", implicates.to_string()),
                ],
            );
            let cells = internal_validate(&fusion_bundle, &donor_md, &vars, *implicates, *seed)?;
            let curves = build_curves(&cells);
            let files = emit_report(&cells, &curves, out)?;
            write_run_manifest(out, "validate", argv, &[("donor", donor)], started)?;
            log(
                cli.verbose,
                "validate.done",
                &[
                    ("cells", cells.len().to_string()),
                    ("files", files.len().to_string()),
                ],
            );
            Ok(())
        }
        Command::Simulate { config, out } => {
            let started = Instant::now();
            let text = fs::read_to_string(config).map_err(|e| Error::io(config.clone(), e))?;
            let cfg = SynthConfig::from_toml(&text)?;
            let (donor, recipient, _truth) = generate_population(&cfg)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out.clone(), e))?;
            write_table(&donor, &out.join("donor.csv"))?;
            write_table(&recipient, &out.join("recipient.csv"))?;
            fs::write(out.join("truth.toml"), cfg.to_toml())
                .map_err(|e| Error::io(out.join("truth.toml"), e))?;
            write_run_manifest(out, "simulate", argv, &[("config", config)], started)?;
            log(
                cli.verbose,
                "simulate.done",
                &[
                    ("donor_rows", donor.n_rows().to_string()),
                    ("recipient_rows", recipient.n_rows().to_string()),
                ],
            );
            Ok(())
        }
    }
}

fn write_table(md: &Microdata, path: &Path) -> Result<(), Error> {
    md.write_csv(path)?;
    write_schema(&schema_sidecar_path(path), md.specs())
}

/// Default sidecar: <data>.schema.toml next to the CSV.
fn sidecar(data: &Path, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => schema_sidecar_path(data),
    }
}

fn schema_sidecar_path(data: &Path) -> PathBuf {
    let mut p = data.to_path_buf();
    let stem = p
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    p.set_file_name(format!("{stem}.schema.toml"));
    p
}

/// Presence checks for everything the bundle's models will ask of the
/// recipient; prediction re-validates kinds exactly.
fn compat_from_bundle(
    bundle: &statfuse::pipeline::FusionBundle,
    recipient: &Microdata,
) -> Vec<String> {
    let mut problems = Vec::new();
    let fused: Vec<&str> = bundle
        .fusion_specs
        .iter()
        .map(|s| s.name.as_str())
        .collect();
    for name in &fused {
        if recipient.spec(name).is_some() {
            problems.push(format!(
                "fusion variable '{name}' already present in recipient"
            ));
        }
    }
    for step in &bundle.steps {
        for name in step_feature_names(step) {
            if fused.contains(&name.as_str()) {
                continue;
            }
            if recipient.spec(&name).is_none() {
                problems.push(format!("model feature '{name}' missing from recipient"));
            }
        }
    }
    problems.sort();
    problems.dedup();
    problems
}

fn step_feature_names(step: &statfuse::pipeline::TrainedStep) -> Vec<String> {
    use statfuse::pipeline::{BlockVarModels, StepModels};
    let mut names = Vec::new();
    match &step.models {
        StepModels::Categorical { model } => names.extend(model.feature_names.clone()),
        StepModels::Continuous(m) => {
            names.extend(m.mean_model.feature_names.clone());
            for qm in &m.quantile_models {
                names.extend(qm.feature_names.clone());
            }
        }
        StepModels::Semicontinuous { zero_model, cont } => {
            names.extend(zero_model.feature_names.clone());
            if let Some(m) = cont {
                names.extend(m.mean_model.feature_names.clone());
                for qm in &m.quantile_models {
                    names.extend(qm.feature_names.clone());
                }
            }
        }
        StepModels::Block { vars, .. } => {
            for bv in vars {
                match bv {
                    BlockVarModels::Categorical { model } => {
                        names.extend(model.feature_names.clone())
                    }
                    BlockVarModels::Continuous {
                        mean_model,
                        quantile_models,
                    } => {
                        names.extend(mean_model.feature_names.clone());
                        for qm in quantile_models {
                            names.extend(qm.feature_names.clone());
                        }
                    }
                    BlockVarModels::Semicontinuous {
                        zero_model,
                        mean_model,
                        quantile_models,
                    } => {
                        names.extend(zero_model.feature_names.clone());
                        names.extend(mean_model.feature_names.clone());
                        for qm in quantile_models {
                            names.extend(qm.feature_names.clone());
                        }
                    }
                }
            }
        }
    }
    names
}

fn init_threads(flag: Option<usize>) {
    let threads = std::env::var("STATFUSE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .or(flag);
    if let Some(t) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
}

/// Budget strings like "800000", "512M", "2G" become a chunk row count via a
/// 16-bytes-per-cell schema estimate.
fn resolve_chunk_rows(
    chunk_rows: Option<usize>,
    budget: Option<&str>,
    n_columns: usize,
) -> Result<Option<usize>, Error> {
    if let Some(rows) = chunk_rows {
        if rows == 0 {
            return Err(Error::InvalidArgument("chunk_rows must be positive".into()));
        }
        return Ok(Some(rows));
    }
    let Some(budget) = budget else {
        return Ok(None);
    };
    let bytes = parse_bytes(budget)?;
    let per_row = (16 * n_columns.max(1)) as u64;
    Ok(Some(((bytes / per_row).max(1)) as usize))
}

fn parse_bytes(s: &str) -> Result<u64, Error> {
    let s = s.trim();
    let (num, mult) = match s.chars().last() {
        Some('K' | 'k') => (&s[..s.len() - 1], 1u64 << 10),
        Some('M' | 'm') => (&s[..s.len() - 1], 1u64 << 20),
        Some('G' | 'g') => (&s[..s.len() - 1], 1u64 << 30),
        _ => (s, 1),
    };
    num.parse::<u64>()
        .map(|v| v * mult)
        .map_err(|_| Error::InvalidArgument(format!("cannot parse memory budget '{s}'")))
}

fn log(verbose: bool, event: &str, kv: &[(&str, String)]) {
    if !verbose {
        return;
    }
    let mut line = format!("level=info event={event}");
    for (k, v) in kv {
        line.push_str(&format!(" {k}={v}"));
    }
    eprintln!("{line}");
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    argv: &[String],
    inputs: &[(&str, &PathBuf)],
    started: Instant,
) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut fingerprints = serde_json::Map::new();
    for (name, path) in inputs {
        let bytes = fs::read(path).map_err(|e| Error::io((*path).clone(), e))?;
        fingerprints.insert(
            name.to_string(),
            serde_json::Value::String(format!("fnv64:{:016x}", fnv64(&bytes))),
        );
    }
    let manifest = serde_json::json!({
        "engine": format!("statfuse {}", env!("CARGO_PKG_VERSION")),
        "command": command,
        "config_hash": format!("fnv64:{:016x}", fnv64(argv.join("\u{1f}").as_bytes())),
        "inputs": fingerprints,
        "wall_seconds": started.elapsed().as_secs_f64(),
        "created_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    let path = dir.join("run_manifest.json");
    fs::write(
        &path,
        serde_json::to_string_pretty(&manifest).expect("manifest renders"),
    )
    .map_err(|e| Error::io(&path, e))
}
