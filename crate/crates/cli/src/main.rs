//! `jepagrasp`: data generation, splits, pretraining, fine-tuning and evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use jepagrasp_core::checks;
use jepagrasp_core::datasets::{self, filter_quality, load_dataset, read_manifest, Dataset, MIN_QUALITY};
use jepagrasp_core::jepatrain::{
    self, evaluate_split, finetune, init_finetune_store, labeled_objects, metrics_csv, prepare_dataset_objects,
};
use jepagrasp_core::metrics::{curve_csv, summarize_curve, CurvePoint, EvalReport};
use jepagrasp_core::splits::{make_pack, verify_pack, SplitPack};
use jepagrasp_core::tensorcore::{read_checkpoint, write_checkpoint, ParamStore};
use jepagrasp_core::Error;
use serde::{Deserialize, Serialize};

use config::{Init, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "jepagrasp", version, about = "Label-efficient multi-hypothesis grasp joint prediction")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset root (defaults to JEPAGRASP_DATA_ROOT)
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Directory for run outputs
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Label budget in percent of training objects
    #[arg(long, global = true, value_parser = ["1", "10", "25", "100"])]
    budget: Option<String>,
    #[arg(long, global = true)]
    pack: Option<String>,
    /// `scratch` or `pretrained:PATH`
    #[arg(long, global = true, default_value = "scratch")]
    init: Init,
    /// Number of joint hypotheses
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Weight of the selector cross-entropy
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Replace existing outputs
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic grasp dataset
    GenData,
    /// Write a split pack for the dataset
    MakeSplits,
    /// Self-supervised pretraining on the pack's training objects
    Pretrain,
    /// Fine-tune backbone and grasp head on a label budget
    Finetune,
    /// Evaluate a fine-tuned run
    Eval {
        /// Fine-tuning run directory
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck,
    /// Collect fine-tuning summaries into a budget curve CSV
    ExportCurves {
        /// Output CSV (defaults to <out>/curves.csv)
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Val,
    Test,
}

/// Result summary written next to each fine-tuned model.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunSummary {
    curve: CurvePoint,
    val: EvalReport,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error category={} code={} message={:?}", e.category(), e.exit_code(), msg);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(b) = &cli.budget {
        cfg.budget = b.parse().expect("validated by clap");
    }
    if let Some(p) = &cli.pack {
        cfg.pack = p.clone();
    }
    if let Some(k) = cli.k {
        cfg.finetune.head.k = k;
    }
    if let Some(a) = cli.alpha {
        cfg.finetune.head.alpha = a;
    }
    if let Some(s) = cli.seed {
        match cli.command {
            Command::GenData => cfg.generator.seed = s,
            Command::MakeSplits => cfg.split_seed = s,
            Command::Pretrain => cfg.pretrain.seed = s,
            Command::Finetune => cfg.finetune.seed = s,
            _ => {}
        }
    }
    cfg.generator.cloud_size = cfg.tokenizer.cloud_size;
    match &cli.command {
        Command::Gradcheck => return cmd_gradcheck(),
        Command::ExportCurves { file } => return cmd_export_curves(&cfg, file.as_deref()),
        Command::Eval { run, split } => return cmd_eval(run, *split),
        _ => {}
    }
    let root = cfg.resolve_data_root(cli.data_root.clone())?;
    cfg.validate()?;
    log_config(&cli.command, &cfg);
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &root, cli.overwrite),
        Command::MakeSplits => cmd_make_splits(&cfg, &root, cli.overwrite),
        Command::Pretrain => cmd_pretrain(&cfg, &root, cli.overwrite),
        Command::Finetune => cmd_finetune(&cfg, &root, &cli.init, cli.overwrite),
        _ => unreachable!("handled above"),
    }
}

fn log_config(cmd: &Command, cfg: &RunConfig) {
    eprintln!("command={cmd:?} config={}", serde_json::to_string(cfg).expect("config serializes"));
}

fn prepare_output(dir: &Path, overwrite: bool) -> Result<(), Error> {
    if dir.exists() && !overwrite {
        return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_store(path: &Path, store: &ParamStore<f32>) -> Result<(), Error> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn load_store(path: &Path) -> Result<ParamStore<f32>, Error> {
    let f = fs::File::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    Ok(read_checkpoint(std::io::BufReader::new(f))?)
}

fn cmd_gen_data(cfg: &RunConfig, root: &Path, overwrite: bool) -> Result<(), Error> {
    if root.join(datasets::MANIFEST_FILE).exists() && !overwrite {
        return Err(Error::Config(format!("{} already holds a dataset; pass --overwrite", root.display())));
    }
    let m = datasets::generate_dataset(&cfg.generator, root)?;
    println!(
        "generated {} objects in {} categories, {} grasps each, at {}",
        m.objects.len(),
        m.categories.len(),
        m.samples_per_object,
        root.display()
    );
    Ok(())
}

fn load_pack(cfg: &RunConfig) -> Result<SplitPack, Error> {
    let path = cfg.splits_dir().join(SplitPack::file_name(&cfg.pack));
    if !path.is_file() {
        return Err(Error::Ingestion(format!("missing split pack {}; run make-splits first", path.display())));
    }
    SplitPack::read(&path)
}

fn cmd_make_splits(cfg: &RunConfig, root: &Path, overwrite: bool) -> Result<(), Error> {
    let manifest = read_manifest(root)?;
    let pack = make_pack(&manifest, &cfg.pack, cfg.split_seed)?;
    let report = verify_pack(&pack, &manifest, None);
    if !report.is_ok() {
        let first = report.violations.iter().map(ToString::to_string).next().unwrap_or_default();
        return Err(Error::Verification(format!("fresh pack failed verification: {first}")));
    }
    let dir = cfg.splits_dir();
    let path = dir.join(SplitPack::file_name(&pack.pack_id));
    if path.exists() && !overwrite {
        return Err(Error::Config(format!("{} exists; pass --overwrite to replace it", path.display())));
    }
    pack.write(&dir)?;
    println!(
        "pack {} seed {}: val {} test {} budgets {}",
        pack.pack_id,
        pack.seed,
        pack.val.len(),
        pack.test.len(),
        pack.budgets.iter().map(|(b, ids)| format!("{b}%={}", ids.len())).collect::<Vec<_>>().join(" ")
    );
    Ok(())
}

fn run_dir(cfg: &RunConfig, kind: &str, name: String) -> PathBuf {
    cfg.output_dir.join(kind).join(name)
}

fn cmd_pretrain(cfg: &RunConfig, root: &Path, overwrite: bool) -> Result<(), Error> {
    let ds = load_dataset(root)?;
    let pack = load_pack(cfg)?;
    let ids = pack.budget(100)?.to_vec();
    let dir = run_dir(cfg, "pretrain", format!("{}_s{}", cfg.pack, cfg.pretrain.seed));
    prepare_output(&dir, overwrite)?;
    let tokens: Vec<_> = prepare_dataset_objects(&ds, &ids, &cfg.tokenizer)?.into_values().collect();
    let out = jepatrain::pretrain(&cfg.tokenizer, &cfg.encoder, &cfg.pretrain, &tokens)?;
    save_store(&dir.join("encoder.ckpt"), &out.pair.target)?;
    save_store(&dir.join("context.ckpt"), &out.pair.context)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.log))?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let first = out.losses.first().copied().unwrap_or(f64::NAN);
    let last = out.losses.last().copied().unwrap_or(f64::NAN);
    println!("pretrained on {} objects: loss {first:.5} -> {last:.5}", tokens.len());
    println!("encoder checkpoint {}", dir.join("encoder.ckpt").display());
    Ok(())
}

fn split_objects(ds: &Dataset, cfg: &RunConfig, ids: &[String]) -> Result<Vec<jepatrain::LabeledObject>, Error> {
    let tokens: BTreeMap<_, _> = prepare_dataset_objects(ds, ids, &cfg.tokenizer)?;
    let samples = filter_quality(ds.samples_for(ids).cloned().collect(), MIN_QUALITY);
    labeled_objects(&tokens, &samples, ids)
}

fn cmd_finetune(cfg: &RunConfig, root: &Path, init: &Init, overwrite: bool) -> Result<(), Error> {
    let ds = load_dataset(root)?;
    let pack = load_pack(cfg)?;
    let pretrained = match init {
        Init::Scratch => None,
        Init::Pretrained(p) => Some(load_store(p)?),
    };
    let dir = run_dir(cfg, "finetune", format!("{}_b{}_{}_s{}", cfg.pack, cfg.budget, init.label(), cfg.finetune.seed));
    prepare_output(&dir, overwrite)?;
    let train = split_objects(&ds, cfg, pack.budget(cfg.budget)?)?;
    let val = split_objects(&ds, cfg, &pack.val)?;
    let store =
        init_finetune_store(&cfg.tokenizer, &cfg.encoder, &cfg.finetune.head, pretrained.as_ref(), cfg.finetune.seed)?;
    let out = finetune(
        store,
        pretrained.is_some(),
        &cfg.encoder,
        &cfg.finetune,
        &train,
        Some(&val),
        cfg.threshold,
        cfg.coverage_norm,
    )?;
    let report = out.val.expect("validation split given");
    let summary = RunSummary {
        curve: CurvePoint {
            budget: cfg.budget,
            init: init.label().into(),
            seed: cfg.finetune.seed,
            rmse_top_logit: report.rmse_top_logit,
            coverage: report.coverage_at_threshold,
            selection_gap: report.selection_gap,
        },
        val: report.clone(),
    };
    save_store(&dir.join("model.ckpt"), &out.store)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.log))?;
    write(&dir.join("config.json"), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    println!("{report}");
    println!("run {}", dir.display());
    Ok(())
}

fn cmd_eval(run: &Path, split: Split) -> Result<(), Error> {
    let cfg_path = run.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::Ingestion(format!("{}: {e}", cfg_path.display())))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", cfg_path.display())))?;
    let root = cfg.resolve_data_root(None)?;
    log_config(&Command::Eval { run: run.to_path_buf(), split }, &cfg);
    let ds = load_dataset(&root)?;
    let pack = load_pack(&cfg)?;
    let store = load_store(&run.join("model.ckpt"))?;
    let ids = match split {
        Split::Val => &pack.val,
        Split::Test => &pack.test,
    };
    let objects = split_objects(&ds, &cfg, ids)?;
    let report = evaluate_split(&store, &cfg.encoder, &cfg.finetune.head, &objects, cfg.threshold, cfg.coverage_norm)?;
    let name = format!("{split:?}").to_lowercase();
    let csv = format!("split,{}\n{name},{}\n", EvalReport::CSV_HEADER, report.csv_row());
    write(&run.join(format!("eval_{name}.csv")), &csv)?;
    println!("{report}");
    print!("{csv}");
    Ok(())
}

fn cmd_gradcheck() -> Result<(), Error> {
    let mut failed = Vec::new();
    let mut results = checks::op_suite(0, checks::STEP, checks::TOLERANCE)?;
    results.push(("model", checks::model_check(0, checks::STEP, checks::TOLERANCE)?));
    for (name, rep) in &results {
        let status = if rep.passed() { "ok" } else { "FAIL" };
        println!("{name:<16} {status:<4} checked={:<5} max_rel_error={:.3e}", rep.checked, rep.max_rel_error);
        if !rep.passed() {
            failed.push(*name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_export_curves(cfg: &RunConfig, file: Option<&Path>) -> Result<(), Error> {
    let dir = cfg.output_dir.join("finetune");
    let entries = fs::read_dir(&dir).map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?;
    let mut points = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path().join("summary.json");
        if !path.is_file() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let s: RunSummary =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        points.push(s.curve);
    }
    if points.is_empty() {
        return Err(Error::Ingestion(format!("no fine-tuning summaries under {}", dir.display())));
    }
    points.sort_by(|a, b| (a.budget, &a.init, a.seed).cmp(&(b.budget, &b.init, b.seed)));
    let out = file.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join("curves.csv"));
    write(&out, &curve_csv(&points))?;
    for (budget, init, mean, sd, n) in summarize_curve(&points) {
        println!("budget {budget:>3}% {init:<10} top-logit RMSE {mean:.4} +- {sd:.4} (n={n})");
    }
    println!("curve {}", out.display());
    Ok(())
}
