//! Command-line entry points wiring ingest, training, evaluation, and the
//! synthetic world generator together.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{default_grid, load_config, parse_grid};
use crate::data::{
    binarize_by_user_mean, eligible_eval_users, filter_tags, parse_ratings, parse_tags,
    read_id_map, read_split, read_tag_table, split_three_way, write_id_map, write_split,
    write_summary, write_tag_table, RatingsFormat, SplitAssignment, TagTable,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, rank_items, EvalReport};
use crate::model::{distance, load_checkpoint};
use crate::synth::{generate, GroundTruth, PlantedWorld};
use crate::trainer::{repeat_runs, run_grid_search, train, write_grid_csv, TrainConfig, TrainMode};

#[derive(Debug, Parser)]
#[command(name = "tccml", version, about = "Two-class collaborative metric learning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Ml1m,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Cml,
    Tccml,
}

impl ModeArg {
    fn to_mode(self) -> TrainMode {
        match self {
            ModeArg::Cml => TrainMode::Cml,
            ModeArg::Tccml => TrainMode::Tccml,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ingest raw ratings, binarize per user mean, and write the three-way
    /// split plus id maps (and filtered tags when given).
    Prepare {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long, value_enum)]
        format: FormatArg,
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Train one model on a prepared data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// overrides the config file's mode when given
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// report CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both modes several times each and tabulate test metrics.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k nearest unseen items for one user.
    Recommend {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// original (source-file) user id
        #[arg(long)]
        user: String,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Generate a planted synthetic dataset in prepared-directory form.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        groups: usize,
        #[arg(long, default_value_t = 200)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 30)]
        ratings_per_user: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// defaults to seed+1
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Search a hyperparameter grid by validation recall@50.
    Grid {
        #[arg(long)]
        data: PathBuf,
        /// grid file; the documented default grid when omitted
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything reproducing a run needs; written to the output directory
/// before any training step runs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub created_unix: u64,
    pub seed: u64,
    /// input path -> sha256
    pub inputs: BTreeMap<String, String>,
    pub config: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Ingest(format!("cannot read {}: {}", path.display(), e)))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect())
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn config_snapshot(config: &TrainConfig<f32>) -> BTreeMap<String, String> {
    let hp = &config.hp;
    let early_stop = format!("recall@{}", config.early_stop.k());
    BTreeMap::from([
        ("dim".into(), hp.dim.to_string()),
        ("margin".into(), hp.margin.to_string()),
        ("alpha".into(), hp.alpha.to_string()),
        ("lambda1".into(), hp.lambda1.to_string()),
        ("lambda2".into(), hp.lambda2.to_string()),
        ("lambda_f".into(), hp.lambda_f.to_string()),
        ("batch_size".into(), hp.batch_size.to_string()),
        ("candidates".into(), hp.candidates.to_string()),
        ("learning_rate".into(), hp.learning_rate.to_string()),
        ("seed".into(), hp.seed.to_string()),
        ("warp".into(), hp.warp.to_string()),
        ("mode".into(), config.mode.name().to_string()),
        ("max_steps".into(), config.max_steps.to_string()),
        ("eval_every".into(), config.eval_every.to_string()),
        ("patience".into(), config.patience.to_string()),
        ("early_stop".into(), early_stop),
    ])
}

fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<()> {
    let file = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), manifest)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// A prepared data directory: splits plus the id vocabulary.
pub struct LoadedData {
    pub splits: SplitAssignment,
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

const SPLIT_FILES: [&str; 3] = ["train.csv", "validation.csv", "test.csv"];

pub fn read_data_dir(dir: &Path) -> Result<LoadedData> {
    let user_ids = read_id_map(&dir.join("users.csv"))?;
    let item_ids = read_id_map(&dir.join("items.csv"))?;
    let (n_users, n_items) = (user_ids.len(), item_ids.len());
    let train = read_split(&dir.join(SPLIT_FILES[0]), n_users, n_items)?;
    let validation = read_split(&dir.join(SPLIT_FILES[1]), n_users, n_items)?;
    let test = read_split(&dir.join(SPLIT_FILES[2]), n_users, n_items)?;
    Ok(LoadedData {
        splits: SplitAssignment { train, validation, test, seed: 0 },
        user_ids,
        item_ids,
    })
}

fn load_tags_if_any(dir: &Path, n_items: usize) -> Result<Option<TagTable>> {
    let tags = dir.join("tags.csv");
    let map = dir.join("tag_map.csv");
    if tags.exists() && map.exists() {
        Ok(Some(read_tag_table(&tags, &map, n_items)?))
    } else {
        Ok(None)
    }
}

fn fingerprint_data_dir(dir: &Path, inputs: &mut BTreeMap<String, String>) -> Result<()> {
    let mut files: Vec<PathBuf> = SPLIT_FILES.iter().map(|f| dir.join(f)).collect();
    files.push(dir.join("users.csv"));
    files.push(dir.join("items.csv"));
    for optional in ["tags.csv", "tag_map.csv"] {
        let path = dir.join(optional);
        if path.exists() {
            files.push(path);
        }
    }
    for path in files {
        inputs.insert(path.display().to_string(), sha256_hex(&path)?);
    }
    Ok(())
}

fn base_config(config_path: Option<&Path>, mode: Option<ModeArg>) -> Result<TrainConfig<f32>> {
    let mut config = TrainConfig::<f32>::default();
    if let Some(path) = config_path {
        config = load_config(path, config)?;
    }
    if let Some(mode) = mode {
        config.mode = mode.to_mode();
    }
    Ok(config)
}

pub fn cmd_prepare(
    ratings: &Path,
    format: RatingsFormat,
    tags: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let table = parse_ratings(ratings, format)?;
    let summary = table.summary();
    let signed = binarize_by_user_mean(&table);
    let splits = split_three_way(&signed, table.n_users, table.n_items, seed);

    std::fs::create_dir_all(out)?;
    write_split(&out.join(SPLIT_FILES[0]), &splits.train)?;
    write_split(&out.join(SPLIT_FILES[1]), &splits.validation)?;
    write_split(&out.join(SPLIT_FILES[2]), &splits.test)?;
    write_id_map(&out.join("users.csv"), &table.user_ids)?;
    write_id_map(&out.join("items.csv"), &table.item_ids)?;
    write_summary(&out.join("summary.csv"), &summary)?;
    if let Some(tags_path) = tags {
        let raw = parse_tags(tags_path, &table)?;
        let filtered = filter_tags(&raw, table.n_items);
        write_tag_table(&out.join("tags.csv"), &out.join("tag_map.csv"), &filtered)?;
        println!("tags: {} kept across {} items", filtered.n_tags, table.n_items);
    }

    let mut inputs = BTreeMap::new();
    inputs.insert(ratings.display().to_string(), sha256_hex(ratings)?);
    if let Some(t) = tags {
        inputs.insert(t.display().to_string(), sha256_hex(t)?);
    }
    write_manifest(
        out,
        &RunManifest {
            command: "prepare".into(),
            created_unix: unix_now(),
            seed,
            inputs,
            config: BTreeMap::new(),
            outputs: artifact_list(out),
        },
    )?;

    println!("users: {}", summary.n_users);
    println!("items: {}", summary.n_items);
    println!("ratings: {}", summary.n_ratings);
    println!("density: {:.6}", summary.density);
    println!("avg rating: {:.6}", summary.avg_rating);
    println!(
        "split sizes: {} train / {} validation / {} test",
        splits.train.interactions.len(),
        splits.validation.interactions.len(),
        splits.test.interactions.len()
    );
    Ok(())
}

fn artifact_list(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .collect()
        })
        .unwrap_or_default();
    names.sort();
    names
}

pub fn cmd_train(
    data: &Path,
    mode: Option<ModeArg>,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let loaded = read_data_dir(data)?;
    let mut config = base_config(config_path, mode)?;
    config.checkpoint_path = Some(out.join("model.bin"));
    let features = load_tags_if_any(data, loaded.item_ids.len())?;

    std::fs::create_dir_all(out)?;
    let mut inputs = BTreeMap::new();
    fingerprint_data_dir(data, &mut inputs)?;
    if let Some(p) = config_path {
        inputs.insert(p.display().to_string(), sha256_hex(p)?);
    }
    write_manifest(
        out,
        &RunManifest {
            command: "train".into(),
            created_unix: unix_now(),
            seed: config.hp.seed,
            inputs,
            config: config_snapshot(&config),
            outputs: vec!["model.bin".into(), "train_log.csv".into(), "manifest.json".into()],
        },
    )?;

    let (_, log) = train(&config, &loaded.splits.train, &loaded.splits.validation, features.as_ref())?;
    log.write_csv(&out.join("train_log.csv"))?;

    let k = config.early_stop.k();
    let best = log.records.iter().max_by(|a, b| {
        let va = if k == 50 { a.recall_at_50 } else { a.recall_at_10 };
        let vb = if k == 50 { b.recall_at_50 } else { b.recall_at_10 };
        va.partial_cmp(&vb).unwrap().then(b.step.cmp(&a.step))
    });
    println!("mode: {}", config.mode.name());
    match best {
        Some(best) => {
            let metric = if k == 50 { best.recall_at_50 } else { best.recall_at_10 };
            println!("best validation recall@{}: {:.6} at step {}", k, metric, best.step);
        }
        // max_steps = 0: no evaluation ran and the checkpoint is the initializer.
        None => println!("no training steps requested"),
    }
    println!("checkpoint: {}", out.join("model.bin").display());
    Ok(())
}

pub fn cmd_eval(model_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let loaded = read_data_dir(data)?;
    let (model, _) = load_checkpoint::<f32>(model_path)?;
    if model.n_users() != loaded.user_ids.len() || model.n_items() != loaded.item_ids.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}x{} but the data directory has {} users and {} items",
            model.n_users(),
            model.n_items(),
            loaded.user_ids.len(),
            loaded.item_ids.len()
        )));
    }
    let report = evaluate(&model, &loaded.splits)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    report.write_csv(out)?;
    print!("{}", report);
    Ok(())
}

/// Metric columns of the comparison tables, in report order.
const COMPARISON_COLUMNS: &str = "recall@10,recall@50,precision@10,precision@50,ni@10,ni@50";

fn metrics_cells(report: &EvalReport) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
        report.recall_at(10).unwrap(),
        report.recall_at(50).unwrap(),
        report.precision_at(10).unwrap(),
        report.precision_at(50).unwrap(),
        report.ni_at(10).unwrap(),
        report.ni_at(50).unwrap(),
    )
}

pub fn cmd_compare(
    data: &Path,
    config_path: Option<&Path>,
    runs: usize,
    out: &Path,
) -> Result<()> {
    let loaded = read_data_dir(data)?;
    let base = base_config(config_path, None)?;
    let features = load_tags_if_any(data, loaded.item_ids.len())?;

    std::fs::create_dir_all(out)?;
    let mut inputs = BTreeMap::new();
    fingerprint_data_dir(data, &mut inputs)?;
    if let Some(p) = config_path {
        inputs.insert(p.display().to_string(), sha256_hex(p)?);
    }
    write_manifest(
        out,
        &RunManifest {
            command: format!("compare --runs {}", runs),
            created_unix: unix_now(),
            seed: base.hp.seed,
            inputs,
            config: config_snapshot(&base),
            outputs: vec![
                "comparison.csv".into(),
                "comparison_runs.csv".into(),
                "manifest.json".into(),
            ],
        },
    )?;

    let mut summary = BufWriter::new(File::create(out.join("comparison.csv"))?);
    writeln!(summary, "method,{}", COMPARISON_COLUMNS)?;
    let mut per_run = BufWriter::new(File::create(out.join("comparison_runs.csv"))?);
    writeln!(per_run, "method,run,{}", COMPARISON_COLUMNS)?;
    for mode in [TrainMode::Cml, TrainMode::Tccml] {
        let mut config = base.clone();
        config.mode = mode;
        let (mean, reports) = repeat_runs(&config, &loaded.splits, features.as_ref(), runs)?;
        writeln!(summary, "{},{}", mode.name(), metrics_cells(&mean))?;
        for (run, report) in reports.iter().enumerate() {
            writeln!(per_run, "{},{},{}", mode.name(), run, metrics_cells(report))?;
        }
        println!("{}: {}", mode.name(), metrics_cells(&mean));
    }
    Ok(())
}

pub fn cmd_recommend(model_path: &Path, data: &Path, user: &str, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Eval("k must be at least 1".into()));
    }
    let loaded = read_data_dir(data)?;
    let (model, _) = load_checkpoint::<f32>(model_path)?;
    if model.n_users() != loaded.user_ids.len() || model.n_items() != loaded.item_ids.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint is {}x{} but the data directory has {} users and {} items",
            model.n_users(),
            model.n_items(),
            loaded.user_ids.len(),
            loaded.item_ids.len()
        )));
    }
    let dense = loaded
        .user_ids
        .iter()
        .position(|id| id == user)
        .ok_or_else(|| Error::Eval(format!("unknown user id '{}'", user)))?;

    let splits = &loaded.splits;
    let known: HashSet<usize> = [&splits.train, &splits.validation, &splits.test]
        .iter()
        .flat_map(|t| t.items_of(dense))
        .collect();
    let list = rank_items(&model, dense, &known);
    let u = model.users.row(dense);
    for &item in list.items.iter().take(k) {
        let d = distance(u, model.items.row(item));
        println!("{}\t{:.6}", loaded.item_ids[item], d);
    }
    Ok(())
}

fn write_groundtruth(dir: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("groundtruth_users.csv"))?);
    writeln!(w, "user_id,group")?;
    for (user, group) in truth.user_group.iter().enumerate() {
        writeln!(w, "{},{}", user, group)?;
    }
    let mut w = BufWriter::new(File::create(dir.join("groundtruth_items.csv"))?);
    writeln!(w, "item_id,cluster")?;
    for (item, cluster) in truth.item_cluster.iter().enumerate() {
        writeln!(w, "{},{}", item, cluster)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_synth(
    out: &Path,
    groups: usize,
    users: usize,
    items: usize,
    ratings_per_user: usize,
    noise: f64,
    seed: u64,
    split_seed: Option<u64>,
) -> Result<()> {
    let world = PlantedWorld::standard(groups, users, items, ratings_per_user, noise, seed)?;
    let (interactions, truth) = generate(&world)?;
    let split_seed = split_seed.unwrap_or_else(|| seed.wrapping_add(1));
    let splits = split_three_way(&interactions, world.n_users, world.n_items, split_seed);

    std::fs::create_dir_all(out)?;
    write_split(&out.join(SPLIT_FILES[0]), &splits.train)?;
    write_split(&out.join(SPLIT_FILES[1]), &splits.validation)?;
    write_split(&out.join(SPLIT_FILES[2]), &splits.test)?;
    let identity = |n: usize| (0..n).map(|i| i.to_string()).collect::<Vec<_>>();
    write_id_map(&out.join("users.csv"), &identity(world.n_users))?;
    write_id_map(&out.join("items.csv"), &identity(world.n_items))?;
    write_groundtruth(out, &truth)?;
    write_manifest(
        out,
        &RunManifest {
            command: format!(
                "synth --groups {} --users {} --items {} --ratings-per-user {} --noise {} --seed {} --split-seed {}",
                groups, users, items, ratings_per_user, noise, seed, split_seed
            ),
            created_unix: unix_now(),
            seed,
            inputs: BTreeMap::new(),
            config: BTreeMap::new(),
            outputs: artifact_list(out),
        },
    )?;

    println!(
        "planted world: {} users, {} items, {} interactions, {} eligible test users",
        world.n_users,
        world.n_items,
        interactions.len(),
        eligible_eval_users(&splits.test).len()
    );
    Ok(())
}

pub fn cmd_grid(
    data: &Path,
    grid_path: Option<&Path>,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let loaded = read_data_dir(data)?;
    let base = base_config(config_path, None)?;
    let grid = match grid_path {
        Some(path) => parse_grid(path)?,
        None => default_grid(),
    };
    let features = load_tags_if_any(data, loaded.item_ids.len())?;

    std::fs::create_dir_all(out)?;
    let mut inputs = BTreeMap::new();
    fingerprint_data_dir(data, &mut inputs)?;
    for p in [grid_path, config_path].into_iter().flatten() {
        inputs.insert(p.display().to_string(), sha256_hex(p)?);
    }
    write_manifest(
        out,
        &RunManifest {
            command: "grid".into(),
            created_unix: unix_now(),
            seed: base.hp.seed,
            inputs,
            config: config_snapshot(&base),
            outputs: vec!["grid_results.csv".into(), "best.conf".into(), "manifest.json".into()],
        },
    )?;

    let (best, points) =
        run_grid_search(&base, &grid, &loaded.splits.train, &loaded.splits.validation, features.as_ref())?;
    write_grid_csv(&out.join("grid_results.csv"), &points)?;

    let mut w = BufWriter::new(File::create(out.join("best.conf"))?);
    for (key, value) in config_snapshot(&best) {
        writeln!(w, "{} = {}", key, value)?;
    }
    drop(w);

    let best_score = points
        .iter()
        .map(|p| p.recall_at_50)
        .fold(f64::NEG_INFINITY, f64::max);
    println!("{} grid points evaluated", points.len());
    println!("best validation recall@50: {:.6}", best_score);
    println!("best config: {}", out.join("best.conf").display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { ratings, format, tags, out, seed } => {
            let format = match format {
                FormatArg::Ml1m => RatingsFormat::Ml1m,
                FormatArg::Csv => RatingsFormat::Csv,
            };
            cmd_prepare(&ratings, format, tags.as_deref(), &out, seed)
        }
        Command::Train { data, mode, config, out } => {
            cmd_train(&data, mode, config.as_deref(), &out)
        }
        Command::Eval { model, data, out } => cmd_eval(&model, &data, &out),
        Command::Compare { data, config, runs, out } => {
            cmd_compare(&data, config.as_deref(), runs, &out)
        }
        Command::Recommend { model, data, user, k } => cmd_recommend(&model, &data, &user, k),
        Command::Synth { out, groups, users, items, ratings_per_user, noise, seed, split_seed } => {
            cmd_synth(&out, groups, users, items, ratings_per_user, noise, seed, split_seed)
        }
        Command::Grid { data, grid, config, out } => {
            cmd_grid(&data, grid.as_deref(), config.as_deref(), &out)
        }
    }
}
