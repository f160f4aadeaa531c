//! Training loop with validation-based early stopping, grid search, and
//! repeated runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{SignedTable, SplitAssignment, TagTable};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_on, EvalReport, DEFAULT_KS};
use crate::loss::{grad_total_loss, total_loss};
use crate::model::{init_model_with_tags, save_checkpoint, EmbeddingModel, HyperParams};
use crate::optim::{adam_step, AdamParams, AdamState};
use crate::sampler::SamplerState;
use crate::scalar::Real;

/// Offset between the init RNG stream and the sampler RNG stream, so the
/// two never coincide for nearby seeds.
const SAMPLER_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Which objective configuration to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Baseline: hinge ranking only; both push penalties coerced to 0.
    Cml,
    /// Full objective with explicit-negative and dissimilar-pair pushes.
    Tccml,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "cml" => Ok(TrainMode::Cml),
            "tccml" => Ok(TrainMode::Tccml),
            other => Err(Error::Config(format!("unknown mode '{}'", other))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Cml => "cml",
            TrainMode::Tccml => "tccml",
        }
    }
}

/// Validation metric watched for early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopMetric {
    RecallAt50,
    RecallAt10,
}

impl EarlyStopMetric {
    pub fn k(self) -> usize {
        match self {
            EarlyStopMetric::RecallAt50 => 50,
            EarlyStopMetric::RecallAt10 => 10,
        }
    }

    fn of(self, report: &EvalReport) -> f64 {
        report.recall_at(self.k()).expect("default ks include the early-stop k")
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig<S> {
    pub hp: HyperParams<S>,
    pub mode: TrainMode,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub early_stop: EarlyStopMetric,
    pub checkpoint_path: Option<PathBuf>,
}

impl<S: Real> Default for TrainConfig<S> {
    fn default() -> TrainConfig<S> {
        TrainConfig {
            hp: HyperParams::default(),
            mode: TrainMode::Tccml,
            max_steps: 10_000,
            eval_every: 500,
            patience: 5,
            early_stop: EarlyStopMetric::RecallAt50,
            checkpoint_path: None,
        }
    }
}

impl<S: Real> TrainConfig<S> {
    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(())
    }

    /// Hyperparameters with the mode applied: CML zeroes both push weights.
    pub fn effective_hp(&self) -> HyperParams<S> {
        let mut hp = self.hp.clone();
        if self.mode == TrainMode::Cml {
            hp.lambda1 = S::zero();
            hp.lambda2 = S::zero();
        }
        hp
    }
}

/// One validation evaluation during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    /// mean batch loss since the previous record (0 for the step-0 record)
    pub train_loss: f64,
    pub recall_at_10: f64,
    pub recall_at_50: f64,
    pub ni_at_10: f64,
    pub ni_at_50: f64,
    pub wall_ms: u64,
}

/// Append-only evaluation history; steps strictly increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    fn push(&mut self, record: TrainRecord) {
        if let Some(last) = self.records.last() {
            assert!(record.step > last.step, "training log steps must increase");
        }
        self.records.push(record);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,train_loss,recall@10,recall@50,ni@10,ni@50,wall_ms")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                r.step, r.train_loss, r.recall_at_10, r.recall_at_50, r.ni_at_10, r.ni_at_50, r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Train on `train_split`, early-stopping on `validation`; returns the
/// checkpoint that scored best on the early-stop metric plus the log.
///
/// The test split never reaches this function.
pub fn train<S: Real>(
    config: &TrainConfig<S>,
    train_split: &SignedTable,
    validation: &SignedTable,
    features: Option<&TagTable>,
) -> Result<(EmbeddingModel<S>, TrainLog)> {
    config.validate()?;
    let hp = config.effective_hp();
    if train_split.n_positive() == 0 {
        return Err(Error::Train("train split has no positive interactions".into()));
    }
    if hp.lambda_f > S::zero() && features.is_none() {
        return Err(Error::Train("lambda_f > 0 but no tag table provided".into()));
    }

    let started = Instant::now();
    let n_tags = if hp.lambda_f > S::zero() { features.map(|t| t.n_tags) } else { None };
    let mut model = init_model_with_tags(&hp, train_split.n_users, train_split.n_items, n_tags)?;
    let mut log = TrainLog::default();
    if config.max_steps == 0 {
        // The checkpoint is the untouched initializer.
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(&model, Some(&AdamState::new(&model)), path)?;
        }
        return Ok((model, log));
    }

    let mut adam = AdamState::new(&model);
    let adam_params = AdamParams::default();
    let mut sampler = SamplerState::new(train_split, hp.seed.wrapping_add(SAMPLER_SEED_STRIDE))?;
    let loss_features = if hp.lambda_f > S::zero() { features } else { None };

    let evaluate_into =
        |model: &EmbeddingModel<S>, log: &mut TrainLog, step: usize, train_loss: f64| -> Result<f64> {
            let report = evaluate_on(model, validation, &[train_split], &DEFAULT_KS)?;
            log.push(TrainRecord {
                step,
                train_loss,
                recall_at_10: report.recall_at(10).unwrap(),
                recall_at_50: report.recall_at(50).unwrap(),
                ni_at_10: report.ni_at(10).unwrap(),
                ni_at_50: report.ni_at(50).unwrap(),
                wall_ms: started.elapsed().as_millis() as u64,
            });
            Ok(config.early_stop.of(&report))
        };

    let mut best_metric = evaluate_into(&model, &mut log, 0, 0.0)?;
    let mut best_model = model.clone();
    let mut best_adam = adam.clone();
    let mut strikes = 0usize;
    let mut window_loss = 0.0f64;
    let mut window_len = 0usize;

    for step in 1..=config.max_steps {
        let batch = sampler.sample_batch(&model, &hp);
        let loss = total_loss(&batch, &model, &hp, loss_features).as_f64();
        if !loss.is_finite() {
            return Err(Error::Train(format!("non-finite batch loss at step {}", step)));
        }
        window_loss += loss;
        window_len += 1;

        let grads = grad_total_loss(&batch, &model, &hp, loss_features);
        adam_step(&mut model, &mut adam, &grads, hp.learning_rate, &adam_params)?;

        if step % config.eval_every == 0 {
            let mean_loss = window_loss / window_len as f64;
            window_loss = 0.0;
            window_len = 0;
            let metric = evaluate_into(&model, &mut log, step, mean_loss)?;
            if metric > best_metric {
                best_metric = metric;
                best_model = model.clone();
                best_adam = adam.clone();
                strikes = 0;
            } else {
                strikes += 1;
                if strikes >= config.patience {
                    break;
                }
            }
        }
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&best_model, Some(&best_adam), path)?;
    }
    Ok((best_model, log))
}

/// One evaluated grid point: parameter assignments in key order plus the
/// validation score the trained model reached.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub assignments: Vec<(String, String)>,
    pub recall_at_50: f64,
}

/// Train one model per grid point and keep the best by validation R@50.
///
/// Keys are ordered alphabetically, values in listed order, and points are
/// visited in odometer order (first key slowest); score ties keep the
/// earliest point.
pub fn run_grid_search<S: Real>(
    base: &TrainConfig<S>,
    grid: &[(String, Vec<String>)],
    train_split: &SignedTable,
    validation: &SignedTable,
    features: Option<&TagTable>,
) -> Result<(TrainConfig<S>, Vec<GridPoint>)> {
    if grid.is_empty() || grid.iter().any(|(_, values)| values.is_empty()) {
        return Err(Error::Config("grid needs at least one value per key".into()));
    }
    let mut axes: Vec<(String, Vec<String>)> = grid.to_vec();
    axes.sort_by(|a, b| a.0.cmp(&b.0));

    let mut points = Vec::new();
    let mut best: Option<(f64, TrainConfig<S>)> = None;
    let mut cursor = vec![0usize; axes.len()];
    loop {
        let mut config = base.clone();
        let mut assignments = Vec::with_capacity(axes.len());
        for (axis, &value_idx) in axes.iter().zip(&cursor) {
            let value = &axis.1[value_idx];
            crate::config::apply_param(&mut config, &axis.0, value)?;
            assignments.push((axis.0.clone(), value.clone()));
        }
        let (model, _) = train(&config, train_split, validation, features)?;
        let report = evaluate_on(&model, validation, &[train_split], &DEFAULT_KS)?;
        let score = report.recall_at(50).unwrap();
        points.push(GridPoint { assignments, recall_at_50: score });
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, config));
        }

        let mut axis = axes.len();
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            cursor[axis] += 1;
            if cursor[axis] < axes[axis].1.len() {
                break;
            }
            cursor[axis] = 0;
        }
        if cursor.iter().all(|&i| i == 0) {
            break;
        }
    }
    Ok((best.expect("grid visited at least one point").1, points))
}

/// Write grid results as one row per point, assignment columns first.
pub fn write_grid_csv(path: &Path, points: &[GridPoint]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let keys: Vec<&str> =
        points.first().map(|p| p.assignments.iter().map(|(k, _)| k.as_str()).collect()).unwrap_or_default();
    writeln!(w, "{},recall@50", keys.join(","))?;
    for p in points {
        let values: Vec<&str> = p.assignments.iter().map(|(_, v)| v.as_str()).collect();
        writeln!(w, "{},{:.6}", values.join(","), p.recall_at_50)?;
    }
    Ok(())
}

/// Train `n_runs` models with seeds base, base+1, ... and evaluate each on
/// the test split; returns the element-wise mean report and the per-run
/// reports.
pub fn repeat_runs<S: Real>(
    config: &TrainConfig<S>,
    splits: &SplitAssignment,
    features: Option<&TagTable>,
    n_runs: usize,
) -> Result<(EvalReport, Vec<EvalReport>)> {
    if n_runs == 0 {
        return Err(Error::Train("n_runs must be >= 1".into()));
    }
    let mut reports = Vec::with_capacity(n_runs);
    for run in 0..n_runs {
        let mut cfg = config.clone();
        cfg.hp.seed = config.hp.seed.wrapping_add(run as u64);
        let (model, _) = train(&cfg, &splits.train, &splits.validation, features)?;
        reports.push(evaluate(&model, splits)?);
    }
    let mean = EvalReport::mean_of(&reports)?;
    Ok((mean, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_three_way, Class, SignedInteraction};
    use crate::model::init_model;
    use crate::synth::{generate, PlantedWorld};

    fn desk_splits(seed: u64) -> SplitAssignment {
        let world = PlantedWorld::default();
        let (interactions, _) = generate(&world).unwrap();
        split_three_way(&interactions, world.n_users, world.n_items, seed)
    }

    #[test]
    fn zero_steps_returns_the_initialized_model() {
        let splits = desk_splits(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, ..Default::default() },
            max_steps: 0,
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        };
        let (model, log) = train(&config, &splits.train, &splits.validation, None).unwrap();
        let init = init_model(&config.effective_hp(), splits.train.n_users, splits.train.n_items)
            .unwrap();
        assert_eq!(model, init);
        assert!(log.records.is_empty());

        let reference = dir.path().join("reference.bin");
        crate::model::save_checkpoint(&init, Some(&AdamState::new(&init)), &reference).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&reference).unwrap(),
            "zero-step run still writes the initializer checkpoint"
        );
    }

    #[test]
    fn cml_mode_zeroes_both_push_weights() {
        let config = TrainConfig::<f64> { mode: TrainMode::Cml, ..Default::default() };
        let hp = config.effective_hp();
        assert_eq!(hp.lambda1, 0.0);
        assert_eq!(hp.lambda2, 0.0);
        assert!(config.hp.lambda1 > 0.0, "original config untouched");
    }

    #[test]
    fn eval_cadence_and_monotone_steps() {
        let splits = desk_splits(2);
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, batch_size: 8, candidates: 3, ..Default::default() },
            max_steps: 60,
            eval_every: 20,
            ..Default::default()
        };
        let (_, log) = train(&config, &splits.train, &splits.validation, None).unwrap();
        let steps: Vec<usize> = log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 20, 40, 60]);
    }

    /// With the whole catalog inside the top 50, R@50 is 1.0 from step 0 and
    /// can never improve, so patience trips at the first scored evaluation
    /// and the baseline model is returned.
    #[test]
    fn early_stopping_restores_the_best_checkpoint() {
        use crate::synth::Affinity::{Dislikes as D, Likes as L, Unknown as U};
        let world = PlantedWorld {
            n_groups: 2,
            n_clusters: 3,
            affinity: vec![vec![L, U, D], vec![U, L, D]],
            cluster_sizes: vec![10, 10, 20],
            n_users: 30,
            n_items: 40,
            ratings_per_user: 18,
            noise: 0.05,
            seed: 1,
        };
        let (interactions, _) = generate(&world).unwrap();
        let splits = split_three_way(&interactions, world.n_users, world.n_items, 3);
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, batch_size: 8, candidates: 3, ..Default::default() },
            max_steps: 10_000,
            eval_every: 10,
            patience: 1,
            ..Default::default()
        };
        let (model, log) = train(&config, &splits.train, &splits.validation, None).unwrap();
        assert_eq!(log.records.len(), 2);
        assert_eq!(log.records[1].recall_at_50, 1.0);
        let init = init_model(&config.effective_hp(), splits.train.n_users, splits.train.n_items)
            .unwrap();
        assert_eq!(model, init, "baseline was the best checkpoint");
    }

    #[test]
    fn fixed_seed_reproduces_the_log() {
        let splits = desk_splits(4);
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, batch_size: 8, candidates: 3, ..Default::default() },
            max_steps: 40,
            eval_every: 20,
            ..Default::default()
        };
        let (model_a, log_a) = train(&config, &splits.train, &splits.validation, None).unwrap();
        let (model_b, log_b) = train(&config, &splits.train, &splits.validation, None).unwrap();
        assert_eq!(model_a, model_b);
        let semantic = |log: &TrainLog| -> Vec<(usize, f64, f64, f64, f64, f64)> {
            log.records
                .iter()
                .map(|r| (r.step, r.train_loss, r.recall_at_10, r.recall_at_50, r.ni_at_10, r.ni_at_50))
                .collect()
        };
        assert_eq!(semantic(&log_a), semantic(&log_b));
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let negatives_only = SignedTable::new(
            vec![SignedInteraction { user: 0, item: 0, class: Class::Negative }],
            1,
            2,
        );
        let validation = SignedTable::new(
            vec![SignedInteraction { user: 0, item: 1, class: Class::Positive }],
            1,
            2,
        );
        let config = TrainConfig::<f64>::default();
        assert!(train(&config, &negatives_only, &validation, None).is_err());
    }

    #[test]
    fn checkpoint_written_when_requested() {
        let splits = desk_splits(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        let config = TrainConfig::<f32> {
            hp: HyperParams { dim: 4, batch_size: 8, candidates: 3, ..Default::default() },
            max_steps: 20,
            eval_every: 10,
            checkpoint_path: Some(path.clone()),
            ..Default::default()
        };
        let (model, _) = train(&config, &splits.train, &splits.validation, None).unwrap();
        let (loaded, adam) = crate::model::load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded, model);
        assert!(adam.is_some());
    }

    #[test]
    fn singleton_grid_returns_that_point() {
        let splits = desk_splits(6);
        let base = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, batch_size: 8, candidates: 3, ..Default::default() },
            max_steps: 10,
            eval_every: 10,
            ..Default::default()
        };
        let grid = vec![("margin".to_string(), vec!["0.7".to_string()])];
        let (best, points) =
            run_grid_search(&base, &grid, &splits.train, &splits.validation, None).unwrap();
        assert_eq!(points.len(), 1);
        assert_eq!(best.hp.margin, 0.7);
        assert_eq!(points[0].assignments, vec![("margin".to_string(), "0.7".to_string())]);
    }

    #[test]
    fn tied_grid_scores_keep_the_first_point() {
        // max_steps=0 makes every point score identically at its baseline;
        // seeds differ per point only through the applied parameter, and
        // both margins leave the init model identical
        let splits = desk_splits(7);
        let base = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, ..Default::default() },
            max_steps: 0,
            ..Default::default()
        };
        let grid = vec![("margin".to_string(), vec!["0.5".to_string(), "1.0".to_string()])];
        let (best, points) =
            run_grid_search(&base, &grid, &splits.train, &splits.validation, None).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(points[0].recall_at_50, points[1].recall_at_50);
        assert_eq!(best.hp.margin, 0.5);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let splits = desk_splits(8);
        let base = TrainConfig::<f64>::default();
        assert!(run_grid_search(&base, &[], &splits.train, &splits.validation, None).is_err());
    }

    #[test]
    fn repeat_runs_identity_for_single_run() {
        let splits = desk_splits(9);
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, ..Default::default() },
            max_steps: 0,
            ..Default::default()
        };
        let (mean, runs) = repeat_runs(&config, &splits, None, 1).unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(mean.precision, runs[0].precision);
        assert_eq!(mean.recall, runs[0].recall);
        assert_eq!(mean.ni, runs[0].ni);
    }

    #[test]
    fn repeat_runs_averages_two_distinct_runs() {
        let splits = desk_splits(10);
        let config = TrainConfig::<f64> {
            hp: HyperParams { dim: 4, ..Default::default() },
            max_steps: 0,
            ..Default::default()
        };
        let (mean, runs) = repeat_runs(&config, &splits, None, 2).unwrap();
        assert_eq!(runs.len(), 2);
        assert_ne!(runs[0].recall, runs[1].recall, "different seeds, different models");
        for i in 0..mean.ks.len() {
            let want = (runs[0].recall[i] + runs[1].recall[i]) / 2.0;
            assert!((mean.recall[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn training_log_csv_shape() {
        let mut log = TrainLog::default();
        log.push(TrainRecord {
            step: 0,
            train_loss: 0.0,
            recall_at_10: 0.1,
            recall_at_50: 0.2,
            ni_at_10: 0.05,
            ni_at_50: 0.04,
            wall_ms: 3,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,train_loss,recall@10,recall@50,ni@10,ni@50,wall_ms\n"));
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    #[should_panic(expected = "steps must increase")]
    fn log_rejects_non_increasing_steps() {
        let mut log = TrainLog::default();
        let record = TrainRecord {
            step: 5,
            train_loss: 0.0,
            recall_at_10: 0.0,
            recall_at_50: 0.0,
            ni_at_10: 0.0,
            ni_at_50: 0.0,
            wall_ms: 0,
        };
        log.push(record.clone());
        log.push(record);
    }
}
