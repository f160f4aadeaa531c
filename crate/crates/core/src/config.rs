//! Flat `key = value` configuration files and grid specifications.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::trainer::{EarlyStopMetric, TrainConfig, TrainMode};

/// Lines of a key-value file: (line number, key, value). `#` starts a
/// comment; blank lines are skipped.
fn parse_kv_file(path: &Path) -> Result<Vec<(usize, String, String)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut pairs = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected 'key = value', got '{}'",
                path.display(),
                lineno,
                line
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: empty key or value",
                path.display(),
                lineno
            )));
        }
        pairs.push((lineno, key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

fn bad_value(key: &str, value: &str) -> Error {
    Error::Config(format!("invalid value '{}' for key '{}'", value, key))
}

/// Set one parameter by config-file key. Shared by config loading and grid
/// search so both spell parameters identically.
pub fn apply_param<S: Real>(config: &mut TrainConfig<S>, key: &str, value: &str) -> Result<()> {
    let real = |v: &str| -> Result<S> {
        v.parse::<f64>().map(S::from_f64_lossy).map_err(|_| bad_value(key, v))
    };
    let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| bad_value(key, v)) };
    match key {
        "dim" => config.hp.dim = int(value)?,
        "margin" => config.hp.margin = real(value)?,
        "alpha" => config.hp.alpha = real(value)?,
        "lambda1" => config.hp.lambda1 = real(value)?,
        "lambda2" => config.hp.lambda2 = real(value)?,
        "lambda_f" => config.hp.lambda_f = real(value)?,
        "batch_size" => config.hp.batch_size = int(value)?,
        "candidates" => config.hp.candidates = int(value)?,
        "learning_rate" => config.hp.learning_rate = real(value)?,
        "seed" => config.hp.seed = value.parse().map_err(|_| bad_value(key, value))?,
        "warp" => {
            config.hp.warp = match value {
                "true" => true,
                "false" => false,
                _ => return Err(bad_value(key, value)),
            }
        }
        "mode" => config.mode = TrainMode::parse(value)?,
        "max_steps" => config.max_steps = int(value)?,
        "eval_every" => config.eval_every = int(value)?,
        "patience" => config.patience = int(value)?,
        "early_stop" => {
            config.early_stop = match value {
                "recall@50" => EarlyStopMetric::RecallAt50,
                "recall@10" => EarlyStopMetric::RecallAt10,
                _ => return Err(bad_value(key, value)),
            }
        }
        _ => return Err(Error::Config(format!("unknown config key '{}'", key))),
    }
    Ok(())
}

/// Apply a config file on top of `base`. Later lines win on repeated keys.
pub fn load_config<S: Real>(path: &Path, base: TrainConfig<S>) -> Result<TrainConfig<S>> {
    let mut config = base;
    for (lineno, key, value) in parse_kv_file(path)? {
        apply_param(&mut config, &key, &value).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}:{}: {}", path.display(), lineno, msg)),
            other => other,
        })?;
    }
    config.validate()?;
    Ok(config)
}

/// Parse a grid file: each line `key = v1,v2,...` declares one axis.
pub fn parse_grid(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut grid: Vec<(String, Vec<String>)> = Vec::new();
    for (lineno, key, value) in parse_kv_file(path)? {
        if grid.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "{}:{}: duplicate grid key '{}'",
                path.display(),
                lineno,
                key
            )));
        }
        let values: Vec<String> =
            value.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: grid key '{}' has no values",
                path.display(),
                lineno,
                key
            )));
        }
        grid.push((key, values));
    }
    if grid.is_empty() {
        return Err(Error::Config(format!("{}: grid file declares no axes", path.display())));
    }
    Ok(grid)
}

/// The documented default search space.
pub fn default_grid() -> Vec<(String, Vec<String>)> {
    let values = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    vec![
        ("lambda1".to_string(), values(&["0.05", "0.1", "0.5"])),
        ("lambda2".to_string(), values(&["0.05", "0.1", "0.5"])),
        ("alpha".to_string(), values(&["1", "2"])),
        ("margin".to_string(), values(&["0.5", "1.0"])),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.path().join(name);
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn loads_full_config_with_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            &dir,
            "train.conf",
            "# experiment settings\n\
             dim = 8\n\
             margin = 1.0   # wider margin\n\
             lambda1 = 0.5\n\
             \n\
             mode = cml\n\
             warp = false\n\
             early_stop = recall@10\n\
             max_steps = 123\n\
             seed = 9\n",
        );
        let config = load_config::<f64>(&path, TrainConfig::default()).unwrap();
        assert_eq!(config.hp.dim, 8);
        assert_eq!(config.hp.margin, 1.0);
        assert_eq!(config.hp.lambda1, 0.5);
        assert_eq!(config.mode, TrainMode::Cml);
        assert!(!config.hp.warp);
        assert_eq!(config.early_stop, EarlyStopMetric::RecallAt10);
        assert_eq!(config.max_steps, 123);
        assert_eq!(config.hp.seed, 9);
        assert_eq!(config.hp.alpha, 2.0, "untouched keys keep defaults");
    }

    #[test]
    fn later_lines_override_earlier_ones() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "c.conf", "dim = 8\ndim = 16\n");
        let config = load_config::<f64>(&path, TrainConfig::default()).unwrap();
        assert_eq!(config.hp.dim, 16);
    }

    #[test]
    fn parse_error_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "c.conf", "dim = 8\n\nthis is not a pair\n");
        let err = load_config::<f64>(&path, TrainConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains(":3:"), "got: {}", err);
    }

    #[test]
    fn unknown_key_and_bad_value_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let unknown = write_file(&dir, "a.conf", "momentum = 0.9\n");
        let err = load_config::<f64>(&unknown, TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("momentum"));

        let bad = write_file(&dir, "b.conf", "dim = eight\n");
        let err = load_config::<f64>(&bad, TrainConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("eight"));
    }

    #[test]
    fn invalid_final_config_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "c.conf", "alpha = 0.5\n");
        assert!(load_config::<f64>(&path, TrainConfig::default()).is_err());
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let err =
            load_config::<f64>(Path::new("/nonexistent.conf"), TrainConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn grid_lines_become_axes_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "grid.conf", "lambda1 = 0, 0.1\nmargin = 0.5,1.0,2.0\n");
        let grid = parse_grid(&path).unwrap();
        assert_eq!(
            grid,
            vec![
                ("lambda1".to_string(), vec!["0".to_string(), "0.1".to_string()]),
                (
                    "margin".to_string(),
                    vec!["0.5".to_string(), "1.0".to_string(), "2.0".to_string()]
                ),
            ]
        );
    }

    #[test]
    fn duplicate_grid_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(&dir, "grid.conf", "lambda1 = 0\nlambda1 = 0.1\n");
        assert!(parse_grid(&path).is_err());
    }

    #[test]
    fn default_grid_covers_the_documented_axes() {
        let grid = default_grid();
        let keys: Vec<&str> = grid.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, vec!["lambda1", "lambda2", "alpha", "margin"]);
        let mut config = TrainConfig::<f64>::default();
        for (key, values) in &grid {
            for value in values {
                apply_param(&mut config, key, value).unwrap();
            }
        }
    }
}
