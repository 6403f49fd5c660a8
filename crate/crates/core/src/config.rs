//! Flat `key = value` experiment configs.
//!
//! Blank lines and lines starting with `#` are ignored. Keys:
//!
//! | key | default (backward / forward) |
//! |---|---|
//! | `task` | set by the command |
//! | `m` | 4 / 3 |
//! | `S` | 31 / 25 |
//! | `batch_size` | 256 |
//! | `learning_rate` | 1 / 0.2 |
//! | `max_steps` | 3000 / 20000 |
//! | `eval_every` | 50 / 10 |
//! | `test_set_size` | 1024 |
//! | `data_seed`, `init_seed`, `test_seed` | 1, 2, 3 |
//! | `final_eval_size` | 1024 |
//! | `eps0` | 0.05 |
//! | `test_max_depth` | 5 |
//! | `test_min_children`, `test_max_children` | 0, 3 |
//! | `test_max_nodes` | `S` |
//! | `test_retries` | 1000 |
//! | `trace_path`, `checkpoint_path`, `report_path` | unset |

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::embedding::Task;
use crate::error::{Error, Result};
use crate::training::ExperimentConfig;

pub const KEYS: [&str; 21] = [
    "task",
    "m",
    "S",
    "batch_size",
    "learning_rate",
    "max_steps",
    "eval_every",
    "test_set_size",
    "data_seed",
    "init_seed",
    "test_seed",
    "final_eval_size",
    "eps0",
    "test_max_depth",
    "test_min_children",
    "test_max_children",
    "test_max_nodes",
    "test_retries",
    "trace_path",
    "checkpoint_path",
    "report_path",
];

/// Parses `key = value` lines into ordered pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not `key=value`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

/// Applies pairs on top of `cfg`; later pairs win.
pub fn apply(cfg: &mut ExperimentConfig, pairs: &[(String, String)]) -> Result<()> {
    let mut max_nodes_set = false;
    for (k, v) in pairs {
        match k.as_str() {
            "task" => {
                let t: Task = v.parse()?;
                if t != cfg.task {
                    return Err(Error::TaskMismatch {
                        expected: cfg.task.to_string(),
                        found: t.to_string(),
                    });
                }
            }
            "m" => cfg.m = value(k, v)?,
            "S" => cfg.s = value(k, v)?,
            "batch_size" => cfg.batch_size = value(k, v)?,
            "learning_rate" => cfg.learning_rate = value(k, v)?,
            "max_steps" => cfg.max_steps = value(k, v)?,
            "eval_every" => cfg.eval_every = value(k, v)?,
            "test_set_size" => cfg.test_set_size = value(k, v)?,
            "data_seed" => cfg.data_seed = value(k, v)?,
            "init_seed" => cfg.init_seed = value(k, v)?,
            "test_seed" => cfg.test_seed = value(k, v)?,
            "final_eval_size" => cfg.final_eval_size = value(k, v)?,
            "eps0" => cfg.eps0 = value(k, v)?,
            "test_max_depth" => cfg.test_trees.max_depth = value(k, v)?,
            "test_min_children" => cfg.test_trees.min_children = value(k, v)?,
            "test_max_children" => cfg.test_trees.max_children = value(k, v)?,
            "test_max_nodes" => {
                cfg.test_trees.max_nodes = value(k, v)?;
                max_nodes_set = true;
            }
            "test_retries" => cfg.test_trees.retries = value(k, v)?,
            "trace_path" => cfg.trace_path = Some(PathBuf::from(v)),
            "checkpoint_path" => cfg.checkpoint_path = Some(PathBuf::from(v)),
            "report_path" => cfg.report_path = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    if !max_nodes_set {
        cfg.test_trees.max_nodes = cfg.s;
    }
    Ok(())
}

/// Task defaults, then the file (if any), then `overrides`; validated.
pub fn parse_config(path: Option<&Path>, task: Task, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::for_task(task);
    let mut pairs = match path {
        Some(p) => parse_pairs(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    pairs.extend_from_slice(overrides);
    apply(&mut cfg, &pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(s: &[(&str, &str)]) -> Vec<(String, String)> {
        s.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn empty_gives_task_defaults() {
        let c = parse_config(None, Task::Backward, &[]).unwrap();
        assert_eq!((c.m, c.s, c.learning_rate, c.batch_size), (4, 31, 1.0, 256));
        let c = parse_config(None, Task::Forward, &[]).unwrap();
        assert_eq!((c.m, c.s, c.learning_rate, c.batch_size), (3, 25, 0.2, 256));
    }

    #[test]
    fn overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\nlearning_rate = 0.5\n\nmax_steps=10\n").unwrap();
        let c = parse_config(Some(&p), Task::Backward, &pairs(&[("learning_rate", "0.2")])).unwrap();
        assert_eq!(c.learning_rate, 0.2);
        assert_eq!(c.max_steps, 10);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_config(None, Task::Backward, &pairs(&[("S", "10"), ("m", "4")])).is_err());
        assert!(parse_config(None, Task::Backward, &pairs(&[("bogus", "1")])).is_err());
        assert!(parse_config(None, Task::Backward, &pairs(&[("m", "three")])).is_err());
        assert!(matches!(
            parse_config(None, Task::Backward, &pairs(&[("task", "forward")])),
            Err(Error::TaskMismatch { .. })
        ));
        assert!(parse_pairs("no equals sign").is_err());
        assert!(parse_override("x").is_err());
    }

    #[test]
    fn test_node_cap_follows_vocab() {
        let c = parse_config(None, Task::Backward, &pairs(&[("S", "40")])).unwrap();
        assert_eq!(c.test_trees.max_nodes, 40);
        let c = parse_config(None, Task::Backward, &pairs(&[("S", "40"), ("test_max_nodes", "20")])).unwrap();
        assert_eq!(c.test_trees.max_nodes, 20);
    }

    #[test]
    fn every_key_is_accepted() {
        let mut c = ExperimentConfig::backward();
        let vals = [
            "backward", "4", "31", "8", "1", "10", "5", "4", "1", "2", "3", "8", "0.05", "4", "0", "3", "20", "10", "a.csv",
            "b.json", "c.csv",
        ];
        let p: Vec<_> = KEYS.iter().zip(vals).map(|(k, v)| (k.to_string(), v.to_string())).collect();
        apply(&mut c, &p).unwrap();
        c.validate().unwrap();
    }
}
