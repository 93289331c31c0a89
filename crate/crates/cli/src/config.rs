//! Run configuration: TOML file, `key=value` overrides, validation and hashing.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spt_core::backbone::{BackboneConfig, PretrainConfig};
use spt_core::bilevel::{Budget, SearchConfig};
use spt_core::harness::RetrainConfig;
use spt_core::hypernet::HyperNetConfig;
use spt_core::optim::OptimConfig;
use spt_core::prompt_gen::GeneratorConfig;
use spt_core::task::{Rule, TaskSpec};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PilotConfig {
    /// Bottleneck of the single-layer reference generator.
    pub m: usize,
    pub n: usize,
    pub ks: Vec<usize>,
    /// Also run the M0 and M1 placements.
    pub manual: bool,
}

impl Default for PilotConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 1,
            ks: vec![1, 2, 3, 4],
            manual: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Retraining runs per placement; seeds are `seed, seed+1, ...`.
    pub runs: usize,
    /// Output directory. Not part of the config hash.
    pub out: PathBuf,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub pretrain_task: TaskSpec,
    pub task: TaskSpec,
    #[serde(default)]
    pub hypernet: HyperNetConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub retrain: RetrainConfig,
    #[serde(default)]
    pub pilot: PilotConfig,
    /// Tasks of the transfer grid and heatmap.
    #[serde(default)]
    pub transfer_tasks: Vec<TaskSpec>,
}

fn task(name: &str, rule: Rule, train: usize, dev: usize, data_seed: u64, window: Option<Vec<usize>>) -> TaskSpec {
    TaskSpec {
        name: name.into(),
        rule,
        seq_len: 11,
        vocab: 16,
        train,
        dev,
        test: dev,
        data_seed,
        visibility_window: window,
    }
}

impl Default for RunConfig {
    /// The toy laboratory: an 8-block, width-16 backbone whose upper half
    /// reads prompts, and few-shot fixed-key majority tasks.
    fn default() -> Self {
        let window = Some(vec![4, 5, 6, 7]);
        let toy_optim = OptimConfig {
            lr: 3e-3,
            ..OptimConfig::default()
        };
        Self {
            seed: 0,
            runs: 10,
            out: PathBuf::from("runs/toy"),
            backbone: BackboneConfig {
                layers: 8,
                width: 16,
                heads: 2,
                vocab: 16,
                max_len: 32,
                ffn_mult: 2,
                visibility_window: None,
            },
            pretrain: PretrainConfig {
                steps: 4000,
                batch_size: 16,
                seed: 0,
                optim: OptimConfig {
                    lr: 1e-3,
                    weight_decay: 0.0,
                    ..OptimConfig::default()
                },
            },
            pretrain_task: task("pretrain", Rule::CuedMajority, 4000, 400, 1, None),
            task: task("fixed_5_9", Rule::FixedMajority { first: 5, second: 9 }, 100, 400, 7, window.clone()),
            hypernet: HyperNetConfig {
                generator: GeneratorConfig {
                    l: 4,
                    m: 8,
                    n: 4,
                    ..GeneratorConfig::default()
                },
                ..HyperNetConfig::default()
            },
            search: SearchConfig {
                budget: Budget::Steps(1000),
                batch_size: 8,
                optim: toy_optim.clone(),
            },
            retrain: RetrainConfig {
                budget: Budget::Steps(1000),
                batch_size: 8,
                optim: toy_optim,
            },
            pilot: PilotConfig::default(),
            transfer_tasks: vec![
                task("fixed_5_9", Rule::FixedMajority { first: 5, second: 9 }, 100, 400, 7, window.clone()),
                task("fixed_11_6", Rule::FixedMajority { first: 11, second: 6 }, 100, 400, 8, window),
            ],
        }
    }
}

fn bad(key: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Core(spt_core::Error::config(key, reason))
}

impl RunConfig {
    /// Reads `path` (or the built-in defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| CliError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::try_from(RunConfig::default()).map_err(|e| CliError::Parse(e.to_string()))?,
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            bad(key, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate("backbone")?;
        if self.backbone.visibility_window.is_some() {
            return Err(bad(
                "backbone.visibility_window",
                "set the window on the task; pretraining runs without prompts",
            ));
        }
        if self.runs == 0 {
            return Err(bad("runs", "must be positive"));
        }
        if self.pretrain.steps == 0 || self.pretrain.batch_size == 0 {
            return Err(bad("pretrain.steps", "steps and batch size must be positive"));
        }
        self.pretrain.optim.validate("pretrain.optim")?;
        let l = self.hypernet.generator.l;
        self.check_task("pretrain_task", &self.pretrain_task, l)?;
        self.check_task("task", &self.task, l)?;
        for (i, t) in self.transfer_tasks.iter().enumerate() {
            self.check_task(&format!("transfer_tasks[{i}]"), t, l)?;
        }
        self.hypernet.validate("hypernet", self.backbone.layers, self.backbone.width)?;
        self.search.validate("search")?;
        self.retrain.validate("retrain")?;
        let p = &self.pilot;
        let base = GeneratorConfig {
            m: p.m,
            n: p.n,
            ..self.hypernet.generator.clone()
        };
        base.validate("pilot", self.backbone.width)?;
        if let Some(&k) = p.ks.iter().find(|&&k| k == 0 || k >= self.backbone.layers) {
            return Err(bad("pilot.ks", format!("{k} must lie in 1..{}", self.backbone.layers)));
        }
        Ok(())
    }

    fn check_task(&self, prefix: &str, t: &TaskSpec, prompt_len: usize) -> Result<()> {
        t.validate(prefix)?;
        if t.vocab > self.backbone.vocab {
            return Err(bad(format!("{prefix}.vocab"), "exceeds the backbone vocabulary"));
        }
        if t.seq_len + prompt_len > self.backbone.max_len {
            return Err(bad(
                format!("{prefix}.seq_len"),
                format!("sequence plus {prompt_len} prompt slots exceeds backbone.max_len"),
            ));
        }
        if let Some(w) = &t.visibility_window {
            if let Some(b) = w.iter().find(|&&b| b >= self.backbone.layers) {
                return Err(bad(format!("{prefix}.visibility_window"), format!("block {b} does not exist")));
            }
        }
        Ok(())
    }

    /// Content hash of everything that influences results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        digest(&c)
    }

    /// Hash of the settings that determine the pretrained backbone. The
    /// prompt length fixes the position offsets seen during pretraining.
    pub fn backbone_config_hash(&self) -> String {
        digest(&(&self.backbone, &self.pretrain, &self.pretrain_task, self.hypernet.generator.l))
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.runs as u64).map(|i| self.seed + i).collect()
    }

    pub fn pilot_base(&self) -> GeneratorConfig {
        GeneratorConfig {
            m: self.pilot.m,
            n: self.pilot.n,
            ..self.hypernet.generator.clone()
        }
    }
}

pub fn window_of(task: &TaskSpec) -> Option<BTreeSet<usize>> {
    task.visibility_window.as_ref().map(|w| w.iter().copied().collect())
}

/// Canonical JSON (struct fields in declaration order, maps sorted) hashed with SHA-256.
fn digest<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes");
    let text = serde_json::to_string(&canonical).expect("value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Applies `a.b.c=value`; the value is read as TOML and falls back to a string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not key=value")))?;
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{path}`")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| bad(keys[..i].join("."), "is not a table"))?;
        if i + 1 == keys.len() {
            table.insert(key.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("keys is non-empty")
}
