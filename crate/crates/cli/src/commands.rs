//! The command implementations. Each reads its inputs from the output
//! directory, never modifies them, and writes JSON results that carry the
//! config hash.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spt_core::archive::TensorArchive;
use spt_core::backbone::{backbone_accuracy, pretrain_and_freeze, BackboneWeights, PrefixCache};
use spt_core::bilevel::{search, SearchOutcome};
use spt_core::harness::{
    budget_matched, evaluate, manual_strategy, retrain_once, summarize, EvalSummary, FinalModel, Heatmap,
    LearnedArchitecture, SeedResult, Splits, Strategy,
};
use spt_core::prompt_gen::{GeneratorConfig, PromptGenerator};
use spt_core::task::{Dataset, SplitTag, TaskSpec};
use spt_core::verify::{run_battery, Report};

use crate::config::{window_of, RunConfig};
use crate::error::{CliError, Result};

pub const BACKBONE_STEM: &str = "backbone";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str, hint: &'static str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::Missing {
            what,
            path: path.to_path_buf(),
            hint,
        },
        _ => CliError::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs `f` once per seed on `jobs` threads; results keep seed order.
pub fn per_seed<T, F>(jobs: usize, seeds: &[u64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    if jobs <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs: {e}")))?;
    pool.install(|| seeds.par_iter().map(|&s| f(s)).collect())
}

/// The frozen backbone viewed through a task's visibility window, plus its
/// prompt-free prefix cache.
pub struct TaskView {
    pub backbone: BackboneWeights,
    pub cache: PrefixCache,
    pub data: Dataset,
}

impl TaskView {
    pub fn new(frozen: &BackboneWeights, task: &TaskSpec, prompt_len: usize) -> Result<Self> {
        let backbone = frozen.with_visibility(window_of(task))?;
        let cache = PrefixCache::new(&backbone, prompt_len);
        Ok(Self {
            backbone,
            cache,
            data: Dataset::generate(task)?,
        })
    }

    pub fn splits(&self) -> Splits<'_> {
        Splits {
            train: &self.data.train,
            dev: &self.data.dev,
            test: &self.data.test,
        }
    }
}

// ---------------------------------------------------------------- pretrain

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub config_hash: String,
    pub backbone_config_hash: String,
    pub backbone_hash: String,
    pub parameters: usize,
    pub dev_accuracy: f64,
}

pub fn pretrain_backbone(cfg: &RunConfig) -> Result<BackboneWeights> {
    let corpus = Dataset::generate(&cfg.pretrain_task)?;
    Ok(pretrain_and_freeze(
        &cfg.backbone,
        &corpus.train,
        cfg.hypernet.generator.l,
        &cfg.pretrain,
    )?)
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    let dir = cfg.out.join("backbone");
    let weights = pretrain_backbone(cfg)?;
    let corpus = Dataset::generate(&cfg.pretrain_task)?;
    let summary = PretrainSummary {
        config_hash: cfg.hash(),
        backbone_config_hash: cfg.backbone_config_hash(),
        backbone_hash: weights.content_hash(),
        parameters: weights.parameter_count(),
        dev_accuracy: backbone_accuracy(&weights, &corpus.dev, cfg.hypernet.generator.l)?,
    };
    let mut archive = weights.to_archive()?;
    archive.meta.insert("config_hash".into(), summary.backbone_config_hash.clone());
    archive.meta.insert("content_hash".into(), summary.backbone_hash.clone());
    archive.save(&dir, BACKBONE_STEM)?;
    write_json(&dir.join("pretrain.json"), &summary)?;
    Ok(summary)
}

/// Loads the checkpoint written by `pretrain` under the same settings.
pub fn load_backbone(cfg: &RunConfig) -> Result<BackboneWeights> {
    let dir = cfg.out.join("backbone");
    let manifest = dir.join(format!("{BACKBONE_STEM}.manifest.json"));
    if !manifest.exists() {
        return Err(CliError::Missing {
            what: "backbone checkpoint",
            path: manifest,
            hint: "run `spt pretrain` with the same config and --out first",
        });
    }
    let archive = TensorArchive::load(&dir, BACKBONE_STEM)?;
    let expected = cfg.backbone_config_hash();
    match archive.meta.get("config_hash") {
        Some(h) if *h == expected => {}
        found => {
            return Err(CliError::Mismatch(format!(
                "checkpoint in {} was pretrained under config hash {}, current settings hash to {expected}",
                dir.display(),
                found.map_or("<none>", String::as_str)
            )))
        }
    }
    let weights = BackboneWeights::from_archive(&archive)?;
    if !weights.is_frozen() {
        return Err(CliError::Mismatch("checkpoint is not frozen".into()));
    }
    Ok(weights)
}

// ------------------------------------------------------------------ search

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub trajectory: Vec<Vec<f64>>,
}

/// Bi-level search on `task` followed by top-K discretization.
pub fn search_task(
    cfg: &RunConfig,
    frozen: &BackboneWeights,
    task: &TaskSpec,
    hyper: &spt_core::hypernet::HyperNetConfig,
    seed: u64,
    metrics: Option<&mut dyn Write>,
) -> Result<(LearnedArchitecture, SearchOutcome)> {
    let view = TaskView::new(frozen, task, hyper.generator.l)?;
    let outcome = search(&view.backbone, &view.cache, hyper, &cfg.search, &view.data.train, seed, metrics)?;
    let arch = LearnedArchitecture::from_gates(
        outcome.gates.a(),
        hyper.k,
        task.name.clone(),
        seed,
        cfg.hash(),
        frozen.content_hash(),
    )?;
    Ok((arch, outcome))
}

pub fn cmd_search(cfg: &RunConfig) -> Result<LearnedArchitecture> {
    let frozen = load_backbone(cfg)?;
    let dir = cfg.out.join("search");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let path = dir.join("metrics.jsonl");
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut log = BufWriter::new(file);
    let (arch, outcome) = search_task(cfg, &frozen, &cfg.task, &cfg.hypernet, cfg.seed, Some(&mut log))?;
    log.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join("architecture.json"), &arch)?;
    write_json(
        &dir.join("search.json"),
        &SearchRecord {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            steps: outcome.steps,
            trajectory: outcome.trajectory,
        },
    )?;
    Ok(arch)
}

// --------------------------------------------------------- retrain / eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_hash: String,
    pub task: String,
    pub architecture_config_hash: String,
    pub seeds: Vec<u64>,
    pub summary: EvalSummary,
}

fn default_arch(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("search").join("architecture.json")
}

/// Reads an architecture file and checks it against the backbone it will run on.
pub fn load_architecture(path: &Path, backbone: &BackboneWeights) -> Result<LearnedArchitecture> {
    let arch: LearnedArchitecture = read_json(path, "architecture file", "run `spt search` first or pass --arch")?;
    if arch.backbone_hash != backbone.content_hash() {
        return Err(CliError::Mismatch(format!(
            "{} was searched on backbone {}, the checkpoint is {}",
            path.display(),
            arch.backbone_hash,
            backbone.content_hash()
        )));
    }
    if arch.depth() != backbone.config.layers + 1 {
        return Err(CliError::Mismatch(format!(
            "{} covers {} layers, the backbone has {}",
            path.display(),
            arch.depth(),
            backbone.config.layers + 1
        )));
    }
    Ok(arch)
}

/// Retrains a placement once per seed (in parallel when `jobs > 1`).
pub fn retrain_layers(
    cfg: &RunConfig,
    view: &TaskView,
    layers: &[usize],
    generator: &GeneratorConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<(EvalSummary, Vec<FinalModel>)> {
    let runs = per_seed(jobs, seeds, |seed| {
        retrain_once(
            &view.backbone,
            &view.cache,
            layers,
            generator,
            cfg.hypernet.tau,
            view.splits(),
            &cfg.retrain,
            seed,
        )
        .map_err(CliError::from)
    })?;
    let params = runs.first().map_or(0, |(m, _)| m.parameter_count());
    let (models, results): (Vec<FinalModel>, Vec<SeedResult>) = runs.into_iter().unzip();
    Ok((summarize(layers, params, results), models))
}

fn model_stem(seed: u64) -> String {
    format!("seed{seed}")
}

pub fn save_model(model: &FinalModel, dir: &Path, seed: u64) -> Result<()> {
    let mut a = TensorArchive::default();
    for (layer, g) in model.layers.iter().zip(&model.generators) {
        g.save_into(&mut a, &format!("layer{layer}"));
    }
    a.meta.insert("layers".into(), serde_json::to_string(&model.layers)?);
    a.meta.insert("tau".into(), serde_json::to_string(&model.tau)?);
    a.meta.insert("generator".into(), serde_json::to_string(&model.generator)?);
    a.save(dir, &model_stem(seed))?;
    Ok(())
}

pub fn load_model(dir: &Path, seed: u64, width: usize) -> Result<FinalModel> {
    let stem = model_stem(seed);
    if !dir.join(format!("{stem}.manifest.json")).exists() {
        return Err(CliError::Missing {
            what: "retrained model",
            path: dir.join(stem),
            hint: "run `spt retrain` first or pass --untrained",
        });
    }
    let a = TensorArchive::load(dir, &stem)?;
    let meta = |k: &str| {
        a.meta
            .get(k)
            .ok_or_else(|| CliError::Core(spt_core::Error::Archive(format!("model lacks `{k}`"))))
    };
    let layers: Vec<usize> = serde_json::from_str(meta("layers")?)?;
    let tau: f64 = serde_json::from_str(meta("tau")?)?;
    let generator: GeneratorConfig = serde_json::from_str(meta("generator")?)?;
    let generators = layers
        .iter()
        .map(|l| PromptGenerator::load_from(&generator, width, &a, &format!("layer{l}")))
        .collect::<spt_core::Result<_>>()?;
    Ok(FinalModel {
        layers,
        generators,
        tau,
        generator,
    })
}

pub fn cmd_retrain(cfg: &RunConfig, arch: Option<&Path>, jobs: usize) -> Result<EvalRecord> {
    let frozen = load_backbone(cfg)?;
    let arch = load_architecture(arch.unwrap_or(&default_arch(cfg)), &frozen)?;
    let view = TaskView::new(&frozen, &cfg.task, cfg.hypernet.generator.l)?;
    let seeds = cfg.seeds();
    let (summary, models) = retrain_layers(cfg, &view, &arch.chosen_layers, &cfg.hypernet.generator, &seeds, jobs)?;
    let dir = cfg.out.join("retrain");
    for (m, &s) in models.iter().zip(&seeds) {
        save_model(m, &dir.join("models"), s)?;
    }
    let record = EvalRecord {
        config_hash: cfg.hash(),
        task: cfg.task.name.clone(),
        architecture_config_hash: arch.config_hash,
        seeds,
        summary,
    };
    write_json(&dir.join("result.json"), &record)?;
    Ok(record)
}

/// Evaluates the retrained models, or freshly initialized ones at the
/// architecture's layers when `untrained`.
pub fn cmd_eval(cfg: &RunConfig, arch: Option<&Path>, untrained: bool) -> Result<EvalRecord> {
    let frozen = load_backbone(cfg)?;
    let arch = load_architecture(arch.unwrap_or(&default_arch(cfg)), &frozen)?;
    let view = TaskView::new(&frozen, &cfg.task, cfg.hypernet.generator.l)?;
    let seeds = cfg.seeds();
    let models_dir = cfg.out.join("retrain").join("models");
    let mut runs = Vec::new();
    let mut params = 0;
    for &seed in &seeds {
        let model = if untrained {
            FinalModel::build(&arch.chosen_layers, &cfg.hypernet.generator, &view.backbone, cfg.hypernet.tau, seed)?
        } else {
            let m = load_model(&models_dir, seed, cfg.backbone.width)?;
            if m.layers != arch.chosen_layers {
                return Err(CliError::Mismatch(format!(
                    "model for seed {seed} uses layers {:?}, architecture chose {:?}",
                    m.layers, arch.chosen_layers
                )));
            }
            m
        };
        params = model.parameter_count();
        runs.push(SeedResult {
            seed,
            dev: evaluate(&view.backbone, &view.cache, &model, &view.data.dev, SplitTag::Dev)?,
            test: evaluate(&view.backbone, &view.cache, &model, &view.data.test, SplitTag::Test)?,
        });
    }
    let record = EvalRecord {
        config_hash: cfg.hash(),
        task: cfg.task.name.clone(),
        architecture_config_hash: arch.config_hash,
        seeds,
        summary: summarize(&arch.chosen_layers, params, runs),
    };
    write_json(&cfg.out.join("eval").join("result.json"), &record)?;
    Ok(record)
}

// ------------------------------------------------------------------- pilot

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotRow {
    pub strategy: String,
    pub m: usize,
    pub summary: EvalSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub config_hash: String,
    pub task: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<PilotRow>,
}

pub fn pilot_strategies(cfg: &RunConfig) -> Vec<Strategy> {
    let mut kinds = Vec::new();
    if cfg.pilot.manual {
        kinds.extend([Strategy::M0, Strategy::M1]);
    }
    kinds.extend(cfg.pilot.ks.iter().map(|&k| Strategy::EveryK(k)));
    kinds
}

pub fn pilot_row(cfg: &RunConfig, view: &TaskView, kind: Strategy, seeds: &[u64], jobs: usize) -> Result<PilotRow> {
    let layers = manual_strategy(kind, cfg.backbone.layers)?;
    let generator = budget_matched(&cfg.pilot_base(), layers.len(), cfg.backbone.width)?;
    let (summary, _) = retrain_layers(cfg, view, &layers, &generator, seeds, jobs)?;
    Ok(PilotRow {
        strategy: kind.label(),
        m: generator.m,
        summary,
    })
}

pub fn cmd_pilot(cfg: &RunConfig, jobs: usize) -> Result<PilotRecord> {
    let frozen = load_backbone(cfg)?;
    let view = TaskView::new(&frozen, &cfg.task, cfg.hypernet.generator.l)?;
    let seeds = cfg.seeds();
    let rows = pilot_strategies(cfg)
        .into_iter()
        .map(|kind| pilot_row(cfg, &view, kind, &seeds, jobs))
        .collect::<Result<Vec<_>>>()?;
    let record = PilotRecord {
        config_hash: cfg.hash(),
        task: cfg.task.name.clone(),
        seeds,
        rows,
    };
    write_json(&cfg.out.join("pilot").join("result.json"), &record)?;
    Ok(record)
}

// ---------------------------------------------------------------- transfer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub layers: Vec<usize>,
    pub dev_mean: f64,
    pub dev_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub seeds: Vec<u64>,
    /// `grid[s][t]`: layers searched on task `s`, retrained on task `t`.
    pub grid: Vec<Vec<TransferCell>>,
}

fn transfer_arch_path(cfg: &RunConfig, task: &str) -> PathBuf {
    cfg.out.join("transfer").join("architectures").join(format!("{task}.json"))
}

fn transfer_tasks(cfg: &RunConfig) -> Result<&[TaskSpec]> {
    if cfg.transfer_tasks.is_empty() {
        return Err(spt_core::Error::config("transfer_tasks", "list at least one task").into());
    }
    for (i, t) in cfg.transfer_tasks.iter().enumerate() {
        if cfg.transfer_tasks[..i].iter().any(|u| u.name == t.name) {
            return Err(spt_core::Error::config(format!("transfer_tasks[{i}].name"), "task names must be unique").into());
        }
    }
    Ok(&cfg.transfer_tasks)
}

pub fn cmd_transfer(cfg: &RunConfig, jobs: usize) -> Result<TransferRecord> {
    let tasks = transfer_tasks(cfg)?;
    let frozen = load_backbone(cfg)?;
    let l = cfg.hypernet.generator.l;
    let mut archs = Vec::new();
    for t in tasks {
        let (arch, _) = search_task(cfg, &frozen, t, &cfg.hypernet, cfg.seed, None)?;
        write_json(&transfer_arch_path(cfg, &t.name), &arch)?;
        archs.push(arch);
    }
    let views = tasks
        .iter()
        .map(|t| TaskView::new(&frozen, t, l))
        .collect::<Result<Vec<_>>>()?;
    let seeds = cfg.seeds();
    let mut grid = Vec::new();
    for (arch, source) in archs.iter().zip(tasks) {
        let mut row = Vec::new();
        for (view, target) in views.iter().zip(tasks) {
            let (s, _) = retrain_layers(cfg, view, &arch.chosen_layers, &cfg.hypernet.generator, &seeds, jobs)?;
            row.push(TransferCell {
                source: source.name.clone(),
                target: target.name.clone(),
                layers: arch.chosen_layers.clone(),
                dev_mean: s.dev_mean,
                dev_std: s.dev_std,
                test_mean: s.test_mean,
                test_std: s.test_std,
            });
        }
        grid.push(row);
    }
    let record = TransferRecord {
        config_hash: cfg.hash(),
        tasks: tasks.iter().map(|t| t.name.clone()).collect(),
        seeds,
        grid,
    };
    write_json(&cfg.out.join("transfer").join("grid.json"), &record)?;
    Ok(record)
}

// ----------------------------------------------------------------- heatmap

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub config_hash: String,
    pub tasks: Vec<String>,
    pub sources: Vec<PathBuf>,
}

/// Writes `layers.csv` and `gates.csv` from architecture files; defaults to
/// the architectures produced by `transfer`.
pub fn cmd_heatmap(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<HeatmapRecord> {
    let sources: Vec<PathBuf> = if inputs.is_empty() {
        transfer_tasks(cfg)?
            .iter()
            .map(|t| transfer_arch_path(cfg, &t.name))
            .collect()
    } else {
        inputs.to_vec()
    };
    let archs = sources
        .iter()
        .map(|p| read_json::<LearnedArchitecture>(p, "architecture file", "run `spt transfer` first or list files"))
        .collect::<Result<Vec<_>>>()?;
    let map = Heatmap::from_archs(&archs)?;
    let dir = cfg.out.join("heatmap");
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    for (name, text) in [("layers.csv", map.layers_csv()?), ("gates.csv", map.gates_csv()?)] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    let record = HeatmapRecord {
        config_hash: cfg.hash(),
        tasks: map.tasks,
        sources,
    };
    write_json(&dir.join("heatmap.json"), &record)?;
    Ok(record)
}

// --------------------------------------------------------------- gradcheck

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRecord {
    pub config_hash: String,
    pub seed: u64,
    pub report: Report,
}

/// Runs the invariant battery; the report is written even when checks fail.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckRecord> {
    let record = GradcheckRecord {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        report: run_battery(cfg.seed)?,
    };
    write_json(&cfg.out.join("gradcheck").join("report.json"), &record)?;
    Ok(record)
}
