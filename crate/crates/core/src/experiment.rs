//! Experiment orchestration: configuration files, train/evaluate runs and validation grid search.
//!
//! Configuration is plain `key = value` text. Relative paths resolve against the config
//! file's directory. Recognized keys:
//!
//! ```text
//! task.N.name | task.N.role (main|aux) | task.N.features | task.N.labels
//! task.N.pairs | task.N.n_pos | task.N.n_neg
//! queries.features | queries.labels | distractors
//! variant (comma list) | eta (number or auto) | gamma | niters | d | seed | bias_factor
//! wpca_epsilon | wpca_sample_cap | log_every | ks | n | out.dir | grid.eta | grid.gamma
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, FeatureSet};
use crate::error::{Error, Result};
use crate::io;
use crate::model::{CoupledModel, Variant};
use crate::pairs::{generate_pairs, pool_tasks, PairSet, Task};
use crate::retrieval::{evaluate, Encoder, EvalReport};
use crate::trainer::{train, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Main,
    Aux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub name: String,
    pub role: Role,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub pairs: Option<PathBuf>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Main task first, then auxiliary tasks in index order.
    pub tasks: Vec<TaskConfig>,
    pub queries_features: PathBuf,
    pub queries_labels: PathBuf,
    pub distractors: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
    pub n: usize,
    pub out_dir: Option<PathBuf>,
    pub grid_eta: Vec<f64>,
    pub grid_gamma: Vec<f64>,
}

const GLOBAL_KEYS: &[&str] = &[
    "queries.features",
    "queries.labels",
    "distractors",
    "variant",
    "eta",
    "gamma",
    "niters",
    "d",
    "seed",
    "bias_factor",
    "wpca_epsilon",
    "wpca_sample_cap",
    "log_every",
    "ks",
    "n",
    "out.dir",
    "grid.eta",
    "grid.gamma",
];

const TASK_KEYS: &[&str] = &["name", "role", "features", "labels", "pairs", "n_pos", "n_neg"];

/// Raw `key = value` entries, before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            raw.set(k.trim(), v.trim())?;
        }
        Ok(raw)
    }

    /// Sets or overrides one entry; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = GLOBAL_KEYS.contains(&key)
            || key
                .strip_prefix("task.")
                .and_then(|rest| rest.split_once('.'))
                .is_some_and(|(idx, field)| idx.parse::<usize>().is_ok() && TASK_KEYS.contains(&field));
        if !known {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key:?}")))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| Error::Config(format!("{key} = {v:?}: {e}")))
            })
            .transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<T>()
                        .map_err(|e| Error::Config(format!("{key}: {s:?}: {e}")))
                })
                .collect(),
        }
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_raw(&RawConfig::parse(&text)?, base)
    }

    pub fn from_raw(raw: &RawConfig, base: &Path) -> Result<Self> {
        let mut indices: Vec<usize> = raw
            .entries
            .keys()
            .filter_map(|k| k.strip_prefix("task.")?.split_once('.')?.0.parse().ok())
            .collect();
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::Config("no tasks configured".into()));
        }
        let mut tasks = Vec::new();
        for idx in indices {
            let key = |f: &str| format!("task.{idx}.{f}");
            let role = match raw.get(&key("role")).unwrap_or("aux") {
                "main" => Role::Main,
                "aux" => Role::Aux,
                other => return Err(Error::Config(format!("{}: unknown role {other:?}", key("role")))),
            };
            tasks.push(TaskConfig {
                name: raw.get(&key("name")).map_or_else(|| format!("task{idx}"), str::to_string),
                role,
                features: resolve(base, raw.required(&key("features"))?),
                labels: resolve(base, raw.required(&key("labels"))?),
                pairs: raw.get(&key("pairs")).map(|p| resolve(base, p)),
                n_pos: raw.parsed(&key("n_pos"))?.unwrap_or(1000),
                n_neg: raw.parsed(&key("n_neg"))?.unwrap_or(1000),
            });
        }
        let mains = tasks.iter().filter(|t| t.role == Role::Main).count();
        if mains != 1 {
            return Err(Error::Config(format!("exactly one main task required, found {mains}")));
        }
        // Stable: main first, auxiliaries keep their relative order.
        tasks.sort_by_key(|t| t.role != Role::Main);
        for t in &tasks {
            if t.name.contains(',') {
                return Err(Error::Config(format!("task name {:?} may not contain ','", t.name)));
            }
        }

        let defaults = TrainConfig::default();
        let eta = match raw.get("eta") {
            None | Some("auto") => None,
            Some(_) => raw.parsed::<f64>("eta")?,
        };
        let mut variants: Vec<Variant> = raw.list("variant")?;
        if variants.is_empty() {
            variants.push(Variant::CpMtml);
        }
        let train = TrainConfig {
            eta,
            gamma: raw.parsed("gamma")?.unwrap_or(defaults.gamma),
            niters: raw.parsed("niters")?.unwrap_or(defaults.niters),
            d: raw.parsed("d")?.unwrap_or(defaults.d),
            variant: variants[0],
            seed: raw.parsed("seed")?.unwrap_or(defaults.seed),
            bias_factor: raw.parsed("bias_factor")?.unwrap_or(defaults.bias_factor),
            wpca_epsilon: raw.parsed("wpca_epsilon")?.unwrap_or(defaults.wpca_epsilon),
            wpca_sample_cap: raw.parsed("wpca_sample_cap")?.unwrap_or(defaults.wpca_sample_cap),
            log_every: raw.parsed("log_every")?.unwrap_or(defaults.log_every),
        };
        train.validate()?;
        let mut ks: Vec<usize> = raw.list("ks")?;
        if ks.is_empty() {
            ks = vec![1, 2, 5, 10, 20];
        }
        if ks.contains(&0) {
            return Err(Error::Config("ks must be >= 1".into()));
        }
        let n = raw.parsed("n")?.unwrap_or(1);
        if n == 0 {
            return Err(Error::Config("n must be >= 1".into()));
        }
        Ok(Self {
            tasks,
            queries_features: resolve(base, raw.required("queries.features")?),
            queries_labels: resolve(base, raw.required("queries.labels")?),
            distractors: raw.get("distractors").map(|p| resolve(base, p)),
            variants,
            train,
            ks,
            n,
            out_dir: raw.get("out.dir").map(|p| resolve(base, p)),
            grid_eta: raw.list("grid.eta")?,
            grid_gamma: raw.list("grid.gamma")?,
        })
    }
}

/// Loaded data of one task: every training item, its label, and its constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub name: String,
    pub items: Dataset,
    pub pairs: PairSet,
}

impl TaskData {
    pub fn task(&self) -> Task {
        Task::new(self.items.features.clone(), self.pairs.clone())
    }
}

/// Everything an experiment reads from disk, with pairs materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    /// Main task first.
    pub tasks: Vec<TaskData>,
    pub queries: Dataset,
    pub distractors: Option<FeatureSet>,
}

/// Seed of the pair sampler for task `k`; independent of the training stream.
fn pair_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + k as u64);
    rng
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut tasks = Vec::new();
    for (k, tc) in cfg.tasks.iter().enumerate() {
        let items = Dataset::new(io::load_features(&tc.features)?, io::load_labels(&tc.labels)?)?;
        let pairs = match &tc.pairs {
            Some(p) => io::load_pairs(p, k)?,
            None => generate_pairs(&items.labels, tc.n_pos, tc.n_neg, k, &mut pair_rng(cfg.train.seed, k))?,
        };
        pairs.validate(items.len())?;
        tasks.push(TaskData {
            name: tc.name.clone(),
            items,
            pairs,
        });
    }
    let dim = tasks[0].items.dim();
    for t in &tasks {
        crate::error::check_dim(dim, t.items.dim())?;
    }
    let queries = Dataset::new(
        io::load_features(&cfg.queries_features)?,
        io::load_labels(&cfg.queries_labels)?,
    )?;
    crate::error::check_dim(dim, queries.dim())?;
    let distractors = cfg.distractors.as_ref().map(io::load_features).transpose()?;
    if let Some(d) = &distractors {
        crate::error::check_dim(dim, d.dim())?;
    }
    Ok(PreparedData {
        tasks,
        queries,
        distractors,
    })
}

/// Trains `variant` on `tasks` (main first), arranging the data the way each learner expects:
/// stML and WPCA see only the main task, utML sees the pooled union, coupled learners see all.
pub fn train_variant(tasks: &[Task], variant: Variant, cfg: &TrainConfig) -> Result<(CoupledModel, TrainLog)> {
    let cfg = TrainConfig {
        variant,
        ..cfg.clone()
    };
    match variant {
        Variant::Stml | Variant::Wpca => train(&tasks[..1], &cfg),
        Variant::Utml => train(&[pool_tasks(tasks)?], &cfg),
        Variant::CpMtml | Variant::MtLmca => train(tasks, &cfg),
    }
}

/// Auxiliary-task column of the report.
pub fn aux_label(variant: Variant, names: &[String]) -> String {
    if variant.is_single() && variant != Variant::Utml || names.len() < 2 {
        "n/a".to_string()
    } else {
        names[1..].join("+")
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: Variant,
    pub model: CoupledModel,
    pub log: TrainLog,
    pub report: EvalReport,
    pub report_with_distractors: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub runs: Vec<VariantRun>,
    /// Full report CSV including the header.
    pub csv: String,
}

/// Trains every configured variant, evaluates the main task with and without distractors and,
/// when `out.dir` is set, writes `report.csv`, `model_<variant>.cpml` and `log_<variant>.csv`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let data = prepare(cfg)?;
    let out = run_prepared(cfg, &data)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.csv");
        fs::write(&p, &out.csv).map_err(|e| Error::io(&p, e))?;
        for run in &out.runs {
            io::save_model(&run.model, dir.join(format!("model_{}.cpml", run.variant)))?;
            let p = dir.join(format!("log_{}.csv", run.variant));
            fs::write(&p, run.log.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(out)
}

pub fn run_prepared(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentOutput> {
    let tasks: Vec<Task> = data.tasks.iter().map(TaskData::task).collect();
    let names: Vec<String> = data.tasks.iter().map(|t| t.name.clone()).collect();
    let gallery = &data.tasks[0].items;
    let mut csv = format!("{}\n", io::REPORT_HEADER);
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        let (model, log) = train_variant(&tasks, variant, &cfg.train)?;
        let enc = Encoder::for_task(&model, 0)?;
        let report = evaluate(&data.queries, gallery, None, &enc, &cfg.ks, cfg.n)?;
        let aux = aux_label(variant, &names);
        csv.push_str(&io::report_rows(variant.name(), &aux, &report));
        let report_with_distractors = match &data.distractors {
            Some(d) => {
                let r = evaluate(&data.queries, gallery, Some(d), &enc, &cfg.ks, cfg.n)?;
                csv.push_str(&io::report_rows(variant.name(), &aux, &r));
                Some(r)
            }
            None => None,
        };
        runs.push(VariantRun {
            variant,
            model,
            log,
            report,
            report_with_distractors,
        });
    }
    Ok(ExperimentOutput { runs, csv })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub eta: f64,
    pub gamma: f64,
    /// Validation 1-call@10; `None` when training diverged.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub best_eta: f64,
    pub best_gamma: f64,
    pub best_score: f64,
    /// In candidate order, eta-major.
    pub table: Vec<GridRow>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eta,gamma,val_1call_at_10\n");
        for r in &self.table {
            let score = r.score.map_or_else(|| "diverged".to_string(), |v| v.to_string());
            s.push_str(&format!("{},{},{score}\n", r.eta, r.gamma));
        }
        s
    }
}

/// Validation split of the main task: a fit half for training and a held-out half turned into
/// queries (first item of each label with at least two members) and gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSplit {
    pub fit: TaskData,
    pub queries: Dataset,
    pub gallery: Dataset,
}

pub fn validation_split(main: &TaskData, n_pos: usize, n_neg: usize, seed: u64) -> Result<ValidationSplit> {
    let n = main.items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = pair_rng(seed, usize::MAX >> 1);
    order.shuffle(&mut rng);
    let (fit_idx, val_idx) = order.split_at(n / 2);
    let mut fit_idx = fit_idx.to_vec();
    let mut val_idx = val_idx.to_vec();
    fit_idx.sort_unstable();
    val_idx.sort_unstable();

    let fit_items = main.items.select(&fit_idx);
    let pairs = generate_pairs(&fit_items.labels, n_pos, n_neg, 0, &mut rng)?;

    let val = main.items.select(&val_idx);
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    val.labels.iter().for_each(|&l| *counts.entry(l).or_default() += 1);
    let mut taken = std::collections::BTreeSet::new();
    let (mut q, mut g) = (Vec::new(), Vec::new());
    for (i, &l) in val.labels.iter().enumerate() {
        if counts[&l] >= 2 && taken.insert(l) {
            q.push(i);
        } else {
            g.push(i);
        }
    }
    if q.is_empty() {
        return Err(Error::InvalidArgument(
            "validation half has no label with two items; cannot form queries".into(),
        ));
    }
    Ok(ValidationSplit {
        fit: TaskData {
            name: main.name.clone(),
            items: fit_items,
            pairs,
        },
        queries: val.select(&q),
        gallery: val.select(&g),
    })
}

/// Picks `(eta, gamma)` maximizing validation 1-call@10 for the first configured variant.
/// Ties go to the smaller eta, then the smaller gamma; diverged runs are excluded.
pub fn run_grid_search(cfg: &ExperimentConfig, data: &PreparedData) -> Result<GridResult> {
    let etas = if cfg.grid_eta.is_empty() {
        vec![cfg
            .train
            .eta
            .ok_or_else(|| Error::Config("grid search needs grid.eta or a fixed eta".into()))?]
    } else {
        cfg.grid_eta.clone()
    };
    let gammas = if cfg.grid_gamma.is_empty() {
        vec![cfg.train.gamma]
    } else {
        cfg.grid_gamma.clone()
    };
    let main_cfg = &cfg.tasks[0];
    let split = validation_split(
        &data.tasks[0],
        main_cfg.n_pos.div_ceil(2),
        main_cfg.n_neg.div_ceil(2),
        cfg.train.seed,
    )?;
    let mut tasks = vec![split.fit.task()];
    tasks.extend(data.tasks[1..].iter().map(TaskData::task));
    let variant = cfg.variants[0];

    let candidates: Vec<(f64, f64)> = etas
        .iter()
        .flat_map(|&e| gammas.iter().map(move |&g| (e, g)))
        .collect();
    let table: Vec<GridRow> = candidates
        .par_iter()
        .map(|&(eta, gamma)| {
            let tc = TrainConfig {
                eta: Some(eta),
                gamma,
                log_every: 0,
                ..cfg.train.clone()
            };
            let score = match train_variant(&tasks, variant, &tc) {
                Ok((model, _)) => {
                    let enc = Encoder::for_task(&model, 0)?;
                    let rep = evaluate(&split.queries, &split.gallery, None, &enc, &[10], 1)?;
                    Some(rep.scores[0])
                }
                Err(Error::Diverged { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(GridRow { eta, gamma, score })
        })
        .collect::<Result<_>>()?;

    let best = table
        .iter()
        .filter_map(|r| r.score.map(|s| (s, r)))
        .max_by(|(sa, a), (sb, b)| {
            sa.total_cmp(sb)
                .then(b.eta.total_cmp(&a.eta))
                .then(b.gamma.total_cmp(&a.gamma))
        })
        .ok_or(Error::Diverged { iteration: 0 })?;
    Ok(GridResult {
        best_eta: best.1.eta,
        best_gamma: best.1.gamma,
        best_score: best.0,
        table,
    })
}
