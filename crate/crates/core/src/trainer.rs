//! Stochastic gradient descent on the pairwise hinge objective.
//!
//! Each iteration services one task in round-robin order, draws one constraint from it and,
//! when the constraint violates its margin (`y (b - d^2) < 1`), applies
//!
//! ```text
//! L0 <- L0 - eta0 * y * L0 delta delta^T      (eta0 = gamma * eta)
//! Lt <- Lt - eta  * y * Lt delta delta^T
//! bt <- bt + bias_factor * eta * y
//! ```
//!
//! The step uses `L delta delta^T`, i.e. half the analytic gradient of `||L delta||^2`.

use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::model::{hinge_loss_term, CoupledModel, ProjectionMatrix, Variant};
use crate::pairs::{sample_constraint, Task};
use crate::wpca::fit_wpca;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Task learning rate. `None` picks `1e-3 * d / mean ||delta||^2` over 100 sampled pairs.
    pub eta: Option<f64>,
    /// Shared-projection rate as a fraction of `eta`.
    pub gamma: f64,
    pub niters: usize,
    /// Projection dimension.
    pub d: usize,
    pub variant: Variant,
    pub seed: u64,
    pub bias_factor: f64,
    /// WPCA regularizer, relative to the largest eigenvalue.
    pub wpca_epsilon: f64,
    /// Maximum number of items used to fit each initial WPCA.
    pub wpca_sample_cap: usize,
    /// Iterations per loss-log window; 0 disables logging.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: None,
            gamma: 0.5,
            niters: 100_000,
            d: 64,
            variant: Variant::CpMtml,
            seed: 0,
            bias_factor: 0.1,
            wpca_epsilon: 1e-5,
            wpca_sample_cap: 5000,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidArgument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidArgument(format!("eta must be positive, got {eta}")));
            }
        }
        if self.d == 0 {
            return Err(Error::InvalidArgument("projection dimension must be >= 1".into()));
        }
        if !self.bias_factor.is_finite() {
            return Err(Error::InvalidArgument("bias_factor must be finite".into()));
        }
        if self.wpca_sample_cap < 2 {
            return Err(Error::InvalidArgument("wpca_sample_cap must be >= 2".into()));
        }
        Ok(())
    }
}

/// Step sizes for one SGD update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub eta: f64,
    pub eta0: f64,
    pub bias_factor: f64,
}

impl StepRates {
    pub fn new(eta: f64, gamma: f64, bias_factor: f64) -> Self {
        Self {
            eta,
            eta0: gamma * eta,
            bias_factor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub violated: bool,
    pub dsq: f64,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Loss statistics of one task over one logging window.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskWindow {
    pub task: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogPoint {
    /// Last iteration (0-based) covered by the window.
    pub iteration: usize,
    pub tasks: Vec<TaskWindow>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub points: Vec<LogPoint>,
    /// How many iterations serviced each task.
    pub service_counts: Vec<usize>,
    pub eta: f64,
    /// Wall-clock seconds spent in the SGD loop (excludes initialization).
    pub sgd_seconds: f64,
}

impl TrainLog {
    /// CSV with header `iteration,task,mean_loss,violation_rate`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,task,mean_loss,violation_rate\n");
        for p in &self.points {
            for w in &p.tasks {
                s.push_str(&format!(
                    "{},{},{},{}\n",
                    p.iteration, w.task, w.mean_loss, w.violation_rate
                ));
            }
        }
        s
    }
}

/// `L delta delta^T`, the literal update direction (half the analytic gradient).
pub fn distance_gradient(l: &ProjectionMatrix, delta: &[f64]) -> Result<ProjectionMatrix> {
    let p = l.project(delta)?;
    let mut g = ProjectionMatrix::zeros(l.rows(), l.cols());
    g.rank_one_update(1.0, &p, delta);
    Ok(g)
}

/// Reusable buffers for the hot loop.
struct Scratch {
    delta: Vec<f64>,
    p0: Vec<f64>,
    pt: Vec<f64>,
    back: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize, d: usize) -> Self {
        Self {
            delta: vec![0.0; dim],
            p0: vec![0.0; d],
            pt: vec![0.0; d],
            back: vec![0.0; d],
        }
    }
}

/// Applies one update for constraint `(xi, xj, y)` of task `t`.
pub fn sgd_step(
    m: &mut CoupledModel,
    t: usize,
    xi: &[f64],
    xj: &[f64],
    y: i8,
    rates: &StepRates,
) -> Result<StepReport> {
    m.check_task(t)?;
    check_dim(m.input_dim(), xi.len())?;
    check_dim(m.input_dim(), xj.len())?;
    if y != 1 && y != -1 {
        return Err(Error::InvalidArgument(format!("constraint label must be +1 or -1, got {y}")));
    }
    let mut scratch = Scratch::new(m.input_dim(), m.proj_dim());
    Ok(step_with(m, t, xi, xj, f64::from(y), rates, &mut scratch))
}

fn step_with(
    m: &mut CoupledModel,
    t: usize,
    xi: &[f64],
    xj: &[f64],
    y: f64,
    rates: &StepRates,
    s: &mut Scratch,
) -> StepReport {
    for ((d, a), b) in s.delta.iter_mut().zip(xi).zip(xj) {
        *d = a - b;
    }
    let variant = m.variant();
    let (common, task_mats, task_rot, biases) = m.parts_mut();
    let b = biases[t];

    let dsq = match variant {
        Variant::CpMtml => {
            common.project_into(&s.delta, &mut s.p0);
            task_mats[t].project_into(&s.delta, &mut s.pt);
            norm_sq(&s.p0) + norm_sq(&s.pt)
        }
        Variant::MtLmca => {
            common.project_into(&s.delta, &mut s.p0);
            task_rot[t].project_into(&s.p0, &mut s.pt);
            norm_sq(&s.pt)
        }
        _ => {
            common.project_into(&s.delta, &mut s.p0);
            norm_sq(&s.p0)
        }
    };
    let loss_before = hinge_loss_term(y, b, dsq);
    let violated = y * (b - dsq) < 1.0;
    if !violated || !dsq.is_finite() {
        return StepReport {
            violated: violated && dsq.is_finite(),
            dsq,
            loss_before,
            loss_after: loss_before,
        };
    }

    match variant {
        Variant::CpMtml => {
            common.rank_one_update(-rates.eta0 * y, &s.p0, &s.delta);
            task_mats[t].rank_one_update(-rates.eta * y, &s.pt, &s.delta);
        }
        Variant::MtLmca => {
            // d/dR ||R L0 delta||^2 ~ (R p) p^T and d/dL0 ~ R^T (R p) delta^T, p = L0 delta,
            // both taken at the pre-step parameters.
            let r = &mut task_rot[t];
            s.back.iter_mut().for_each(|v| *v = 0.0);
            for (row, &q) in r.as_slice().chunks_exact(r.cols()).zip(&s.pt) {
                for (acc, &rv) in s.back.iter_mut().zip(row) {
                    *acc += rv * q;
                }
            }
            r.rank_one_update(-rates.eta * y, &s.pt, &s.p0);
            common.rank_one_update(-rates.eta0 * y, &s.back, &s.delta);
        }
        _ => {
            common.rank_one_update(-rates.eta * y, &s.p0, &s.delta);
        }
    }
    biases[t] = b + rates.bias_factor * rates.eta * y;

    let after = m.distance_sq_of_delta(t, &s.delta);
    StepReport {
        violated,
        dsq,
        loss_before,
        loss_after: hinge_loss_term(y, m.biases()[t], after),
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn check_tasks(tasks: &[Task], cfg: &TrainConfig) -> Result<usize> {
    cfg.validate()?;
    let first = tasks
        .first()
        .ok_or_else(|| Error::InvalidArgument("training needs at least one task".into()))?;
    let dim = first.features.dim();
    for task in tasks {
        check_dim(dim, task.features.dim())?;
        task.validate()?;
    }
    match cfg.variant {
        Variant::Stml | Variant::Utml | Variant::Wpca if tasks.len() != 1 => {
            Err(Error::InvalidArgument(format!(
                "{} trains on exactly one task (pool tasks first for utml), got {}",
                cfg.variant,
                tasks.len()
            )))
        }
        _ => Ok(dim),
    }
}

/// Trains a model from scratch and returns it with its loss log.
pub fn train(tasks: &[Task], cfg: &TrainConfig) -> Result<(CoupledModel, TrainLog)> {
    let mut trainer = Trainer::new(tasks, cfg)?;
    let mut model = trainer.init_model()?;
    let log = trainer.run(&mut model)?;
    Ok((model, log))
}

/// WPCA initialization: every `Lt` from its own task, `L0` copied from the first task.
pub fn init_model(tasks: &[Task], cfg: &TrainConfig) -> Result<CoupledModel> {
    Trainer::new(tasks, cfg)?.init_model()
}

/// Sequential SGD driver. One RNG stream (seeded from the config) feeds the WPCA subsets and
/// then the constraint draws, so results are a pure function of inputs and seed.
pub struct Trainer<'a> {
    tasks: &'a [Task],
    cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(tasks: &'a [Task], cfg: &TrainConfig) -> Result<Self> {
        check_tasks(tasks, cfg)?;
        Ok(Self {
            tasks,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    fn wpca_for_task(&mut self, t: usize) -> Result<ProjectionMatrix> {
        let task = &self.tasks[t];
        let mut items = task.pairs.referenced_items();
        if items.len() > self.cfg.wpca_sample_cap {
            let mut picked: Vec<usize> = index::sample(&mut self.rng, items.len(), self.cfg.wpca_sample_cap)
                .into_iter()
                .map(|k| items[k])
                .collect();
            picked.sort_unstable();
            items = picked;
        }
        let samples = task.features.select(&items);
        Ok(fit_wpca(&samples, self.cfg.d, self.cfg.wpca_epsilon)?.projection)
    }

    pub fn init_model(&mut self) -> Result<CoupledModel> {
        let mut projections = Vec::with_capacity(self.tasks.len());
        let needed = match self.cfg.variant {
            Variant::CpMtml => self.tasks.len(),
            _ => 1,
        };
        for t in 0..needed {
            projections.push(self.wpca_for_task(t)?);
        }
        let d = self.cfg.d;
        let mut model = match self.cfg.variant {
            Variant::CpMtml => {
                let common = projections[0].clone();
                CoupledModel::coupled(common, projections)?
            }
            Variant::MtLmca => CoupledModel::mtlmca(
                projections.swap_remove(0),
                (0..self.tasks.len()).map(|_| ProjectionMatrix::eye(d, d)).collect(),
            )?,
            v => CoupledModel::single(v, projections.swap_remove(0))?,
        };
        model.set_gamma(self.cfg.gamma);
        Ok(model)
    }

    /// Learning rate in effect: configured, or estimated from the first task's pair spread.
    pub fn resolve_eta(&self) -> Result<f64> {
        if let Some(eta) = self.cfg.eta {
            return Ok(eta);
        }
        // Separate stream: the estimate must not shift the training draws.
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed_e7a0_0000_0001);
        let task = &self.tasks[0];
        let mut total = 0.0;
        for _ in 0..100 {
            let c = sample_constraint(&task.pairs, &mut rng)?;
            let (a, b) = (task.features.row(c.i), task.features.row(c.j));
            total += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        let mean = total / 100.0;
        if mean <= 0.0 {
            return Err(Error::InvalidArgument(
                "cannot estimate eta: sampled pairs have zero spread".into(),
            ));
        }
        Ok(1e-3 * self.cfg.d as f64 / mean)
    }

    /// Runs `niters` round-robin iterations on `model`.
    pub fn run(&mut self, model: &mut CoupledModel) -> Result<TrainLog> {
        let n_tasks = self.tasks.len();
        check_dim(n_tasks, model.task_count())?;
        check_dim(self.tasks[0].features.dim(), model.input_dim())?;
        let eta = self.resolve_eta()?;
        let mut log = TrainLog {
            service_counts: vec![0; n_tasks],
            eta,
            ..TrainLog::default()
        };
        if model.variant() == Variant::Wpca {
            return Ok(log);
        }
        let rates = StepRates::new(eta, self.cfg.gamma, self.cfg.bias_factor);
        let mut scratch = Scratch::new(model.input_dim(), model.proj_dim());
        let mut window = vec![(0usize, 0.0f64, 0usize); n_tasks];
        let log_every = self.cfg.log_every;
        let start = Instant::now();

        for i in 0..self.cfg.niters {
            let t = i % n_tasks;
            let task = &self.tasks[t];
            let c = sample_constraint(&task.pairs, &mut self.rng)?;
            let rep = step_with(
                model,
                t,
                task.features.row(c.i),
                task.features.row(c.j),
                c.y_f64(),
                &rates,
                &mut scratch,
            );
            if !rep.dsq.is_finite() {
                return Err(Error::Diverged { iteration: i });
            }
            log.service_counts[t] += 1;
            let w = &mut window[t];
            w.0 += 1;
            w.1 += rep.loss_before;
            w.2 += usize::from(rep.violated);

            let last = i + 1 == self.cfg.niters;
            if log_every > 0 && ((i + 1) % log_every == 0 || last) {
                let tasks = window
                    .iter_mut()
                    .enumerate()
                    .filter(|(_, w)| w.0 > 0)
                    .map(|(task, w)| {
                        let tw = TaskWindow {
                            task,
                            steps: w.0,
                            mean_loss: w.1 / w.0 as f64,
                            violation_rate: w.2 as f64 / w.0 as f64,
                        };
                        *w = (0, 0.0, 0);
                        tw
                    })
                    .collect();
                log.points.push(LogPoint { iteration: i, tasks });
            }
        }
        log.sgd_seconds = start.elapsed().as_secs_f64();
        if !model.is_finite() {
            return Err(Error::Diverged {
                iteration: self.cfg.niters.saturating_sub(1),
            });
        }
        Ok(log)
    }
}
