//! Synthetic multi-task data with a controllable shared latent subspace.
//!
//! Latent coordinates are split into a shared block, one block per task, and nuisance
//! coordinates. Task `t`'s classes differ only on the shared block and block `t`; the blocks of
//! the other tasks carry class-independent variation, and a random orthonormal map shared by
//! all tasks embeds the latent vectors in the ambient space.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::data::{Dataset, FeatureSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Ambient dimension D.
    pub dim: usize,
    pub k_shared: usize,
    pub k_task: usize,
    pub classes_per_task: usize,
    /// Samples generated per class, including the one split off as a query.
    pub samples_per_class: usize,
    /// Within-class spread on the informative coordinates.
    pub noise_sigma: f64,
    pub tasks: usize,
    pub seed: u64,
    /// Spread of class centers on the informative coordinates.
    pub center_scale: f64,
    /// Spread of the other tasks' blocks, as a multiple of `noise_sigma`. These coordinates
    /// carry no class information for this task.
    pub foreign_ratio: f64,
    /// Spread of the remaining coordinates, as a multiple of `noise_sigma`.
    pub nuisance_ratio: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 50,
            k_shared: 4,
            k_task: 4,
            classes_per_task: 20,
            samples_per_class: 40,
            noise_sigma: 0.5,
            tasks: 2,
            seed: 0,
            center_scale: 0.7,
            foreign_ratio: 6.0,
            nuisance_ratio: 2.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::InvalidArgument("dim, tasks and classes must be >= 1".into()));
        }
        if self.samples_per_class < 2 {
            return Err(Error::InvalidArgument(
                "samples_per_class must be >= 2 (one is held out as a query)".into(),
            ));
        }
        if self.k_shared + self.tasks * self.k_task > self.dim {
            return Err(Error::InvalidArgument(format!(
                "latent blocks need {} dimensions but D = {}",
                self.k_shared + self.tasks * self.k_task,
                self.dim
            )));
        }
        if self.k_shared + self.k_task == 0 {
            return Err(Error::InvalidArgument("tasks need at least one informative dimension".into()));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("center_scale", self.center_scale),
            ("foreign_ratio", self.foreign_ratio),
            ("nuisance_ratio", self.nuisance_ratio),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Latent coordinates that determine task `t`'s classes.
    pub fn informative_coords(&self, t: usize) -> Vec<usize> {
        let task_start = self.k_shared + t * self.k_task;
        (0..self.k_shared)
            .chain(task_start..task_start + self.k_task)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    /// Training items (all but one sample per class).
    pub train: Dataset,
    /// One held-out sample per class.
    pub queries: Dataset,
    /// Latent coordinates of `train`, before embedding.
    pub train_latent: FeatureSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub tasks: Vec<SynthTask>,
    /// Orthonormal D x D embedding; ambient = embedding * latent.
    pub embedding: DMatrix<f64>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random orthonormal matrix from the QR factorization of a Gaussian matrix.
fn random_orthonormal(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| gauss(rng));
    let qr = g.qr();
    let mut q = qr.q();
    // Fix column signs by R's diagonal so the map is a deterministic function of g.
    let r = qr.r();
    for c in 0..dim {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

fn embed(latent: &FeatureSet, q: &DMatrix<f64>) -> Result<FeatureSet> {
    let dim = latent.dim();
    // rows are samples: X = Z Q^T
    let z = DMatrix::from_row_slice(latent.len(), dim, latent.as_slice());
    let x = z * q.transpose();
    let mut data = Vec::with_capacity(latent.len() * dim);
    for r in 0..x.nrows() {
        data.extend(x.row(r).iter());
    }
    FeatureSet::new(dim, data)
}

/// Generates every task's training split and query split.
pub fn gen_multitask(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let embedding = random_orthonormal(cfg.dim, &mut rng);
    let informative_end = cfg.k_shared + cfg.tasks * cfg.k_task;

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let informative = cfg.informative_coords(t);
        let mut is_informative = vec![false; cfg.dim];
        informative.iter().for_each(|&c| is_informative[c] = true);

        let mut train = FeatureSet::empty(cfg.dim);
        let mut train_labels = Vec::new();
        let mut queries = FeatureSet::empty(cfg.dim);
        let mut query_labels = Vec::new();
        for class in 0..cfg.classes_per_task {
            let center: Vec<f64> = (0..cfg.dim)
                .map(|c| {
                    if is_informative[c] {
                        cfg.center_scale * gauss(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect();
            for s in 0..cfg.samples_per_class {
                let z: Vec<f64> = (0..cfg.dim)
                    .map(|c| {
                        let spread = if is_informative[c] {
                            cfg.noise_sigma
                        } else if c < informative_end {
                            cfg.noise_sigma * cfg.foreign_ratio
                        } else {
                            cfg.noise_sigma * cfg.nuisance_ratio
                        };
                        center[c] + spread * gauss(&mut rng)
                    })
                    .collect();
                if s == 0 {
                    queries.push(&z)?;
                    query_labels.push(class as i64);
                } else {
                    train.push(&z)?;
                    train_labels.push(class as i64);
                }
            }
        }
        tasks.push(SynthTask {
            train: Dataset::new(embed(&train, &embedding)?, train_labels)?,
            queries: Dataset::new(embed(&queries, &embedding)?, query_labels)?,
            train_latent: train,
        });
    }
    Ok(SynthData { tasks, embedding })
}

/// Per-coordinate standard deviation averaged over coordinates.
pub fn marginal_std(fs: &FeatureSet) -> f64 {
    let n = fs.len();
    if n < 2 {
        return 0.0;
    }
    let dim = fs.dim();
    let mut mean = vec![0.0; dim];
    for row in fs.rows() {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = 0.0;
    for row in fs.rows() {
        var += row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    (var / ((n - 1) * dim) as f64).sqrt()
}

/// Rows per independently seeded distractor chunk.
pub const DISTRACTOR_CHUNK: usize = 4096;

/// I.i.d. isotropic Gaussian distractors, generated chunk by chunk so that millions of rows
/// can be projected without materializing them all. Chunk `k` depends only on `(seed, k)`.
pub fn distractor_chunk(dim: usize, std: f64, seed: u64, chunk: usize, rows: usize) -> Result<FeatureSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64 + 1);
    let data: Vec<f64> = (0..rows * dim).map(|_| std * gauss(&mut rng)).collect();
    FeatureSet::new(dim, data)
}

/// `count` distractors as one set (for modest counts).
pub fn gen_distractors(dim: usize, count: usize, std: f64, seed: u64) -> Result<FeatureSet> {
    let chunks: Vec<FeatureSet> = (0..count.div_ceil(DISTRACTOR_CHUNK))
        .into_par_iter()
        .map(|k| {
            let rows = DISTRACTOR_CHUNK.min(count - k * DISTRACTOR_CHUNK);
            distractor_chunk(dim, std, seed, k, rows)
        })
        .collect::<Result<_>>()?;
    let mut out = FeatureSet::empty(dim);
    for c in &chunks {
        out.extend(c)?;
    }
    Ok(out)
}

/// Draws an independent seed for run `k` of a multi-seed experiment.
pub fn derive_seed(base: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(k);
    rng.random()
}
