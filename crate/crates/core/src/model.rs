//! Low-rank projections, the coupled per-task distance and the pairwise hinge objective.
//!
//! A projection `L` (d x D) induces the squared distance `||L (xi - xj)||^2`, which is the
//! Mahalanobis form `delta^T (L^T L) delta` without ever materializing the D x D metric.
//! The coupled model adds a shared projection to a task projection, so task `t` sees
//! `||L0 delta||^2 + ||Lt delta||^2`.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};
use crate::pairs::Task;

/// Dense d x D projection, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProjectionMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("projection must be at least 1x1".into()));
        }
        check_dim(rows * cols, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Rectangular identity: ones on the leading diagonal.
    pub fn eye(rows: usize, cols: usize) -> Self {
        let mut m = Self::zeros(rows, cols);
        for k in 0..rows.min(cols) {
            m.data[k * cols + k] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[cfg(test)]
    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `L x`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        let mut out = vec![0.0; self.rows];
        self.project_into(x, &mut out);
        Ok(out)
    }

    /// `L x` into `out`; lengths must already agree.
    pub(crate) fn project_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            *o = dot(row, x);
        }
    }

    /// `||L delta||^2` without bounds checks beyond debug assertions.
    pub(crate) fn norm_sq_of_projection(&self, delta: &[f64]) -> f64 {
        self.data
            .chunks_exact(self.cols)
            .map(|row| {
                let p = dot(row, delta);
                p * p
            })
            .sum()
    }

    /// In-place rank-one update `L += alpha * u v^T` with `u` of length rows, `v` of length cols.
    pub(crate) fn rank_one_update(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (row, &ui) in self.data.chunks_exact_mut(self.cols).zip(u) {
            let s = alpha * ui;
            for (a, &vj) in row.iter_mut().zip(v) {
                *a += s * vj;
            }
        }
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &ProjectionMatrix) -> Result<ProjectionMatrix> {
        check_dim(self.cols, rhs.rows)?;
        let mut out = vec![0.0; self.rows * rhs.cols];
        for r in 0..self.rows {
            let orow = &mut out[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                for (o, &b) in orow.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(ProjectionMatrix {
            rows: self.rows,
            cols: rhs.cols,
            data: out,
        })
    }

    /// `L^T L` as a dense D x D matrix. Test and inspection use only.
    pub fn gram(&self) -> DMatrix<f64> {
        let l = DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        l.transpose() * l
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorize the reduction.
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for k in 0..4 {
            acc[k] += ca[k] * cb[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn difference(xi: &[f64], xj: &[f64]) -> Vec<f64> {
    xi.iter().zip(xj).map(|(a, b)| a - b).collect()
}

/// `L x`.
pub fn project(l: &ProjectionMatrix, x: &[f64]) -> Result<Vec<f64>> {
    l.project(x)
}

/// `||L xi - L xj||^2`, computed as `||L (xi - xj)||^2`.
pub fn pair_distance_sq(l: &ProjectionMatrix, xi: &[f64], xj: &[f64]) -> Result<f64> {
    check_dim(l.cols(), xi.len())?;
    check_dim(l.cols(), xj.len())?;
    Ok(l.norm_sq_of_projection(&difference(xi, xj)))
}

/// Which learner produced (or will train) a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Coupled projections: shared `L0` plus one `Lt` per task.
    CpMtml,
    /// Single projection trained on one task.
    Stml,
    /// Single projection trained on the union of all tasks' pairs.
    Utml,
    /// Shared `L0` with a d x d task factor, `Lt = Rt L0`.
    MtLmca,
    /// Unsupervised whitened PCA, stored as a single projection.
    Wpca,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::CpMtml,
        Variant::Stml,
        Variant::Utml,
        Variant::MtLmca,
        Variant::Wpca,
    ];

    pub fn tag(self) -> u8 {
        match self {
            Variant::CpMtml => 0,
            Variant::Stml => 1,
            Variant::Utml => 2,
            Variant::MtLmca => 3,
            Variant::Wpca => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::CpMtml => "cpmtml",
            Variant::Stml => "stml",
            Variant::Utml => "utml",
            Variant::MtLmca => "mtlmca",
            Variant::Wpca => "wpca",
        }
    }

    /// True for variants holding a single projection and a single bias.
    pub fn is_single(self) -> bool {
        matches!(self, Variant::Stml | Variant::Utml | Variant::Wpca)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        Self::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

/// All learned parameters: the shared projection, per-task projections and biases.
///
/// Single-projection variants keep their matrix in `common`, leave `task_mats` empty and
/// carry exactly one bias.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledModel {
    variant: Variant,
    common: ProjectionMatrix,
    task_mats: Vec<ProjectionMatrix>,
    task_rot: Vec<ProjectionMatrix>,
    biases: Vec<f64>,
    gamma: f64,
}

impl CoupledModel {
    /// Coupled model with one task projection per task; biases start at 1.
    pub fn coupled(common: ProjectionMatrix, task_mats: Vec<ProjectionMatrix>) -> Result<Self> {
        let t = task_mats.len();
        Self::from_parts(Variant::CpMtml, common, task_mats, Vec::new(), vec![1.0; t], 0.0)
    }

    /// Single-projection model (stML, utML or WPCA) with bias 1.
    pub fn single(variant: Variant, projection: ProjectionMatrix) -> Result<Self> {
        Self::from_parts(variant, projection, Vec::new(), Vec::new(), vec![1.0], 0.0)
    }

    /// mtLMCA model; each `Rt` is d x d.
    pub fn mtlmca(common: ProjectionMatrix, task_rot: Vec<ProjectionMatrix>) -> Result<Self> {
        let t = task_rot.len();
        Self::from_parts(Variant::MtLmca, common, Vec::new(), task_rot, vec![1.0; t], 0.0)
    }

    pub fn from_parts(
        variant: Variant,
        common: ProjectionMatrix,
        task_mats: Vec<ProjectionMatrix>,
        task_rot: Vec<ProjectionMatrix>,
        biases: Vec<f64>,
        gamma: f64,
    ) -> Result<Self> {
        let (d, dd) = (common.rows(), common.cols());
        if d > dd {
            return Err(Error::InvalidArgument(format!(
                "projection dimension {d} exceeds input dimension {dd}"
            )));
        }
        if biases.iter().any(|b| !b.is_finite()) || !gamma.is_finite() {
            return Err(Error::InvalidArgument("biases and gamma must be finite".into()));
        }
        match variant {
            Variant::CpMtml => {
                if task_mats.is_empty() || !task_rot.is_empty() {
                    return Err(Error::InvalidArgument(
                        "coupled model needs >= 1 task projection and no task factors".into(),
                    ));
                }
                for m in &task_mats {
                    check_dim(d, m.rows())?;
                    check_dim(dd, m.cols())?;
                }
                check_dim(task_mats.len(), biases.len())?;
            }
            Variant::MtLmca => {
                if task_rot.is_empty() || !task_mats.is_empty() {
                    return Err(Error::InvalidArgument(
                        "mtLMCA model needs >= 1 task factor and no task projections".into(),
                    ));
                }
                for r in &task_rot {
                    check_dim(d, r.rows())?;
                    check_dim(d, r.cols())?;
                }
                check_dim(task_rot.len(), biases.len())?;
            }
            _ => {
                if !task_mats.is_empty() || !task_rot.is_empty() {
                    return Err(Error::InvalidArgument(format!(
                        "{variant} model holds a single projection"
                    )));
                }
                check_dim(1, biases.len())?;
            }
        }
        Ok(Self {
            variant,
            common,
            task_mats,
            task_rot,
            biases,
            gamma,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn task_count(&self) -> usize {
        self.biases.len()
    }

    /// Projection dimension d.
    pub fn proj_dim(&self) -> usize {
        self.common.rows()
    }

    /// Input dimension D.
    pub fn input_dim(&self) -> usize {
        self.common.cols()
    }

    pub fn common(&self) -> &ProjectionMatrix {
        &self.common
    }

    pub fn task_mats(&self) -> &[ProjectionMatrix] {
        &self.task_mats
    }

    pub fn task_rot(&self) -> &[ProjectionMatrix] {
        &self.task_rot
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) {
        self.gamma = gamma;
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (
        &mut ProjectionMatrix,
        &mut [ProjectionMatrix],
        &mut [ProjectionMatrix],
        &mut [f64],
    ) {
        (
            &mut self.common,
            &mut self.task_mats,
            &mut self.task_rot,
            &mut self.biases,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.common.is_finite()
            && self.task_mats.iter().all(ProjectionMatrix::is_finite)
            && self.task_rot.iter().all(ProjectionMatrix::is_finite)
            && self.biases.iter().all(|b| b.is_finite())
    }

    pub fn check_task(&self, t: usize) -> Result<()> {
        if t < self.task_count() {
            Ok(())
        } else {
            Err(Error::TaskOutOfRange {
                index: t,
                count: self.task_count(),
            })
        }
    }

    /// Coupled squared distance of a difference vector; task and length already validated.
    pub(crate) fn distance_sq_of_delta(&self, t: usize, delta: &[f64]) -> f64 {
        match self.variant {
            Variant::CpMtml => {
                self.common.norm_sq_of_projection(delta)
                    + self.task_mats[t].norm_sq_of_projection(delta)
            }
            Variant::MtLmca => {
                let mut p = vec![0.0; self.proj_dim()];
                self.common.project_into(delta, &mut p);
                self.task_rot[t].norm_sq_of_projection(&p)
            }
            _ => self.common.norm_sq_of_projection(delta),
        }
    }

    /// Squared distance for task `t`.
    pub fn coupled_distance_sq(&self, t: usize, xi: &[f64], xj: &[f64]) -> Result<f64> {
        self.check_task(t)?;
        check_dim(self.input_dim(), xi.len())?;
        check_dim(self.input_dim(), xj.len())?;
        Ok(self.distance_sq_of_delta(t, &difference(xi, xj)))
    }

    /// The D x D Mahalanobis matrix equivalent to the task-`t` distance.
    ///
    /// O(D^2) memory; meant for verification, never for scoring.
    pub fn effective_metric(&self, t: usize) -> Result<DMatrix<f64>> {
        self.check_task(t)?;
        Ok(match self.variant {
            Variant::CpMtml => self.common.gram() + self.task_mats[t].gram(),
            Variant::MtLmca => self.task_rot[t].matmul(&self.common)?.gram(),
            _ => self.common.gram(),
        })
    }

    /// The projections whose stacked outputs reproduce the task-`t` distance in Euclidean space.
    pub fn code_blocks(&self, t: usize) -> Result<Vec<ProjectionMatrix>> {
        self.check_task(t)?;
        Ok(match self.variant {
            Variant::CpMtml => vec![self.common.clone(), self.task_mats[t].clone()],
            Variant::MtLmca => vec![self.task_rot[t].matmul(&self.common)?],
            _ => vec![self.common.clone()],
        })
    }
}

/// `[1 - y (b - dsq)]_+`.
pub fn hinge_loss_term(y: f64, b: f64, dsq: f64) -> f64 {
    (1.0 - y * (b - dsq)).max(0.0)
}

/// Sum of hinge terms over every constraint of every task.
pub fn total_loss(m: &CoupledModel, tasks: &[Task]) -> Result<f64> {
    check_dim(m.task_count(), tasks.len())?;
    let mut total = 0.0;
    for (t, task) in tasks.iter().enumerate() {
        check_dim(m.input_dim(), task.features.dim())?;
        let b = m.biases[t];
        for c in task.pairs.constraints() {
            let delta = difference(task.features.row(c.i), task.features.row(c.j));
            total += hinge_loss_term(c.y_f64(), b, m.distance_sq_of_delta(t, &delta));
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureSet;
    use crate::pairs::{PairConstraint, PairSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> ProjectionMatrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        ProjectionMatrix::new(r, c, data).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn naive_matvec(l: &ProjectionMatrix, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; l.rows()];
        for r in 0..l.rows() {
            for c in 0..l.cols() {
                out[r] += l.get(r, c) * x[c];
            }
        }
        out
    }

    fn rel_close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-3)
    }

    #[test]
    fn project_identity() {
        let l = ProjectionMatrix::eye(2, 2);
        assert_eq!(project(&l, &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn project_selector() {
        let l = ProjectionMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(project(&l, &[5.0, 7.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn project_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_matrix(&mut rng, 4, 6);
        let x = random_vec(&mut rng, 6);
        let got = project(&l, &x).unwrap();
        for (a, b) in got.iter().zip(naive_matvec(&l, &x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn project_dimension_mismatch() {
        let l = ProjectionMatrix::eye(2, 3);
        assert!(matches!(
            project(&l, &[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn pair_distance_examples() {
        let l = ProjectionMatrix::eye(2, 2);
        assert_eq!(pair_distance_sq(&l, &[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = random_matrix(&mut rng, 3, 5);
        let x = random_vec(&mut rng, 5);
        assert_eq!(pair_distance_sq(&l, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn pair_distance_matches_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l = random_matrix(&mut rng, 3, 7);
            let xi = random_vec(&mut rng, 7);
            let xj = random_vec(&mut rng, 7);
            // explicit L^T L built by loops
            let mut m = vec![0.0; 49];
            for a in 0..7 {
                for b in 0..7 {
                    for r in 0..3 {
                        m[a * 7 + b] += l.get(r, a) * l.get(r, b);
                    }
                }
            }
            let delta: Vec<f64> = xi.iter().zip(&xj).map(|(a, b)| a - b).collect();
            let mut oracle = 0.0;
            for a in 0..7 {
                for b in 0..7 {
                    oracle += delta[a] * m[a * 7 + b] * delta[b];
                }
            }
            let got = pair_distance_sq(&l, &xi, &xj).unwrap();
            assert!(rel_close(got, oracle, 1e-9), "{got} vs {oracle}");
        }
    }

    #[test]
    fn coupled_distance_examples() {
        let l0 = ProjectionMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l1 = ProjectionMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let m = CoupledModel::coupled(l0.clone(), vec![l1]).unwrap();
        assert_eq!(m.coupled_distance_sq(0, &[3.0, 4.0], &[0.0, 0.0]).unwrap(), 25.0);

        let zero = CoupledModel::coupled(l0.clone(), vec![ProjectionMatrix::zeros(1, 2)]).unwrap();
        let x = [1.5, -2.0];
        let y = [0.25, 3.0];
        assert_eq!(
            zero.coupled_distance_sq(0, &x, &y).unwrap(),
            pair_distance_sq(&l0, &x, &y).unwrap()
        );
    }

    #[test]
    fn coupled_distance_errors() {
        let m = CoupledModel::coupled(ProjectionMatrix::eye(1, 2), vec![ProjectionMatrix::eye(1, 2)])
            .unwrap();
        assert!(matches!(
            m.coupled_distance_sq(1, &[0.0, 0.0], &[0.0, 0.0]),
            Err(Error::TaskOutOfRange { index: 1, count: 1 })
        ));
        assert!(m.coupled_distance_sq(0, &[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn effective_metric_examples() {
        let l0 = ProjectionMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let l1 = ProjectionMatrix::from_rows(&[vec![0.0, 2.0]]).unwrap();
        let m = CoupledModel::coupled(l0, vec![l1]).unwrap();
        let metric = m.effective_metric(0).unwrap();
        assert_eq!(metric, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]));

        let z = CoupledModel::coupled(ProjectionMatrix::zeros(2, 3), vec![ProjectionMatrix::zeros(2, 3)])
            .unwrap();
        assert_eq!(z.effective_metric(0).unwrap(), DMatrix::zeros(3, 3));
        assert!(z.effective_metric(3).is_err());
    }

    fn random_model(rng: &mut ChaCha8Rng, variant: Variant, d: usize, dd: usize, t: usize) -> CoupledModel {
        match variant {
            Variant::CpMtml => CoupledModel::coupled(
                random_matrix(rng, d, dd),
                (0..t).map(|_| random_matrix(rng, d, dd)).collect(),
            ),
            Variant::MtLmca => CoupledModel::mtlmca(
                random_matrix(rng, d, dd),
                (0..t).map(|_| random_matrix(rng, d, d)).collect(),
            ),
            v => CoupledModel::single(v, random_matrix(rng, d, dd)),
        }
        .unwrap()
    }

    #[test]
    fn effective_metric_equivalence_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in Variant::ALL {
            let m = random_model(&mut rng, v, 2, 5, 3);
            for t in 0..m.task_count() {
                let metric = m.effective_metric(t).unwrap();
                let eig = metric.clone().symmetric_eigen();
                assert!(eig.eigenvalues.min() >= -1e-10);
                for _ in 0..20 {
                    let xi = random_vec(&mut rng, 5);
                    let xj = random_vec(&mut rng, 5);
                    let delta = nalgebra::DVector::from_iterator(5, xi.iter().zip(&xj).map(|(a, b)| a - b));
                    let oracle = (delta.transpose() * &metric * &delta)[(0, 0)];
                    let got = m.coupled_distance_sq(t, &xi, &xj).unwrap();
                    assert!(rel_close(got, oracle, 1e-9), "{v}: {got} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(hinge_loss_term(1.0, 1.0, 0.0), 0.0);
        assert_eq!(hinge_loss_term(1.0, 1.0, 1.5), 1.5);
        assert_eq!(hinge_loss_term(-1.0, 2.0, 5.0), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let m = CoupledModel::coupled(ProjectionMatrix::eye(1, 2), vec![ProjectionMatrix::eye(1, 2)])
            .unwrap();
        let fs = FeatureSet::new(2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let empty = Task::new(fs.clone(), PairSet::new(0, vec![]));
        assert_eq!(total_loss(&m, &[empty]).unwrap(), 0.0);

        let one = Task::new(fs, PairSet::new(0, vec![PairConstraint::new(0, 1, 1).unwrap()]));
        assert_eq!(total_loss(&m, &[one]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_matches_per_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, Variant::CpMtml, 2, 4, 2);
        let mut tasks = Vec::new();
        let mut oracle = 0.0;
        for t in 0..2 {
            let rows: Vec<Vec<f64>> = (0..4).map(|_| random_vec(&mut rng, 4)).collect();
            let fs = FeatureSet::from_rows(4, &rows).unwrap();
            let cons = vec![
                PairConstraint::new(0, 1, 1).unwrap(),
                PairConstraint::new(1, 2, -1).unwrap(),
                PairConstraint::new(0, 3, -1).unwrap(),
            ];
            for c in &cons {
                let dsq = m.coupled_distance_sq(t, &rows[c.i], &rows[c.j]).unwrap();
                oracle += (1.0 - c.y_f64() * (m.biases()[t] - dsq)).max(0.0);
            }
            tasks.push(Task::new(fs, PairSet::new(t, cons)));
        }
        let got = total_loss(&m, &tasks).unwrap();
        assert!(rel_close(got, oracle, 1e-12));
    }

    #[test]
    fn model_shape_validation() {
        assert!(CoupledModel::coupled(ProjectionMatrix::eye(3, 2), vec![ProjectionMatrix::eye(3, 2)]).is_err());
        assert!(CoupledModel::coupled(ProjectionMatrix::eye(1, 2), vec![]).is_err());
        assert!(CoupledModel::coupled(ProjectionMatrix::eye(1, 2), vec![ProjectionMatrix::eye(1, 3)]).is_err());
        let s = CoupledModel::single(Variant::Stml, ProjectionMatrix::eye(1, 2)).unwrap();
        assert_eq!(s.task_count(), 1);
        assert!(s.task_mats().is_empty());
        assert_eq!(s.biases(), &[1.0]);
    }

    proptest! {
        #[test]
        fn metric_axioms_and_scaling(seed in 0u64..1000, c in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, Variant::CpMtml, 2, 5, 2);
            let x = random_vec(&mut rng, 5);
            let y = random_vec(&mut rng, 5);
            let z = random_vec(&mut rng, 5);
            let d = |a: &[f64], b: &[f64]| m.coupled_distance_sq(1, a, b).unwrap();
            prop_assert_eq!(d(&x, y.as_slice()), d(&y, x.as_slice()));
            prop_assert_eq!(d(&x, x.as_slice()), 0.0);
            let (xy, yz, xz) = (d(&x, &y).sqrt(), d(&y, &z).sqrt(), d(&x, &z).sqrt());
            prop_assert!(xz <= xy + yz + 1e-9);
            let cx: Vec<f64> = x.iter().map(|v| c * v).collect();
            let cy: Vec<f64> = y.iter().map(|v| c * v).collect();
            prop_assert!(rel_close(d(&cx, &cy), c * c * d(&x, &y), 1e-9) || (c * c * d(&x, &y)).abs() < 1e-12);
        }

        #[test]
        fn total_loss_additive_over_tasks(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, Variant::Stml, 2, 3, 1);
            let rows: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 3)).collect();
            let fs = FeatureSet::from_rows(3, &rows).unwrap();
            let a = vec![PairConstraint::new(0, 1, 1).unwrap(), PairConstraint::new(2, 3, -1).unwrap()];
            let b = vec![PairConstraint::new(4, 5, 1).unwrap(), PairConstraint::new(1, 4, -1).unwrap()];
            let whole: Vec<_> = a.iter().chain(&b).copied().collect();
            let la = total_loss(&m, &[Task::new(fs.clone(), PairSet::new(0, a))]).unwrap();
            let lb = total_loss(&m, &[Task::new(fs.clone(), PairSet::new(0, b))]).unwrap();
            let lw = total_loss(&m, &[Task::new(fs, PairSet::new(0, whole))]).unwrap();
            prop_assert!(la >= 0.0 && lb >= 0.0);
            prop_assert!((la + lb - lw).abs() <= 1e-12 * lw.max(1.0));
        }
    }
}
