//! Compressed gallery indexing, exact k-NN scan and n-call@K evaluation.
//!
//! Gallery items are encoded by stacking the outputs of the model's projections for a task,
//! so squared Euclidean distance between codes equals the learned task distance. The scan is
//! exhaustive, split across shards whose partial top-K lists are merged; ordering is by
//! `(distance, id)` which makes the result independent of the sharding.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;

use crate::data::{Dataset, FeatureSet, DISTRACTOR};
use crate::error::{check_dim, Error, Result};
use crate::model::{CoupledModel, ProjectionMatrix};

/// Storage type for gallery codes. Distances always accumulate in `f64`.
pub trait CodeScalar: Copy + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl CodeScalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl CodeScalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

/// Maps an input vector to its code by stacking the outputs of one or more projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    blocks: Vec<ProjectionMatrix>,
    code_len: usize,
}

impl Encoder {
    pub fn new(blocks: Vec<ProjectionMatrix>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("encoder needs at least one projection".into()))?;
        let dim = first.cols();
        for b in &blocks {
            check_dim(dim, b.cols())?;
        }
        let code_len = blocks.iter().map(ProjectionMatrix::rows).sum();
        Ok(Self { blocks, code_len })
    }

    /// Encoder whose code distances reproduce task `t`'s learned distance.
    pub fn for_task(m: &CoupledModel, t: usize) -> Result<Self> {
        Self::new(m.code_blocks(t)?)
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn input_dim(&self) -> usize {
        self.blocks[0].cols()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut out = vec![0.0; self.code_len];
        self.encode_into(x, &mut out);
        Ok(out)
    }

    fn encode_into(&self, x: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for b in &self.blocks {
            b.project_into(x, &mut out[off..off + b.rows()]);
            off += b.rows();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub dist_sq: f64,
}

impl Neighbor {
    fn cmp_key(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.id.cmp(&other.id))
    }
}

impl Eq for Neighbor {}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_key(other)
    }
}

/// Rows below which a scan is not split across threads.
const MIN_SHARD_ROWS: usize = 8192;

/// Projected gallery: contiguous row-major codes with ids and relevance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex<S: CodeScalar = f64> {
    code_len: usize,
    codes: Vec<S>,
    ids: Vec<u64>,
    labels: Vec<i64>,
}

impl<S: CodeScalar> RetrievalIndex<S> {
    pub fn with_code_len(code_len: usize) -> Self {
        Self {
            code_len,
            codes: Vec::new(),
            ids: Vec::new(),
            labels: Vec::new(),
        }
    }

    /// Encodes every gallery row; ids are the row positions.
    pub fn build(gallery: &FeatureSet, labels: &[i64], enc: &Encoder) -> Result<Self> {
        if gallery.is_empty() {
            return Err(Error::InvalidArgument("cannot index an empty gallery".into()));
        }
        let mut idx = Self::with_code_len(enc.code_len());
        idx.append(gallery, labels, enc)?;
        Ok(idx)
    }

    /// Appends encoded rows; ids continue from the current length.
    pub fn append(&mut self, rows: &FeatureSet, labels: &[i64], enc: &Encoder) -> Result<()> {
        check_dim(self.code_len, enc.code_len())?;
        check_dim(enc.input_dim(), rows.dim())?;
        check_dim(rows.len(), labels.len())?;
        let start = self.ids.len() as u64;
        let cl = self.code_len;
        let mut encoded = vec![S::from_f64(0.0); rows.len() * cl];
        encoded
            .par_chunks_mut(cl)
            .zip(rows.as_slice().par_chunks(rows.dim()))
            .for_each_init(
                || vec![0.0; cl],
                |buf, (dst, x)| {
                    enc.encode_into(x, buf);
                    for (d, v) in dst.iter_mut().zip(buf.iter()) {
                        *d = S::from_f64(*v);
                    }
                },
            );
        self.codes.extend_from_slice(&encoded);
        self.ids.extend((0..rows.len() as u64).map(|k| start + k));
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    /// Appends distractors, which are never relevant to any query.
    pub fn append_distractors(&mut self, rows: &FeatureSet, enc: &Encoder) -> Result<()> {
        self.append(rows, &vec![DISTRACTOR; rows.len()], enc)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_len(&self) -> usize {
        self.code_len
    }

    pub fn code(&self, r: usize) -> &[S] {
        &self.codes[r * self.code_len..(r + 1) * self.code_len]
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn distractor_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == DISTRACTOR).count()
    }

    /// Bytes held by the code matrix.
    pub fn code_bytes(&self) -> usize {
        self.codes.len() * std::mem::size_of::<S>()
    }

    /// Label of the item with the given id.
    pub fn label_of(&self, id: u64) -> i64 {
        self.labels[id as usize]
    }

    /// The `k` nearest codes, ascending by `(distance, id)`.
    pub fn search(&self, query_code: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        let shards = rayon::current_num_threads().max(1);
        let per = self.len().div_ceil(shards).max(MIN_SHARD_ROWS);
        self.search_sharded(query_code, k, per)
    }

    /// As [`search`](Self::search) with an explicit shard size in rows.
    pub fn search_sharded(&self, query_code: &[f64], k: usize, shard_rows: usize) -> Result<Vec<Neighbor>> {
        check_dim(self.code_len, query_code.len())?;
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let shard_rows = shard_rows.max(1);
        let n_shards = self.len().div_ceil(shard_rows);
        let partial: Vec<Vec<Neighbor>> = (0..n_shards)
            .into_par_iter()
            .map(|s| {
                let lo = s * shard_rows;
                let hi = (lo + shard_rows).min(self.len());
                self.scan_range(query_code, k, lo, hi)
            })
            .collect();
        let mut merged: Vec<Neighbor> = partial.into_iter().flatten().collect();
        merged.sort_unstable();
        merged.truncate(k);
        Ok(merged)
    }

    fn scan_range(&self, q: &[f64], k: usize, lo: usize, hi: usize) -> Vec<Neighbor> {
        let mut heap: BinaryHeap<Neighbor> = BinaryHeap::with_capacity(k + 1);
        for r in lo..hi {
            let code = &self.codes[r * self.code_len..(r + 1) * self.code_len];
            let mut dist = 0.0f64;
            for (c, &qv) in code.iter().zip(q) {
                let diff = c.to_f64() - qv;
                dist += diff * diff;
            }
            let cand = Neighbor {
                id: self.ids[r],
                dist_sq: dist,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(top) = heap.peek() {
                if cand < *top {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        heap.into_sorted_vec()
    }
}

/// Index over `gallery` coded for task `t` of `m`, in full precision.
pub fn build_index(
    gallery: &FeatureSet,
    labels: &[i64],
    m: &CoupledModel,
    t: usize,
) -> Result<RetrievalIndex<f64>> {
    RetrievalIndex::build(gallery, labels, &Encoder::for_task(m, t)?)
}

/// Encodes `q` for task `t` and returns its `k` nearest gallery items.
pub fn query_knn<S: CodeScalar>(
    idx: &RetrievalIndex<S>,
    q: &[f64],
    m: &CoupledModel,
    t: usize,
    k: usize,
) -> Result<Vec<Neighbor>> {
    let enc = Encoder::for_task(m, t)?;
    idx.search(&enc.encode(q)?, k)
}

/// 1 iff at least `n` of the first `k` entries are relevant.
pub fn n_call_at_k(relevance: &[bool], n: usize, k: usize) -> bool {
    relevance.iter().take(k).filter(|&&r| r).count() >= n
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub n: usize,
    /// Mean n-call@K over queries, aligned with `ks`.
    pub scores: Vec<f64>,
    /// Per query, per K: whether the query scored.
    pub per_query: Vec<Vec<bool>>,
    /// Per query: ranked ids up to the largest K.
    pub ranked: Vec<Vec<u64>>,
    pub n_queries: usize,
    pub n_distractors: usize,
}

impl EvalReport {
    pub fn score(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|p| self.scores[p])
    }
}

/// Scores every query against a prepared index.
pub fn evaluate_index<S: CodeScalar>(
    idx: &RetrievalIndex<S>,
    queries: &Dataset,
    enc: &Encoder,
    ks: &[usize],
    n: usize,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::InvalidArgument("no queries to evaluate".into()));
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    if ks.is_empty() || ks.contains(&0) || n == 0 {
        return Err(Error::InvalidArgument("Ks and n must be non-empty and >= 1".into()));
    }
    if queries.labels.contains(&DISTRACTOR) {
        return Err(Error::InvalidArgument("query carries the reserved distractor label".into()));
    }
    check_dim(enc.input_dim(), queries.dim())?;
    let kmax = *ks.iter().max().expect("non-empty");

    let results: Vec<Result<(Vec<bool>, Vec<u64>)>> = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let code = enc.encode(queries.features.row(qi))?;
            let hits = idx.search(&code, kmax)?;
            let label = queries.labels[qi];
            let relevance: Vec<bool> = hits.iter().map(|h| idx.label_of(h.id) == label).collect();
            let scored = ks.iter().map(|&k| n_call_at_k(&relevance, n, k)).collect();
            Ok((scored, hits.iter().map(|h| h.id).collect()))
        })
        .collect();

    let mut per_query = Vec::with_capacity(queries.len());
    let mut ranked = Vec::with_capacity(queries.len());
    for r in results {
        let (s, ids) = r?;
        per_query.push(s);
        ranked.push(ids);
    }
    let scores = (0..ks.len())
        .map(|p| per_query.iter().filter(|q| q[p]).count() as f64 / queries.len() as f64)
        .collect();
    Ok(EvalReport {
        ks: ks.to_vec(),
        n,
        scores,
        per_query,
        ranked,
        n_queries: queries.len(),
        n_distractors: idx.distractor_count(),
    })
}

/// Builds an index over `gallery` plus optional distractors and scores `queries`.
pub fn evaluate(
    queries: &Dataset,
    gallery: &Dataset,
    distractors: Option<&FeatureSet>,
    enc: &Encoder,
    ks: &[usize],
    n: usize,
) -> Result<EvalReport> {
    if gallery.labels.contains(&DISTRACTOR) {
        return Err(Error::InvalidArgument("gallery carries the reserved distractor label".into()));
    }
    let mut idx = RetrievalIndex::<f64>::build(&gallery.features, &gallery.labels, enc)?;
    if let Some(d) = distractors {
        idx.append_distractors(d, enc)?;
    }
    evaluate_index(&idx, queries, enc, ks, n)
}

/// [`evaluate`] with the encoder of task `t` of `m`.
pub fn evaluate_model(
    queries: &Dataset,
    gallery: &Dataset,
    distractors: Option<&FeatureSet>,
    m: &CoupledModel,
    t: usize,
    ks: &[usize],
    n: usize,
) -> Result<EvalReport> {
    evaluate(queries, gallery, distractors, &Encoder::for_task(m, t)?, ks, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn line_index(points: &[f64]) -> RetrievalIndex<f64> {
        let fs = FeatureSet::new(1, points.to_vec()).unwrap();
        let enc = Encoder::new(vec![ProjectionMatrix::eye(1, 1)]).unwrap();
        RetrievalIndex::build(&fs, &vec![0; points.len()], &enc).unwrap()
    }

    #[test]
    fn knn_on_a_line() {
        let idx = line_index(&[0.0, 1.0, 3.0]);
        let hits = idx.search(&[0.9], 3).unwrap();
        let ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![1, 0, 2]);
        let want = [0.01, 0.81, 4.41];
        for (h, w) in hits.iter().zip(want) {
            assert!((h.dist_sq - w).abs() < 1e-12);
        }
        let exact = idx.search(&[3.0], 1).unwrap();
        assert_eq!((exact[0].id, exact[0].dist_sq), (2, 0.0));
        assert_eq!(idx.search(&[0.0], 10).unwrap().len(), 3);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = line_index(&[1.0, -1.0, 1.0, -1.0]);
        let ids: Vec<u64> = idx.search(&[0.0], 4).unwrap().iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }

    #[test]
    fn sharding_is_bit_identical() {
        let pts: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64 * 0.01).collect();
        let idx = line_index(&pts);
        let whole = idx.search_sharded(&[4.321], 25, usize::MAX).unwrap();
        for shard in [1, 3, 64, 999] {
            assert_eq!(idx.search_sharded(&[4.321], 25, shard).unwrap(), whole);
        }
    }

    #[test]
    fn n_call_examples() {
        let r = [false, false, true, false];
        assert!(!n_call_at_k(&r, 1, 2));
        assert!(n_call_at_k(&r, 1, 3));
        let r = [true, false, true];
        assert!(!n_call_at_k(&r, 2, 2));
        assert!(n_call_at_k(&r, 2, 3));
        assert!(!n_call_at_k(&[false; 5], 1, 5));
    }

    #[test]
    fn empty_gallery_rejected() {
        let enc = Encoder::new(vec![ProjectionMatrix::eye(1, 2)]).unwrap();
        assert!(RetrievalIndex::<f64>::build(&FeatureSet::empty(2), &[], &enc).is_err());
    }

    #[test]
    fn stacked_codes_reproduce_coupled_distance() {
        let l0 = ProjectionMatrix::from_rows(&[vec![1.0, 0.5, 0.0]]).unwrap();
        let l1 = ProjectionMatrix::from_rows(&[vec![0.0, -1.0, 2.0]]).unwrap();
        let m = CoupledModel::coupled(l0, vec![l1]).unwrap();
        let g = FeatureSet::from_rows(3, &[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let idx = build_index(&g, &[0, 1], &m, 0).unwrap();
        assert_eq!(idx.code_len(), 2);
        let code_d: f64 = idx.code(0).iter().zip(idx.code(1)).map(|(a, b)| (a - b) * (a - b)).sum();
        let direct = m.coupled_distance_sq(0, g.row(0), g.row(1)).unwrap();
        assert!((code_d - direct).abs() < 1e-9);

        let single = CoupledModel::single(Variant::Stml, ProjectionMatrix::eye(2, 3)).unwrap();
        let idx = build_index(&g, &[0, 1], &single, 0).unwrap();
        assert_eq!(idx.code(0), &[1.0, 2.0]);
    }

    #[test]
    fn evaluate_trivial_cases() {
        let enc = Encoder::new(vec![ProjectionMatrix::eye(2, 2)]).unwrap();
        let q = Dataset::new(FeatureSet::new(2, vec![0.0, 0.0, 5.0, 5.0]).unwrap(), vec![1, 2]).unwrap();
        let rep = evaluate(&q, &q.clone(), None, &enc, &[1], 1).unwrap();
        assert_eq!(rep.scores, vec![1.0]);

        let g = Dataset::new(q.features.clone(), vec![7, 8]).unwrap();
        let rep = evaluate(&q, &g, None, &enc, &[1, 2], 1).unwrap();
        assert_eq!(rep.scores, vec![0.0, 0.0]);

        let empty = Dataset::new(FeatureSet::empty(2), vec![]).unwrap();
        assert!(evaluate(&empty, &q, None, &enc, &[1], 1).is_err());
        assert!(evaluate(&q, &empty, None, &enc, &[1], 1).is_err());
    }

    #[test]
    fn distractors_are_counted_and_never_relevant() {
        let enc = Encoder::new(vec![ProjectionMatrix::eye(1, 1)]).unwrap();
        let q = Dataset::new(FeatureSet::new(1, vec![0.0]).unwrap(), vec![3]).unwrap();
        let g = Dataset::new(FeatureSet::new(1, vec![1.0]).unwrap(), vec![3]).unwrap();
        let d = FeatureSet::new(1, vec![0.0, 0.1, 0.2]).unwrap();
        let rep = evaluate(&q, &g, Some(&d), &enc, &[1, 3, 4], 1).unwrap();
        assert_eq!(rep.n_distractors, 3);
        assert_eq!(rep.scores, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn f32_codes_use_half_the_memory() {
        let fs = FeatureSet::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let enc = Encoder::new(vec![ProjectionMatrix::eye(2, 2)]).unwrap();
        let a = RetrievalIndex::<f32>::build(&fs, &[0, 1], &enc).unwrap();
        let b = RetrievalIndex::<f64>::build(&fs, &[0, 1], &enc).unwrap();
        assert_eq!(a.code_bytes() * 2, b.code_bytes());
        assert_eq!(a.search(&[1.0, 2.0], 1).unwrap()[0].id, 0);
    }
}
