//! On-disk formats.
//!
//! Feature file (little-endian):
//!
//! ```text
//! "FVEC" | version u32 = 1 | count u32 | dim u32 | dtype u8 (0 = f32, 1 = f64) | count*dim values
//! ```
//!
//! Model file (little-endian, all reals f64):
//!
//! ```text
//! "CPML" | version u32 = 1 | variant u8 | T u32 | d u32 | D u32 | gamma
//!        | biases[T] | L0 (d x D) | task projections (T x d x D, coupled only)
//!        | task factors (T x d x d, mtLMCA only)
//! ```
//!
//! Matrices are row-major. Labels are text, one integer per line. Pairs are text lines
//! `i,j,y` with `y` in {-1, 1}.

use std::fs;
use std::path::Path;

use crate::data::FeatureSet;
use crate::error::{Error, Result};
use crate::model::{CoupledModel, ProjectionMatrix, Variant};
use crate::pairs::{PairConstraint, PairSet};
use crate::retrieval::EvalReport;

pub const FEATURE_MAGIC: [u8; 4] = *b"FVEC";
pub const MODEL_MAGIC: [u8; 4] = *b"CPML";
pub const FORMAT_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 17;
const MODEL_HEADER: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(Error::InvalidArgument(format!("unknown dtype {s:?} (f32 or f64)"))),
        }
    }
}

/// Cursor over a byte buffer that reports truncation against a precomputed total.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().expect("4 bytes"))
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().expect("8 bytes"))
    }

    fn f64s(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.f64()).collect()
    }
}

fn check_length(expected: u64, actual: u64) -> Result<()> {
    if actual < expected {
        Err(Error::Truncated { expected, actual })
    } else if actual > expected {
        Err(Error::TrailingBytes { expected, actual })
    } else {
        Ok(())
    }
}

fn check_magic(buf: &[u8], magic: [u8; 4], header: usize) -> Result<()> {
    if buf.len() < 4 {
        return Err(Error::Truncated {
            expected: header as u64,
            actual: buf.len() as u64,
        });
    }
    let found: [u8; 4] = buf[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if buf.len() < header {
        return Err(Error::Truncated {
            expected: header as u64,
            actual: buf.len() as u64,
        });
    }
    Ok(())
}

pub fn encode_features(fs: &FeatureSet, dtype: Dtype) -> Result<Vec<u8>> {
    let count = u32::try_from(fs.len()).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let dim = u32::try_from(fs.dim()).map_err(|_| Error::InvalidArgument("dimension too large".into()))?;
    let mut out = Vec::with_capacity(FEATURE_HEADER + fs.as_slice().len() * dtype.width());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    out.push(dtype.tag());
    match dtype {
        Dtype::F32 => fs
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => fs
            .as_slice()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode_features(buf: &[u8]) -> Result<FeatureSet> {
    check_magic(buf, FEATURE_MAGIC, FEATURE_HEADER)?;
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32() as u64;
    let dim = r.u32() as u64;
    let dtype = match r.u8() {
        0 => Dtype::F32,
        1 => Dtype::F64,
        t => return Err(Error::Malformed(format!("unknown dtype tag {t}"))),
    };
    if dim == 0 {
        return Err(Error::Malformed("zero feature dimension".into()));
    }
    check_length(
        FEATURE_HEADER as u64 + count * dim * dtype.width() as u64,
        buf.len() as u64,
    )?;
    let payload = &buf[FEATURE_HEADER..];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    FeatureSet::new(dim as usize, values)
}

pub fn save_features(fs: &FeatureSet, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_features(fs, dtype)?).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&buf)
}

/// Reads only the header: `(count, dim, dtype)`.
pub fn feature_header(path: impl AsRef<Path>) -> Result<(u32, u32, Dtype)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = [0u8; FEATURE_HEADER];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    check_magic(&head[..n], FEATURE_MAGIC, FEATURE_HEADER)?;
    let mut r = Reader { buf: &head, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let (count, dim) = (r.u32(), r.u32());
    let dtype = match r.u8() {
        0 => Dtype::F32,
        1 => Dtype::F64,
        t => return Err(Error::Malformed(format!("unknown dtype tag {t}"))),
    };
    Ok((count, dim, dtype))
}

pub fn encode_model(m: &CoupledModel) -> Vec<u8> {
    let (d, dd, t) = (m.proj_dim(), m.input_dim(), m.task_count());
    let mut out = Vec::with_capacity(MODEL_HEADER + 8 * (t + d * dd * (1 + m.task_mats().len())));
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(m.variant().tag());
    for v in [t, d, dd] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&m.gamma().to_le_bytes());
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    put(m.biases());
    put(m.common().as_slice());
    m.task_mats().iter().for_each(|l| put(l.as_slice()));
    m.task_rot().iter().for_each(|r| put(r.as_slice()));
    out
}

/// Exact byte length implied by a model header.
fn model_len(variant: Variant, t: u64, d: u64, dd: u64) -> u64 {
    let blocks = match variant {
        Variant::CpMtml => (1 + t) * d * dd,
        Variant::MtLmca => d * dd + t * d * d,
        _ => d * dd,
    };
    MODEL_HEADER as u64 + 8 * (t + blocks)
}

pub fn decode_model(buf: &[u8]) -> Result<CoupledModel> {
    check_magic(buf, MODEL_MAGIC, MODEL_HEADER)?;
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let tag = r.u8();
    let variant =
        Variant::from_tag(tag).ok_or_else(|| Error::Malformed(format!("unknown variant tag {tag}")))?;
    let (t, d, dd) = (r.u32() as usize, r.u32() as usize, r.u32() as usize);
    if t == 0 || d == 0 || dd == 0 {
        return Err(Error::Malformed("zero task count or dimension".into()));
    }
    if variant.is_single() && t != 1 {
        return Err(Error::Malformed(format!("{variant} model must have exactly one task")));
    }
    check_length(model_len(variant, t as u64, d as u64, dd as u64), buf.len() as u64)?;
    let gamma = r.f64();
    let biases = r.f64s(t);
    let common = ProjectionMatrix::new(d, dd, r.f64s(d * dd))?;
    let mut task_mats = Vec::new();
    let mut task_rot = Vec::new();
    match variant {
        Variant::CpMtml => {
            for _ in 0..t {
                task_mats.push(ProjectionMatrix::new(d, dd, r.f64s(d * dd))?);
            }
        }
        Variant::MtLmca => {
            for _ in 0..t {
                task_rot.push(ProjectionMatrix::new(d, d, r.f64s(d * d))?);
            }
        }
        _ => {}
    }
    CoupledModel::from_parts(variant, common, task_mats, task_rot, biases, gamma)
}

pub fn save_model(m: &CoupledModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(m)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CoupledModel> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&buf)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<i64>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    data_lines(&text)
        .map(|(line, l)| {
            l.parse::<i64>().map_err(|e| Error::Parse {
                path: path.into(),
                line,
                msg: format!("bad label {l:?}: {e}"),
            })
        })
        .collect()
}

pub fn save_labels(labels: &[i64], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(labels.len() * 4);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: impl AsRef<Path>, task_id: usize) -> Result<PairSet> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let bad = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let fields: Vec<&str> = l.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(bad(format!("expected i,j,y but got {l:?}")));
        }
        let i: usize = fields[0].parse().map_err(|e| bad(format!("bad index: {e}")))?;
        let j: usize = fields[1].parse().map_err(|e| bad(format!("bad index: {e}")))?;
        let y: i8 = fields[2].parse().map_err(|e| bad(format!("bad label: {e}")))?;
        out.push(PairConstraint::new(i, j, y).map_err(|e| bad(e.to_string()))?);
    }
    Ok(PairSet::new(task_id, out))
}

pub fn save_pairs(ps: &PairSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(ps.len() * 12);
    for c in ps.constraints() {
        s.push_str(&format!("{},{},{}\n", c.i, c.j, c.y));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub const REPORT_HEADER: &str = "method,aux_task,K,score,n_queries,n_distractors";

/// One CSV row per K. Scores use the shortest representation that round-trips exactly.
pub fn report_rows(method: &str, aux_task: &str, report: &EvalReport) -> String {
    let mut s = String::new();
    for (k, score) in report.ks.iter().zip(&report.scores) {
        s.push_str(&format!(
            "{method},{aux_task},{k},{score},{},{}\n",
            report.n_queries, report.n_distractors
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub aux_task: String,
    pub k: usize,
    pub score: f64,
    pub n_queries: usize,
    pub n_distractors: usize,
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Malformed("missing report header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Malformed(format!("bad report row {l:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(ReportRow {
                method: f[0].to_string(),
                aux_task: f[1].to_string(),
                k: f[2].parse().map_err(|_| bad())?,
                score: f[3].parse().map_err(|_| bad())?,
                n_queries: f[4].parse().map_err(|_| bad())?,
                n_distractors: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn feature_round_trip_f32() {
        let fs = FeatureSet::new(3, vec![1.5, -2.0, 0.25, 3.0, 1e-3, 7.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.fvec");
        save_features(&fs, &p, Dtype::F32).unwrap();
        let back = load_features(&p).unwrap();
        assert_eq!((back.len(), back.dim()), (2, 3));
        for (a, b) in fs.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(feature_header(&p).unwrap(), (2, 3, Dtype::F32));
    }

    #[test]
    fn feature_errors_are_distinct() {
        let fs = FeatureSet::new(2, vec![1.0, 2.0]).unwrap();
        let good = encode_features(&fs, Dtype::F64).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_features(&bad), Err(Error::BadMagic { .. })));

        assert!(matches!(
            decode_features(&good[..good.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_features(&good[..10]), Err(Error::Truncated { .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_features(&long), Err(Error::TrailingBytes { .. })));

        let mut ver = good.clone();
        ver[4] = 9;
        assert!(matches!(decode_features(&ver), Err(Error::UnsupportedVersion(9))));

        let mut nan = good.clone();
        nan[FEATURE_HEADER..FEATURE_HEADER + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan), Err(Error::NonFinite(0))));

        let mut dt = good;
        dt[16] = 7;
        assert!(matches!(decode_features(&dt), Err(Error::Malformed(_))));
    }

    #[test]
    fn count_times_dim_exceeding_file_is_truncation() {
        let fs = FeatureSet::new(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = encode_features(&fs, Dtype::F32).unwrap();
        buf[8..12].copy_from_slice(&1000u32.to_le_bytes());
        assert!(matches!(decode_features(&buf), Err(Error::Truncated { .. })));
    }

    fn sample_models() -> Vec<CoupledModel> {
        let l = |r, c, s: f64| {
            ProjectionMatrix::new(r, c, (0..r * c).map(|k| s * (k as f64 + 0.5).sin()).collect()).unwrap()
        };
        let mut cp = CoupledModel::coupled(l(2, 3, 1.0), vec![l(2, 3, 0.5), l(2, 3, -0.25)]).unwrap();
        cp.set_gamma(0.3);
        vec![
            cp,
            CoupledModel::single(Variant::Stml, l(2, 3, 2.0)).unwrap(),
            CoupledModel::single(Variant::Wpca, l(1, 3, 2.0)).unwrap(),
            CoupledModel::mtlmca(l(2, 4, 1.0), vec![l(2, 2, 1.0)]).unwrap(),
        ]
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for m in sample_models() {
            let p = dir.path().join("m.cpml");
            save_model(&m, &p).unwrap();
            let back = load_model(&p).unwrap();
            assert_eq!(back, m);
            if m.variant() == Variant::Stml {
                assert!(back.task_mats().is_empty());
            }
        }
    }

    #[test]
    fn corrupted_model_rejected() {
        for m in sample_models() {
            let buf = encode_model(&m);
            assert!(matches!(decode_model(&buf[..buf.len() - 1]), Err(Error::Truncated { .. })));
            let mut long = buf.clone();
            long.extend_from_slice(&[0; 8]);
            assert!(matches!(decode_model(&long), Err(Error::TrailingBytes { .. })));
            let mut tag = buf.clone();
            tag[8] = 42;
            assert!(matches!(decode_model(&tag), Err(Error::Malformed(_))));
        }
        assert!(matches!(decode_model(b"FVEC"), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn labels_and_pairs_text() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("l.txt");
        save_labels(&[3, -1, 7], &lp).unwrap();
        assert_eq!(load_labels(&lp).unwrap(), vec![3, -1, 7]);
        std::fs::write(&lp, "1\nx\n").unwrap();
        assert!(matches!(load_labels(&lp), Err(Error::Parse { line: 2, .. })));

        let pp = dir.path().join("p.txt");
        let ps = PairSet::new(0, vec![PairConstraint::new(0, 4, 1).unwrap(), PairConstraint::new(2, 1, -1).unwrap()]);
        save_pairs(&ps, &pp).unwrap();
        assert_eq!(load_pairs(&pp, 0).unwrap(), ps);
        std::fs::write(&pp, "0,1,2\n").unwrap();
        assert!(load_pairs(&pp, 0).is_err());
        std::fs::write(&pp, "0,0,1\n").unwrap();
        assert!(load_pairs(&pp, 0).is_err());
    }

    #[test]
    fn report_csv_round_trips_scores() {
        let rep = EvalReport {
            ks: vec![1, 10],
            n: 1,
            scores: vec![1.0 / 3.0, 0.7],
            per_query: vec![],
            ranked: vec![],
            n_queries: 3,
            n_distractors: 5,
        };
        let text = format!("{REPORT_HEADER}\n{}", report_rows("stml", "n/a", &rep));
        let rows = parse_report_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].score, 1.0 / 3.0);
        assert_eq!(rows[1].k, 10);
    }

    proptest! {
        #[test]
        fn f64_features_round_trip_bit_exactly(vals in proptest::collection::vec(-1e300f64..1e300, 1..64), dim in 1usize..4) {
            let n = vals.len() / dim * dim;
            prop_assume!(n > 0);
            let fs = FeatureSet::new(dim, vals[..n].to_vec()).unwrap();
            let back = decode_features(&encode_features(&fs, Dtype::F64).unwrap()).unwrap();
            prop_assert_eq!(back, fs);
        }
    }
}
