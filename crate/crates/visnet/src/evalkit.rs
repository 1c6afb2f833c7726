//! Retrieval evaluation: embedding normalization, query/gallery distances,
//! CMC and mAP under the same-camera exclusion protocol, an independent
//! brute-force AP oracle, and the binary embedding file format.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedding io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row} has zero norm and cannot be normalized")]
    ZeroNormRow { row: usize },
    #[error("embedding dim mismatch: query {query}, gallery {gallery}")]
    DimMismatch { query: usize, gallery: usize },
    #[error("{what}: {rows} matrix rows but {meta} metadata rows")]
    MetaMisaligned {
        what: &'static str,
        rows: usize,
        meta: usize,
    },
    #[error("ranked list has no positives; average precision is undefined")]
    NoPositives,
    #[error("data length {len} does not factor into {n} rows of {dim}")]
    BadShape { len: usize, n: usize, dim: usize },
    #[error("bad magic {found:?}, expected `VNEB`")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported embedding file version {found}, expected 1")]
    BadVersion { found: u32 },
    #[error("embedding file holds {got} payload bytes, expected {expected}")]
    Truncated { expected: usize, got: usize },
}

/// Identity and camera of one embedding row. Negative pid marks a junk
/// image the evaluator always excludes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowMeta {
    pub pid: i64,
    pub camid: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Vec<f64>,
    n: usize,
    dim: usize,
    meta: Vec<RowMeta>,
}

impl EmbeddingSet {
    pub fn new(data: Vec<f64>, dim: usize, meta: Vec<RowMeta>) -> Result<Self, EvalError> {
        let n = meta.len();
        if data.len() != n * dim {
            return Err(EvalError::BadShape {
                len: data.len(),
                n,
                dim,
            });
        }
        Ok(EmbeddingSet { data, n, dim, meta })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet, EvalError> {
    let mut data = set.data.clone();
    for i in 0..set.n {
        let row = &mut data[i * set.dim..(i + 1) * set.dim];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(EvalError::ZeroNormRow { row: i });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(EmbeddingSet {
        data,
        n: set.n,
        dim: set.dim,
        meta: set.meta.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    data: Vec<f64>,
    pub nq: usize,
    pub ng: usize,
}

impl DistanceMatrix {
    pub fn from_rows(data: Vec<f64>, nq: usize, ng: usize) -> Result<Self, EvalError> {
        if data.len() != nq * ng {
            return Err(EvalError::BadShape {
                len: data.len(),
                n: nq,
                dim: ng,
            });
        }
        Ok(DistanceMatrix { data, nq, ng })
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.data[q * self.ng + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.data[q * self.ng..(q + 1) * self.ng]
    }
}

/// Euclidean distance of every query row to every gallery row.
pub fn distance_matrix(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
) -> Result<DistanceMatrix, EvalError> {
    if query.dim != gallery.dim {
        return Err(EvalError::DimMismatch {
            query: query.dim,
            gallery: gallery.dim,
        });
    }
    let mut data = Vec::with_capacity(query.n * gallery.n);
    for q in 0..query.n {
        let qr = query.row(q);
        for g in 0..gallery.n {
            let gr = gallery.row(g);
            let d2: f64 = qr.iter().zip(gr).map(|(a, b)| (a - b) * (a - b)).sum();
            data.push(d2.sqrt());
        }
    }
    DistanceMatrix::from_rows(data, query.n, gallery.n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    /// cmc[k] = fraction of scored queries with a positive in the top k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Aligned with queries; None marks a skipped query.
    pub per_query_ap: Vec<Option<f64>>,
    pub evaluated: usize,
    pub skipped: usize,
}

impl RankingReport {
    /// CMC at rank k (1-based), clamped to the curve length.
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in [1usize, 5, 10, 20] {
            out.push_str(&format!("Rank-{k:<3} {:.4}\n", self.rank(k)));
        }
        out.push_str(&format!("mAP     {:.4}\n", self.map));
        out.push_str(&format!(
            "queries scored {} skipped {}\n",
            self.evaluated, self.skipped
        ));
        out
    }

    /// Structured key-value rows for machine consumption.
    pub fn render_rows(&self) -> String {
        let mut out = String::new();
        for k in [1usize, 5, 10, 20] {
            out.push_str(&format!("rank{k}={:.6}\n", self.rank(k)));
        }
        out.push_str(&format!("map={:.6}\n", self.map));
        out.push_str(&format!("evaluated={}\n", self.evaluated));
        out.push_str(&format!("skipped={}\n", self.skipped));
        out
    }
}

/// Average precision by direct summation over a binary ranked list,
/// independent of the main evaluator's code path.
pub fn ap_oracle(relevance: &[bool]) -> Result<f64, EvalError> {
    let positives = relevance.iter().filter(|&&r| r).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// CMC curve and mAP under the same-camera exclusion protocol.
///
/// Per query: gallery rows with the query's pid AND camid are excluded, as
/// are junk rows (negative pid); the rest rank ascending by distance with
/// ties broken by gallery index. Queries with no cross-camera positive
/// (or a negative pid) are skipped and counted, not scored.
pub fn cmc_map(
    dist: &DistanceMatrix,
    q_meta: &[RowMeta],
    g_meta: &[RowMeta],
) -> Result<RankingReport, EvalError> {
    if q_meta.len() != dist.nq {
        return Err(EvalError::MetaMisaligned {
            what: "query",
            rows: dist.nq,
            meta: q_meta.len(),
        });
    }
    if g_meta.len() != dist.ng {
        return Err(EvalError::MetaMisaligned {
            what: "gallery",
            rows: dist.ng,
            meta: g_meta.len(),
        });
    }
    let mut first_hits = vec![0usize; dist.ng];
    let mut per_query_ap = Vec::with_capacity(dist.nq);
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;

    for q in 0..dist.nq {
        let qm = q_meta[q];
        if qm.pid < 0 {
            skipped += 1;
            per_query_ap.push(None);
            continue;
        }
        let row = dist.row(q);
        let mut order: Vec<usize> = (0..dist.ng)
            .filter(|&g| {
                let gm = g_meta[g];
                gm.pid >= 0 && !(gm.pid == qm.pid && gm.camid == qm.camid)
            })
            .collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));

        let positives = order.iter().filter(|&&g| g_meta[g].pid == qm.pid).count();
        if positives == 0 {
            skipped += 1;
            per_query_ap.push(None);
            continue;
        }
        evaluated += 1;
        let mut hits = 0usize;
        let mut ap = 0.0;
        let mut first: Option<usize> = None;
        for (rank0, &g) in order.iter().enumerate() {
            if g_meta[g].pid == qm.pid {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
                if first.is_none() {
                    first = Some(rank0);
                }
            }
        }
        ap /= positives as f64;
        ap_sum += ap;
        per_query_ap.push(Some(ap));
        first_hits[first.expect("positives > 0 implies a first hit")] += 1;
    }

    let mut cmc = vec![0.0; dist.ng];
    if evaluated > 0 {
        let mut cum = 0usize;
        for (k, slot) in cmc.iter_mut().enumerate() {
            cum += first_hits[k];
            *slot = cum as f64 / evaluated as f64;
        }
    }
    let map = if evaluated > 0 {
        ap_sum / evaluated as f64
    } else {
        0.0
    };
    Ok(RankingReport {
        cmc,
        map,
        per_query_ap,
        evaluated,
        skipped,
    })
}

const MAGIC: [u8; 4] = *b"VNEB";
const VERSION: u32 = 1;

/// Writes an embedding matrix: magic `VNEB`, version, count, dim as
/// little-endian u32, then count*dim little-endian f32 row-major.
pub fn write_embeddings(
    path: impl AsRef<Path>,
    data: &[f64],
    n: usize,
    dim: usize,
) -> Result<(), EvalError> {
    if data.len() != n * dim {
        return Err(EvalError::BadShape {
            len: data.len(),
            n,
            dim,
        });
    }
    let mut buf = Vec::with_capacity(16 + data.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads an embedding matrix written by `write_embeddings`; values widen
/// back to f64 exactly.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize), EvalError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(EvalError::Truncated {
            expected: 16,
            got: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice length checked");
    if magic != MAGIC {
        return Err(EvalError::BadMagic { found: magic });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("word"));
    let version = word(4);
    if version != VERSION {
        return Err(EvalError::BadVersion { found: version });
    }
    let n = word(8) as usize;
    let dim = word(12) as usize;
    let expected = n * dim * 4;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(EvalError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
        .collect();
    Ok((data, n, dim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta(rows: &[(i64, i64)]) -> Vec<RowMeta> {
        rows.iter()
            .map(|&(pid, camid)| RowMeta { pid, camid })
            .collect()
    }

    fn plain_set(rows: Vec<Vec<f64>>) -> EmbeddingSet {
        let n = rows.len();
        let dim = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        let meta = vec![RowMeta { pid: 0, camid: 0 }; n];
        EmbeddingSet::new(data, dim, meta).unwrap()
    }

    #[test]
    fn normalize_three_four() {
        let set = plain_set(vec![vec![3.0, 4.0]]);
        let out = l2_normalize(&set).unwrap();
        assert_eq!(out.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn normalize_idempotent_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let once = l2_normalize(&plain_set(rows)).unwrap();
        for i in 0..once.len() {
            let norm: f64 = once.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
        }
        let twice = l2_normalize(&once).unwrap();
        for i in 0..once.len() {
            for (a, b) in once.row(i).iter().zip(twice.row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalize_zero_row_names_row() {
        let set = plain_set(vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        match l2_normalize(&set) {
            Err(EvalError::ZeroNormRow { row: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn distance_basics() {
        let q = plain_set(vec![vec![1.0, 0.0]]);
        let g = plain_set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let d = distance_matrix(&q, &g).unwrap();
        assert_eq!(d.get(0, 0), 0.0);
        assert!((d.get(0, 1) - 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let q = plain_set(
            (0..5)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let g = plain_set(
            (0..7)
                .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
        );
        let d = distance_matrix(&q, &g).unwrap();
        for i in 0..5 {
            for j in 0..7 {
                let mut acc = 0.0;
                for k in 0..6 {
                    let diff = q.row(i)[k] - g.row(j)[k];
                    acc += diff * diff;
                }
                assert!((d.get(i, j) - acc.sqrt()).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn distance_dim_mismatch() {
        let q = plain_set(vec![vec![1.0, 0.0]]);
        let g = plain_set(vec![vec![1.0, 0.0, 0.0]]);
        assert!(matches!(
            distance_matrix(&q, &g),
            Err(EvalError::DimMismatch {
                query: 2,
                gallery: 3
            })
        ));
    }

    #[test]
    fn ap_oracle_basics() {
        assert_eq!(ap_oracle(&[true]).unwrap(), 1.0);
        assert_eq!(ap_oracle(&[false, true]).unwrap(), 0.5);
        assert!(matches!(
            ap_oracle(&[false, false]),
            Err(EvalError::NoPositives)
        ));
        let ap = ap_oracle(&[true, false, true]).unwrap();
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn single_query_interleaved_ap() {
        // Ranked relevance (1, 0, 1) -> AP = (1/1 + 2/3)/2.
        let dist = DistanceMatrix::from_rows(vec![0.1, 0.2, 0.3], 1, 3).unwrap();
        let qm = meta(&[(1, 0)]);
        let gm = meta(&[(1, 1), (2, 1), (1, 2)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert!((report.per_query_ap[0].unwrap() - 0.833333).abs() < 1e-6);
        assert_eq!(report.rank(1), 1.0);
        assert_eq!(report.evaluated, 1);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn all_positives_first_is_perfect() {
        let dist = DistanceMatrix::from_rows(vec![0.1, 0.2, 0.9, 0.95], 1, 4).unwrap();
        let qm = meta(&[(7, 0)]);
        let gm = meta(&[(7, 1), (7, 2), (1, 1), (2, 1)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert_eq!(report.per_query_ap[0], Some(1.0));
        assert_eq!(report.rank(1), 1.0);
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn same_camera_exclusion_changes_result() {
        // Nearest gallery row shares the query's camera; with exclusion the
        // true positive ranks second behind a negative.
        let dist = DistanceMatrix::from_rows(vec![0.05, 0.1, 0.2], 1, 3).unwrap();
        let qm = meta(&[(1, 0)]);
        let gm = meta(&[(1, 0), (2, 1), (1, 1)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert_eq!(report.per_query_ap[0], Some(0.5));
        assert_eq!(report.rank(1), 0.0);
        assert_eq!(report.rank(2), 1.0);
        // Without the exclusion the same-camera row would rank first and
        // this query would look far better.
        let inclusive = cmc_map(&dist, &qm, &meta(&[(1, 2), (2, 1), (1, 1)])).unwrap();
        assert_eq!(inclusive.rank(1), 1.0);
        assert!(inclusive.per_query_ap[0].unwrap() > report.per_query_ap[0].unwrap());
    }

    #[test]
    fn query_without_cross_camera_positive_skipped() {
        let dist = DistanceMatrix::from_rows(vec![0.1, 0.5], 1, 2).unwrap();
        let qm = meta(&[(1, 0)]);
        let gm = meta(&[(1, 0), (2, 1)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert_eq!(report.evaluated, 0);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.per_query_ap[0], None);
        assert_eq!(report.map, 0.0);
    }

    #[test]
    fn junk_rows_always_excluded() {
        // A junk gallery row at distance zero must not displace positives,
        // and a junk query is skipped outright.
        let dist = DistanceMatrix::from_rows(vec![0.0, 0.3, 0.6], 1, 3).unwrap();
        let qm = meta(&[(1, 0)]);
        let gm = meta(&[(-1, 1), (1, 1), (2, 1)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert_eq!(report.per_query_ap[0], Some(1.0));
        assert_eq!(report.rank(1), 1.0);

        let junk_q = cmc_map(&dist, &meta(&[(-1, 0)]), &gm).unwrap();
        assert_eq!(junk_q.skipped, 1);
        assert_eq!(junk_q.evaluated, 0);
    }

    #[test]
    fn tie_break_prefers_lower_gallery_index() {
        // Equal distances; index 0 is negative, index 1 positive.
        let dist = DistanceMatrix::from_rows(vec![0.5, 0.5], 1, 2).unwrap();
        let qm = meta(&[(1, 0)]);
        let gm = meta(&[(2, 1), (1, 1)]);
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        assert_eq!(report.rank(1), 0.0);
        assert_eq!(report.per_query_ap[0], Some(0.5));
    }

    #[test]
    fn per_query_ap_equals_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..100 {
            let ng = 20;
            let rel: Vec<bool> = (0..ng).map(|_| rng.gen_bool(0.35)).collect();
            if !rel.iter().any(|&r| r) {
                continue;
            }
            // Distances strictly increasing: ranking equals gallery order.
            let dist_row: Vec<f64> = (0..ng)
                .map(|g| g as f64 + rng.gen_range(0.0..0.5))
                .collect();
            let dist = DistanceMatrix::from_rows(dist_row, 1, ng).unwrap();
            let qm = meta(&[(1, 0)]);
            let gm: Vec<RowMeta> = rel
                .iter()
                .map(|&r| RowMeta {
                    pid: if r { 1 } else { 2 },
                    camid: 1,
                })
                .collect();
            let report = cmc_map(&dist, &qm, &gm).unwrap();
            let want = ap_oracle(&rel).unwrap();
            assert_eq!(report.per_query_ap[0], Some(want));
        }
    }

    /// Fully independent evaluator using a different stable sort pipeline.
    fn brute_force(dist: &DistanceMatrix, q_meta: &[RowMeta], g_meta: &[RowMeta]) -> RankingReport {
        let mut per_query_ap = Vec::new();
        let mut aps = Vec::new();
        let mut firsts = Vec::new();
        let mut skipped = 0;
        for q in 0..dist.nq {
            let qm = q_meta[q];
            if qm.pid < 0 {
                skipped += 1;
                per_query_ap.push(None);
                continue;
            }
            let mut entries: Vec<(f64, usize)> = (0..dist.ng)
                .filter(|&g| g_meta[g].pid >= 0)
                .filter(|&g| g_meta[g].pid != qm.pid || g_meta[g].camid != qm.camid)
                .map(|g| (dist.get(q, g), g))
                .collect();
            // Stable sort on distance only; input is index-ascending, so
            // ties keep index order.
            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            let rel: Vec<bool> = entries
                .iter()
                .map(|&(_, g)| g_meta[g].pid == qm.pid)
                .collect();
            match ap_oracle(&rel) {
                Ok(ap) => {
                    per_query_ap.push(Some(ap));
                    aps.push(ap);
                    firsts.push(rel.iter().position(|&r| r).expect("has positives"));
                }
                Err(_) => {
                    skipped += 1;
                    per_query_ap.push(None);
                }
            }
        }
        let evaluated = aps.len();
        let mut cmc = vec![0.0; dist.ng];
        if evaluated > 0 {
            for k in 0..dist.ng {
                cmc[k] = firsts.iter().filter(|&&f| f <= k).count() as f64 / evaluated as f64;
            }
        }
        RankingReport {
            cmc,
            map: if evaluated > 0 {
                aps.iter().sum::<f64>() / evaluated as f64
            } else {
                0.0
            },
            per_query_ap,
            evaluated,
            skipped,
        }
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        for _ in 0..100 {
            let nq = rng.gen_range(1..6);
            let ng = rng.gen_range(2..15);
            let data: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0.0..2.0)).collect();
            let dist = DistanceMatrix::from_rows(data, nq, ng).unwrap();
            let qm: Vec<RowMeta> = (0..nq)
                .map(|_| RowMeta {
                    pid: rng.gen_range(0..4),
                    camid: rng.gen_range(0..3),
                })
                .collect();
            let gm: Vec<RowMeta> = (0..ng)
                .map(|_| RowMeta {
                    pid: if rng.gen_bool(0.1) {
                        -1
                    } else {
                        rng.gen_range(0..4)
                    },
                    camid: rng.gen_range(0..3),
                })
                .collect();
            let a = cmc_map(&dist, &qm, &gm).unwrap();
            let b = brute_force(&dist, &qm, &gm);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn cmc_monotone_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let nq = 8;
        let ng = 30;
        let data: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0.0..2.0)).collect();
        let dist = DistanceMatrix::from_rows(data, nq, ng).unwrap();
        let qm: Vec<RowMeta> = (0..nq)
            .map(|i| RowMeta {
                pid: (i % 4) as i64,
                camid: 0,
            })
            .collect();
        let gm: Vec<RowMeta> = (0..ng)
            .map(|i| RowMeta {
                pid: (i % 5) as i64,
                camid: 1,
            })
            .collect();
        let report = cmc_map(&dist, &qm, &gm).unwrap();
        let mut prev = 0.0;
        for &v in &report.cmc {
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev);
            prev = v;
        }
        assert!((0.0..=1.0).contains(&report.map));
    }

    #[test]
    fn rank_order_preserving_shift_leaves_report_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let nq = 5;
        let ng = 12;
        let data: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0.0..2.0)).collect();
        let qm: Vec<RowMeta> = (0..nq)
            .map(|i| RowMeta {
                pid: (i % 3) as i64,
                camid: 0,
            })
            .collect();
        let gm: Vec<RowMeta> = (0..ng)
            .map(|i| RowMeta {
                pid: (i % 3) as i64,
                camid: 1 + (i % 2) as i64,
            })
            .collect();
        let base = DistanceMatrix::from_rows(data.clone(), nq, ng).unwrap();
        let shifted_data: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + (i / ng) as f64 * 10.0)
            .collect();
        let shifted = DistanceMatrix::from_rows(shifted_data, nq, ng).unwrap();
        let a = cmc_map(&base, &qm, &gm).unwrap();
        let b = cmc_map(&shifted, &qm, &gm).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.vneb");
        // Values exactly representable in f32 survive the round trip bit-exact.
        let data: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        write_embeddings(&path, &data, 2, 3).unwrap();
        let (back, n, dim) = read_embeddings(&path).unwrap();
        assert_eq!((n, dim), (2, 3));
        assert_eq!(back, data);
    }

    #[test]
    fn embedding_file_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vneb");
        write_embeddings(&path, &[1.0, 2.0], 1, 2).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EvalError::BadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EvalError::BadVersion { found: 9 })
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            read_embeddings(&path),
            Err(EvalError::Truncated { .. })
        ));
    }
}
