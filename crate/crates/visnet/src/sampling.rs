//! Dataset manifest ingestion and identity-balanced batch construction:
//! P identities per batch, K images per identity, so every batch carries
//! both positive and negative pairs.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("manifest io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest header must be `path,pid,camid,split`, found `{found}`")]
    Header { found: String },
    #[error("manifest line {line}: {message}")]
    Field { line: usize, message: String },
    #[error("manifest line {line}: duplicate path `{path}`")]
    DuplicatePath { line: usize, path: String },
    #[error("manifest line {line}: cannot extract pid/camid from filename `{name}`")]
    Filename { line: usize, name: String },
    #[error("need at least {need} identities in the train split, found {have}")]
    NotEnoughIdentities { have: usize, need: usize },
    #[error("batch shape: {0}")]
    BatchShape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn parse(s: &str, line: usize) -> Result<Split, SamplingError> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(SamplingError::Field {
                line,
                message: format!("unknown split `{other}` (expected train/query/gallery)"),
            }),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub pid: i64,
    pub camid: i64,
    pub split: Split,
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
}

/// Extracts (pid, camid) from a Market-style basename such as
/// `0002_c1s1_000451_03.jpg`.
fn ids_from_filename(path: &str) -> Option<(i64, i64)> {
    let base = path.rsplit('/').next()?;
    let (pid_part, rest) = base.split_once('_')?;
    if pid_part.is_empty() || !pid_part.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let pid: i64 = pid_part.parse().ok()?;
    let rest = rest.strip_prefix('c')?;
    let cam_digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
    if cam_digits.is_empty() {
        return None;
    }
    let camid: i64 = cam_digits.parse().ok()?;
    Some((pid, camid))
}

impl DatasetManifest {
    pub const HEADER: &'static str = "path,pid,camid,split";

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SamplingError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, SamplingError> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| SamplingError::Header {
            found: String::new(),
        })?;
        if header.trim_end_matches('\r') != Self::HEADER {
            return Err(SamplingError::Header {
                found: header.to_string(),
            });
        }
        let mut records = Vec::new();
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (idx, raw) in lines {
            let line = idx + 1; // 1-based, header is line 1
            let row = raw.trim_end_matches('\r');
            if row.is_empty() {
                continue;
            }
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != 4 {
                return Err(SamplingError::Field {
                    line,
                    message: format!("expected 4 comma-separated fields, found {}", fields.len()),
                });
            }
            let path = fields[0].trim();
            if path.is_empty() {
                return Err(SamplingError::Field {
                    line,
                    message: "empty path".into(),
                });
            }
            if let Some(&first) = seen.get(path) {
                let _ = first;
                return Err(SamplingError::DuplicatePath {
                    line,
                    path: path.to_string(),
                });
            }
            let pid_field = fields[1].trim();
            let cam_field = fields[2].trim();
            let (pid, camid) = if pid_field.is_empty() && cam_field.is_empty() {
                ids_from_filename(path).ok_or_else(|| SamplingError::Filename {
                    line,
                    name: path.to_string(),
                })?
            } else {
                let parse = |field: &str, what: &str| {
                    field.parse::<i64>().map_err(|_| SamplingError::Field {
                        line,
                        message: format!("{what} `{field}` is not an integer"),
                    })
                };
                (parse(pid_field, "pid")?, parse(cam_field, "camid")?)
            };
            if pid < 0 || camid < 0 {
                return Err(SamplingError::Field {
                    line,
                    message: format!("ids must be nonnegative, got pid {pid} camid {camid}"),
                });
            }
            let split = Split::parse(fields[3].trim(), line)?;
            seen.insert(path, line);
            records.push(ManifestRecord {
                path: path.to_string(),
                pid,
                camid,
                split,
            });
        }
        Ok(DatasetManifest { records })
    }

    /// Builds a manifest from in-memory records under the same invariants
    /// as the file parser; the reported line numbers assume a header line.
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self, SamplingError> {
        let mut seen = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            let line = i + 2;
            if r.path.is_empty() {
                return Err(SamplingError::Field {
                    line,
                    message: "empty path".into(),
                });
            }
            if r.pid < 0 || r.camid < 0 {
                return Err(SamplingError::Field {
                    line,
                    message: format!(
                        "ids must be nonnegative, got pid {} camid {}",
                        r.pid, r.camid
                    ),
                });
            }
            if seen.insert(r.path.clone(), line).is_some() {
                return Err(SamplingError::DuplicatePath {
                    line,
                    path: r.path.clone(),
                });
            }
        }
        Ok(DatasetManifest { records })
    }

    /// Renders the manifest in the same CSV dialect `parse_str` accepts.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.path, r.pid, r.camid, r.split));
        }
        out
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Record indices of one split, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    /// Identity -> record indices for one split; sorted by identity for
    /// deterministic iteration.
    pub fn identities(&self, split: Split) -> BTreeMap<i64, Vec<usize>> {
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            if r.split == split {
                map.entry(r.pid).or_default().push(i);
            }
        }
        map
    }
}

/// One training batch: P identity groups of K record indices each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub indices: Vec<usize>,
    pub p: usize,
    pub k: usize,
}

impl BatchSpec {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Identity of every slot, aligned with `indices`.
    pub fn pids(&self, manifest: &DatasetManifest) -> Vec<i64> {
        self.indices
            .iter()
            .map(|&i| manifest.records()[i].pid)
            .collect()
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<(), SamplingError> {
        if self.indices.len() != self.p * self.k {
            return Err(SamplingError::BatchShape(format!(
                "{} slots, expected {}x{}",
                self.indices.len(),
                self.p,
                self.k
            )));
        }
        let pids = self.pids(manifest);
        let mut distinct: Vec<i64> = pids.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != self.p {
            return Err(SamplingError::BatchShape(format!(
                "{} distinct identities, expected {}",
                distinct.len(),
                self.p
            )));
        }
        for id in distinct {
            let n = pids.iter().filter(|&&pd| pd == id).count();
            if n != self.k {
                return Err(SamplingError::BatchShape(format!(
                    "identity {id} fills {n} slots, expected {}",
                    self.k
                )));
            }
        }
        Ok(())
    }
}

/// Seeded identity-balanced batch stream over the train split.
#[derive(Debug, Clone)]
pub struct PkSampler {
    groups: BTreeMap<i64, Vec<usize>>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    pub fn new(
        manifest: &DatasetManifest,
        p: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self, SamplingError> {
        if p < 2 || k < 2 {
            return Err(SamplingError::BatchShape(format!(
                "P and K must both be at least 2 (got P={p} K={k}) so batches hold positive and negative pairs"
            )));
        }
        let groups = manifest.identities(Split::Train);
        if groups.len() < p {
            return Err(SamplingError::NotEnoughIdentities {
                have: groups.len(),
                need: p,
            });
        }
        Ok(PkSampler {
            groups,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.groups.len().div_ceil(self.p)
    }

    /// K record indices for one identity. With at least K images this is a
    /// without-replacement draw; with fewer, a shuffled cyclic fill keeps
    /// any single image at no more than ceil(K/n) repeats.
    fn fill_identity(&mut self, id: i64) -> Vec<usize> {
        let mut images = self.groups[&id].clone();
        images.shuffle(&mut self.rng);
        if images.len() >= self.k {
            images.truncate(self.k);
            images
        } else {
            (0..self.k).map(|s| images[s % images.len()]).collect()
        }
    }

    /// One pass over the identities: ceil(ids/P) batches, each with P
    /// distinct identities; the trailing batch borrows already-used
    /// identities to stay full.
    pub fn epoch(&mut self) -> Vec<BatchSpec> {
        let mut ids: Vec<i64> = self.groups.keys().copied().collect();
        ids.shuffle(&mut self.rng);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        let mut start = 0;
        while start < ids.len() {
            let mut chunk: Vec<i64> = ids[start..(start + self.p).min(ids.len())].to_vec();
            if chunk.len() < self.p {
                let need = self.p - chunk.len();
                let used: Vec<i64> = ids[..start]
                    .iter()
                    .copied()
                    .filter(|id| !chunk.contains(id))
                    .collect();
                let extra: Vec<i64> = used.choose_multiple(&mut self.rng, need).copied().collect();
                chunk.extend(extra);
            }
            let mut indices = Vec::with_capacity(self.p * self.k);
            for &id in &chunk {
                indices.extend(self.fill_identity(id));
            }
            batches.push(BatchSpec {
                indices,
                p: self.p,
                k: self.k,
            });
            start += self.p;
        }
        batches
    }
}

/// Convenience wrapper: a fixed number of epochs as one flat batch stream.
pub fn pk_batches(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    seed: u64,
    epochs: usize,
) -> Result<Vec<BatchSpec>, SamplingError> {
    let mut sampler = PkSampler::new(manifest, p, k, seed)?;
    let mut out = Vec::new();
    for _ in 0..epochs {
        out.extend(sampler.epoch());
    }
    Ok(out)
}
