//! Tracklet generation from a pool of RoI records.
//!
//! RoIs are drawn i.i.d. with replacement under a tail-favoring multinomial:
//! a record of class `c` gets raw weight `n_c^-p` where `n_c` is the number
//! of training annotations of that class, so rare classes are resampled far
//! more often than their share of the pool. Drawn RoIs are assembled into
//! tracklets of random length; tracklets may mix identities and classes, and
//! carry a soft label equal to the per-class fraction of their items.

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const STRK_MAGIC: &[u8; 4] = b"STRK";
pub const STRK_VERSION: u32 = 1;

/// One region proposal: pooled feature, box, and the category/identity of
/// the ground-truth box it was matched to upstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiRecord {
    pub feature: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub category: usize,
    pub identity: u64,
    pub frame: u64,
    #[serde(default)]
    pub source: String,
}

impl RoiRecord {
    fn validate(&self, num_classes: usize, feature_dim: usize) -> Result<()> {
        if self.feature.len() != feature_dim {
            return Err(Error::Data(format!(
                "record feature dim {} != pool dim {feature_dim}",
                self.feature.len()
            )));
        }
        if self.category >= num_classes {
            return Err(Error::Data(format!(
                "category {} out of range 0..{num_classes}",
                self.category
            )));
        }
        if !(self.bbox[0] < self.bbox[2] && self.bbox[1] < self.bbox[3]) {
            return Err(Error::Data(format!("degenerate box {:?}", self.bbox)));
        }
        Ok(())
    }
}

/// Pool of RoI records plus per-class annotation counts `n_c`. The counts
/// describe the ground-truth annotations the records derive from, not the
/// number of records themselves.
#[derive(Clone, Debug)]
pub struct RoiPool {
    records: Vec<RoiRecord>,
    class_counts: Vec<u64>,
    feature_dim: usize,
}

impl RoiPool {
    pub fn new(records: Vec<RoiRecord>, class_counts: Vec<u64>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("empty RoI pool".into()));
        }
        let feature_dim = records[0].feature.len();
        let num_classes = class_counts.len();
        for rec in &records {
            rec.validate(num_classes, feature_dim)?;
            if class_counts[rec.category] == 0 {
                return Err(Error::Data(format!(
                    "class {} present in pool but has zero annotation count",
                    rec.category
                )));
            }
        }
        Ok(RoiPool { records, class_counts, feature_dim })
    }

    pub fn records(&self) -> &[RoiRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn class_counts(&self) -> &[u64] {
        &self.class_counts
    }

    /// Merges two pools; class counts are summed position-wise.
    pub fn merge(&self, other: &RoiPool) -> Result<RoiPool> {
        if self.feature_dim != other.feature_dim {
            return Err(Error::Data("cannot merge pools of different feature dims".into()));
        }
        let classes = self.num_classes().max(other.num_classes());
        let mut counts = vec![0u64; classes];
        for (i, &c) in self.class_counts.iter().enumerate() {
            counts[i] += c;
        }
        for (i, &c) in other.class_counts.iter().enumerate() {
            counts[i] += c;
        }
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        RoiPool::new(records, counts)
    }

    // ---- JSON-lines format ----

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path, class_counts: Vec<u64>) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        RoiPool::new(records, class_counts)
    }

    // ---- STRK bulk binary format ----

    pub fn write_strk(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(STRK_MAGIC)?;
        w.write_all(&STRK_VERSION.to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for rec in &self.records {
            for &b in &rec.bbox {
                w.write_all(&b.to_le_bytes())?;
            }
            w.write_all(&(rec.category as u32).to_le_bytes())?;
            w.write_all(&rec.identity.to_le_bytes())?;
            w.write_all(&rec.frame.to_le_bytes())?;
            for &f in &rec.feature {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_strk(path: &Path, class_counts: Vec<u64>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("unexpected end of STRK file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 4)? != STRK_MAGIC {
            return Err(Error::Format("bad STRK magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != STRK_VERSION {
            return Err(Error::Format(format!("unsupported STRK version {version}")));
        }
        let dim = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let mut bbox = [0.0f64; 4];
            for b in &mut bbox {
                *b = f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            }
            let category = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let identity = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let frame = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let mut feature = Vec::with_capacity(dim);
            for _ in 0..dim {
                feature.push(f64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()));
            }
            records.push(RoiRecord { feature, bbox, category, identity, frame, source: String::new() });
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes in STRK file".into()));
        }
        RoiPool::new(records, class_counts)
    }

    /// Reads a pool from either format, sniffed by magic bytes, with class
    /// counts from the JSON sidecar.
    pub fn read_with_sidecar(pool_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let counts = read_class_counts(sidecar_path)?;
        let mut head = [0u8; 4];
        let n = std::fs::File::open(pool_path)?.read(&mut head)?;
        if n == 4 && &head == STRK_MAGIC {
            Self::read_strk(pool_path, counts)
        } else {
            Self::read_jsonl(pool_path, counts)
        }
    }
}

/// Sidecar format: a JSON object mapping class index to annotation count.
pub fn read_class_counts(path: &Path) -> Result<Vec<u64>> {
    let text = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, u64> = serde_json::from_str(&text)?;
    let mut max_class = 0usize;
    let mut parsed = Vec::with_capacity(map.len());
    for (k, v) in map {
        let class: usize =
            k.parse().map_err(|_| Error::Format(format!("bad class key {k:?} in sidecar")))?;
        max_class = max_class.max(class);
        parsed.push((class, v));
    }
    let mut counts = vec![0u64; max_class + 1];
    for (class, v) in parsed {
        counts[class] = v;
    }
    Ok(counts)
}

pub fn write_class_counts(path: &Path, counts: &[u64]) -> Result<()> {
    let map: BTreeMap<String, u64> =
        counts.iter().enumerate().map(|(i, &c)| (i.to_string(), c)).collect();
    std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
    Ok(())
}

/// Per-record sampling probabilities `n_c^-p / sum_j n_cj^-p`. `p = 0` is
/// uniform over records; larger `p` shifts mass toward tail classes.
pub fn sampling_probs(pool: &RoiPool, exponent: f64) -> Result<Vec<f64>> {
    if exponent < 0.0 {
        return Err(Error::Invalid("sampling exponent must be >= 0".into()));
    }
    let mut raw = Vec::with_capacity(pool.len());
    for rec in pool.records() {
        let n = pool.class_counts()[rec.category];
        if n == 0 {
            return Err(Error::Data(format!("missing class count for class {}", rec.category)));
        }
        raw.push((n as f64).powf(-exponent));
    }
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / total).collect())
}

/// Analytic per-class marginal implied by [`sampling_probs`].
pub fn class_marginal(pool: &RoiPool, exponent: f64) -> Result<Vec<f64>> {
    let probs = sampling_probs(pool, exponent)?;
    let mut marginal = vec![0.0; pool.num_classes()];
    for (rec, p) in pool.records().iter().zip(&probs) {
        marginal[rec.category] += p;
    }
    Ok(marginal)
}

/// Soft label: per-class fraction of items, computed as integer counts with
/// a single division so the entries sum to 1 exactly.
pub fn soft_label(items: &[&RoiRecord], num_classes: usize) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(Error::Invalid("soft label of empty item list".into()));
    }
    let mut counts = vec![0u64; num_classes];
    for item in items {
        if item.category >= num_classes {
            return Err(Error::Data(format!("category {} out of range", item.category)));
        }
        counts[item.category] += 1;
    }
    let l = items.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / l).collect())
}

/// An augmented tracklet: ordered items plus the soft label built from
/// category proportions. `indices` are positions in the source pool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tracklet {
    pub indices: Vec<usize>,
    pub soft_label: Vec<f64>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn items<'a>(&self, pool: &'a RoiPool) -> Vec<&'a RoiRecord> {
        self.indices.iter().map(|&i| &pool.records()[i]).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub exponent: f64,
    pub length_min: usize,
    pub length_max_exclusive: usize,
    pub tracklets_per_batch: usize,
    pub allow_multi_identity: bool,
    pub allow_multi_class: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            exponent: 0.5,
            length_min: 16,
            length_max_exclusive: 32,
            tracklets_per_batch: 256,
            allow_multi_identity: true,
            allow_multi_class: true,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exponent < 0.0 {
            return Err(Error::Config("sampler exponent must be >= 0".into()));
        }
        if self.length_min < 1 || self.length_min >= self.length_max_exclusive {
            return Err(Error::Config(format!(
                "length range [{}, {}) is invalid",
                self.length_min, self.length_max_exclusive
            )));
        }
        if self.tracklets_per_batch < 1 {
            return Err(Error::Config("tracklets_per_batch must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cumulative-weight table for O(log n) draws from a fixed subset.
struct WeightedSubset {
    indices: Vec<usize>,
    cumulative: Vec<f64>,
}

impl WeightedSubset {
    fn new(indices: Vec<usize>, probs: &[f64]) -> Self {
        let mut cumulative = Vec::with_capacity(indices.len());
        let mut acc = 0.0;
        for &i in &indices {
            acc += probs[i];
            cumulative.push(acc);
        }
        WeightedSubset { indices, cumulative }
    }

    fn draw(&self, rng: &mut ChaCha20Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty subset");
        let dart = rng.random::<f64>() * total;
        let pos = self.cumulative.partition_point(|&c| c <= dart);
        self.indices[pos.min(self.indices.len() - 1)]
    }
}

/// Draws augmented tracklets from one pool under one sampler config.
pub struct TrackletGenerator<'a> {
    pool: &'a RoiPool,
    config: SamplerConfig,
    full: WeightedSubset,
    by_identity: BTreeMap<u64, WeightedSubset>,
    by_class: BTreeMap<usize, WeightedSubset>,
}

impl<'a> TrackletGenerator<'a> {
    pub fn new(pool: &'a RoiPool, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let probs = sampling_probs(pool, config.exponent)?;
        let full = WeightedSubset::new((0..pool.len()).collect(), &probs);

        let mut ident_groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        let mut class_groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, rec) in pool.records().iter().enumerate() {
            ident_groups.entry(rec.identity).or_default().push(i);
            class_groups.entry(rec.category).or_default().push(i);
        }
        let by_identity = ident_groups
            .into_iter()
            .map(|(k, v)| (k, WeightedSubset::new(v, &probs)))
            .collect();
        let by_class = class_groups
            .into_iter()
            .map(|(k, v)| (k, WeightedSubset::new(v, &probs)))
            .collect();

        Ok(TrackletGenerator { pool, config, full, by_identity, by_class })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    /// One tracklet: length uniform in `[length_min, length_max)`, items
    /// i.i.d. with replacement; the first draw pins the identity (or class)
    /// when mixing is disabled.
    pub fn generate_tracklet(&self, rng: &mut ChaCha20Rng) -> Result<Tracklet> {
        let len =
            rng.random_range(self.config.length_min..self.config.length_max_exclusive);
        let first = self.full.draw(rng);
        let restricted: Option<&WeightedSubset> = if !self.config.allow_multi_identity {
            let ident = self.pool.records()[first].identity;
            Some(
                self.by_identity
                    .get(&ident)
                    .ok_or_else(|| Error::Data(format!("no candidates for identity {ident}")))?,
            )
        } else if !self.config.allow_multi_class {
            let class = self.pool.records()[first].category;
            Some(
                self.by_class
                    .get(&class)
                    .ok_or_else(|| Error::Data(format!("no candidates for class {class}")))?,
            )
        } else {
            None
        };

        let mut indices = Vec::with_capacity(len);
        indices.push(first);
        for _ in 1..len {
            indices.push(match restricted {
                Some(sub) => sub.draw(rng),
                None => self.full.draw(rng),
            });
        }
        let items: Vec<&RoiRecord> = indices.iter().map(|&i| &self.pool.records()[i]).collect();
        let soft = soft_label(&items, self.pool.num_classes())?;
        Ok(Tracklet { indices, soft_label: soft })
    }

    pub fn generate_batch(&self, rng: &mut ChaCha20Rng) -> Result<Vec<Tracklet>> {
        (0..self.config.tracklets_per_batch).map(|_| self.generate_tracklet(rng)).collect()
    }
}
