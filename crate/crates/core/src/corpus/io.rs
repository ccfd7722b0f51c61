//! Dataset, split and region-feature files.

use crate::cae::RawRegionSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image_id: String,
    pub paragraph: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    /// Checks the lists are disjoint and together cover exactly `ids`.
    pub fn validate<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("image {id} appears in more than one split")));
            }
        }
        let all: HashSet<&str> = ids.into_iter().collect();
        if let Some(id) = seen.iter().find(|id| !all.contains(*id)) {
            return Err(Error::Data(format!("split names unknown image {id}")));
        }
        if let Some(id) = all.iter().find(|id| !seen.contains(*id)) {
            return Err(Error::Data(format!("image {id} is in no split")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let records: Vec<DatasetRecord> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(format_err(path, format!("duplicate image_id {}", r.image_id)));
        }
    }
    Ok(records)
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_split(path: &Path, split: &SplitSpec) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(split)?)?;
    Ok(())
}

/// Debug form of one feature record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub image_id: String,
    pub regions: usize,
    pub dim: usize,
    pub features: Vec<Vec<f64>>,
    pub objectness: Vec<f64>,
}

fn is_jsonl(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("jsonl" | "json"))
}

/// Writes region features; `.jsonl` paths get the JSON-lines form, anything
/// else the binary form: per record a u32 id length, the UTF-8 id, u32 `M`,
/// u32 `D0`, `M·D0` features and `M` objectness scores, all little-endian.
pub fn save_features(path: &Path, sets: &[RawRegionSet]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sets {
        let (m, d0) = (s.regions(), s.raw_dim());
        if is_jsonl(path) {
            let rec = FeatureRecord {
                image_id: s.image_id.clone(),
                regions: m,
                dim: d0,
                features: (0..m).map(|i| s.features.row(i).to_vec()).collect(),
                objectness: s.objectness.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
            continue;
        }
        let id = s.image_id.as_bytes();
        let too_big = |what: &str| Error::Data(format!("{what} of image {} does not fit in u32", s.image_id));
        w.write_all(&u32::try_from(id.len()).map_err(|_| too_big("id"))?.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&u32::try_from(m).map_err(|_| too_big("region count"))?.to_le_bytes())?;
        w.write_all(&u32::try_from(d0).map_err(|_| too_big("feature width"))?.to_le_bytes())?;
        for x in s.features.data().iter().chain(&s.objectness) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Id, `M`, `D0`, features and objectness of one binary record.
type BinaryRecord = (String, usize, usize, Vec<f64>, Vec<f64>);

/// Reads records as stored, without reordering.
pub fn read_features_raw(path: &Path) -> Result<Vec<RawRegionSet>> {
    if is_jsonl(path) {
        return read_jsonl::<FeatureRecord>(path)?
            .into_iter()
            .map(|r| {
                if r.features.len() != r.regions || r.features.iter().any(|row| row.len() != r.dim) {
                    return Err(format_err(
                        path,
                        format!("image {}: feature block is not {}x{}", r.image_id, r.regions, r.dim),
                    ));
                }
                let t = Tensor::matrix(r.regions, r.dim, r.features.concat())
                    .map_err(|e| format_err(path, e.to_string()))?;
                RawRegionSet::new(r.image_id, t, r.objectness).map_err(|e| format_err(path, e.to_string()))
            })
            .collect();
    }
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = &bytes[..];
    let mut out = Vec::new();
    while !r.is_empty() {
        let rec = (|| -> std::io::Result<BinaryRecord> {
            let len = read_u32(&mut r)? as usize;
            let mut id = vec![0u8; len];
            r.read_exact(&mut id)?;
            let id = String::from_utf8(id).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            let m = read_u32(&mut r)? as usize;
            let d0 = read_u32(&mut r)? as usize;
            let feats = read_f64s(&mut r, m * d0)?;
            let obj = read_f64s(&mut r, m)?;
            Ok((id, m, d0, feats, obj))
        })()
        .map_err(|e| format_err(path, format!("record {}: {e}", out.len() + 1)))?;
        let (id, m, d0, feats, obj) = rec;
        let t = Tensor::matrix(m, d0, feats).map_err(|e| format_err(path, format!("image {id}: {e}")))?;
        out.push(RawRegionSet::new(id, t, obj).map_err(|e| format_err(path, e.to_string()))?);
    }
    Ok(out)
}

/// Loads features keyed by image id, each canonicalized to `m` regions
/// sorted by objectness.
pub fn load_features(path: &Path, m: usize) -> Result<BTreeMap<String, RawRegionSet>> {
    let mut out = BTreeMap::new();
    for s in read_features_raw(path)? {
        let id = s.image_id.clone();
        if out.insert(id.clone(), s.canonicalize(m)?).is_some() {
            return Err(format_err(path, format!("duplicate image_id {id}")));
        }
    }
    Ok(out)
}
