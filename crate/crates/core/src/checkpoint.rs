//! Checkpoint container: an 8-byte little-endian header length `N`, `N` bytes
//! of JSON describing each tensor, then the little-endian data region.
//!
//! ```text
//! [u64 N][{"__metadata__":{..},"name":{"data_offsets":[begin,end],"dtype":"F32","shape":[..]},..}][data]
//! ```
//!
//! Offsets are relative to the start of the data region. The writer is
//! canonical: keys sorted at every level, compact JSON, header padded with
//! spaces to a multiple of 8, tensors packed in key order. The reader accepts any
//! ordering as long as the tensors tile the data region exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const METADATA_KEY: &str = "__metadata__";

/// Refuse headers larger than this; real headers are a few hundred KiB at most.
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<Option<Tensor>> {
        let name = name.into();
        validate_name(&name)?;
        Ok(self.tensors.insert(name, tensor))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Same tensors, bit for bit, and same metadata.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let len = t.numel() * t.dtype().size_in_bytes();
            let entry = HeaderEntry {
                dtype: t.dtype().as_str().to_string(),
                shape: t.shape().to_vec(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
            offset += len;
        }
        if !self.metadata.is_empty() {
            header.insert(METADATA_KEY.to_string(), serde_json::to_value(&self.metadata)?);
        }
        // serde_json's Map is a BTreeMap without `preserve_order`, so keys are sorted.
        let mut json = serde_json::to_vec(&header)?;
        while (8 + json.len()) % 8 != 0 {
            json.push(b' ');
        }

        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match t.dtype() {
                DType::F32 => {
                    for &x in t.data() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                DType::F16 => {
                    for &x in t.data() {
                        out.extend_from_slice(&f16::from_f32(x).to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Parses a container. `F16` payloads are widened to `F32` tensors.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format(format!(
                "file is {} bytes, too short for the header length",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if n > MAX_HEADER_LEN {
            return Err(Error::Format(format!("header length {n} is implausibly large")));
        }
        let header_end = 8 + n as usize;
        if header_end > bytes.len() {
            return Err(Error::Format(format!(
                "header length {n} runs past the end of the file ({} bytes)",
                bytes.len()
            )));
        }
        let header: serde_json::Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not a JSON object: {e}")))?;
        let data = &bytes[header_end..];

        let mut ckpt = Checkpoint::new();
        let mut spans = Vec::with_capacity(header.len());
        for (name, value) in header {
            if name == METADATA_KEY {
                ckpt.metadata = parse_metadata(value)?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("bad entry for `{name}`: {e}")))?;
            let dtype = DType::parse(&entry.dtype)?;
            let [begin, end] = entry.data_offsets;
            if entry.shape.contains(&0) {
                return Err(Error::Shape(format!("`{name}` has a zero dimension")));
            }
            let numel = entry
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Shape(format!("`{name}` shape overflows")))?;
            let expected = numel * dtype.size_in_bytes();
            if begin > end || end - begin != expected {
                return Err(Error::Shape(format!(
                    "`{name}`: offsets [{begin}, {end}) hold {} bytes, shape {:?} × {dtype} needs {expected}",
                    end.saturating_sub(begin),
                    entry.shape
                )));
            }
            if end > data.len() {
                return Err(Error::Shape(format!(
                    "`{name}`: offsets end at {end}, data region is {} bytes",
                    data.len()
                )));
            }
            let raw = &data[begin..end];
            let values: Vec<f32> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect(),
            };
            validate_name(&name)?;
            spans.push((begin, end, name.clone()));
            ckpt.tensors.insert(name, Tensor::new(entry.shape, values)?);
        }

        spans.sort();
        let mut cursor = 0;
        for (begin, end, name) in &spans {
            if *begin != cursor {
                return Err(Error::Shape(format!(
                    "`{name}` starts at {begin}, expected {cursor} (gap or overlap)"
                )));
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                data.len() - cursor
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::Format("__metadata__ must be an object".into()));
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            other => Err(Error::Format(format!(
                "metadata value for `{k}` must be a string, got {other}"
            ))),
        })
        .collect()
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::Format("tensor names must be non-empty".into()));
    }
    if name == METADATA_KEY {
        return Err(Error::Format(format!("`{METADATA_KEY}` is reserved")));
    }
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the canonical serialization, hex encoded.
pub fn fingerprint(ckpt: &Checkpoint) -> String {
    let bytes = ckpt
        .to_bytes()
        .expect("serializing an in-memory checkpoint cannot fail");
    hex::encode(Sha256::digest(&bytes))
}

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";

/// Low-rank factor pair for one adapted linear layer: `ΔW = s · B · A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraLayer {
    /// `rank × in`
    pub a_factor: Tensor,
    /// `out × rank`
    pub b_factor: Tensor,
}

impl LoraLayer {
    pub fn in_dim(&self) -> usize {
        self.a_factor.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.b_factor.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    layers: BTreeMap<String, LoraLayer>,
    rank: usize,
    lora_alpha: f64,
    /// Fingerprint of the checkpoint the adapter was trained against, if known.
    base_fingerprint: Option<String>,
}

impl LoraAdapter {
    pub fn new(layers: BTreeMap<String, LoraLayer>, rank: usize, lora_alpha: f64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Rank("rank must be positive".into()));
        }
        if !(lora_alpha.is_finite() && lora_alpha > 0.0) {
            return Err(Error::Rank(format!("lora_alpha must be positive, got {lora_alpha}")));
        }
        for (name, layer) in &layers {
            let (Some((ar, a_in)), Some((b_out, bc))) =
                (layer.a_factor.matrix_dims(), layer.b_factor.matrix_dims())
            else {
                return Err(Error::Rank(format!("`{name}`: factors must be matrices")));
            };
            if ar != rank || bc != rank {
                return Err(Error::Rank(format!(
                    "`{name}`: declared rank {rank}, but A is {ar}×{a_in} and B is {b_out}×{bc}"
                )));
            }
            if rank > a_in.min(b_out) {
                return Err(Error::Rank(format!(
                    "`{name}`: rank {rank} exceeds min(in={a_in}, out={b_out})"
                )));
            }
        }
        Ok(LoraAdapter {
            layers,
            rank,
            lora_alpha,
            base_fingerprint: None,
        })
    }

    pub fn with_base_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.base_fingerprint = Some(fp.into());
        self
    }

    pub fn layers(&self) -> &BTreeMap<String, LoraLayer> {
        &self.layers
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn lora_alpha(&self) -> f64 {
        self.lora_alpha
    }

    /// `lora_alpha / rank`.
    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    pub fn base_fingerprint(&self) -> Option<&str> {
        self.base_fingerprint.as_deref()
    }

    /// Trainable parameter count, `Σ rank · (in + out)`.
    pub fn num_parameters(&self) -> usize {
        self.layers
            .values()
            .map(|l| self.rank * (l.in_dim() + l.out_dim()))
            .sum()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new();
        for (name, layer) in &self.layers {
            ckpt.insert(format!("{name}{LORA_A_SUFFIX}"), layer.a_factor.clone())?;
            ckpt.insert(format!("{name}{LORA_B_SUFFIX}"), layer.b_factor.clone())?;
        }
        ckpt.set_metadata("rank", self.rank.to_string());
        ckpt.set_metadata("lora_alpha", self.lora_alpha.to_string());
        if let Some(fp) = &self.base_fingerprint {
            ckpt.set_metadata("base_fingerprint", fp.clone());
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt.metadata();
        let rank: usize = meta
            .get("rank")
            .ok_or_else(|| Error::Format("adapter metadata lacks `rank`".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("bad `rank` metadata: {e}")))?;
        let lora_alpha: f64 = meta
            .get("lora_alpha")
            .ok_or_else(|| Error::Format("adapter metadata lacks `lora_alpha`".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Format(format!("bad `lora_alpha` metadata: {e}")))?;

        let mut a_factors = BTreeMap::new();
        let mut b_factors = BTreeMap::new();
        for (name, t) in ckpt.tensors() {
            if let Some(layer) = name.strip_suffix(LORA_A_SUFFIX) {
                a_factors.insert(layer.to_string(), t.clone());
            } else if let Some(layer) = name.strip_suffix(LORA_B_SUFFIX) {
                b_factors.insert(layer.to_string(), t.clone());
            } else {
                return Err(Error::Pairing(format!(
                    "`{name}` is neither a `{LORA_A_SUFFIX}` nor a `{LORA_B_SUFFIX}` factor"
                )));
            }
        }
        if let Some(l) = a_factors.keys().find(|l| !b_factors.contains_key(*l)) {
            return Err(Error::Pairing(format!("`{l}{LORA_A_SUFFIX}` has no `{LORA_B_SUFFIX}`")));
        }
        if let Some(l) = b_factors.keys().find(|l| !a_factors.contains_key(*l)) {
            return Err(Error::Pairing(format!("`{l}{LORA_B_SUFFIX}` has no `{LORA_A_SUFFIX}`")));
        }
        let layers = a_factors
            .into_iter()
            .zip(b_factors.into_values())
            .map(|((name, a_factor), b_factor)| (name, LoraLayer { a_factor, b_factor }))
            .collect();
        let mut adapter = LoraAdapter::new(layers, rank, lora_alpha)?;
        adapter.base_fingerprint = meta.get("base_fingerprint").cloned();
        Ok(adapter)
    }
}

pub fn read_lora(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    LoraAdapter::from_checkpoint(&read_checkpoint(path)?)
}

pub fn write_lora(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(&adapter.to_checkpoint()?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorKind {
    FullDelta,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub vector_id: String,
    pub path: String,
    pub kind: VectorKind,
    pub base_fingerprint: String,
    #[serde(default)]
    pub label: String,
}

/// Registry of named task vectors, persisted as `vectors.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VectorManifest {
    pub entries: Vec<ManifestEntry>,
}

impl VectorManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: VectorManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.entries {
            if e.vector_id.is_empty() {
                return Err(Error::Manifest("empty vector_id".into()));
            }
            if !seen.insert(e.vector_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate vector_id `{}`", e.vector_id)));
            }
            if e.base_fingerprint.is_empty() {
                return Err(Error::Manifest(format!(
                    "`{}` has an empty base_fingerprint",
                    e.vector_id
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, vector_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.vector_id == vector_id)
    }

    pub fn add(&mut self, entry: ManifestEntry) -> Result<()> {
        if self.get(&entry.vector_id).is_some() {
            return Err(Error::Manifest(format!(
                "duplicate vector_id `{}`",
                entry.vector_id
            )));
        }
        self.entries.push(entry);
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a container byte by byte without going through the writer.
    fn raw_container(header: &str, data: &[u8]) -> Vec<u8> {
        let mut out = (header.len() as u64).to_le_bytes().to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(data);
        out
    }

    fn f32_bytes(v: &[f32]) -> Vec<u8> {
        v.iter().flat_map(|x| x.to_le_bytes()).collect()
    }

    fn mat(r: usize, c: usize, fill: f32) -> Tensor {
        Tensor::new(vec![r, c], vec![fill; r * c]).unwrap()
    }

    #[test]
    fn reads_hand_built_file() {
        let bytes = raw_container(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.get("w").unwrap().data(), &[1.0, 2.0]);
        assert_eq!(c.get("w").unwrap().shape(), &[2]);
    }

    #[test]
    fn reads_empty_map() {
        let c = Checkpoint::from_bytes(&raw_container("{}", &[])).unwrap();
        assert!(c.is_empty());
        let c = Checkpoint::from_bytes(&raw_container(r#"{"__metadata__":{"a":"b"}}"#, &[])).unwrap();
        assert_eq!(c.metadata().get("a").map(String::as_str), Some("b"));
    }

    #[test]
    fn f16_payloads_widen() {
        let data: Vec<u8> = [1.5f32, -2.0]
            .iter()
            .flat_map(|&x| f16::from_f32(x).to_le_bytes())
            .collect();
        let bytes = raw_container(
            r#"{"h":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#,
            &data,
        );
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        let h = c.get("h").unwrap();
        assert_eq!(h.dtype(), DType::F32);
        assert_eq!(h.data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_malformed_files() {
        let ok_data = f32_bytes(&[1.0, 2.0]);
        let past_end = raw_container(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,16]}}"#,
            &ok_data,
        );
        assert!(matches!(Checkpoint::from_bytes(&past_end), Err(Error::Shape(_))));

        let wrong_size = raw_container(
            r#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
            &ok_data,
        );
        assert!(matches!(Checkpoint::from_bytes(&wrong_size), Err(Error::Shape(_))));

        let bad_dtype = raw_container(
            r#"{"w":{"dtype":"BF16","shape":[2],"data_offsets":[0,4]}}"#,
            &ok_data[..4],
        );
        assert!(matches!(Checkpoint::from_bytes(&bad_dtype), Err(Error::Dtype(_))));

        let mut trailing = raw_container(
            r#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
            &ok_data,
        );
        trailing.push(0);
        assert!(matches!(Checkpoint::from_bytes(&trailing), Err(Error::Format(_))));

        assert!(matches!(Checkpoint::from_bytes(&[1, 2, 3]), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&raw_container("not json", &[])),
            Err(Error::Format(_))
        ));
        let mut huge = raw_container("{}", &[]);
        huge[..8].copy_from_slice(&1000u64.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&huge), Err(Error::Format(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&raw_container(r#"{"__metadata__":{"a":1}}"#, &[])),
            Err(Error::Format(_))
        ));

        let overlap = raw_container(
            r#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &ok_data,
        );
        assert!(matches!(Checkpoint::from_bytes(&overlap), Err(Error::Shape(_))));
    }

    #[test]
    fn reader_accepts_non_sorted_layout() {
        let bytes = raw_container(
            r#"{"b":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#,
            &f32_bytes(&[1.0, 2.0]),
        );
        let c = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(c.names().collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(c.get("b").unwrap().data(), &[1.0]);
    }

    #[test]
    fn writer_layout_is_canonical() {
        let mut c = Checkpoint::new();
        c.insert("z", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        c.insert("a", Tensor::vector(vec![2.0, 3.0]).unwrap()).unwrap();
        c.set_metadata("k", "v");
        let bytes = c.to_bytes().unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!((8 + n) % 8, 0);
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap().trim_end();
        assert_eq!(
            header,
            r#"{"__metadata__":{"k":"v"},"a":{"data_offsets":[0,8],"dtype":"F32","shape":[2]},"z":{"data_offsets":[8,12],"dtype":"F32","shape":[1]}}"#
        );
        assert_eq!(&bytes[8 + n..], &f32_bytes(&[2.0, 3.0, 1.0])[..]);
    }

    #[test]
    fn names_are_validated() {
        let mut c = Checkpoint::new();
        assert!(c.insert("", Tensor::vector(vec![1.0]).unwrap()).is_err());
        assert!(c.insert(METADATA_KEY, Tensor::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn empty_checkpoint_fingerprint_is_frozen() {
        // Canonical bytes: 8-byte length (8), then "{}" padded to 8 bytes.
        let bytes = Checkpoint::new().to_bytes().unwrap();
        assert_eq!(bytes, b"\x08\0\0\0\0\0\0\0{}      ");
        assert_eq!(
            fingerprint(&Checkpoint::new()),
            "9bbcbf73561f6bc5d0a17ea6a2081feed2d1304e87602d8c502d9a5c4bd85576"
        );
    }

    #[test]
    fn fingerprint_sees_single_bit_flips() {
        let mut c = Checkpoint::new();
        c.insert("w", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let fp = fingerprint(&c);
        assert_eq!(fp, fingerprint(&c.clone()));
        let mut flipped = c.get("w").unwrap().data().to_vec();
        flipped[1] = f32::from_bits(flipped[1].to_bits() ^ 1);
        c.insert("w", Tensor::vector(flipped).unwrap()).unwrap();
        assert_ne!(fp, fingerprint(&c));
    }

    #[test]
    fn lora_rank16_adapter_reads() {
        let mut c = Checkpoint::new();
        c.insert("enc.fc.lora_A", mat(16, 64, 0.01)).unwrap();
        c.insert("enc.fc.lora_B", mat(64, 16, 0.0)).unwrap();
        c.set_metadata("rank", "16");
        c.set_metadata("lora_alpha", "16");
        let a = LoraAdapter::from_checkpoint(&c).unwrap();
        assert_eq!(a.rank(), 16);
        assert_eq!(a.scaling(), 1.0);
        assert_eq!(a.layers().len(), 1);
        let layer = &a.layers()["enc.fc"];
        assert_eq!((layer.in_dim(), layer.out_dim()), (64, 64));
        assert_eq!(a.num_parameters(), 16 * (64 + 64));
        assert_eq!(LoraAdapter::from_checkpoint(&a.to_checkpoint().unwrap()).unwrap(), a);
    }

    #[test]
    fn lora_pairing_and_rank_errors() {
        let mut c = Checkpoint::new();
        c.insert("enc.fc.lora_A", mat(16, 64, 0.01)).unwrap();
        c.set_metadata("rank", "16");
        c.set_metadata("lora_alpha", "16");
        assert!(matches!(LoraAdapter::from_checkpoint(&c), Err(Error::Pairing(_))));

        c.insert("enc.fc.lora_B", mat(64, 16, 0.0)).unwrap();
        c.set_metadata("rank", "8");
        assert!(matches!(LoraAdapter::from_checkpoint(&c), Err(Error::Rank(_))));

        let mut only_b = Checkpoint::new();
        only_b.insert("x.lora_B", mat(4, 1, 0.0)).unwrap();
        only_b.set_metadata("rank", "1");
        only_b.set_metadata("lora_alpha", "1");
        assert!(matches!(LoraAdapter::from_checkpoint(&only_b), Err(Error::Pairing(_))));

        let mut too_big = Checkpoint::new();
        too_big.insert("x.lora_A", mat(4, 2, 0.0)).unwrap();
        too_big.insert("x.lora_B", mat(8, 4, 0.0)).unwrap();
        too_big.set_metadata("rank", "4");
        too_big.set_metadata("lora_alpha", "4");
        assert!(matches!(LoraAdapter::from_checkpoint(&too_big), Err(Error::Rank(_))));

        let mut no_meta = Checkpoint::new();
        no_meta.insert("x.lora_A", mat(1, 2, 0.0)).unwrap();
        no_meta.insert("x.lora_B", mat(2, 1, 0.0)).unwrap();
        assert!(matches!(LoraAdapter::from_checkpoint(&no_meta), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_validation() {
        let entry = |id: &str, fp: &str| ManifestEntry {
            vector_id: id.into(),
            path: format!("{id}.vf"),
            kind: VectorKind::FullDelta,
            base_fingerprint: fp.into(),
            label: "british".into(),
        };
        let mut m = VectorManifest::default();
        m.add(entry("british", "abc")).unwrap();
        assert!(m.add(entry("british", "abc")).is_err());
        assert!(m.add(entry("spanish", "")).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.json");
        let mut m = VectorManifest::default();
        m.add(entry("british", "abc")).unwrap();
        m.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains(r#""kind": "full_delta""#));
        assert_eq!(VectorManifest::load(&path).unwrap(), m);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn write_read_round_trip(
            tensors in prop::collection::btree_map("[a-z][a-z0-9_.]{0,12}", arb_tensor(), 0..6),
            meta in prop::collection::btree_map("[a-z]{1,6}", "[ -~]{0,10}", 0..3),
        ) {
            let mut c = Checkpoint::new();
            for (k, t) in tensors {
                c.insert(k, t).unwrap();
            }
            for (k, v) in meta {
                c.set_metadata(k, v);
            }
            let bytes = c.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert!(back.bit_eq(&c));
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
