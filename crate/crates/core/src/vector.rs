//! Task vectors: parameter-space deltas between a fine-tuned and a
//! pretrained checkpoint, and the arithmetic on them.
//!
//! A vector is stored as a checkpoint of deltas plus provenance carried in
//! `__metadata__` (`kind=task_vector`). Keys a vector does not mention are
//! zero deltas; applying a vector never touches them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{fingerprint, read_checkpoint, write_checkpoint, Checkpoint, LoraAdapter};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor, TensorStats};

/// A finite task-vector coefficient. Negative values and values above one
/// are allowed (negation, extrapolation).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Coefficient(f64);

impl Coefficient {
    pub fn new(value: f64) -> Result<Self> {
        if value.is_finite() {
            Ok(Coefficient(value))
        } else {
            Err(Error::NonFiniteCoefficient(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Outside `[0, 2]`; the CLI warns on these.
    pub fn is_unusual(self) -> bool {
        !(0.0..=2.0).contains(&self.0)
    }
}

impl TryFrom<f64> for Coefficient {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Coefficient::new(value)
    }
}

impl From<Coefficient> for f64 {
    fn from(c: Coefficient) -> f64 {
        c.0
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorSource {
    Extracted,
    LoraExpanded,
    Composed,
}

impl VectorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            VectorSource::Extracted => "extracted",
            VectorSource::LoraExpanded => "lora_expanded",
            VectorSource::Composed => "composed",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "extracted" => Ok(VectorSource::Extracted),
            "lora_expanded" => Ok(VectorSource::LoraExpanded),
            "composed" => Ok(VectorSource::Composed),
            other => Err(Error::Format(format!("unknown vector source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub vector_id: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub vector_id: String,
    /// `None` for vectors not yet bound to a base (e.g. an adapter that
    /// carried no fingerprint).
    pub base_fingerprint: Option<String>,
    pub source: VectorSource,
    /// Product of all `scale_vector` coefficients applied since creation.
    pub scale: f64,
    pub components: Option<Vec<Component>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    deltas: Checkpoint,
    provenance: Provenance,
}

const KIND_KEY: &str = "kind";
const KIND_VALUE: &str = "task_vector";

impl TaskVector {
    fn new(deltas: Checkpoint, base_fingerprint: Option<String>, source: VectorSource) -> Self {
        let vector_id = default_id(&deltas);
        TaskVector {
            deltas,
            provenance: Provenance {
                vector_id,
                base_fingerprint,
                source,
                scale: 1.0,
                components: None,
            },
        }
    }

    pub fn deltas(&self) -> &Checkpoint {
        &self.deltas
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn id(&self) -> &str {
        &self.provenance.vector_id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.provenance.vector_id = id.into();
        self
    }

    pub fn base_fingerprint(&self) -> Option<&str> {
        self.provenance.base_fingerprint.as_deref()
    }

    pub fn with_base_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.provenance.base_fingerprint = Some(fp.into());
        self
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.deltas.get(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.deltas.names()
    }

    /// Global L2 norm over every delta.
    pub fn l2_norm(&self) -> f64 {
        self.deltas
            .tensors()
            .map(|(_, t)| tensor::stats(t).l2_norm.powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Serializes as a checkpoint with provenance in `__metadata__`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.deltas.clone();
        let p = &self.provenance;
        let meta = ckpt.metadata_mut();
        meta.clear();
        meta.insert(KIND_KEY.into(), KIND_VALUE.into());
        meta.insert("vector_id".into(), p.vector_id.clone());
        meta.insert("source".into(), p.source.as_str().into());
        meta.insert("scale".into(), p.scale.to_string());
        if let Some(fp) = &p.base_fingerprint {
            meta.insert("base_fingerprint".into(), fp.clone());
        }
        if let Some(components) = &p.components {
            meta.insert("components".into(), serde_json::to_string(components)?);
        }
        Ok(ckpt)
    }

    pub fn from_checkpoint(mut ckpt: Checkpoint) -> Result<Self> {
        let meta = std::mem::take(ckpt.metadata_mut());
        if meta.get(KIND_KEY).map(String::as_str) != Some(KIND_VALUE) {
            return Err(Error::Format(format!(
                "not a task vector: metadata `{KIND_KEY}` is not `{KIND_VALUE}`"
            )));
        }
        let field = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("task vector metadata lacks `{k}`")))
        };
        let scale = field("scale")?
            .parse::<f64>()
            .map_err(|e| Error::Format(format!("bad `scale`: {e}")))?;
        let components = meta
            .get("components")
            .map(|s| serde_json::from_str(s))
            .transpose()
            .map_err(|e| Error::Format(format!("bad `components`: {e}")))?;
        Ok(TaskVector {
            deltas: ckpt,
            provenance: Provenance {
                vector_id: field("vector_id")?.clone(),
                base_fingerprint: meta.get("base_fingerprint").cloned(),
                source: VectorSource::parse(field("source")?)?,
                scale,
                components,
            },
        })
    }
}

fn default_id(deltas: &Checkpoint) -> String {
    format!("tv-{}", &fingerprint(deltas)[..12])
}

pub fn read_vector(path: impl AsRef<Path>) -> Result<TaskVector> {
    TaskVector::from_checkpoint(read_checkpoint(path)?)
}

pub fn write_vector(v: &TaskVector, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(&v.to_checkpoint()?, path)
}

fn key_set_check(a: &Checkpoint, b: &Checkpoint) -> Result<()> {
    let ka: BTreeSet<&str> = a.names().collect();
    let kb: BTreeSet<&str> = b.names().collect();
    if ka != kb {
        return Err(Error::KeySetMismatch {
            missing: kb.difference(&ka).map(|s| s.to_string()).collect(),
            extra: ka.difference(&kb).map(|s| s.to_string()).collect(),
        });
    }
    Ok(())
}

fn shape_check(key: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            key: Some(key.to_string()),
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `fine_tuned − pretrained`, per tensor.
///
/// `missing` in a [`Error::KeySetMismatch`] lists keys only the pretrained
/// checkpoint has; `extra` lists keys only the fine-tuned one has.
pub fn extract_vector(fine_tuned: &Checkpoint, pretrained: &Checkpoint) -> Result<TaskVector> {
    key_set_check(fine_tuned, pretrained)?;
    let mut deltas = Checkpoint::new();
    for (key, ft) in fine_tuned.tensors() {
        let pre = pretrained.get(key).expect("key sets checked");
        shape_check(key, ft, pre)?;
        deltas.insert(key, tensor::sub(ft, pre)?.to_dtype(tensor::DType::F32)?)?;
    }
    Ok(TaskVector::new(
        deltas,
        Some(fingerprint(pretrained)),
        VectorSource::Extracted,
    ))
}

/// Expands each adapted layer to its dense delta `(lora_alpha / rank) · B · A`.
/// The vector inherits the adapter's base fingerprint, if it has one.
pub fn lora_delta(adapter: &LoraAdapter) -> Result<TaskVector> {
    let s = adapter.scaling();
    let mut deltas = Checkpoint::new();
    for (name, layer) in adapter.layers() {
        let product = tensor::matmul(&layer.b_factor, &layer.a_factor)?;
        let delta = if s == 1.0 { product } else { tensor::scale(&product, s)? };
        deltas.insert(name.clone(), delta)?;
    }
    Ok(TaskVector::new(
        deltas,
        adapter.base_fingerprint().map(str::to_string),
        VectorSource::LoraExpanded,
    ))
}

pub fn scale_vector(v: &TaskVector, alpha: Coefficient) -> Result<TaskVector> {
    let mut deltas = Checkpoint::new();
    for (key, t) in v.deltas.tensors() {
        deltas.insert(key, tensor::scale(t, alpha.value())?.to_dtype(tensor::DType::F32)?)?;
    }
    let mut provenance = v.provenance.clone();
    provenance.scale *= alpha.value();
    Ok(TaskVector { deltas, provenance })
}

/// `Σ αᵢ · τᵢ` over the union of keys; a key missing from a vector
/// contributes zero. Coefficients are taken literally (no renormalization).
pub fn compose(vectors: &[&TaskVector], coefficients: &[Coefficient], force: bool) -> Result<TaskVector> {
    if vectors.len() != coefficients.len() {
        return Err(Error::LengthMismatch {
            vectors: vectors.len(),
            coefficients: coefficients.len(),
        });
    }
    let first = vectors.first().ok_or(Error::EmptyComposition)?;
    let base = first.base_fingerprint();
    if !force {
        for v in &vectors[1..] {
            if v.base_fingerprint() != base {
                return Err(Error::BaseMismatch {
                    expected: base.unwrap_or("<unbound>").to_string(),
                    found: v.base_fingerprint().unwrap_or("<unbound>").to_string(),
                });
            }
        }
    }

    let keys: BTreeSet<&str> = vectors.iter().flat_map(|v| v.keys()).collect();
    let mut deltas = Checkpoint::new();
    for key in keys {
        let terms: Vec<(&Tensor, f64)> = vectors
            .iter()
            .zip(coefficients)
            .filter_map(|(v, c)| v.get(key).map(|t| (t, c.value())))
            .collect();
        for (t, _) in &terms[1..] {
            shape_check(key, terms[0].0, t)?;
        }
        deltas.insert(key, tensor::linear_combination(&terms)?)?;
    }

    let components: Vec<Component> = vectors
        .iter()
        .zip(coefficients)
        .map(|(v, c)| Component {
            vector_id: v.id().to_string(),
            coefficient: c.value(),
        })
        .collect();
    let mut out = TaskVector::new(deltas, base.map(str::to_string), VectorSource::Composed);
    out.provenance.components = Some(components);
    Ok(out)
}

/// `base + α · v`. Keys absent from `v` pass through bit-exact and `α = 0`
/// returns a copy of `base`. The vector must have been extracted against
/// `base` unless `force` is set.
pub fn apply(base: &Checkpoint, v: &TaskVector, alpha: Coefficient, force: bool) -> Result<Checkpoint> {
    if !force {
        let found = fingerprint(base);
        match v.base_fingerprint() {
            Some(fp) if fp == found => {}
            other => {
                return Err(Error::BaseMismatch {
                    expected: other.unwrap_or("<unbound>").to_string(),
                    found,
                })
            }
        }
    }
    if let Some(k) = v.keys().find(|k| !base.contains(k)) {
        return Err(Error::UnknownKey(k.to_string()));
    }
    for (key, delta) in v.deltas.tensors() {
        shape_check(key, base.get(key).unwrap(), delta)?;
    }
    if alpha.value() == 0.0 {
        return Ok(base.clone());
    }

    let mut out = base.clone();
    for (key, delta) in v.deltas.tensors() {
        let merged = tensor::add_scaled(base.get(key).unwrap(), delta, alpha.value())?
            .to_dtype(tensor::DType::F32)?;
        out.insert(key, merged)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiff {
    pub l2_of_delta: f64,
    pub max_abs_delta: f64,
    /// `‖a − b‖ / ‖b‖`; zero when both norms are zero, infinite when only `b`'s is.
    pub relative_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub tensors: BTreeMap<String, TensorDiff>,
    pub global: TensorDiff,
}

/// Per-tensor statistics of `a − b`, with the difference taken in 64-bit.
pub fn diff_report(a: &Checkpoint, b: &Checkpoint) -> Result<DiffReport> {
    key_set_check(a, b)?;
    let mut tensors = BTreeMap::new();
    let (mut total_sq, mut total_base_sq, mut total_max) = (0.0f64, 0.0f64, 0.0f64);
    for (key, ta) in a.tensors() {
        let tb = b.get(key).unwrap();
        shape_check(key, ta, tb)?;
        let (mut sq, mut base_sq, mut max_abs) = (0.0f64, 0.0f64, 0.0f64);
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let d = x as f64 - y as f64;
            sq += d * d;
            base_sq += (y as f64).powi(2);
            max_abs = max_abs.max(d.abs());
        }
        total_sq += sq;
        total_base_sq += base_sq;
        total_max = total_max.max(max_abs);
        tensors.insert(
            key.to_string(),
            TensorDiff {
                l2_of_delta: sq.sqrt(),
                max_abs_delta: max_abs,
                relative_norm: relative(sq.sqrt(), base_sq.sqrt()),
            },
        );
    }
    Ok(DiffReport {
        tensors,
        global: TensorDiff {
            l2_of_delta: total_sq.sqrt(),
            max_abs_delta: total_max,
            relative_norm: relative(total_sq.sqrt(), total_base_sq.sqrt()),
        },
    })
}

fn relative(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-tensor stats of a vector's deltas.
pub fn vector_stats(v: &TaskVector) -> BTreeMap<String, TensorStats> {
    v.deltas
        .tensors()
        .map(|(k, t)| (k.to_string(), tensor::stats(t)))
        .collect()
}
