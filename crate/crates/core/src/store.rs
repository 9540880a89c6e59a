//! Adapter container I/O.
//!
//! Files use the safetensors layout: an 8-byte little-endian header length,
//! a UTF-8 JSON header mapping tensor names to `{dtype, shape, data_offsets}`,
//! then one contiguous little-endian buffer. Only `F32` tensors are accepted.
//!
//! Tensor names follow the PEFT convention
//! `base_model.model.layers.{l}.<path>.{module_type}.lora_{A|B}.weight`.
//! Two tensors sharing everything up to the `lora_{A|B}.weight` suffix form
//! one [`LoraPair`]. Anything else is kept verbatim in [`AdapterSet::extras`]
//! so that a save reproduces it byte-for-byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::error::{FuseError, Result};
use crate::topology::{classify_module, Factor};

const META_FAMILY: &str = "family_id";
const META_LAYERS: &str = "layer_count";
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
        }
    }
}

/// One raw tensor as it sits in the container.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl TensorRecord {
    pub fn from_matrix(name: impl Into<String>, m: &Array2<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len() * 4);
        for &v in m.iter() {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
        TensorRecord {
            name: name.into(),
            dtype: Dtype::F32,
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Self {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorRecord {
            name: name.into(),
            dtype: Dtype::F32,
            shape,
            data,
        }
    }

    pub fn values(&self) -> impl Iterator<Item = f32> + '_ {
        self.data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
    }

    /// Interprets a rank-2 record as a matrix, widening to f64 (exact).
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(FuseError::TensorMismatch {
                name: self.name.clone(),
                reason: format!("expected a 2-d tensor, got shape {:?}", self.shape),
            });
        }
        let vals: Vec<f64> = self.values().map(f64::from).collect();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), vals).map_err(|e| {
            FuseError::TensorMismatch {
                name: self.name.clone(),
                reason: e.to_string(),
            }
        })
    }

    fn check_len(&self) -> Result<()> {
        let expected = self.shape.iter().product::<usize>() * 4;
        if expected != self.data.len() {
            return Err(FuseError::TensorMismatch {
                name: self.name.clone(),
                reason: format!(
                    "shape {:?} needs {} bytes, buffer has {}",
                    self.shape,
                    expected,
                    self.data.len()
                ),
            });
        }
        Ok(())
    }
}

/// Group key `(module_type, rank)` plus the layer index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModuleKey {
    pub layer: usize,
    pub module_type: String,
    pub rank: usize,
}

impl ModuleKey {
    pub fn new(layer: usize, module_type: impl Into<String>, rank: usize) -> Self {
        ModuleKey {
            layer,
            module_type: module_type.into(),
            rank,
        }
    }
}

impl fmt::Display for ModuleKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}(r={})", self.layer, self.module_type, self.rank)
    }
}

/// `A` is `r x d_in`, `B` is `d_out x r`. Entries are held in f64; every value
/// loaded from disk is an exactly widened f32.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub key: ModuleKey,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraPair {
    pub fn new(key: ModuleKey, a: Array2<f64>, b: Array2<f64>) -> Result<Self> {
        if a.nrows() != b.ncols() || a.nrows() != key.rank {
            return Err(FuseError::Shape(format!(
                "{key}: A is {:?}, B is {:?}",
                a.dim(),
                b.dim()
            )));
        }
        Ok(LoraPair { key, a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(self.b.iter()).all(|v| v.is_finite())
    }
}

/// Default PEFT-style tensor prefix for a module, ending in `.`.
pub fn default_prefix(layer: usize, module_type: &str) -> String {
    let block = match module_type {
        "q_proj" | "k_proj" | "v_proj" | "o_proj" => "self_attn",
        _ => "mlp",
    };
    format!("base_model.model.layers.{layer}.{block}.{module_type}.")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub family_id: String,
    pub layer_count: usize,
    pub pairs: BTreeMap<ModuleKey, LoraPair>,
    /// Tensor-name prefix for each pair (everything before `lora_A.weight`).
    pub prefixes: BTreeMap<ModuleKey, String>,
    /// Tensors that are not LoRA factors; carried through unchanged.
    pub extras: Vec<TensorRecord>,
    /// Free-form header metadata other than family id and depth.
    pub metadata: BTreeMap<String, String>,
}

impl AdapterSet {
    pub fn new(family_id: impl Into<String>, layer_count: usize) -> Self {
        AdapterSet {
            family_id: family_id.into(),
            layer_count,
            pairs: BTreeMap::new(),
            prefixes: BTreeMap::new(),
            extras: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, pair: LoraPair) {
        let prefix = default_prefix(pair.key.layer, &pair.key.module_type);
        self.insert_with_prefix(pair, prefix);
    }

    pub fn insert_with_prefix(&mut self, pair: LoraPair, prefix: String) {
        self.prefixes.insert(pair.key.clone(), prefix);
        self.pairs.insert(pair.key.clone(), pair);
    }

    pub fn get(&self, key: &ModuleKey) -> Option<&LoraPair> {
        self.pairs.get(key)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn module_types(&self) -> BTreeSet<String> {
        self.pairs.keys().map(|k| k.module_type.clone()).collect()
    }

    pub fn tensor_name(&self, key: &ModuleKey, factor: Factor) -> String {
        let prefix = self
            .prefixes
            .get(key)
            .cloned()
            .unwrap_or_else(|| default_prefix(key.layer, &key.module_type));
        match factor {
            Factor::A => format!("{prefix}lora_A.weight"),
            Factor::B => format!("{prefix}lora_B.weight"),
        }
    }

    /// All tensors in serialization order (lexicographic by name).
    pub fn to_records(&self) -> Vec<TensorRecord> {
        let mut records: Vec<TensorRecord> = self
            .pairs
            .iter()
            .flat_map(|(key, pair)| {
                [
                    TensorRecord::from_matrix(self.tensor_name(key, Factor::A), &pair.a),
                    TensorRecord::from_matrix(self.tensor_name(key, Factor::B), &pair.b),
                ]
            })
            .chain(self.extras.iter().cloned())
            .collect();
        records.sort_by(|x, y| x.name.cmp(&y.name));
        records
    }
}

/// Ordered view of the JSON header that keeps duplicate keys visible.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;
        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<M: MapAccess<'de>>(self, mut map: M) -> std::result::Result<Self::Value, M::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Value>()? {
                    out.push((k, v));
                }
                Ok(HeaderEntries(out))
            }
        }
        deserializer.deserialize_map(EntriesVisitor)
    }
}

/// Parses a container from raw bytes into metadata and tensor records.
pub fn parse_container(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Vec<TensorRecord>)> {
    let malformed = |m: &str| FuseError::MalformedHeader(m.to_string());
    if bytes.len() < 8 {
        return Err(malformed("file shorter than the 8-byte length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_start = 8usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| malformed("header length exceeds file size"))?;
    let header = std::str::from_utf8(&bytes[8..body_start]).map_err(|_| malformed("header is not UTF-8"))?;
    let entries: HeaderEntries =
        serde_json::from_str(header.trim_end()).map_err(|e| FuseError::MalformedHeader(e.to_string()))?;
    let buffer = &bytes[body_start..];

    let mut metadata = BTreeMap::new();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (name, value) in entries.0 {
        if !seen.insert(name.clone()) {
            return Err(FuseError::DuplicateName(name));
        }
        if name == METADATA_KEY {
            let obj = value.as_object().ok_or_else(|| malformed("__metadata__ is not an object"))?;
            for (k, v) in obj {
                let s = v.as_str().ok_or_else(|| malformed("__metadata__ values must be strings"))?;
                metadata.insert(k.clone(), s.to_string());
            }
            continue;
        }
        let obj = value
            .as_object()
            .ok_or_else(|| FuseError::MalformedHeader(format!("entry {name} is not an object")))?;
        let dtype = obj.get("dtype").and_then(Value::as_str).unwrap_or_default();
        if dtype != "F32" {
            return Err(FuseError::TensorMismatch {
                name,
                reason: format!("unsupported dtype {dtype:?}"),
            });
        }
        let shape: Vec<usize> = obj
            .get("shape")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|d| d.as_u64().map(|x| x as usize)).collect())
            .ok_or_else(|| FuseError::MalformedHeader(format!("entry {name} has no valid shape")))?;
        let offsets: Vec<usize> = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|d| d.as_u64().map(|x| x as usize)).collect())
            .filter(|o: &Vec<usize>| o.len() == 2)
            .ok_or_else(|| FuseError::MalformedHeader(format!("entry {name} has no valid data_offsets")))?;
        let (start, end) = (offsets[0], offsets[1]);
        if start > end || end > buffer.len() {
            return Err(FuseError::TensorMismatch {
                name,
                reason: format!("data_offsets [{start}, {end}) outside buffer of {} bytes", buffer.len()),
            });
        }
        let record = TensorRecord {
            name,
            dtype: Dtype::F32,
            shape,
            data: buffer[start..end].to_vec(),
        };
        record.check_len()?;
        records.push(record);
    }
    Ok((metadata, records))
}

/// Serializes metadata and records; records are written in name order.
pub fn encode_container(metadata: &BTreeMap<String, String>, records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut sorted: Vec<&TensorRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));

    // serde_json's default map is a BTreeMap, so keys come out sorted.
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(METADATA_KEY.to_string(), json!(metadata));
    }
    let mut offset = 0usize;
    for r in &sorted {
        r.check_len()?;
        if header.contains_key(&r.name) {
            return Err(FuseError::DuplicateName(r.name.clone()));
        }
        header.insert(
            r.name.clone(),
            json!({
                "dtype": r.dtype.as_str(),
                "shape": r.shape,
                "data_offsets": [offset, offset + r.data.len()],
            }),
        );
        offset += r.data.len();
    }
    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("json map serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for r in sorted {
        out.extend_from_slice(&r.data);
    }
    Ok(out)
}

/// Builds an [`AdapterSet`] out of parsed container contents.
pub fn assemble(
    family_hint: &str,
    mut metadata: BTreeMap<String, String>,
    records: Vec<TensorRecord>,
) -> Result<AdapterSet> {
    let mut halves: BTreeMap<String, (usize, String, Option<TensorRecord>, Option<TensorRecord>)> = BTreeMap::new();
    let mut extras = Vec::new();
    for record in records {
        let is_factor = record.name.ends_with("lora_A.weight") || record.name.ends_with("lora_B.weight");
        if !is_factor {
            extras.push(record);
            continue;
        }
        let (layer, module_type, factor) = classify_module(&record.name)?;
        let prefix = record.name[..record.name.len() - "lora_A.weight".len()].to_string();
        let slot = halves.entry(prefix).or_insert((layer, module_type, None, None));
        match factor {
            Factor::A => slot.2 = Some(record),
            Factor::B => slot.3 = Some(record),
        }
    }

    let family_id = metadata.remove(META_FAMILY).unwrap_or_else(|| family_hint.to_string());
    let declared_layers = match metadata.remove(META_LAYERS) {
        Some(s) => Some(
            s.parse::<usize>()
                .map_err(|_| FuseError::MalformedHeader(format!("layer_count {s:?} is not an integer")))?,
        ),
        None => None,
    };

    let mut set = AdapterSet::new(family_id, 0);
    set.metadata = metadata;
    set.extras = extras;
    let mut max_layer: Option<usize> = None;
    for (prefix, (layer, module_type, a, b)) in halves {
        let (a, b) = match (a, b) {
            (Some(a), Some(b)) => (a, b),
            (Some(_), None) => return Err(FuseError::UnpairedFactor(format!("{prefix}lora_A.weight has no lora_B"))),
            (None, Some(_)) => return Err(FuseError::UnpairedFactor(format!("{prefix}lora_B.weight has no lora_A"))),
            (None, None) => unreachable!(),
        };
        let a = a.to_matrix()?;
        let b = b.to_matrix()?;
        let key = ModuleKey::new(layer, module_type, a.nrows());
        if set.pairs.contains_key(&key) {
            return Err(FuseError::DuplicateName(format!("module key {key} ({prefix})")));
        }
        max_layer = Some(max_layer.map_or(layer, |m: usize| m.max(layer)));
        set.insert_with_prefix(LoraPair { key, a, b }, prefix);
    }
    let inferred = max_layer.map_or(0, |m| m + 1);
    set.layer_count = declared_layers.unwrap_or(inferred);
    Ok(set)
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<AdapterSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| FuseError::io(path, e))?;
    let (metadata, records) = parse_container(&bytes)?;
    let hint = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    assemble(&hint, metadata, records)
}

/// Encodes a set without touching the filesystem.
pub fn encode_adapter(set: &AdapterSet) -> Result<Vec<u8>> {
    for (key, pair) in &set.pairs {
        if !pair.is_finite() {
            return Err(FuseError::NonFinite(key.to_string()));
        }
    }
    let mut metadata = set.metadata.clone();
    metadata.insert(META_FAMILY.to_string(), set.family_id.clone());
    metadata.insert(META_LAYERS.to_string(), set.layer_count.to_string());
    encode_container(&metadata, &set.to_records())
}

pub fn save_adapter(set: &AdapterSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_adapter(set)?;
    std::fs::write(path, bytes).map_err(|e| FuseError::io(path, e))
}

/// Lists invariant violations; an empty list means the set is valid.
pub fn validate_adapter(set: &AdapterSet) -> Vec<String> {
    let mut violations = Vec::new();
    let mut shapes: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    let mut reported = BTreeSet::new();
    for (key, pair) in &set.pairs {
        if pair.a.nrows() != pair.b.ncols() || key.rank != pair.a.nrows() {
            violations.push(format!("rank mismatch @ {key}"));
        }
        if !pair.is_finite() {
            violations.push(format!("non-finite entries @ {key}"));
        }
        if key.layer >= set.layer_count {
            violations.push(format!("layer out of range @ {key}"));
        }
        let dims = (pair.a.nrows(), pair.d_in(), pair.d_out());
        match shapes.get(key.module_type.as_str()) {
            Some(&seen) if seen != dims => {
                if reported.insert(key.module_type.clone()) {
                    violations.push(format!("inconsistent module shape: {}", key.module_type));
                }
            }
            Some(_) => {}
            None => {
                shapes.insert(&key.module_type, dims);
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn pair(layer: usize, ty: &str, r: usize, d_in: usize, d_out: usize, fill: f64) -> LoraPair {
        let a = Array2::from_shape_fn((r, d_in), |(i, j)| fill + (i * d_in + j) as f64 * 0.25);
        let b = Array2::from_shape_fn((d_out, r), |(i, j)| fill - (i * r + j) as f64 * 0.125);
        LoraPair::new(ModuleKey::new(layer, ty, r), a, b).unwrap()
    }

    #[test]
    fn single_rank8_pair_loads() {
        let mut set = AdapterSet::new("t", 1);
        set.insert(pair(0, "q_proj", 8, 64, 64, 0.5));
        let bytes = encode_adapter(&set).unwrap();
        let (meta, recs) = parse_container(&bytes).unwrap();
        let back = assemble("x", meta, recs).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.layer_count, 1);
        let p = back.pairs.values().next().unwrap();
        assert_eq!(p.rank(), 8);
        assert_eq!(p.a.dim(), (8, 64));
        assert_eq!(p.b.dim(), (64, 8));
    }

    #[test]
    fn empty_table_reports_zero_layers() {
        let bytes = encode_container(&BTreeMap::new(), &[]).unwrap();
        let (meta, recs) = parse_container(&bytes).unwrap();
        let set = assemble("empty", meta, recs).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.layer_count, 0);
    }

    #[test]
    fn lone_a_factor_is_unpaired() {
        let rec = TensorRecord::from_f32(
            "base_model.model.layers.0.self_attn.q_proj.lora_A.weight",
            vec![1, 2],
            &[1.0, 2.0],
        );
        let bytes = encode_container(&BTreeMap::new(), &[rec]).unwrap();
        let (meta, recs) = parse_container(&bytes).unwrap();
        let err = assemble("x", meta, recs).unwrap_err();
        assert!(matches!(err, FuseError::UnpairedFactor(_)), "{err}");
        assert!(err.to_string().contains("unpaired factor"));
    }

    #[test]
    fn nan_refuses_to_save() {
        let mut set = AdapterSet::new("t", 1);
        let mut p = pair(0, "q_proj", 2, 3, 3, 0.0);
        p.b[[1, 1]] = f64::NAN;
        set.insert(p);
        assert!(matches!(encode_adapter(&set), Err(FuseError::NonFinite(_))));
    }

    #[test]
    fn one_scalar_changes_exactly_four_bytes() {
        let mut set = AdapterSet::new("t", 2);
        set.insert(pair(0, "q_proj", 2, 4, 4, 0.1));
        set.insert(pair(1, "q_proj", 2, 4, 4, 0.2));
        let before = encode_adapter(&set).unwrap();
        let key = ModuleKey::new(1, "q_proj", 2);
        set.pairs.get_mut(&key).unwrap().b[[3, 0]] += 1.0;
        let after = encode_adapter(&set).unwrap();
        assert_eq!(before.len(), after.len());
        let diff: Vec<usize> = (0..before.len()).filter(|&i| before[i] != after[i]).collect();
        assert!(!diff.is_empty() && diff.len() <= 4);
        let lo = diff[0];
        assert!(diff.iter().all(|&i| i < lo + 4));
    }

    #[test]
    fn header_keys_sorted_and_aligned() {
        let mut set = AdapterSet::new("fam", 3);
        set.insert(pair(2, "v_proj", 2, 3, 3, 0.0));
        set.insert(pair(0, "q_proj", 2, 3, 3, 0.0));
        set.extras.push(TensorRecord::from_f32("embed_tokens.weight", vec![2], &[1.0, 2.0]));
        let bytes = encode_adapter(&set).unwrap();
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(n % 8, 0);
        let header: Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
        let keys: Vec<&String> = header.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn malformed_inputs_error() {
        assert!(matches!(parse_container(&[1, 2, 3]), Err(FuseError::MalformedHeader(_))));
        let mut bytes = 100u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(parse_container(&bytes), Err(FuseError::MalformedHeader(_))));
        let hdr = br#"{"a":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#;
        let mut bytes = (hdr.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(hdr);
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(parse_container(&bytes), Err(FuseError::TensorMismatch { .. })));
        let hdr = br#"{"a":{"dtype":"F16","shape":[2],"data_offsets":[0,4]}}"#;
        let mut bytes = (hdr.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(hdr);
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(matches!(parse_container(&bytes), Err(FuseError::TensorMismatch { .. })));
    }

    #[test]
    fn duplicate_names_rejected() {
        let hdr = br#"{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#;
        let mut bytes = (hdr.len() as u64).to_le_bytes().to_vec();
        bytes.extend_from_slice(hdr);
        bytes.extend_from_slice(&[0u8; 4]);
        assert!(matches!(parse_container(&bytes), Err(FuseError::DuplicateName(_))));
    }

    #[test]
    fn validate_flags_rank_and_shape() {
        let mut set = AdapterSet::new("t", 2);
        set.insert(pair(0, "q_proj", 4, 8, 8, 0.0));
        assert!(validate_adapter(&set).is_empty());

        let bad = LoraPair {
            key: ModuleKey::new(1, "k_proj", 8),
            a: Array2::zeros((8, 8)),
            b: Array2::zeros((8, 4)),
        };
        set.insert(bad);
        let v = validate_adapter(&set);
        assert_eq!(v, vec!["rank mismatch @ layers.1.k_proj(r=8)".to_string()]);

        let mut set = AdapterSet::new("t", 2);
        set.insert(pair(0, "q_proj", 4, 8, 8, 0.0));
        set.insert(pair(1, "q_proj", 4, 8, 16, 0.0));
        assert_eq!(validate_adapter(&set), vec!["inconsistent module shape: q_proj".to_string()]);
    }
}
