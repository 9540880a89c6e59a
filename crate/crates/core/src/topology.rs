//! Where transfer is allowed: tensor-name classification, tail-aligned layer
//! maps, `(module_type, rank)` groups, and per-layer transfer units.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{FuseError, Result};
use crate::store::{AdapterSet, LoraPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Factor {
    A,
    B,
}

pub const DEFAULT_MODULE_TYPES: [&str; 7] = ["q_proj", "k_proj", "v_proj", "o_proj", "up_proj", "down_proj", "gate_proj"];

/// Parses `...layers.{l}...{module_type}.lora_{A|B}.weight`.
pub fn classify_module(tensor_name: &str) -> Result<(usize, String, Factor)> {
    let unclassifiable = || FuseError::Unclassifiable(tensor_name.to_string());
    let (stem, factor) = if let Some(s) = tensor_name.strip_suffix("lora_A.weight") {
        (s, Factor::A)
    } else if let Some(s) = tensor_name.strip_suffix("lora_B.weight") {
        (s, Factor::B)
    } else {
        return Err(unclassifiable());
    };
    let parts: Vec<&str> = stem.split('.').filter(|p| !p.is_empty()).collect();
    let module_type = parts.last().ok_or_else(unclassifiable)?.to_string();
    let layer = parts
        .windows(2)
        .find(|w| w[0] == "layers")
        .and_then(|w| w[1].parse::<usize>().ok())
        .ok_or_else(unclassifiable)?;
    if parts.len() < 3 {
        return Err(unclassifiable());
    }
    Ok((layer, module_type, factor))
}

/// Known module tokens plus an alias table mapping foreign tokens onto them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub canonical: BTreeSet<String>,
    pub aliases: BTreeMap<String, String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            canonical: DEFAULT_MODULE_TYPES.iter().map(|s| s.to_string()).collect(),
            aliases: BTreeMap::new(),
        }
    }
}

impl Vocabulary {
    pub fn with_aliases(aliases: BTreeMap<String, String>) -> Self {
        let mut v = Vocabulary::default();
        for target in aliases.values() {
            v.canonical.insert(target.clone());
        }
        v.aliases = aliases;
        v
    }

    /// Canonical token, or `None` for types outside the vocabulary.
    pub fn canonical<'a>(&'a self, token: &'a str) -> Option<&'a str> {
        if let Some(c) = self.aliases.get(token) {
            return Some(c.as_str());
        }
        self.canonical.get(token).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FamilySpec {
    pub family_id: String,
    pub layer_count: usize,
    pub module_vocabulary: BTreeSet<String>,
}

impl FamilySpec {
    pub fn of(set: &AdapterSet) -> Self {
        FamilySpec {
            family_id: set.family_id.clone(),
            layer_count: set.layer_count,
            module_vocabulary: set.module_types(),
        }
    }
}

/// Tail alignment: `clamp(l + (L_s - L_t), 0, L_s - 1)`.
pub fn map_layer(target_layers: usize, source_layers: usize, layer: usize) -> Result<usize> {
    if layer >= target_layers {
        return Err(FuseError::LayerOutOfRange {
            layer,
            depth: target_layers,
        });
    }
    if source_layers == 0 {
        return Err(FuseError::Invalid("source depth must be at least 1".into()));
    }
    let shifted = layer as i64 + source_layers as i64 - target_layers as i64;
    Ok(shifted.clamp(0, source_layers as i64 - 1) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pub source_index: usize,
    pub source_layers: usize,
    /// `table[l]` is the source layer for target layer `l`.
    pub table: Vec<usize>,
}

impl LayerMap {
    pub fn tail_aligned(source_index: usize, target_layers: usize, source_layers: usize) -> Result<Self> {
        let table = (0..target_layers)
            .map(|l| map_layer(target_layers, source_layers, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerMap {
            source_index,
            source_layers,
            table,
        })
    }

    pub fn map(&self, layer: usize) -> Option<usize> {
        self.table.get(layer).copied()
    }
}

pub fn layer_maps(target: &AdapterSet, sources: &[AdapterSet]) -> Result<Vec<LayerMap>> {
    sources
        .iter()
        .enumerate()
        .map(|(k, s)| LayerMap::tail_aligned(k, target.layer_count, s.layer_count))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TransferGroup {
    pub id: usize,
    pub module_type: String,
    pub rank: usize,
    pub alpha_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferUnit {
    pub group: TransferGroup,
    pub target_layer: usize,
    pub target_pair: LoraPair,
    /// `(source index k, pair at layer pi_k(l))`, ascending in `k`.
    pub source_pairs: Vec<(usize, LoraPair)>,
}

fn group_keys(set: &AdapterSet, vocab: &Vocabulary) -> BTreeSet<(String, usize)> {
    set.pairs
        .keys()
        .filter_map(|k| vocab.canonical(&k.module_type).map(|c| (c.to_string(), k.rank)))
        .collect()
}

/// One group per `(module_type, rank)` present in the target and at least one
/// source, ordered by module type then rank.
pub fn build_groups(target: &AdapterSet, sources: &[AdapterSet], vocab: &Vocabulary) -> Vec<TransferGroup> {
    let in_sources: BTreeSet<(String, usize)> = sources.iter().flat_map(|s| group_keys(s, vocab)).collect();
    group_keys(target, vocab)
        .into_iter()
        .filter(|k| in_sources.contains(k))
        .enumerate()
        .map(|(id, (module_type, rank))| TransferGroup {
            id,
            module_type,
            rank,
            alpha_index: id,
        })
        .collect()
}

type CanonIndex<'a> = BTreeMap<(usize, String, usize), &'a LoraPair>;

fn canonical_index<'a>(set: &'a AdapterSet, vocab: &Vocabulary) -> CanonIndex<'a> {
    set.pairs
        .iter()
        .filter_map(|(k, p)| {
            vocab
                .canonical(&k.module_type)
                .map(|c| ((k.layer, c.to_string(), k.rank), p))
        })
        .collect()
}

pub fn select_active_units(
    groups: &[TransferGroup],
    target: &AdapterSet,
    sources: &[AdapterSet],
    maps: &[LayerMap],
    vocab: &Vocabulary,
) -> Result<Vec<TransferUnit>> {
    if maps.len() != sources.len() {
        return Err(FuseError::Invalid(format!(
            "{} layer maps for {} sources",
            maps.len(),
            sources.len()
        )));
    }
    let target_index = canonical_index(target, vocab);
    let source_indices: Vec<CanonIndex<'_>> = sources.iter().map(|s| canonical_index(s, vocab)).collect();

    let mut units = Vec::new();
    for group in groups {
        for ((layer, ty, rank), target_pair) in &target_index {
            if *ty != group.module_type || *rank != group.rank {
                continue;
            }
            let mut source_pairs = Vec::new();
            for (k, index) in source_indices.iter().enumerate() {
                let Some(src_layer) = maps[k].map(*layer) else {
                    continue;
                };
                if let Some(p) = index.get(&(src_layer, ty.clone(), *rank)) {
                    source_pairs.push((k, (*p).clone()));
                }
            }
            if source_pairs.is_empty() {
                continue;
            }
            units.push(TransferUnit {
                group: group.clone(),
                target_layer: *layer,
                target_pair: (*target_pair).clone(),
                source_pairs,
            });
        }
    }
    Ok(units)
}

/// Presence matrix for reporting: one row per `(module_type, rank)` found in
/// any set, with target presence and per-source presence.
pub fn group_matrix(
    target: &AdapterSet,
    sources: &[AdapterSet],
    vocab: &Vocabulary,
) -> Vec<((String, usize), bool, Vec<bool>)> {
    let target_keys = group_keys(target, vocab);
    let source_keys: Vec<_> = sources.iter().map(|s| group_keys(s, vocab)).collect();
    let mut all: BTreeSet<(String, usize)> = target_keys.clone();
    for s in &source_keys {
        all.extend(s.iter().cloned());
    }
    all.into_iter()
        .map(|k| {
            let t = target_keys.contains(&k);
            let s = source_keys.iter().map(|sk| sk.contains(&k)).collect();
            (k, t, s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::ModuleKey;
    use ndarray::Array2;

    fn set_with(family: &str, layers: usize, entries: &[(usize, &str, usize)]) -> AdapterSet {
        let mut s = AdapterSet::new(family, layers);
        for &(l, ty, r) in entries {
            let pair = LoraPair::new(ModuleKey::new(l, ty, r), Array2::zeros((r, 4)), Array2::zeros((4, r))).unwrap();
            s.insert(pair);
        }
        s
    }

    #[test]
    fn classify_examples() {
        assert_eq!(
            classify_module("base_model.model.layers.5.self_attn.q_proj.lora_A.weight").unwrap(),
            (5, "q_proj".to_string(), Factor::A)
        );
        assert_eq!(
            classify_module("base_model.model.layers.2.mlp.down_proj.lora_B.weight").unwrap(),
            (2, "down_proj".to_string(), Factor::B)
        );
        let err = classify_module("embed_tokens.weight").unwrap_err();
        assert!(err.to_string().contains("unclassifiable"));
        assert!(classify_module("model.mlp.up_proj.lora_A.weight").is_err());
    }

    #[test]
    fn map_layer_examples() {
        assert_eq!(map_layer(4, 6, 0).unwrap(), 2);
        assert_eq!(map_layer(4, 6, 3).unwrap(), 5);
        assert_eq!(map_layer(32, 32, 17).unwrap(), 17);
        assert_eq!(map_layer(4, 3, 0).unwrap(), 0);
        assert!(matches!(map_layer(4, 6, 4), Err(FuseError::LayerOutOfRange { .. })));
    }

    #[test]
    fn group_examples() {
        let vocab = Vocabulary::default();
        let t = set_with("t", 1, &[(0, "q_proj", 8)]);
        let s = set_with("s", 1, &[(0, "q_proj", 8), (0, "up_proj", 8)]);
        let g = build_groups(&t, &[s], &vocab);
        assert_eq!(g.len(), 1);
        assert_eq!((g[0].module_type.as_str(), g[0].rank), ("q_proj", 8));

        let s16 = set_with("s", 1, &[(0, "q_proj", 16)]);
        assert!(build_groups(&t, &[s16], &vocab).is_empty());
    }

    #[test]
    fn unknown_types_never_group() {
        let vocab = Vocabulary::default();
        let t = set_with("t", 1, &[(0, "c_attn", 8)]);
        let s = set_with("s", 1, &[(0, "c_attn", 8)]);
        assert!(build_groups(&t, std::slice::from_ref(&s), &vocab).is_empty());

        let aliased = Vocabulary::with_aliases([("c_attn".to_string(), "q_proj".to_string())].into());
        let s2 = set_with("s", 1, &[(0, "q_proj", 8)]);
        let g = build_groups(&t, &[s2], &aliased);
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].module_type, "q_proj");
    }

    #[test]
    fn unit_examples() {
        let vocab = Vocabulary::default();
        let t = set_with("t", 2, &[(0, "q_proj", 8), (1, "q_proj", 8)]);
        let s0 = set_with("a", 3, &[(1, "q_proj", 8), (2, "q_proj", 8)]);
        let s1 = set_with("b", 2, &[(0, "q_proj", 8), (1, "q_proj", 8)]);
        let sources = vec![s0, s1];
        let groups = build_groups(&t, &sources, &vocab);
        let maps = layer_maps(&t, &sources).unwrap();
        let units = select_active_units(&groups, &t, &sources, &maps, &vocab).unwrap();
        assert_eq!(units.len(), 2);
        assert!(units.iter().all(|u| u.source_pairs.len() == 2));
        assert_eq!(units[1].source_pairs[0].1.key.layer, 2);

        // source 1 loses its layer-1 module: unit 1 keeps only source 0
        let s1b = set_with("b", 2, &[(0, "q_proj", 8)]);
        let sources = vec![sources[0].clone(), s1b];
        let units = select_active_units(&groups, &t, &sources, &maps, &vocab).unwrap();
        assert_eq!(units[1].source_pairs.len(), 1);
        assert_eq!(units[1].source_pairs[0].0, 0);

        // nobody has layer 1 anymore: unit dropped
        let s0c = set_with("a", 3, &[(1, "q_proj", 8)]);
        let sources = vec![s0c, set_with("b", 2, &[(0, "q_proj", 8)])];
        let units = select_active_units(&groups, &t, &sources, &maps, &vocab).unwrap();
        assert_eq!(units.len(), 1);
        assert_eq!(units[0].target_layer, 0);
    }
}
