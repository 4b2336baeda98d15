//! Functional-zone grouping, anchor selection, graph sparsification and
//! relation entropy measurement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relations::{Alignment, RelationCategory, RelationGraph, RelationLabel};
use crate::scene::{Scene, Vocabulary};

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("vocabulary label `{0}` has no zone assignment")]
    UnmappedLabel(String),
    #[error("anchor candidate `{0}` is not a member of zone {1:?}")]
    BadAnchorCandidate(String, ZoneType),
    #[error("graph node `{0}` has no zone assignment")]
    NodeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZoneType {
    Lounging,
    Dining,
    Bedding,
    Lighting,
    Other,
}

impl ZoneType {
    pub fn has_anchor(self) -> bool {
        matches!(self, ZoneType::Lounging | ZoneType::Dining | ZoneType::Bedding)
    }
}

/// Label-to-zone mapping plus per-zone anchor candidate lists, ordered by
/// priority. `k` caps how many candidate labels may anchor one zone type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZoneTable {
    pub zones: BTreeMap<String, ZoneType>,
    pub anchor_candidates: BTreeMap<ZoneType, Vec<String>>,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    1
}

impl ZoneTable {
    pub fn living_room() -> Self {
        let mut zones = BTreeMap::new();
        for label in [
            "armchair",
            "chaise_longue_sofa",
            "chinese_chair",
            "coffee_table",
            "console_table",
            "corner_side_table",
            "desk",
            "l_shaped_sofa",
            "lazy_sofa",
            "lounge_chair",
            "loveseat_sofa",
            "multi_seat_sofa",
            "round_end_table",
            "stool",
            "tv_stand",
        ] {
            zones.insert(label.to_string(), ZoneType::Lounging);
        }
        for label in ["dining_chair", "dining_table"] {
            zones.insert(label.to_string(), ZoneType::Dining);
        }
        for label in ["ceiling_lamp", "pendant_lamp"] {
            zones.insert(label.to_string(), ZoneType::Lighting);
        }
        for label in ["bookshelf", "cabinet", "shelf", "wardrobe", "wine_cabinet"] {
            zones.insert(label.to_string(), ZoneType::Other);
        }
        let mut anchor_candidates = BTreeMap::new();
        anchor_candidates.insert(
            ZoneType::Lounging,
            ["multi_seat_sofa", "l_shaped_sofa", "loveseat_sofa", "chaise_longue_sofa", "lazy_sofa", "tv_stand", "coffee_table"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        anchor_candidates.insert(ZoneType::Dining, vec!["dining_table".to_string()]);
        ZoneTable { zones, anchor_candidates, k: 1 }
    }

    pub fn bedroom() -> Self {
        let mut zones = BTreeMap::new();
        for label in ["double_bed", "single_bed", "kids_bed", "nightstand", "dressing_table", "dressing_chair"] {
            zones.insert(label.to_string(), ZoneType::Bedding);
        }
        for label in ["desk", "chair", "tv_stand"] {
            zones.insert(label.to_string(), ZoneType::Lounging);
        }
        for label in ["pendant_lamp", "ceiling_lamp"] {
            zones.insert(label.to_string(), ZoneType::Lighting);
        }
        for label in ["wardrobe", "cabinet", "shelf", "bookshelf"] {
            zones.insert(label.to_string(), ZoneType::Other);
        }
        let mut anchor_candidates = BTreeMap::new();
        anchor_candidates.insert(
            ZoneType::Bedding,
            ["double_bed", "single_bed", "kids_bed"].iter().map(|s| s.to_string()).collect(),
        );
        anchor_candidates.insert(ZoneType::Lounging, vec!["desk".to_string()]);
        ZoneTable { zones, anchor_candidates, k: 1 }
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), SparseError> {
        for label in vocab.labels() {
            if !self.zones.contains_key(label) {
                return Err(SparseError::UnmappedLabel(label.clone()));
            }
        }
        for (zone, candidates) in &self.anchor_candidates {
            for c in candidates {
                if self.zones.get(c) != Some(zone) {
                    return Err(SparseError::BadAnchorCandidate(c.clone(), *zone));
                }
            }
        }
        Ok(())
    }

    pub fn zone_of(&self, label: &str) -> Option<ZoneType> {
        self.zones.get(label).copied()
    }
}

/// One functional zone cluster within a scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Zone {
    pub zone_type: ZoneType,
    pub members: Vec<String>,
    pub anchor: Option<String>,
}

/// Group furniture into zone clusters. Within a zone type the first `k`
/// anchor-candidate labels present become anchor labels; each anchor item
/// seeds a cluster and the remaining members attach to the nearest anchor by
/// xy center distance. Lighting and other zones never receive anchors.
pub fn assign_zones(scene: &Scene, table: &ZoneTable) -> Result<Vec<Zone>, SparseError> {
    table.validate(&scene.vocab)?;
    let mut by_type: BTreeMap<ZoneType, Vec<(usize, String, String)>> = BTreeMap::new();
    for (slot, e) in scene.furniture() {
        let label = match e.class {
            crate::scene::ElementClass::Furniture(i) => scene.vocab.label(i).to_string(),
            _ => unreachable!(),
        };
        let zone = table.zone_of(&label).ok_or_else(|| SparseError::UnmappedLabel(label.clone()))?;
        by_type.entry(zone).or_default().push((slot, e.id.clone(), label));
    }
    let mut out = Vec::new();
    for (zone_type, members) in by_type {
        if !zone_type.has_anchor() {
            out.push(Zone {
                zone_type,
                members: members.iter().map(|(_, id, _)| id.clone()).collect(),
                anchor: None,
            });
            continue;
        }
        let empty = Vec::new();
        let candidates = table.anchor_candidates.get(&zone_type).unwrap_or(&empty);
        let mut anchor_labels: Vec<&String> = Vec::new();
        for c in candidates {
            if anchor_labels.len() >= table.k {
                break;
            }
            if members.iter().any(|(_, _, l)| l == c) {
                anchor_labels.push(c);
            }
        }
        let anchors: Vec<&(usize, String, String)> =
            members.iter().filter(|(_, _, l)| anchor_labels.iter().any(|a| *a == l)).collect();
        if anchors.is_empty() {
            out.push(Zone {
                zone_type,
                members: members.iter().map(|(_, id, _)| id.clone()).collect(),
                anchor: None,
            });
            continue;
        }
        let mut clusters: Vec<Zone> = anchors
            .iter()
            .map(|(_, id, _)| Zone { zone_type, members: vec![id.clone()], anchor: Some(id.clone()) })
            .collect();
        for (slot, id, label) in &members {
            if anchor_labels.iter().any(|a| *a == label) {
                continue;
            }
            let p = scene.elements[*slot].obb.center_xy();
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (ci, (aslot, _, _)) in anchors.iter().enumerate() {
                let q = scene.elements[*aslot].obb.center_xy();
                let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            clusters[best].members.push(id.clone());
        }
        out.extend(clusters);
    }
    Ok(out)
}

struct ZoneLookup<'a> {
    cluster: BTreeMap<&'a str, usize>,
    zones: &'a [Zone],
}

impl<'a> ZoneLookup<'a> {
    fn new(zones: &'a [Zone]) -> Self {
        let mut cluster = BTreeMap::new();
        for (i, z) in zones.iter().enumerate() {
            for m in &z.members {
                cluster.insert(m.as_str(), i);
            }
        }
        ZoneLookup { cluster, zones }
    }

    fn cluster_of(&self, id: &str) -> Option<usize> {
        self.cluster.get(id).copied()
    }

    fn is_anchor(&self, id: &str) -> bool {
        self.cluster_of(id)
            .map(|c| self.zones[c].anchor.as_deref() == Some(id))
            .unwrap_or(false)
    }

    fn zone_type_of(&self, id: &str) -> Option<ZoneType> {
        self.cluster_of(id).map(|c| self.zones[c].zone_type)
    }
}

/// Prune a dense graph to its functional structure:
/// keep furniture–furniture edges within one cluster and between anchors of
/// different clusters; lighting nodes keep center-alignment edges only;
/// `other` nodes keep no furniture–furniture edges; architecture distance
/// edges always survive.
pub fn sparsify(dense: &RelationGraph, zones: &[Zone]) -> Result<RelationGraph, SparseError> {
    let lookup = ZoneLookup::new(zones);
    let mut edges = Vec::new();
    for e in &dense.edges {
        if e.label.category() == RelationCategory::ArchDistance {
            if lookup.cluster_of(&e.src).is_none() {
                return Err(SparseError::NodeMismatch(e.src.clone()));
            }
            edges.push(e.clone());
            continue;
        }
        let (zs, zd) = match (lookup.zone_type_of(&e.src), lookup.zone_type_of(&e.dst)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                let missing = if lookup.zone_type_of(&e.src).is_none() { &e.src } else { &e.dst };
                return Err(SparseError::NodeMismatch(missing.clone()));
            }
        };
        if zs == ZoneType::Other || zd == ZoneType::Other {
            continue;
        }
        if zs == ZoneType::Lighting || zd == ZoneType::Lighting {
            let keep = matches!(
                e.label,
                RelationLabel::Alignment(Alignment::XCenterAlign) | RelationLabel::Alignment(Alignment::YCenterAlign)
            );
            if keep {
                edges.push(e.clone());
            }
            continue;
        }
        let same_cluster = lookup.cluster_of(&e.src) == lookup.cluster_of(&e.dst);
        let anchor_pair = lookup.is_anchor(&e.src) && lookup.is_anchor(&e.dst);
        if same_cluster || anchor_pair {
            edges.push(e.clone());
        }
    }
    Ok(RelationGraph::new(dense.nodes.clone(), edges))
}

/// A relation graph together with the label of each node, the unit of the
/// dataset-level entropy statistic.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub graph: RelationGraph,
    pub labels: BTreeMap<String, String>,
}

impl LabeledGraph {
    pub fn from_scene(scene: &Scene, graph: RelationGraph) -> Self {
        let mut labels = BTreeMap::new();
        for (_, e) in scene.occupied() {
            let label = match e.class {
                crate::scene::ElementClass::Furniture(i) => scene.vocab.label(i).to_string(),
                crate::scene::ElementClass::Arch(k) => k.label().to_string(),
                crate::scene::ElementClass::Empty => continue,
            };
            labels.insert(e.id.clone(), label);
        }
        LabeledGraph { graph, labels }
    }
}

/// Subcategory frequencies for one (src label, dst label) relation pair.
#[derive(Debug, Clone, Serialize)]
pub struct PairFrequencies {
    pub src_label: String,
    pub dst_label: String,
    pub total: u64,
    pub counts: Vec<u64>,
    pub frequencies: Vec<f64>,
    pub entropy: f64,
}

/// Average per-pair subcategory entropy for one relation category.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyReport {
    pub category: RelationCategory,
    /// Number of (src label, dst label) relation pairs observed.
    pub n: usize,
    /// Subcategory count of the category.
    pub m: usize,
    pub pairs: Vec<PairFrequencies>,
    pub entropy: f64,
}

/// Average entropy of subcategory distributions over (src label, dst label)
/// pair keys. Per pair with counts `c_j` summing to `T`, the entropy is
/// computed as `log2(T) - sum(c_j * log2(c_j)) / T`, which returns exact
/// values for single-label and one-observation-per-label distributions.
pub fn relation_entropy(dataset: &[LabeledGraph], category: RelationCategory) -> Result<EntropyReport, SparseError> {
    if dataset.is_empty() {
        return Err(SparseError::EmptyDataset);
    }
    let m = category.subcategory_count();
    let mut counts: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    for item in dataset {
        for e in item.graph.edges_of_category(category) {
            let (Some(sl), Some(dl)) = (item.labels.get(&e.src), item.labels.get(&e.dst)) else {
                return Err(SparseError::NodeMismatch(e.src.clone()));
            };
            let entry = counts.entry((sl.clone(), dl.clone())).or_insert_with(|| vec![0; m]);
            entry[e.label.subcategory_index()] += 1;
        }
    }
    let mut pairs = Vec::new();
    let mut acc = 0.0;
    for ((src_label, dst_label), c) in counts {
        let total: u64 = c.iter().sum();
        let t = total as f64;
        let mut weighted = 0.0;
        for &cj in &c {
            if cj > 0 {
                weighted += cj as f64 * (cj as f64).log2();
            }
        }
        let entropy = t.log2() - weighted / t;
        acc += entropy;
        let frequencies = c.iter().map(|&cj| cj as f64 / t).collect();
        pairs.push(PairFrequencies { src_label, dst_label, total, counts: c, frequencies, entropy });
    }
    let n = pairs.len();
    let entropy = if n == 0 { 0.0 } else { acc / n as f64 };
    Ok(EntropyReport { category, n, m, pairs, entropy })
}
