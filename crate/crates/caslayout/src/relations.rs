//! Dense pairwise relation extraction: direction, distance, 2D alignment,
//! symmetry between furniture items, and distance relations between
//! furniture and architectural elements.
//!
//! All relations are computed in the local coordinate frame of the reference
//! box, so the extracted graph is invariant under global rigid motions of
//! the scene (exactly so for quarter-turn rotations).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{footprint_contains, min_distance_obb, min_distance_obb_segment, norm, sub, Obb, Segment2D};
use crate::scene::{ArchKind, ElementClass, Scene, SceneElement};

/// Band edge between `attach_to` and `adjacent`, meters.
pub const ATTACH_MAX: f64 = 0.2;
/// Band edge between `adjacent` and `distant`, meters.
pub const ADJACENT_MAX: f64 = 1.5;
/// Positional tolerance for center/edge alignment and symmetry gates, meters.
pub const EPS_ALIGN: f64 = 0.05;
/// Angular tolerance for edge alignment and symmetry, degrees.
pub const EPS_ANGLE_DEG: f64 = 5.0;
/// Feature-embedding tolerance for the symmetry gate.
pub const EPS_FEAT: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error("edge references unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Front,
    Behind,
    Under,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBand {
    AttachTo,
    Adjacent,
    Distant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    EdgeAlign,
    XCenterAlign,
    YCenterAlign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationCategory {
    Direction,
    Distance,
    Alignment,
    Symmetry,
    ArchDistance,
}

impl RelationCategory {
    pub const ALL: [RelationCategory; 5] = [
        RelationCategory::Direction,
        RelationCategory::Distance,
        RelationCategory::Alignment,
        RelationCategory::Symmetry,
        RelationCategory::ArchDistance,
    ];

    /// Number of subcategories (None excluded).
    pub fn subcategory_count(self) -> usize {
        match self {
            RelationCategory::Direction => 6,
            RelationCategory::Distance => 3,
            RelationCategory::Alignment => 3,
            RelationCategory::Symmetry => 1,
            RelationCategory::ArchDistance => 3,
        }
    }
}

/// A labeled relation: category plus subcategory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RelationLabel {
    Direction(Direction),
    Distance(DistanceBand),
    Alignment(Alignment),
    Symmetry,
    ArchDistance(DistanceBand),
}

impl RelationLabel {
    pub fn category(&self) -> RelationCategory {
        match self {
            RelationLabel::Direction(_) => RelationCategory::Direction,
            RelationLabel::Distance(_) => RelationCategory::Distance,
            RelationLabel::Alignment(_) => RelationCategory::Alignment,
            RelationLabel::Symmetry => RelationCategory::Symmetry,
            RelationLabel::ArchDistance(_) => RelationCategory::ArchDistance,
        }
    }

    /// Subcategory index within the category (None excluded).
    pub fn subcategory_index(&self) -> usize {
        match self {
            RelationLabel::Direction(d) => *d as usize,
            RelationLabel::Distance(b) | RelationLabel::ArchDistance(b) => *b as usize,
            RelationLabel::Alignment(a) => *a as usize,
            RelationLabel::Symmetry => 0,
        }
    }

    pub fn from_indices(category: RelationCategory, sub: usize) -> Option<RelationLabel> {
        match category {
            RelationCategory::Direction => {
                use Direction::*;
                [Left, Right, Front, Behind, Under, Above].get(sub).map(|d| RelationLabel::Direction(*d))
            }
            RelationCategory::Distance => {
                use DistanceBand::*;
                [AttachTo, Adjacent, Distant].get(sub).map(|b| RelationLabel::Distance(*b))
            }
            RelationCategory::Alignment => {
                use Alignment::*;
                [EdgeAlign, XCenterAlign, YCenterAlign].get(sub).map(|a| RelationLabel::Alignment(*a))
            }
            RelationCategory::Symmetry => (sub == 0).then_some(RelationLabel::Symmetry),
            RelationCategory::ArchDistance => {
                use DistanceBand::*;
                [AttachTo, Adjacent, Distant].get(sub).map(|b| RelationLabel::ArchDistance(*b))
            }
        }
    }

    pub fn subcategory_name(&self) -> &'static str {
        match self {
            RelationLabel::Direction(Direction::Left) => "left",
            RelationLabel::Direction(Direction::Right) => "right",
            RelationLabel::Direction(Direction::Front) => "front",
            RelationLabel::Direction(Direction::Behind) => "behind",
            RelationLabel::Direction(Direction::Under) => "under",
            RelationLabel::Direction(Direction::Above) => "above",
            RelationLabel::Distance(b) | RelationLabel::ArchDistance(b) => match b {
                DistanceBand::AttachTo => "attach_to",
                DistanceBand::Adjacent => "adjacent",
                DistanceBand::Distant => "distant",
            },
            RelationLabel::Alignment(Alignment::EdgeAlign) => "edge_align",
            RelationLabel::Alignment(Alignment::XCenterAlign) => "x_center_align",
            RelationLabel::Alignment(Alignment::YCenterAlign) => "y_center_align",
            RelationLabel::Symmetry => "symmetric",
        }
    }
}

pub fn category_name(c: RelationCategory) -> &'static str {
    match c {
        RelationCategory::Direction => "direction",
        RelationCategory::Distance => "distance",
        RelationCategory::Alignment => "alignment",
        RelationCategory::Symmetry => "symmetry",
        RelationCategory::ArchDistance => "arch_distance",
    }
}

pub fn category_from_name(s: &str) -> Option<RelationCategory> {
    match s {
        "direction" => Some(RelationCategory::Direction),
        "distance" => Some(RelationCategory::Distance),
        "alignment" => Some(RelationCategory::Alignment),
        "symmetry" => Some(RelationCategory::Symmetry),
        "arch_distance" => Some(RelationCategory::ArchDistance),
        _ => None,
    }
}

fn label_from_names(category: &str, sub: &str) -> Option<RelationLabel> {
    let cat = category_from_name(category)?;
    for i in 0..cat.subcategory_count() {
        let label = RelationLabel::from_indices(cat, i)?;
        if label.subcategory_name() == sub {
            return Some(label);
        }
    }
    None
}

/// Directed relation edge; `dst` owns the reference frame.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RelationEdge {
    pub src: String,
    pub dst: String,
    pub label: RelationLabel,
}

/// Directed relation graph with canonical ordering: nodes sorted by id,
/// edges sorted by (src, dst, category).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelationGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<RelationEdge>,
}

impl RelationGraph {
    pub fn new(mut nodes: Vec<String>, mut edges: Vec<RelationEdge>) -> Self {
        nodes.sort();
        edges.sort_by(|a, b| {
            (&a.src, &a.dst, a.label.category(), a.label)
                .cmp(&(&b.src, &b.dst, b.label.category(), b.label))
        });
        RelationGraph { nodes, edges }
    }

    pub fn contains(&self, src: &str, dst: &str, label: RelationLabel) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst && e.label == label)
    }

    pub fn edges_of_category(&self, category: RelationCategory) -> impl Iterator<Item = &RelationEdge> {
        self.edges.iter().filter(move |e| e.label.category() == category)
    }

    pub fn validate_nodes(&self) -> Result<(), RelationError> {
        for e in &self.edges {
            if !self.nodes.iter().any(|n| n == &e.src) {
                return Err(RelationError::UnknownNode(e.src.clone()));
            }
            if !self.nodes.iter().any(|n| n == &e.dst) {
                return Err(RelationError::UnknownNode(e.dst.clone()));
            }
        }
        Ok(())
    }
}

// --- JSON form ---------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<String>,
    edges: Vec<EdgeFile>,
}

#[derive(Serialize, Deserialize)]
struct EdgeFile {
    src: String,
    dst: String,
    category: String,
    subcategory: String,
}

pub fn graph_to_json(g: &RelationGraph) -> Vec<u8> {
    let file = GraphFile {
        nodes: g.nodes.clone(),
        edges: g
            .edges
            .iter()
            .map(|e| EdgeFile {
                src: e.src.clone(),
                dst: e.dst.clone(),
                category: category_name(e.label.category()).to_string(),
                subcategory: e.label.subcategory_name().to_string(),
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("graph serialization");
    out.push(b'\n');
    out
}

pub fn graph_from_json(bytes: &[u8]) -> Result<RelationGraph, String> {
    let file: GraphFile = serde_json::from_slice(bytes).map_err(|e| e.to_string())?;
    let mut edges = Vec::with_capacity(file.edges.len());
    for e in &file.edges {
        let label = label_from_names(&e.category, &e.subcategory)
            .ok_or_else(|| format!("unknown relation {}/{}", e.category, e.subcategory))?;
        edges.push(RelationEdge { src: e.src.clone(), dst: e.dst.clone(), label });
    }
    let g = RelationGraph::new(file.nodes, edges);
    g.validate_nodes().map_err(|e| e.to_string())?;
    Ok(g)
}

// --- Classifiers -------------------------------------------------------------

const TAN60: f64 = 1.732050807568877293527446341505872367_f64;

/// Direction of `a` relative to `b`, computed in `b`'s local frame.
///
/// If `a`'s center lies over `b`'s footprint the label is `under`/`above` by
/// z-center comparison (ties yield None). Otherwise the plane splits into a
/// 120° front wedge, a 120° behind wedge and 60° left/right wedges, bounded
/// by rays leaving the front/back edge endpoints at 60° from the edge
/// normal; wedge boundaries belong to front/behind.
pub fn classify_direction(a: &Obb, b: &Obb) -> Option<Direction> {
    let p = a.center_xy();
    if footprint_contains(b, p) {
        let za = a.translation[2];
        let zb = b.translation[2];
        return if za > zb {
            Some(Direction::Above)
        } else if za < zb {
            Some(Direction::Under)
        } else {
            None
        };
    }
    let [lx, ly] = b.to_local(p);
    let hx = b.size[0] / 2.0;
    let hy = b.size[1] / 2.0;
    if ly >= hy && lx.abs() <= hx + (ly - hy) * TAN60 {
        Some(Direction::Front)
    } else if ly <= -hy && lx.abs() <= hx + (-hy - ly) * TAN60 {
        Some(Direction::Behind)
    } else if lx > 0.0 {
        // local +x is "left"
        Some(Direction::Left)
    } else {
        Some(Direction::Right)
    }
}

/// Distance band from the minimum distance between the two solids.
pub fn classify_distance(a: &Obb, b: &Obb) -> DistanceBand {
    band_of(min_distance_obb(a, b))
}

pub fn band_of(d: f64) -> DistanceBand {
    if d < ATTACH_MAX {
        DistanceBand::AttachTo
    } else if d < ADJACENT_MAX {
        DistanceBand::Adjacent
    } else {
        DistanceBand::Distant
    }
}

/// Alignment labels of `a` relative to `b` under the top-down view.
/// May hold several labels at once; returned in enum order.
pub fn classify_alignment(a: &Obb, b: &Obb) -> Vec<Alignment> {
    let [lx, ly] = b.to_local(a.center_xy());
    let mut out = Vec::new();
    if edge_aligned(a, b) {
        out.push(Alignment::EdgeAlign);
    }
    if lx.abs() <= EPS_ALIGN {
        out.push(Alignment::XCenterAlign);
    }
    if ly.abs() <= EPS_ALIGN {
        out.push(Alignment::YCenterAlign);
    }
    out
}

/// Highest-priority alignment label for graph emission: center alignments
/// over edge alignment, x before y.
pub fn alignment_edge_label(set: &[Alignment]) -> Option<Alignment> {
    for want in [Alignment::XCenterAlign, Alignment::YCenterAlign, Alignment::EdgeAlign] {
        if set.contains(&want) {
            return Some(want);
        }
    }
    None
}

fn edge_aligned(a: &Obb, b: &Obb) -> bool {
    let eps_sin = (EPS_ANGLE_DEG.to_radians()).sin();
    let fa = a.footprint();
    let fb = b.footprint();
    for i in 0..4 {
        let a0 = fa[i];
        let a1 = fa[(i + 1) % 4];
        let ea = sub(a1, a0);
        let la = norm(ea);
        let ua = [ea[0] / la, ea[1] / la];
        for j in 0..4 {
            let b0 = fb[j];
            let b1 = fb[(j + 1) % 4];
            let eb = sub(b1, b0);
            let lb = norm(eb);
            let ub = [eb[0] / lb, eb[1] / lb];
            // undirected lines: parallel or antiparallel within the tolerance
            let sin_angle = (ua[0] * ub[1] - ua[1] * ub[0]).abs();
            if sin_angle > eps_sin {
                continue;
            }
            // offset of a's edge midpoint from b's edge line
            let nb = [-ub[1], ub[0]];
            let mid = [(a0[0] + a1[0]) / 2.0, (a0[1] + a1[1]) / 2.0];
            let offset = (nb[0] * (mid[0] - b0[0]) + nb[1] * (mid[1] - b0[1])).abs();
            if offset <= EPS_ALIGN {
                return true;
            }
        }
    }
    false
}

/// Mirror symmetry between two furniture items: same class, size, feature
/// and height, with front axes mirrored about the perpendicular bisector of
/// the segment joining the two centers.
pub fn classify_symmetry(a: &SceneElement, b: &SceneElement) -> bool {
    let (la, lb) = match (a.class, b.class) {
        (ElementClass::Furniture(x), ElementClass::Furniture(y)) => (x, y),
        _ => return false,
    };
    if la != lb {
        return false;
    }
    for k in 0..3 {
        if (a.obb.size[k] - b.obb.size[k]).abs() > EPS_ALIGN {
            return false;
        }
    }
    if a.feature.iter().zip(&b.feature).any(|(x, y)| (x - y).abs() > EPS_FEAT) {
        return false;
    }
    if (a.obb.translation[2] - b.obb.translation[2]).abs() > EPS_ALIGN {
        return false;
    }
    let ca = a.obb.center_xy();
    let cb = b.obb.center_xy();
    let axis = sub(cb, ca);
    let len = norm(axis);
    if len < 1e-12 {
        return false;
    }
    let m = [axis[0] / len, axis[1] / len];
    let (_, ya) = a.obb.local_frame();
    let (_, yb) = b.obb.local_frame();
    // reflect a's front axis across the bisector line (normal m)
    let d = 2.0 * (ya[0] * m[0] + ya[1] * m[1]);
    let reflected = [ya[0] - d * m[0], ya[1] - d * m[1]];
    let cos_angle = (reflected[0] * yb[0] + reflected[1] * yb[1]).clamp(-1.0, 1.0);
    cos_angle >= (EPS_ANGLE_DEG.to_radians()).cos()
}

/// Midline segment of an architectural element, normal pointing along the
/// element's local front axis (toward the room interior).
pub fn segment_of_arch(e: &SceneElement) -> Segment2D {
    let (xh, yh) = e.obb.local_frame();
    let h = e.obb.size[0] / 2.0;
    let c = e.obb.center_xy();
    Segment2D {
        a: [c[0] - h * xh[0], c[1] - h * xh[1]],
        b: [c[0] + h * xh[0], c[1] + h * xh[1]],
        normal: yh,
    }
}

/// Furniture-to-architecture distance edges: one edge to the nearest wall,
/// one edge to every door and window. Scenes without architectural elements
/// yield no edges.
pub fn arch_distances(scene: &Scene) -> Vec<RelationEdge> {
    let mut edges = Vec::new();
    for (_, f) in scene.furniture() {
        let mut nearest_wall: Option<(f64, &SceneElement)> = None;
        for (_, arch) in scene.arch() {
            let seg = segment_of_arch(arch);
            let d = min_distance_obb_segment(&f.obb, &seg);
            match arch.class {
                ElementClass::Arch(ArchKind::Wall) => {
                    let better = match nearest_wall {
                        Some((best, _)) => d < best,
                        None => true,
                    };
                    if better {
                        nearest_wall = Some((d, arch));
                    }
                }
                ElementClass::Arch(_) => {
                    edges.push(RelationEdge {
                        src: f.id.clone(),
                        dst: arch.id.clone(),
                        label: RelationLabel::ArchDistance(band_of(d)),
                    });
                }
                _ => unreachable!(),
            }
        }
        if let Some((d, wall)) = nearest_wall {
            edges.push(RelationEdge {
                src: f.id.clone(),
                dst: wall.id.clone(),
                label: RelationLabel::ArchDistance(band_of(d)),
            });
        }
    }
    edges
}

/// Full dense extraction: for every ordered furniture pair a direction edge
/// (when defined), a distance edge and at most one alignment edge; one
/// symmetry edge per unordered pair in canonical id order; plus all
/// architecture distance edges.
pub fn extract_dense(scene: &Scene) -> RelationGraph {
    let furniture: Vec<&SceneElement> = scene.furniture().map(|(_, e)| e).collect();
    let mut edges = Vec::new();
    for a in &furniture {
        for b in &furniture {
            if a.id == b.id {
                continue;
            }
            if let Some(dir) = classify_direction(&a.obb, &b.obb) {
                edges.push(RelationEdge { src: a.id.clone(), dst: b.id.clone(), label: RelationLabel::Direction(dir) });
            }
            edges.push(RelationEdge {
                src: a.id.clone(),
                dst: b.id.clone(),
                label: RelationLabel::Distance(classify_distance(&a.obb, &b.obb)),
            });
            if let Some(al) = alignment_edge_label(&classify_alignment(&a.obb, &b.obb)) {
                edges.push(RelationEdge { src: a.id.clone(), dst: b.id.clone(), label: RelationLabel::Alignment(al) });
            }
        }
    }
    for i in 0..furniture.len() {
        for j in (i + 1)..furniture.len() {
            let (a, b) = (furniture[i], furniture[j]);
            if classify_symmetry(a, b) {
                let (src, dst) = if a.id <= b.id { (&a.id, &b.id) } else { (&b.id, &a.id) };
                edges.push(RelationEdge { src: src.clone(), dst: dst.clone(), label: RelationLabel::Symmetry });
            }
        }
    }
    edges.extend(arch_distances(scene));
    let nodes = scene.occupied().map(|(_, e)| e.id.clone()).collect();
    RelationGraph::new(nodes, edges)
}
