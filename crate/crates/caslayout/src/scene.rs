//! Scene data model: typed elements over a fixed-length slot list, JSON
//! ingestion and serialization, floor-plan rasterization, per-stage node
//! vector encodings and training augmentations.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rot90, rotate_obb_90, Obb};

/// Feature embedding width for furniture shape codes.
pub const FEATURE_DIM: usize = 64;
/// Relation latent width (per node).
pub const LATENT_DIM: usize = 32;

pub const ARCH_LABELS: [&str; 3] = ["wall", "door", "window"];

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("scene holds {count} elements but n_max is {n_max}")]
    Capacity { count: usize, n_max: usize },
    #[error("floor polygon is degenerate: {0}")]
    DegenerateFloor(String),
    #[error("stage {stage} is missing prior output for field `{field}`")]
    Staging { stage: u8, field: &'static str },
    #[error("invalid scene: {0}")]
    Invalid(String),
}

/// Furniture category list. Labels are dataset configuration; the default is
/// the 24-category living-room vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    pub fn new(labels: Vec<String>) -> Self {
        Vocabulary { labels }
    }

    pub fn living_room() -> Self {
        Vocabulary::new(
            [
                "armchair",
                "bookshelf",
                "cabinet",
                "ceiling_lamp",
                "chaise_longue_sofa",
                "chinese_chair",
                "coffee_table",
                "console_table",
                "corner_side_table",
                "desk",
                "dining_chair",
                "dining_table",
                "l_shaped_sofa",
                "lazy_sofa",
                "lounge_chair",
                "loveseat_sofa",
                "multi_seat_sofa",
                "pendant_lamp",
                "round_end_table",
                "shelf",
                "stool",
                "tv_stand",
                "wardrobe",
                "wine_cabinet",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }

    pub fn bedroom() -> Self {
        Vocabulary::new(
            [
                "double_bed",
                "single_bed",
                "kids_bed",
                "nightstand",
                "wardrobe",
                "dressing_table",
                "dressing_chair",
                "desk",
                "chair",
                "cabinet",
                "shelf",
                "tv_stand",
                "bookshelf",
                "pendant_lamp",
                "ceiling_lamp",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Total class count for one-hot encodings: wall/door/window, every
    /// furniture label, and the trailing None class.
    pub fn class_count(&self) -> usize {
        3 + self.labels.len() + 1
    }

    pub fn none_class(&self) -> usize {
        3 + self.labels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Wall,
    Door,
    Window,
}

impl ArchKind {
    pub fn label(self) -> &'static str {
        match self {
            ArchKind::Wall => "wall",
            ArchKind::Door => "door",
            ArchKind::Window => "window",
        }
    }

    pub fn from_label(label: &str) -> Option<Self> {
        match label {
            "wall" => Some(ArchKind::Wall),
            "door" => Some(ArchKind::Door),
            "window" => Some(ArchKind::Window),
            _ => None,
        }
    }
}

/// Element class: architectural elements carry a fixed label set, furniture
/// labels index into the vocabulary, and `Empty` is the None class used for
/// unoccupied slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementClass {
    Arch(ArchKind),
    Furniture(usize),
    Empty,
}

impl ElementClass {
    /// Index into the one-hot class space (see `Vocabulary::class_count`).
    pub fn index(&self, vocab: &Vocabulary) -> usize {
        match self {
            ElementClass::Arch(ArchKind::Wall) => 0,
            ElementClass::Arch(ArchKind::Door) => 1,
            ElementClass::Arch(ArchKind::Window) => 2,
            ElementClass::Furniture(i) => 3 + i,
            ElementClass::Empty => vocab.none_class(),
        }
    }

    pub fn from_index(index: usize, vocab: &Vocabulary) -> ElementClass {
        match index {
            0 => ElementClass::Arch(ArchKind::Wall),
            1 => ElementClass::Arch(ArchKind::Door),
            2 => ElementClass::Arch(ArchKind::Window),
            i if i < 3 + vocab.len() => ElementClass::Furniture(i - 3),
            _ => ElementClass::Empty,
        }
    }

    pub fn is_arch(&self) -> bool {
        matches!(self, ElementClass::Arch(_))
    }

    pub fn is_furniture(&self) -> bool {
        matches!(self, ElementClass::Furniture(_))
    }
}

/// One slot in the scene's fixed-length element list. `pe` is the slot index
/// within [`Scene::elements`]. `locked` marks the element as conditioned
/// ground truth for completion and editing; it is never serialized.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneElement {
    pub id: String,
    pub class: ElementClass,
    pub obb: Obb,
    pub rotation_deg: f64,
    pub feature: Vec<f64>,
    pub locked: bool,
}

impl SceneElement {
    pub fn empty_slot() -> Self {
        SceneElement {
            id: String::new(),
            class: ElementClass::Empty,
            obb: Obb::zero(),
            rotation_deg: 0.0,
            feature: vec![0.0; FEATURE_DIM],
            locked: false,
        }
    }

    pub fn placed(id: &str, class: ElementClass, size: [f64; 3], translation: [f64; 3], rotation_deg: f64) -> Self {
        let rad = rotation_deg.to_radians();
        SceneElement {
            id: id.to_string(),
            class,
            obb: Obb { size, translation, rotation: [rad.cos(), rad.sin()] },
            rotation_deg,
            feature: vec![0.0; FEATURE_DIM],
            locked: false,
        }
    }

    pub fn with_feature(mut self, feature: Vec<f64>) -> Self {
        assert_eq!(feature.len(), FEATURE_DIM);
        self.feature = feature;
        self
    }
}

/// Binary occupancy grid for the floor plan, centered on the room center.
/// Row-major with row 0 at the minimum y edge.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorGrid {
    pub w: usize,
    pub h: usize,
    pub meters_per_cell: f64,
    pub cells: Vec<u8>,
}

impl FloorGrid {
    pub fn all_ones(w: usize, h: usize, meters_per_cell: f64) -> Self {
        FloorGrid { w, h, meters_per_cell, cells: vec![1; w * h] }
    }

    pub fn get(&self, ix: usize, iy: usize) -> u8 {
        self.cells[iy * self.w + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: u8) {
        self.cells[iy * self.w + ix] = v;
    }

    /// World coordinates of the center of cell (ix, iy) given the grid is
    /// centered on `origin`.
    pub fn cell_center(&self, origin: [f64; 2], ix: usize, iy: usize) -> [f64; 2] {
        [
            origin[0] + (ix as f64 + 0.5 - self.w as f64 / 2.0) * self.meters_per_cell,
            origin[1] + (iy as f64 + 0.5 - self.h as f64 / 2.0) * self.meters_per_cell,
        ]
    }

    /// Grid cell containing a world point, or None when outside the grid.
    pub fn cell_of(&self, origin: [f64; 2], p: [f64; 2]) -> Option<(usize, usize)> {
        let fx = (p[0] - origin[0]) / self.meters_per_cell + self.w as f64 / 2.0;
        let fy = (p[1] - origin[1]) / self.meters_per_cell + self.h as f64 / 2.0;
        if fx < 0.0 || fy < 0.0 {
            return None;
        }
        let (ix, iy) = (fx as usize, fy as usize);
        if ix >= self.w || iy >= self.h {
            return None;
        }
        Some((ix, iy))
    }

    /// Quarter-turn rotation about the grid center. Requires a square grid.
    pub fn rotate90(&self, k: u8) -> FloorGrid {
        assert_eq!(self.w, self.h, "quarter-turn rotation needs a square grid");
        let n = self.w;
        let mut out = self.clone();
        for _ in 0..(k % 4) {
            let prev = out.cells.clone();
            for iy in 0..n {
                for ix in 0..n {
                    // (ix, iy) receives the cell that rotates onto it
                    out.cells[iy * n + ix] = prev[ix * n + (n - 1 - iy)];
                }
            }
        }
        out
    }

    pub fn ones(&self) -> usize {
        self.cells.iter().filter(|&&c| c == 1).count()
    }
}

/// Rasterize a simple polygon: cell = 1 iff the cell center is inside.
/// The grid is `grid × grid` cells centered on the polygon's bounding-box
/// center, which is also the scene's room center.
pub fn rasterize_floor(polygon: &[[f64; 2]], grid: usize, meters_per_cell: f64) -> Result<(FloorGrid, [f64; 2]), SceneError> {
    if polygon.len() < 3 {
        return Err(SceneError::DegenerateFloor(format!("{} vertices", polygon.len())));
    }
    let mut area2 = 0.0;
    for i in 0..polygon.len() {
        let a = polygon[i];
        let b = polygon[(i + 1) % polygon.len()];
        area2 += a[0] * b[1] - a[1] * b[0];
    }
    if area2.abs() < 1e-12 {
        return Err(SceneError::DegenerateFloor("zero area".into()));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in polygon {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let mut fg = FloorGrid { w: grid, h: grid, meters_per_cell, cells: vec![0; grid * grid] };
    for iy in 0..grid {
        for ix in 0..grid {
            let c = fg.cell_center(center, ix, iy);
            if point_in_polygon(c, polygon) {
                fg.cells[iy * grid + ix] = 1;
            }
        }
    }
    Ok((fg, center))
}

/// Even-odd crossing test.
fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// A furnished (or to-be-furnished) room. `elements` always has exactly
/// `n_max` slots; unoccupied slots carry the None class with zeroed
/// attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub n_max: usize,
    pub vocab: Vocabulary,
    pub elements: Vec<SceneElement>,
    pub floor: FloorGrid,
    pub floor_polygon: Vec<[f64; 2]>,
    pub room_center: [f64; 2],
}

impl Scene {
    /// Build a scene from real elements, padding with empty slots.
    pub fn assemble(
        n_max: usize,
        vocab: Vocabulary,
        mut elements: Vec<SceneElement>,
        floor_polygon: Vec<[f64; 2]>,
        grid: usize,
        meters_per_cell: f64,
    ) -> Result<Self, SceneError> {
        if elements.len() > n_max {
            return Err(SceneError::Capacity { count: elements.len(), n_max });
        }
        let (floor, room_center) = if floor_polygon.is_empty() {
            (FloorGrid::all_ones(grid, grid, meters_per_cell), [0.0, 0.0])
        } else {
            rasterize_floor(&floor_polygon, grid, meters_per_cell)?
        };
        while elements.len() < n_max {
            elements.push(SceneElement::empty_slot());
        }
        let scene = Scene { n_max, vocab, elements, floor, floor_polygon, room_center };
        scene.validate()?;
        Ok(scene)
    }

    pub fn arch_count(&self) -> usize {
        self.elements.iter().filter(|e| e.class.is_arch()).count()
    }

    pub fn furniture_count(&self) -> usize {
        self.elements.iter().filter(|e| e.class.is_furniture()).count()
    }

    pub fn arch(&self) -> impl Iterator<Item = (usize, &SceneElement)> {
        self.elements.iter().enumerate().filter(|(_, e)| e.class.is_arch())
    }

    pub fn furniture(&self) -> impl Iterator<Item = (usize, &SceneElement)> {
        self.elements.iter().enumerate().filter(|(_, e)| e.class.is_furniture())
    }

    /// All occupied slots (architectural and furniture) in slot order.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, &SceneElement)> {
        self.elements.iter().enumerate().filter(|(_, e)| e.class != ElementClass::Empty)
    }

    pub fn element_by_id(&self, id: &str) -> Option<(usize, &SceneElement)> {
        self.elements.iter().enumerate().find(|(_, e)| e.class != ElementClass::Empty && e.id == id)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.elements.len() != self.n_max {
            return Err(SceneError::Invalid(format!(
                "element list has {} slots, expected n_max = {}",
                self.elements.len(),
                self.n_max
            )));
        }
        let mut ids = BTreeSet::new();
        for (i, e) in self.elements.iter().enumerate() {
            match e.class {
                ElementClass::Empty => {
                    if !e.obb.is_zero() {
                        return Err(SceneError::Invalid(format!("empty slot {i} carries a non-zero box")));
                    }
                }
                ElementClass::Arch(_) => {
                    e.obb.validate().map_err(|g| SceneError::Invalid(format!("element `{}`: {g}", e.id)))?;
                }
                ElementClass::Furniture(idx) => {
                    if idx >= self.vocab.len() {
                        return Err(SceneError::Invalid(format!("element `{}` label index out of range", e.id)));
                    }
                    if !e.obb.is_zero() && e.obb.size.iter().any(|&s| s > 0.0) {
                        // placed or sized furniture must hold a valid box once complete
                        if e.obb.size.iter().all(|&s| s > 0.0) {
                            e.obb
                                .validate()
                                .map_err(|g| SceneError::Invalid(format!("element `{}`: {g}", e.id)))?;
                        }
                    }
                }
            }
            if e.class != ElementClass::Empty {
                if e.feature.len() != FEATURE_DIM {
                    return Err(SceneError::Invalid(format!("element `{}` feature length {}", e.id, e.feature.len())));
                }
                if !ids.insert(e.id.clone()) {
                    return Err(SceneError::Invalid(format!("duplicate element id `{}`", e.id)));
                }
            }
        }
        Ok(())
    }
}

// --- JSON schema -----------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    n_max: usize,
    meters_per_cell: f64,
    floor_polygon: Vec<[f64; 2]>,
    elements: Vec<ElementFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementFile {
    id: String,
    kind: String,
    label: String,
    size: [f64; 3],
    translation: [f64; 3],
    rotation_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
}

/// Default cell count per grid side (the grid is square).
pub const DEFAULT_GRID: usize = 64;
/// Default grid resolution in meters per cell.
pub const DEFAULT_METERS_PER_CELL: f64 = 0.125;
/// Default slot count.
pub const DEFAULT_N_MAX: usize = 16;

/// Parse a scene from JSON bytes. An empty `floor_polygon` denotes the
/// floor-plan-free setting and yields an all-ones grid.
pub fn load_scene(bytes: &[u8], vocab: &Vocabulary, grid: usize) -> Result<Scene, SceneError> {
    let file: SceneFile = serde_json::from_slice(bytes)
        .map_err(|e| SceneError::Parse { path: "$".into(), message: e.to_string() })?;
    let mut elements = Vec::with_capacity(file.elements.len());
    for (i, el) in file.elements.iter().enumerate() {
        let path = format!("elements[{i}]");
        let class = match el.kind.as_str() {
            "architectural" => match ArchKind::from_label(&el.label) {
                Some(k) => ElementClass::Arch(k),
                None => {
                    return Err(SceneError::Parse {
                        path: format!("{path}.label"),
                        message: format!("unknown architectural label `{}`", el.label),
                    })
                }
            },
            "furniture" => match vocab.index_of(&el.label) {
                Some(idx) => ElementClass::Furniture(idx),
                None => {
                    return Err(SceneError::Parse {
                        path: format!("{path}.label"),
                        message: format!("label `{}` is not in the vocabulary", el.label),
                    })
                }
            },
            other => {
                return Err(SceneError::Parse {
                    path: format!("{path}.kind"),
                    message: format!("unknown kind `{other}`, expected architectural|furniture"),
                })
            }
        };
        let mut item = SceneElement::placed(&el.id, class, el.size, el.translation, el.rotation_deg);
        if el.size == [0.0; 3] && el.translation == [0.0; 3] && el.rotation_deg == 0.0 {
            item.obb = Obb::zero();
        }
        if let Some(f) = &el.feature {
            if f.len() != FEATURE_DIM {
                return Err(SceneError::Parse {
                    path: format!("{path}.feature"),
                    message: format!("expected {FEATURE_DIM} floats, got {}", f.len()),
                });
            }
            item.feature = f.clone();
        }
        if class.is_arch() {
            item.obb.validate().map_err(|g| SceneError::Parse { path: path.clone(), message: g.to_string() })?;
        }
        elements.push(item);
    }
    if elements.len() > file.n_max {
        return Err(SceneError::Capacity { count: elements.len(), n_max: file.n_max });
    }
    Scene::assemble(file.n_max, vocab.clone(), elements, file.floor_polygon, grid, file.meters_per_cell)
}

/// Serialize a scene to pretty JSON. Empty slots are not written; all-zero
/// feature vectors are omitted.
pub fn save_scene(scene: &Scene) -> Vec<u8> {
    let elements = scene
        .occupied()
        .map(|(_, e)| {
            let (kind, label) = match e.class {
                ElementClass::Arch(k) => ("architectural", k.label().to_string()),
                ElementClass::Furniture(i) => ("furniture", scene.vocab.label(i).to_string()),
                ElementClass::Empty => unreachable!(),
            };
            ElementFile {
                id: e.id.clone(),
                kind: kind.to_string(),
                label,
                size: e.obb.size,
                translation: e.obb.translation,
                rotation_deg: e.rotation_deg,
                feature: if e.feature.iter().all(|&v| v == 0.0) { None } else { Some(e.feature.clone()) },
            }
        })
        .collect();
    let file = SceneFile {
        n_max: scene.n_max,
        meters_per_cell: scene.floor.meters_per_cell,
        floor_polygon: scene.floor_polygon.clone(),
        elements,
    };
    let mut out = serde_json::to_vec_pretty(&file).expect("scene serialization");
    out.push(b'\n');
    out
}

// --- Stage vectors ---------------------------------------------------------

/// The four cascaded denoising stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Type,
    Property,
    RelationLatent,
    BoxLayout,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::Type => 1,
            Stage::Property => 2,
            Stage::RelationLatent => 3,
            Stage::BoxLayout => 4,
        }
    }

    pub fn from_index(i: u8) -> Option<Stage> {
        match i {
            1 => Some(Stage::Type),
            2 => Some(Stage::Property),
            3 => Some(Stage::RelationLatent),
            4 => Some(Stage::BoxLayout),
            _ => None,
        }
    }
}

/// Per-field conditioning flags: `true` means the field is a condition and
/// must never be altered by noising or sampling; `false` marks a generation
/// target, held at exactly zero before noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldMask {
    pub class: bool,
    pub feature: bool,
    pub size: bool,
    pub translation: bool,
    pub rotation: bool,
    pub latent: bool,
}

impl FieldMask {
    pub fn all_known() -> Self {
        FieldMask { class: true, feature: true, size: true, translation: true, rotation: true, latent: true }
    }
}

/// Per-element network vector for one stage: class one-hot, optional feature
/// embedding, box attributes, slot index and optional relation latent.
#[derive(Debug, Clone, PartialEq)]
pub struct StageVector {
    pub class_onehot: Vec<f64>,
    pub feature: Vec<f64>,
    pub size: [f64; 3],
    pub translation: [f64; 3],
    pub rotation: [f64; 2],
    pub pe: usize,
    pub latent: Vec<f64>,
    pub known: FieldMask,
}

impl StageVector {
    pub fn has_feature(&self) -> bool {
        !self.feature.is_empty()
    }

    pub fn has_latent(&self) -> bool {
        !self.latent.is_empty()
    }
}

/// Encode the scene into per-element stage vectors.
///
/// Stage 1 covers every slot (empty slots are generation targets carrying
/// the None class); stages 2–4 cover only occupied slots. `latents` supplies
/// the stage-3 outputs required by stage 4.
pub fn encode_stage(scene: &Scene, stage: Stage, latents: Option<&[Vec<f64>]>) -> Result<Vec<StageVector>, SceneError> {
    let vocab = &scene.vocab;
    let class_count = vocab.class_count();
    if stage == Stage::BoxLayout && latents.is_none() {
        return Err(SceneError::Staging { stage: 4, field: "relation_latent" });
    }
    if matches!(stage, Stage::RelationLatent | Stage::BoxLayout) {
        for (_, e) in scene.furniture() {
            if e.obb.size.iter().any(|&s| s <= 0.0) {
                return Err(SceneError::Staging { stage: stage.index(), field: "size" });
            }
        }
    }
    let mut out = Vec::new();
    for (slot, e) in scene.elements.iter().enumerate() {
        if stage != Stage::Type && e.class == ElementClass::Empty {
            continue;
        }
        let is_arch = e.class.is_arch();
        let mut v = StageVector {
            class_onehot: vec![0.0; class_count],
            feature: Vec::new(),
            size: [0.0; 3],
            translation: [0.0; 3],
            rotation: [0.0; 2],
            pe: slot,
            latent: Vec::new(),
            known: FieldMask::all_known(),
        };
        v.class_onehot[e.class.index(vocab)] = 1.0;
        let copy_obb = |v: &mut StageVector| {
            v.size = e.obb.size;
            v.translation = e.obb.translation;
            v.rotation = e.obb.rotation;
        };
        match stage {
            Stage::Type => {
                if is_arch {
                    copy_obb(&mut v);
                } else if e.locked {
                    // completion: conditioned furniture keeps its class
                    copy_obb(&mut v);
                } else {
                    v.known.class = false;
                    v.class_onehot = vec![0.0; class_count];
                }
            }
            Stage::Property => {
                v.feature = e.feature.clone();
                if is_arch {
                    copy_obb(&mut v);
                } else if e.locked {
                    copy_obb(&mut v);
                } else {
                    v.known.size = false;
                    v.known.feature = false;
                    v.feature = vec![0.0; FEATURE_DIM];
                }
            }
            Stage::RelationLatent => {
                v.size = e.obb.size;
                if is_arch {
                    copy_obb(&mut v);
                }
                // latents are the generation target for every node
                v.known.latent = false;
                v.latent = vec![0.0; LATENT_DIM];
            }
            Stage::BoxLayout => {
                v.size = e.obb.size;
                let lat = latents.unwrap();
                let idx = out.len();
                if idx >= lat.len() || lat[idx].len() != LATENT_DIM {
                    return Err(SceneError::Staging { stage: 4, field: "relation_latent" });
                }
                v.latent = lat[idx].clone();
                if is_arch || e.locked {
                    copy_obb(&mut v);
                } else {
                    v.known.translation = false;
                    v.known.rotation = false;
                }
            }
        }
        out.push(v);
    }
    Ok(out)
}

// --- Augmentation ----------------------------------------------------------

/// Training augmentation policy. Each enabled entry is applied once, in the
/// fixed order rotation, permutation, architectural masking, floor-free,
/// completion masking.
#[derive(Debug, Clone, Default)]
pub struct AugmentPolicy {
    /// Rotate the whole scene by a random quarter-turn multiple (90/180/270).
    pub rotate: bool,
    /// Shuffle slot order; `pe` follows the new slot index.
    pub permute: bool,
    /// Probability of masking each architectural element to the None class.
    pub mask_arch: Option<f64>,
    /// Replace the floor with an all-ones grid and drop all architecture.
    pub floor_free: bool,
    /// Probability of locking each furniture item as conditioned ground
    /// truth (completion training).
    pub completion_mask: Option<f64>,
}

pub fn augment(scene: &Scene, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Scene {
    let mut out = scene.clone();
    if policy.rotate {
        let k = rng.gen_range(1..4u8);
        out = rotate_scene(&out, k);
    }
    if policy.permute {
        out.elements.shuffle(rng);
    }
    if let Some(p) = policy.mask_arch {
        for e in out.elements.iter_mut() {
            if e.class.is_arch() && rng.gen_range(0.0..1.0) < p {
                mask_element(e);
            }
        }
    }
    if policy.floor_free {
        out.floor = FloorGrid::all_ones(out.floor.w, out.floor.h, out.floor.meters_per_cell);
        out.floor_polygon.clear();
        for e in out.elements.iter_mut() {
            if e.class.is_arch() {
                mask_element(e);
            }
        }
    }
    if let Some(p) = policy.completion_mask {
        for e in out.elements.iter_mut() {
            if e.class.is_furniture() && rng.gen_range(0.0..1.0) < p {
                e.locked = true;
            }
        }
    }
    out
}

fn mask_element(e: &mut SceneElement) {
    e.class = ElementClass::Empty;
    e.id = String::new();
    e.obb = Obb::zero();
    e.rotation_deg = 0.0;
    e.feature = vec![0.0; FEATURE_DIM];
    e.locked = false;
}

/// Exact quarter-turn rotation of the whole scene: boxes, floor polygon,
/// grid and room center.
pub fn rotate_scene(scene: &Scene, k: u8) -> Scene {
    let mut out = scene.clone();
    for e in out.elements.iter_mut() {
        if e.class == ElementClass::Empty || e.obb.is_zero() {
            continue;
        }
        e.obb = rotate_obb_90(&e.obb, k);
        e.rotation_deg += 90.0 * (k % 4) as f64;
        if e.rotation_deg >= 360.0 {
            e.rotation_deg -= 360.0;
        }
    }
    out.floor = out.floor.rotate90(k);
    out.floor_polygon = out.floor_polygon.iter().map(|&p| rot90(p, k)).collect();
    out.room_center = rot90(out.room_center, k);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn square_room(side: f64, n_max: usize) -> Scene {
        let h = side / 2.0;
        let walls = vec![
            SceneElement::placed("wall_s", ElementClass::Arch(ArchKind::Wall), [side, 0.1, 2.8], [0.0, -h, 1.4], 0.0),
            SceneElement::placed("wall_n", ElementClass::Arch(ArchKind::Wall), [side, 0.1, 2.8], [0.0, h, 1.4], 180.0),
            SceneElement::placed("wall_e", ElementClass::Arch(ArchKind::Wall), [side, 0.1, 2.8], [h, 0.0, 1.4], 90.0),
            SceneElement::placed("wall_w", ElementClass::Arch(ArchKind::Wall), [side, 0.1, 2.8], [-h, 0.0, 1.4], 270.0),
        ];
        let poly = vec![[-h, -h], [h, -h], [h, h], [-h, h]];
        Scene::assemble(n_max, Vocabulary::living_room(), walls, poly, 32, 0.25).unwrap()
    }

    #[test]
    fn empty_room_counts() {
        let scene = square_room(6.0, 8);
        assert_eq!(scene.arch_count(), 4);
        assert_eq!(scene.furniture_count(), 0);
        assert_eq!(scene.elements.len(), 8);
    }

    #[test]
    fn occupied_slots_equal_m_plus_n() {
        let mut scene = square_room(6.0, 8);
        scene.elements[4] = SceneElement::placed(
            "sofa",
            ElementClass::Furniture(scene.vocab.index_of("multi_seat_sofa").unwrap()),
            [2.0, 0.9, 0.8],
            [0.0, -2.0, 0.4],
            0.0,
        );
        assert_eq!(scene.occupied().count(), scene.arch_count() + scene.furniture_count());
    }

    #[test]
    fn out_of_vocabulary_label_is_named() {
        let json = br#"{
            "n_max": 4, "meters_per_cell": 0.25, "floor_polygon": [[-1,-1],[1,-1],[1,1],[-1,1]],
            "elements": [
                {"id": "x", "kind": "furniture", "label": "spaceship", "size": [1,1,1], "translation": [0,0,0.5], "rotation_deg": 0}
            ]
        }"#;
        let err = load_scene(json, &Vocabulary::living_room(), 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spaceship"), "error should name the label: {msg}");
    }

    #[test]
    fn unknown_fields_rejected() {
        let json = br#"{
            "n_max": 4, "meters_per_cell": 0.25, "floor_polygon": [[-1,-1],[1,-1],[1,1],[-1,1]],
            "elements": [], "extra": 1
        }"#;
        assert!(load_scene(json, &Vocabulary::living_room(), 16).is_err());
    }

    #[test]
    fn capacity_overflow_rejected() {
        let json = br#"{
            "n_max": 1, "meters_per_cell": 0.25, "floor_polygon": [[-1,-1],[1,-1],[1,1],[-1,1]],
            "elements": [
                {"id": "a", "kind": "furniture", "label": "stool", "size": [0.4,0.4,0.4], "translation": [0,0,0.2], "rotation_deg": 0},
                {"id": "b", "kind": "furniture", "label": "stool", "size": [0.4,0.4,0.4], "translation": [1,0,0.2], "rotation_deg": 0}
            ]
        }"#;
        assert!(matches!(
            load_scene(json, &Vocabulary::living_room(), 16),
            Err(SceneError::Capacity { count: 2, n_max: 1 })
        ));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut scene = square_room(6.0, 8);
        let idx = scene.vocab.index_of("dining_table").unwrap();
        let mut table = SceneElement::placed(
            "table",
            ElementClass::Furniture(idx),
            [1.4, 0.8, 0.75],
            [0.3, -0.7, 0.375],
            33.5,
        );
        table.feature[0] = 0.25;
        table.feature[63] = -1.5;
        scene.elements[4] = table;
        let bytes = save_scene(&scene);
        let reparsed = load_scene(&bytes, &scene.vocab, scene.floor.w).unwrap();
        // empty slots are appended at the tail on load; compare occupied slots
        let a: Vec<_> = scene.occupied().map(|(_, e)| e.clone()).collect();
        let b: Vec<_> = reparsed.occupied().map(|(_, e)| e.clone()).collect();
        assert_eq!(a, b);
        assert_eq!(scene.floor, reparsed.floor);
        assert_eq!(scene.room_center, reparsed.room_center);
        // serializing again is byte-identical
        assert_eq!(bytes, save_scene(&reparsed));
    }

    #[test]
    fn rasterized_square_matches_block() {
        let poly = vec![[-2.0, -2.0], [2.0, -2.0], [2.0, 2.0], [-2.0, 2.0]];
        let (fg, center) = rasterize_floor(&poly, 32, 0.25).unwrap();
        assert_eq!(center, [0.0, 0.0]);
        // 4x4 m at 0.25 m/cell: a 16x16 block of ones
        assert_eq!(fg.ones(), 16 * 16);
    }

    #[test]
    fn l_shape_cell_count_close_to_area() {
        let poly = vec![[0.0, 0.0], [4.0, 0.0], [4.0, 2.0], [2.0, 2.0], [2.0, 4.0], [0.0, 4.0]];
        let (fg, _) = rasterize_floor(&poly, 64, 0.125).unwrap();
        let area = 12.0; // 4x4 minus 2x2
        let cell_area = 0.125 * 0.125;
        let perimeter = 16.0;
        let boundary_ring = perimeter / 0.125;
        let count = fg.ones() as f64;
        assert!((count - area / cell_area).abs() <= boundary_ring, "count {count}");
    }

    #[test]
    fn degenerate_polygon_rejected() {
        assert!(rasterize_floor(&[[0.0, 0.0], [1.0, 0.0]], 16, 0.25).is_err());
        assert!(rasterize_floor(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], 16, 0.25).is_err());
    }

    #[test]
    fn stage1_zeroes_furniture_slots() {
        let scene = square_room(6.0, 8);
        let vs = encode_stage(&scene, Stage::Type, None).unwrap();
        assert_eq!(vs.len(), 8);
        for v in vs.iter().skip(4) {
            assert!(!v.known.class);
            assert!(v.class_onehot.iter().all(|&x| x == 0.0));
            assert_eq!(v.size, [0.0; 3]);
            assert_eq!(v.translation, [0.0; 3]);
        }
        for v in vs.iter().take(4) {
            assert!(v.known.class);
            assert_eq!(v.class_onehot.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn stage4_masks_placement_only() {
        let mut scene = square_room(6.0, 8);
        let idx = scene.vocab.index_of("stool").unwrap();
        scene.elements[4] =
            SceneElement::placed("s1", ElementClass::Furniture(idx), [0.4, 0.4, 0.4], [1.0, 1.0, 0.2], 0.0);
        let latents = vec![vec![0.1; LATENT_DIM]; 5];
        let vs = encode_stage(&scene, Stage::BoxLayout, Some(&latents)).unwrap();
        assert_eq!(vs.len(), 5);
        let f = &vs[4];
        assert!(f.known.class && f.known.size && f.known.latent);
        assert!(!f.known.translation && !f.known.rotation);
        assert_eq!(f.translation, [0.0; 3]);
        assert_eq!(f.size, [0.4, 0.4, 0.4]);
        // architecture keeps its placement
        assert!(vs[0].known.translation);
        assert!(vs[0].translation != [0.0; 3]);
    }

    #[test]
    fn stage3_conditions_class_and_size() {
        let mut scene = square_room(6.0, 8);
        let idx = scene.vocab.index_of("stool").unwrap();
        scene.elements[4] =
            SceneElement::placed("s1", ElementClass::Furniture(idx), [0.4, 0.4, 0.4], [1.0, 1.0, 0.2], 0.0);
        let vs = encode_stage(&scene, Stage::RelationLatent, None).unwrap();
        let f = &vs[4];
        assert!(f.known.class && f.known.size && !f.known.latent);
        assert_eq!(f.translation, [0.0; 3], "furniture placement is not a stage-3 condition");
        assert!(vs[0].translation != [0.0; 3], "architecture placement is a condition");
        assert!(vs.iter().all(|v| v.latent.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn stage_encoding_missing_priors_errors() {
        let mut scene = square_room(6.0, 8);
        let idx = scene.vocab.index_of("stool").unwrap();
        let mut no_size = SceneElement::placed("s1", ElementClass::Furniture(idx), [1.0, 1.0, 1.0], [0.0; 3], 0.0);
        no_size.obb.size = [0.0; 3];
        scene.elements[4] = no_size;
        assert!(matches!(
            encode_stage(&scene, Stage::RelationLatent, None),
            Err(SceneError::Staging { stage: 3, field: "size" })
        ));
        assert!(matches!(
            encode_stage(&scene, Stage::BoxLayout, None),
            Err(SceneError::Staging { stage: 4, field: "relation_latent" })
        ));
    }

    #[test]
    fn encode_stage_idempotent() {
        let scene = square_room(6.0, 8);
        let a = encode_stage(&scene, Stage::Type, None).unwrap();
        let b = encode_stage(&scene, Stage::Type, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn double_180_rotation_is_identity() {
        let mut scene = square_room(6.0, 8);
        let idx = scene.vocab.index_of("desk").unwrap();
        scene.elements[4] =
            SceneElement::placed("d", ElementClass::Furniture(idx), [1.2, 0.6, 0.75], [0.7, -1.3, 0.375], 25.0);
        let twice = rotate_scene(&rotate_scene(&scene, 2), 2);
        let mut expect = scene.clone();
        // rotation_deg wraps at 360
        for e in expect.elements.iter_mut() {
            if e.class != ElementClass::Empty {
                e.rotation_deg = (e.rotation_deg + 360.0) % 360.0;
            }
        }
        assert_eq!(twice, expect);
    }

    #[test]
    fn permutation_preserves_multiset() {
        let scene = square_room(6.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shuffled = augment(&scene, &AugmentPolicy { permute: true, ..Default::default() }, &mut rng);
        let mut a: Vec<_> = scene.occupied().map(|(_, e)| e.id.clone()).collect();
        let mut b: Vec<_> = shuffled.occupied().map(|(_, e)| e.id.clone()).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_completion_mask_is_identity() {
        let scene = square_room(6.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = augment(&scene, &AugmentPolicy { completion_mask: Some(0.0), ..Default::default() }, &mut rng);
        assert_eq!(out, scene);
    }

    #[test]
    fn floor_free_drops_architecture() {
        let scene = square_room(6.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = augment(&scene, &AugmentPolicy { floor_free: true, ..Default::default() }, &mut rng);
        assert_eq!(out.arch_count(), 0);
        assert_eq!(out.floor.ones(), out.floor.w * out.floor.h);
    }
}
