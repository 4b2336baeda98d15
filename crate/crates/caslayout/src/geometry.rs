//! Exact 2D/3D computations on upright oriented bounding boxes.
//!
//! Boxes are closed solids: boundary contact counts as distance zero. All
//! operations are pure functions on immutable values and safe to call from
//! any number of threads.

use thiserror::Error;

/// Tolerance for analytic invariants (unit rotation, normal orthogonality).
pub const ANALYTIC_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("box size must be positive, got [{0}, {1}, {2}]")]
    NonPositiveSize(f64, f64, f64),
    #[error("rotation ({0}, {1}) is not a unit vector")]
    UnnormalizedRotation(f64, f64),
    #[error("segment endpoints coincide")]
    DegenerateSegment,
    #[error("segment normal ({0}, {1}) is not a unit vector perpendicular to the segment")]
    BadSegmentNormal(f64, f64),
    #[error("polygon is degenerate: {0}")]
    DegeneratePolygon(String),
}

pub(crate) fn dot(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub(crate) fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

pub(crate) fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Upright oriented bounding box. Sizes are full extents in meters,
/// translation is relative to the room center, rotation is yaw stored as
/// `(cos θ, sin θ)`. The local `+x` axis is "left", `+y` is "front" and
/// `+z` is upright.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obb {
    pub size: [f64; 3],
    pub translation: [f64; 3],
    pub rotation: [f64; 2],
}

impl Obb {
    pub fn new(size: [f64; 3], translation: [f64; 3], rotation: [f64; 2]) -> Result<Self, GeometryError> {
        let obb = Obb { size, translation, rotation };
        obb.validate()?;
        Ok(obb)
    }

    pub fn from_angle(size: [f64; 3], translation: [f64; 3], theta_rad: f64) -> Result<Self, GeometryError> {
        Self::new(size, translation, [theta_rad.cos(), theta_rad.sin()])
    }

    pub fn from_angle_deg(size: [f64; 3], translation: [f64; 3], deg: f64) -> Result<Self, GeometryError> {
        Self::from_angle(size, translation, deg.to_radians())
    }

    /// Placeholder value for not-yet-placed furniture and empty slots.
    /// Not a valid geometric box; `validate` rejects it.
    pub fn zero() -> Self {
        Obb { size: [0.0; 3], translation: [0.0; 3], rotation: [0.0; 2] }
    }

    pub fn is_zero(&self) -> bool {
        self.size == [0.0; 3] && self.translation == [0.0; 3] && self.rotation == [0.0; 2]
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let [sx, sy, sz] = self.size;
        if !(sx > 0.0 && sy > 0.0 && sz > 0.0) {
            return Err(GeometryError::NonPositiveSize(sx, sy, sz));
        }
        let [c, s] = self.rotation;
        if (c * c + s * s - 1.0).abs() > ANALYTIC_EPS {
            return Err(GeometryError::UnnormalizedRotation(c, s));
        }
        Ok(())
    }

    /// World-space directions of the local `+x` (left) and `+y` (front) axes.
    pub fn local_frame(&self) -> ([f64; 2], [f64; 2]) {
        let [c, s] = self.rotation;
        ([c, s], [-s, c])
    }

    pub fn center_xy(&self) -> [f64; 2] {
        [self.translation[0], self.translation[1]]
    }

    /// World coordinates of a point given in the box's local xy frame.
    pub fn to_world(&self, local: [f64; 2]) -> [f64; 2] {
        let (xh, yh) = self.local_frame();
        [
            self.translation[0] + local[0] * xh[0] + local[1] * yh[0],
            self.translation[1] + local[0] * xh[1] + local[1] * yh[1],
        ]
    }

    /// Local xy coordinates of a world-space point.
    pub fn to_local(&self, world: [f64; 2]) -> [f64; 2] {
        let (xh, yh) = self.local_frame();
        let d = sub(world, self.center_xy());
        [dot(d, xh), dot(d, yh)]
    }

    /// Footprint corners in CCW order: front-left, front-right, back-right,
    /// back-left in the local frame (`+x` left, `+y` front).
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let hx = self.size[0] / 2.0;
        let hy = self.size[1] / 2.0;
        [
            self.to_world([hx, hy]),
            self.to_world([-hx, hy]),
            self.to_world([-hx, -hy]),
            self.to_world([hx, -hy]),
        ]
    }

    pub fn z_interval(&self) -> (f64, f64) {
        let h = self.size[2] / 2.0;
        (self.translation[2] - h, self.translation[2] + h)
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }
}

/// Architectural element footprint reduced to a line segment, with the unit
/// normal pointing toward the room interior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment2D {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub normal: [f64; 2],
}

impl Segment2D {
    pub fn new(a: [f64; 2], b: [f64; 2], normal: [f64; 2]) -> Result<Self, GeometryError> {
        if a == b {
            return Err(GeometryError::DegenerateSegment);
        }
        let d = sub(b, a);
        if (norm(normal) - 1.0).abs() > ANALYTIC_EPS || dot(d, normal).abs() > ANALYTIC_EPS * norm(d) {
            return Err(GeometryError::BadSegmentNormal(normal[0], normal[1]));
        }
        Ok(Segment2D { a, b, normal })
    }
}

/// Local +x and +y world directions; thin wrapper kept for symmetry with the
/// free-function interface of the other operations.
pub fn local_frame(o: &Obb) -> ([f64; 2], [f64; 2]) {
    o.local_frame()
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = sub(b, a);
    let len2 = dot(ab, ab);
    if len2 == 0.0 {
        return norm(sub(p, a));
    }
    let t = (dot(sub(p, a), ab) / len2).clamp(0.0, 1.0);
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = cross(sub(q2, q1), sub(p1, q1));
    let d2 = cross(sub(q2, q1), sub(p2, q1));
    let d3 = cross(sub(p2, p1), sub(q1, p1));
    let d4 = cross(sub(p2, p1), sub(q2, p1));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |d: f64, a: [f64; 2], b: [f64; 2], p: [f64; 2]| {
        d == 0.0
            && p[0] >= a[0].min(b[0])
            && p[0] <= a[0].max(b[0])
            && p[1] >= a[1].min(b[1])
            && p[1] <= a[1].max(b[1])
    };
    on(d1, q1, q2, p1) || on(d2, q1, q2, p2) || on(d3, p1, p2, q1) || on(d4, p1, p2, q2)
}

fn segment_segment_distance(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> f64 {
    if segments_intersect(p1, p2, q1, q2) {
        return 0.0;
    }
    point_segment_distance(p1, q1, q2)
        .min(point_segment_distance(p2, q1, q2))
        .min(point_segment_distance(q1, p1, p2))
        .min(point_segment_distance(q2, p1, p2))
}

fn point_in_convex_ccw(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        if cross(sub(b, a), sub(p, a)) < 0.0 {
            return false;
        }
    }
    true
}

/// Separating axis test over the edge normals of both convex CCW polygons.
fn convex_polygons_intersect(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    let project = |poly: &[[f64; 2]], axis: [f64; 2]| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in poly {
            let v = dot(*p, axis);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    };
    for (poly, other) in [(a, b), (b, a)] {
        for i in 0..poly.len() {
            let e = sub(poly[(i + 1) % poly.len()], poly[i]);
            let axis = [-e[1], e[0]];
            let (lo1, hi1) = project(poly, axis);
            let (lo2, hi2) = project(other, axis);
            if hi1 < lo2 || hi2 < lo1 {
                return false;
            }
        }
    }
    true
}

fn footprint_distance(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    if convex_polygons_intersect(a, b) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            let d = segment_segment_distance(a[i], a[(i + 1) % 4], b[j], b[(j + 1) % 4]);
            best = best.min(d);
        }
    }
    best
}

fn interval_gap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0.max(b.0) - a.1.min(b.1)).max(0.0)
}

/// Minimum distance between two upright boxes treated as closed solids.
/// Zero iff the boxes intersect; symmetric in its arguments.
pub fn min_distance_obb(a: &Obb, b: &Obb) -> f64 {
    let dxy = footprint_distance(&a.footprint(), &b.footprint());
    let dz = interval_gap(a.z_interval(), b.z_interval());
    dxy.hypot(dz)
}

/// Minimum distance in the xy-plane between a box footprint and a segment.
pub fn min_distance_obb_segment(o: &Obb, s: &Segment2D) -> f64 {
    let fp = o.footprint();
    if point_in_convex_ccw(s.a, &fp) || point_in_convex_ccw(s.b, &fp) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        let d = segment_segment_distance(fp[i], fp[(i + 1) % 4], s.a, s.b);
        best = best.min(d);
    }
    best
}

/// Sutherland–Hodgman clip of a convex subject polygon against a convex CCW
/// clip polygon. Returns the (possibly empty) intersection polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = sub(b, a);
        let input = std::mem::take(&mut output);
        let inside = |p: [f64; 2]| cross(edge, sub(p, a)) >= 0.0;
        for j in 0..input.len() {
            let cur = input[j];
            let next = input[(j + 1) % input.len()];
            let cur_in = inside(cur);
            let next_in = inside(next);
            if cur_in {
                output.push(cur);
            }
            if cur_in != next_in {
                let dc = cross(edge, sub(cur, a));
                let dn = cross(edge, sub(next, a));
                let t = dc / (dc - dn);
                output.push([cur[0] + t * (next[0] - cur[0]), cur[1] + t * (next[1] - cur[1])]);
            }
        }
    }
    output
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        acc += cross(poly[i], poly[(i + 1) % poly.len()]);
    }
    acc.abs() / 2.0
}

/// 3D intersection-over-union of two upright boxes: footprint polygon clip
/// area times the z-interval overlap, over the union volume. Degenerate
/// zero-area intersections return 0.
pub fn iou_3d(a: &Obb, b: &Obb) -> f64 {
    let inter_xy = polygon_area(&clip_convex(&a.footprint(), &b.footprint()));
    let (alo, ahi) = a.z_interval();
    let (blo, bhi) = b.z_interval();
    let inter_z = (ahi.min(bhi) - alo.max(blo)).max(0.0);
    let inter = inter_xy * inter_z;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter;
    inter / union
}

/// Boundary-inclusive footprint membership test.
pub fn footprint_contains(o: &Obb, p: [f64; 2]) -> bool {
    let [lx, ly] = o.to_local(p);
    lx.abs() <= o.size[0] / 2.0 + ANALYTIC_EPS && ly.abs() <= o.size[1] / 2.0 + ANALYTIC_EPS
}

/// Rotate a 2D vector by `k` quarter turns counter-clockwise. Exact in
/// floating point: only negation and component swaps.
pub fn rot90(v: [f64; 2], k: u8) -> [f64; 2] {
    match k % 4 {
        0 => v,
        1 => [-v[1], v[0]],
        2 => [-v[0], -v[1]],
        _ => [v[1], -v[0]],
    }
}

/// Apply an exact quarter-turn rotation about the origin to a box.
pub fn rotate_obb_90(o: &Obb, k: u8) -> Obb {
    let t = rot90([o.translation[0], o.translation[1]], k);
    Obb {
        size: o.size,
        translation: [t[0], t[1], o.translation[2]],
        rotation: rot90(o.rotation, k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit_cube_at(x: f64, y: f64) -> Obb {
        Obb::new([1.0, 1.0, 1.0], [x, y, 0.5], [1.0, 0.0]).unwrap()
    }

    #[test]
    fn local_frame_identity_and_quarter_turn() {
        let o = unit_cube_at(0.0, 0.0);
        let (xh, yh) = o.local_frame();
        assert_eq!(xh, [1.0, 0.0]);
        assert_eq!(yh, [0.0, 1.0]);

        let o = Obb::from_angle_deg([1.0, 1.0, 1.0], [0.0; 3], 90.0).unwrap();
        let (xh, yh) = o.local_frame();
        assert!((xh[0]).abs() < 1e-15 && (xh[1] - 1.0).abs() < 1e-15);
        assert!((yh[0] + 1.0).abs() < 1e-15 && (yh[1]).abs() < 1e-15);

        let o = Obb::from_angle_deg([1.0, 1.0, 1.0], [0.0; 3], 30.0).unwrap();
        let (xh, _) = o.local_frame();
        assert!((xh[0] - 30f64.to_radians().cos()).abs() < 1e-15);
        assert!((xh[1] - 30f64.to_radians().sin()).abs() < 1e-15);
    }

    #[test]
    fn axis_aligned_gap() {
        let a = unit_cube_at(0.0, 0.0);
        let b = unit_cube_at(1.5, 0.0);
        assert!((min_distance_obb(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn overlapping_boxes_distance_zero() {
        let a = unit_cube_at(0.0, 0.0);
        let b = unit_cube_at(0.4, 0.3);
        assert_eq!(min_distance_obb(&a, &b), 0.0);
    }

    #[test]
    fn touching_boxes_distance_zero() {
        let a = unit_cube_at(0.0, 0.0);
        let b = unit_cube_at(1.0, 0.0);
        assert_eq!(min_distance_obb(&a, &b), 0.0);
    }

    #[test]
    fn distance_with_z_gap() {
        let a = Obb::new([1.0, 1.0, 1.0], [0.0, 0.0, 0.5], [1.0, 0.0]).unwrap();
        let b = Obb::new([1.0, 1.0, 1.0], [1.5, 0.0, 2.5], [1.0, 0.0]).unwrap();
        // footprint gap 0.5, z gap 1.0
        assert!((min_distance_obb(&a, &b) - 0.5f64.hypot(1.0)).abs() < 1e-12);
    }

    #[test]
    fn segment_distance_axis_aligned_and_crossing() {
        let o = unit_cube_at(0.0, 0.0);
        let wall = Segment2D::new([1.0, -2.0], [1.0, 2.0], [-1.0, 0.0]).unwrap();
        assert!((min_distance_obb_segment(&o, &wall) - 0.5).abs() < 1e-12);

        let crossing = Segment2D::new([-2.0, 0.0], [2.0, 0.0], [0.0, 1.0]).unwrap();
        assert_eq!(min_distance_obb_segment(&o, &crossing), 0.0);
    }

    #[test]
    fn iou_identity_disjoint_and_shifted() {
        let a = unit_cube_at(0.0, 0.0);
        assert!((iou_3d(&a, &a) - 1.0).abs() < 1e-12);

        let far = unit_cube_at(5.0, 0.0);
        assert_eq!(iou_3d(&a, &far), 0.0);

        let b = unit_cube_at(0.5, 0.0);
        assert!((iou_3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_decreases_with_offset() {
        let a = unit_cube_at(0.0, 0.0);
        let mut prev = 1.0;
        for i in 1..=10 {
            let b = unit_cube_at(0.12 * i as f64, 0.0);
            let v = iou_3d(&a, &b);
            if prev > 0.0 {
                assert!(v < prev, "iou not decreasing at offset {i}");
            } else {
                assert_eq!(v, 0.0);
            }
            prev = v;
        }
    }

    #[test]
    fn footprint_contains_center_far_and_corner() {
        let o = Obb::from_angle_deg([2.0, 1.0, 1.0], [1.0, 2.0, 0.5], 37.0).unwrap();
        assert!(footprint_contains(&o, o.center_xy()));
        assert!(!footprint_contains(&o, [1.0 + 20.0, 2.0]));
        // corner point of a rotated box is boundary-inclusive
        let corner = o.footprint()[2];
        assert!(footprint_contains(&o, corner));
    }

    #[test]
    fn footprint_contains_matches_half_plane_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let o = Obb::from_angle(
                [rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0), 1.0],
                [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.5],
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
            .unwrap();
            let p = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
            let fp = o.footprint();
            // oracle: inside all four half-planes of the CCW footprint
            let mut inside = true;
            for i in 0..4 {
                let e = sub(fp[(i + 1) % 4], fp[i]);
                if cross(e, sub(p, fp[i])) < -1e-9 * norm(e) {
                    inside = false;
                }
            }
            assert_eq!(footprint_contains(&o, p), inside);
        }
    }

    #[test]
    fn min_distance_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                Obb::from_angle(
                    [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)],
                    [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.0)],
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            assert_eq!(min_distance_obb(&a, &b), min_distance_obb(&b, &a));
        }
    }

    #[test]
    fn quarter_turn_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                Obb::from_angle(
                    [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)],
                    [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(0.0..2.0)],
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            for k in 1..4u8 {
                let ar = rotate_obb_90(&a, k);
                let br = rotate_obb_90(&b, k);
                assert_eq!(min_distance_obb(&a, &b), min_distance_obb(&ar, &br));
                assert_eq!(iou_3d(&a, &b), iou_3d(&ar, &br));
            }
        }
    }

    #[test]
    fn rigid_motion_invariance_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                Obb::from_angle(
                    [rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)],
                    [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..2.0)],
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let (c, s) = (phi.cos(), phi.sin());
            let shift = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let mv = |o: &Obb| {
                let [x, y, z] = o.translation;
                let [rc, rs] = o.rotation;
                Obb {
                    size: o.size,
                    translation: [c * x - s * y + shift[0], s * x + c * y + shift[1], z],
                    rotation: [c * rc - s * rs, s * rc + c * rs],
                }
            };
            let d0 = min_distance_obb(&a, &b);
            let d1 = min_distance_obb(&mv(&a), &mv(&b));
            assert!((d0 - d1).abs() < 1e-9, "distance drift {}", (d0 - d1).abs());
            let i0 = iou_3d(&a, &b);
            let i1 = iou_3d(&mv(&a), &mv(&b));
            assert!((i0 - i1).abs() < 1e-9, "iou drift {}", (i0 - i1).abs());
        }
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(matches!(
            Obb::new([0.0, 1.0, 1.0], [0.0; 3], [1.0, 0.0]),
            Err(GeometryError::NonPositiveSize(..))
        ));
        assert!(matches!(
            Obb::new([1.0, 1.0, 1.0], [0.0; 3], [0.9, 0.1]),
            Err(GeometryError::UnnormalizedRotation(..))
        ));
        assert!(matches!(
            Segment2D::new([0.0, 0.0], [0.0, 0.0], [1.0, 0.0]),
            Err(GeometryError::DegenerateSegment)
        ));
        assert!(matches!(
            Segment2D::new([0.0, 0.0], [1.0, 0.0], [1.0, 0.0]),
            Err(GeometryError::BadSegmentNormal(..))
        ));
    }
}
