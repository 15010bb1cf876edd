//! Four-way intersection geometry: roads, routes, conflict points and the
//! zone/relation taxonomy used by the decision layer.
//!
//! The conflict zone is the square `|x|, |y| <= cz_half_width` centred on the
//! origin. Arms are numbered counter-clockwise starting west: `M1` enters
//! from the west heading east, `M2` from the south, `M3` from the east and
//! `M4` from the north. Traffic keeps right, so the eastbound `M1` lanes lie
//! at `y < 0`. Every lane keeps its inner/outer position through a maneuver
//! (no lane changes inside the conflict zone).

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleState;
use crate::error::{Error, Result};
use crate::geometry::{normalize_angle, Vec2};

const GEOM_EPS: f64 = 1e-9;
/// Two tangents closer than this (|sin| of the angle between them) are
/// treated as touching, not crossing.
const TRANSVERSAL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arm {
    West,
    South,
    East,
    North,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::West, Arm::South, Arm::East, Arm::North];

    pub fn index(self) -> usize {
        self as usize
    }

    fn from_index(i: usize) -> Arm {
        Arm::ALL[i % 4]
    }

    /// Rotation mapping the west-arm frame onto this arm.
    fn rotation(self) -> f64 {
        self.index() as f64 * FRAC_PI_2
    }

    /// Heading of inbound traffic on this arm.
    pub fn inbound_heading(self) -> Vec2 {
        Vec2::from_angle(self.rotation())
    }

    fn exit_for(self, maneuver: Maneuver) -> Arm {
        let i = self.index();
        match maneuver {
            Maneuver::Left => Arm::from_index(i + 3),
            Maneuver::Straight => Arm::from_index(i + 2),
            Maneuver::Right => Arm::from_index(i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoadId {
    pub arm: Arm,
    pub outbound: bool,
}

impl RoadId {
    pub fn inbound(arm: Arm) -> Self {
        Self { arm, outbound: false }
    }

    pub fn outbound(arm: Arm) -> Self {
        Self { arm, outbound: true }
    }
}

impl fmt::Display for RoadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let hat = if self.outbound { "^" } else { "" };
        write!(f, "M{hat}{}", self.arm.index() + 1)
    }
}

impl FromStr for RoadId {
    type Err = Error;

    /// Parses `M1`..`M4` (inbound) and `M^1`..`M^4` (outbound).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unknown road `{s}` (expected M1..M4 or M^1..M^4)"));
        let rest = s.strip_prefix('M').ok_or_else(bad)?;
        let (outbound, digit) = match rest.strip_prefix('^') {
            Some(d) => (true, d),
            None => (false, rest),
        };
        let n: usize = digit.parse().map_err(|_| bad())?;
        if !(1..=4).contains(&n) {
            return Err(bad());
        }
        Ok(RoadId {
            arm: Arm::from_index(n - 1),
            outbound,
        })
    }
}

impl Serialize for RoadId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RoadId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Inner,
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Left,
    Straight,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LaneId {
    pub road: RoadId,
    pub kind: LaneKind,
}

/// An infinite directed lane centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centerline {
    pub origin: Vec2,
    pub direction: Vec2,
}

impl Centerline {
    /// Signed offset of `p` to the left of the line.
    pub fn lateral(&self, p: Vec2) -> f64 {
        self.direction.cross(p - self.origin)
    }

    pub fn along(&self, p: Vec2) -> f64 {
        self.direction.dot(p - self.origin)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub id: RoadId,
    pub heading: Vec2,
    /// `[inner, outer]`
    pub lanes: [Centerline; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkParams {
    pub cz_half_width: f64,
    pub lane_offset_inner: f64,
    pub lane_offset_outer: f64,
    /// Length of road modeled upstream of the conflict zone.
    pub approach_length: f64,
    /// Length of road modeled downstream of the conflict zone.
    pub exit_length: f64,
    pub right_turn_radius: f64,
    /// Distance past the conflict-zone exit after which a vehicle is outside.
    pub exit_margin: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        Self {
            cz_half_width: 10.0,
            lane_offset_inner: 2.0,
            lane_offset_outer: 6.0,
            approach_length: 40.0,
            exit_length: 40.0,
            right_turn_radius: 9.0,
            exit_margin: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub params: NetworkParams,
    pub roads: Vec<Road>,
}

/// Builds the eight-road network with default road lengths and turn radius.
pub fn build_network(cz_half_width: f64, lane_offset_inner: f64, lane_offset_outer: f64) -> Result<Network> {
    Network::new(NetworkParams {
        cz_half_width,
        lane_offset_inner,
        lane_offset_outer,
        ..NetworkParams::default()
    })
}

impl Network {
    pub fn new(params: NetworkParams) -> Result<Network> {
        let p = &params;
        if !(p.lane_offset_inner > 0.0 && p.lane_offset_inner.is_finite()) {
            return Err(Error::Network("inner lane offset must be positive".into()));
        }
        if !(p.lane_offset_inner < p.lane_offset_outer) {
            return Err(Error::Network("inner lane offset must be below outer lane offset".into()));
        }
        if !(p.lane_offset_outer < p.cz_half_width && p.cz_half_width.is_finite()) {
            return Err(Error::Network("outer lane offset must be below the conflict-zone half width".into()));
        }
        if !(p.approach_length > 0.0 && p.exit_length > 0.0 && p.exit_margin >= 0.0) {
            return Err(Error::Network("road lengths must be positive".into()));
        }
        let left_inner = p.cz_half_width + p.lane_offset_inner;
        if !(p.right_turn_radius > 0.0 && p.right_turn_radius < left_inner) {
            return Err(Error::Network(format!(
                "right-turn radius must be in (0, {left_inner}) so right turns stay tighter than left turns"
            )));
        }
        if p.right_turn_radius + p.lane_offset_outer > p.cz_half_width + p.approach_length.min(p.exit_length) {
            return Err(Error::Network("right-turn arc does not fit on the modeled roads".into()));
        }

        let mut roads = Vec::with_capacity(8);
        for outbound in [false, true] {
            for arm in Arm::ALL {
                let id = RoadId { arm, outbound };
                let lanes = [LaneKind::Inner, LaneKind::Outer].map(|kind| lane_centerline(p, LaneId { road: id, kind }));
                roads.push(Road {
                    id,
                    heading: lanes[0].direction,
                    lanes,
                });
            }
        }
        Ok(Network { params, roads })
    }

    pub fn road(&self, id: RoadId) -> &Road {
        self.roads.iter().find(|r| r.id == id).expect("all eight roads exist")
    }

    pub fn centerline(&self, lane: LaneId) -> Centerline {
        let road = self.road(lane.road);
        match lane.kind {
            LaneKind::Inner => road.lanes[0],
            LaneKind::Outer => road.lanes[1],
        }
    }

    pub fn lane_offset(&self, kind: LaneKind) -> f64 {
        match kind {
            LaneKind::Inner => self.params.lane_offset_inner,
            LaneKind::Outer => self.params.lane_offset_outer,
        }
    }

    pub fn in_conflict_zone(&self, p: Vec2) -> bool {
        let c = self.params.cz_half_width + GEOM_EPS;
        p.x.abs() <= c && p.y.abs() <= c
    }

    /// Finds the inbound lane whose centerline passes through `p` (within
    /// `tol` metres) upstream of the conflict zone.
    pub fn inbound_lane_at(&self, p: Vec2, tol: f64) -> Option<LaneId> {
        self.roads.iter().filter(|r| !r.id.outbound).find_map(|r| {
            [LaneKind::Inner, LaneKind::Outer].into_iter().find_map(|kind| {
                let line = self.centerline(LaneId { road: r.id, kind });
                (line.lateral(p).abs() <= tol).then_some(LaneId { road: r.id, kind })
            })
        })
    }
}

fn lane_centerline(p: &NetworkParams, lane: LaneId) -> Centerline {
    let offset = match lane.kind {
        LaneKind::Inner => p.lane_offset_inner,
        LaneKind::Outer => p.lane_offset_outer,
    };
    let inbound = lane.road.arm.inbound_heading();
    let direction = if lane.road.outbound { -inbound } else { inbound };
    // right-hand traffic: the lane sits on the right of its travel direction
    let right = -direction.perp();
    Centerline {
        origin: right * offset,
        direction,
    }
}

/// One piece of a route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Segment {
    Line {
        start: Vec2,
        direction: Vec2,
        length: f64,
    },
    /// Circular arc; `sweep` is signed (positive = counter-clockwise).
    Arc {
        center: Vec2,
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Segment {
    pub fn length(&self) -> f64 {
        match *self {
            Segment::Line { length, .. } => length,
            Segment::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    fn point_at(&self, t: f64) -> Vec2 {
        match *self {
            Segment::Line { start, direction, .. } => start + direction * t,
            Segment::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => center + Vec2::from_angle(start_angle + sweep.signum() * t / radius) * radius,
        }
    }

    fn heading_at(&self, t: f64) -> f64 {
        match *self {
            Segment::Line { direction, .. } => direction.angle(),
            Segment::Arc {
                radius,
                start_angle,
                sweep,
                ..
            } => normalize_angle(start_angle + sweep.signum() * (t / radius + FRAC_PI_2)),
        }
    }

    fn curvature(&self) -> f64 {
        match *self {
            Segment::Line { .. } => 0.0,
            Segment::Arc { radius, sweep, .. } => sweep.signum() / radius,
        }
    }

    /// Closest point parameter (clamped to the segment) and its distance.
    fn project(&self, p: Vec2) -> (f64, f64) {
        match *self {
            Segment::Line { start, direction, length } => {
                let t = direction.dot(p - start).clamp(0.0, length);
                (t, p.distance(start + direction * t))
            }
            Segment::Arc {
                center,
                start_angle,
                sweep,
                radius,
            } => {
                let rel = p - center;
                let t = if rel.norm() < GEOM_EPS {
                    0.0
                } else {
                    let phase = arc_phase(rel.angle(), start_angle, sweep);
                    // outside the swept range: snap to the nearer end
                    if phase <= sweep.abs() {
                        phase * radius
                    } else if phase - sweep.abs() < TAU - phase {
                        sweep.abs() * radius
                    } else {
                        0.0
                    }
                };
                let t = t.clamp(0.0, self.length());
                (t, p.distance(self.point_at(t)))
            }
        }
    }
}

/// Angle travelled from `start` to `angle` in the arc's sweep direction, in [0, 2pi).
fn arc_phase(angle: f64, start: f64, sweep: f64) -> f64 {
    let d = (angle - start) * sweep.signum();
    d.rem_euclid(TAU)
}

fn arc_contains(angle: f64, start: f64, sweep: f64, radius: f64) -> Option<f64> {
    let phase = arc_phase(angle, start, sweep);
    let tol = GEOM_EPS / radius;
    if phase <= sweep.abs() + tol {
        Some((phase.min(sweep.abs())) * radius)
    } else if TAU - phase <= tol {
        Some(0.0)
    } else {
        None
    }
}

/// Nearest-point projection of a position onto a route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub s: f64,
    pub point: Vec2,
    /// Signed lateral offset, positive to the left of the route.
    pub lateral: f64,
    pub heading: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub entry: LaneId,
    pub exit: LaneId,
    pub maneuver: Maneuver,
    pub segments: Vec<Segment>,
    /// Arc length at which each segment starts.
    pub offsets: Vec<f64>,
    pub total_length: f64,
    /// Arc length of the first point inside the conflict zone.
    pub s_cz_enter: f64,
    /// Arc length of the last point inside the conflict zone.
    pub s_cz_exit: f64,
}

/// Builds the route from an inbound lane through `maneuver`. The exit lane
/// keeps the entry lane's inner/outer position.
pub fn route_for(net: &Network, entry: LaneId, maneuver: Maneuver) -> Route {
    assert!(!entry.road.outbound, "routes start on an inbound road");
    let p = &net.params;
    let arm = entry.road.arm;
    let exit = LaneId {
        road: RoadId::outbound(arm.exit_for(maneuver)),
        kind: entry.kind,
    };
    let o = net.lane_offset(entry.kind);
    let far_in = p.cz_half_width + p.approach_length;
    let far_out = p.cz_half_width + p.exit_length;

    // Built in the west-arm frame (entering eastbound along y = -o), then rotated.
    let local: Vec<Segment> = match maneuver {
        Maneuver::Straight => vec![Segment::Line {
            start: Vec2::new(-far_in, -o),
            direction: Vec2::new(1.0, 0.0),
            length: far_in + far_out,
        }],
        Maneuver::Left => {
            // tangent to y = -o (heading +x) and x = +o (heading +y),
            // starting where the entry lane meets the conflict zone
            let r = p.cz_half_width + o;
            let center = Vec2::new(-p.cz_half_width, -o + r);
            vec![
                Segment::Line {
                    start: Vec2::new(-far_in, -o),
                    direction: Vec2::new(1.0, 0.0),
                    length: far_in - p.cz_half_width,
                },
                Segment::Arc {
                    center,
                    radius: r,
                    start_angle: -FRAC_PI_2,
                    sweep: FRAC_PI_2,
                },
                Segment::Line {
                    start: Vec2::new(o, p.cz_half_width),
                    direction: Vec2::new(0.0, 1.0),
                    length: far_out - p.cz_half_width,
                },
            ]
        }
        Maneuver::Right => {
            // tangent to y = -o (heading +x) and x = -o (heading -y)
            let r = p.right_turn_radius;
            let center = Vec2::new(-o - r, -o - r);
            vec![
                Segment::Line {
                    start: Vec2::new(-far_in, -o),
                    direction: Vec2::new(1.0, 0.0),
                    length: far_in - o - r,
                },
                Segment::Arc {
                    center,
                    radius: r,
                    start_angle: FRAC_PI_2,
                    sweep: -FRAC_PI_2,
                },
                Segment::Line {
                    start: Vec2::new(-o, -o - r),
                    direction: Vec2::new(0.0, -1.0),
                    length: far_out - o - r,
                },
            ]
        }
    };

    let theta = arm.rotation();
    let segments: Vec<Segment> = local.into_iter().map(|s| rotate_segment(s, theta)).collect();
    let mut offsets = Vec::with_capacity(segments.len());
    let mut total = 0.0;
    for s in &segments {
        offsets.push(total);
        total += s.length();
    }
    let mut route = Route {
        entry,
        exit,
        maneuver,
        segments,
        offsets,
        total_length: total,
        s_cz_enter: 0.0,
        s_cz_exit: 0.0,
    };
    let (enter, leave) = route.cz_span(net);
    route.s_cz_enter = enter;
    route.s_cz_exit = leave;
    route
}

fn rotate_segment(seg: Segment, theta: f64) -> Segment {
    match seg {
        Segment::Line { start, direction, length } => Segment::Line {
            start: start.rotate(theta),
            direction: direction.rotate(theta),
            length,
        },
        Segment::Arc {
            center,
            radius,
            start_angle,
            sweep,
        } => Segment::Arc {
            center: center.rotate(theta),
            radius,
            start_angle: normalize_angle(start_angle + theta),
            sweep,
        },
    }
}

impl Route {
    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.total_length);
        let i = match self.offsets.iter().rposition(|&o| o <= s) {
            Some(i) => i,
            None => 0,
        };
        (i, s - self.offsets[i])
    }

    pub fn point_at(&self, s: f64) -> Vec2 {
        let (i, t) = self.locate(s);
        self.segments[i].point_at(t)
    }

    /// Tangent direction (rad) at arc length `s`.
    pub fn heading_at(&self, s: f64) -> f64 {
        let (i, t) = self.locate(s);
        self.segments[i].heading_at(t)
    }

    pub fn curvature_at(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        self.segments[i].curvature()
    }

    pub fn start(&self) -> Vec2 {
        self.point_at(0.0)
    }

    pub fn end(&self) -> Vec2 {
        self.point_at(self.total_length)
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let mut best = (0usize, 0.0, f64::INFINITY);
        for (i, seg) in self.segments.iter().enumerate() {
            let (t, d) = seg.project(p);
            if d < best.2 - GEOM_EPS {
                best = (i, t, d);
            }
        }
        let (i, t, d) = best;
        let seg = &self.segments[i];
        let point = seg.point_at(t);
        let heading = seg.heading_at(t);
        let lateral = Vec2::from_angle(heading).cross(p - point);
        Projection {
            s: self.offsets[i] + t,
            point,
            lateral,
            heading,
            distance: d,
        }
    }

    fn cz_span(&self, net: &Network) -> (f64, f64) {
        // coarse scan then bisection on both boundaries
        let n = (self.total_length / 0.05).ceil() as usize;
        let inside = |s: f64| net.in_conflict_zone(self.point_at(s));
        let ds = self.total_length / n as f64;
        let first = (0..=n).find(|&k| inside(k as f64 * ds));
        let last = (0..=n).rev().find(|&k| inside(k as f64 * ds));
        let (Some(first), Some(last)) = (first, last) else {
            return (self.total_length, self.total_length);
        };
        let bisect = |mut out: f64, mut inn: f64| {
            for _ in 0..60 {
                let mid = 0.5 * (out + inn);
                if inside(mid) {
                    inn = mid;
                } else {
                    out = mid;
                }
            }
            inn
        };
        let enter = if first == 0 { 0.0 } else { bisect((first - 1) as f64 * ds, first as f64 * ds) };
        let leave = if last == n {
            self.total_length
        } else {
            bisect((last + 1) as f64 * ds, last as f64 * ds)
        };
        (enter, leave)
    }

    /// Arc length at which this route settles onto its exit lane.
    fn exit_join_s(&self) -> f64 {
        match self.maneuver {
            Maneuver::Straight => 0.0,
            _ => *self.offsets.last().expect("turning routes have three segments"),
        }
    }

    fn sort_key(&self) -> (LaneId, Maneuver) {
        (self.entry, self.maneuver)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictKind {
    Following,
    Cross,
    Confluence,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Conflict {
    pub kind: ConflictKind,
    pub point: Vec2,
    pub s_on_a: f64,
    pub s_on_b: f64,
}

impl Conflict {
    fn swapped(self) -> Conflict {
        Conflict {
            s_on_a: self.s_on_b,
            s_on_b: self.s_on_a,
            ..self
        }
    }
}

/// All conflicts between two routes.
///
/// Routes sharing an entry lane yield one following conflict at their common
/// start. Routes from different entries that share an exit lane yield one
/// confluence conflict at the point where the later of the two joins the
/// exit lane. Every transversal crossing yields a cross conflict.
pub fn conflict_points(net: &Network, a: &Route, b: &Route) -> Vec<Conflict> {
    // evaluate in a canonical order so both argument orders agree bitwise
    if b.sort_key() < a.sort_key() {
        return conflict_points(net, b, a).into_iter().map(Conflict::swapped).collect();
    }
    let mut out = Vec::new();
    if a.entry == b.entry {
        let point = a.start();
        out.push(Conflict {
            kind: ConflictKind::Following,
            point,
            s_on_a: 0.0,
            s_on_b: b.project(point).s,
        });
    }

    let mut merge: Option<Vec2> = None;
    if a.entry != b.entry && a.exit == b.exit {
        let line = net.centerline(a.exit);
        let ja = a.point_at(a.exit_join_s());
        let jb = b.point_at(b.exit_join_s());
        let ja = if a.maneuver == Maneuver::Straight { line.origin } else { ja };
        let jb = if b.maneuver == Maneuver::Straight { line.origin } else { jb };
        let point = if line.along(ja) >= line.along(jb) { ja } else { jb };
        merge = Some(point);
        out.push(Conflict {
            kind: ConflictKind::Confluence,
            point,
            s_on_a: a.project(point).s,
            s_on_b: b.project(point).s,
        });
    }

    let mut crossings: Vec<Conflict> = Vec::new();
    for (ia, sa) in a.segments.iter().enumerate() {
        for (ib, sb) in b.segments.iter().enumerate() {
            for (ta, tb) in segment_intersections(sa, sb) {
                let ha = Vec2::from_angle(sa.heading_at(ta));
                let hb = Vec2::from_angle(sb.heading_at(tb));
                if ha.cross(hb).abs() < TRANSVERSAL_EPS {
                    continue;
                }
                let point = sa.point_at(ta);
                if merge.is_some_and(|m| m.distance(point) < 1e-6) {
                    continue;
                }
                if crossings.iter().any(|c| c.point.distance(point) < 1e-6) {
                    continue;
                }
                crossings.push(Conflict {
                    kind: ConflictKind::Cross,
                    point,
                    s_on_a: a.offsets[ia] + ta,
                    s_on_b: b.offsets[ib] + tb,
                });
            }
        }
    }
    crossings.sort_by(|x, y| x.s_on_a.total_cmp(&y.s_on_a));
    out.extend(crossings);
    out
}

/// Parameter pairs `(t_a, t_b)` where two segments intersect.
fn segment_intersections(a: &Segment, b: &Segment) -> Vec<(f64, f64)> {
    match (*a, *b) {
        (
            Segment::Line {
                start: p,
                direction: d,
                length: la,
            },
            Segment::Line {
                start: q,
                direction: e,
                length: lb,
            },
        ) => {
            let denom = d.cross(e);
            if denom.abs() < TRANSVERSAL_EPS {
                return Vec::new();
            }
            let w = q - p;
            let t = w.cross(e) / denom;
            let u = w.cross(d) / denom;
            if (-GEOM_EPS..=la + GEOM_EPS).contains(&t) && (-GEOM_EPS..=lb + GEOM_EPS).contains(&u) {
                vec![(t.clamp(0.0, la), u.clamp(0.0, lb))]
            } else {
                Vec::new()
            }
        }
        (Segment::Line { .. }, Segment::Arc { .. }) => line_arc(a, b),
        (Segment::Arc { .. }, Segment::Line { .. }) => line_arc(b, a).into_iter().map(|(u, t)| (t, u)).collect(),
        (
            Segment::Arc {
                center: c1,
                radius: r1,
                start_angle: s1,
                sweep: w1,
            },
            Segment::Arc {
                center: c2,
                radius: r2,
                start_angle: s2,
                sweep: w2,
            },
        ) => {
            let d = c1.distance(c2);
            if d < GEOM_EPS || d > r1 + r2 || d < (r1 - r2).abs() {
                return Vec::new();
            }
            let along = (d * d + r1 * r1 - r2 * r2) / (2.0 * d);
            let h = (r1 * r1 - along * along).max(0.0).sqrt();
            let axis = (c2 - c1) * (1.0 / d);
            let base = c1 + axis * along;
            let mut out = Vec::new();
            for sign in [1.0, -1.0] {
                let p = base + axis.perp() * (sign * h);
                if let (Some(t), Some(u)) = (
                    arc_contains((p - c1).angle(), s1, w1, r1),
                    arc_contains((p - c2).angle(), s2, w2, r2),
                ) {
                    out.push((t, u));
                }
                if h == 0.0 {
                    break;
                }
            }
            out
        }
    }
}

fn line_arc(line: &Segment, arc: &Segment) -> Vec<(f64, f64)> {
    let (
        Segment::Line { start, direction, length },
        Segment::Arc {
            center,
            radius,
            start_angle,
            sweep,
        },
    ) = (*line, *arc)
    else {
        unreachable!()
    };
    // |start + t d - c|^2 = r^2 with |d| = 1
    let w = start - center;
    let b = w.dot(direction);
    let c = w.dot(w) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return Vec::new();
    }
    let root = disc.sqrt();
    let mut out = Vec::new();
    for t in [-b - root, -b + root] {
        if !(-GEOM_EPS..=length + GEOM_EPS).contains(&t) {
            continue;
        }
        let p = start + direction * t;
        if let Some(u) = arc_contains((p - center).angle(), start_angle, sweep, radius) {
            out.push((t.clamp(0.0, length), u));
        }
        if root == 0.0 {
            break;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZoneRole {
    /// Ready: approaching the conflict zone.
    RV,
    /// Passing: inside the conflict zone.
    PV,
    /// Outside: departed.
    OV,
}

impl ZoneRole {
    pub fn is_player(self) -> bool {
        !matches!(self, ZoneRole::OV)
    }
}

pub fn zone_role_at(s: f64, route: &Route, net: &Network) -> ZoneRole {
    if s < route.s_cz_enter - GEOM_EPS {
        ZoneRole::RV
    } else if s < route.s_cz_exit + net.params.exit_margin {
        ZoneRole::PV
    } else {
        ZoneRole::OV
    }
}

pub fn classify_zone_role(state: &VehicleState, route: &Route, net: &Network) -> ZoneRole {
    zone_role_at(route.project(state.position()).s, route, net)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    /// Leading vehicle on the host's lane.
    LV,
    /// Neighbor with a crossing or merging conflict ahead of both.
    NV,
    /// Irrelevant.
    IV,
}

/// How close (m) a vehicle must be to the host's route to count as on it.
pub const SAME_LANE_TOLERANCE: f64 = 1.0;
const SAME_LANE_HEADING: f64 = PI / 6.0;

/// A vehicle as seen by the relation classifier.
#[derive(Debug, Clone, Copy)]
pub struct TrafficView<'a> {
    pub state: &'a VehicleState,
    pub route: &'a Route,
    /// Arc-length position along its own route.
    pub s: f64,
}

/// Gap (m, along the host route) to `other` if it is ahead on the host's lane.
pub fn gap_ahead_on_lane(host: &TrafficView<'_>, other: &TrafficView<'_>) -> Option<f64> {
    let proj = host.route.project(other.state.position());
    if proj.distance > SAME_LANE_TOLERANCE || proj.s <= host.s {
        return None;
    }
    let other_course = other.route.heading_at(other.s);
    if normalize_angle(other_course - proj.heading).abs() > SAME_LANE_HEADING {
        return None;
    }
    Some(proj.s - host.s)
}

/// Relation of `other` from `host`'s point of view. `conflicts` must be
/// `conflict_points(host.route, other.route)`.
pub fn classify_relation(host: &TrafficView<'_>, other: &TrafficView<'_>, conflicts: &[Conflict]) -> Relation {
    if gap_ahead_on_lane(host, other).is_some() {
        return Relation::LV;
    }
    let ahead_of_both = conflicts
        .iter()
        .any(|c| c.kind != ConflictKind::Following && c.s_on_a > host.s && c.s_on_b > other.s);
    if ahead_of_both {
        Relation::NV
    } else {
        Relation::IV
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn net() -> Network {
        build_network(10.0, 2.0, 6.0).unwrap()
    }

    fn lane(road: &str, kind: LaneKind) -> LaneId {
        LaneId {
            road: road.parse().unwrap(),
            kind,
        }
    }

    #[test]
    fn build_rejects_bad_offsets() {
        assert!(build_network(10.0, 6.0, 2.0).is_err());
        assert!(build_network(10.0, 0.0, 6.0).is_err());
        assert!(build_network(5.0, 2.0, 6.0).is_err());
        assert!(build_network(10.0, -2.0, 6.0).is_err());
    }

    #[test]
    fn centerlines_are_right_hand_and_axis_aligned() {
        let n = net();
        assert_eq!(n.roads.len(), 8);
        let m1_inner = n.centerline(lane("M1", LaneKind::Inner));
        assert_relative_eq!(m1_inner.lateral(Vec2::new(-18.0, -2.0)), 0.0, epsilon = 1e-12);
        let m2_inner = n.centerline(lane("M2", LaneKind::Inner));
        assert_relative_eq!(m2_inner.lateral(Vec2::new(2.0, -15.0)), 0.0, epsilon = 1e-12);
        let m3_outer = n.centerline(lane("M3", LaneKind::Outer));
        assert_relative_eq!(m3_outer.lateral(Vec2::new(20.0, 6.0)), 0.0, epsilon = 1e-12);
        // outbound lanes mirror the inbound ones
        let m1_out_inner = n.centerline(lane("M^1", LaneKind::Inner));
        assert_relative_eq!(m1_out_inner.lateral(Vec2::new(-30.0, 2.0)), 0.0, epsilon = 1e-12);
        assert_eq!(m1_out_inner.direction, Vec2::new(-1.0, 0.0));
    }

    #[test]
    fn conflict_zone_boundary() {
        let n = net();
        assert!(n.in_conflict_zone(Vec2::new(10.0, 3.0)));
        assert!(n.in_conflict_zone(Vec2::new(0.0, -10.0)));
        assert!(!n.in_conflict_zone(Vec2::new(10.01, 0.0)));
        assert!(!n.in_conflict_zone(Vec2::new(0.0, -10.01)));
    }

    #[test]
    fn road_ids_round_trip() {
        for s in ["M1", "M2", "M3", "M4", "M^1", "M^4"] {
            assert_eq!(s.parse::<RoadId>().unwrap().to_string(), s);
        }
        assert!("M5".parse::<RoadId>().is_err());
        assert!("N1".parse::<RoadId>().is_err());
    }

    #[test]
    fn straight_route_is_single_line() {
        let n = net();
        let r = route_for(&n, lane("M1", LaneKind::Outer), Maneuver::Straight);
        assert_eq!(r.segments.len(), 1);
        assert_eq!(r.exit, lane("M^3", LaneKind::Outer));
        assert_relative_eq!(r.end().y, -6.0, epsilon = 1e-12);
        assert_relative_eq!(r.total_length, 100.0, epsilon = 1e-12);
        assert_relative_eq!(r.s_cz_enter, 40.0, epsilon = 1e-8);
        assert_relative_eq!(r.s_cz_exit, 60.0, epsilon = 1e-8);
    }

    #[test]
    fn left_turn_radius_forced_by_tangency() {
        let n = net();
        let r = route_for(&n, lane("M1", LaneKind::Inner), Maneuver::Left);
        assert_eq!(r.exit, lane("M^4", LaneKind::Inner));
        let Segment::Arc { center, radius, sweep, .. } = r.segments[1] else {
            panic!("expected arc");
        };
        assert_relative_eq!(sweep, FRAC_PI_2);
        // Independent construction: a circle tangent to y = -2 from above
        // and to x = 2 from the left has center (2 - R, -2 + R); requiring
        // the tangency with y = -2 to sit on the zone edge x = -10 gives R.
        let r_expected = 2.0 - (-10.0);
        assert_relative_eq!(radius, r_expected, epsilon = 1e-12);
        assert_relative_eq!(center.x, 2.0 - r_expected, epsilon = 1e-12);
        assert_relative_eq!(center.y, -2.0 + r_expected, epsilon = 1e-12);
        // tangent points
        assert!(r.point_at(r.offsets[1]).distance(Vec2::new(-10.0, -2.0)) < 1e-12);
        assert!(r.point_at(r.offsets[2]).distance(Vec2::new(2.0, 10.0)) < 1e-12);
    }

    #[test]
    fn right_turn_is_tighter_than_left() {
        let n = net();
        for arm in Arm::ALL {
            let left = route_for(&n, LaneId { road: RoadId::inbound(arm), kind: LaneKind::Inner }, Maneuver::Left);
            let right = route_for(&n, LaneId { road: RoadId::inbound(arm), kind: LaneKind::Outer }, Maneuver::Right);
            let radius = |r: &Route| match r.segments[1] {
                Segment::Arc { radius, .. } => radius,
                _ => unreachable!(),
            };
            assert!(radius(&right) < radius(&left));
        }
    }

    #[test]
    fn routes_are_tangent_continuous() {
        let n = net();
        for arm in Arm::ALL {
            for kind in [LaneKind::Inner, LaneKind::Outer] {
                for m in [Maneuver::Left, Maneuver::Straight, Maneuver::Right] {
                    let r = route_for(&n, LaneId { road: RoadId::inbound(arm), kind }, m);
                    for (i, &o) in r.offsets.iter().enumerate().skip(1) {
                        let before = r.segments[i - 1].point_at(r.segments[i - 1].length());
                        let after = r.segments[i].point_at(0.0);
                        assert!(before.distance(after) < 1e-9);
                        let h0 = r.segments[i - 1].heading_at(r.segments[i - 1].length());
                        let h1 = r.heading_at(o);
                        assert!(normalize_angle(h1 - h0).abs() < 1e-9);
                    }
                    let start_line = n.centerline(r.entry);
                    let end_line = n.centerline(r.exit);
                    assert!(start_line.lateral(r.start()).abs() < 1e-9);
                    assert!(end_line.lateral(r.end()).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn projection_recovers_route_points() {
        let n = net();
        let r = route_for(&n, lane("M2", LaneKind::Inner), Maneuver::Left);
        for k in 0..=50 {
            let s = r.total_length * k as f64 / 50.0;
            let p = r.point_at(s);
            let offset = Vec2::from_angle(r.heading_at(s)).perp() * 0.15;
            let proj = r.project(p + offset);
            assert_relative_eq!(proj.s, s, epsilon = 1e-6);
            assert_relative_eq!(proj.lateral, 0.15, epsilon = 1e-6);
        }
    }

    #[test]
    fn zone_roles() {
        let n = net();
        let r = route_for(&n, lane("M1", LaneKind::Inner), Maneuver::Left);
        let at = |x: f64, y: f64| classify_zone_role(&VehicleState::new(5.0, 0.0, x, y), &r, &n);
        assert_eq!(at(-18.0, -2.0), ZoneRole::RV);
        assert_eq!(at(0.0, 0.0), ZoneRole::PV);
        assert_eq!(at(2.0, 12.0), ZoneRole::PV);
        assert_eq!(at(2.0, 35.0), ZoneRole::OV);
        let mut last = ZoneRole::RV;
        let rank = |z: ZoneRole| z as u8;
        for k in 0..=200 {
            let role = zone_role_at(r.total_length * k as f64 / 200.0, &r, &n);
            assert!(rank(role) >= rank(last));
            last = role;
        }
    }

    #[test]
    fn conflict_kinds() {
        let n = net();
        let v1 = route_for(&n, lane("M1", LaneKind::Inner), Maneuver::Left);
        let v2 = route_for(&n, lane("M2", LaneKind::Inner), Maneuver::Left);
        let cs = conflict_points(&n, &v1, &v2);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].kind, ConflictKind::Cross);
        // symmetric lens of two R = 12 arcs centred at (-10, +-10)
        assert_relative_eq!(cs[0].point.y, 0.0, epsilon = 1e-9);
        assert_relative_eq!(cs[0].point.x, -10.0 + 44f64.sqrt(), epsilon = 1e-9);
        assert!(v1.point_at(cs[0].s_on_a).distance(cs[0].point) < 1e-9);
        assert!(v2.point_at(cs[0].s_on_b).distance(cs[0].point) < 1e-9);

        let same = conflict_points(&n, &v1, &v1.clone());
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].kind, ConflictKind::Following);

        let straight = route_for(&n, lane("M1", LaneKind::Outer), Maneuver::Straight);
        let right = route_for(&n, lane("M2", LaneKind::Outer), Maneuver::Right);
        let cs = conflict_points(&n, &straight, &right);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].kind, ConflictKind::Confluence);
        assert!(cs[0].point.distance(Vec2::new(15.0, -6.0)) < 1e-9);
    }

    #[test]
    fn red_vehicle_left_turn_topology() {
        // M1 inner left-turner against every other standard lane route:
        // inner lanes turn left, outer lanes go straight or turn right.
        let n = net();
        let red = route_for(&n, lane("M1", LaneKind::Inner), Maneuver::Left);
        let mut cross = 0;
        let mut confluence = 0;
        for arm in [Arm::South, Arm::East, Arm::North] {
            let road = RoadId::inbound(arm);
            for (kind, m) in [
                (LaneKind::Inner, Maneuver::Left),
                (LaneKind::Outer, Maneuver::Straight),
                (LaneKind::Outer, Maneuver::Right),
            ] {
                let other = route_for(&n, LaneId { road, kind }, m);
                for c in conflict_points(&n, &red, &other) {
                    match c.kind {
                        ConflictKind::Cross => cross += 1,
                        ConflictKind::Confluence => confluence += 1,
                        ConflictKind::Following => unreachable!(),
                    }
                }
            }
        }
        assert_eq!((cross, confluence), (4, 0));
    }

    #[test]
    fn conflicts_lie_inside_zone() {
        let n = net();
        let mut routes = Vec::new();
        for arm in Arm::ALL {
            for (kind, m) in [
                (LaneKind::Inner, Maneuver::Left),
                (LaneKind::Inner, Maneuver::Straight),
                (LaneKind::Outer, Maneuver::Straight),
                (LaneKind::Outer, Maneuver::Right),
            ] {
                routes.push(route_for(&n, LaneId { road: RoadId::inbound(arm), kind }, m));
            }
        }
        for a in &routes {
            for b in &routes {
                if a == b {
                    continue;
                }
                let ab = conflict_points(&n, a, b);
                let ba = conflict_points(&n, b, a);
                assert_eq!(ab.len(), ba.len());
                for (x, y) in ab.iter().zip(&ba) {
                    assert_eq!((x.kind, x.point), (y.kind, y.point));
                    assert_eq!((x.s_on_a, x.s_on_b), (y.s_on_b, y.s_on_a));
                    if x.kind != ConflictKind::Following {
                        // right-turn merges land on the zone edge or just past it
                        let c = n.params.cz_half_width + n.params.right_turn_radius + n.params.lane_offset_outer;
                        assert!(x.point.x.abs() <= c && x.point.y.abs() <= c);
                    }
                }
            }
        }
    }

    #[test]
    fn relations() {
        let n = net();
        let r1 = route_for(&n, lane("M1", LaneKind::Inner), Maneuver::Left);
        let r2 = route_for(&n, lane("M2", LaneKind::Inner), Maneuver::Left);
        let s_host = VehicleState::new(5.0, 0.0, -30.0, -2.0);
        let host = TrafficView { state: &s_host, route: &r1, s: r1.project(s_host.position()).s };

        let s_lead = VehicleState::new(5.0, 0.0, -22.0, -2.0);
        let lead = TrafficView { state: &s_lead, route: &r1, s: r1.project(s_lead.position()).s };
        let cs = conflict_points(&n, &r1, &r1);
        assert_eq!(classify_relation(&host, &lead, &cs), Relation::LV);
        assert_eq!(gap_ahead_on_lane(&host, &lead), Some(8.0));
        assert_eq!(classify_relation(&lead, &host, &cs), Relation::IV);

        let cs = conflict_points(&n, &r1, &r2);
        let s_nv = VehicleState::new(4.0, FRAC_PI_2, 2.0, -15.0);
        let nv = TrafficView { state: &s_nv, route: &r2, s: r2.project(s_nv.position()).s };
        assert_eq!(classify_relation(&host, &nv, &cs), Relation::NV);

        // the crossing vehicle has already left on M^1
        let s_gone = VehicleState::new(4.0, PI, -20.0, 2.0);
        let gone = TrafficView { state: &s_gone, route: &r2, s: r2.project(s_gone.position()).s };
        assert_eq!(classify_relation(&host, &gone, &cs), Relation::IV);
    }
}
