//! Spinal landmark geometry: parsing 68-point annotation files, per-vertebra
//! direction extraction, Cobb angle triples, ground-truth mask rasterization,
//! and prediction post-processing.
//!
//! Conventions fixed here and relied on by everything downstream:
//! - 17 vertebrae per spine, 4 corner landmarks each, ordered top to bottom.
//! - Corner order within a vertebra: top-left, top-right, bottom-left,
//!   bottom-right.
//! - Image coordinates: x grows right, y grows down, units are pixels.
//! - Angles are unsigned degrees in [0, 90], computed orientation-free via
//!   the absolute cosine between direction vectors.

use crate::tensor::Shape2D;
use thiserror::Error;

pub const VERTEBRA_COUNT: usize = 17;
pub const CORNERS_PER_VERTEBRA: usize = 4;
pub const LANDMARK_COUNT: usize = VERTEBRA_COUNT * CORNERS_PER_VERTEBRA;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("expected {expected} landmarks, found {found}")]
    WrongCount { expected: usize, found: usize },
    #[error("line {line}: invalid numeric token '{token}'")]
    BadToken { line: usize, token: String },
    #[error("line {line}: non-finite coordinate")]
    NonFinite { line: usize },
    #[error("line {line}: expected {expected} comma-separated fields, found {found}")]
    WrongFieldCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("vertebra {index}: left and right edge midpoints coincide")]
    DegenerateVertebra { index: usize },
    #[error("angle {0} is outside [0, 90] or non-finite")]
    AngleOutOfRange(f64),
    #[error("cannot ensemble an empty prediction list")]
    EmptyEnsemble,
    #[error("prediction lists have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// A point in image coordinates (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// The three reported Cobb angle slots, in degrees. Slot order in files and
/// reports is (pt, mt, tl): proximal-thoracic, main-thoracic, thoracolumbar.
/// For triples produced by [`cobb_angles`] the main-thoracic slot dominates
/// the other two by construction; externally supplied triples (model
/// predictions) are only required to lie in [0, 90].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CobbTriple {
    pub pt: f64,
    pub mt: f64,
    pub tl: f64,
}

impl CobbTriple {
    pub fn new(pt: f64, mt: f64, tl: f64) -> Result<Self, GeometryError> {
        for v in [pt, mt, tl] {
            if !v.is_finite() || !(0.0..=90.0).contains(&v) {
                return Err(GeometryError::AngleOutOfRange(v));
            }
        }
        Ok(CobbTriple { pt, mt, tl })
    }

    pub fn slots(&self) -> [f64; 3] {
        [self.pt, self.mt, self.tl]
    }

    pub fn from_slots(slots: [f64; 3]) -> Result<Self, GeometryError> {
        Self::new(slots[0], slots[1], slots[2])
    }
}

/// 17 x 4 corner points of one annotated spine.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    corners: [[Point; CORNERS_PER_VERTEBRA]; VERTEBRA_COUNT],
}

impl LandmarkSet {
    pub fn new(
        corners: [[Point; CORNERS_PER_VERTEBRA]; VERTEBRA_COUNT],
    ) -> Result<Self, GeometryError> {
        for (v, quad) in corners.iter().enumerate() {
            for p in quad {
                if !p.x.is_finite() || !p.y.is_finite() {
                    return Err(GeometryError::NonFinite { line: v + 1 });
                }
            }
        }
        Ok(LandmarkSet { corners })
    }

    /// Build from 68 points in vertebra-major corner order.
    pub fn from_flat(points: &[Point]) -> Result<Self, GeometryError> {
        if points.len() != LANDMARK_COUNT {
            return Err(GeometryError::WrongCount {
                expected: LANDMARK_COUNT,
                found: points.len(),
            });
        }
        let mut corners = [[Point::new(0.0, 0.0); CORNERS_PER_VERTEBRA]; VERTEBRA_COUNT];
        for v in 0..VERTEBRA_COUNT {
            for c in 0..CORNERS_PER_VERTEBRA {
                corners[v][c] = points[v * CORNERS_PER_VERTEBRA + c];
            }
        }
        Self::new(corners)
    }

    pub fn vertebra(&self, index: usize) -> &[Point; CORNERS_PER_VERTEBRA] {
        &self.corners[index]
    }

    /// All 68 points, vertebra-major.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        self.corners.iter().flatten().copied()
    }

    /// Apply a point transform to every landmark.
    pub fn transform(&self, f: impl Fn(Point) -> Point) -> Result<Self, GeometryError> {
        let mut corners = self.corners;
        for quad in corners.iter_mut() {
            for p in quad.iter_mut() {
                *p = f(*p);
            }
        }
        Self::new(corners)
    }

    pub fn centroid_y(&self, vertebra: usize) -> f64 {
        self.corners[vertebra].iter().map(|p| p.y).sum::<f64>() / CORNERS_PER_VERTEBRA as f64
    }

    /// Real annotations can jitter, so a non-monotone vertical ordering of
    /// vertebra centroids is reported as warnings rather than rejected.
    pub fn monotonicity_warnings(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        for v in 1..VERTEBRA_COUNT {
            let prev = self.centroid_y(v - 1);
            let cur = self.centroid_y(v);
            if cur < prev {
                warnings.push(format!(
                    "vertebra {v} centroid y {cur:.3} above vertebra {} centroid y {prev:.3}",
                    v - 1
                ));
            }
        }
        warnings
    }

    pub fn out_of_bounds(&self, shape: Shape2D) -> bool {
        let (w, h) = (shape.width as f64, shape.height as f64);
        self.points()
            .any(|p| p.x < 0.0 || p.x > w || p.y < 0.0 || p.y > h)
    }
}

/// Corner layout of a vertebra built from a center, a unit left-to-right
/// direction, and body width/height. Shared by tests and the synthetic
/// data generator.
pub fn make_vertebra(
    center: Point,
    direction: [f64; 2],
    width: f64,
    height: f64,
) -> [Point; CORNERS_PER_VERTEBRA] {
    let (dx, dy) = (direction[0], direction[1]);
    // Down-spine axis: direction rotated a quarter turn toward +y.
    let (tx, ty) = (-dy, dx);
    let (hw, hh) = (width / 2.0, height / 2.0);
    let at = |sx: f64, sy: f64| {
        Point::new(
            center.x + sx * hw * dx + sy * hh * tx,
            center.y + sx * hw * dy + sy * hh * ty,
        )
    };
    // TL, TR, BL, BR
    [at(-1.0, -1.0), at(1.0, -1.0), at(-1.0, 1.0), at(1.0, 1.0)]
}

// ---------------------------------------------------------------------------
// Landmark file I/O
// ---------------------------------------------------------------------------

/// On-disk layouts for landmark files.
///
/// `Interleaved` is the canonical format: 68 lines of `x,y` in pixels,
/// vertebra-major corner order. `ChallengeRow` is a single comma-separated
/// row of 136 values, all 68 x coordinates followed by all 68 y coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLayout {
    Interleaved,
    ChallengeRow,
}

/// Parse a landmark file. When `normalized` is set, coordinates are scaled
/// from [0, 1] to pixels using `image`.
pub fn parse_landmarks(
    text: &str,
    layout: LandmarkLayout,
    normalized: bool,
    image: Shape2D,
) -> Result<LandmarkSet, GeometryError> {
    let values = match layout {
        LandmarkLayout::Interleaved => parse_interleaved(text)?,
        LandmarkLayout::ChallengeRow => parse_challenge_row(text)?,
    };
    let mut points = Vec::with_capacity(LANDMARK_COUNT);
    match layout {
        LandmarkLayout::Interleaved => {
            for pair in values.chunks_exact(2) {
                points.push(Point::new(pair[0], pair[1]));
            }
        }
        LandmarkLayout::ChallengeRow => {
            for i in 0..LANDMARK_COUNT {
                points.push(Point::new(values[i], values[LANDMARK_COUNT + i]));
            }
        }
    }
    if normalized {
        let (w, h) = (image.width as f64, image.height as f64);
        for p in points.iter_mut() {
            p.x *= w;
            p.y *= h;
        }
    }
    LandmarkSet::from_flat(&points)
}

fn parse_number(token: &str, line: usize) -> Result<f64, GeometryError> {
    let v: f64 = token.trim().parse().map_err(|_| GeometryError::BadToken {
        line,
        token: token.trim().to_string(),
    })?;
    if !v.is_finite() {
        return Err(GeometryError::NonFinite { line });
    }
    Ok(v)
}

fn parse_interleaved(text: &str) -> Result<Vec<f64>, GeometryError> {
    let mut values = Vec::with_capacity(2 * LANDMARK_COUNT);
    let mut rows = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 2 {
            return Err(GeometryError::WrongFieldCount {
                line,
                expected: 2,
                found: fields.len(),
            });
        }
        values.push(parse_number(fields[0], line)?);
        values.push(parse_number(fields[1], line)?);
        rows += 1;
    }
    if rows != LANDMARK_COUNT {
        return Err(GeometryError::WrongCount {
            expected: LANDMARK_COUNT,
            found: rows,
        });
    }
    Ok(values)
}

fn parse_challenge_row(text: &str) -> Result<Vec<f64>, GeometryError> {
    let mut values = Vec::with_capacity(2 * LANDMARK_COUNT);
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        for token in raw.split(',').flat_map(|t| t.split_whitespace()) {
            if token.is_empty() {
                continue;
            }
            values.push(parse_number(token, line)?);
        }
    }
    if values.len() != 2 * LANDMARK_COUNT {
        return Err(GeometryError::WrongCount {
            expected: 2 * LANDMARK_COUNT,
            found: values.len(),
        });
    }
    Ok(values)
}

/// Serialize landmarks. Values are written with Rust's shortest
/// round-tripping float format, so write -> parse reproduces the exact same
/// f64 bits (for non-normalized output).
pub fn write_landmarks(
    lm: &LandmarkSet,
    layout: LandmarkLayout,
    normalized: bool,
    image: Shape2D,
) -> String {
    let (w, h) = (image.width as f64, image.height as f64);
    let coord = |p: Point| {
        if normalized {
            (p.x / w, p.y / h)
        } else {
            (p.x, p.y)
        }
    };
    match layout {
        LandmarkLayout::Interleaved => {
            let mut out = String::new();
            for p in lm.points() {
                let (x, y) = coord(p);
                out.push_str(&format!("{x},{y}\n"));
            }
            out
        }
        LandmarkLayout::ChallengeRow => {
            let pts: Vec<(f64, f64)> = lm.points().map(coord).collect();
            let xs: Vec<String> = pts.iter().map(|(x, _)| format!("{x}")).collect();
            let ys: Vec<String> = pts.iter().map(|(_, y)| format!("{y}")).collect();
            format!("{},{}\n", xs.join(","), ys.join(","))
        }
    }
}

// ---------------------------------------------------------------------------
// Cobb angles
// ---------------------------------------------------------------------------

/// Unit left-to-right axis of one vertebra: from the midpoint of its left
/// edge (top-left, bottom-left) to the midpoint of its right edge.
pub fn vertebra_direction(
    corners: &[Point; CORNERS_PER_VERTEBRA],
) -> Result<[f64; 2], GeometryError> {
    let [tl, tr, bl, br] = corners;
    let left = Point::new((tl.x + bl.x) / 2.0, (tl.y + bl.y) / 2.0);
    let right = Point::new((tr.x + br.x) / 2.0, (tr.y + br.y) / 2.0);
    let dx = right.x - left.x;
    let dy = right.y - left.y;
    let len = (dx * dx + dy * dy).sqrt();
    if len == 0.0 {
        return Err(GeometryError::DegenerateVertebra { index: 0 });
    }
    Ok([dx / len, dy / len])
}

/// Unsigned angle between two unit direction vectors, in degrees, folded to
/// [0, 90] via the absolute dot product (arccos |a.b|). Orientation-free:
/// flipping either vector does not change the result. Evaluated as
/// atan2(|cross|, |dot|), which computes the same angle but stays
/// well-conditioned near 0 and 90 degrees where arccos loses half the
/// available precision.
pub fn pairwise_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dot = (a[0] * b[0] + a[1] * b[1]).abs();
    let cross = (a[0] * b[1] - a[1] * b[0]).abs();
    cross.atan2(dot).to_degrees()
}

/// Cobb triple from one landmark set, plus the chosen main-thoracic
/// vertebra pair (a, b).
///
/// The main-thoracic angle is the maximum pairwise angle over all vertebra
/// pairs i < j; ties resolve to the smallest a, then smallest b. The
/// proximal-thoracic slot is the largest angle between vertebra a and any
/// vertebra at or above it; the thoracolumbar slot is the largest angle
/// between vertebra b and any vertebra at or below it.
pub fn cobb_angles(lm: &LandmarkSet) -> Result<(CobbTriple, (usize, usize)), GeometryError> {
    let mut directions = Vec::with_capacity(VERTEBRA_COUNT);
    for v in 0..VERTEBRA_COUNT {
        let d = vertebra_direction(lm.vertebra(v))
            .map_err(|_| GeometryError::DegenerateVertebra { index: v })?;
        directions.push(d);
    }

    let mut mt = 0.0;
    let (mut a, mut b) = (0usize, 0usize);
    for i in 0..VERTEBRA_COUNT {
        for j in (i + 1)..VERTEBRA_COUNT {
            let angle = pairwise_angle(directions[i], directions[j]);
            if angle > mt {
                mt = angle;
                a = i;
                b = j;
            }
        }
    }

    // The i == a and j == b self-angles are identically zero and cannot
    // raise a max over non-negative angles, so the scans skip them.
    let mut pt = 0.0;
    for i in 0..a {
        let angle = pairwise_angle(directions[i], directions[a]);
        if angle > pt {
            pt = angle;
        }
    }
    let mut tl = 0.0;
    for j in (b + 1)..VERTEBRA_COUNT {
        let angle = pairwise_angle(directions[b], directions[j]);
        if angle > tl {
            tl = angle;
        }
    }

    Ok((CobbTriple::new(pt, mt, tl)?, (a, b)))
}

/// Zero out any slot strictly below `cutoff` degrees. A slot exactly at the
/// cutoff is kept.
pub fn threshold_small_angles(t: CobbTriple, cutoff: f64) -> CobbTriple {
    let zero_small = |v: f64| if v < cutoff { 0.0 } else { v };
    CobbTriple {
        pt: zero_small(t.pt),
        mt: zero_small(t.mt),
        tl: zero_small(t.tl),
    }
}

/// Slot-wise arithmetic mean of several predictions.
pub fn ensemble_mean(predictions: &[CobbTriple]) -> Result<CobbTriple, GeometryError> {
    if predictions.is_empty() {
        return Err(GeometryError::EmptyEnsemble);
    }
    let n = predictions.len() as f64;
    let mut acc = [0.0f64; 3];
    for p in predictions {
        for (a, v) in acc.iter_mut().zip(p.slots()) {
            *a += v;
        }
    }
    CobbTriple::new(acc[0] / n, acc[1] / n, acc[2] / n)
}

// ---------------------------------------------------------------------------
// Mask rasterization
// ---------------------------------------------------------------------------

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_BONE: u8 = 1;
pub const LABEL_GAP: u8 = 2;

/// Dense 3-class segmentation mask: background, vertebra bone, and the gap
/// between consecutive vertebrae.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    shape: Shape2D,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn new(shape: Shape2D, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), shape.pixels(), "label buffer size mismatch");
        SegMask { shape, labels }
    }

    pub fn shape(&self) -> Shape2D {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.shape.width + x]
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }
}

/// Horizontal crossings of a polygon boundary with the scanline at `yc`.
/// Edges are half-open in y (an edge covers min(y1,y2) <= yc < max(y1,y2)),
/// so a vertex lying exactly on a scanline is counted once.
fn scanline_crossings(poly: &[Point], yc: f64, out: &mut Vec<f64>) {
    out.clear();
    let n = poly.len();
    for i in 0..n {
        let p1 = poly[i];
        let p2 = poly[(i + 1) % n];
        if (p1.y <= yc) != (p2.y <= yc) {
            let t = (yc - p1.y) / (p2.y - p1.y);
            out.push(p1.x + t * (p2.x - p1.x));
        }
    }
    out.sort_by(|a, b| a.partial_cmp(b).expect("finite crossing"));
}

/// Scanline-fill `poly` into `labels` using even-odd parity at pixel
/// centers. A pixel (px, py) is covered when its center (px+0.5, py+0.5)
/// falls inside the polygon.
fn fill_polygon(labels: &mut [u8], shape: Shape2D, poly: &[Point], mut set: impl FnMut(&mut u8)) {
    let mut crossings = Vec::with_capacity(poly.len());
    for py in 0..shape.height {
        let yc = py as f64 + 0.5;
        scanline_crossings(poly, yc, &mut crossings);
        for pair in crossings.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            // First pixel whose center is >= xa; fill while center < xb.
            let mut px = (xa - 0.5).ceil().max(0.0) as usize;
            while px < shape.width && (px as f64 + 0.5) < xb {
                set(&mut labels[py * shape.width + px]);
                px += 1;
            }
        }
    }
}

/// Rasterize ground-truth labels for one spine. Each vertebra quad fills as
/// bone; the quad spanned by vertebra i's bottom edge and vertebra i+1's top
/// edge fills as gap. Bone wins where the two overlap. Landmarks outside the
/// grid are clamped onto it (callers may warn via
/// [`LandmarkSet::out_of_bounds`]).
pub fn rasterize_mask(lm: &LandmarkSet, out: Shape2D) -> SegMask {
    let (w, h) = (out.width as f64, out.height as f64);
    let clamp = |p: Point| Point::new(p.x.clamp(0.0, w), p.y.clamp(0.0, h));
    let quad: Vec<[Point; 4]> = (0..VERTEBRA_COUNT)
        .map(|v| {
            let [tl, tr, bl, br] = *lm.vertebra(v);
            [clamp(tl), clamp(tr), clamp(bl), clamp(br)]
        })
        .collect();

    let mut labels = vec![LABEL_BACKGROUND; out.pixels()];
    // Gap first, bone second: bone overwrites unconditionally, so it wins on
    // overlap and the two classes stay disjoint.
    for v in 0..VERTEBRA_COUNT - 1 {
        let [_, _, bl, br] = quad[v];
        let [tl_next, tr_next, _, _] = quad[v + 1];
        let gap_poly = [bl, br, tr_next, tl_next];
        fill_polygon(&mut labels, out, &gap_poly, |l| *l = LABEL_GAP);
    }
    for q in &quad {
        let [tl, tr, bl, br] = *q;
        let bone_poly = [tl, tr, br, bl];
        fill_polygon(&mut labels, out, &bone_poly, |l| *l = LABEL_BONE);
    }
    SegMask::new(out, labels)
}

// ---------------------------------------------------------------------------
// Angle CSV formats
// ---------------------------------------------------------------------------

/// Report form: fixed 4 decimals, slot order pt,mt,tl.
pub fn format_triple_fixed(t: &CobbTriple) -> String {
    format!("{:.4},{:.4},{:.4}", t.pt, t.mt, t.tl)
}

/// Exact form: shortest round-tripping float format. Used for generated
/// ground truth so that re-deriving angles from landmarks reproduces the
/// stored values without quantization loss.
pub fn format_triple_exact(t: &CobbTriple) -> String {
    format!("{},{},{}", t.pt, t.mt, t.tl)
}

/// Parse one `a1,a2,a3` line (either precision).
pub fn parse_triple_line(line: &str, line_no: usize) -> Result<CobbTriple, GeometryError> {
    let fields: Vec<&str> = line.trim().split(',').collect();
    if fields.len() != 3 {
        return Err(GeometryError::WrongFieldCount {
            line: line_no,
            expected: 3,
            found: fields.len(),
        });
    }
    let pt = parse_number(fields[0], line_no)?;
    let mt = parse_number(fields[1], line_no)?;
    let tl = parse_number(fields[2], line_no)?;
    CobbTriple::new(pt, mt, tl)
}

/// Read a one-record angle file (a single `a1,a2,a3` line).
pub fn read_angle_file(text: &str) -> Result<CobbTriple, GeometryError> {
    let line =
        text.lines()
            .find(|l| !l.trim().is_empty())
            .ok_or(GeometryError::WrongFieldCount {
                line: 1,
                expected: 3,
                found: 0,
            })?;
    parse_triple_line(line, 1)
}

/// Write a predictions table: header plus one `id,a1,a2,a3` row per record,
/// 4-decimal angles. The id column makes evaluation order-insensitive.
pub fn write_predictions(rows: &[(String, CobbTriple)]) -> String {
    let mut out = String::from("id,angle1,angle2,angle3\n");
    for (id, t) in rows {
        out.push_str(&format!("{id},{}\n", format_triple_fixed(t)));
    }
    out
}

/// Parse a predictions table; tolerates a missing header.
pub fn read_predictions(text: &str) -> Result<Vec<(String, CobbTriple)>, GeometryError> {
    let mut rows = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(GeometryError::WrongFieldCount {
                line: line_no,
                expected: 4,
                found: fields.len(),
            });
        }
        if idx == 0 && fields[0].trim() == "id" {
            continue;
        }
        let pt = parse_number(fields[1], line_no)?;
        let mt = parse_number(fields[2], line_no)?;
        let tl = parse_number(fields[3], line_no)?;
        rows.push((fields[0].trim().to_string(), CobbTriple::new(pt, mt, tl)?));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_spine() -> LandmarkSet {
        let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
        for (v, quad) in corners.iter_mut().enumerate() {
            *quad = make_vertebra(
                Point::new(50.0, 10.0 + 12.0 * v as f64),
                [1.0, 0.0],
                20.0,
                8.0,
            );
        }
        LandmarkSet::new(corners).unwrap()
    }

    fn fan_spine() -> LandmarkSet {
        let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
        for (v, quad) in corners.iter_mut().enumerate() {
            let theta = (v as f64 * 5.0).to_radians();
            *quad = make_vertebra(
                Point::new(50.0, 10.0 + 12.0 * v as f64),
                [theta.cos(), theta.sin()],
                20.0,
                8.0,
            );
        }
        LandmarkSet::new(corners).unwrap()
    }

    #[test]
    fn direction_of_axis_aligned_rectangle() {
        let quad = make_vertebra(Point::new(10.0, 10.0), [1.0, 0.0], 8.0, 4.0);
        let d = vertebra_direction(&quad).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-15);
        assert!(d[1].abs() < 1e-15);
    }

    #[test]
    fn direction_of_rotated_rectangle() {
        let theta = 30f64.to_radians();
        let quad = make_vertebra(Point::new(0.0, 0.0), [theta.cos(), theta.sin()], 8.0, 4.0);
        let d = vertebra_direction(&quad).unwrap();
        assert!((d[0] - theta.cos()).abs() < 1e-12);
        assert!((d[1] - theta.sin()).abs() < 1e-12);
    }

    #[test]
    fn direction_matches_independent_midpoints() {
        let mut rng = crate::rng::Rng::new(5);
        for _ in 0..50 {
            let quad = [
                Point::new(rng.range_f64(0.0, 10.0), rng.range_f64(0.0, 10.0)),
                Point::new(rng.range_f64(20.0, 30.0), rng.range_f64(0.0, 10.0)),
                Point::new(rng.range_f64(0.0, 10.0), rng.range_f64(20.0, 30.0)),
                Point::new(rng.range_f64(20.0, 30.0), rng.range_f64(20.0, 30.0)),
            ];
            let d = vertebra_direction(&quad).unwrap();
            // Recompute from scratch.
            let mx = ((quad[1].x + quad[3].x) - (quad[0].x + quad[2].x)) / 2.0;
            let my = ((quad[1].y + quad[3].y) - (quad[0].y + quad[2].y)) / 2.0;
            let len = (mx * mx + my * my).sqrt();
            assert!((d[0] - mx / len).abs() < 1e-12);
            assert!((d[1] - my / len).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_vertebra_is_an_error() {
        let p = Point::new(1.0, 1.0);
        let quad = [p, p, p, p];
        assert!(vertebra_direction(&quad).is_err());
    }

    #[test]
    fn pairwise_angle_basics() {
        assert_eq!(pairwise_angle([1.0, 0.0], [1.0, 0.0]), 0.0);
        assert!((pairwise_angle([1.0, 0.0], [0.0, 1.0]) - 90.0).abs() < 1e-12);
        let a = [10f64.to_radians().cos(), 10f64.to_radians().sin()];
        let b = [40f64.to_radians().cos(), 40f64.to_radians().sin()];
        assert!((pairwise_angle(a, b) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn parallel_spine_has_zero_angles() {
        let (t, _) = cobb_angles(&straight_spine()).unwrap();
        assert_eq!(t.slots(), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_spine_is_a_pure_main_thoracic_curve() {
        let (t, (a, b)) = cobb_angles(&fan_spine()).unwrap();
        assert!((t.mt - 80.0).abs() < 1e-9);
        assert!(t.pt.abs() < 1e-9);
        assert!(t.tl.abs() < 1e-9);
        assert_eq!((a, b), (0, 16));
    }

    #[test]
    fn landmark_interleaved_round_trip() {
        let lm = fan_spine();
        let shape = Shape2D::new(200, 100);
        let text = write_landmarks(&lm, LandmarkLayout::Interleaved, false, shape);
        let back = parse_landmarks(&text, LandmarkLayout::Interleaved, false, shape).unwrap();
        assert_eq!(lm, back);
    }

    #[test]
    fn landmark_challenge_row_round_trip_is_bit_exact() {
        let lm = fan_spine();
        let shape = Shape2D::new(200, 100);
        let text = write_landmarks(&lm, LandmarkLayout::ChallengeRow, false, shape);
        let back = parse_landmarks(&text, LandmarkLayout::ChallengeRow, false, shape).unwrap();
        assert_eq!(lm, back);
        let again = write_landmarks(&back, LandmarkLayout::ChallengeRow, false, shape);
        assert_eq!(text, again);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        // 67 rows
        let mut text = String::new();
        for i in 0..67 {
            text.push_str(&format!("{i},{i}\n"));
        }
        let shape = Shape2D::new(10, 10);
        assert_eq!(
            parse_landmarks(&text, LandmarkLayout::Interleaved, false, shape).unwrap_err(),
            GeometryError::WrongCount {
                expected: 68,
                found: 67
            }
        );

        let mut bad = String::new();
        for i in 0..68 {
            if i == 12 {
                bad.push_str("3.0,oops\n");
            } else {
                bad.push_str("1.0,2.0\n");
            }
        }
        assert_eq!(
            parse_landmarks(&bad, LandmarkLayout::Interleaved, false, shape).unwrap_err(),
            GeometryError::BadToken {
                line: 13,
                token: "oops".to_string()
            }
        );
    }

    #[test]
    fn normalized_parse_scales_by_image_shape() {
        let mut text = String::new();
        for _ in 0..68 {
            text.push_str("0.5,0.25\n");
        }
        let lm = parse_landmarks(
            &text,
            LandmarkLayout::Interleaved,
            true,
            Shape2D::new(400, 200),
        )
        .unwrap();
        let p = lm.vertebra(0)[0];
        assert_eq!((p.x, p.y), (100.0, 100.0));
    }

    #[test]
    fn threshold_zeroes_strictly_below_cutoff() {
        let t = CobbTriple::new(3.9, 10.0, 4.0).unwrap();
        let out = threshold_small_angles(t, 4.0);
        assert_eq!(out.slots(), [0.0, 10.0, 4.0]);

        let zero = CobbTriple::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(threshold_small_angles(zero, 4.0).slots(), [0.0, 0.0, 0.0]);

        let t = CobbTriple::new(45.0, 3.99, 12.0).unwrap();
        assert_eq!(threshold_small_angles(t, 4.0).slots(), [45.0, 0.0, 12.0]);
        // Idempotent.
        let once = threshold_small_angles(t, 4.0);
        assert_eq!(threshold_small_angles(once, 4.0), once);
    }

    #[test]
    fn ensemble_mean_behaviour() {
        let a = CobbTriple::new(10.0, 10.0, 10.0).unwrap();
        let b = CobbTriple::new(20.0, 20.0, 20.0).unwrap();
        assert_eq!(ensemble_mean(&[a, b]).unwrap().slots(), [15.0, 15.0, 15.0]);
        assert_eq!(ensemble_mean(&[a]).unwrap(), a);
        assert_eq!(
            ensemble_mean(&[a, b]).unwrap(),
            ensemble_mean(&[b, a]).unwrap()
        );
        assert_eq!(
            ensemble_mean(&[]).unwrap_err(),
            GeometryError::EmptyEnsemble
        );
    }

    /// Independent even-odd point-in-polygon test used as the rasterization
    /// oracle: count boundary crossings strictly to the right of the point.
    fn point_in_polygon(poly: &[Point], x: f64, y: f64) -> bool {
        let n = poly.len();
        let mut crossings = 0;
        for i in 0..n {
            let p1 = poly[i];
            let p2 = poly[(i + 1) % n];
            if (p1.y <= y) != (p2.y <= y) {
                let t = (y - p1.y) / (p2.y - p1.y);
                let xc = p1.x + t * (p2.x - p1.x);
                if xc > x {
                    crossings += 1;
                }
            }
        }
        crossings % 2 == 1
    }

    #[test]
    fn single_vertebra_bone_count_matches_pixel_center_rule() {
        let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
        for (v, quad) in corners.iter_mut().enumerate() {
            // One real quad; the rest collapse far outside the grid so they
            // contribute no pixels.
            *quad = if v == 0 {
                make_vertebra(Point::new(20.25, 10.75), [1.0, 0.0], 12.0, 6.0)
            } else {
                make_vertebra(Point::new(-500.0, -500.0), [1.0, 0.0], 0.5, 0.5)
            };
        }
        let lm = LandmarkSet::new(corners).unwrap();
        let shape = Shape2D::new(32, 48);
        let mask = rasterize_mask(&lm, shape);

        let quad = lm.vertebra(0);
        let poly = [quad[0], quad[1], quad[3], quad[2]];
        let mut expected = 0usize;
        for py in 0..shape.height {
            for px in 0..shape.width {
                if point_in_polygon(&poly, px as f64 + 0.5, py as f64 + 0.5) {
                    expected += 1;
                }
            }
        }
        assert_eq!(mask.count(LABEL_BONE), expected);
        assert!(expected > 0);
    }

    #[test]
    fn bone_and_gap_are_disjoint_and_gap_nonempty_for_spaced_spine() {
        let lm = straight_spine();
        let shape = Shape2D::new(256, 100);
        let mask = rasterize_mask(&lm, shape);
        assert!(mask.count(LABEL_BONE) > 0);
        assert!(mask.count(LABEL_GAP) > 0);
        // Disjoint by construction: every pixel has exactly one label.
        assert_eq!(
            mask.count(LABEL_BONE) + mask.count(LABEL_GAP) + mask.count(LABEL_BACKGROUND),
            shape.pixels()
        );
    }

    #[test]
    fn bone_pixels_match_point_in_polygon_oracle() {
        let lm = fan_spine();
        let shape = Shape2D::new(256, 100);
        let mask = rasterize_mask(&lm, shape);
        let polys: Vec<[Point; 4]> = (0..VERTEBRA_COUNT)
            .map(|v| {
                let q = lm.vertebra(v);
                [q[0], q[1], q[3], q[2]]
            })
            .collect();
        for py in 0..shape.height {
            for px in 0..shape.width {
                let inside = polys
                    .iter()
                    .any(|p| point_in_polygon(p, px as f64 + 0.5, py as f64 + 0.5));
                assert_eq!(
                    mask.get(py, px) == LABEL_BONE,
                    inside,
                    "disagreement at ({px},{py})"
                );
            }
        }
    }

    #[test]
    fn predictions_round_trip() {
        let rows = vec![
            (
                "case_a".to_string(),
                CobbTriple::new(1.5, 30.0, 4.25).unwrap(),
            ),
            (
                "case_b".to_string(),
                CobbTriple::new(0.0, 80.0, 0.0).unwrap(),
            ),
        ];
        let text = write_predictions(&rows);
        let back = read_predictions(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "case_a");
        assert!((back[0].1.mt - 30.0).abs() < 1e-12);
    }

    #[test]
    fn triple_csv_formats() {
        let t = CobbTriple::new(0.0, 80.0, 0.0).unwrap();
        assert_eq!(format_triple_fixed(&t), "0.0000,80.0000,0.0000");
        let exact = format_triple_exact(&t);
        let back = parse_triple_line(&exact, 1).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn monotonicity_warning_fires_on_swapped_vertebrae() {
        let mut corners = [[Point::new(0.0, 0.0); 4]; VERTEBRA_COUNT];
        for (v, quad) in corners.iter_mut().enumerate() {
            let y = if v == 5 { 0.0 } else { 10.0 + 12.0 * v as f64 };
            *quad = make_vertebra(Point::new(50.0, y), [1.0, 0.0], 20.0, 8.0);
        }
        let lm = LandmarkSet::new(corners).unwrap();
        assert!(!lm.monotonicity_warnings().is_empty());
        assert!(straight_spine().monotonicity_warnings().is_empty());
    }
}
