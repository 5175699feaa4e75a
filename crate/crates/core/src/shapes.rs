//! Point sets, the procedural 2D shape corpus, and the Chamfer metric.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::Rng as _;
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

/// Default number of surface points per shape.
pub const DEFAULT_POINTS: usize = 256;
/// Default surface jitter (workspace units, after normalisation).
pub const DEFAULT_JITTER: f64 = 0.005;
/// Normalised maximum extent of every corpus shape.
pub const NORMALIZED_EXTENT: f64 = 1.6;

/// An ordered set of 2D points stored as an `N x 2` array.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Array2<f64>,
}

impl PointSet {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.ncols() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "N x 2".into(),
                got: format!("{} x {}", points.nrows(), points.ncols()),
            });
        }
        Ok(Self { points })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            points: Array2::zeros((n, 2)),
        }
    }

    pub fn from_vec(points: &[[f64; 2]]) -> Self {
        let mut a = Array2::zeros((points.len(), 2));
        for (i, p) in points.iter().enumerate() {
            a[[i, 0]] = p[0];
            a[[i, 1]] = p[1];
        }
        Self { points: a }
    }

    /// Standard-normal point set of `n` points.
    pub fn gaussian(n: usize, rng: &mut Rng) -> Self {
        let mut a = Array2::zeros((n, 2));
        for v in a.iter_mut() {
            *v = rng::normal(rng);
        }
        Self { points: a }
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn point(&self, i: usize) -> [f64; 2] {
        [self.points[[i, 0]], self.points[[i, 1]]]
    }

    pub fn to_vec(&self) -> Vec<[f64; 2]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|v| v.is_finite())
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.len().max(1) as f64;
        let mut c = [0.0; 2];
        for row in self.points.rows() {
            c[0] += row[0];
            c[1] += row[1];
        }
        [c[0] / n, c[1] / n]
    }

    /// Frobenius norm over all coordinates.
    pub fn norm(&self) -> f64 {
        self.points.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Returns `(min, max)` corners of the axis-aligned bounding box.
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for row in self.points.rows() {
            for d in 0..2 {
                lo[d] = lo[d].min(row[d]);
                hi[d] = hi[d].max(row[d]);
            }
        }
        (lo, hi)
    }

    pub fn check_same_shape(&self, other: &PointSet) -> Result<()> {
        if self.points.dim() != other.points.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.points.dim()),
                got: format!("{:?}", other.points.dim()),
            });
        }
        Ok(())
    }
}

impl Serialize for PointSet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PointSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let pts: Vec<[f64; 2]> = Vec::deserialize(d)?;
        let ps = PointSet::from_vec(&pts);
        if !ps.is_finite() {
            return Err(D::Error::custom("non-finite coordinate in point set"));
        }
        Ok(ps)
    }
}

/// Shape families of the procedural corpus. Dimensions are in arbitrary units;
/// every sampled shape is renormalised to [`NORMALIZED_EXTENT`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum ShapeFamily {
    Disc {
        radius: f64,
    },
    Box {
        width: f64,
        height: f64,
    },
    /// Horizontal stadium: straight section `length` plus two caps of `radius`.
    Capsule {
        length: f64,
        radius: f64,
    },
    /// Vertical bar on the left, foot along the bottom.
    LShape {
        width: f64,
        height: f64,
        thickness: f64,
    },
    /// Rounded body with `legs` rectangular legs hanging below it.
    #[serde(rename = "n-legged-blob")]
    Blob {
        legs: u8,
        body_width: f64,
        body_height: f64,
        leg_length: f64,
        leg_width: f64,
    },
    Star {
        arms: u8,
        outer: f64,
        inner: f64,
    },
    /// Annular sector (an arch when the sweep is centred on the vertical).
    RingSegment {
        outer: f64,
        inner: f64,
        sweep: f64,
    },
}

pub const FAMILY_COUNT: usize = 7;

impl ShapeFamily {
    pub fn index(&self) -> usize {
        match self {
            ShapeFamily::Disc { .. } => 0,
            ShapeFamily::Box { .. } => 1,
            ShapeFamily::Capsule { .. } => 2,
            ShapeFamily::LShape { .. } => 3,
            ShapeFamily::Blob { .. } => 4,
            ShapeFamily::Star { .. } => 5,
            ShapeFamily::RingSegment { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        FAMILY_NAMES[self.index()]
    }

    /// Draws random parameters for family `index`.
    pub fn random(index: usize, rng: &mut Rng) -> Self {
        match index % FAMILY_COUNT {
            0 => ShapeFamily::Disc {
                radius: rng.random_range(0.3..0.7),
            },
            1 => ShapeFamily::Box {
                width: rng.random_range(0.3..0.8),
                height: rng.random_range(0.3..0.8),
            },
            2 => ShapeFamily::Capsule {
                length: rng.random_range(0.2..0.6),
                radius: rng.random_range(0.15..0.3),
            },
            3 => {
                let width: f64 = rng.random_range(0.4..0.8);
                let height: f64 = rng.random_range(0.4..0.8);
                let thickness = rng.random_range(0.4..0.55) * width.min(height);
                ShapeFamily::LShape {
                    width,
                    height,
                    thickness,
                }
            }
            4 => {
                let legs = rng.random_range(2..=5u8);
                let body_width = rng.random_range(0.6..0.9);
                let max_leg = body_width / (2.0 * legs as f64 - 1.0);
                ShapeFamily::Blob {
                    legs,
                    body_width,
                    body_height: rng.random_range(0.25..0.4),
                    leg_length: rng.random_range(0.12..0.3),
                    leg_width: rng.random_range(0.6..1.0) * max_leg,
                }
            }
            5 => {
                let outer = rng.random_range(0.4..0.6);
                ShapeFamily::Star {
                    arms: rng.random_range(4..=7u8),
                    outer,
                    inner: rng.random_range(0.5..0.75) * outer,
                }
            }
            _ => {
                let outer = rng.random_range(0.4..0.6);
                ShapeFamily::RingSegment {
                    outer,
                    inner: rng.random_range(0.45..0.7) * outer,
                    sweep: rng.random_range(0.6 * PI..1.2 * PI),
                }
            }
        }
    }

    /// Fixed unit-norm conditioning vector for this family.
    pub fn label_embedding(&self, dim: usize) -> Vec<f64> {
        family_label(self.index(), dim)
    }

    /// Closed counter-clockwise outline polygon.
    pub fn outline(&self) -> Result<Vec<[f64; 2]>> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(v)
            } else {
                Err(Error::DegenerateGeometry(format!("{name} must be positive, got {v}")))
            }
        };
        let poly = match *self {
            ShapeFamily::Disc { radius } => {
                positive("radius", radius)?;
                arc([0.0, 0.0], radius, 0.0, 2.0 * PI, 512, false)
            }
            ShapeFamily::Box { width, height } => {
                let (w, h) = (positive("width", width)? / 2.0, positive("height", height)? / 2.0);
                vec![[-w, -h], [w, -h], [w, h], [-w, h]]
            }
            ShapeFamily::Capsule { length, radius } => {
                let l = length.max(0.0) / 2.0;
                positive("radius", radius)?;
                let mut p = arc([l, 0.0], radius, -PI / 2.0, PI / 2.0, 128, true);
                p.extend(arc([-l, 0.0], radius, PI / 2.0, 3.0 * PI / 2.0, 128, true));
                p
            }
            ShapeFamily::LShape {
                width,
                height,
                thickness,
            } => {
                let (w, h) = (positive("width", width)?, positive("height", height)?);
                let t = positive("thickness", thickness)?.min(w).min(h);
                vec![[0.0, 0.0], [w, 0.0], [w, t], [t, t], [t, h], [0.0, h]]
            }
            ShapeFamily::Blob {
                legs,
                body_width,
                body_height,
                leg_length,
                leg_width,
            } => {
                if !(2..=5).contains(&legs) {
                    return Err(invalid(format!("blob legs must be in 2..=5, got {legs}")));
                }
                let w = positive("body_width", body_width)? / 2.0;
                let bh = positive("body_height", body_height)?;
                let ll = positive("leg_length", leg_length)?;
                let lw = positive("leg_width", leg_width)?.min(2.0 * w / legs as f64);
                // Rounded top: half-ellipse from the right edge over to the left edge.
                let mut p = vec![[w, 0.0]];
                for i in 0..=128 {
                    let a = PI * i as f64 / 128.0;
                    p.push([w * a.cos(), bh * a.sin()]);
                }
                // Legs left to right along the bottom edge.
                let n = legs as usize;
                for i in 0..n {
                    let centre = if n == 1 {
                        0.0
                    } else {
                        -w + lw / 2.0 + (2.0 * w - lw) * i as f64 / (n - 1) as f64
                    };
                    let (l, r) = (centre - lw / 2.0, centre + lw / 2.0);
                    if i > 0 {
                        p.push([l, 0.0]);
                    }
                    p.push([l, -ll]);
                    p.push([r, -ll]);
                    if i + 1 < n {
                        p.push([r, 0.0]);
                    }
                }
                dedup_closed(p)
            }
            ShapeFamily::Star { arms, outer, inner } => {
                if arms < 3 {
                    return Err(invalid(format!("star needs at least 3 arms, got {arms}")));
                }
                let (ro, ri) = (positive("outer", outer)?, positive("inner", inner)?);
                let m = 2 * arms as usize;
                (0..m)
                    .map(|i| {
                        let a = PI / 2.0 + PI * i as f64 / arms as f64;
                        let r = if i % 2 == 0 { ro } else { ri };
                        [r * a.cos(), r * a.sin()]
                    })
                    .collect()
            }
            ShapeFamily::RingSegment {
                outer,
                inner,
                sweep,
            } => {
                let ro = positive("outer", outer)?;
                let ri = positive("inner", inner)?;
                let sw = positive("sweep", sweep)?.min(2.0 * PI - 1e-3);
                if ri >= ro {
                    return Err(Error::DegenerateGeometry("ring inner radius >= outer".into()));
                }
                let (a0, a1) = (PI / 2.0 - sw / 2.0, PI / 2.0 + sw / 2.0);
                let mut p = arc([0.0, 0.0], ro, a0, a1, 256, true);
                let mut back = arc([0.0, 0.0], ri, a0, a1, 256, true);
                back.reverse();
                p.extend(back);
                p
            }
        };
        let area = polygon_area(&poly);
        if !(area.abs() > 1e-9) {
            return Err(Error::DegenerateGeometry(format!(
                "{} region has zero area",
                self.name()
            )));
        }
        Ok(poly)
    }
}

pub const FAMILY_NAMES: [&str; FAMILY_COUNT] = [
    "disc",
    "box",
    "capsule",
    "l-shape",
    "n-legged-blob",
    "star",
    "ring-segment",
];

/// Unit-norm pseudo-random conditioning vector for family `index`.
pub fn family_label(index: usize, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(0x5EED_1ABE_u64, index as u64);
    let mut v: Vec<f64> = (0..dim).map(|_| rng::normal(&mut r)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}

fn arc(c: [f64; 2], r: f64, a0: f64, a1: f64, segments: usize, inclusive: bool) -> Vec<[f64; 2]> {
    let count = if inclusive { segments + 1 } else { segments };
    (0..count)
        .map(|i| {
            let a = a0 + (a1 - a0) * i as f64 / segments as f64;
            [c[0] + r * a.cos(), c[1] + r * a.sin()]
        })
        .collect()
}

fn dedup_closed(mut p: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    p.dedup_by(|a, b| (a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
    if p.len() > 1 {
        let (f, l) = (p[0], p[p.len() - 1]);
        if (f[0] - l[0]).abs() < 1e-12 && (f[1] - l[1]).abs() < 1e-12 {
            p.pop();
        }
    }
    p
}

/// Signed shoelace area (positive for counter-clockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut a = 0.0;
    for i in 0..n {
        let (p, q) = (poly[i], poly[(i + 1) % n]);
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

/// A corpus entry: a family with its parameters and the sampling seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    #[serde(flatten)]
    pub family: ShapeFamily,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn new(family: ShapeFamily, seed: u64) -> Self {
        Self { family, seed }
    }
}

/// Samples `n` points evenly (by arc length, random phase) along the outline of
/// `spec`, normalises to [`NORMALIZED_EXTENT`] about the centroid and adds
/// Gaussian jitter truncated at 2.5 standard deviations.
pub fn sample_surface(spec: &ShapeSpec, n: usize, jitter: f64) -> Result<PointSet> {
    if n < 4 {
        return Err(invalid(format!("need at least 4 surface points, got {n}")));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(invalid(format!("jitter must be a non-negative number, got {jitter}")));
    }
    let poly = spec.family.outline()?;
    let mut rng = rng::seeded(spec.seed);

    let m = poly.len();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for i in 0..m {
        let (p, q) = (poly[i], poly[(i + 1) % m]);
        let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        cum.push(cum[i] + len);
    }
    let perimeter = cum[m];
    let phase: f64 = rng.random();
    let mut pts = Vec::with_capacity(n);
    let mut seg = 0;
    for i in 0..n {
        let s = (i as f64 + phase) / n as f64 * perimeter;
        while seg + 1 < m && cum[seg + 1] <= s {
            seg += 1;
        }
        let (p, q) = (poly[seg], poly[(seg + 1) % m]);
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        pts.push([p[0] + u * (q[0] - p[0]), p[1] + u * (q[1] - p[1])]);
    }

    let clean = PointSet::from_vec(&pts);
    let (lo, hi) = clean.bounds();
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(extent > 0.0) {
        return Err(Error::DegenerateGeometry("outline has zero extent".into()));
    }
    let c = clean.centroid();
    let mut scale = NORMALIZED_EXTENT / extent;
    // Keep the normalised shape inside the unit workspace even for lopsided
    // outlines whose centroid sits far from the bounding-box centre.
    let reach = (hi[0] - c[0])
        .max(c[0] - lo[0])
        .max(hi[1] - c[1])
        .max(c[1] - lo[1]);
    let limit = 0.97 - 2.5 * jitter;
    if reach * scale > limit {
        scale = limit / reach;
    }

    let mut out = Array2::zeros((n, 2));
    for (i, p) in pts.iter().enumerate() {
        let (mut jx, mut jy) = (0.0, 0.0);
        if jitter > 0.0 {
            jx = rng::normal(&mut rng) * jitter;
            jy = rng::normal(&mut rng) * jitter;
            let r = (jx * jx + jy * jy).sqrt();
            let cap = 2.5 * jitter;
            if r > cap {
                jx *= cap / r;
                jy *= cap / r;
            }
        }
        out[[i, 0]] = (p[0] - c[0]) * scale + jx;
        out[[i, 1]] = (p[1] - c[1]) * scale + jy;
    }
    let mut ps = PointSet { points: out };
    let cj = ps.centroid();
    for mut row in ps.points.rows_mut() {
        row[0] -= cj[0];
        row[1] -= cj[1];
    }
    Ok(ps)
}

/// One corpus member: spec plus its sampled surface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusShape {
    pub spec: ShapeSpec,
    pub points: PointSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    pub points: usize,
    pub jitter: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count: 2048,
            seed: 0,
            points: DEFAULT_POINTS,
            jitter: DEFAULT_JITTER,
        }
    }
}

/// Generates `cfg.count` shapes, cycling through the families so every family
/// appears equally often. Pure in `(count, seed, points, jitter)`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusShape>> {
    if cfg.count == 0 {
        return Err(invalid("corpus count must be at least 1"));
    }
    (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(cfg.seed, i as u64);
            let family = ShapeFamily::random(i % FAMILY_COUNT, &mut r);
            let spec = ShapeSpec::new(family, rng::split(cfg.seed ^ 0xC0_4B05, i as u64));
            let points = sample_surface(&spec, cfg.points, cfg.jitter)?;
            Ok(CorpusShape { spec, points })
        })
        .collect()
}

pub fn write_corpus(dir: &Path, corpus: &[CorpusShape]) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(corpus.len());
    for (i, shape) in corpus.iter().enumerate() {
        let path = dir.join(format!("shape_{i:05}.json"));
        fs::write(&path, serde_json::to_vec(shape)?)?;
        files.push(path);
    }
    Ok(files)
}

/// Reads every `shape_*.json` in `dir`, in file-name order.
pub fn read_corpus(dir: &Path) -> Result<Vec<CorpusShape>> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("shape_") && n.ends_with(".json"))
        })
        .collect();
    names.sort();
    names
        .iter()
        .map(|p| Ok(serde_json::from_slice(&fs::read(p)?)?))
        .collect()
}

fn dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

fn mean_min_dist(a: &PointSet, b: &PointSet) -> f64 {
    let mut total = 0.0;
    for p in a.points.rows() {
        let mut best = f64::INFINITY;
        for q in b.points.rows() {
            best = best.min(dist(p, q));
        }
        total += best;
    }
    total / a.len() as f64
}

/// Symmetric Chamfer distance: mean nearest-neighbour distance from `a` to `b`
/// plus the same from `b` to `a`.
pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance of an empty point set"));
    }
    Ok(mean_min_dist(a, b) + mean_min_dist(b, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn disc_points_sit_on_the_normalised_circle() {
        let spec = ShapeSpec::new(ShapeFamily::Disc { radius: 0.5 }, 3);
        let ps = sample_surface(&spec, 256, DEFAULT_JITTER).unwrap();
        assert_eq!(ps.len(), 256);
        let s = DEFAULT_JITTER;
        for i in 0..ps.len() {
            let p = ps.point(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!(r >= 0.8 - 3.0 * s && r <= 0.8 + 3.0 * s, "radius {r}");
        }
    }

    #[test]
    fn four_box_points_lie_on_the_square() {
        let spec = ShapeSpec::new(
            ShapeFamily::Box {
                width: 0.4,
                height: 0.4,
            },
            1,
        );
        let ps = sample_surface(&spec, 4, 0.0).unwrap();
        assert_eq!(ps.len(), 4);
        for i in 0..4 {
            let p = ps.point(i);
            let on_x = (p[0].abs() - 0.8).abs() < 1e-12 && p[1].abs() <= 0.8 + 1e-12;
            let on_y = (p[1].abs() - 0.8).abs() < 1e-12 && p[0].abs() <= 0.8 + 1e-12;
            assert!(on_x || on_y, "{p:?} not on the square boundary");
        }
    }

    #[test]
    fn four_legged_blob_is_finite_and_inside_workspace() {
        let mut r = rng::seeded(7);
        let family = loop {
            let f = ShapeFamily::random(4, &mut r);
            if matches!(f, ShapeFamily::Blob { legs: 4, .. }) {
                break f;
            }
        };
        let ps = sample_surface(&ShapeSpec::new(family, 7), 256, DEFAULT_JITTER).unwrap();
        assert_eq!(ps.len(), 256);
        assert!(ps.is_finite());
        assert!(ps.points.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn zero_area_specs_are_rejected() {
        let spec = ShapeSpec::new(ShapeFamily::Disc { radius: 0.0 }, 0);
        assert!(matches!(
            sample_surface(&spec, 64, 0.0),
            Err(Error::DegenerateGeometry(_))
        ));
        let flat = ShapeSpec::new(
            ShapeFamily::RingSegment {
                outer: 0.5,
                inner: 0.5,
                sweep: 1.0,
            },
            0,
        );
        assert!(sample_surface(&flat, 64, 0.0).is_err());
    }

    #[test]
    fn too_few_points_is_an_error() {
        let spec = ShapeSpec::new(ShapeFamily::Disc { radius: 0.5 }, 0);
        assert!(sample_surface(&spec, 3, 0.0).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let cfg = CorpusConfig {
            count: 70,
            seed: 11,
            ..Default::default()
        };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; FAMILY_COUNT];
        for s in &a {
            counts[s.spec.family.index()] += 1;
            assert_eq!(s.points.len(), DEFAULT_POINTS);
        }
        assert!(counts.iter().all(|&c| c == 10));
        let single = generate_corpus(&CorpusConfig {
            count: 1,
            ..cfg
        })
        .unwrap();
        assert_eq!(single.len(), 1);
        assert!(generate_corpus(&CorpusConfig { count: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn corpus_shapes_are_centred_and_inside_workspace() {
        let corpus = generate_corpus(&CorpusConfig {
            count: 700,
            seed: 5,
            ..Default::default()
        })
        .unwrap();
        for s in &corpus {
            let c = s.points.centroid();
            assert!(c[0].abs() < 1e-9 && c[1].abs() < 1e-9);
            assert!(
                s.points.points.iter().all(|v| v.abs() <= 1.0),
                "{:?} leaves the workspace",
                s.spec
            );
        }
    }

    #[test]
    fn chamfer_examples() {
        let a = PointSet::from_vec(&[[0.0, 0.0]]);
        let b = PointSet::from_vec(&[[1.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        let two = PointSet::from_vec(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(chamfer(&two, &b).unwrap(), 2.0);
        assert!(chamfer(&PointSet::zeros(0), &b).is_err());
    }

    #[test]
    fn corpus_json_round_trips() {
        let corpus = generate_corpus(&CorpusConfig {
            count: 3,
            seed: 2,
            points: 16,
            jitter: 0.005,
        })
        .unwrap();
        let dir = std::env::temp_dir().join(format!("mfg-corpus-{}", std::process::id()));
        write_corpus(&dir, &corpus).unwrap();
        let back = read_corpus(&dir).unwrap();
        assert_eq!(back, corpus);
        let raw: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("shape_00000.json")).unwrap()).unwrap();
        assert!(raw["spec"]["family"].is_string());
        assert_eq!(raw["points"].as_array().unwrap().len(), 16);
        fs::remove_dir_all(dir).ok();
    }

    fn small_set() -> impl Strategy<Value = PointSet> {
        prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..12)
            .prop_map(|v| PointSet::from_vec(&v.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>()))
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_and_nonnegative(a in small_set(), b in small_set()) {
            let ab = chamfer(&a, &b).unwrap();
            let ba = chamfer(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert!(chamfer(&a, &a).unwrap() <= 1e-12);
        }
    }
}
