//! From a (possibly noisy) surface sample to a simulatable robot, and the
//! gradient path back from solid particles to the sample.
//!
//! Solidification rasterizes a Gaussian kernel density of the surface points,
//! closes small gaps, flood-fills the exterior and keeps the largest
//! 4-connected interior component; one particle is emitted per cell.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::diffusion::{guided_eps, predict_x0, Guidance, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::rng;
use crate::shapes::PointSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolidifyConfig {
    /// Grid cells per side.
    pub resolution: usize,
    /// Empty cells kept around the point bounding box.
    pub pad_cells: usize,
    /// Kernel bandwidth in cell widths.
    pub bandwidth: f64,
    /// Occupancy threshold relative to a uniformly sampled boundary's density.
    pub threshold: f64,
    /// Fewer solid cells than this is treated as a degenerate sample.
    pub min_points: usize,
}

impl Default for SolidifyConfig {
    fn default() -> Self {
        Self {
            resolution: 24,
            pad_cells: 3,
            bandwidth: 1.5,
            threshold: 0.35,
            min_points: 64,
        }
    }
}

/// Diagnostics from one solidification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolidifyReport {
    pub resolution: usize,
    /// Row-major (`y` outer) solid cells after component selection.
    pub occupancy: Vec<bool>,
    pub components: usize,
    pub chosen_size: usize,
    pub fill_ratio: f64,
    pub cell_size: f64,
    pub origin: [f64; 2],
}

pub struct Solid {
    pub points: Vec<[f64; 2]>,
    pub report: SolidifyReport,
}

/// Median nearest-neighbour distance (brute force).
fn median_spacing(x: &PointSet) -> f64 {
    let n = x.len();
    let mut d: Vec<f64> = (0..n)
        .map(|i| {
            let pi = x.point(i);
            (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let pj = x.point(j);
                    (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2)
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    d.sort_by(f64::total_cmp);
    d[n / 2]
}

/// Kernel density on the line sampled every `delta`, bandwidth `h`.
fn line_density(delta: f64, h: f64) -> f64 {
    if delta <= 0.0 {
        return f64::INFINITY;
    }
    let kmax = (6.0 * h / delta).ceil() as i64;
    (-kmax..=kmax)
        .map(|k| (-(k as f64 * delta).powi(2) / (2.0 * h * h)).exp())
        .sum()
}

pub fn solidify(x: &PointSet, cfg: &SolidifyConfig) -> Result<Solid> {
    if !x.is_finite() {
        return Err(invalid("non-finite points"));
    }
    if x.len() < 2 {
        return Err(Error::DegenerateGeometry("fewer than two surface points".into()));
    }
    let r = cfg.resolution;
    if r < 2 * cfg.pad_cells + 2 {
        return Err(invalid("resolution too small for the padding"));
    }
    let (lo, hi) = x.bounds();
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if !(extent > 0.0) {
        return Err(Error::DegenerateGeometry("points are coincident".into()));
    }
    let cell = extent / (r - 2 * cfg.pad_cells) as f64;
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let origin = [
        center[0] - cell * r as f64 / 2.0,
        center[1] - cell * r as f64 / 2.0,
    ];
    let h = cfg.bandwidth * cell;
    let tau = cfg.threshold * line_density(median_spacing(x), h);
    let cc = |i: usize, j: usize| {
        [
            origin[0] + (i as f64 + 0.5) * cell,
            origin[1] + (j as f64 + 0.5) * cell,
        ]
    };
    let idx = |i: usize, j: usize| j * r + i;

    let mut occ = vec![false; r * r];
    for j in 0..r {
        for i in 0..r {
            let c = cc(i, j);
            let dens: f64 = (0..x.len())
                .map(|k| {
                    let p = x.point(k);
                    (-((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)) / (2.0 * h * h)).exp()
                })
                .sum();
            occ[idx(i, j)] = dens > tau;
        }
    }
    let occ = erode(&dilate(&occ, r), r);

    // Exterior: empty cells reachable from the border.
    let mut ext = vec![false; r * r];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for k in 0..r {
        for (i, j) in [(k, 0), (k, r - 1), (0, k), (r - 1, k)] {
            if !occ[idx(i, j)] && !ext[idx(i, j)] {
                ext[idx(i, j)] = true;
                stack.push((i, j));
            }
        }
    }
    while let Some((i, j)) = stack.pop() {
        for (ni, nj) in neighbours4(i, j, r) {
            if !occ[idx(ni, nj)] && !ext[idx(ni, nj)] {
                ext[idx(ni, nj)] = true;
                stack.push((ni, nj));
            }
        }
    }

    // The occupied band extends past the true boundary by the distance at
    // which the density falls to the threshold; peel that margin off.
    let margin = h * (2.0 * (1.0 / cfg.threshold).ln()).max(0.0).sqrt();
    let ext_cells: Vec<[f64; 2]> = (0..r * r)
        .filter(|&k| ext[k] && has_interior_neighbour(&ext, k, r))
        .map(|k| cc(k % r, k / r))
        .collect();
    let mut inside = vec![false; r * r];
    for k in 0..r * r {
        if ext[k] {
            continue;
        }
        let c = cc(k % r, k / r);
        let near = ext_cells
            .iter()
            .any(|e| (e[0] - c[0]).powi(2) + (e[1] - c[1]).powi(2) < margin * margin);
        inside[k] = !near;
    }

    let (labels, sizes) = components(&inside, r);
    let Some((best, &size)) = sizes.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
    else {
        return Err(Error::DegenerateGeometry("solidification produced no interior".into()));
    };
    if size < cfg.min_points.max(1) {
        return Err(Error::DegenerateGeometry(format!(
            "largest solid component has {size} cells (< {})",
            cfg.min_points
        )));
    }
    let mut chosen = vec![false; r * r];
    let mut points = Vec::with_capacity(size);
    for j in 0..r {
        for i in 0..r {
            if labels[idx(i, j)] == Some(best) {
                chosen[idx(i, j)] = true;
                points.push(cc(i, j));
            }
        }
    }
    Ok(Solid {
        points,
        report: SolidifyReport {
            resolution: r,
            occupancy: chosen,
            components: sizes.len(),
            chosen_size: size,
            fill_ratio: size as f64 / (r * r) as f64,
            cell_size: cell,
            origin,
        },
    })
}

fn neighbours4(i: usize, j: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (i.wrapping_sub(1), j),
        (i + 1, j),
        (i, j.wrapping_sub(1)),
        (i, j + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < r && b < r)
}

fn has_interior_neighbour(ext: &[bool], k: usize, r: usize) -> bool {
    neighbours4(k % r, k / r, r).any(|(i, j)| !ext[j * r + i])
}

fn morph(g: &[bool], r: usize, dilate: bool) -> Vec<bool> {
    let mut out = vec![false; r * r];
    for j in 0..r {
        for i in 0..r {
            let mut any = false;
            let mut all = true;
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let (a, b) = (i as i64 + di, j as i64 + dj);
                    // Out-of-grid cells count as empty.
                    let v = a >= 0 && b >= 0 && a < r as i64 && b < r as i64 && g[b as usize * r + a as usize];
                    any |= v;
                    all &= v;
                }
            }
            out[j * r + i] = if dilate { any } else { all };
        }
    }
    out
}

fn dilate(g: &[bool], r: usize) -> Vec<bool> {
    morph(g, r, true)
}

fn erode(g: &[bool], r: usize) -> Vec<bool> {
    morph(g, r, false)
}

/// 4-connected component labels (in scan order) and their sizes.
fn components(g: &[bool], r: usize) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut labels = vec![None; r * r];
    let mut sizes = Vec::new();
    for start in 0..r * r {
        if !g[start] || labels[start].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut n = 0;
        let mut stack = vec![start];
        labels[start] = Some(id);
        while let Some(k) = stack.pop() {
            n += 1;
            for (i, j) in neighbours4(k % r, k / r, r) {
                let q = j * r + i;
                if g[q] && labels[q].is_none() {
                    labels[q] = Some(id);
                    stack.push(q);
                }
            }
        }
        sizes.push(n);
    }
    (labels, sizes)
}

/// k-means over the chosen coordinate axes; labels are canonical (ascending
/// cluster centroid along `axes[0]`).
pub fn place_actuators(points: &[[f64; 2]], k: usize, axes: &[usize], seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("need at least one cluster"));
    }
    if points.len() < k {
        return Err(invalid(format!("{} points cannot form {k} clusters", points.len())));
    }
    if axes.is_empty() || axes.iter().any(|&a| a > 1) {
        return Err(invalid("clustering axes must be a non-empty subset of {0, 1}"));
    }
    let feat: Vec<Vec<f64>> = points.iter().map(|p| axes.iter().map(|&a| p[a]).collect()).collect();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut r = rng::seeded(seed);

    // k-means++ seeding.
    let mut centers = vec![feat[r.random_range(0..feat.len())].clone()];
    while centers.len() < k {
        let w: Vec<f64> = feat
            .iter()
            .map(|f| centers.iter().map(|c| d2(f, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = w.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut chosen = w.len() - 1;
            for (i, wi) in w.iter().enumerate() {
                if u < *wi {
                    chosen = i;
                    break;
                }
                u -= wi;
            }
            chosen
        } else {
            r.random_range(0..feat.len())
        };
        centers.push(feat[pick].clone());
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        feat.iter()
            .map(|f| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for (c, ctr) in centers.iter().enumerate() {
                    let d = d2(f, ctr);
                    if d < bd {
                        bd = d;
                        best = c;
                    }
                }
                best
            })
            .collect()
    };
    let mut labels = assign(&centers);
    for _ in 0..100 {
        let mut sums = vec![vec![0.0; axes.len()]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in feat.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(f) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let new = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                // Re-seed an empty cluster at the worst-fit point.
                let far = (0..feat.len())
                    .max_by(|&a, &b| {
                        d2(&feat[a], &centers[labels[a]]).total_cmp(&d2(&feat[b], &centers[labels[b]]))
                    })
                    .unwrap_or(0);
                feat[far].clone()
            };
            shift = shift.max(d2(&new, &centers[c]));
            centers[c] = new;
        }
        labels = assign(&centers);
        if shift <= 1e-18 {
            break;
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| centers[a][0].total_cmp(&centers[b][0]).then(a.cmp(&b)));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let out: Vec<usize> = labels.iter().map(|&l| rank[l]).collect();
    let mut seen = vec![false; k];
    for &l in &out {
        seen[l] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::DegenerateGeometry("an actuator cluster is empty".into()));
    }
    Ok(out)
}

/// Softmax kernel weights `w[u][v] ∝ exp(-alpha |u - v|^2)` for one solid point.
fn kernel_row(u: [f64; 2], x: &PointSet, alpha: f64, out: &mut Vec<f64>) {
    out.clear();
    let mut best = f64::INFINITY;
    for v in 0..x.len() {
        let p = x.point(v);
        let d = (u[0] - p[0]).powi(2) + (u[1] - p[1]).powi(2);
        best = best.min(d);
        out.push(d);
    }
    // Shifting by the minimum distance leaves the softmax unchanged.
    let mut total = 0.0;
    for w in out.iter_mut() {
        *w = (-alpha * (*w - best)).exp();
        total += *w;
    }
    for w in out.iter_mut() {
        *w /= total;
    }
}

/// Maps per-solid-point gradients onto the surface points through normalized
/// Gaussian kernel weights.
pub fn kernel_backward(
    solid: &[[f64; 2]],
    x_hat0: &PointSet,
    grad_solid: &[[f64; 2]],
    alpha: f64,
) -> Result<PointSet> {
    if solid.len() != grad_solid.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} solid gradients", solid.len()),
            got: grad_solid.len().to_string(),
        });
    }
    if x_hat0.is_empty() {
        return Err(invalid("no surface points"));
    }
    let mut out = PointSet::zeros(x_hat0.len());
    let mut w = Vec::with_capacity(x_hat0.len());
    for (u, g) in solid.iter().zip(grad_solid) {
        kernel_row(*u, x_hat0, alpha, &mut w);
        for (v, wv) in w.iter().enumerate() {
            out.points[[v, 0]] += wv * g[0];
            out.points[[v, 1]] += wv * g[1];
        }
    }
    Ok(out)
}

/// Kernel weight matrix (rows: solid points), mostly for diagnostics/tests.
pub fn kernel_weights(solid: &[[f64; 2]], x_hat0: &PointSet, alpha: f64) -> Vec<Vec<f64>> {
    solid
        .iter()
        .map(|u| {
            let mut w = Vec::new();
            kernel_row(*u, x_hat0, alpha, &mut w);
            w
        })
        .collect()
}

/// `d x0_hat / d x_t` with the network output held constant.
pub fn chain_grad_to_xt(grad: &PointSet, t: usize, sched: &NoiseSchedule) -> Result<PointSet> {
    if t > sched.steps() {
        return Err(invalid(format!("diffusion step {t} outside 0..={}", sched.steps())));
    }
    if t == 0 {
        return Ok(grad.clone());
    }
    Ok(PointSet {
        points: &grad.points / sched.alpha_bar(t).sqrt(),
    })
}

/// How actuators are carved out of the solid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLayout {
    pub count: usize,
    /// Coordinate axes used for clustering (0 horizontal, 1 vertical).
    pub axes: Vec<usize>,
    /// Unit fiber direction shared by all actuators.
    pub fiber: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobotizeConfig {
    pub solidify: SolidifyConfig,
    /// Kernel sharpness of the backward map.
    pub alpha: f64,
    pub youngs_modulus: f64,
    pub mass_density: f64,
    pub kmeans_seed: u64,
}

impl Default for RobotizeConfig {
    fn default() -> Self {
        Self {
            solidify: SolidifyConfig::default(),
            alpha: 20.0,
            youngs_modulus: 1e4,
            mass_density: 1e3,
            kmeans_seed: 0,
        }
    }
}

/// Geometry, actuators and material of one robot. `solid_points` live in
/// workspace-local coordinates (`[0, W] x [0, H]`, bottom-aligned and
/// horizontally centered); `shape_points` are the same particles in the
/// sample's coordinate frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobotDesign {
    pub solid_points: Vec<[f64; 2]>,
    pub shape_points: Vec<[f64; 2]>,
    pub actuator_id: Vec<Option<usize>>,
    pub fibers: Vec<[f64; 2]>,
    pub youngs_modulus: f64,
    pub mass_density: f64,
    pub particle_volume: f64,
    /// Workspace units per sample unit.
    pub scale: f64,
    pub workspace: [f64; 2],
    pub report: SolidifyReport,
}

impl RobotDesign {
    pub fn len(&self) -> usize {
        self.solid_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solid_points.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Pulls a workspace-space particle gradient back onto the sample points.
    pub fn grad_to_sample(&self, x_hat0: &PointSet, grad: &[[f64; 2]], alpha: f64) -> Result<PointSet> {
        let g: Vec<[f64; 2]> = grad.iter().map(|g| [g[0] * self.scale, g[1] * self.scale]).collect();
        kernel_backward(&self.shape_points, x_hat0, &g, alpha)
    }
}

/// Robotizes a clean (or predicted clean) sample into the given workspace.
pub fn robotize_x0(
    x0: &PointSet,
    workspace: [f64; 2],
    layout: Option<&ActuatorLayout>,
    cfg: &RobotizeConfig,
) -> Result<RobotDesign> {
    if !(workspace[0] > 0.0 && workspace[1] > 0.0) {
        return Err(invalid("workspace must have positive size"));
    }
    let solid = solidify(x0, &cfg.solidify)?;
    let cell = solid.report.cell_size;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for p in &solid.points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d] - cell / 2.0);
            hi[d] = hi[d].max(p[d] + cell / 2.0);
        }
    }
    let scale = (workspace[0] / (hi[0] - lo[0])).min(workspace[1] / (hi[1] - lo[1]));
    let x_off = (workspace[0] - (hi[0] - lo[0]) * scale) / 2.0;
    let solid_points: Vec<[f64; 2]> = solid
        .points
        .iter()
        .map(|p| [(p[0] - lo[0]) * scale + x_off, (p[1] - lo[1]) * scale])
        .collect();
    let (actuator_id, fibers) = match layout {
        Some(l) if l.count > 0 => {
            let ids = place_actuators(&solid_points, l.count, &l.axes, cfg.kmeans_seed)?;
            let norm = (l.fiber[0].powi(2) + l.fiber[1].powi(2)).sqrt();
            if !(norm > 0.0) {
                return Err(invalid("fiber direction must be non-zero"));
            }
            let f = [l.fiber[0] / norm, l.fiber[1] / norm];
            (ids.into_iter().map(Some).collect(), vec![f; l.count])
        }
        _ => (vec![None; solid_points.len()], Vec::new()),
    };
    Ok(RobotDesign {
        particle_volume: (cell * scale).powi(2),
        solid_points,
        shape_points: solid.points,
        actuator_id,
        fibers,
        youngs_modulus: cfg.youngs_modulus,
        mass_density: cfg.mass_density,
        scale,
        workspace,
        report: solid.report,
    })
}

/// Predicted clean sample at step `t` (the sample itself at `t = 0`).
pub fn predicted_x0(
    x_t: &PointSet,
    t: usize,
    p: &DenoiserParams,
    guidance: &Guidance,
    sched: &NoiseSchedule,
) -> Result<PointSet> {
    if t == 0 {
        return Ok(x_t.clone());
    }
    let eps = guided_eps(p, x_t, t, guidance)?;
    predict_x0(x_t, t, &eps, sched)
}

/// `x_t -> x0_hat -> design`.
#[allow(clippy::too_many_arguments)]
pub fn robotize(
    x_t: &PointSet,
    t: usize,
    p: &DenoiserParams,
    guidance: &Guidance,
    sched: &NoiseSchedule,
    workspace: [f64; 2],
    layout: Option<&ActuatorLayout>,
    cfg: &RobotizeConfig,
) -> Result<(PointSet, RobotDesign)> {
    let x_hat0 = predicted_x0(x_t, t, p, guidance, sched)?;
    let design = robotize_x0(&x_hat0, workspace, layout, cfg)?;
    Ok((x_hat0, design))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{q_sample, ScheduleConfig};
    use crate::shapes::{sample_surface, ShapeFamily, ShapeSpec};
    use proptest::prelude::*;

    fn disc(n: usize) -> PointSet {
        let spec = ShapeSpec {
            family: ShapeFamily::Disc { radius: 0.5 },
            seed: 1,
        };
        sample_surface(&spec, n, 0.0).unwrap()
    }

    #[test]
    fn disc_area_matches_analytic() {
        let x = disc(256);
        let s = solidify(&x, &SolidifyConfig::default()).unwrap();
        let cell = s.report.cell_size;
        let want = std::f64::consts::PI * 0.8 * 0.8 / (cell * cell);
        let got = s.points.len() as f64;
        assert!((got / want - 1.0).abs() <= 0.10, "got {got} want {want:.1}");
        assert_eq!(s.report.chosen_size, s.points.len());
    }

    #[test]
    fn square_fill_stays_inside() {
        let spec = ShapeSpec {
            family: ShapeFamily::Box {
                width: 0.4,
                height: 0.4,
            },
            seed: 2,
        };
        let x = sample_surface(&spec, 256, 0.0).unwrap();
        let (lo, hi) = x.bounds();
        let s = solidify(&x, &SolidifyConfig::default()).unwrap();
        let c = s.report.cell_size;
        for p in &s.points {
            assert!(p[0] >= lo[0] - c && p[0] <= hi[0] + c && p[1] >= lo[1] - c && p[1] <= hi[1] + c);
        }
        let area = (hi[0] - lo[0]) * (hi[1] - lo[1]) / (c * c);
        assert!((s.points.len() as f64 / area - 1.0).abs() < 0.15);
    }

    #[test]
    fn sparse_noise_is_degenerate() {
        let mut r = rng::seeded(4);
        let x = PointSet::gaussian(8, &mut r);
        assert!(matches!(
            solidify(&x, &SolidifyConfig::default()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn kmeans_examples() {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.2, 0.0), (0.05, 0.3)] {
            for i in 0..10 {
                pts.push([cx + 0.001 * i as f64, cy + 0.002 * i as f64]);
            }
        }
        let l = place_actuators(&pts, 2, &[0], 3).unwrap();
        assert!(l[..10].iter().all(|&v| v == 1));
        assert!(l[10..].iter().all(|&v| v == 0));
        assert!(place_actuators(&pts, 1, &[0, 1], 3).unwrap().iter().all(|&v| v == 0));
        assert!(place_actuators(&pts[..1], 2, &[0], 3).is_err());
    }

    #[test]
    fn kmeans_four_blobs_match_optimal_partition() {
        let mut pts = Vec::new();
        let mut r = rng::seeded(9);
        for i in 0..4 {
            for _ in 0..15 {
                pts.push([0.1 * (i + 1) as f64 + 0.01 * (r.random::<f64>() - 0.5), r.random::<f64>()]);
            }
        }
        let l = place_actuators(&pts, 4, &[0], 5).unwrap();
        // The optimal 1-D partition of well-separated groups is contiguous.
        let mut sorted: Vec<usize> = (0..pts.len()).collect();
        sorted.sort_by(|&a, &b| pts[a][0].total_cmp(&pts[b][0]));
        let n = pts.len();
        let cost = |cuts: [usize; 3]| {
            let bounds = [0, cuts[0], cuts[1], cuts[2], n];
            let mut c = 0.0;
            for w in bounds.windows(2) {
                let g: Vec<f64> = sorted[w[0]..w[1]].iter().map(|&i| pts[i][0]).collect();
                let m = g.iter().sum::<f64>() / g.len() as f64;
                c += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            c
        };
        let mut best = (f64::INFINITY, [0; 3]);
        for a in 1..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    let v = cost([a, b, c]);
                    if v < best.0 {
                        best = (v, [a, b, c]);
                    }
                }
            }
        }
        let bounds = [0, best.1[0], best.1[1], best.1[2], n];
        for (g, w) in bounds.windows(2).enumerate() {
            for &i in &sorted[w[0]..w[1]] {
                assert_eq!(l[i], g);
            }
        }
    }

    #[test]
    fn kernel_backward_examples() {
        let one = PointSet::from_vec(&[[0.3, 0.1]]);
        let g = kernel_backward(&[[0.0, 0.0], [1.0, 1.0]], &one, &[[1.0, 2.0], [0.5, -1.0]], 20.0).unwrap();
        assert!((g.points[[0, 0]] - 1.5).abs() < 1e-15 && (g.points[[0, 1]] - 1.0).abs() < 1e-15);

        let two = PointSet::from_vec(&[[-1.0, 0.0], [1.0, 0.0]]);
        let w = kernel_weights(&[[0.0, 0.3]], &two, 20.0);
        assert!((w[0][0] - 0.5).abs() < 1e-15 && (w[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kernel_backward_matches_double_loop() {
        let x = PointSet::from_vec(&[[0.1, 0.2], [-0.3, 0.05], [0.25, -0.4]]);
        let solid = [[0.0, 0.0], [0.2, -0.1]];
        let grad = [[0.7, -0.2], [-1.1, 0.4]];
        let ours = kernel_backward(&solid, &x, &grad, 20.0).unwrap();
        for v in 0..3 {
            for d in 0..2 {
                let mut want = 0.0;
                for (u, g) in solid.iter().zip(&grad) {
                    let k = |q: usize| {
                        let p = x.point(q);
                        (-20.0 * ((u[0] - p[0]).powi(2) + (u[1] - p[1]).powi(2))).exp()
                    };
                    let z: f64 = (0..3).map(k).sum();
                    want += k(v) / z * g[d];
                }
                assert!((ours.points[[v, d]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn chain_rule_scaling() {
        let s = NoiseSchedule::from_betas(vec![0.75]).unwrap();
        let g = PointSet::from_vec(&[[1.0, -2.0]]);
        assert_eq!(chain_grad_to_xt(&g, 0, &s).unwrap(), g);
        let d = chain_grad_to_xt(&g, 1, &s).unwrap();
        assert_eq!(d.points[[0, 0]], 2.0);
        assert_eq!(d.points[[0, 1]], -4.0);
    }

    #[test]
    fn robotize_contract_and_determinism() {
        let x = disc(256);
        let layout = ActuatorLayout {
            count: 4,
            axes: vec![0],
            fiber: [0.0, 1.0],
        };
        let cfg = RobotizeConfig::default();
        let a = robotize_x0(&x, [0.08, 0.08], Some(&layout), &cfg).unwrap();
        let b = robotize_x0(&x, [0.08, 0.08], Some(&layout), &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.len() >= cfg.solidify.min_points);
        let eps = 1e-12;
        assert!(a
            .solid_points
            .iter()
            .all(|p| p[0] >= -eps && p[0] <= 0.08 + eps && p[1] >= -eps && p[1] <= 0.08 + eps));
        for k in 0..4 {
            assert!(a.actuator_id.contains(&Some(k)));
        }
        let back = RobotDesign::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn robotizing_noised_sample_with_oracle_noise_recovers_design() {
        let sched = NoiseSchedule::linear(&ScheduleConfig::default()).unwrap();
        let x0 = disc(256);
        let eps = PointSet::gaussian(256, &mut rng::seeded(2));
        let xt = q_sample(&x0, 300, &eps, &sched).unwrap();
        let x_hat = predict_x0(&xt, 300, &eps, &sched).unwrap();
        let cfg = RobotizeConfig::default();
        let a = robotize_x0(&x0, [0.08, 0.08], None, &cfg).unwrap();
        let b = robotize_x0(&x_hat, [0.08, 0.08], None, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (p, q) in a.solid_points.iter().zip(&b.solid_points) {
            assert!((p[0] - q[0]).abs() < 1e-9 && (p[1] - q[1]).abs() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn kernel_rows_sum_to_one(seed in 0u64..1000, alpha in 1.0f64..200.0) {
            let mut r = rng::seeded(seed);
            let x = PointSet::gaussian(17, &mut r);
            let solid: Vec<[f64; 2]> = (0..5).map(|_| [rng::normal(&mut r), rng::normal(&mut r)]).collect();
            for row in kernel_weights(&solid, &x, alpha) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
