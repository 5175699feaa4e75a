#![allow(dead_code)]

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x);
    x[i] = orig - h;
    let minus = f(x);
    x[i] = orig;
    (plus - minus) / (2.0 * h)
}

/// Full finite-difference gradient.
pub fn fd_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| central_diff(&mut work, i, h, &mut f))
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

use mfg_core::mpmsim::{Role, Scene};

/// Rectangular particle lattice with lower-left corner `origin`.
pub fn block_scene(origin: [f64; 2], nx: usize, ny: usize, spacing: f64) -> Scene {
    let mut positions = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            positions.push([
                origin[0] + (i as f64 + 0.5) * spacing,
                origin[1] + (j as f64 + 0.5) * spacing,
            ]);
        }
    }
    let n = positions.len();
    Scene {
        positions,
        velocities: vec![[0.0; 2]; n],
        particle_volume: spacing * spacing,
        scale: vec![1.0; n],
        actuator: vec![None; n],
        role: vec![Role::Robot; n],
        fibers: Vec::new(),
        colliders: Vec::new(),
    }
}
