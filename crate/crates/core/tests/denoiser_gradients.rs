//! Finite-difference checks of the hand-written denoiser backward pass.

mod common;

use common::{fd_gradient, rel_err};
use mfg_core::denoiser::{self, backward, forward, DenoiserParams, Embedding};
use mfg_core::rng;
use mfg_core::PointSet;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

struct Instance {
    p: DenoiserParams,
    x: PointSet,
    c: Embedding,
    upstream: PointSet,
    t: usize,
}

fn instance(seed: u64) -> Instance {
    let embed = 8;
    let mut p = DenoiserParams::init(embed, seed).unwrap();
    let mut r = rng::seeded(seed + 1);
    for v in &mut p.data {
        *v += 0.1 * rng::normal(&mut r);
    }
    let x = PointSet::gaussian(8, &mut r);
    let c = Embedding::new((0..embed).map(|_| rng::normal(&mut r)).collect());
    let upstream = PointSet::gaussian(8, &mut r);
    Instance {
        p,
        x,
        c,
        upstream,
        t: 37,
    }
}

fn objective(p: &DenoiserParams, x: &PointSet, t: usize, c: &Embedding, u: &PointSet) -> f64 {
    let out = forward(p, x, t, c).unwrap();
    out.points.iter().zip(u.points.iter()).map(|(a, b)| a * b).sum()
}

#[test]
fn grad_x_matches_finite_differences() {
    let inst = instance(1);
    let g = backward(&inst.p, &inst.x, inst.t, &inst.c, &inst.upstream).unwrap();
    let flat: Vec<f64> = inst.x.points.iter().copied().collect();
    let fd = fd_gradient(&flat, H, |v| {
        let x = PointSet::new(ndarray::Array2::from_shape_vec((8, 2), v.to_vec()).unwrap()).unwrap();
        objective(&inst.p, &x, inst.t, &inst.c, &inst.upstream)
    });
    let an: Vec<f64> = g.x.points.iter().copied().collect();
    let err = rel_err(&an, &fd);
    assert!(err <= TOL, "grad_x relative error {err}");
}

#[test]
fn grad_c_matches_finite_differences() {
    let inst = instance(2);
    let g = backward(&inst.p, &inst.x, inst.t, &inst.c, &inst.upstream).unwrap();
    let fd = fd_gradient(&inst.c.vec, H, |v| {
        objective(&inst.p, &inst.x, inst.t, &Embedding::new(v.to_vec()), &inst.upstream)
    });
    let err = rel_err(&g.c, &fd);
    assert!(err <= TOL, "grad_c relative error {err}");
}

#[test]
fn grad_params_matches_finite_differences() {
    let inst = instance(3);
    let g = backward(&inst.p, &inst.x, inst.t, &inst.c, &inst.upstream).unwrap();
    let mut p = inst.p.clone();
    let fd = fd_gradient(&inst.p.data, H, |v| {
        p.data.copy_from_slice(v);
        objective(&p, &inst.x, inst.t, &inst.c, &inst.upstream)
    });
    let err = rel_err(&g.params.data, &fd);
    assert!(err <= TOL, "grad_params relative error {err}");
}

#[test]
fn denoising_loss_grad_c_matches_finite_differences() {
    let inst = instance(4);
    let mut r = rng::seeded(11);
    let eps = PointSet::gaussian(8, &mut r);
    let (_, dc) =
        denoiser::denoising_loss(&inst.p, &inst.x, inst.t, &inst.c, &eps, 1.0, None).unwrap();
    let fd = fd_gradient(&inst.c.vec, H, |v| {
        denoiser::denoising_loss(&inst.p, &inst.x, inst.t, &Embedding::new(v.to_vec()), &eps, 1.0, None)
            .unwrap()
            .0
    });
    let err = rel_err(&dc, &fd);
    assert!(err <= TOL, "loss grad_c relative error {err}");
}
