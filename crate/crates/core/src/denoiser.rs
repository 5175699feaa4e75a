//! Noise-prediction network for point sets.
//!
//! Two per-point blocks, each `linear -> SiLU -> (+ pooled context) -> FiLM`,
//! followed by a per-point decoder that also sees the block-2 context. The
//! conditioning vector driving FiLM mixes a sinusoidal time embedding with the
//! task embedding. Everything is 64-bit and the backward pass is written by
//! hand; mean pooling accumulates in exact fixed point so that permuting the
//! input rows permutes the output rows bit-for-bit.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::shapes::PointSet;

pub const DEFAULT_EMBED_DIM: usize = 64;
pub const HIDDEN: usize = 64;

const MAGIC: &[u8; 4] = b"MFG1";
const FORMAT_VERSION: u32 = 1;
const FLAG_OPTIMIZER: u32 = 1;

/// Conditioning vector `c`; the null embedding is all zeros.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vec: Vec<f64>,
    pub is_null: bool,
}

impl Embedding {
    pub fn null(dim: usize) -> Self {
        Self {
            vec: vec![0.0; dim],
            is_null: true,
        }
    }

    pub fn new(vec: Vec<f64>) -> Self {
        Self {
            vec,
            is_null: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }

    pub fn norm(&self) -> f64 {
        self.vec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Slot {
    W1,
    B1,
    Wc1,
    Bc1,
    W2,
    B2,
    Wc2,
    Bc2,
    Wt,
    Bt,
    We,
    Ws1,
    Bs1,
    Wh1,
    Bh1,
    Ws2,
    Bs2,
    Wh2,
    Bh2,
    Wd1,
    Bd1,
    Wd2,
    Bd2,
}

const SLOTS: [Slot; 23] = [
    Slot::W1,
    Slot::B1,
    Slot::Wc1,
    Slot::Bc1,
    Slot::W2,
    Slot::B2,
    Slot::Wc2,
    Slot::Bc2,
    Slot::Wt,
    Slot::Bt,
    Slot::We,
    Slot::Ws1,
    Slot::Bs1,
    Slot::Wh1,
    Slot::Bh1,
    Slot::Ws2,
    Slot::Bs2,
    Slot::Wh2,
    Slot::Bh2,
    Slot::Wd1,
    Slot::Bd1,
    Slot::Wd2,
    Slot::Bd2,
];

fn slot_shape(slot: Slot, embed: usize) -> (usize, usize) {
    let h = HIDDEN;
    match slot {
        Slot::W1 => (2, h),
        Slot::W2 | Slot::Wc1 | Slot::Wc2 => (h, h),
        Slot::Ws1 | Slot::Wh1 | Slot::Ws2 | Slot::Wh2 => (h, h),
        Slot::Wt | Slot::We => (embed, h),
        Slot::Wd1 => (2 * h, h),
        Slot::Wd2 => (h, 2),
        Slot::Bd2 => (1, 2),
        _ => (1, h),
    }
}

/// Flat parameter vector with a fixed tensor layout. Gradients use the same
/// type so optimisers can treat both as plain slices.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    embed_dim: usize,
    offsets: Vec<usize>,
    pub data: Vec<f64>,
    /// Sinusoidal frequencies `10000^(-2i/E)`; derived from `embed_dim`.
    freqs: Vec<f64>,
}

impl DenoiserParams {
    /// Zero-valued parameters (also the gradient accumulator shape).
    pub fn zeros(embed_dim: usize) -> Result<Self> {
        if embed_dim == 0 || !embed_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "embedding dimension must be even and positive, got {embed_dim}"
            )));
        }
        let mut offsets = Vec::with_capacity(SLOTS.len() + 1);
        let mut off = 0;
        for s in SLOTS {
            offsets.push(off);
            let (r, c) = slot_shape(s, embed_dim);
            off += r * c;
        }
        offsets.push(off);
        let freqs = (0..embed_dim / 2)
            .map(|i| 10000f64.powf(-2.0 * i as f64 / embed_dim as f64))
            .collect();
        Ok(Self {
            embed_dim,
            offsets,
            data: vec![0.0; off],
            freqs,
        })
    }

    /// Scaled-normal initialisation with the output layer set to zero, so the
    /// untrained network predicts zero noise.
    pub fn init(embed_dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(embed_dim)?;
        let mut r = rng::seeded(seed);
        for (k, s) in SLOTS.iter().enumerate() {
            let (rows, _) = slot_shape(*s, embed_dim);
            let is_bias = rows == 1;
            let scale = match s {
                Slot::Wd2 | Slot::Bd2 => 0.0,
                Slot::Ws1 | Slot::Wh1 | Slot::Ws2 | Slot::Wh2 => 0.1 / (rows as f64).sqrt(),
                _ if is_bias => 0.0,
                _ => 1.0 / (rows as f64).sqrt(),
            };
            let range = p.offsets[k]..p.offsets[k + 1];
            for v in &mut p.data[range] {
                *v = rng::normal(&mut r) * scale;
            }
        }
        log::debug!("denoiser initialised with {} parameters", p.len());
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.data.iter_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn index(slot: Slot) -> usize {
        SLOTS.iter().position(|s| *s == slot).unwrap()
    }

    fn mat(&self, slot: Slot) -> ArrayView2<'_, f64> {
        let k = Self::index(slot);
        let shape = slot_shape(slot, self.embed_dim);
        ArrayView2::from_shape(shape, &self.data[self.offsets[k]..self.offsets[k + 1]]).unwrap()
    }

    fn vec(&self, slot: Slot) -> ArrayView1<'_, f64> {
        let k = Self::index(slot);
        ArrayView1::from(&self.data[self.offsets[k]..self.offsets[k + 1]])
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut [f64] {
        let k = Self::index(slot);
        &mut self.data[self.offsets[k]..self.offsets[k + 1]]
    }

    fn add_mat(&mut self, slot: Slot, m: &Array2<f64>) {
        for (d, s) in self.slot_mut(slot).iter_mut().zip(m.iter()) {
            *d += *s;
        }
    }

    fn add_vec(&mut self, slot: Slot, v: &Array1<f64>) {
        for (d, s) in self.slot_mut(slot).iter_mut().zip(v.iter()) {
            *d += *s;
        }
    }

    /// Adds `other * scale` element-wise.
    pub fn axpy(&mut self, scale: f64, other: &DenoiserParams) {
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += scale * s;
        }
    }

    /// Order-sensitive FNV-1a digest of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Sinusoidal time features: `[sin(t f_0), cos(t f_0), sin(t f_1), ...]`.
pub fn time_embed(p: &DenoiserParams, t: usize) -> Array1<f64> {
    time_embed_dim(&p.freqs, t)
}

fn time_embed_dim(freqs: &[f64], t: usize) -> Array1<f64> {
    let mut out = Array1::zeros(freqs.len() * 2);
    for (i, f) in freqs.iter().enumerate() {
        let a = t as f64 * f;
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
    out
}

/// Stand-alone time embedding for dimension `dim` (must be even).
pub fn sinusoidal(t: usize, dim: usize) -> Array1<f64> {
    let freqs: Vec<f64> = (0..dim / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / dim as f64))
        .collect();
    time_embed_dim(&freqs, t)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Column means accumulated exactly in 2^-64 fixed point, so the result
/// depends only on the multiset of rows (row-permutation invariant).
fn pooled_mean(a: &Array2<f64>) -> Array1<f64> {
    const SCALE: f64 = 18_446_744_073_709_551_616.0; // 2^64
    let n = a.nrows() as f64;
    let mut acc = vec![0i128; a.ncols()];
    for row in a.rows() {
        for (s, v) in acc.iter_mut().zip(row.iter()) {
            *s = s.saturating_add((v * SCALE) as i128);
        }
    }
    Array1::from_iter(acc.into_iter().map(|s| s as f64 / SCALE / n))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let mut m = Array2::zeros((a.len(), b.len()));
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            m[[i, j]] = ai * bj;
        }
    }
    m
}

struct Block {
    a: Array2<f64>,
    m: Array1<f64>,
    v: Array2<f64>,
    scale: Array1<f64>,
    h: Array2<f64>,
}

/// Activations kept for the backward pass.
struct Cache {
    te: Array1<f64>,
    g_pre: Array1<f64>,
    g: Array1<f64>,
    b1: Block,
    b2: Block,
    ctx2: Array1<f64>,
    d1: Array2<f64>,
    e1: Array2<f64>,
}

fn check_inputs(p: &DenoiserParams, x: &PointSet, c: &crate::denoiser::Embedding) -> Result<()> {
    if c.dim() != p.embed_dim {
        return Err(Error::ShapeMismatch {
            expected: format!("embedding of dimension {}", p.embed_dim),
            got: format!("dimension {}", c.dim()),
        });
    }
    if x.points.ncols() != 2 || x.is_empty() {
        return Err(Error::ShapeMismatch {
            expected: "non-empty N x 2 point set".into(),
            got: format!("{:?}", x.points.dim()),
        });
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn block(
    p: &DenoiserParams,
    input: ArrayView2<f64>,
    w: Slot,
    b: Slot,
    wc: Slot,
    bc: Slot,
    scale: Array1<f64>,
    shift: &Array1<f64>,
) -> (Block, Array1<f64>) {
    let a = input.dot(&p.mat(w)) + p.vec(b);
    let u = a.mapv(silu);
    let m = pooled_mean(&u);
    let ctx = m.dot(&p.mat(wc)) + p.vec(bc);
    let v = &u + &ctx;
    let h = &v * &(scale.mapv(|s| 1.0 + s)) + shift;
    (
        Block {
            a,
            m,
            v,
            scale,
            h,
        },
        ctx,
    )
}

fn forward_cached(
    p: &DenoiserParams,
    x: &PointSet,
    t: usize,
    c: &Embedding,
) -> Result<(Array2<f64>, Cache)> {
    check_inputs(p, x, c)?;
    let te = time_embed(p, t);
    let cv = ArrayView1::from(&c.vec);
    let g_pre = te.dot(&p.mat(Slot::Wt)) + p.vec(Slot::Bt) + cv.dot(&p.mat(Slot::We));
    let g = g_pre.mapv(silu);
    let scale1 = g.dot(&p.mat(Slot::Ws1)) + p.vec(Slot::Bs1);
    let shift1 = g.dot(&p.mat(Slot::Wh1)) + p.vec(Slot::Bh1);
    let scale2 = g.dot(&p.mat(Slot::Ws2)) + p.vec(Slot::Bs2);
    let shift2 = g.dot(&p.mat(Slot::Wh2)) + p.vec(Slot::Bh2);

    let (b1, _) = block(
        p,
        x.points.view(),
        Slot::W1,
        Slot::B1,
        Slot::Wc1,
        Slot::Bc1,
        scale1,
        &shift1,
    );
    let (b2, ctx2) = block(
        p,
        b1.h.view(),
        Slot::W2,
        Slot::B2,
        Slot::Wc2,
        Slot::Bc2,
        scale2,
        &shift2,
    );

    let wd1 = p.mat(Slot::Wd1);
    let (top, bottom) = wd1.split_at(Axis(0), HIDDEN);
    let ctx_term = ctx2.dot(&bottom) + p.vec(Slot::Bd1);
    let d1 = b2.h.dot(&top) + &ctx_term;
    let e1 = d1.mapv(silu);
    let out = e1.dot(&p.mat(Slot::Wd2)) + p.vec(Slot::Bd2);
    Ok((
        out,
        Cache {
            te,
            g_pre,
            g,
            b1,
            b2,
            ctx2,
            d1,
            e1,
        },
    ))
}

/// Predicted noise `eps_theta(x_t, t, c)`, same shape as `x`.
pub fn forward(p: &DenoiserParams, x: &PointSet, t: usize, c: &Embedding) -> Result<PointSet> {
    let (out, _) = forward_cached(p, x, t, c)?;
    Ok(PointSet { points: out })
}

/// Gradients of `<forward(p, x, t, c), upstream>`.
pub struct Gradients {
    pub params: DenoiserParams,
    pub x: PointSet,
    pub c: Vec<f64>,
}

fn backward_cached(
    p: &DenoiserParams,
    x: &PointSet,
    c: &Embedding,
    cache: &Cache,
    upstream: &Array2<f64>,
    grads: &mut DenoiserParams,
) -> (Array2<f64>, Array1<f64>) {
    let n = x.len() as f64;
    let col_sum = |a: &Array2<f64>| a.sum_axis(Axis(0));

    // Decoder.
    grads.add_mat(Slot::Wd2, &cache.e1.t().dot(upstream));
    grads.add_vec(Slot::Bd2, &col_sum(upstream));
    let de1 = upstream.dot(&p.mat(Slot::Wd2).t());
    let dd1 = &de1 * &cache.d1.mapv(silu_grad);
    let dd1_sum = col_sum(&dd1);
    let wd1 = p.mat(Slot::Wd1);
    let (top, bottom) = wd1.split_at(Axis(0), HIDDEN);
    let mut dwd1 = Array2::zeros((2 * HIDDEN, HIDDEN));
    dwd1.slice_mut(ndarray::s![..HIDDEN, ..])
        .assign(&cache.b2.h.t().dot(&dd1));
    dwd1.slice_mut(ndarray::s![HIDDEN.., ..])
        .assign(&outer(cache.ctx2.view(), dd1_sum.view()));
    grads.add_mat(Slot::Wd1, &dwd1);
    grads.add_vec(Slot::Bd1, &dd1_sum);
    let dh2 = dd1.dot(&top.t());
    let dctx2_dec = bottom.dot(&dd1_sum);

    let mut dg = Array1::<f64>::zeros(HIDDEN);

    // Block 2, then block 1; each returns the gradient w.r.t. its input.
    let block_back = |blk: &Block,
                      dh: Array2<f64>,
                      extra_dctx: Option<Array1<f64>>,
                      input: ArrayView2<f64>,
                      slots: [Slot; 8],
                      grads: &mut DenoiserParams,
                      dg: &mut Array1<f64>|
     -> Array2<f64> {
        let [w, b, wc, bc, ws, bs, wh, bh] = slots;
        let one_plus = blk.scale.mapv(|s| 1.0 + s);
        let dv = &dh * &one_plus;
        let dscale = (&dh * &blk.v).sum_axis(Axis(0));
        let dshift = dh.sum_axis(Axis(0));
        grads.add_mat(ws, &outer(cache.g.view(), dscale.view()));
        grads.add_vec(bs, &dscale);
        grads.add_mat(wh, &outer(cache.g.view(), dshift.view()));
        grads.add_vec(bh, &dshift);
        *dg += &p.mat(ws).dot(&dscale);
        *dg += &p.mat(wh).dot(&dshift);

        let mut dctx = dv.sum_axis(Axis(0));
        if let Some(e) = extra_dctx {
            dctx += &e;
        }
        grads.add_mat(wc, &outer(blk.m.view(), dctx.view()));
        grads.add_vec(bc, &dctx);
        let dm = p.mat(wc).dot(&dctx) / n;
        let du = &dv + &dm;
        let da = &du * &blk.a.mapv(silu_grad);
        grads.add_mat(w, &input.t().dot(&da));
        grads.add_vec(b, &col_sum(&da));
        da.dot(&p.mat(w).t())
    };

    let dh1 = block_back(
        &cache.b2,
        dh2,
        Some(dctx2_dec),
        cache.b1.h.view(),
        [
            Slot::W2,
            Slot::B2,
            Slot::Wc2,
            Slot::Bc2,
            Slot::Ws2,
            Slot::Bs2,
            Slot::Wh2,
            Slot::Bh2,
        ],
        grads,
        &mut dg,
    );
    let dx = block_back(
        &cache.b1,
        dh1,
        None,
        x.points.view(),
        [
            Slot::W1,
            Slot::B1,
            Slot::Wc1,
            Slot::Bc1,
            Slot::Ws1,
            Slot::Bs1,
            Slot::Wh1,
            Slot::Bh1,
        ],
        grads,
        &mut dg,
    );

    let dg_pre = &dg * &cache.g_pre.mapv(silu_grad);
    grads.add_mat(Slot::Wt, &outer(cache.te.view(), dg_pre.view()));
    grads.add_vec(Slot::Bt, &dg_pre);
    grads.add_mat(Slot::We, &outer(ArrayView1::from(&c.vec), dg_pre.view()));
    let dc = p.mat(Slot::We).dot(&dg_pre);
    (dx, dc)
}

/// Exact reverse-mode gradients of `<forward(p, x, t, c), upstream>` with
/// respect to the parameters, the input points and the embedding.
pub fn backward(
    p: &DenoiserParams,
    x: &PointSet,
    t: usize,
    c: &Embedding,
    upstream: &PointSet,
) -> Result<Gradients> {
    let (out, cache) = forward_cached(p, x, t, c)?;
    if upstream.points.dim() != out.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", out.dim()),
            got: format!("{:?}", upstream.points.dim()),
        });
    }
    let mut grads = p.zeros_like();
    let (dx, dc) = backward_cached(p, x, c, &cache, &upstream.points, &mut grads);
    Ok(Gradients {
        params: grads,
        x: PointSet { points: dx },
        c: dc.to_vec(),
    })
}

/// Squared-error denoising loss `mean((eps - eps_theta(x_t, t, c))^2)` for one
/// example, accumulating `scale * dloss/dparams` into `grads` when given and
/// returning `(loss, dloss/dc)`.
pub fn denoising_loss(
    p: &DenoiserParams,
    x_t: &PointSet,
    t: usize,
    c: &Embedding,
    eps: &PointSet,
    scale: f64,
    grads: Option<&mut DenoiserParams>,
) -> Result<(f64, Vec<f64>)> {
    let (out, cache) = forward_cached(p, x_t, t, c)?;
    x_t.check_same_shape(eps)?;
    let diff = &out - &eps.points;
    let count = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let upstream = diff.mapv(|d| 2.0 * d * scale / count);
    let mut scratch;
    let target = match grads {
        Some(g) => g,
        None => {
            scratch = p.zeros_like();
            &mut scratch
        }
    };
    let (_, dc) = backward_cached(p, x_t, c, &cache, &upstream, target);
    Ok((loss, dc.to_vec()))
}

/// Adam optimiser state for a flat parameter slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", params.len()),
            got: format!("{} gradients, {} moments", grads.len(), state.m.len()),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Writes the binary checkpoint: magic, version, embedding dim, parameter
/// count, flags, raw little-endian parameters, then optional Adam state.
pub fn write_checkpoint<W: Write>(
    mut w: W,
    p: &DenoiserParams,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(p.embed_dim as u32).to_le_bytes())?;
    w.write_all(&(p.len() as u64).to_le_bytes())?;
    let flags = if optimizer.is_some() { FLAG_OPTIMIZER } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    for v in &p.data {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(opt) = optimizer {
        if opt.m.len() != p.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        w.write_all(&opt.step.to_le_bytes())?;
        for v in opt.m.iter().chain(&opt.v) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(DenoiserParams, Option<AdamState>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let embed = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)? as usize;
    let flags = read_u32(&mut r)?;
    let mut p = DenoiserParams::zeros(embed)?;
    if count != p.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match architecture ({})",
            p.len()
        )));
    }
    p.data = read_f64s(&mut r, count)?;
    if !p.is_finite() {
        return Err(Error::Checkpoint("non-finite parameter".into()));
    }
    let opt = if flags & FLAG_OPTIMIZER != 0 {
        let step = read_u64(&mut r)?;
        let m = read_f64s(&mut r, count)?;
        let v = read_f64s(&mut r, count)?;
        Some(AdamState { step, m, v })
    } else {
        None
    };
    Ok((p, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randomized(seed: u64, embed: usize) -> DenoiserParams {
        let mut p = DenoiserParams::init(embed, seed).unwrap();
        let mut r = rng::seeded(seed ^ 99);
        for v in &mut p.data {
            *v += 0.2 * rng::normal(&mut r);
        }
        p
    }

    fn random_points(n: usize, r: &mut Rng) -> PointSet {
        PointSet::gaussian(n, r)
    }

    #[test]
    fn time_embedding_values() {
        let te = sinusoidal(1, 4);
        let want = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in te.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let z = sinusoidal(0, 8);
        for i in 0..4 {
            assert_eq!(z[2 * i], 0.0);
            assert_eq!(z[2 * i + 1], 1.0);
        }
        assert_eq!(sinusoidal(17, 64), sinusoidal(17, 64));
    }

    #[test]
    fn untrained_network_predicts_zero() {
        let p = DenoiserParams::init(16, 3).unwrap();
        let mut r = rng::seeded(1);
        let x = random_points(10, &mut r);
        let out = forward(&p, &x, 500, &Embedding::new(vec![0.3; 16])).unwrap();
        assert!(out.points.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_embedding_dim() {
        let p = DenoiserParams::init(16, 3).unwrap();
        let x = PointSet::zeros(4);
        assert!(forward(&p, &x, 1, &Embedding::null(8)).is_err());
    }

    #[test]
    fn forward_is_permutation_equivariant_and_deterministic() {
        let p = randomized(4, 16);
        let mut r = rng::seeded(2);
        let x = random_points(37, &mut r);
        let c = Embedding::new((0..16).map(|i| i as f64 * 0.05).collect());
        let out = forward(&p, &x, 123, &c).unwrap();
        assert_eq!(out, forward(&p, &x, 123, &c).unwrap());
        let perm: Vec<usize> = (0..37).map(|i| (i * 11 + 5) % 37).collect();
        let xp = PointSet::from_vec(&perm.iter().map(|&i| x.point(i)).collect::<Vec<_>>());
        let outp = forward(&p, &xp, 123, &c).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(outp.point(k), out.point(i));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = randomized(5, 8);
        let mut r = rng::seeded(3);
        let x = random_points(6, &mut r);
        let c = Embedding::new(vec![0.1; 8]);
        let g = backward(&p, &x, 10, &c, &PointSet::zeros(6)).unwrap();
        assert!(g.params.data.iter().all(|v| *v == 0.0));
        assert!(g.x.points.iter().all(|v| *v == 0.0));
        assert!(g.c.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_matches_hand_evaluation() {
        let mut w = [0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut w, &[1.0], &mut st, 0.1).unwrap();
        assert!((w[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut z = [0.5, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut z, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(z, [0.5, -2.0]);
        assert_eq!(st.step, 1);

        let mut a = [1.0, 2.0];
        let mut b = a;
        let (mut sa, mut sb) = (AdamState::new(2), AdamState::new(2));
        adam_step(&mut a, &[0.3, -0.7], &mut sa, 0.01).unwrap();
        adam_step(&mut b, &[0.3, -0.7], &mut sb, 0.01).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = randomized(9, 16);
        let mut opt = AdamState::new(p.len());
        opt.step = 7;
        opt.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p, Some(&opt)).unwrap();
        assert_eq!(&buf[..4], b"MFG1");
        let (q, o) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(o.unwrap(), opt);

        let mut plain = Vec::new();
        write_checkpoint(&mut plain, &p, None).unwrap();
        let (q, o) = read_checkpoint(plain.as_slice()).unwrap();
        assert_eq!(q, p);
        assert!(o.is_none());
        assert!(read_checkpoint(&plain[..20]).is_err());
    }
}
