//! Parameter updaters: Muon (momentum + Newton–Schulz orthogonalisation)
//! for matrices, Adam with decoupled (here zero) weight decay for
//! everything else, and the registry that selects between them by name.
//!
//! Both updaters are deterministic: fixed loop orders, no randomness, so a
//! given `(weights, gradient, state, lr)` always produces bit-identical
//! results.

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Which family handles which parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    MuonAdamw,
    AllAdamw,
}

impl OptimKind {
    pub const ALL: [OptimKind; 2] = [OptimKind::MuonAdamw, OptimKind::AllAdamw];

    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::MuonAdamw => "muon_adamw",
            OptimKind::AllAdamw => "all_adamw",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "muon_adamw" => Ok(OptimKind::MuonAdamw),
            "all_adamw" => Ok(OptimKind::AllAdamw),
            other => Err(Error::config(format!(
                "unknown optimiser kind '{other}' (expected muon_adamw|all_adamw)"
            ))),
        }
    }

    /// Registry name of the updater family for a parameter of this shape.
    pub fn family_for(self, shape: &[usize]) -> &'static str {
        match self {
            OptimKind::MuonAdamw if shape.len() == 2 => "muon",
            _ => "adamw",
        }
    }
}

impl std::fmt::Display for OptimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub muon_momentum: f64,
    pub muon_ns_iters: usize,
    pub muon_ns_coeffs: (f64, f64, f64),
    /// Blend the fresh gradient back into the momentum direction
    /// (Nesterov-style) instead of using the plain buffer.
    pub muon_nesterov: bool,
    /// Scale the orthogonalised direction by `sqrt(max(1, rows/cols))`.
    pub muon_shape_scale: bool,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl OptimConfig {
    pub fn preset(kind: OptimKind) -> Self {
        OptimConfig {
            kind,
            muon_momentum: 0.95,
            muon_ns_iters: 5,
            muon_ns_coeffs: (3.4445, -4.7750, 2.0315),
            muon_nesterov: false,
            muon_shape_scale: true,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            adam_eps: 1e-10,
        }
    }
}

fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[m,n] = a[m,k] · b[k,n]`, row-major, fixed accumulation order.
fn mat_mul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            axpy(orow, a[i * k + l], &b[l * n..(l + 1) * n]);
        }
    }
    out
}

/// `out[r,r] = x · xᵀ` for row-major `x[r,c]`.
fn gram<T: Scalar>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * r];
    for i in 0..r {
        for j in 0..r {
            out[i * r + j] = dot(&x[i * c..(i + 1) * c], &x[j * c..(j + 1) * c]);
        }
    }
    out
}

/// Approximate polar factor of `g` by the quintic Newton–Schulz iteration.
///
/// The input is Frobenius-normalised, tall matrices are worked on
/// transposed (so the Gram matrix is the small side), and each iteration
/// applies `X ← a·X + (b·A + c·A²)·X` with `A = X·Xᵀ`. An all-zero input is
/// returned unchanged.
pub fn newton_schulz<T: Scalar>(
    g: &Tensor<T>,
    iters: usize,
    coeffs: (f64, f64, f64),
) -> Result<Tensor<T>> {
    g.require_2d()?;
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let fro = dot(g.data(), g.data()).to_f64().sqrt();
    if fro == 0.0 {
        return Ok(g.clone());
    }
    let (a, b, c) = (
        T::from_f64(coeffs.0),
        T::from_f64(coeffs.1),
        T::from_f64(coeffs.2),
    );
    let inv = T::from_f64(1.0 / fro);
    let transposed = m > n;
    let (r, cdim) = if transposed { (n, m) } else { (m, n) };
    let mut x: Vec<T> = if transposed {
        transpose(g.data(), m, n)
    } else {
        g.data().to_vec()
    };
    for v in x.iter_mut() {
        *v = *v * inv;
    }
    for _ in 0..iters {
        let gr = gram(&x, r, cdim);
        let gr2 = mat_mul(&gr, &gr, r, r, r);
        // B = b·A + c·A²
        let mut bmat = gr2;
        for (o, &gi) in bmat.iter_mut().zip(&gr) {
            *o = c * *o + b * gi;
        }
        let bx = mat_mul(&bmat, &x, r, r, cdim);
        for (xi, bi) in x.iter_mut().zip(&bx) {
            *xi = a * *xi + *bi;
        }
    }
    let out = if transposed { transpose(&x, n, m) } else { x };
    Tensor::new(vec![m, n], out)
}

/// Heavy-ball momentum buffer for one matrix parameter.
#[derive(Debug, Clone)]
pub struct MuonState<T> {
    pub buffer: Tensor<T>,
}

impl<T: Scalar> MuonState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        MuonState {
            buffer: Tensor::zeros(shape.to_vec()),
        }
    }
}

pub fn muon_step<T: Scalar>(
    w: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut MuonState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    w.require_2d()?;
    if w.shape() != grad.shape() || w.shape() != state.buffer.shape() {
        return Err(Error::config("muon_step: shape mismatch"));
    }
    let mu = T::from_f64(cfg.muon_momentum);
    for (bv, gv) in state.buffer.data_mut().iter_mut().zip(grad.data()) {
        *bv = mu * *bv + *gv;
    }
    let dir_input = if cfg.muon_nesterov {
        let mut blended = grad.clone();
        axpy(blended.data_mut(), mu, state.buffer.data());
        blended
    } else {
        state.buffer.clone()
    };
    let dir = newton_schulz(&dir_input, cfg.muon_ns_iters, cfg.muon_ns_coeffs)?;
    let (m, n) = (w.shape()[0], w.shape()[1]);
    let shape_scale = if cfg.muon_shape_scale {
        (1.0f64).max(m as f64 / n as f64).sqrt()
    } else {
        1.0
    };
    let step = T::from_f64(-lr * shape_scale);
    axpy(w.data_mut(), step, dir.data());
    if cfg.weight_decay != 0.0 {
        let decay = T::from_f64(1.0 - lr * cfg.weight_decay);
        for v in w.data_mut() {
            *v = *v * decay;
        }
    }
    Ok(())
}

/// First/second moment buffers and step counter for one parameter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
            step: 0,
        }
    }
}

pub fn adamw_step<T: Scalar>(
    w: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    if w.shape() != grad.shape() || w.shape() != state.m.shape() {
        return Err(Error::config("adamw_step: shape mismatch"));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.adam_beta1);
    let b2 = T::from_f64(cfg.adam_beta2);
    let one_m_b1 = T::from_f64(1.0 - cfg.adam_beta1);
    let one_m_b2 = T::from_f64(1.0 - cfg.adam_beta2);
    let mc = T::from_f64(1.0 / (1.0 - cfg.adam_beta1.powi(t)));
    let vc = T::from_f64(1.0 / (1.0 - cfg.adam_beta2.powi(t)));
    let eps = T::from_f64(cfg.adam_eps);
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * cfg.weight_decay);
    let (md, vd) = (state.m.data_mut(), state.v.data_mut());
    for (i, wv) in w.data_mut().iter_mut().enumerate() {
        let g = grad.data()[i];
        md[i] = b1 * md[i] + one_m_b1 * g;
        vd[i] = b2 * vd[i] + one_m_b2 * g * g;
        let m_hat = md[i] * mc;
        let v_hat = vd[i] * vc;
        *wv = *wv - lr_t * (m_hat / (v_hat.sqrt() + eps)) - decay * *wv;
    }
    Ok(())
}

/// One strategy for applying a gradient to a parameter.
pub trait ParamUpdater<T: Scalar> {
    fn name(&self) -> &'static str;
    fn update(&mut self, w: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()>;
}

pub struct MuonUpdater<T> {
    state: MuonState<T>,
    cfg: OptimConfig,
}

impl<T: Scalar> ParamUpdater<T> for MuonUpdater<T> {
    fn name(&self) -> &'static str {
        "muon"
    }

    fn update(&mut self, w: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        muon_step(w, grad, &mut self.state, lr, &self.cfg)
    }
}

pub struct AdamUpdater<T> {
    state: AdamState<T>,
    cfg: OptimConfig,
}

impl<T: Scalar> ParamUpdater<T> for AdamUpdater<T> {
    fn name(&self) -> &'static str {
        "adamw"
    }

    fn update(&mut self, w: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        adamw_step(w, grad, &mut self.state, lr, &self.cfg)
    }
}

type UpdaterFactory<T> = fn(&OptimConfig, &[usize]) -> Box<dyn ParamUpdater<T>>;

/// Name-keyed catalogue of updater families. The trainer asks the run's
/// [`OptimKind`] for a family name per parameter and instantiates it here,
/// so a new optimiser only needs a registry entry.
pub struct UpdaterRegistry<T: Scalar> {
    entries: Vec<(&'static str, UpdaterFactory<T>)>,
}

impl<T: Scalar> UpdaterRegistry<T> {
    pub fn standard() -> Self {
        UpdaterRegistry {
            entries: vec![
                ("muon", |cfg, shape| {
                    Box::new(MuonUpdater {
                        state: MuonState::zeros(shape),
                        cfg: *cfg,
                    })
                }),
                ("adamw", |cfg, shape| {
                    Box::new(AdamUpdater {
                        state: AdamState::zeros(shape),
                        cfg: *cfg,
                    })
                }),
            ],
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }

    pub fn create(
        &self,
        name: &str,
        cfg: &OptimConfig,
        shape: &[usize],
    ) -> Result<Box<dyn ParamUpdater<T>>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, f)| f(cfg, shape))
            .ok_or_else(|| Error::config(format!("no updater named '{name}' registered")))
    }
}
