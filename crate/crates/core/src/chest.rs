//! Spatial-augmentation CPD channel estimator.
//!
//! Recovers per-path (gain, ToA, azimuth, elevation) from an observation
//! tensor. The pipeline: re-index subcarrier samples into the spatial
//! dimensions (spatial augmentation, restoring CPD identifiability for small
//! arrays), alternating-least-squares CP decomposition with a rank sweep,
//! then per-factor parameter extraction:
//!
//! - ToA from the phase slope of the frequency factor: the angle of the
//!   accumulated conjugate lag-1 product divided by `2 pi df`. Using one
//!   complex accumulation instead of per-lag unwrapping avoids 2 pi
//!   ambiguities for delays below `1/(2 df)`, far beyond the scene maximum.
//! - Elevation by 1-D grid search against the augmented vertical steering
//!   vector (frequency part pinned at the estimated ToA) with parabolic peak
//!   refinement, then azimuth the same way with elevation fixed.
//! - Gains by least squares of the vectorized unaugmented tensor on the
//!   reconstructed steering Kronecker columns.
//!
//! Identifiable domain: `toa` in `[0, 1/(2 df))`, azimuth in (-pi/2, pi/2)
//! (a horizontal line array cannot separate `az` from `pi - az`), elevation
//! in (-pi/2, pi/2) away from the poles where azimuth becomes unobservable.
//!
//! Rank selection sweeps R = 1..max_rank and keeps the largest R whose
//! relative residual improvement over R-1 stays above a threshold; estimated
//! components below a noise-calibrated gain-energy floor are pruned. The
//! estimate may therefore miss true paths or contain spurious ones.

use nalgebra::DMatrix;
use ndarray::Array3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

use crate::scene::PathParams;
use crate::waveform::{delay_steering_n, ArrayConfig, ObservationTensor, OfdmConfig};

#[derive(Debug, Error)]
pub enum ChestError {
    #[error("augmented frequency length V = {0} must be at least 2")]
    AugmentationTooLarge(isize),
    #[error("requested rank {requested} exceeds max_rank {max_rank}")]
    RankTooLarge { requested: usize, max_rank: usize },
    #[error(transparent)]
    Waveform(#[from] crate::waveform::WaveformError),
}

/// Estimator configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SaConfig {
    /// Vertical augmentation order (extra sub-band shifts folded into z).
    pub n_z_aug: usize,
    /// Horizontal augmentation order.
    pub n_x_aug: usize,
    /// Largest CP rank tried by the sweep.
    pub max_rank: usize,
    pub als_max_iters: usize,
    /// ALS stops when the relative residual improvement drops below this.
    pub als_tol: f64,
    /// Coarse angle grid step (rad) before parabolic refinement.
    pub angle_grid_step: f64,
    /// Random ALS initializations per rank; the best residual wins.
    pub restarts: usize,
    /// Rank sweep keeps growing while the relative residual improvement over
    /// the previous rank stays at or above this threshold.
    pub rank_improvement_threshold: f64,
    /// Gain-power pruning floor, in dB above the per-path noise-induced gain
    /// variance `noise_variance / (n_z n_x S)`.
    pub prune_margin_db: f64,
    /// Interference-cancelled re-estimation passes after the initial factor
    /// extraction (0 disables). Each pass re-applies the phase-slope and
    /// matched-filter operators per path on data with the other paths'
    /// reconstructions subtracted, then refits all gains; a pass is kept only
    /// when it improves the parametric refit residual.
    pub refine_passes: usize,
    /// Upper edge of the delay search/acceptance window (s).
    pub max_delay: f64,
}

impl Default for SaConfig {
    fn default() -> Self {
        Self {
            n_z_aug: 2,
            n_x_aug: 2,
            max_rank: 6,
            als_max_iters: 200,
            als_tol: 1e-8,
            angle_grid_step: 0.5f64.to_radians(),
            restarts: 5,
            rank_improvement_threshold: 0.05,
            prune_margin_db: 6.0,
            refine_passes: 3,
            max_delay: 1e-6,
        }
    }
}

impl SaConfig {
    pub fn augmented_freq_len(&self, subcarriers: usize) -> Result<usize, ChestError> {
        let v = subcarriers as isize - self.n_z_aug as isize - self.n_x_aug as isize;
        if v < 2 {
            return Err(ChestError::AugmentationTooLarge(v));
        }
        Ok(v as usize)
    }
}

/// Channel estimator output: estimated paths plus estimator metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathEstimateSet {
    /// Estimated paths, sorted by ToA ascending. `is_los` is always false
    /// here: the estimator does not label paths, the tracker does.
    pub paths: Vec<PathParams>,
    /// Tensor-domain energy `|gain|^2 n_z n_x S` per path, aligned with `paths`.
    pub energies: Vec<f64>,
    /// True where an angle grid peaked at the search boundary and was clamped.
    pub clamped: Vec<bool>,
    /// CP rank selected by the sweep (0 when nothing rose above the elbow).
    pub rank_used: usize,
    /// Relative Frobenius residual of the selected decomposition.
    pub residual: f64,
}

impl PathEstimateSet {
    pub fn empty() -> Self {
        Self {
            paths: Vec::new(),
            energies: Vec::new(),
            clamped: Vec::new(),
            rank_used: 0,
            residual: 1.0,
        }
    }
}

/// Spatially augments the observation tensor: output entry
/// `(m (n_z_aug+1) + p, n (n_x_aug+1) + q, v) = input (m, n, p + q + v)`,
/// a pure re-indexing of sub-band shifts. The augmented factors then obey
/// `a~_z = a_z kron d(tau)[0..n_z_aug]`, `a~_x = a_x kron d(tau)[0..n_x_aug]`,
/// `d~ = d(tau)[0..V-1]` with `V = S - n_z_aug - n_x_aug`.
pub fn augment(tensor: &ObservationTensor, cfg: &SaConfig) -> Result<Array3<Complex64>, ChestError> {
    let (nz, nx, s) = tensor.data.dim();
    let v = cfg.augmented_freq_len(s)?;
    let (pz, qx) = (cfg.n_z_aug + 1, cfg.n_x_aug + 1);
    let mut out = Array3::<Complex64>::zeros((nz * pz, nx * qx, v));
    for m in 0..nz {
        for p in 0..pz {
            for n in 0..nx {
                for q in 0..qx {
                    for f in 0..v {
                        out[(m * pz + p, n * qx + q, f)] = tensor.data[(m, n, p + q + f)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// CP factors of a 3-way tensor: `Y ~= sum_r z[:,r] o x[:,r] o f[:,r]`.
/// Columns of `z` and `x` are unit-norm; scales live in the frequency factor.
#[derive(Debug, Clone)]
pub struct CpdFactors {
    pub z: FactorMat,
    pub x: FactorMat,
    pub f: FactorMat,
    /// Relative Frobenius residual of the fit.
    pub residual: f64,
    /// True when a Gram matrix needed ridge regularization.
    pub regularized: bool,
}

/// Dense row-major complex matrix with a small, fixed column count (the CP
/// rank). Row-major keeps the per-element rank loops contiguous.
#[derive(Debug, Clone)]
pub struct FactorMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex64>,
}

impl FactorMat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        Self { rows, cols, data }
    }

    pub fn column(&self, r: usize) -> Vec<Complex64> {
        (0..self.rows).map(|e| self.data[e * self.cols + r]).collect()
    }

    /// Gram matrix `F^H F` (cols x cols).
    fn gram(&self) -> DMatrix<Complex64> {
        let r = self.cols;
        let mut g = DMatrix::<Complex64>::zeros(r, r);
        for row in self.data.chunks_exact(r) {
            for a in 0..r {
                let ca = row[a].conj();
                for b in 0..r {
                    g[(a, b)] += ca * row[b];
                }
            }
        }
        g
    }

    fn col_norms(&self) -> Vec<f64> {
        let r = self.cols;
        let mut n = vec![0.0f64; r];
        for row in self.data.chunks_exact(r) {
            for (acc, v) in n.iter_mut().zip(row) {
                *acc += v.norm_sqr();
            }
        }
        n.into_iter().map(f64::sqrt).collect()
    }

    fn scale_col(&mut self, r: usize, s: f64) {
        for e in 0..self.rows {
            self.data[e * self.cols + r] *= s;
        }
    }
}

/// Flattened tensor view used by the ALS kernels: index (i, j, k) maps to
/// `(i * nj + j) * nk + k`.
struct FlatTensor<'a> {
    data: &'a [Complex64],
    ni: usize,
    nj: usize,
    nk: usize,
}

/// `P[i,j,r] = sum_k Y[i,j,k] conj(C[k,r])` — the frequency contraction
/// shared by the two spatial-factor updates (it involves neither A nor B).
fn contract_freq(y: &FlatTensor, c: &FactorMat, p: &mut [Complex64]) {
    let r = c.cols;
    p.fill(Complex64::new(0.0, 0.0));
    for ij in 0..y.ni * y.nj {
        let y_row = &y.data[ij * y.nk..(ij + 1) * y.nk];
        let out = &mut p[ij * r..(ij + 1) * r];
        for (k, &yv) in y_row.iter().enumerate() {
            let c_row = &c.data[k * r..(k + 1) * r];
            for (o, cv) in out.iter_mut().zip(c_row) {
                *o += yv * cv.conj();
            }
        }
    }
}

/// `M[k,r] = sum_ij Y[i,j,k] conj(A[i,r] B[j,r])`.
fn mttkrp_freq(y: &FlatTensor, a: &FactorMat, b: &FactorMat, m: &mut FactorMat) {
    let r = a.cols;
    m.data.fill(Complex64::new(0.0, 0.0));
    let mut w = vec![Complex64::new(0.0, 0.0); r];
    for i in 0..y.ni {
        let a_row = &a.data[i * r..(i + 1) * r];
        for j in 0..y.nj {
            let b_row = &b.data[j * r..(j + 1) * r];
            for ((wv, av), bv) in w.iter_mut().zip(a_row).zip(b_row) {
                *wv = (av * bv).conj();
            }
            let y_row = &y.data[(i * y.nj + j) * y.nk..(i * y.nj + j + 1) * y.nk];
            for (k, &yv) in y_row.iter().enumerate() {
                let out = &mut m.data[k * r..(k + 1) * r];
                for (o, wv) in out.iter_mut().zip(&w) {
                    *o += yv * wv;
                }
            }
        }
    }
}

/// Least-squares factor update: solves `out conj(H) = M` via `M conj(H^-1)`.
/// Adds the documented 1e-10 ridge when the Gram product is not positive
/// definite and records that in `regularized`.
fn solve_factor(m: &FactorMat, h: &DMatrix<Complex64>, regularized: &mut bool) -> FactorMat {
    let r = m.cols;
    let hinv = match nalgebra::linalg::Cholesky::new(h.clone()) {
        Some(ch) => ch.inverse(),
        None => {
            *regularized = true;
            let trace: f64 = (0..r).map(|i| h[(i, i)].re).sum();
            let ridge = Complex64::new(1e-10 * trace.max(f64::MIN_POSITIVE) / r as f64, 0.0);
            let mut hr = h.clone();
            for i in 0..r {
                hr[(i, i)] += ridge;
            }
            match nalgebra::linalg::Cholesky::new(hr.clone()) {
                Some(ch) => ch.inverse(),
                None => hr.try_inverse().expect("ridged Gram product is invertible"),
            }
        }
    };
    let mut out = FactorMat::zeros(m.rows, r);
    for e in 0..m.rows {
        let m_row = &m.data[e * r..(e + 1) * r];
        let o_row = &mut out.data[e * r..(e + 1) * r];
        for (rr, o) in o_row.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (rp, mv) in m_row.iter().enumerate() {
                acc += mv * hinv[(rp, rr)].conj();
            }
            *o = acc;
        }
    }
    out
}

fn hadamard(a: &DMatrix<Complex64>, b: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    a.zip_map(b, |x, y| x * y)
}

/// Frobenius norm of `Y - sum_r a_r o b_r o c_r` by direct reconstruction.
/// Entrywise differences avoid the catastrophic cancellation a Gram-based
/// norm identity hits once the fit approaches machine precision.
fn reconstruction_residual(y: &FlatTensor, a: &FactorMat, b: &FactorMat, c: &FactorMat) -> f64 {
    let rank = a.cols;
    let (ni, nj, nk) = (y.ni, y.nj, y.nk);
    let mut num = 0.0f64;
    let mut w = vec![Complex64::new(0.0, 0.0); rank];
    for i in 0..ni {
        let a_row = &a.data[i * rank..(i + 1) * rank];
        for j in 0..nj {
            let b_row = &b.data[j * rank..(j + 1) * rank];
            for ((wv, av), bv) in w.iter_mut().zip(a_row).zip(b_row) {
                *wv = av * bv;
            }
            let y_row = &y.data[(i * nj + j) * nk..(i * nj + j + 1) * nk];
            for (k, &yv) in y_row.iter().enumerate() {
                let c_row = &c.data[k * rank..(k + 1) * rank];
                let mut yhat = Complex64::new(0.0, 0.0);
                for (wv, cv) in w.iter().zip(c_row) {
                    yhat += wv * cv;
                }
                num += (yv - yhat).norm_sqr();
            }
        }
    }
    num.sqrt()
}

/// `out = prev + s (next - prev)` elementwise.
fn extrapolate(prev: &FactorMat, next: &FactorMat, s: f64) -> FactorMat {
    let data = prev
        .data
        .iter()
        .zip(&next.data)
        .map(|(p, n)| p + (n - p) * s)
        .collect();
    FactorMat { rows: prev.rows, cols: prev.cols, data }
}

/// Leading left singular vectors of a mode unfolding, as a factor init.
/// Ranks beyond the mode dimension are padded with random columns.
fn hosvd_init(y: &FlatTensor, mode: usize, rank: usize, rng: &mut impl Rng) -> FactorMat {
    let dim = match mode {
        0 => y.ni,
        _ => y.nj,
    };
    let cols = y.ni * y.nj * y.nk / dim;
    let mut unf = DMatrix::<Complex64>::zeros(dim, cols);
    for i in 0..y.ni {
        for j in 0..y.nj {
            for k in 0..y.nk {
                let v = y.data[(i * y.nj + j) * y.nk + k];
                match mode {
                    0 => unf[(i, j * y.nk + k)] = v,
                    _ => unf[(j, i * y.nk + k)] = v,
                }
            }
        }
    }
    let svd = unf.svd(true, false);
    let u = svd.u.expect("requested U");
    let mut f = FactorMat::random(dim, rank, rng);
    for r in 0..rank.min(dim).min(u.ncols()) {
        for e in 0..dim {
            f.data[e * rank + r] = u[(e, r)];
        }
    }
    f
}

/// Initialization strategy for one ALS run.
enum AlsInit<'a> {
    /// Spatial factors from the unfolding SVDs, C solved from them.
    Hosvd,
    Random,
    /// Previous-rank factors carried over, one fresh random column appended.
    Warm(&'a CpdFactors),
}

/// One ALS run from a given initialization; stops at the
/// relative-residual-improvement tolerance or the iteration cap. The
/// residual is asserted non-increasing across iterations.
fn als_single(
    y: &FlatTensor,
    rank: usize,
    cfg: &SaConfig,
    max_iters: usize,
    init: AlsInit,
    rng: &mut ChaCha8Rng,
) -> CpdFactors {
    let (ni, nj, nk) = (y.ni, y.nj, y.nk);
    let y_norm_sq: f64 = y.data.iter().map(|v| v.norm_sqr()).sum();
    let y_norm = y_norm_sq.sqrt().max(f64::MIN_POSITIVE);

    let mut regularized = false;
    let mut prev_res = f64::INFINITY;
    let mut res = f64::INFINITY;
    let mut prev_factors: Option<(FactorMat, FactorMat, FactorMat)> = None;

    let mut p = vec![Complex64::new(0.0, 0.0); ni * nj * rank];
    let mut m_a = FactorMat::zeros(ni, rank);
    let mut m_b = FactorMat::zeros(nj, rank);
    let mut m_c = FactorMat::zeros(nk, rank);

    let (mut a, mut b, mut c);
    match init {
        AlsInit::Hosvd => {
            a = hosvd_init(y, 0, rank, rng);
            b = hosvd_init(y, 1, rank, rng);
            mttkrp_freq(y, &a, &b, &mut m_c);
            c = solve_factor(&m_c, &hadamard(&a.gram(), &b.gram()), &mut regularized);
        }
        AlsInit::Random => {
            a = FactorMat::random(ni, rank, rng);
            b = FactorMat::random(nj, rank, rng);
            c = FactorMat::random(nk, rank, rng);
        }
        AlsInit::Warm(prev) => {
            let old = prev.z.cols;
            a = FactorMat::random(ni, rank, rng);
            b = FactorMat::random(nj, rank, rng);
            c = FactorMat::random(nk, rank, rng);
            for (dst, src) in [(&mut a, &prev.z), (&mut b, &prev.x), (&mut c, &prev.f)] {
                for e in 0..dst.rows {
                    for r in 0..old.min(rank) {
                        dst.data[e * rank + r] = src.data[e * old + r];
                    }
                }
            }
        }
    }

    for iter in 0..max_iters {
        contract_freq(y, &c, &mut p);
        let gc = c.gram();

        // A update.
        let gb = b.gram();
        m_a.data.fill(Complex64::new(0.0, 0.0));
        for i in 0..ni {
            let out = &mut m_a.data[i * rank..(i + 1) * rank];
            for j in 0..nj {
                let p_row = &p[(i * nj + j) * rank..(i * nj + j + 1) * rank];
                let b_row = &b.data[j * rank..(j + 1) * rank];
                for ((o, pv), bv) in out.iter_mut().zip(p_row).zip(b_row) {
                    *o += pv * bv.conj();
                }
            }
        }
        a = solve_factor(&m_a, &hadamard(&gb, &gc), &mut regularized);

        // B update with the fresh A (the shared contraction P depends
        // only on C, so it stays valid).
        m_b.data.fill(Complex64::new(0.0, 0.0));
        for i in 0..ni {
            let a_row = &a.data[i * rank..(i + 1) * rank];
            for j in 0..nj {
                let p_row = &p[(i * nj + j) * rank..(i * nj + j + 1) * rank];
                let out = &mut m_b.data[j * rank..(j + 1) * rank];
                for ((o, pv), av) in out.iter_mut().zip(p_row).zip(a_row) {
                    *o += pv * av.conj();
                }
            }
        }
        b = solve_factor(&m_b, &hadamard(&a.gram(), &gc), &mut regularized);

        // C update.
        mttkrp_freq(y, &a, &b, &mut m_c);
        c = solve_factor(&m_c, &hadamard(&a.gram(), &b.gram()), &mut regularized);

        // Unit-normalize spatial columns, pushing scale into C.
        let (na, nb) = (a.col_norms(), b.col_norms());
        for r in 0..rank {
            if na[r] > 0.0 {
                a.scale_col(r, 1.0 / na[r]);
            }
            if nb[r] > 0.0 {
                b.scale_col(r, 1.0 / nb[r]);
            }
            c.scale_col(r, na[r] * nb[r]);
        }

        res = reconstruction_residual(y, &a, &b, &c) / y_norm;

        // Line-search extrapolation along the sweep direction breaks the
        // slow "swamp" convergence of closely spaced components. Scale
        // gauges are stable (spatial columns stay unit-norm), so factor
        // differences across iterations are meaningful. Accepted only
        // when it strictly improves the residual.
        if let Some((pa, pb, pc)) = &prev_factors {
            let s = (iter as f64 + 2.0).cbrt();
            let ea = extrapolate(pa, &a, s);
            let eb = extrapolate(pb, &b, s);
            let ec = extrapolate(pc, &c, s);
            let eres = reconstruction_residual(y, &ea, &eb, &ec) / y_norm;
            if eres < res {
                a = ea;
                b = eb;
                c = ec;
                res = eres;
            }
        }
        prev_factors = Some((a.clone(), b.clone(), c.clone()));

        // Slack covers reconstruction round-off, which grows with the
        // magnitude of cancelling components in degenerate fits.
        assert!(
            res <= prev_res * (1.0 + 1e-9) + 1e-10,
            "ALS residual increased: {prev_res} -> {res}"
        );
        let improved = (prev_res - res) / prev_res.max(f64::MIN_POSITIVE);
        prev_res = res;
        if improved < cfg.als_tol {
            break;
        }
    }

    CpdFactors { z: a, x: b, f: c, residual: res, regularized }
}

/// Alternating least squares CP decomposition of a 3-way complex tensor.
/// Returns the best of `cfg.restarts` initializations (the first seeded by
/// HOSVD, the rest random).
pub fn cpd_als(
    aug_tensor: &Array3<Complex64>,
    rank: usize,
    cfg: &SaConfig,
    seed: u64,
) -> Result<CpdFactors, ChestError> {
    if rank > cfg.max_rank {
        return Err(ChestError::RankTooLarge { requested: rank, max_rank: cfg.max_rank });
    }
    let (ni, nj, nk) = aug_tensor.dim();
    let flat = aug_tensor.as_slice().expect("augmented tensor is contiguous");
    let y = FlatTensor { data: flat, ni, nj, nk };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<CpdFactors> = None;
    for restart in 0..cfg.restarts.max(1) {
        let init = if restart == 0 { AlsInit::Hosvd } else { AlsInit::Random };
        let cand = als_single(&y, rank, cfg, cfg.als_max_iters, init, &mut rng);
        if best.as_ref().map_or(true, |b| cand.residual < b.residual) {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// ToA from the phase slope of a frequency-domain steering factor: the angle
/// of the accumulated conjugate lag-1 product divided by `2 pi df`. This is
/// also the delay estimator run on the single-antenna RTT return link.
/// Invariant to a global complex scaling of the factor.
pub fn phase_slope_delay(freq_factor: &[Complex64], subcarrier_spacing: f64) -> f64 {
    let acc: Complex64 = freq_factor.windows(2).map(|w| w[0].conj() * w[1]).sum();
    -acc.arg() / (2.0 * PI * subcarrier_spacing)
}

/// Augmented vertical steering vector `a_z(el) kron d(tau)[0..n_aug]`.
fn augmented_steering_z(
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    el: f64,
    tau: f64,
    n_aug: usize,
) -> Vec<Complex64> {
    let a = crate::waveform::steering_z(array, 0.0, el);
    kron(&a, &delay_steering_n(n_aug + 1, ofdm.subcarrier_spacing, tau))
}

/// Augmented horizontal steering vector `a_x(az, el) kron d(tau)[0..n_aug]`.
fn augmented_steering_x(
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    az: f64,
    el: f64,
    tau: f64,
    n_aug: usize,
) -> Vec<Complex64> {
    let a = crate::waveform::steering_x(array, az, el);
    kron(&a, &delay_steering_n(n_aug + 1, ofdm.subcarrier_spacing, tau))
}

fn kron(a: &[Complex64], b: &[Complex64]) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for &av in a {
        for &bv in b {
            out.push(av * bv);
        }
    }
    out
}

/// Correlation power `|<factor, steering(theta)>|^2` maximized on a coarse
/// grid and refined by a three-point parabola. Returns (angle, clamped).
fn grid_peak(
    factor: &[Complex64],
    steering: impl Fn(f64) -> Vec<Complex64>,
    lo: f64,
    hi: f64,
    step: f64,
) -> (f64, bool) {
    let objective = |theta: f64| -> f64 {
        let s = steering(theta);
        let ip: Complex64 = factor.iter().zip(&s).map(|(f, s)| f.conj() * s).sum();
        ip.norm_sqr()
    };
    let n = ((hi - lo) / step).round() as usize;
    let mut best_idx = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut vals = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let v = objective(lo + i as f64 * step);
        vals.push(v);
        if v > best_val {
            best_val = v;
            best_idx = i;
        }
    }
    if best_idx == 0 || best_idx == n {
        // Peak at the search boundary: clamp and flag.
        return (lo + best_idx as f64 * step, true);
    }
    let (ym, y0, yp) = (vals[best_idx - 1], vals[best_idx], vals[best_idx + 1]);
    let denom = ym - 2.0 * y0 + yp;
    let offset = if denom.abs() < 1e-300 { 0.0 } else { (0.5 * (ym - yp) / denom).clamp(-0.5, 0.5) };
    (lo + (best_idx as f64 + offset) * step, false)
}

#[derive(Debug, Clone, Copy)]
struct RawPath {
    toa: f64,
    az: f64,
    el: f64,
    clamped: bool,
}

/// Steering atom `a_z kron a_x kron d` flattened in (z, x, subcarrier) order.
fn steering_atom(array: &ArrayConfig, ofdm: &OfdmConfig, p: &RawPath) -> Vec<Complex64> {
    let a_z = crate::waveform::steering_z(array, p.az, p.el);
    let a_x = crate::waveform::steering_x(array, p.az, p.el);
    let d = crate::waveform::delay_steering(ofdm, p.toa);
    let mut out = Vec::with_capacity(a_z.len() * a_x.len() * d.len());
    for az_v in &a_z {
        for ax_v in &a_x {
            let zx = az_v * ax_v;
            for d_v in &d {
                out.push(zx * d_v);
            }
        }
    }
    out
}

/// Joint least-squares gain fit of `y` on the paths' steering atoms (with the
/// documented 1e-12 trace ridge). Returns the gains and the relative
/// parametric refit residual `||y - B g|| / ||y||`.
fn fit_gains(atoms: &[Vec<Complex64>], y: &[Complex64]) -> (Vec<Complex64>, f64) {
    let rank = atoms.len();
    let y_sq: f64 = y.iter().map(|v| v.norm_sqr()).sum();
    if rank == 0 {
        return (Vec::new(), 1.0);
    }
    let mut gram = DMatrix::<Complex64>::zeros(rank, rank);
    let mut rhs = DMatrix::<Complex64>::zeros(rank, 1);
    for (i, ai) in atoms.iter().enumerate() {
        rhs[(i, 0)] = ai.iter().zip(y).map(|(a, b)| a.conj() * b).sum();
        for (j, aj) in atoms.iter().enumerate().skip(i) {
            let v: Complex64 = ai.iter().zip(aj).map(|(a, b)| a.conj() * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v.conj();
        }
    }
    let trace: f64 = (0..rank).map(|i| gram[(i, i)].re).sum();
    for i in 0..rank {
        gram[(i, i)] += Complex64::new(1e-12 * trace / rank as f64, 0.0);
    }
    let sol = gram.lu().solve(&rhs).expect("ridged Gram matrix is invertible");
    let gains: Vec<Complex64> = (0..rank).map(|i| sol[(i, 0)]).collect();

    let mut misfit = 0.0f64;
    for (e, yv) in y.iter().enumerate() {
        let mut fit = Complex64::new(0.0, 0.0);
        for (a, g) in atoms.iter().zip(&gains) {
            fit += a[e] * g;
        }
        misfit += (yv - fit).norm_sqr();
    }
    (gains, (misfit / y_sq.max(f64::MIN_POSITIVE)).sqrt())
}

/// Per-path parameters from CP factors: ToA phase slope on the frequency
/// factor, then elevation, then azimuth by matched-filter grid search, then a
/// joint gain least-squares fit against the unaugmented tensor.
///
/// The initial factor-wise estimates are then polished by
/// `cfg.refine_passes` rounds of interference-cancelled re-estimation: per
/// path, the other paths' reconstructions are subtracted from the data and
/// the same phase-slope / matched-filter operators re-applied, with all gains
/// refit; a round is kept only when the parametric refit residual improves.
/// This matters when the unstructured decomposition merges closely spaced
/// paths.
///
/// Components below the pruning floor are dropped; output is sorted by ToA
/// and invariant to any permutation of the input components.
pub fn extract_params(
    factors: &CpdFactors,
    tensor: &ObservationTensor,
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    cfg: &SaConfig,
) -> Result<PathEstimateSet, ChestError> {
    tensor.check_dims(array, ofdm)?;
    let rank = factors.f.cols;
    if rank == 0 {
        return Ok(PathEstimateSet::empty());
    }
    let df = ofdm.subcarrier_spacing;
    let half_pi = PI / 2.0;

    let mut raws = Vec::with_capacity(rank);
    for r in 0..rank {
        let toa = phase_slope_delay(&factors.f.column(r), df);
        let z_col = factors.z.column(r);
        let (el, clamp_el) = grid_peak(
            &z_col,
            |theta| augmented_steering_z(array, ofdm, theta, toa, cfg.n_z_aug),
            -half_pi,
            half_pi,
            cfg.angle_grid_step,
        );
        let x_col = factors.x.column(r);
        let (az, clamp_az) = grid_peak(
            &x_col,
            |theta| augmented_steering_x(array, ofdm, theta, el, toa, cfg.n_x_aug),
            -half_pi,
            half_pi,
            cfg.angle_grid_step,
        );
        raws.push(RawPath { toa, az, el, clamped: clamp_el || clamp_az });
    }

    let y: Vec<Complex64> = tensor.data.iter().copied().collect();
    let (nz, nx, s) = tensor.data.dim();
    let n = y.len();
    let mut atoms: Vec<Vec<Complex64>> =
        raws.iter().map(|p| steering_atom(array, ofdm, p)).collect();
    let (mut gains, mut residual) = fit_gains(&atoms, &y);

    for _pass in 0..cfg.refine_passes {
        let mut cand = raws.clone();
        let mut cand_atoms = atoms.clone();
        let mut cand_gains = gains.clone();
        let mut cand_res = residual;

        // Strongest paths first.
        let mut order: Vec<usize> = (0..rank).collect();
        order.sort_by(|&a, &b| {
            cand_gains[b]
                .norm_sqr()
                .partial_cmp(&cand_gains[a].norm_sqr())
                .expect("finite gains")
        });

        for &idx in &order {
            // Residual data with every other path cancelled.
            let mut y_res = y.clone();
            for (j, (a, g)) in cand_atoms.iter().zip(&cand_gains).enumerate() {
                if j == idx {
                    continue;
                }
                for (rv, av) in y_res.iter_mut().zip(a) {
                    *rv -= av * g;
                }
            }

            let p = cand[idx];
            // Angle-matched subcarrier profile u[s] = sum_{z,x} conj(a_z a_x) y_res.
            let a_z = crate::waveform::steering_z(array, p.az, p.el);
            let a_x = crate::waveform::steering_x(array, p.az, p.el);
            let mut u = vec![Complex64::new(0.0, 0.0); s];
            for (iz, zv) in a_z.iter().enumerate() {
                for (ix, xv) in a_x.iter().enumerate() {
                    let w = (zv * xv).conj();
                    let row = &y_res[(iz * nx + ix) * s..(iz * nx + ix + 1) * s];
                    for (uv, yv) in u.iter_mut().zip(row) {
                        *uv += w * yv;
                    }
                }
            }
            // Two ToA candidates: the phase slope (exact for a clean
            // profile) and the matched-filter peak over the whole delay
            // window (able to jump between lobes when this component sits on
            // a residual mixture). The slope keeps ties.
            let toa_slope = phase_slope_delay(&u, df).clamp(0.0, cfg.max_delay);
            let delay_obj = |tau: f64| -> f64 {
                let d = delay_steering_n(s, df, tau);
                let ip: Complex64 = u.iter().zip(&d).map(|(a, b)| a.conj() * b).sum();
                ip.norm_sqr()
            };
            let tau_step = 0.1 / (s as f64 * df);
            let (toa_grid, _) = grid_peak(
                &u,
                |tau| delay_steering_n(s, df, tau),
                0.0,
                cfg.max_delay,
                tau_step,
            );
            let toa = if delay_obj(toa_grid) > delay_obj(toa_slope) * (1.0 + 1e-9) {
                toa_grid
            } else {
                toa_slope
            };

            // Elevation from the (x, subcarrier)-matched vertical profile.
            let d = crate::waveform::delay_steering(ofdm, toa);
            let mut wz = vec![Complex64::new(0.0, 0.0); nz];
            for (iz, wv) in wz.iter_mut().enumerate() {
                for (ix, xv) in a_x.iter().enumerate() {
                    let row = &y_res[(iz * nx + ix) * s..(iz * nx + ix + 1) * s];
                    for (dv, yv) in d.iter().zip(row) {
                        *wv += (xv * dv).conj() * yv;
                    }
                }
            }
            let (el, clamp_el) = grid_peak(
                &wz,
                |theta| crate::waveform::steering_z(array, 0.0, theta),
                -half_pi,
                half_pi,
                cfg.angle_grid_step,
            );

            // Azimuth from the (z, subcarrier)-matched horizontal profile.
            let a_z2 = crate::waveform::steering_z(array, 0.0, el);
            let mut vx = vec![Complex64::new(0.0, 0.0); nx];
            for (iz, zv) in a_z2.iter().enumerate() {
                for (ix, wv) in vx.iter_mut().enumerate() {
                    let row = &y_res[(iz * nx + ix) * s..(iz * nx + ix + 1) * s];
                    for (dv, yv) in d.iter().zip(row) {
                        *wv += (zv * dv).conj() * yv;
                    }
                }
            }
            let (az, clamp_az) = grid_peak(
                &vx,
                |theta| crate::waveform::steering_x(array, theta, el),
                -half_pi,
                half_pi,
                cfg.angle_grid_step,
            );

            let proposal = RawPath { toa, az, el, clamped: clamp_el || clamp_az };
            let old = (cand[idx], cand_atoms[idx].clone());
            cand[idx] = proposal;
            cand_atoms[idx] = steering_atom(array, ofdm, &cand[idx]);
            let (g2, r2) = fit_gains(&cand_atoms, &y);
            if r2 < cand_res {
                cand_gains = g2;
                cand_res = r2;
            } else {
                cand[idx] = old.0;
                cand_atoms[idx] = old.1;
            }
        }

        if cand_res < residual * (1.0 - 1e-3) {
            raws = cand;
            atoms = cand_atoms;
            gains = cand_gains;
            residual = cand_res;
        } else {
            break;
        }
    }

    // Energy floor: margin above the per-path noise-induced gain variance.
    let floor =
        crate::waveform::db_to_linear(cfg.prune_margin_db) * tensor.noise_variance / n as f64;

    let mut items: Vec<(PathParams, f64, bool)> = Vec::new();
    for (p, g) in raws.iter().zip(&gains) {
        if g.norm_sqr() < floor {
            continue;
        }
        items.push((
            PathParams {
                gain: *g,
                toa: p.toa,
                aoa_az: p.az,
                aoa_el: p.el,
                bounce_count: 0,
                is_los: false,
            },
            g.norm_sqr() * n as f64,
            p.clamped,
        ));
    }
    items.sort_by(|a, b| a.0.toa.partial_cmp(&b.0.toa).expect("finite toa"));

    Ok(PathEstimateSet {
        paths: items.iter().map(|i| i.0).collect(),
        energies: items.iter().map(|i| i.1).collect(),
        clamped: items.iter().map(|i| i.2).collect(),
        rank_used: rank,
        residual,
    })
}

/// End-to-end estimate: augment, sweep the CP rank until the decomposition
/// residual improvement over the previous rank falls below the elbow
/// threshold, extract parameters, prune. A noise-only input yields an empty
/// or spurious-only set, which is a valid outcome.
///
/// The random ALS restarts are adjudicated at the parametric level: for
/// closely spaced paths many unstructured decompositions share essentially
/// the same CP residual, so the restart whose extracted (ToA, angle, gain)
/// model refits the raw tensor best is kept.
pub fn estimate(
    tensor: &ObservationTensor,
    array: &ArrayConfig,
    ofdm: &OfdmConfig,
    cfg: &SaConfig,
    seed: u64,
) -> Result<PathEstimateSet, ChestError> {
    tensor.check_dims(array, ofdm)?;
    let energy: f64 = tensor.data.iter().map(|v| v.norm_sqr()).sum();
    if energy <= 0.0 {
        return Ok(PathEstimateSet::empty());
    }
    let aug = augment(tensor, cfg)?;
    let (ni, nj, nk) = aug.dim();
    let flat = aug.as_slice().expect("augmented tensor is contiguous");
    let y = FlatTensor { data: flat, ni, nj, nk };

    // The elbow judges ranks by the parametric refit residual rather than
    // the raw CP residual: an over-shot rank can drive the unstructured CP
    // fit to machine precision with a degenerate cancelling pair that the
    // steering-model extraction cannot represent.
    let mut prev_param_res = 1.0f64;
    let mut selected: Option<PathEstimateSet> = None;
    let mut warm: Option<CpdFactors> = None;
    for rank in 1..=cfg.max_rank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((rank as u64) << 32));
        let mut best: Option<(CpdFactors, PathEstimateSet)> = None;
        for restart in 0..cfg.restarts.max(1) {
            // Warm continuation of the previous rank's solution gets a
            // reduced budget: it only needs to place the one new column.
            let (init, iters) = match (restart, &warm) {
                (0, Some(prev)) => (AlsInit::Warm(prev), cfg.als_max_iters.div_ceil(4)),
                (0, None) | (1, Some(_)) => (AlsInit::Hosvd, cfg.als_max_iters),
                _ => (AlsInit::Random, cfg.als_max_iters),
            };
            let factors = als_single(&y, rank, cfg, iters, init, &mut rng);
            let est = extract_params(&factors, tensor, array, ofdm, cfg)?;
            if best.as_ref().map_or(true, |b| est.residual < b.1.residual) {
                best = Some((factors, est));
            }
        }
        let (factors, est) = best.expect("at least one restart");
        let improvement = (prev_param_res - est.residual) / prev_param_res.max(f64::MIN_POSITIVE);
        if improvement < cfg.rank_improvement_threshold {
            break;
        }
        prev_param_res = est.residual;
        selected = Some(est);
        warm = Some(factors);
        if prev_param_res < 1e-8 {
            break;
        }
    }

    Ok(selected.unwrap_or_else(PathEstimateSet::empty))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform::synthesize_with_noise_variance;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn test_ofdm() -> OfdmConfig {
        OfdmConfig {
            subcarriers: 288,
            subcarrier_spacing: 60e3,
            n_symbols: 12,
            carrier_freq: 5.9e9,
            tx_power_dbm: 10.0,
            noise_psd_dbm_hz: -174.0,
            noise_figure_db: 8.0,
        }
    }

    fn test_array() -> ArrayConfig {
        ArrayConfig::half_wavelength(4, 2, test_ofdm().wavelength()).unwrap()
    }

    fn path(gain: Complex64, toa: f64, az: f64, el: f64) -> PathParams {
        PathParams { gain, toa, aoa_az: az, aoa_el: el, bounce_count: 0, is_los: false }
    }

    fn noiseless(paths: &[PathParams]) -> ObservationTensor {
        synthesize_with_noise_variance(paths, &test_array(), &test_ofdm(), 0.0, 0).unwrap()
    }

    fn unfold_rows(data: &Array3<Complex64>, mode: usize) -> DMatrix<Complex64> {
        let (ni, nj, nk) = data.dim();
        let (rows, _) = match mode {
            0 => (ni, nj * nk),
            1 => (nj, ni * nk),
            _ => (nk, ni * nj),
        };
        let cols = ni * nj * nk / rows;
        let mut m = DMatrix::<Complex64>::zeros(rows, cols);
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let v = data[(i, j, k)];
                    match mode {
                        0 => m[(i, j * nk + k)] = v,
                        1 => m[(j, i * nk + k)] = v,
                        _ => m[(k, i * nj + j)] = v,
                    }
                }
            }
        }
        m
    }

    fn numerical_rank(m: &DMatrix<Complex64>, rel_tol: f64) -> usize {
        let svd = m.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        sv.iter().filter(|&&s| s > rel_tol * sv[0]).count()
    }

    #[test]
    fn augment_matches_augmented_factor_structure() {
        // Oracle: independently construct the augmented steering factors of a
        // single path and compare their outer product against augment().
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let p = path(Complex64::new(0.8, -0.3), 240e-9, 0.5, -0.15);
        let t = noiseless(&[p]);
        let aug = augment(&t, &cfg).unwrap();

        let a_z = augmented_steering_z(&array, &ofdm, p.aoa_el, p.toa, cfg.n_z_aug);
        let a_x = augmented_steering_x(&array, &ofdm, p.aoa_az, p.aoa_el, p.toa, cfg.n_x_aug);
        let v = cfg.augmented_freq_len(ofdm.subcarriers).unwrap();
        let d = delay_steering_n(v, ofdm.subcarrier_spacing, p.toa);
        for (i, zi) in a_z.iter().enumerate() {
            for (j, xj) in a_x.iter().enumerate() {
                for (k, dk) in d.iter().enumerate() {
                    let want = p.gain * zi * xj * dk;
                    let got = aug[(i, j, k)];
                    assert!((want - got).norm() < 1e-12, "mismatch at ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn augment_zero_orders_is_identity() {
        let cfg = SaConfig { n_z_aug: 0, n_x_aug: 0, ..SaConfig::default() };
        let t = noiseless(&[path(Complex64::new(1.0, 0.0), 100e-9, 0.2, -0.1)]);
        let aug = augment(&t, &cfg).unwrap();
        assert_eq!(aug.dim(), t.data.dim());
        for (a, b) in aug.iter().zip(t.data.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn augmentation_fixes_shared_angle_rank_deficiency() {
        // SVD oracle: two paths sharing both angles give a rank-1 raw mode-1
        // unfolding but a rank-2 augmented one.
        let cfg = SaConfig::default();
        let p1 = path(Complex64::new(1.0, 0.0), 200e-9, 0.4, -0.1);
        let p2 = path(Complex64::new(0.5, 0.5), 350e-9, 0.4, -0.1);
        let t = noiseless(&[p1, p2]);
        assert_eq!(numerical_rank(&unfold_rows(&t.data, 0), 1e-9), 1);
        let aug = augment(&t, &cfg).unwrap();
        assert_eq!(numerical_rank(&unfold_rows(&aug, 0), 1e-9), 2);
    }

    #[test]
    fn augment_rejects_tiny_v() {
        let cfg = SaConfig { n_z_aug: 200, n_x_aug: 100, ..SaConfig::default() };
        let t = noiseless(&[path(Complex64::new(1.0, 0.0), 100e-9, 0.2, -0.1)]);
        assert!(matches!(augment(&t, &cfg), Err(ChestError::AugmentationTooLarge(_))));
    }

    #[test]
    fn cpd_rank1_noiseless_exact() {
        let cfg = SaConfig::default();
        let p = path(Complex64::new(0.9, 0.1), 300e-9, -0.4, -0.2);
        let aug = augment(&noiseless(&[p]), &cfg).unwrap();
        let f = cpd_als(&aug, 1, &cfg, 1).unwrap();
        assert!(f.residual < 1e-8, "residual {}", f.residual);
    }

    #[test]
    fn cpd_rank2_well_separated_paths() {
        let cfg = SaConfig::default();
        let p1 = path(Complex64::new(1.0, 0.0), 150e-9, 0.5, -0.1);
        let p2 = path(Complex64::new(0.4, 0.6), 450e-9, -0.7, -0.3);
        let aug = augment(&noiseless(&[p1, p2]), &cfg).unwrap();
        let f = cpd_als(&aug, 2, &cfg, 2).unwrap();
        assert!(f.residual < 1e-6, "residual {}", f.residual);
    }

    #[test]
    fn cpd_overshooting_rank_is_contained() {
        // With R = true rank + 1 on noiseless data the unstructured fit
        // stays exact. ALS is free to reach that optimum through a
        // degenerate cancelling pair rather than an idle third component, so
        // the guarantee that matters lives one level up: the rank sweep's
        // parametric elbow rejects the overshot rank and the pipeline
        // recovers exactly the two true paths.
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let p1 = path(Complex64::new(1.0, 0.0), 150e-9, 0.5, -0.1);
        let p2 = path(Complex64::new(0.4, 0.6), 450e-9, -0.7, -0.3);
        let t = noiseless(&[p1, p2]);
        let aug = augment(&t, &cfg).unwrap();
        let f = cpd_als(&aug, 3, &cfg, 3).unwrap();
        assert!(f.residual < 1e-6, "residual {}", f.residual);

        let est = estimate(&t, &array, &ofdm, &cfg, 3).unwrap();
        assert_eq!(est.rank_used, 2);
        assert_eq!(est.paths.len(), 2);
        let dres = 1.0 / (ofdm.subcarriers as f64 * ofdm.subcarrier_spacing);
        assert!((est.paths[0].toa - p1.toa).abs() < 0.01 * dres);
        assert!((est.paths[1].toa - p2.toa).abs() < 0.01 * dres);
        assert!((est.paths[0].gain - p1.gain).norm() < 5e-3 * p1.gain.norm());
        assert!((est.paths[1].gain - p2.gain).norm() < 5e-3 * p2.gain.norm());
    }

    #[test]
    fn extract_single_path_parameters() {
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let truth = path(
            Complex64::from_polar(1.0, 0.7),
            200e-9,
            30f64.to_radians(),
            -10f64.to_radians(),
        );
        let t = noiseless(&[truth]);
        let aug = augment(&t, &cfg).unwrap();
        let f = cpd_als(&aug, 1, &cfg, 5).unwrap();
        let est = extract_params(&f, &t, &array, &ofdm, &cfg).unwrap();
        assert_eq!(est.paths.len(), 1);
        let got = est.paths[0];
        let tau_tol = 0.001 / (ofdm.subcarriers as f64 * ofdm.subcarrier_spacing);
        assert!((got.toa - truth.toa).abs() < tau_tol, "dtau {}", got.toa - truth.toa);
        assert!((got.aoa_az - truth.aoa_az).abs() < 0.05f64.to_radians());
        assert!((got.aoa_el - truth.aoa_el).abs() < 0.05f64.to_radians());
        assert!(got.gain.norm() > 0.999 && got.gain.norm() < 1.001);
        assert!(!est.clamped[0]);
    }

    #[test]
    fn extract_is_invariant_to_component_permutation() {
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let p1 = path(Complex64::new(1.0, 0.0), 150e-9, 0.5, -0.1);
        let p2 = path(Complex64::new(0.4, 0.6), 450e-9, -0.7, -0.3);
        let t = noiseless(&[p1, p2]);
        let aug = augment(&t, &cfg).unwrap();
        let f = cpd_als(&aug, 2, &cfg, 7).unwrap();
        let est = extract_params(&f, &t, &array, &ofdm, &cfg).unwrap();

        let swap = |m: &FactorMat| {
            let mut out = m.clone();
            for e in 0..m.rows {
                out.data.swap(e * 2, e * 2 + 1);
            }
            out
        };
        let swapped = CpdFactors {
            z: swap(&f.z),
            x: swap(&f.x),
            f: swap(&f.f),
            residual: f.residual,
            regularized: f.regularized,
        };
        let est2 = extract_params(&swapped, &t, &array, &ofdm, &cfg).unwrap();
        assert_eq!(est.paths.len(), est2.paths.len());
        for (a, b) in est.paths.iter().zip(&est2.paths) {
            assert_relative_eq!(a.toa, b.toa, max_relative = 1e-9);
            assert_relative_eq!(a.aoa_az, b.aoa_az, max_relative = 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn phase_slope_scale_invariant(
            toa in 1e-9f64..0.9e-6,
            mag in 0.1f64..10.0,
            ph in -3.1f64..3.1,
        ) {
            let d = delay_steering_n(64, 60e3, toa);
            let scale = Complex64::from_polar(mag, ph);
            let scaled: Vec<Complex64> = d.iter().map(|v| v * scale).collect();
            let t1 = phase_slope_delay(&d, 60e3);
            let t2 = phase_slope_delay(&scaled, 60e3);
            prop_assert!((t1 - t2).abs() < 1e-18);
            prop_assert!((t1 - toa).abs() < 1e-15);
        }
    }

    #[test]
    fn estimate_noise_only_mostly_empty() {
        // Monte Carlo oracle calibrating the rank elbow plus energy floor:
        // at the default link budget, noise-only tensors should yield zero
        // surviving paths in at least 90% of seeds.
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let mut empty = 0;
        let trials = 20u64;
        for seed in 0..trials {
            let t = crate::waveform::synthesize(&[], &array, &ofdm, 1000 + seed).unwrap();
            let est = estimate(&t, &array, &ofdm, &cfg, seed).unwrap();
            if est.paths.is_empty() {
                empty += 1;
            }
        }
        assert!(empty * 10 >= trials * 9, "only {empty}/{trials} empty");
    }

    #[test]
    fn estimate_resolves_three_bin_delay_separation() {
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let dres = 1.0 / (ofdm.subcarriers as f64 * ofdm.subcarrier_spacing);
        let p1 = path(Complex64::new(1.0, 0.0), 200e-9, 0.3, -0.1);
        let p2 = path(Complex64::new(0.7, 0.4), 200e-9 + 3.0 * dres, -0.2, -0.15);
        let t = noiseless(&[p1, p2]);
        let est = estimate(&t, &array, &ofdm, &cfg, 11).unwrap();
        assert_eq!(est.paths.len(), 2, "both paths recovered, got {:?}", est.paths);
        assert!((est.paths[0].toa - p1.toa).abs() < 0.1 * dres);
        assert!((est.paths[1].toa - p2.toa).abs() < 0.1 * dres);
    }

    #[test]
    fn estimate_los_dominant_geometry_toa_rmse() {
        // The default-scenario geometry at y = 0: LoS plus a strong specular
        // ground bounce only 0.17 delay bins away (2.96 m at a 17.35 m bin).
        // The estimator cannot split that pair, so the identified LoS rides
        // the merged component with a deterministic bias near +0.9 m; the
        // Monte Carlo oracle puts the ToA RMSE at ~1.0 m in range units.
        // The bound asserted here is the oracle-calibrated regression guard
        // for this worst-case lane position.
        use crate::scene;
        use nalgebra::Vector3;
        let (array, ofdm) = (test_array(), test_ofdm());
        let cfg = SaConfig::default();
        let geom = scene::SceneGeometry::intersection_default();
        let rsu = scene::RsuState::new(Vector3::new(0.0, 0.0, 10.0), Vector3::zeros());
        let cru = scene::CruState::planar(1.6, 0.0, 1.5, 0.0, 14.0);
        let paths = scene::generate_paths(&geom, &rsu, &cru, ofdm.wavelength()).unwrap();
        let true_toa = paths[0].toa;

        let runs = 100u64;
        let mut sq_sum = 0.0;
        let mut used = 0;
        for seed in 0..runs {
            let t = crate::waveform::synthesize(&paths, &array, &ofdm, 5000 + seed).unwrap();
            let est = estimate(&t, &array, &ofdm, &cfg, seed).unwrap();
            if let Some(p) = est.paths.iter().min_by(|a, b| {
                (a.toa - true_toa)
                    .abs()
                    .partial_cmp(&(b.toa - true_toa).abs())
                    .unwrap()
            }) {
                let err_m = crate::SPEED_OF_LIGHT * (p.toa - true_toa);
                sq_sum += err_m * err_m;
                used += 1;
            }
        }
        assert!(used >= 95, "LoS found in {used}/{runs} runs");
        let rmse = (sq_sum / used as f64).sqrt();
        assert!(rmse < 1.2, "LoS ToA RMSE {rmse} m");
    }
}
