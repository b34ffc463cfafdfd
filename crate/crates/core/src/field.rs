//! Analytic stand-in for a pretrained velocity model: Gaussian random
//! fields with closed-form conditional velocities, plus brute-force
//! Monte-Carlo validation oracles.
//!
//! The target distribution is a squared-exponential Gaussian field sampled
//! on the half-pixel grid of `[0, 1]^2`. Because the kernel is evaluated in
//! normalized coordinates, every resolution sees the same continuous
//! object, which is exactly the multi-resolution consistency the sampler
//! relies on.
//!
//! For data `X1 ~ N(mu, Sigma)` and noise `X0 ~ N(0, I)` on the path
//! `X_sigma = (1 - sigma) X1 + sigma X0`, conditioning gives the velocity
//! (w.r.t. increasing sigma) in closed form:
//!
//! ```text
//! u(x, sigma) = [sigma I - (1 - sigma) Sigma] A^-1 (x - (1 - sigma) mu) - mu
//! A = (1 - sigma)^2 Sigma + sigma^2 I
//! ```
//!
//! The squared-exponential kernel on a product grid factorizes as a
//! Kronecker product of two small one-axis kernels, so all dense work
//! happens on `h x h` and `w x w` matrices.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{LatentTensor, TensorShape};
use crate::rng::RngStream;

/// Hard cap on `h * w` for dense covariance work.
pub const RESOLUTION_BUDGET: u32 = 4096;

/// Field model description as it appears in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Constant mean level of the field.
    #[serde(default)]
    pub mean: f64,
    /// Kernel amplitude sigma_f (marginal standard deviation).
    pub amplitude: f64,
    /// Kernel length scale in normalized [0,1] coordinates.
    pub length_scale: f64,
    /// Optional mixture components; when present they replace the single
    /// field described by the top-level parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixture: Option<Vec<MixtureComponentSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponentSpec {
    pub weight: f64,
    #[serde(default)]
    pub mean: f64,
    pub amplitude: f64,
    pub length_scale: f64,
}

impl ModelSpec {
    pub fn gaussian(mean: f64, amplitude: f64, length_scale: f64) -> Self {
        Self { mean, amplitude, length_scale, mixture: None }
    }

    /// Instantiate the model (without preparing any resolution).
    pub fn build(&self) -> Result<FieldModel> {
        match &self.mixture {
            None => Ok(FieldModel::Gaussian(GaussianFieldModel::new(
                self.mean,
                self.amplitude,
                self.length_scale,
            )?)),
            Some(components) if components.is_empty() => Err(Error::Config(
                "model.mixture must not be empty when present".into(),
            )),
            Some(components) => {
                let mut fields = Vec::with_capacity(components.len());
                let mut weights = Vec::with_capacity(components.len());
                for c in components {
                    fields.push(GaussianFieldModel::new(c.mean, c.amplitude, c.length_scale)?);
                    weights.push(c.weight);
                }
                Ok(FieldModel::Mixture(MixtureModel::new(fields, weights)?))
            }
        }
    }
}

/// Eigendecomposition of a one-axis kernel factor.
#[derive(Debug, Clone)]
struct AxisEigen {
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
}

fn axis_kernel(n: u32, length_scale: f64, amplitude: f64) -> DMatrix<f64> {
    let n = n as usize;
    let coord = |i: usize| (i as f64 + 0.5) / n as f64;
    DMatrix::from_fn(n, n, |i, j| {
        let d = coord(i) - coord(j);
        amplitude * (-d * d / (2.0 * length_scale * length_scale)).exp()
    })
}

fn axis_eigen(n: u32, length_scale: f64, amplitude: f64) -> AxisEigen {
    let k = axis_kernel(n, length_scale, amplitude);
    let eig = k.symmetric_eigen();
    let mut eigvals = eig.eigenvalues;
    // The factor is PSD; clip the tiny negative rounding artifacts.
    for v in eigvals.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    AxisEigen { eigvals, eigvecs: eig.eigenvectors }
}

#[derive(Debug, Clone)]
struct ResolutionCache {
    row: AxisEigen,
    col: AxisEigen,
}

/// A resolution-consistent Gaussian random field target.
#[derive(Debug, Clone)]
pub struct GaussianFieldModel {
    mean_level: f64,
    amplitude: f64,
    length_scale: f64,
    jitter: f64,
    caches: HashMap<(u32, u32), ResolutionCache>,
}

impl GaussianFieldModel {
    pub fn new(mean_level: f64, amplitude: f64, length_scale: f64) -> Result<Self> {
        if !mean_level.is_finite() {
            return Err(Error::InvalidParameter("mean level must be finite".into()));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "amplitude must be positive, got {amplitude}"
            )));
        }
        if !(length_scale > 0.0 && length_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "length scale must be positive, got {length_scale}"
            )));
        }
        Ok(Self {
            mean_level,
            amplitude,
            length_scale,
            jitter: 1e-6 * amplitude * amplitude,
            caches: HashMap::new(),
        })
    }

    pub fn mean_level(&self) -> f64 {
        self.mean_level
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn check_budget(h: u32, w: u32) -> Result<()> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidShape("resolution axes must be >= 1".into()));
        }
        if h.saturating_mul(w) > RESOLUTION_BUDGET {
            return Err(Error::ResolutionBudget { h, w, budget: RESOLUTION_BUDGET });
        }
        Ok(())
    }

    /// Build (or reuse) the eigendecomposition cache for a resolution.
    pub fn prepare(&mut self, h: u32, w: u32) -> Result<()> {
        Self::check_budget(h, w)?;
        self.caches.entry((h, w)).or_insert_with(|| ResolutionCache {
            row: axis_eigen(h, self.length_scale, self.amplitude),
            col: axis_eigen(w, self.length_scale, self.amplitude),
        });
        Ok(())
    }

    pub fn is_prepared(&self, h: u32, w: u32) -> bool {
        self.caches.contains_key(&(h, w))
    }

    fn cache(&self, h: u32, w: u32) -> Result<&ResolutionCache> {
        self.caches
            .get(&(h, w))
            .ok_or(Error::ResolutionNotPrepared(h, w))
    }

    /// Dense covariance of the field at `(h, w)`: the kernel on the
    /// half-pixel grid plus diagonal jitter, in row-major pixel order.
    pub fn covariance_at(&self, h: u32, w: u32) -> Result<DMatrix<f64>> {
        Self::check_budget(h, w)?;
        let ky = axis_kernel(h, self.length_scale, self.amplitude);
        let kx = axis_kernel(w, self.length_scale, self.amplitude);
        let (hs, ws) = (h as usize, w as usize);
        let n = hs * ws;
        let mut cov = DMatrix::zeros(n, n);
        for p in 0..n {
            let (rp, cp) = (p / ws, p % ws);
            for q in 0..n {
                let (rq, cq) = (q / ws, q % ws);
                cov[(p, q)] = ky[(rp, rq)] * kx[(cp, cq)];
            }
        }
        for p in 0..n {
            cov[(p, p)] += self.jitter;
        }
        Ok(cov)
    }

    /// Mean vector (constant level) at a resolution, row-major.
    pub fn mean_vector(&self, h: u32, w: u32) -> DVector<f64> {
        DVector::from_element(h as usize * w as usize, self.mean_level)
    }

    /// Map every spatial plane through `Qy diag(f(lambda)) Qx^T` coordinates:
    /// computes `Qy (f(lam) .* (Qy^T P Qx)) Qx^T` for a per-eigenvalue scalar
    /// function, the workhorse for velocity, square-root, and density ops.
    fn apply_spectral(
        &self,
        x: &LatentTensor,
        h: u32,
        w: u32,
        f: impl Fn(f64) -> f64,
    ) -> Result<LatentTensor> {
        let cache = self.cache(h, w)?;
        let shape = x.shape();
        let (hs, ws) = (h as usize, w as usize);
        let mut out = Vec::with_capacity(x.data().len());
        for p in 0..shape.num_planes() {
            let plane = DMatrix::from_row_slice(hs, ws, x.plane(p));
            let t = cache.row.eigvecs.transpose() * plane * &cache.col.eigvecs;
            let scaled = DMatrix::from_fn(hs, ws, |i, j| {
                let lam = cache.row.eigvals[i] * cache.col.eigvals[j] + self.jitter;
                f(lam) * t[(i, j)]
            });
            let mapped = &cache.row.eigvecs * scaled * cache.col.eigvecs.transpose();
            for r in 0..hs {
                for c in 0..ws {
                    out.push(mapped[(r, c)]);
                }
            }
        }
        LatentTensor::from_vec(shape, out)
    }

    /// Closed-form conditional velocity at noise level `sigma`.
    pub fn analytic_velocity(&self, x: &LatentTensor, sigma: f64) -> Result<LatentTensor> {
        check_sigma(sigma)?;
        let shape = x.shape();
        let (h, w) = (shape.height, shape.width);
        let shifted = x.map(|v| v - (1.0 - sigma) * self.mean_level)?;
        let applied = self.apply_spectral(&shifted, h, w, |lam| {
            (sigma - (1.0 - sigma) * lam) / ((1.0 - sigma) * (1.0 - sigma) * lam + sigma * sigma)
        })?;
        applied.map(|v| v - self.mean_level)
    }

    /// Exact endpoint of the probability-flow ODE started at `z` at
    /// `sigma = 1`: the flow map of a Gaussian target is linear and lands on
    /// `mu + Sigma^(1/2) z`.
    pub fn exact_flow_endpoint(&self, z: &LatentTensor) -> Result<LatentTensor> {
        let shape = z.shape();
        let applied = self.apply_spectral(z, shape.height, shape.width, f64::sqrt)?;
        applied.map(|v| v + self.mean_level)
    }

    /// Draw exactly from the target at a prepared resolution.
    pub fn sample_exact(&self, shape: TensorShape, rng: &RngStream) -> Result<LatentTensor> {
        let z = crate::latent::sample_noise(shape, rng)?;
        self.exact_flow_endpoint(&z)
    }

    /// Gaussian log-density (up to a constant shared across components) of a
    /// plane under the marginal at level sigma, used for mixture weighting.
    fn marginal_log_density(&self, plane: &DMatrix<f64>, sigma: f64, h: u32, w: u32) -> Result<f64> {
        let cache = self.cache(h, w)?;
        let shifted = plane.map(|v| v - (1.0 - sigma) * self.mean_level);
        let t = cache.row.eigvecs.transpose() * shifted * &cache.col.eigvecs;
        let (hs, ws) = (h as usize, w as usize);
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for i in 0..hs {
            for j in 0..ws {
                let lam = cache.row.eigvals[i] * cache.col.eigvals[j] + self.jitter;
                let a = (1.0 - sigma) * (1.0 - sigma) * lam + sigma * sigma;
                quad += t[(i, j)] * t[(i, j)] / a;
                logdet += a.ln();
            }
        }
        Ok(-0.5 * (quad + logdet))
    }
}

/// A finite mixture of Gaussian fields; a richer multimodal target for
/// ablation realism.
#[derive(Debug, Clone)]
pub struct MixtureModel {
    components: Vec<GaussianFieldModel>,
    weights: Vec<f64>,
}

impl MixtureModel {
    /// Weights must be positive; they are normalized to sum to one.
    pub fn new(components: Vec<GaussianFieldModel>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() || components.len() != weights.len() {
            return Err(Error::InvalidParameter(
                "mixture needs matching, nonempty component and weight lists".into(),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(
                "mixture weights must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Ok(Self { components, weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussianFieldModel] {
        &self.components
    }

    pub fn prepare(&mut self, h: u32, w: u32) -> Result<()> {
        for c in &mut self.components {
            c.prepare(h, w)?;
        }
        Ok(())
    }

    /// Posterior-weighted combination of the component velocities:
    /// `w_k(x, sigma) ~ pi_k N(x; (1-sigma) mu_k, A_k)`, `u = sum w_k u_k`.
    pub fn mixture_velocity(&self, x: &LatentTensor, sigma: f64) -> Result<LatentTensor> {
        check_sigma(sigma)?;
        let shape = x.shape();
        let (h, w) = (shape.height, shape.width);
        let (hs, ws) = (h as usize, w as usize);
        let velocities: Vec<LatentTensor> = self
            .components
            .iter()
            .map(|c| c.analytic_velocity(x, sigma))
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; x.data().len()];
        let plane_len = shape.plane_len();
        for p in 0..shape.num_planes() {
            let plane = DMatrix::from_row_slice(hs, ws, x.plane(p));
            let mut logw: Vec<f64> = self
                .components
                .iter()
                .zip(&self.weights)
                .map(|(c, &pi)| Ok(pi.ln() + c.marginal_log_density(&plane, sigma, h, w)?))
                .collect::<Result<_>>()?;
            let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for lw in &mut logw {
                *lw = (*lw - max).exp();
            }
            let total: f64 = logw.iter().sum();
            for (k, vel) in velocities.iter().enumerate() {
                let wk = logw[k] / total;
                let vp = vel.plane(p);
                for (o, &v) in out[p * plane_len..(p + 1) * plane_len].iter_mut().zip(vp) {
                    *o += wk * v;
                }
            }
        }
        LatentTensor::from_vec(shape, out)
    }

    pub fn sample_exact(&self, shape: TensorShape, rng: &RngStream) -> Result<LatentTensor> {
        let mut gen = rng.rng();
        let k = pick_component(&self.weights, &mut gen);
        self.components[k].sample_exact(shape, &rng.child(1))
    }
}

fn pick_component(weights: &[f64], gen: &mut impl rand::Rng) -> usize {
    let u: f64 = gen.gen();
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    weights.len() - 1
}

/// Either target kind, as named by a [`ModelSpec`].
#[derive(Debug, Clone)]
pub enum FieldModel {
    Gaussian(GaussianFieldModel),
    Mixture(MixtureModel),
}

impl FieldModel {
    pub fn prepare(&mut self, h: u32, w: u32) -> Result<()> {
        match self {
            FieldModel::Gaussian(g) => g.prepare(h, w),
            FieldModel::Mixture(m) => m.prepare(h, w),
        }
    }

    /// The velocity field the sampler integrates.
    pub fn velocity(&self, x: &LatentTensor, sigma: f64) -> Result<LatentTensor> {
        match self {
            FieldModel::Gaussian(g) => g.analytic_velocity(x, sigma),
            FieldModel::Mixture(m) => m.mixture_velocity(x, sigma),
        }
    }

    /// Exact ODE endpoint; defined for single-Gaussian targets only.
    pub fn exact_flow_endpoint(&self, z: &LatentTensor) -> Result<LatentTensor> {
        match self {
            FieldModel::Gaussian(g) => g.exact_flow_endpoint(z),
            FieldModel::Mixture(_) => Err(Error::Unsupported(
                "exact flow endpoint is only defined for a single Gaussian target".into(),
            )),
        }
    }

    /// Draw exactly from the target distribution.
    pub fn sample_exact(&self, shape: TensorShape, rng: &RngStream) -> Result<LatentTensor> {
        match self {
            FieldModel::Gaussian(g) => g.sample_exact(shape, rng),
            FieldModel::Mixture(m) => m.sample_exact(shape, rng),
        }
    }

    /// Draw an (X0, X1) pair: independent standard noise and a target sample.
    fn sample_pair(&self, shape: TensorShape, rng: &RngStream) -> Result<(LatentTensor, LatentTensor)> {
        let x1 = self.sample_exact(shape, &rng.child(0))?;
        let x0 = crate::latent::sample_noise(shape, &rng.child(1))?;
        Ok((x0, x1))
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&sigma) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("sigma {sigma} outside [0, 1]")))
    }
}

/// A Monte-Carlo velocity estimate with per-component standard errors.
#[derive(Debug, Clone)]
pub struct McVelocityEstimate {
    pub estimate: LatentTensor,
    pub standard_error: Vec<f64>,
}

/// Brute-force velocity oracle for low-dimensional probes.
///
/// Draws `(X0, X1)` pairs, forms `X_sigma`, and estimates
/// `E[X0 - X1 | X_sigma = x_probe]` by locally-linear kernel regression with
/// a Gaussian kernel of the given (absolute) bandwidth. The local-linear fit
/// is exactly unbiased when the true conditional mean is affine in `x`, which
/// holds for Gaussian targets, so the estimate differs from the truth by pure
/// sampling noise at the reported standard error.
///
/// Deterministic in the supplied stream. `sigma = 0` conditions on the data
/// endpoint exactly and is rejected; use the analytic limit `u = -x` there.
pub fn mc_velocity_oracle(
    model: &FieldModel,
    x_probe: &LatentTensor,
    sigma: f64,
    n_samples: usize,
    bandwidth: f64,
    rng: &RngStream,
) -> Result<McVelocityEstimate> {
    let shape = x_probe.shape();
    let d = shape.num_elements();
    if d > 2 {
        return Err(Error::Unsupported(format!(
            "mc_velocity_oracle supports probes of dimension <= 2, got {d}"
        )));
    }
    if n_samples < 100_000 {
        return Err(Error::InvalidParameter(
            "mc_velocity_oracle needs n_samples >= 1e5".into(),
        ));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::InvalidParameter("bandwidth must be positive".into()));
    }
    check_sigma(sigma)?;
    if sigma == 0.0 {
        return Err(Error::Unsupported(
            "sigma = 0 conditions on the data endpoint exactly; use the analytic limit u = -x".into(),
        ));
    }

    // Draws: xs_i = (1-sigma) X1 + sigma X0, y_i = X0 - X1.
    let mut xs = vec![0.0; n_samples * d];
    let mut ys = vec![0.0; n_samples * d];
    for i in 0..n_samples {
        let (x0, x1) = model.sample_pair(shape, &rng.child(i as u64))?;
        for j in 0..d {
            xs[i * d + j] = (1.0 - sigma) * x1.data()[j] + sigma * x0.data()[j];
            ys[i * d + j] = x0.data()[j] - x1.data()[j];
        }
    }

    let probe = x_probe.data();
    let inv2b2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let m = d + 1; // design: [1, xs - probe]
    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DMatrix::<f64>::zeros(m, d);
    let mut g = vec![0.0; m];
    let mut weights = vec![0.0; n_samples];
    for i in 0..n_samples {
        let mut dist2 = 0.0;
        g[0] = 1.0;
        for j in 0..d {
            let u = xs[i * d + j] - probe[j];
            g[j + 1] = u;
            dist2 += u * u;
        }
        let w = (-dist2 * inv2b2).exp();
        weights[i] = w;
        if w == 0.0 {
            continue;
        }
        for a in 0..m {
            for b in 0..m {
                gram[(a, b)] += w * g[a] * g[b];
            }
            for j in 0..d {
                rhs[(a, j)] += w * g[a] * ys[i * d + j];
            }
        }
    }
    let gram_inv = gram.clone().try_inverse().ok_or_else(|| {
        Error::InvalidParameter(
            "kernel regression is degenerate near this probe; increase bandwidth or samples".into(),
        )
    })?;
    let beta = &gram_inv * &rhs; // (m x d)

    // Sandwich variance of the intercept row.
    let mut meat = vec![0.0; d];
    for i in 0..n_samples {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        g[0] = 1.0;
        for j in 0..d {
            g[j + 1] = xs[i * d + j] - probe[j];
        }
        // first row of gram_inv dotted with g
        let mut lever = 0.0;
        for a in 0..m {
            lever += gram_inv[(0, a)] * g[a];
        }
        for j in 0..d {
            let mut fit = 0.0;
            for a in 0..m {
                fit += beta[(a, j)] * g[a];
            }
            let r = ys[i * d + j] - fit;
            meat[j] += (w * lever * r) * (w * lever * r);
        }
    }
    let standard_error: Vec<f64> = meat.iter().map(|v| v.sqrt()).collect();
    let estimate = LatentTensor::from_vec(shape, (0..d).map(|j| beta[(0, j)]).collect())?;
    Ok(McVelocityEstimate { estimate, standard_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> LatentTensor {
        LatentTensor::from_vec(TensorShape::image(1, 1, 1, 1), vec![v]).unwrap()
    }

    /// 1-D target N(mean, var) realized as a 1x1 field.
    fn scalar_field(mean: f64, var: f64) -> GaussianFieldModel {
        let mut f = GaussianFieldModel::new(mean, var.sqrt(), 0.5).unwrap();
        f.prepare(1, 1).unwrap();
        f
    }

    #[test]
    fn covariance_diagonal_and_neighbors() {
        let f = GaussianFieldModel::new(0.0, 1.0, 0.5).unwrap();
        let cov = f.covariance_at(2, 2).unwrap();
        let jit = f.jitter();
        for p in 0..4 {
            assert!((cov[(p, p)] - (1.0 + jit)).abs() < 1e-15);
        }
        // Adjacent pixels on the 2x2 half-pixel grid sit 0.5 apart.
        let expect = (-0.25f64 / (2.0 * 0.25)).exp();
        assert!((cov[(0, 1)] - expect).abs() < 1e-12);
        assert!((expect - 0.6065306597).abs() < 1e-9);
    }

    #[test]
    fn covariance_constant_limit_for_huge_length_scale() {
        let f = GaussianFieldModel::new(0.0, 2.0, 1e3).unwrap();
        let cov = f.covariance_at(3, 3).unwrap();
        for p in 0..9 {
            for q in 0..9 {
                let expect = if p == q { 4.0 + f.jitter() } else { 4.0 };
                assert!((cov[(p, q)] - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn covariance_budget_is_enforced() {
        let mut f = GaussianFieldModel::new(0.0, 1.0, 0.3).unwrap();
        assert!(matches!(
            f.covariance_at(65, 65),
            Err(Error::ResolutionBudget { .. })
        ));
        assert!(matches!(f.prepare(128, 64), Err(Error::ResolutionBudget { .. })));
        f.prepare(64, 64).unwrap();
    }

    #[test]
    fn resolution_consistency_on_shared_points() {
        // Grids of size 2 and 6 share points: (j+0.5)/2 = (3j+1+0.5)/6.
        let f = GaussianFieldModel::new(0.0, 1.3, 0.27).unwrap();
        let coarse = f.covariance_at(2, 2).unwrap();
        let fine = f.covariance_at(6, 6).unwrap();
        let map = |r: usize, c: usize| (3 * r + 1) * 6 + (3 * c + 1);
        for (pc, &(pr, pcc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
            for (qc, &(qr, qcc)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                let fine_val = fine[(map(pr, pcc), map(qr, qcc))];
                assert_eq!(coarse[(pc, qc)], fine_val, "exact sharing violated");
            }
        }
    }

    #[test]
    fn velocity_limits() {
        let mut f = GaussianFieldModel::new(1.5, 0.8, 0.4).unwrap();
        f.prepare(4, 4).unwrap();
        let x = crate::latent::sample_noise(TensorShape::image(1, 1, 4, 4), &RngStream::from_seed(3)).unwrap();
        // sigma = 1: u = x - mu
        let u1 = f.analytic_velocity(&x, 1.0).unwrap();
        for (&u, &xv) in u1.data().iter().zip(x.data()) {
            assert!((u - (xv - 1.5)).abs() < 1e-10);
        }
        // sigma = 0: u = -x
        let u0 = f.analytic_velocity(&x, 0.0).unwrap();
        for (&u, &xv) in u0.data().iter().zip(x.data()) {
            assert!((u + xv).abs() < 1e-9);
        }
    }

    #[test]
    fn velocity_scalar_hand_value() {
        // N(2, 0.25), sigma = 0.5, x = 1: A = 0.3125, u = -2.
        let f = scalar_field(2.0, 0.25);
        let u = f.analytic_velocity(&scalar(1.0), 0.5).unwrap();
        assert!((u.data()[0] + 2.0).abs() < 1e-4, "u = {}", u.data()[0]);
    }

    #[test]
    fn velocity_requires_prepared_resolution() {
        let f = GaussianFieldModel::new(0.0, 1.0, 0.4).unwrap();
        let x = LatentTensor::zeros(TensorShape::image(1, 1, 4, 4)).unwrap();
        assert!(matches!(
            f.analytic_velocity(&x, 0.5),
            Err(Error::ResolutionNotPrepared(4, 4))
        ));
    }

    #[test]
    fn endpoint_examples() {
        let f = scalar_field(2.0, 0.25);
        assert!((f.exact_flow_endpoint(&scalar(0.0)).unwrap().data()[0] - 2.0).abs() < 1e-6);
        assert!((f.exact_flow_endpoint(&scalar(1.0)).unwrap().data()[0] - 2.5).abs() < 1e-4);
    }

    #[test]
    fn mixture_reduces_to_single_component() {
        let mut f = GaussianFieldModel::new(0.7, 1.1, 0.3).unwrap();
        f.prepare(3, 3).unwrap();
        let mix = MixtureModel::new(vec![f.clone()], vec![1.0]).unwrap();
        let x = crate::latent::sample_noise(TensorShape::image(1, 1, 3, 3), &RngStream::from_seed(8)).unwrap();
        for sigma in [0.2, 0.5, 0.9] {
            let a = f.analytic_velocity(&x, sigma).unwrap();
            let b = mix.mixture_velocity(&x, sigma).unwrap();
            for (&va, &vb) in a.data().iter().zip(b.data()) {
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_at_pure_noise_uses_prior_weights() {
        // sigma = 1: u = x - sum pi_k mu_k regardless of x.
        let mut a = GaussianFieldModel::new(3.0, 1.0, 0.5).unwrap();
        let mut b = GaussianFieldModel::new(-1.0, 0.5, 0.3).unwrap();
        a.prepare(1, 1).unwrap();
        b.prepare(1, 1).unwrap();
        let mix = MixtureModel::new(vec![a, b], vec![0.25, 0.75]).unwrap();
        let expect_mean = 0.25 * 3.0 + 0.75 * (-1.0);
        for xv in [-2.0, 0.3, 5.0] {
            let u = mix.mixture_velocity(&scalar(xv), 1.0).unwrap();
            assert!((u.data()[0] - (xv - expect_mean)).abs() < 1e-10);
        }
    }

    #[test]
    fn symmetric_mixture_velocity_vanishes_at_origin() {
        let mut a = GaussianFieldModel::new(2.0, 1.0, 0.5).unwrap();
        let mut b = GaussianFieldModel::new(-2.0, 1.0, 0.5).unwrap();
        a.prepare(1, 1).unwrap();
        b.prepare(1, 1).unwrap();
        let mix = MixtureModel::new(vec![a, b], vec![0.5, 0.5]).unwrap();
        for sigma in [0.1, 0.4, 0.8, 1.0] {
            let u = mix.mixture_velocity(&scalar(0.0), sigma).unwrap();
            assert!(u.data()[0].abs() < 1e-12, "sigma {sigma}: {}", u.data()[0]);
        }
    }

    #[test]
    fn mixture_rejects_bad_weights() {
        let f = GaussianFieldModel::new(0.0, 1.0, 0.5).unwrap();
        assert!(MixtureModel::new(vec![f.clone()], vec![0.0]).is_err());
        assert!(MixtureModel::new(vec![f], vec![]).is_err());
        assert!(MixtureModel::new(vec![], vec![]).is_err());
    }

    #[test]
    fn oracle_rejects_degenerate_inputs() {
        let model = FieldModel::Gaussian(scalar_field(0.0, 1.0));
        let probe = scalar(0.0);
        let rng = RngStream::from_seed(1);
        assert!(mc_velocity_oracle(&model, &probe, 0.0, 200_000, 0.2, &rng).is_err());
        assert!(mc_velocity_oracle(&model, &probe, 0.5, 10, 0.2, &rng).is_err());
        let big = LatentTensor::zeros(TensorShape::image(1, 1, 2, 2)).unwrap();
        assert!(mc_velocity_oracle(&model, &big, 0.5, 200_000, 0.2, &rng).is_err());
    }

    #[test]
    fn exact_endpoint_is_rejected_for_mixtures() {
        let mut f = GaussianFieldModel::new(0.0, 1.0, 0.5).unwrap();
        f.prepare(1, 1).unwrap();
        let mix = FieldModel::Mixture(MixtureModel::new(vec![f], vec![1.0]).unwrap());
        assert!(matches!(
            mix.exact_flow_endpoint(&scalar(0.1)),
            Err(Error::Unsupported(_))
        ));
    }
}
