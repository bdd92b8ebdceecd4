//! Extended EM for bounded Gaussian mixtures.
//!
//! The fit runs in coordinates standardised by the corpus mean and standard
//! deviation; the returned model and log-likelihoods are in original units.
//! Each M-step moves a component to the moment-matching fixed point
//! `mu = xbar + m`, `Sigma = S + H`, where `m` and `H` are the truncation
//! corrections at the current parameters. The move is kept only if it does
//! not lower the component's share of the expected complete-data
//! log-likelihood; otherwise it is shortened by halving. This keeps the
//! likelihood trace monotone for any deterministic normaliser estimate.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::moments::{MomentEstimator, MomentMethod, TruncatedMoments};
use super::normal::Gaussian;
use super::qmc::DEFAULT_QMC_POINTS;
use super::{compute_bounds, feature_points, log_sum_exp, BgmModel, HyperRectBounds, KahanSum, ModelMeta};
use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{FeatureVector, Side};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const LLOYD_STEPS: usize = 20;
// Near convergence a rejected fixed point is usually moment-estimate noise,
// which shorter steps do not cure; keep the search short.
const BACKTRACK_STEPS: usize = 3;
const E_CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub tol: f64,
    pub max_iter: usize,
    /// Eigenvalue floor for covariances, in standardised units.
    pub cov_floor: f64,
    pub seed: u64,
    pub moment_method: MomentMethod,
    pub qmc_points: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 10,
            tol: 1e-6,
            max_iter: 500,
            cov_floor: 1e-8,
            seed: 0,
            moment_method: MomentMethod::QuasiMonteCarlo,
            qmc_points: DEFAULT_QMC_POINTS,
        }
    }
}

impl EmConfig {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.cov_floor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cov_floor must be positive, got {}",
                self.cov_floor
            )));
        }
        if self.qmc_points == 0 {
            return Err(Error::InvalidConfig("qmc_points must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: BgmModel,
    /// Log-likelihood of every E-step, in original units.
    pub log_likelihood: Vec<f64>,
    /// True when the last change fell below `tol`.
    pub converged: bool,
}

/// Parameters produced by one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStepUpdate {
    pub eta: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

/// Free parameters of a `k`-component mixture in `d` dimensions.
pub fn parameter_count(k: usize, d: usize) -> usize {
    k - 1 + k * d + k * d * (d + 1) / 2
}

pub fn bic(model: &BgmModel, features: &[FeatureVector]) -> Result<f64> {
    let ll = model.log_likelihood(features)?;
    Ok(bic_value(ll, model.k(), model.dim(), features.len()))
}

fn bic_value(ll: f64, k: usize, d: usize, n: usize) -> f64 {
    -2.0 * ll + parameter_count(k, d) as f64 * (n as f64).ln()
}

/// Posterior component probabilities, one row per event.
pub fn e_step(features: &[FeatureVector], model: &BgmModel) -> Result<DMatrix<f64>> {
    e_step_points(&feature_points(features), model)
}

pub fn e_step_points(points: &[Vec<f64>], model: &BgmModel) -> Result<DMatrix<f64>> {
    let k = model.k();
    let mut resp = DMatrix::zeros(points.len(), k);
    let log_w: Vec<f64> = model.weights().iter().map(|w| w.ln()).collect();
    let mut terms = vec![0.0; k];
    for (n, p) in points.iter().enumerate() {
        if !model.bounds().contains(p) {
            return Err(Error::OutOfBounds { index: n });
        }
        for (j, c) in model.components().iter().enumerate() {
            terms[j] = log_w[j] + c.gaussian().log_density(p);
        }
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::NonFinite(format!("density of event {n}")));
        }
        for j in 0..k {
            resp[(n, j)] = (terms[j] - lse).exp();
        }
    }
    Ok(resp)
}

/// One fixed-point M-step in the model's own coordinates, with the
/// truncation corrections evaluated at the model's current parameters.
pub fn m_step(
    features: &[FeatureVector],
    responsibilities: &DMatrix<f64>,
    model: &BgmModel,
    estimator: &MomentEstimator,
    cov_floor: f64,
) -> Result<MStepUpdate> {
    let data = Data::from_points(&feature_points(features))?;
    if responsibilities.nrows() != data.n || responsibilities.ncols() != model.k() {
        return Err(Error::DimensionMismatch {
            expected: data.n,
            found: responsibilities.nrows(),
        });
    }
    let b = model.bounds();
    let mut update = MStepUpdate {
        eta: Vec::new(),
        means: Vec::new(),
        covariances: Vec::new(),
    };
    for (k, c) in model.components().iter().enumerate() {
        let col: Vec<f64> = responsibilities.column(k).iter().copied().collect();
        let stats = WeightedStats::new(&data, &col, k)?;
        let mom = estimator.moments(c.mean(), c.cov(), b.lower(), b.upper())?;
        let (mean, cov) = fixed_point(&stats, &mom, cov_floor);
        update.eta.push(stats.weight / data.n as f64);
        update.means.push(mean);
        update.covariances.push(cov);
    }
    Ok(update)
}

/// Fits a mixture to feature vectors inside their own bounding box.
pub fn em_fit(features: &[FeatureVector], config: &EmConfig) -> Result<EmFit> {
    let bounds = compute_bounds(features)?;
    let lefts = features.iter().filter(|f| f.side() == Side::Left).count();
    let side = if 2 * lefts >= features.len() { Side::Left } else { Side::Right };
    em_fit_points(&feature_points(features), &bounds, side, config)
}

pub fn em_fit_points(
    points: &[Vec<f64>],
    bounds: &HyperRectBounds,
    side: Side,
    config: &EmConfig,
) -> Result<EmFit> {
    config.validate()?;
    let data = Data::from_points(points)?;
    let (n, d, kk) = (data.n, data.d, config.k);
    if d != bounds.dim() {
        return Err(Error::DimensionMismatch {
            expected: bounds.dim(),
            found: d,
        });
    }
    let required = kk * (d + 1);
    if n < required {
        return Err(Error::NotEnoughData { n, required });
    }
    if let Some(index) = (0..n).find(|&i| !bounds.contains(data.row(i))) {
        return Err(Error::OutOfBounds { index });
    }

    // Standardise.
    let mut center = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for i in 0..d {
        let mean = (0..n).map(|r| data.row(r)[i]).sum::<f64>() / n as f64;
        let var = (0..n).map(|r| (data.row(r)[i] - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::DegenerateBounds { dim: i, value: mean });
        }
        center[i] = mean;
        scale[i] = var.sqrt();
    }
    let z = data.map(|i, v| (v - center[i]) / scale[i]);
    let lower: Vec<f64> = (0..d).map(|i| (bounds.lower()[i] - center[i]) / scale[i]).collect();
    let upper: Vec<f64> = (0..d).map(|i| (bounds.upper()[i] - center[i]) / scale[i]).collect();
    let log_jacobian: f64 = n as f64 * scale.iter().map(|s| s.ln()).sum::<f64>();
    let estimator = MomentEstimator::new(
        config.moment_method,
        d,
        config.qmc_points,
        rng::derive_seed(config.seed, "qmc"),
    );
    let engine = Engine {
        data: &z,
        lower: &lower,
        upper: &upper,
        estimator: &estimator,
        floor: config.cov_floor,
    };

    let (init_means, init_cov) = initialize(&z, kk, config.seed, config.cov_floor);
    let mut comps = init_means
        .into_iter()
        .map(|m| engine.component(m, init_cov.clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut eta = vec![1.0 / kk as f64; kk];
    let mut trace = Vec::new();
    let mut converged = false;
    loop {
        let e = engine.e_step(&comps, &eta)?;
        let ll = e.log_likelihood - log_jacobian;
        if !ll.is_finite() {
            return Err(Error::NonFinite(format!("log-likelihood at iteration {}", trace.len())));
        }
        debug!("em iteration {}: log-likelihood {ll}", trace.len());
        let previous = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = previous {
            if (ll - prev).abs() < config.tol {
                converged = true;
                break;
            }
        }
        if trace.len() >= config.max_iter {
            break;
        }
        let mut next = Vec::with_capacity(kk);
        for (k, comp) in comps.into_iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|r| e.resp[r * kk + k]).collect();
            let stats = WeightedStats::new(&z, &col, k)?;
            eta[k] = stats.weight / n as f64;
            next.push(engine.guarded_update(comp, &stats));
        }
        comps = next;
    }

    // Back to original units; Z is invariant under the affine map.
    let mut weights: Vec<f64> = comps.iter().zip(&eta).map(|(c, e)| e / c.mom.mass).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let means = comps
        .iter()
        .map(|c| DVector::from_fn(d, |i, _| center[i] + scale[i] * c.gauss.mean()[i]))
        .collect();
    let covariances = comps
        .iter()
        .map(|c| {
            let mut cov = DMatrix::from_fn(d, d, |r, s| scale[r] * c.gauss.cov()[(r, s)] * scale[s]);
            cov = 0.5 * (&cov + cov.transpose());
            cov
        })
        .collect();
    let normalizers = comps.iter().map(|c| c.mom.mass).collect();
    let mut model = BgmModel::with_normalizers(side, weights, means, covariances, bounds.clone(), normalizers)?;
    let final_ll = *trace.last().expect("at least one E-step");
    model.set_meta(ModelMeta {
        seed: config.seed,
        tol: config.tol,
        iterations: trace.len(),
        final_log_likelihood: final_ll,
        bic: bic_value(final_ll, kk, d, n),
        moment_method: Some(config.moment_method),
        qmc_points: (config.moment_method == MomentMethod::QuasiMonteCarlo).then_some(config.qmc_points),
        ..ModelMeta::default()
    });
    Ok(EmFit {
        model,
        log_likelihood: trace,
        converged,
    })
}

/// Row-major `n x d` data.
struct Data {
    n: usize,
    d: usize,
    x: Vec<f64>,
}

impl Data {
    fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let d = points.first().map_or(0, |p| p.len());
        let mut x = Vec::with_capacity(n * d);
        for p in points {
            if p.len() != d {
                return Err(Error::DimensionMismatch { expected: d, found: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("input point".into()));
            }
            x.extend_from_slice(p);
        }
        Ok(Self { n, d, x })
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.d..(r + 1) * self.d]
    }

    fn map(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let d = self.d;
        Self {
            n: self.n,
            d,
            x: self.x.iter().enumerate().map(|(j, &v)| f(j % d, v)).collect(),
        }
    }
}

/// Responsibility-weighted total, mean and scatter of one component.
struct WeightedStats {
    weight: f64,
    mean: DVector<f64>,
    /// Scatter about `mean`, divided by `weight`.
    scatter: DMatrix<f64>,
}

impl WeightedStats {
    fn new(data: &Data, r: &[f64], component: usize) -> Result<Self> {
        let d = data.d;
        let weight: f64 = r.iter().sum();
        if !(weight >= 1e-8 * data.n as f64) {
            return Err(Error::EmptyComponent { component, weight });
        }
        let mut mean = DVector::zeros(d);
        for (i, &w) in r.iter().enumerate() {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += w * v;
            }
        }
        mean /= weight;
        let mut scatter = DMatrix::zeros(d, d);
        let mut dx = vec![0.0; d];
        for (i, &w) in r.iter().enumerate() {
            for (j, v) in data.row(i).iter().enumerate() {
                dx[j] = v - mean[j];
            }
            for a in 0..d {
                let wa = w * dx[a];
                for b in 0..=a {
                    scatter[(a, b)] += wa * dx[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = scatter[(a, b)] / weight;
                scatter[(a, b)] = v;
                scatter[(b, a)] = v;
            }
        }
        Ok(Self { weight, mean, scatter })
    }
}

fn fixed_point(stats: &WeightedStats, mom: &TruncatedMoments, floor: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mean = &stats.mean + &mom.mean_shift;
    let cov = regularize(&stats.scatter + &mom.cov_correction, floor);
    (mean, cov)
}

/// Symmetrises and lifts every eigenvalue to at least `floor`.
fn regularize(cov: DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let mut c = 0.5 * (&cov + cov.transpose());
    for i in 0..c.nrows() {
        if c[(i, i)] < floor {
            c[(i, i)] = floor;
        }
    }
    let eig = c.clone().symmetric_eigen();
    if eig.eigenvalues.min() >= floor {
        return c;
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&lifted) * v.transpose();
    out = 0.5 * (&out + out.transpose());
    out
}

struct Comp {
    gauss: Gaussian,
    mom: TruncatedMoments,
}

struct EStep {
    /// Row-major `n x k`.
    resp: Vec<f64>,
    log_likelihood: f64,
}

struct Engine<'a> {
    data: &'a Data,
    lower: &'a [f64],
    upper: &'a [f64],
    estimator: &'a MomentEstimator,
    floor: f64,
}

impl Engine<'_> {
    fn component(&self, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Comp> {
        let mom = self.estimator.moments(&mean, &cov, self.lower, self.upper)?;
        Ok(Comp {
            gauss: Gaussian::new(mean, cov)?,
            mom,
        })
    }

    fn e_step(&self, comps: &[Comp], eta: &[f64]) -> Result<EStep> {
        let k = comps.len();
        let offsets: Vec<f64> = comps.iter().zip(eta).map(|(c, e)| e.ln() - c.mom.mass.ln()).collect();
        let n = self.data.n;
        let parts: Vec<(Vec<f64>, KahanSum)> = (0..n.div_ceil(E_CHUNK))
            .into_par_iter()
            .map(|chunk| {
                let rows = chunk * E_CHUNK..((chunk + 1) * E_CHUNK).min(n);
                let mut resp = Vec::with_capacity(rows.len() * k);
                let mut sum = KahanSum::default();
                let mut terms = vec![0.0; k];
                for r in rows {
                    let x = self.data.row(r);
                    for j in 0..k {
                        terms[j] = offsets[j] + comps[j].gauss.log_density(x);
                    }
                    let lse = log_sum_exp(&terms);
                    sum.add(lse);
                    resp.extend(terms.iter().map(|t| (t - lse).exp()));
                }
                (resp, sum)
            })
            .collect();
        let mut resp = Vec::with_capacity(n * k);
        let mut total = KahanSum::default();
        for (r, s) in parts {
            resp.extend(r);
            total.add(s.value());
        }
        Ok(EStep {
            resp,
            log_likelihood: total.value(),
        })
    }

    /// Component part of the expected complete-data log-likelihood,
    /// `sum_n r_n ln g(x_n) - R ln Z`, evaluated from sufficient statistics.
    fn objective(&self, comp: &Comp, stats: &WeightedStats) -> f64 {
        let Some(chol) = comp.gauss.cov().clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let d = stats.mean.len() as f64;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let trace = chol.solve(&stats.scatter).trace();
        let dm = &stats.mean - comp.gauss.mean();
        let maha = dm.dot(&chol.solve(&dm));
        stats.weight * (-0.5 * (d * LN_2PI + log_det + trace + maha) - comp.mom.mass.ln())
    }

    fn guarded_update(&self, old: Comp, stats: &WeightedStats) -> Comp {
        let base = self.objective(&old, stats);
        let (cand_mean, cand_cov) = fixed_point(stats, &old.mom, self.floor);
        let mut alpha = 1.0;
        for _ in 0..=BACKTRACK_STEPS {
            let mean = if alpha == 1.0 {
                cand_mean.clone()
            } else {
                old.gauss.mean() * (1.0 - alpha) + &cand_mean * alpha
            };
            let cov = if alpha == 1.0 {
                cand_cov.clone()
            } else {
                regularize(old.gauss.cov() * (1.0 - alpha) + &cand_cov * alpha, self.floor)
            };
            if let Ok(comp) = self.component(mean, cov) {
                if self.objective(&comp, stats) >= base {
                    return comp;
                }
            }
            alpha *= 0.5;
        }
        old
    }
}

/// k-means++ seeding followed by a few Lloyd steps; every component starts
/// from the corpus covariance divided by `k`.
fn initialize(data: &Data, k: usize, seed: u64, floor: f64) -> (Vec<DVector<f64>>, DMatrix<f64>) {
    let (n, d) = (data.n, data.d);
    let mut rng = rng::stream(seed, "em-init", 0);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = vec![data.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|r| dist2(data.row(r), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            nearest
                .iter()
                .position(|&w| {
                    acc += w;
                    acc > target
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = data.row(pick).to_vec();
        for (r, best) in nearest.iter_mut().enumerate() {
            *best = best.min(dist2(data.row(r), &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..LLOYD_STEPS {
        let mut changed = false;
        for (r, a) in assign.iter_mut().enumerate() {
            let x = data.row(r);
            let best = (0..k)
                .min_by(|&i, &j| dist2(x, &centers[i]).total_cmp(&dist2(x, &centers[j])))
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (r, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(data.row(r)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }

    let ones = vec![1.0; n];
    let corpus = WeightedStats::new(data, &ones, 0).expect("non-empty corpus");
    let cov = regularize(corpus.scatter / k as f64, floor);
    (centers.into_iter().map(DVector::from_vec).collect(), cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian_cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(seed, "test", 0);
        (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                vec![1.0 + 2.0 * a, -3.0 + 0.5 * a + 0.3 * b]
            })
            .collect()
    }

    fn wide(points: &[Vec<f64>]) -> HyperRectBounds {
        let d = points[0].len();
        HyperRectBounds::new(vec![-1e3; d], vec![1e3; d]).unwrap()
    }

    #[test]
    fn parameter_count_formula() {
        assert_eq!(parameter_count(1, 8), 8 + 36);
        assert_eq!(parameter_count(3, 8), 2 + 24 + 108);
        assert!(bic_value(-100.0, 4, 8, 500) > bic_value(-100.0, 3, 8, 500));
    }

    #[test]
    fn single_component_reaches_sample_moments() {
        let pts = gaussian_cloud(400, 1);
        let cfg = EmConfig {
            k: 1,
            ..EmConfig::default()
        };
        let fit = em_fit_points(&pts, &wide(&pts), Side::Left, &cfg).unwrap();
        assert!(fit.converged);
        assert!(fit.log_likelihood.len() <= 3, "{:?}", fit.log_likelihood);
        let n = pts.len() as f64;
        let mean: Vec<f64> = (0..2).map(|i| pts.iter().map(|p| p[i]).sum::<f64>() / n).collect();
        let c = &fit.model.components()[0];
        for i in 0..2 {
            assert!((c.mean()[i] - mean[i]).abs() < 1e-9);
            for j in 0..2 {
                let s = pts.iter().map(|p| (p[i] - mean[i]) * (p[j] - mean[j])).sum::<f64>() / n;
                assert!((c.cov()[(i, j)] - s).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn too_few_points() {
        let pts = gaussian_cloud(5, 2);
        let err = em_fit_points(&pts, &wide(&pts), Side::Left, &EmConfig::with_k(2)).unwrap_err();
        assert!(matches!(err, Error::NotEnoughData { n: 5, required: 6 }));
    }

    #[test]
    fn regularize_lifts_small_eigenvalues() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let r = regularize(c, 1e-3);
        let eig = r.symmetric_eigen().eigenvalues;
        assert!(eig.min() >= 1e-3 - 1e-12);
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert_eq!(regularize(ok.clone(), 1e-8), ok);
    }
}
