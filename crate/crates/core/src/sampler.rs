//! Event regeneration from a fitted mixture: bounded rejection sampling of
//! feature vectors and trajectory synthesis from a feature vector.

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bgmm::BgmModel;
use crate::error::{Error, Result};
use crate::rng;
use crate::trace::{travelled_distance, FeatureVector, Side, TrajectoryTrace, FEATURE_DIM};

/// Raw draws per batch in [`sample_features`].
pub const DEFAULT_N_GEN: usize = 100_000;

const DRAW_BATCH: usize = 4096;
const EVENT_BATCH: usize = 1024;
const STALL_BATCHES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Noise {
    Off,
    On,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatchReport {
    pub requested: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub seed: u64,
}

/// A regenerated event with the feature vector that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledEvent {
    pub features: FeatureVector,
    pub trace: TrajectoryTrace,
}

/// Draws `n_gen` points from the unbounded mixture and keeps those strictly
/// inside the model bounds.
pub fn sample_points(model: &BgmModel, n_gen: usize, seed: u64) -> (Vec<Vec<f64>>, SampleBatchReport) {
    let batches = n_gen.div_ceil(DRAW_BATCH);
    let accepted: Vec<Vec<f64>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let size = DRAW_BATCH.min(n_gen - b * DRAW_BATCH);
            draw_batch(model, size, seed, "sample", b as u64)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let report = SampleBatchReport {
        requested: n_gen,
        accepted: accepted.len(),
        acceptance_rate: if n_gen == 0 { 0.0 } else { accepted.len() as f64 / n_gen as f64 },
        seed,
    };
    (accepted, report)
}

pub fn sample_features(model: &BgmModel, n_gen: usize, seed: u64) -> Result<(Vec<FeatureVector>, SampleBatchReport)> {
    if model.dim() != FEATURE_DIM {
        return Err(Error::DimensionMismatch {
            expected: FEATURE_DIM,
            found: model.dim(),
        });
    }
    let (points, report) = sample_points(model, n_gen, seed);
    let features = points
        .iter()
        .map(|p| FeatureVector::from_slice(p))
        .collect::<Result<Vec<_>>>()?;
    Ok((features, report))
}

fn draw_batch(model: &BgmModel, size: usize, seed: u64, name: &str, index: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, name, index);
    let pick = WeightedIndex::new(model.weights()).expect("model weights are valid");
    let d = model.dim();
    let mut z = DVector::zeros(d);
    let mut out = Vec::new();
    for _ in 0..size {
        let c = &model.components()[pick.sample(&mut rng)];
        for v in z.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        let x = c.mean() + c.gaussian().chol() * &z;
        if model.bounds().contains_strict(x.as_slice()) {
            out.push(x.as_slice().to_vec());
        }
    }
    out
}

/// Synthesises a trace from `xi`. The sample count is `floor(T/Ts) + 1`
/// (at least 3) and the period is adjusted to `T / (L - 1)` so the duration
/// is reproduced exactly.
pub fn regenerate_event(xi: &FeatureVector, ts: f64, noise: Noise, seed: u64) -> Result<TrajectoryTrace> {
    if !(xi.duration > 0.0) || !xi.duration.is_finite() {
        return Err(Error::InvalidFeature(format!("duration must be positive, got {}", xi.duration)));
    }
    if !(xi.v_bar > 0.0) || !xi.v_bar.is_finite() {
        return Err(Error::InvalidFeature(format!("mean speed must be positive, got {}", xi.v_bar)));
    }
    if !(ts > 0.0) {
        return Err(Error::InvalidConfig(format!("sample period must be positive, got {ts}")));
    }
    let big_t = xi.duration;
    let len = (((big_t / ts) + 1e-9).floor() as usize + 1).max(3);
    let period = big_t / (len - 1) as f64;
    let mut rng = rng::stream(seed, "regenerate", 0);
    let noise_y = Normal::new(0.0, xi.sigma_y.max(0.0)).map_err(|e| Error::InvalidFeature(e.to_string()))?;
    let noise_v = Normal::new(0.0, xi.sigma_v.max(0.0)).map_err(|e| Error::InvalidFeature(e.to_string()))?;

    let mut speed = Vec::with_capacity(len);
    for l in 0..len {
        let t = l as f64 * period;
        let mut v = xi.v_bar + xi.a_bar * (t - 0.5 * big_t);
        if noise == Noise::On {
            v += noise_v.sample(&mut rng);
        }
        speed.push(v);
    }
    let x = travelled_distance(&speed, period);
    let d_x = x[len - 1];
    let lateral = x
        .iter()
        .map(|&xl| {
            let mut y = if d_x > 0.0 { xi.d_y * 4.0 * xl * (d_x - xl) / (d_x * d_x) } else { 0.0 };
            if noise == Noise::On {
                y += noise_y.sample(&mut rng);
            }
            y
        })
        .collect();
    let curvature = (0..len)
        .map(|l| xi.rho_0 + xi.delta_rho * (l as f64 * period) / big_t)
        .collect();
    let side = if xi.d_y < 0.0 { Side::Right } else { Side::Left };
    TrajectoryTrace::new(period, lateral, speed, curvature, side)
}

/// Samples until `count` events are accepted and regenerated. Feature
/// vectors whose regenerated speed profile is not strictly positive are
/// skipped.
pub fn sample_event_pairs(
    model: &BgmModel,
    count: usize,
    ts: f64,
    noise: Noise,
    seed: u64,
) -> Result<Vec<SampledEvent>> {
    sample_event_batch(model, count, ts, noise, seed).map(|(events, _)| events)
}

/// [`sample_event_pairs`] plus the rejection statistics of the raw draws.
/// Draws are made in whole batches, so `requested` counts every draw of the
/// batches consumed and `accepted` the ones inside the box.
pub fn sample_event_batch(
    model: &BgmModel,
    count: usize,
    ts: f64,
    noise: Noise,
    seed: u64,
) -> Result<(Vec<SampledEvent>, SampleBatchReport)> {
    if count == 0 {
        return Err(Error::InvalidConfig("event count must be at least 1".into()));
    }
    if model.dim() != FEATURE_DIM {
        return Err(Error::DimensionMismatch {
            expected: FEATURE_DIM,
            found: model.dim(),
        });
    }
    let noise_seed = rng::derive_seed(seed, "event-noise");
    let mut events = Vec::with_capacity(count);
    let mut empty = 0;
    let mut batch = 0u64;
    let mut in_box = 0;
    while events.len() < count {
        let before = events.len();
        let points = draw_batch(model, EVENT_BATCH, seed, "events", batch);
        in_box += points.len();
        for p in points {
            if events.len() == count {
                break;
            }
            let xi = FeatureVector::from_slice(&p)?;
            let index = events.len() as u64;
            match regenerate_event(&xi, ts, noise, noise_seed.wrapping_add(index)) {
                Ok(mut trace) => {
                    trace.set_side(model.side());
                    events.push(SampledEvent { features: xi, trace });
                }
                Err(Error::InvalidTrace(_)) | Err(Error::InvalidFeature(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        batch += 1;
        if events.len() == before {
            empty += 1;
            if empty >= STALL_BATCHES {
                return Err(Error::AcceptanceStall { batches: empty });
            }
        } else {
            empty = 0;
        }
    }
    let requested = batch as usize * EVENT_BATCH;
    let report = SampleBatchReport {
        requested,
        accepted: in_box,
        acceptance_rate: in_box as f64 / requested as f64,
        seed,
    };
    Ok((events, report))
}

pub fn sample_events(model: &BgmModel, count: usize, ts: f64, noise: Noise, seed: u64) -> Result<Vec<TrajectoryTrace>> {
    Ok(sample_event_pairs(model, count, ts, noise, seed)?
        .into_iter()
        .map(|e| e.trace)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bgmm::{HyperRectBounds, MomentEstimator};
    use crate::trace::{extract_features, EventFilterCriteria};
    use nalgebra::DMatrix;

    fn xi() -> FeatureVector {
        FeatureVector {
            duration: 4.1,
            d_y: 0.5,
            sigma_y: 0.04,
            v_bar: 20.0,
            a_bar: 0.3,
            sigma_v: 0.2,
            rho_0: 0.001,
            delta_rho: -0.0004,
        }
    }

    fn half_line_model() -> BgmModel {
        BgmModel::from_parts(
            Side::Left,
            vec![1.0],
            vec![DVector::from_vec(vec![0.0])],
            vec![DMatrix::from_element(1, 1, 1.0)],
            HyperRectBounds::new(vec![0.0], vec![10.0]).unwrap(),
            &MomentEstimator::closed_form(),
        )
        .unwrap()
    }

    #[test]
    fn noise_free_peak_and_endpoints() {
        let t = regenerate_event(&xi(), 0.1, Noise::Off, 0).unwrap();
        assert_eq!(t.len(), 42);
        let y = t.lateral_offset();
        assert!(y[0].abs() < 1e-12 && y[41].abs() < 1e-12);
        let peak = y.iter().copied().fold(0.0, f64::max);
        assert!((peak - 0.5).abs() < 2e-3, "{peak}");
        assert_eq!(t.duration(), 4.1);
    }

    #[test]
    fn noise_free_round_trip() {
        let t = regenerate_event(&xi(), 0.1, Noise::Off, 0).unwrap();
        let back = extract_features(&t, &EventFilterCriteria::default()).unwrap();
        assert_eq!(back.duration, 4.1);
        assert!((back.v_bar - 20.0).abs() < 1e-12);
        assert!((back.d_y - 0.5).abs() < 1e-9);
        assert!((back.a_bar - 0.3).abs() < 1e-9);
        assert!(back.sigma_y < 1e-9 && back.sigma_v < 1e-9);
    }

    #[test]
    fn rejects_invalid_features() {
        let mut bad = xi();
        bad.duration = 0.0;
        assert!(matches!(regenerate_event(&bad, 0.1, Noise::Off, 0), Err(Error::InvalidFeature(_))));
        let mut bad = xi();
        bad.v_bar = -1.0;
        assert!(matches!(regenerate_event(&bad, 0.1, Noise::Off, 0), Err(Error::InvalidFeature(_))));
    }

    #[test]
    fn half_box_acceptance() {
        let (pts, report) = sample_points(&half_line_model(), 100_000, 3);
        assert_eq!(report.accepted, pts.len());
        assert!((report.acceptance_rate - 0.5).abs() < 0.01, "{}", report.acceptance_rate);
        assert!(pts.iter().all(|p| p[0] > 0.0 && p[0] < 10.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let (a, _) = sample_points(&half_line_model(), 5000, 9);
        let (b, _) = sample_points(&half_line_model(), 5000, 9);
        let (c, _) = sample_points(&half_line_model(), 5000, 10);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
