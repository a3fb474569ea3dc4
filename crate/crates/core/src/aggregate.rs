//! Multi-view feature fusion on the unit sphere.
//!
//! The product path is the single-pass streaming cosine-loss median: each
//! observation moves the current unit estimate along its tangent component
//! with step `w / (W + w)` and renormalizes. Only `(z, W)` is kept per
//! Gaussian. The weighted mean and the Euclidean (Weiszfeld) geometric median
//! are the baselines it is compared against.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::FEATURE_NORM_TOLERANCE;

/// Below this norm the renormalization is skipped and the estimate kept.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureObservation {
    pub feature: Vec<f64>,
    pub weight: f64,
    pub view_index: u32,
}

impl FeatureObservation {
    pub fn new(feature: Vec<f64>, weight: f64, view_index: u32) -> Result<Self> {
        let n = dot(&feature, &feature).sqrt();
        if (n - 1.0).abs() > FEATURE_NORM_TOLERANCE {
            return Err(Error::validation(format!(
                "observation feature norm {n} is not unit"
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::validation(format!(
                "observation weight {weight} must be positive"
            )));
        }
        Ok(Self {
            feature,
            weight,
            view_index,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    CosineMedian,
    WeightedMean,
    L1Median,
}

impl Aggregator {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregator::CosineMedian => "cosine-median",
            Aggregator::WeightedMean => "weighted-mean",
            Aggregator::L1Median => "l1-median",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine-median" => Ok(Aggregator::CosineMedian),
            "weighted-mean" => Ok(Aggregator::WeightedMean),
            "l1-median" => Ok(Aggregator::L1Median),
            other => Err(Error::config(format!("unknown aggregator {other:?}"))),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// One streaming step on raw buffers. `z` must be unit; `total_weight` is the
/// cumulative weight before this observation and is advanced by `weight`.
///
/// Returns the step size used.
pub fn streaming_step(z: &mut [f64], total_weight: &mut f64, feature: &[f64], weight: f64) -> f64 {
    let eta = weight / (*total_weight + weight);
    let fz = dot(feature, z);
    let mut sq = 0.0;
    // Candidate z + eta * (f - (f.z) z), built in place only if accepted.
    for (zi, fi) in z.iter().zip(feature) {
        let c = zi + eta * (fi - fz * zi);
        sq += c * c;
    }
    let n = sq.sqrt();
    if n >= DEGENERATE_NORM {
        for (zi, fi) in z.iter_mut().zip(feature) {
            *zi = (*zi + eta * (fi - fz * *zi)) / n;
        }
    }
    *total_weight += weight;
    eta
}

/// Constant-memory streaming aggregator state for one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianState {
    pub z: Vec<f64>,
    pub total_weight: f64,
    pub count: u64,
}

impl MedianState {
    /// Starts at the first observed feature with zero cumulative weight.
    pub fn new(first_feature: &[f64]) -> Self {
        Self {
            z: first_feature.to_vec(),
            total_weight: 0.0,
            count: 0,
        }
    }

    pub fn update(&mut self, feature: &[f64], weight: f64) {
        streaming_step(&mut self.z, &mut self.total_weight, feature, weight);
        self.count += 1;
    }

    pub fn observe(&mut self, obs: &FeatureObservation) {
        self.update(&obs.feature, obs.weight);
    }
}

/// Functional form of one update.
pub fn streaming_update(state: &MedianState, obs: &FeatureObservation) -> MedianState {
    let mut next = state.clone();
    next.observe(obs);
    next
}

/// Folds the whole stream, starting from the first feature. The first
/// update has a zero tangent and only accumulates weight.
pub fn aggregate_stream(dim: usize, observations: &[FeatureObservation]) -> (Vec<f64>, f64) {
    aggregate_stream_epochs(dim, observations, 1)
}

/// Re-streams the observations `epochs` times through one state. Only used
/// to probe convergence; the lift is single-pass.
pub fn aggregate_stream_epochs(
    dim: usize,
    observations: &[FeatureObservation],
    epochs: usize,
) -> (Vec<f64>, f64) {
    let Some(first) = observations.first() else {
        return (vec![0.0; dim], 0.0);
    };
    let mut state = MedianState::new(&first.feature);
    for _ in 0..epochs {
        for obs in observations {
            state.observe(obs);
        }
    }
    (state.z, state.total_weight)
}

/// `sum(w f) / sum(w)`, not normalized. Zero when the total weight is zero.
pub fn weighted_mean(dim: usize, observations: &[FeatureObservation]) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for obs in observations {
        for (a, f) in acc.iter_mut().zip(&obs.feature) {
            *a += obs.weight * f;
        }
        total += obs.weight;
    }
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else {
        acc.fill(0.0);
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeiszfeldOptions {
    pub max_iters: usize,
    pub eps: f64,
}

impl Default for WeiszfeldOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            eps: 1e-10,
        }
    }
}

/// Weighted sum of Euclidean distances from `z` to the observations.
pub fn weiszfeld_objective(z: &[f64], observations: &[FeatureObservation]) -> f64 {
    observations
        .iter()
        .map(|o| o.weight * euclidean(z, &o.feature))
        .sum()
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Weighted Euclidean geometric median by Weiszfeld iteration from the
/// weighted mean.
pub fn weiszfeld_median(
    dim: usize,
    observations: &[FeatureObservation],
    opts: WeiszfeldOptions,
) -> Vec<f64> {
    weiszfeld_median_traced(dim, observations, opts).0
}

/// Like [`weiszfeld_median`] but also returns the objective after every
/// iterate, starting with the initial point.
pub fn weiszfeld_median_traced(
    dim: usize,
    observations: &[FeatureObservation],
    opts: WeiszfeldOptions,
) -> (Vec<f64>, Vec<f64>) {
    let mut z = weighted_mean(dim, observations);
    let mut trace = vec![weiszfeld_objective(&z, observations)];
    if observations.is_empty() {
        return (z, trace);
    }
    let mut next = vec![0.0; dim];
    for _ in 0..opts.max_iters {
        next.fill(0.0);
        let mut denom = 0.0;
        for obs in observations {
            let dist = euclidean(&z, &obs.feature);
            if dist < 1e-12 {
                // z sits on a data point; it is returned as the anchor.
                let anchor = obs.feature.clone();
                trace.push(weiszfeld_objective(&anchor, observations));
                return (anchor, trace);
            }
            let c = obs.weight / dist;
            for (n, f) in next.iter_mut().zip(&obs.feature) {
                *n += c * f;
            }
            denom += c;
        }
        next.iter_mut().for_each(|n| *n /= denom);
        let step = euclidean(&next, &z);
        std::mem::swap(&mut z, &mut next);
        trace.push(weiszfeld_objective(&z, observations));
        if step < opts.eps {
            break;
        }
    }
    (z, trace)
}

/// `sum(w (f - (f.z) z))`: the negative Riemannian gradient of the weighted
/// cosine loss at unit `z`.
pub fn tangent_gradient(z: &[f64], observations: &[FeatureObservation]) -> Vec<f64> {
    let mut g = vec![0.0; z.len()];
    for obs in observations {
        let fz = dot(&obs.feature, z);
        for ((gi, fi), zi) in g.iter_mut().zip(&obs.feature).zip(z) {
            *gi += obs.weight * (fi - fz * zi);
        }
    }
    g
}

/// Weighted cosine loss `sum(w (1 - f.z))`.
pub fn cosine_objective(z: &[f64], observations: &[FeatureObservation]) -> f64 {
    observations
        .iter()
        .map(|o| o.weight * (1.0 - dot(&o.feature, z)))
        .sum()
}

/// Unweighted mean of `1 - f.z` over the observations.
pub fn dispersion(observations: &[FeatureObservation], z: &[f64]) -> f64 {
    if observations.is_empty() {
        return 0.0;
    }
    observations
        .iter()
        .map(|o| 1.0 - dot(&o.feature, z))
        .sum::<f64>()
        / observations.len() as f64
}

/// Mean per-Gaussian dispersion over Gaussians with positive field weight
/// and at least one observation.
pub fn scene_dispersion(
    field: &crate::scene::GaussianFeatureField,
    observations: &[Vec<FeatureObservation>],
) -> f64 {
    let mut acc = DispersionAccumulator::new(field.len());
    for (i, obs) in observations.iter().enumerate() {
        if !field.is_valid(i) {
            continue;
        }
        let z = field.feature_f64(i);
        for o in obs {
            acc.add(i, 1.0 - dot(&o.feature, &z));
        }
    }
    acc.scene_value()
}

/// Streaming per-Gaussian dispersion sums, so the scene value can be
/// computed in a second pass over the views without buffering observations.
#[derive(Debug, Clone)]
pub struct DispersionAccumulator {
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl DispersionAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            sums: vec![0.0; n],
            counts: vec![0; n],
        }
    }

    pub fn add(&mut self, gaussian: usize, misalignment: f64) {
        self.sums[gaussian] += misalignment;
        self.counts[gaussian] += 1;
    }

    pub fn per_gaussian(&self, gaussian: usize) -> Option<f64> {
        let c = self.counts[gaussian];
        (c > 0).then(|| self.sums[gaussian] / c as f64)
    }

    pub fn scene_value(&self) -> f64 {
        let (sum, n) = (0..self.sums.len())
            .filter_map(|i| self.per_gaussian(i))
            .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Unit-normalized copy; `None` for a (near) zero vector.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = norm(v);
    (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn obs(f: &[f64], w: f64) -> FeatureObservation {
        FeatureObservation::new(f.to_vec(), w, 0).unwrap()
    }

    #[test]
    fn observation_invariants() {
        assert!(FeatureObservation::new(vec![0.5, 0.0], 1.0, 0).is_err());
        assert!(FeatureObservation::new(vec![1.0, 0.0], 0.0, 0).is_err());
    }

    #[test]
    fn fixed_point_and_antipode() {
        let mut s = MedianState::new(&[0.6, 0.8]);
        s.update(&[0.6, 0.8], 2.0);
        assert_eq!(s.z, vec![0.6, 0.8]);
        assert_eq!(s.total_weight, 2.0);
        s.update(&[-0.6, -0.8], 5.0);
        assert_relative_eq!(s.z[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(s.z[1], 0.8, epsilon = 1e-15);
        assert_eq!(s.total_weight, 7.0);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn hand_step() {
        let s = MedianState {
            z: vec![1.0, 0.0],
            total_weight: 1.0,
            count: 1,
        };
        let next = streaming_update(&s, &obs(&[0.0, 1.0], 1.0));
        // Norm(1, 0.5)
        assert_relative_eq!(next.z[0], 2.0 / 5f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(next.z[1], 1.0 / 5f64.sqrt(), epsilon = 1e-12);
        assert_eq!(next.total_weight, 2.0);
    }

    #[test]
    fn two_step_stream() {
        let (z, w) = aggregate_stream(2, &[obs(&[1.0, 0.0], 1.0), obs(&[0.0, 1.0], 1.0)]);
        assert_relative_eq!(z[0], 0.8944, epsilon = 1e-4);
        assert_relative_eq!(z[1], 0.4472, epsilon = 1e-4);
        assert_eq!(w, 2.0);
    }

    #[test]
    fn identical_stream_and_empty_stream() {
        let f = [0.0, 0.6, 0.8];
        let stream: Vec<_> = [0.5, 1.5, 2.0].iter().map(|&w| obs(&f, w)).collect();
        let (z, w) = aggregate_stream(3, &stream);
        assert_eq!(z, f.to_vec());
        assert_eq!(w, 4.0);
        assert_eq!(aggregate_stream(3, &[]), (vec![0.0; 3], 0.0));
    }

    #[test]
    fn weighted_mean_examples() {
        let one = weighted_mean(2, &[obs(&[0.6, 0.8], 3.0)]);
        assert_relative_eq!(one[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(one[1], 0.8, epsilon = 1e-15);
        let m = weighted_mean(2, &[obs(&[1.0, 0.0], 1.0), obs(&[0.0, 1.0], 3.0)]);
        assert_eq!(m, vec![0.25, 0.75]);
        let n = normalized(&m).unwrap();
        assert_relative_eq!(n[0], 0.3162, epsilon = 1e-4);
        assert_relative_eq!(n[1], 0.9487, epsilon = 1e-4);
        let zero = weighted_mean(2, &[obs(&[1.0, 0.0], 1.0), obs(&[-1.0, 0.0], 1.0)]);
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(normalized(&zero).is_none());
    }

    #[test]
    fn weiszfeld_symmetric_and_single() {
        let cross: Vec<_> = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
            .iter()
            .map(|f| obs(f, 1.0))
            .collect();
        let m = weiszfeld_median(2, &cross, WeiszfeldOptions::default());
        assert!(m.iter().all(|v| v.abs() < 1e-8));
        let single = [obs(&[0.6, 0.8], 2.0)];
        assert_eq!(weiszfeld_median(2, &single, WeiszfeldOptions::default()), vec![0.6, 0.8]);
    }

    #[test]
    fn tangent_gradient_vanishes() {
        let same = [obs(&[0.0, 1.0, 0.0], 1.0), obs(&[0.0, 1.0, 0.0], 2.0)];
        assert!(tangent_gradient(&[0.0, 1.0, 0.0], &same).iter().all(|&g| g == 0.0));
        let mixed = [
            obs(&[1.0, 0.0, 0.0], 1.0),
            obs(&[0.0, 1.0, 0.0], 2.0),
            obs(&[0.0, 0.6, 0.8], 0.5),
        ];
        let z = normalized(&weighted_mean(3, &mixed)).unwrap();
        assert!(tangent_gradient(&z, &mixed).iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn dispersion_examples() {
        let z = [1.0, 0.0, 0.0];
        assert_eq!(dispersion(&[obs(&z, 1.0), obs(&z, 3.0)], &z), 0.0);
        let ortho = [obs(&[0.0, 1.0, 0.0], 1.0), obs(&[0.0, 0.0, 1.0], 1.0)];
        assert_eq!(dispersion(&ortho, &z), 1.0);
        assert_eq!(dispersion(&[obs(&[-1.0, 0.0, 0.0], 1.0)], &z), 2.0);
    }

    #[test]
    fn aggregator_parse() {
        assert_eq!("l1-median".parse::<Aggregator>().unwrap(), Aggregator::L1Median);
        assert!("median".parse::<Aggregator>().is_err());
        assert_eq!(Aggregator::WeightedMean.name(), "weighted-mean");
    }
}
