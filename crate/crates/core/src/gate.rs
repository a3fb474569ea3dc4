//! Two-stage per-view visibility gate.
//!
//! Stage A keeps the shortest prefix of the descending weight list whose mass
//! reaches `tau_view` of the view total, then drops entries below `tau_abs`.
//! Stage B caps the kept count at `K_q`, the number of weights at or above the
//! `(1 - q)` quantile. The descending order breaks ties by ascending Gaussian
//! index so every result is reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::splat::VisibilityRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub tau_view: f64,
    pub tau_abs: f64,
    pub q: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            tau_view: 0.6,
            tau_abs: 1e-4,
            q: 0.1,
        }
    }
}

impl GateConfig {
    /// Rejects out-of-range values. `tau_view` outside `[0.5, 0.75]` but
    /// inside `(0, 1]` is accepted with a warning.
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_view > 0.0 && self.tau_view <= 1.0) {
            return Err(Error::config(format!(
                "tau_view must lie in (0, 1], got {}",
                self.tau_view
            )));
        }
        if !(0.5..=0.75).contains(&self.tau_view) {
            log::warn!(
                "tau_view {} is outside the recommended range [0.5, 0.75]",
                self.tau_view
            );
        }
        if !(self.tau_abs >= 0.0) || !self.tau_abs.is_finite() {
            return Err(Error::config(format!(
                "tau_abs must be non-negative, got {}",
                self.tau_abs
            )));
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(Error::config(format!("q must lie in (0, 1), got {}", self.q)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateResult {
    /// Kept Gaussian indices, ascending.
    pub kept: Vec<usize>,
    pub k_mass: usize,
    pub k_q: usize,
    pub k_keep: usize,
    pub s_tot: f64,
}

impl GateResult {
    fn empty() -> Self {
        Self {
            kept: Vec::new(),
            k_mass: 0,
            k_q: 0,
            k_keep: 0,
            s_tot: 0.0,
        }
    }
}

/// Total visibility mass of a view.
pub fn view_score(records: &[VisibilityRecord]) -> f64 {
    records.iter().map(|r| r.weight).sum()
}

/// `(weight, gaussian_index)` sorted by descending weight, ascending index.
fn sorted_desc(records: &[VisibilityRecord]) -> Vec<(f64, usize)> {
    let mut v: Vec<(f64, usize)> = records
        .iter()
        .map(|r| (r.weight, r.gaussian_index))
        .collect();
    v.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    v
}

/// Smallest `k` whose prefix mass reaches `tau_view * s_tot`; the full length
/// when rounding keeps every prefix short of the target.
fn mass_prefix(sorted: &[(f64, usize)], tau_view: f64, s_tot: f64) -> usize {
    let target = tau_view * s_tot;
    let mut acc = 0.0;
    for (k, &(w, _)) in sorted.iter().enumerate() {
        acc += w;
        if acc >= target {
            return k + 1;
        }
    }
    sorted.len()
}

/// Sum in canonical (descending) order, so the total does not depend on the
/// input permutation.
fn canonical_total(sorted: &[(f64, usize)]) -> f64 {
    sorted.iter().map(|&(w, _)| w).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassCoverage {
    pub k_mass: usize,
    /// Gaussian indices of the mass prefix that pass the floor, in
    /// descending-weight order.
    pub mass_set: Vec<usize>,
}

/// Mass coverage with absolute floor.
pub fn stage_a(records: &[VisibilityRecord], tau_view: f64, tau_abs: f64) -> MassCoverage {
    let sorted = sorted_desc(records);
    let s_tot = canonical_total(&sorted);
    if !(s_tot > 0.0) {
        return MassCoverage {
            k_mass: 0,
            mass_set: Vec::new(),
        };
    }
    let k_mass = mass_prefix(&sorted, tau_view, s_tot);
    let mass_set = sorted[..k_mass]
        .iter()
        .filter(|&&(w, _)| w >= tau_abs)
        .map(|&(_, i)| i)
        .collect();
    MassCoverage { k_mass, mass_set }
}

/// Lower-interpolation order statistic at quantile level `level`.
fn lower_quantile(ascending: &[f64], level: f64) -> f64 {
    let pos = (level * (ascending.len() - 1) as f64).floor() as usize;
    ascending[pos.min(ascending.len() - 1)]
}

fn count_at_or_above(weights: &[f64], threshold: f64) -> usize {
    weights.iter().filter(|&&w| w >= threshold).count()
}

/// Quantile-derived cardinality cap `K_q`.
pub fn stage_b(records: &[VisibilityRecord], q: f64) -> usize {
    if records.is_empty() {
        return 0;
    }
    let mut ascending: Vec<f64> = records.iter().map(|r| r.weight).collect();
    ascending.sort_by(f64::total_cmp);
    let tau_q = lower_quantile(&ascending, 1.0 - q);
    count_at_or_above(&ascending, tau_q)
}

/// Full gate: sort, mass prefix, floor, truncate to `min(k_mass, K_q)`.
pub fn gate(records: &[VisibilityRecord], cfg: &GateConfig) -> GateResult {
    if records.is_empty() {
        return GateResult::empty();
    }
    let sorted = sorted_desc(records);
    let s_tot = canonical_total(&sorted);
    if !(s_tot > 0.0) {
        return GateResult {
            s_tot,
            ..GateResult::empty()
        };
    }
    let k_mass = mass_prefix(&sorted, cfg.tau_view, s_tot);
    let k_q = stage_b(records, cfg.q);
    let k_keep = k_mass.min(k_q);
    let mut kept: Vec<usize> = sorted[..k_keep]
        .iter()
        .filter(|&&(w, _)| w >= cfg.tau_abs)
        .map(|&(_, i)| i)
        .collect();
    kept.sort_unstable();
    GateResult {
        kept,
        k_mass,
        k_q,
        k_keep,
        s_tot,
    }
}

/// Pass-through used when gating is disabled: every record with positive
/// weight is kept.
pub fn keep_all(records: &[VisibilityRecord]) -> GateResult {
    let kept: Vec<usize> = records
        .iter()
        .filter(|r| r.weight > 0.0)
        .map(|r| r.gaussian_index)
        .collect();
    let n = kept.len();
    GateResult {
        kept,
        k_mass: n,
        k_q: n,
        k_keep: n,
        s_tot: view_score(records),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn recs(weights: &[f64]) -> Vec<VisibilityRecord> {
        weights
            .iter()
            .enumerate()
            .map(|(i, &w)| VisibilityRecord::new(i, w))
            .collect()
    }

    const WORKED: [f64; 5] = [0.5, 0.3, 0.1, 0.05, 0.05];

    #[test]
    fn view_score_examples() {
        assert_eq!(view_score(&[]), 0.0);
        assert_relative_eq!(view_score(&recs(&WORKED)), 1.0, epsilon = 1e-15);
        assert_eq!(view_score(&recs(&[0.7])), 0.7);
    }

    #[test]
    fn stage_a_examples() {
        let a = stage_a(&recs(&WORKED), 0.6, 0.01);
        assert_eq!(a.k_mass, 2);
        assert_eq!(a.mass_set, vec![0, 1]);
        assert_eq!(stage_a(&recs(&WORKED), 1.0, 0.0).k_mass, 5);
        let a = stage_a(&recs(&[0.9, 0.005]), 0.75, 0.01);
        assert_eq!((a.k_mass, a.mass_set), (1, vec![0]));
        let a = stage_a(&recs(&[0.005, 0.004, 0.003]), 0.75, 0.01);
        assert!(a.mass_set.is_empty());
        assert_eq!(stage_a(&[], 0.6, 0.0).k_mass, 0);
    }

    #[test]
    fn stage_b_examples() {
        assert_eq!(stage_b(&recs(&WORKED), 0.5), 3);
        assert_eq!(stage_b(&recs(&[0.2; 7]), 0.1), 7);
        assert_eq!(stage_b(&recs(&[0.2; 7]), 0.9), 7);
        assert_eq!(stage_b(&recs(&[0.4]), 0.3), 1);
    }

    #[test]
    fn gate_worked_example() {
        let cfg = GateConfig {
            tau_view: 0.6,
            tau_abs: 0.01,
            q: 0.5,
        };
        let r = gate(&recs(&WORKED), &cfg);
        assert_eq!((r.k_mass, r.k_q, r.k_keep), (2, 3, 2));
        assert_eq!(r.kept, vec![0, 1]);
    }

    #[test]
    fn quantile_cap_above_mass_keeps_mass_set() {
        let cfg = GateConfig {
            tau_view: 0.6,
            tau_abs: 0.01,
            q: 0.9,
        };
        let r = gate(&recs(&WORKED), &cfg);
        assert!(r.k_q >= r.k_mass);
        let mut mass = stage_a(&recs(&WORKED), 0.6, 0.01).mass_set;
        mass.sort_unstable();
        assert_eq!(r.kept, mass);
    }

    #[test]
    fn empty_gate() {
        let r = gate(&[], &GateConfig::default());
        assert!(r.kept.is_empty());
        assert_eq!(r.s_tot, 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(GateConfig::default().validate().is_ok());
        let loose = GateConfig {
            tau_view: 0.9,
            ..GateConfig::default()
        };
        assert!(loose.validate().is_ok());
        for bad in [
            GateConfig { tau_view: 0.0, ..GateConfig::default() },
            GateConfig { tau_view: 1.5, ..GateConfig::default() },
            GateConfig { tau_abs: -1.0, ..GateConfig::default() },
            GateConfig { q: 1.0, ..GateConfig::default() },
            GateConfig { q: 0.0, ..GateConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    proptest! {
        #[test]
        fn raising_tau_view_never_shrinks_k_mass(
            w in proptest::collection::vec(1e-4f64..1.0, 1..60),
            a in 0.05f64..1.0,
            b in 0.05f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = recs(&w);
            prop_assert!(stage_a(&r, lo, 0.0).k_mass <= stage_a(&r, hi, 0.0).k_mass);
        }

        #[test]
        fn raising_q_never_lowers_k_q(
            w in proptest::collection::vec(1e-4f64..1.0, 1..60),
            a in 0.01f64..0.99,
            b in 0.01f64..0.99,
        ) {
            // Raising q lowers the quantile level 1 - q, so the threshold can
            // only drop and the count at or above it can only grow.
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let r = recs(&w);
            prop_assert!(stage_b(&r, lo) <= stage_b(&r, hi));
        }

        #[test]
        fn kept_bounded_by_both_stages(
            w in proptest::collection::vec(0.0f64..1.0, 1..80),
            tau_view in 0.5f64..0.75,
            q in 0.01f64..0.99,
        ) {
            let cfg = GateConfig { tau_view, tau_abs: 1e-3, q };
            let r = gate(&recs(&w), &cfg);
            prop_assert!(r.kept.len() <= r.k_mass);
            prop_assert!(r.kept.len() <= r.k_q);
            prop_assert!(r.kept.windows(2).all(|p| p[0] < p[1]));
        }
    }
}
