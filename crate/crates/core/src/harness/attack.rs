//! Eavesdropper attacks. Everything here sees only encrypted series: no
//! function takes a key or an encryption matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

use super::config::AttackStrategy;
use crate::crypto::EncryptedCsiSeries;
use crate::error::{invalid, Result};
use crate::metrics::{score_task, TaskScore};
use crate::sensing::{extract_features, ClassifierR, FeatureConfig, FeatureMap};

/// What the eavesdropper captured for one gesture: one encrypted series per
/// (physical or virtual) antenna, plus the ground-truth label for scoring.
#[derive(Clone, Debug)]
pub struct EveObservation {
    pub views: Vec<EncryptedCsiSeries>,
    pub label: usize,
}

/// Blind combination of several views: project the stacked series onto
/// their dominant principal direction.
pub fn combine_views(views: &[EncryptedCsiSeries]) -> Result<Vec<Complex64>> {
    let first = views.first().ok_or_else(|| crate::error::Error::InvalidArgument("no views".into()))?;
    let m = first.values.len();
    if views.iter().any(|v| v.values.len() != m) {
        return invalid("views differ in length");
    }
    if views.len() == 1 {
        return Ok(first.values.clone());
    }
    let k = views.len();
    let y = DMatrix::from_fn(k, m, |r, c| views[r].values[c]);
    let cov = &y * y.adjoint();
    let eig = SymmetricEigen::new(cov);
    let top = (0..k).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).unwrap_or(0);
    let u = eig.eigenvectors.column(top).into_owned();
    Ok((0..m).map(|c| (0..k).map(|r| u[r].conj() * y[(r, c)]).sum()).collect())
}

/// Features the eavesdropper computes: the packet times are unknown, so
/// the series is treated as regularly sampled.
pub fn eve_features(series: &[Complex64], view: &EncryptedCsiSeries, fc: &FeatureConfig) -> Result<FeatureMap> {
    extract_features(series, &view.schedule.assumed_regular(), fc)
}

/// Score an attack strategy over a set of observations.
pub fn run_attack(
    strategy: AttackStrategy,
    observations: &[EveObservation],
    classifier: &ClassifierR,
    fc: &FeatureConfig,
) -> Result<TaskScore> {
    strategy.validate()?;
    let mut preds = Vec::with_capacity(observations.len());
    let mut labels = Vec::with_capacity(observations.len());
    for obs in observations {
        if obs.views.len() < strategy.views() {
            return invalid(format!("{} needs {} views, got {}", strategy.name(), strategy.views(), obs.views.len()));
        }
        let views = &obs.views[..strategy.views()];
        let series = combine_views(views)?;
        preds.push(classifier.predict(&eve_features(&series, &views[0], fc)?)?);
        labels.push(obs.label);
    }
    score_task(&preds, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::TemporalSchedule;

    fn view(values: Vec<Complex64>) -> EncryptedCsiSeries {
        let schedule = TemporalSchedule::regular(values.len(), 1e-3).unwrap();
        EncryptedCsiSeries { values, schedule }
    }

    #[test]
    fn single_view_passes_through() {
        let v: Vec<Complex64> = (0..5).map(|i| Complex64::new(i as f64, 1.0)).collect();
        assert_eq!(combine_views(&[view(v.clone())]).unwrap(), v);
    }

    #[test]
    fn combining_recovers_a_shared_component() {
        // Two views that are scaled copies of one series: the combination is
        // proportional to it.
        let s: Vec<Complex64> = (0..64).map(|i| Complex64::from_polar(1.0, 0.3 * i as f64)).collect();
        let a = Complex64::new(0.6, 0.8);
        let b = Complex64::new(-1.2, 0.5);
        let views = [view(s.iter().map(|x| x * a).collect()), view(s.iter().map(|x| x * b).collect())];
        let c = combine_views(&views).unwrap();
        let ratio = c[0] / s[0];
        for (ci, si) in c.iter().zip(&s) {
            assert!((ci / si - ratio).norm() < 1e-9);
        }
        assert!((ratio.norm() - (a.norm_sqr() + b.norm_sqr()).sqrt()).abs() < 1e-9);
    }
}
