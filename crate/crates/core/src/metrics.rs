//! Verification metrics: DET operating points, equal error rate with
//! linear interpolation, and minimum normalized detection cost.
//!
//! Tie convention: a score equal to the threshold is accepted (>= t).

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct ScoreSet {
    pub target_scores: Vec<f64>,
    pub nontarget_scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.p_target && self.p_target < 1.0) {
            return Err(Error::argument(format!("dcf: p_target {} outside (0, 1)", self.p_target)));
        }
        if self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(Error::argument("dcf: costs must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

fn check_nonempty(scores: &ScoreSet) -> Result<()> {
    if scores.target_scores.is_empty() || scores.nontarget_scores.is_empty() {
        return Err(Error::argument("metrics: target and nontarget sets must be non-empty"));
    }
    for &s in scores.target_scores.iter().chain(&scores.nontarget_scores) {
        if !s.is_finite() {
            return Err(Error::numeric(format!("metrics: non-finite score {s}")));
        }
    }
    Ok(())
}

fn rates_at(scores: &ScoreSet, t: f64) -> (f64, f64) {
    let miss = scores.target_scores.iter().filter(|&&s| s < t).count();
    let fa = scores.nontarget_scores.iter().filter(|&&s| s >= t).count();
    (
        miss as f64 / scores.target_scores.len() as f64,
        fa as f64 / scores.nontarget_scores.len() as f64,
    )
}

/// Thresholds at midpoints between consecutive distinct pooled scores, with
/// -inf and +inf sentinels. P_miss is non-decreasing and P_fa non-increasing
/// in the threshold.
pub fn det_points(scores: &ScoreSet) -> Result<Vec<DetPoint>> {
    check_nonempty(scores)?;
    let mut pooled: Vec<f64> = scores
        .target_scores
        .iter()
        .chain(&scores.nontarget_scores)
        .copied()
        .collect();
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pooled.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    for w in pooled.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(f64::INFINITY);
    Ok(thresholds
        .into_iter()
        .map(|t| {
            let (p_miss, p_fa) = rates_at(scores, t);
            DetPoint { threshold: t, p_miss, p_fa }
        })
        .collect())
}

/// EER by linear interpolation between the two DET points bracketing the
/// sign change of (P_miss - P_fa); exact crossings are returned as-is.
pub fn eer(scores: &ScoreSet) -> Result<(f64, f64)> {
    let points = det_points(scores)?;
    for (i, p) in points.iter().enumerate() {
        let d = p.p_miss - p.p_fa;
        if d == 0.0 {
            return Ok((p.p_miss, p.threshold));
        }
        if d > 0.0 {
            // first positive point; bracket with its predecessor
            let lo = points[i - 1];
            let d0 = lo.p_miss - lo.p_fa;
            let alpha = -d0 / (d - d0);
            let value = lo.p_miss + alpha * (p.p_miss - lo.p_miss);
            let threshold = if lo.threshold.is_finite() && p.threshold.is_finite() {
                lo.threshold + alpha * (p.threshold - lo.threshold)
            } else if lo.threshold.is_finite() {
                lo.threshold
            } else {
                p.threshold
            };
            return Ok((value, threshold));
        }
    }
    unreachable!("P_miss - P_fa reaches +1 at the +inf sentinel")
}

/// Minimum over DET thresholds of the normalized detection cost.
pub fn min_dcf(scores: &ScoreSet, params: &DcfParams) -> Result<(f64, f64)> {
    params.validate()?;
    let points = det_points(scores)?;
    let norm = (params.c_miss * params.p_target).min(params.c_fa * (1.0 - params.p_target));
    let mut best = (f64::INFINITY, f64::NAN);
    for p in points {
        let cost = (params.c_miss * params.p_target * p.p_miss
            + params.c_fa * (1.0 - params.p_target) * p.p_fa)
            / norm;
        if cost < best.0 {
            best = (cost, p.threshold);
        }
    }
    Ok(best)
}

/// Two-line metric report; values to 4 decimal places, EER as a percentage.
pub fn report(scores: &ScoreSet, params: &DcfParams) -> Result<String> {
    let (e, et) = eer(scores)?;
    let (d, dt) = min_dcf(scores, params)?;
    Ok(format!(
        "EER {:.4}% threshold {:.4}\nminDCF(p={}) {:.4} threshold {:.4}\n",
        100.0 * e,
        et,
        params.p_target,
        d,
        dt
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::rng::RngStream;

    fn set(t: &[f64], n: &[f64]) -> ScoreSet {
        ScoreSet { target_scores: t.to_vec(), nontarget_scores: n.to_vec() }
    }

    fn random_set(rng: &mut RngStream, nt: usize, nn: usize, sep: f64) -> ScoreSet {
        ScoreSet {
            target_scores: (0..nt).map(|_| rng.normal() + sep).collect(),
            nontarget_scores: (0..nn).map(|_| rng.normal()).collect(),
        }
    }

    // brute-force re-derivation used as the oracle: evaluate every pooled
    // score and the sentinels directly by counting
    fn brute_thresholds(s: &ScoreSet) -> Vec<f64> {
        let mut pooled: Vec<f64> =
            s.target_scores.iter().chain(&s.nontarget_scores).copied().collect();
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pooled.dedup();
        let mut out = vec![f64::NEG_INFINITY, f64::INFINITY];
        for w in pooled.windows(2) {
            out.push(0.5 * (w[0] + w[1]));
        }
        out
    }

    fn brute_min_dcf(s: &ScoreSet, p: &DcfParams) -> f64 {
        let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
        brute_thresholds(s)
            .into_iter()
            .map(|t| {
                let (pm, pf) = rates_at(s, t);
                (p.c_miss * p.p_target * pm + p.c_fa * (1.0 - p.p_target) * pf) / norm
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn det_includes_perfect_point() {
        let points = det_points(&set(&[1.0], &[0.0])).unwrap();
        assert!(points.iter().any(|p| p.p_miss == 0.0 && p.p_fa == 0.0));
    }

    #[test]
    fn det_monotone_on_random_scores() {
        let mut rng = RngStream::new(5);
        let s = random_set(&mut rng, 100, 100, 1.0);
        let points = det_points(&s).unwrap();
        for w in points.windows(2) {
            assert!(w[1].p_miss >= w[0].p_miss);
            assert!(w[1].p_fa <= w[0].p_fa);
        }
        assert_eq!(points.first().unwrap().threshold, f64::NEG_INFINITY);
        assert_eq!(points.last().unwrap().threshold, f64::INFINITY);
    }

    #[test]
    fn eer_perfect_separation() {
        let (e, _) = eer(&set(&[0.9, 0.8], &[0.1, 0.2])).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn eer_hand_case() {
        let (e, t) = eer(&set(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1])).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-12, "eer {e}");
        assert!((t - 0.45).abs() < 1e-12, "threshold {t}");
    }

    #[test]
    fn eer_identical_distributions() {
        let (e, _) = eer(&set(&[0.1, 0.5, 0.9], &[0.1, 0.5, 0.9])).unwrap();
        assert!((e - 0.5).abs() < 1e-12);
        let (e4, _) = eer(&set(&[0.1, 0.3, 0.5, 0.9], &[0.1, 0.3, 0.5, 0.9])).unwrap();
        assert!((e4 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn min_dcf_perfect_and_reversed() {
        let p = DcfParams::default();
        let (d, _) = min_dcf(&set(&[0.9, 0.8], &[0.1, 0.2]), &p).unwrap();
        assert_eq!(d, 0.0);
        // best policy rejects everything: cost p_target / p_target = 1
        let (d, t) = min_dcf(&set(&[0.2], &[0.8]), &p).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert_eq!(t, f64::INFINITY);
    }

    #[test]
    fn min_dcf_matches_brute_force() {
        let mut rng = RngStream::new(17);
        let p = DcfParams::default();
        let s = random_set(&mut rng, 200, 200, 0.5);
        let (d, _) = min_dcf(&s, &p).unwrap();
        assert!((d - brute_min_dcf(&s, &p)).abs() < 1e-12);
    }

    #[test]
    fn agreement_with_sweep_on_many_random_sets() {
        let mut rng = RngStream::new(23);
        let p = DcfParams::default();
        for i in 0..1000 {
            let nt = 2 + rng.below(30) as usize;
            let nn = 2 + rng.below(30) as usize;
            let sep = if i % 2 == 0 { 1.0 } else { 0.0 };
            let s = random_set(&mut rng, nt, nn, sep);
            let (d, _) = min_dcf(&s, &p).unwrap();
            assert!((d - brute_min_dcf(&s, &p)).abs() < 1e-12);
            let (e, _) = eer(&s).unwrap();
            assert!((0.0..=1.0).contains(&e));
            // brute sweep: the interpolated EER lies between the tightest
            // bracketing operating points
            let mut lo = 0.0f64;
            let mut hi = 1.0f64;
            for t in brute_thresholds(&s) {
                let (pm, pf) = rates_at(&s, t);
                if pm <= pf {
                    lo = lo.max(pm);
                    hi = hi.min(pf);
                } else {
                    lo = lo.max(pf);
                    hi = hi.min(pm);
                }
            }
            assert!(e >= lo - 1e-12 && e <= hi + 1e-12, "eer {e} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn invariance_under_increasing_transforms() {
        let mut rng = RngStream::new(31);
        let s = random_set(&mut rng, 50, 50, 1.0);
        let map = |s: &ScoreSet, f: &dyn Fn(f64) -> f64| ScoreSet {
            target_scores: s.target_scores.iter().map(|&x| f(x)).collect(),
            nontarget_scores: s.nontarget_scores.iter().map(|&x| f(x)).collect(),
        };
        let p = DcfParams::default();
        let (e0, _) = eer(&s).unwrap();
        let (d0, _) = min_dcf(&s, &p).unwrap();
        for f in [&(|x: f64| 2.0 * x + 1.0) as &dyn Fn(f64) -> f64, &|x: f64| x.tanh()] {
            let m = map(&s, f);
            let (e, _) = eer(&m).unwrap();
            let (d, _) = min_dcf(&m, &p).unwrap();
            assert!((e - e0).abs() < 1e-9, "eer changed: {e0} vs {e}");
            assert!((d - d0).abs() < 1e-9, "dcf changed: {d0} vs {d}");
        }
    }

    #[test]
    fn eer_bounded_for_oriented_scores() {
        // with targets stochastically above nontargets the interpolated
        // crossing stays at or below one half
        let mut rng = RngStream::new(41);
        for _ in 0..200 {
            let s = random_set(&mut rng, 20, 20, 0.5);
            let (e, _) = eer(&s).unwrap();
            assert!((0.0..=0.55).contains(&e), "eer {e}");
        }
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(eer(&set(&[], &[1.0])).is_err());
        assert!(min_dcf(&set(&[1.0], &[]), &DcfParams::default()).is_err());
        assert!(det_points(&set(&[], &[])).is_err());
    }

    #[test]
    fn report_format() {
        let s = set(&[0.8, 0.6, 0.4], &[0.5, 0.3, 0.1]);
        let r = report(&s, &DcfParams::default()).unwrap();
        let lines: Vec<&str> = r.lines().collect();
        assert_eq!(lines[0], "EER 33.3333% threshold 0.4500");
        assert!(lines[1].starts_with("minDCF(p=0.01) "));
    }
}
