mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use guidelab::config::{MetricSpec, RunConfig};
use guidelab::harness::{build_metric, metric_alignment, metric_cond_loglik, run_experiment, ExternalScorer, Metric};
use guidelab::predictor::{Component, Degradation};
use guidelab::{
    calibrate, sample, AnalyticPredictor, Condition, GaussianMixtureModel, GuidanceSpec, Method, SeededRng, Vector,
};

fn two_classes(gap: f64) -> Arc<GaussianMixtureModel> {
    let comp = |x: f64| Component {
        weight: 0.5,
        mean: Vector::from([x, 0.0]),
        variance: Vector::from([1.0, 1.0]),
    };
    Arc::new(
        GaussianMixtureModel::new(
            vec![comp(-gap), comp(gap)],
            BTreeMap::from([(0, vec![0]), (1, vec![1])]),
        )
        .unwrap(),
    )
}

#[test]
fn loglik_peaks_at_the_class_mean() {
    let gmm = two_classes(10.0);
    let m = metric_cond_loglik(gmm.clone());
    let c = Condition::from_ids(&[1]).unwrap();
    let top = m.score(&[10.0, 0.0], &c).unwrap();
    for i in -10..=10 {
        for j in -10..=10 {
            let x = [10.0 + 0.3 * i as f64, 0.3 * j as f64];
            assert!(m.score(&x, &c).unwrap() <= top);
        }
    }
    let want = common::log_pt(&gmm, &[10.0, 0.0], 1.0, &c);
    assert!((top - want).abs() < 1e-12);
    assert!((top + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
}

#[test]
fn loglik_is_finite_far_out() {
    let gmm = two_classes(1.0);
    let m = metric_cond_loglik(gmm);
    let c = Condition::from_ids(&[0]).unwrap();
    let v = m.score(&[1e4, -1e4], &c).unwrap();
    assert!(v.is_finite() && v < -1e7);
}

#[test]
fn alignment_at_class_mean_and_on_the_boundary() {
    let gmm = two_classes(10.0);
    let m = metric_alignment(gmm);
    let c = Condition::from_ids(&[0]).unwrap();
    assert!(m.score(&[-10.0, 0.0], &c).unwrap().abs() < 1e-12);
    assert!((m.score(&[0.0, 3.0], &c).unwrap() - 0.5f64.ln()).abs() < 1e-12);
    assert!(m.score(&[40.0, 0.0], &c).unwrap().is_finite());
}

#[test]
fn stronger_cfg_aligns_better_but_overshoots_the_likelihood() {
    let gmm = Arc::new(GaussianMixtureModel::default_toy(2).unwrap());
    let pred = AnalyticPredictor::from_shared(gmm.clone());
    let sched = guidelab::config::ScheduleConfig::default().build().unwrap();
    let align = metric_alignment(gmm.clone());
    let loglik = metric_cond_loglik(gmm.clone());
    let omegas = [1.0, 2.0, 4.0, 8.0, 12.0, 16.0, 20.0];
    let mut a_curve = Vec::new();
    let mut l_curve = Vec::new();
    for &w in &omegas {
        let (mut a, mut l) = (0.0, 0.0);
        for p in 0..64u64 {
            let c = Condition::from_ids(&[(p % 8) as u32]).unwrap();
            let (x, _) = sample(&GuidanceSpec::cfg(w), &pred, &c, &sched, &mut SeededRng::new(p)).unwrap();
            a += align.score(&x, &c).unwrap();
            l += loglik.score(&x, &c).unwrap();
        }
        a_curve.push(a / 64.0);
        l_curve.push(l / 64.0);
    }
    for w in a_curve.windows(2) {
        assert!(w[1] >= w[0] - 1e-9, "{a_curve:?}");
    }
    let peak = l_curve.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    for i in 0..peak {
        assert!(l_curve[i] <= l_curve[i + 1] + 1e-9, "{l_curve:?}");
    }
    for i in peak..l_curve.len() - 1 {
        assert!(l_curve[i] >= l_curve[i + 1] - 1e-9, "{l_curve:?}");
    }
    assert!(l_curve[l_curve.len() - 1] < l_curve[peak]);
}

fn small(methods: Vec<Method>) -> RunConfig {
    let mut cfg = RunConfig::with_methods(methods);
    cfg.prompts = 12;
    cfg
}

#[test]
fn cfg_against_itself_ties_everywhere() {
    let exp = run_experiment(&small(vec![Method::Cfg])).unwrap();
    for row in &exp.report.rows {
        assert_eq!(row.ties_cfg, row.n);
        assert_eq!(row.ties_ecfg, row.n);
        assert_eq!(row.delta_eta, 0.0);
        assert!((row.omega_e - 5.5).abs() < 1e-6);
    }
}

#[test]
fn weak_predictor_without_extra_scale_is_cfg() {
    let weak = Method::WeakPredictor {
        s: 0.0,
        degradation: Degradation::ComponentDropout { keep: 0.3, seed: 2 },
    };
    let a = run_experiment(&small(vec![weak])).unwrap();
    let b = run_experiment(&small(vec![Method::Cfg])).unwrap();
    for (x, y) in a.report.rows.iter().zip(&b.report.rows) {
        assert_eq!(
            (x.eta_cfg, x.eta_ecfg, x.delta_eta),
            (y.eta_cfg, y.eta_ecfg, y.delta_eta)
        );
    }
}

#[test]
fn external_scorer_round_trip() {
    let s = ExternalScorer::new(
        "const",
        vec!["sh".into(), "-c".into(), r#"read line; echo '{"score": 1.5}'"#.into()],
        true,
    )
    .unwrap();
    let c = Condition::new(vec![Some(1), None]).unwrap();
    assert_eq!(s.score(&[0.1, 0.2], &c).unwrap(), 1.5);
    assert!(s.higher_is_better());
}

#[test]
fn external_scorer_reports_bad_output() {
    let spec: MetricSpec =
        serde_json::from_str(r#"{"name": "broken", "command": ["sh", "-c", "read line; echo nope"]}"#).unwrap();
    let gmm = Arc::new(GaussianMixtureModel::default_toy(2).unwrap());
    let m = build_metric(&spec, &gmm).unwrap();
    assert!(m.score(&[0.0, 0.0], &Condition::from_ids(&[0]).unwrap()).is_err());
}

#[test]
fn calibration_of_cfg_run_is_flat() {
    let gmm = GaussianMixtureModel::default_toy(8).unwrap();
    let pred = AnalyticPredictor::new(gmm);
    let sched = guidelab::config::ScheduleConfig::default().build().unwrap();
    let c = Condition::from_ids(&[3]).unwrap();
    let (_, traj) = sample(&GuidanceSpec::cfg(3.0), &pred, &c, &sched, &mut SeededRng::new(1)).unwrap();
    let cal = calibrate(&traj, &pred, &c, &sched).unwrap();
    assert!((cal.omega_e_mean - 3.0).abs() < 1e-6);
    assert!(cal.skipped_steps.is_empty());
}
