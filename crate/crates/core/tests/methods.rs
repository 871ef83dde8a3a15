use guidelab::predictor::Degradation;
use guidelab::{
    calibrate, cfg_combine, perturbed_predictor, recover_noise, replay_ecfg, sample, weak_guidance_combine,
    AnalyticPredictor, Condition, GaussianMixtureModel, GuidanceSpec, Method, NoisePredictor, NoiseSchedule, SeededRng,
};

fn lab() -> (AnalyticPredictor, NoiseSchedule) {
    let gmm = GaussianMixtureModel::default_toy(2).unwrap();
    let sched = guidelab::config::ScheduleConfig::default().build().unwrap();
    (AnalyticPredictor::new(gmm), sched)
}

fn zigzag() -> Method {
    Method::Zigzag {
        omega_inv: 0.0,
        cycles: None,
    }
}

#[test]
fn zigzag_calibrates_above_its_base_scale() {
    let (pred, sched) = lab();
    for (k, seed) in [(0u32, 1u64), (3, 2), (6, 3)] {
        let c = Condition::from_ids(&[k]).unwrap();
        let (_, traj) = sample(
            &GuidanceSpec::new(5.5, zigzag()),
            &pred,
            &c,
            &sched,
            &mut SeededRng::new(seed),
        )
        .unwrap();
        let cal = calibrate(&traj, &pred, &c, &sched).unwrap();
        assert!(cal.omega_e_mean > 5.5, "class {k}: {}", cal.omega_e_mean);
    }
}

#[test]
fn uninformative_weak_predictor_adds_its_scale() {
    let (pred, sched) = lab();
    let method = Method::WeakPredictor {
        s: 3.0,
        degradation: Degradation::ComponentDropout { keep: 0.0, seed: 0 },
    };
    let c = Condition::from_ids(&[2]).unwrap();
    let (_, traj) = sample(
        &GuidanceSpec::new(5.5, method),
        &pred,
        &c,
        &sched,
        &mut SeededRng::new(9),
    )
    .unwrap();
    let cal = calibrate(&traj, &pred, &c, &sched).unwrap();
    assert!((cal.omega_e_mean - 8.5).abs() < 1e-9, "{}", cal.omega_e_mean);
}

#[test]
fn ecfg_at_the_cfg_scale_reproduces_cfg() {
    let (pred, sched) = lab();
    let c = Condition::from_ids(&[5]).unwrap();
    let (x, _) = sample(&GuidanceSpec::cfg(5.5), &pred, &c, &sched, &mut SeededRng::new(4)).unwrap();
    let (y, _) = replay_ecfg(5.5, &pred, &c, &sched, &mut SeededRng::new(4)).unwrap();
    assert_eq!(x, y);
}

#[test]
fn zigzag_and_its_ecfg_differ_from_cfg() {
    let (pred, sched) = lab();
    let c = Condition::from_ids(&[1]).unwrap();
    let (x_cfg, _) = sample(&GuidanceSpec::cfg(5.5), &pred, &c, &sched, &mut SeededRng::new(5)).unwrap();
    let (x_zz, traj) = sample(
        &GuidanceSpec::new(5.5, zigzag()),
        &pred,
        &c,
        &sched,
        &mut SeededRng::new(5),
    )
    .unwrap();
    let cal = calibrate(&traj, &pred, &c, &sched).unwrap();
    let (x_e, _) = replay_ecfg(cal.omega_e_mean, &pred, &c, &sched, &mut SeededRng::new(5)).unwrap();
    assert!(x_zz.max_abs_diff(&x_cfg).unwrap() > 1e-6);
    assert!(x_e.max_abs_diff(&x_cfg).unwrap() > 1e-6);
    assert!(x_e.max_abs_diff(&x_zz).unwrap() > 1e-9);
}

#[test]
fn cfg_pp_produces_a_finite_trajectory() {
    let (pred, sched) = lab();
    let c = Condition::from_ids(&[4]).unwrap();
    let (x, traj) = sample(
        &GuidanceSpec::new(5.5, Method::CfgPp { lambda: 0.4 }),
        &pred,
        &c,
        &sched,
        &mut SeededRng::new(6),
    )
    .unwrap();
    assert!(x.is_finite());
    assert_eq!(traj.steps.len(), sched.steps());
}

#[test]
fn committed_noise_is_what_the_sampler_applied() {
    let (pred, sched) = lab();
    let c = Condition::from_ids(&[7]).unwrap();
    let methods = [
        Method::Cfg,
        Method::WeakPredictor {
            s: 2.0,
            degradation: Degradation::ComponentDropout { keep: 0.5, seed: 3 },
        },
    ];
    for method in methods {
        let omega = 4.0;
        let (_, traj) = sample(
            &GuidanceSpec::new(omega, method.clone()),
            &pred,
            &c,
            &sched,
            &mut SeededRng::new(8),
        )
        .unwrap();
        for step in &traj.steps {
            let eps = recover_noise(&step.x_t, &step.x_prev, step.t, &sched).unwrap();
            let u = step.eps_u.as_ref().unwrap();
            let cc = step.eps_c.as_ref().unwrap();
            let want = match &method {
                Method::WeakPredictor { s, degradation } => {
                    let weak = perturbed_predictor(&pred, degradation.clone()).unwrap();
                    let w = weak.predict(&step.x_t, step.t, &c, &sched).unwrap();
                    weak_guidance_combine(u, cc, &w, omega, *s).unwrap()
                }
                _ => cfg_combine(u, cc, omega).unwrap(),
            };
            assert!(
                eps.max_abs_diff(&want).unwrap() < 1e-9 * (1.0 + want.norm()),
                "{} t={}",
                method.tag(),
                step.t
            );
        }
    }
}

#[test]
fn same_seed_same_trajectory() {
    let (pred, sched) = lab();
    let c = Condition::from_ids(&[0]).unwrap();
    let spec = GuidanceSpec::new(
        5.5,
        Method::Tdg {
            g: 1.0,
            beta: 2.6,
            mask_ratio: 0.5,
        },
    );
    let a = sample(&spec, &pred, &c, &sched, &mut SeededRng::new(11)).unwrap();
    let b = sample(&spec, &pred, &c, &sched, &mut SeededRng::new(11)).unwrap();
    assert_eq!(a, b);
}
