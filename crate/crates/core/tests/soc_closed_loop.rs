use kibam_core::load_profiles::LoadProfile;
use kibam_core::soc_estimator::*;

const SAMPLE_SECONDS: f64 = 0.5;

fn trace(noise: f64, seed: u64) -> Vec<TruthSample> {
    let prof = LoadProfile::constant(0.208).unwrap();
    simulate_with_truth(&CapacityParams::lead_acid(), &VoltageParams::lead_acid(), 0.34, &prof, noise, SAMPLE_SECONDS, seed).unwrap()
}

/// Runs the estimator over the trace and returns (truth, estimate) every `stride` samples.
fn run(tr: &[TruthSample], stride: usize) -> Vec<(TruthSample, SocEstimate)> {
    let mut est = SocEstimator::new(CapacityParams::lead_acid(), VoltageParams::lead_acid(), SocConfig::default()).unwrap();
    let mut out = Vec::new();
    for (k, s) in tr.iter().enumerate() {
        est.push(s.sample).unwrap();
        if k % stride == 0 {
            if let Ok(e) = est.estimate() {
                out.push((*s, e));
            }
        }
    }
    out
}

#[test]
fn noiseless_tracks_available_within_two_percent() {
    let tr = trace(0.0, 1);
    assert!(tr.len() > 10_000);
    let pairs = run(&tr, 72);
    let mut checked = 0;
    for (truth, e) in pairs.iter().filter(|(t, _)| t.x < 0.9) {
        assert!(!e.fallback, "fallback at t={}", truth.sample.t);
        let rel = (e.available - truth.available).abs() / truth.available;
        assert!(rel <= 0.02, "t={} est={} truth={}", truth.sample.t, e.available, truth.available);
        checked += 1;
    }
    assert!(checked > 100);
}

#[test]
fn noiseless_recovers_consumed_fraction() {
    let tr = trace(0.0, 1);
    for (truth, e) in run(&tr, 500).iter().filter(|(t, _)| t.x > 0.05 && t.x < 0.9) {
        assert!((e.x - truth.x).abs() < 1e-6, "t={} est={} truth={}", truth.sample.t, e.x, truth.x);
    }
}

#[test]
fn noisy_trace_mean_error_within_five_percent() {
    for seed in [7, 8, 9] {
        let tr = trace(0.02, seed);
        let pairs: Vec<_> = run(&tr, 72).into_iter().filter(|(t, _)| t.x < 0.9).collect();
        let fallbacks = pairs.iter().filter(|(_, e)| e.fallback).count();
        let errs: Vec<f64> = pairs
            .iter()
            .filter(|(_, e)| !e.fallback)
            .map(|(t, e)| (e.available - t.available).abs() / t.available)
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean <= 0.05, "seed {seed}: mean relative error {mean}");
        assert!(fallbacks as f64 <= 0.05 * pairs.len() as f64, "seed {seed}: {fallbacks} fallbacks");
    }
}

#[test]
fn estimates_never_exceed_available_well() {
    let cp = CapacityParams::lead_acid();
    for (_, e) in run(&trace(0.02, 3), 50) {
        if !e.fallback {
            assert!(e.available <= cp.fraction_c() * cp.capacity() + 1e-12);
        }
    }
}

#[test]
fn voltage_spike_falls_back_then_recovers() {
    let mut tr = trace(0.0, 1);
    let spike = 20_000;
    tr[spike].sample.e_obs += 60.0;
    let mut est = SocEstimator::new(CapacityParams::lead_acid(), VoltageParams::lead_acid(), SocConfig::default()).unwrap();
    for (k, s) in tr.iter().enumerate().take(spike + 200) {
        est.push(s.sample).unwrap();
        if k < spike - 5 {
            continue;
        }
        let e = est.estimate().unwrap();
        let in_window = k >= spike && k < spike + 65;
        assert_eq!(e.fallback, in_window, "sample {k}");
    }
}

#[test]
fn first_window_emf_mode_runs() {
    let cfg = SocConfig { emf_from_first_window: true, ..SocConfig::default() };
    let tr = trace(0.0, 1);
    let samples: Vec<SensorSample> = tr.iter().take(5000).map(|t| t.sample).collect();
    let e = estimate_state(&samples, &CapacityParams::lead_acid(), &VoltageParams::lead_acid(), &cfg).unwrap();
    assert!(e.gamma < CapacityParams::lead_acid().capacity());
}

/// Fits records whose lifetimes carry ±1 % uniform noise, for several seeds.
fn noisy_fits() -> Vec<CapacityParams> {
    use kibam_core::load_profiles::seeded_rng;
    use rand::Rng;
    let truth = truth();
    (0..5)
        .map(|seed| {
            let mut rng = seeded_rng(seed, 9);
            let records: Vec<(f64, f64)> = [0.17, 0.21, 0.25, 0.30]
                .iter()
                .map(|&i| (i, constant_current_lifetime(&truth, i).unwrap() * (1.0 + 0.01 * (2.0 * rng.random::<f64>() - 1.0))))
                .collect();
            fit_capacity(&records).unwrap().params
        })
        .collect()
}

fn truth() -> CapacityParams {
    CapacityParams::from_k_prime(1.372, 0.829, 0.387).unwrap()
}

#[test]
fn noisy_fit_reproduces_capacity_curve() {
    let truth = truth();
    for fit in noisy_fits() {
        for t in [2.0, 4.0, 6.0, 8.0] {
            let (q, q0) = (qmax(&fit, t).unwrap(), qmax(&truth, t).unwrap());
            assert!((q / q0 - 1.0).abs() <= 0.05, "{fit:?} at T={t}: {q} vs {q0}");
        }
    }
}

#[test]
fn noisy_fit_recovers_each_parameter_within_five_percent() {
    for fit in noisy_fits() {
        for (name, a, b) in [("C", fit.capacity(), 1.372), ("k'", fit.k_prime(), 0.829), ("c", fit.fraction_c(), 0.387)] {
            assert!((a / b - 1.0).abs() <= 0.05, "{name}: fitted {a}, generator {b}");
        }
    }
}
