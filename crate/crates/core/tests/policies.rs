use kibam_core::battery_model::{single_equivalent_lifetime, BatteryParams};
use kibam_core::load_profiles::Benchmark;
use kibam_core::policies::{rollout, vmax_rollout, BuiltinPolicy, RolloutConfig};

fn banks() -> [Vec<BatteryParams>; 3] {
    [vec![BatteryParams::b1(); 2], vec![BatteryParams::b2(); 2], vec![BatteryParams::b1(); 4]]
}

#[test]
fn no_policy_beats_the_bound() {
    for params in banks() {
        for b in Benchmark::ALL {
            let p = b.profile();
            let bound = single_equivalent_lifetime(&params, &p).unwrap();
            for kind in BuiltinPolicy::ALL {
                let delta = 0.05;
                let r = rollout(&mut kind.clone(), &p, &params, &RolloutConfig::with_period(delta)).unwrap();
                assert!(r.lifetime <= bound + delta, "{} {} {}: {} > {bound}", params.len(), b.name(), kind.name(), r.lifetime);
            }
        }
    }
}

#[test]
fn vmax_improves_as_period_shrinks() {
    let params = [BatteryParams::b1(); 2];
    let mut drops = Vec::new();
    for b in Benchmark::ALL {
        let p = b.profile();
        let periods = [0.1, 0.05, 0.01, 0.005];
        let lifetimes: Vec<f64> = periods.iter().map(|&d| vmax_rollout(&p, &params, d).unwrap().lifetime).collect();
        for (k, w) in lifetimes.windows(2).enumerate() {
            if w[1] < w[0] - 1e-9 {
                drops.push(format!("{} {} -> {}: {:.6} -> {:.6}", b.name(), periods[k], periods[k + 1], w[0], w[1]));
            }
        }
    }
    assert!(drops.is_empty(), "lifetime fell as the period shrank: {drops:?}");
}

#[test]
fn sequential_switches_at_most_n_minus_one() {
    for params in banks() {
        for b in Benchmark::ALL {
            let r = rollout(&mut BuiltinPolicy::Sequential, &b.profile(), &params, &RolloutConfig::default()).unwrap();
            assert!(r.switches < params.len(), "{}: {}", b.name(), r.switches);
        }
    }
}

#[test]
fn rollouts_are_deterministic() {
    let params = [BatteryParams::b2(); 2];
    let p = Benchmark::Ill500.profile();
    let cfg = RolloutConfig { record_trace: true, ..RolloutConfig::default() };
    for kind in BuiltinPolicy::ALL {
        let a = rollout(&mut kind.clone(), &p, &params, &cfg).unwrap();
        let b = rollout(&mut kind.clone(), &p, &params, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
