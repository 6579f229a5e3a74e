use adfl_core::airsim;
use adfl_core::channel::{self, ChannelParams};
use adfl_core::data::{self, IdxTensor};
use adfl_core::quant;
use adfl_core::sched::{self, BitRule, DeviceSnapshot, RelaxedProblem};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params() -> ChannelParams {
    ChannelParams::default_cell()
}

fn device(id: usize, snr: f64, norm: f64, p: &ChannelParams) -> DeviceSnapshot {
    let gain = Complex64::new((snr * p.noise_density / p.sample_energy).sqrt(), 0.0);
    DeviceSnapshot::new(id, gain, norm, p)
}

fn device_strategy() -> impl Strategy<Value = (f64, f64)> {
    // (snr in dB, log10 of the gradient peak)
    (-5.0f64..50.0, -3.0f64..1.0)
}

fn build(devs: &[(f64, f64)]) -> Vec<DeviceSnapshot> {
    let p = params();
    devs.iter()
        .enumerate()
        .map(|(i, &(db, lg))| device(i, 10f64.powf(db / 10.0), 10f64.powf(lg), &p))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_loss_strictly_decreasing(a in 1.0f64..500.0, gap in 1e-3f64..100.0) {
        let p = params();
        prop_assert!(channel::path_loss(a + gap, &p).unwrap() < channel::path_loss(a, &p).unwrap());
    }

    #[test]
    fn digital_airtime_monotone(payload in 1u64..1_000_000, snr in 1e-3f64..1e6, k in 1.01f64..10.0) {
        let b = 1e6;
        let t = channel::digital_tx_time(payload, snr, b).unwrap();
        prop_assert!(channel::digital_tx_time(payload, snr * k, b).unwrap() < t);
        prop_assert!(channel::digital_tx_time(payload + 1, snr, b).unwrap() > t);
    }

    #[test]
    fn ota_airtime_is_digital_free_latency(dim in 1usize..100_000) {
        let lat = sched::round_latency(std::iter::empty(), true, dim, 1e6).unwrap();
        prop_assert_eq!(lat, channel::ota_tx_time(dim, 1e6));
    }

    /// The global optimum over all assignments is an SM prefix, for both bit rules.
    #[test]
    fn global_optimum_is_a_prefix(
        devs in prop::collection::vec(device_strategy(), 2..=6),
        dim in 8usize..48,
        budget in 1.0f64..20.0,
    ) {
        let p = params();
        let devs = build(&devs);
        let t_max = budget * dim as f64 / p.bandwidth_hz;
        let fast = sched::optimize_schedule(&devs, t_max, dim, &p).unwrap();
        let brute = sched::brute_force_schedule(&devs, t_max, dim, &p, BitRule::FloorRelaxed).unwrap();
        prop_assert!((fast.mse_bound - brute.mse_bound).abs() <= 1e-9 * brute.mse_bound);
        let exact = sched::brute_force_schedule(&devs, t_max, dim, &p, BitRule::Exhaustive { max_bits: 20 }).unwrap();
        prop_assert!(sched::is_sm_prefix(&devs, &exact.digital));
    }

    #[test]
    fn enlarging_budget_never_hurts(
        devs in prop::collection::vec(device_strategy(), 1..=8),
        dim in 8usize..64,
        budget in 1.0f64..20.0,
        extra in 0.0f64..5.0,
    ) {
        let p = params();
        let devs = build(&devs);
        let tau = dim as f64 / p.bandwidth_hz;
        let a = sched::optimize_schedule(&devs, budget * tau, dim, &p).unwrap();
        let b = sched::optimize_schedule(&devs, (budget + extra) * tau, dim, &p).unwrap();
        prop_assert!(b.mse_bound <= a.mse_bound * (1.0 + 1e-12));
    }

    #[test]
    fn decisions_meet_the_budget(
        devs in prop::collection::vec(device_strategy(), 1..=8),
        dim in 8usize..64,
        budget in 1.0f64..20.0,
    ) {
        let p = params();
        let devs = build(&devs);
        let t_max = budget * dim as f64 / p.bandwidth_hz;
        let d = sched::optimize_schedule(&devs, t_max, dim, &p).unwrap();
        prop_assert!(d.latency_s <= t_max * (1.0 + 1e-12));
        prop_assert!(sched::is_sm_prefix(&devs, &d.digital));
    }

    #[test]
    fn complementary_slackness_and_flooring(
        devs in prop::collection::vec(device_strategy(), 1..=4),
        dim in 8usize..64,
        ota in any::<bool>(),
        slack_factor in 1e-3f64..3.0,
    ) {
        let p = params();
        let devs = build(&devs);
        let b = p.bandwidth_hz;
        let base = if ota { dim as f64 / b } else { 0.0 }
            + devs.iter().map(|d| (64 + dim) as f64 / d.rate(b)).sum::<f64>();
        let t_max = base * (1.0 + slack_factor);
        let problem = RelaxedProblem::new(&devs, ota, t_max, dim, b).unwrap();
        let alloc = problem.solve();
        prop_assert!(alloc.feasible);
        prop_assert!(alloc.lambda_star > 0.0);
        let relaxed = problem.relaxed_latency(&alloc.r_prime);
        prop_assert!((relaxed - t_max).abs() <= 1e-9 * t_max);
        let integer = sched::round_latency(
            devs.iter().zip(&alloc.r_prime).map(|(d, &r)| (quant::payload_bits(sched::integer_bits(r), dim), d.snr)),
            ota,
            dim,
            b,
        )
        .unwrap();
        prop_assert!(integer <= relaxed);
    }

    #[test]
    fn dual_is_concave(
        devs in prop::collection::vec(device_strategy(), 1..=4),
        dim in 8usize..64,
        slack_factor in 1e-3f64..3.0,
    ) {
        let p = params();
        let devs = build(&devs);
        let b = p.bandwidth_hz;
        let base = dim as f64 / b + devs.iter().map(|d| (64 + dim) as f64 / d.rate(b)).sum::<f64>();
        let problem = RelaxedProblem::new(&devs, true, base * (1.0 + slack_factor), dim, b).unwrap();
        let lmax = (0..devs.len()).map(|m| problem.lambda(m)).fold(0.0, f64::max);
        let ls: Vec<f64> = (0..120).map(|i| lmax * 1e-4 * 1e5f64.powf(i as f64 / 119.0)).collect();
        let q: Vec<f64> = ls.iter().map(|&l| problem.dual(l)).collect();
        let scale = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..ls.len() - 2 {
            let s0 = (q[i + 1] - q[i]) / (ls[i + 1] - ls[i]);
            let s1 = (q[i + 2] - q[i + 1]) / (ls[i + 2] - ls[i + 1]);
            prop_assert!(s1 <= s0 + 1e-9 * scale / (ls[i + 1] - ls[i]));
        }
    }

    /// Moving a digital device whose SM exceeds the OTA minimum to OTA keeps
    /// gamma and drops its quantization term.
    #[test]
    fn exchange_step_keeps_gamma(
        devs in prop::collection::vec(device_strategy(), 3..=6),
        dim in 8usize..32,
        budget in 2.0f64..20.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let p = params();
        let devs = build(&devs);
        let order = sched::sm_order(&devs);
        // OTA keeps the minimum-SM device; digital gets one device above it
        let mover = order[1 + pick.index(order.len() - 1)];
        prop_assume!(devs[mover].sm > devs[order[0]].sm);
        let mut digital = vec![false; devs.len()];
        digital[mover] = true;
        let t_max = budget * dim as f64 / p.bandwidth_hz;
        let Some(before) = sched::evaluate_configuration(&devs, &digital, t_max, dim, &p, BitRule::FloorRelaxed).unwrap() else {
            return Ok(());
        };
        let after = sched::evaluate_configuration(&devs, &vec![false; devs.len()], t_max, dim, &p, BitRule::FloorRelaxed)
            .unwrap()
            .unwrap();
        prop_assert_eq!(before.gamma, after.gamma);
        let quant_term = dim as f64 * quant::quant_mse_term(devs[mover].grad_inf_norm, before.bits[mover].unwrap());
        prop_assert!(quant_term > 0.0);
        prop_assert!(after.mse_bound <= before.mse_bound);
        prop_assert!(after.latency_s < before.latency_s);
    }

    #[test]
    fn parsed_pixels_lie_in_unit_interval(pixels in prop::collection::vec(any::<u8>(), 16..=16), n in 1usize..4) {
        let images = IdxTensor { dims: vec![n, 4, 4], data: pixels.repeat(n) };
        let labels = IdxTensor { dims: vec![n], data: vec![3; n] };
        let parsed = data::parse_idx(&data::write_idx(&images)).unwrap();
        let ds = data::mnist_from_idx(&parsed, &labels, 10).unwrap();
        prop_assert!(ds.features.iter().flatten().all(|&x| (0.0..=1.0).contains(&x)));
    }
}

/// With equal digital counts a non-prefix set can beat the prefix one: the
/// lowest-SM device here has a large gradient and a weak link, so quantizing
/// it at one bit costs more than the OTA noise it causes.
#[test]
fn same_count_prefix_dominance_fails_in_general() {
    let p = params();
    let dim = 16;
    let devs = [
        device(0, 1e3, 10.0, &p),
        device(1, 1e4, 0.01, &p),
        device(2, 1e5, 1.0, &p),
    ];
    assert_eq!(sched::sm_order(&devs)[0], 0);
    let t_max = 1.05 * dim as f64 / p.bandwidth_hz + (64 + dim) as f64 / devs[1].rate(p.bandwidth_hz);
    let prefix = sched::evaluate_configuration(&devs, &[true, false, false], t_max, dim, &p, BitRule::FloorRelaxed)
        .unwrap();
    let other = sched::evaluate_configuration(&devs, &[false, true, false], t_max, dim, &p, BitRule::FloorRelaxed)
        .unwrap()
        .unwrap();
    // the prefix set is either infeasible or worse
    assert!(prefix.map_or(true, |d| d.mse_bound > other.mse_bound));
    // and the global optimum is still a prefix (here all-OTA or device 0 alone)
    let best = sched::brute_force_schedule(&devs, t_max, dim, &p, BitRule::FloorRelaxed).unwrap();
    assert!(sched::is_sm_prefix(&devs, &best.digital));
}

#[test]
fn reconstruction_is_unbiased_and_within_bound() {
    let p = params();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let grads = [
        vec![0.3, -0.2, 0.05, 0.8],
        vec![-0.6, 0.1, 0.4, 0.0],
        vec![0.25, 0.25, -0.9, 0.1],
    ];
    let gains = [Complex64::new(2e-5, 1e-5), Complex64::new(-4e-6, 3e-6), Complex64::new(1e-5, -1e-5)];
    let snaps: Vec<DeviceSnapshot> = grads
        .iter()
        .zip(&gains)
        .enumerate()
        .map(|(i, (g, h))| DeviceSnapshot::new(i, *h, g.iter().fold(0.0, |m: f64, x: &f64| m.max(x.abs())), &p))
        .collect();
    // device 1 digital at 2 bits, the others OTA
    let gamma = sched::ota_prescaler([snaps[0].sm, snaps[2].sm], p.sample_energy).unwrap();
    let bound = sched::mse_bound([(snaps[1].grad_inf_norm, 2)], true, gamma, p.noise_density, 4).unwrap();
    let truth: Vec<f64> = (0..4).map(|j| grads.iter().map(|g| g[j]).sum::<f64>() / 3.0).collect();
    let trials = 100_000;
    let mut sum = [0.0; 4];
    let mut sum_sq = [0.0; 4];
    let mut err = 0.0;
    for _ in 0..trials {
        let agg = airsim::ota_aggregate(&[&grads[0], &grads[2]], gamma, p.noise_density, &mut rng).unwrap();
        let q = quant::dequantize(&quant::quantize(&grads[1], 2, &mut rng).unwrap());
        let g_hat = airsim::reconstruct_global(Some(&agg), &[q], 3).unwrap();
        for j in 0..4 {
            sum[j] += g_hat[j];
            sum_sq[j] += g_hat[j] * g_hat[j];
            err += (3.0 * (g_hat[j] - truth[j])).powi(2);
        }
    }
    let n = trials as f64;
    for j in 0..4 {
        let mean = sum[j] / n;
        let se = ((sum_sq[j] / n - mean * mean) / n).sqrt();
        assert!((mean - truth[j]).abs() <= 3.0 * se, "entry {j}");
    }
    let emp = err / n;
    assert!(emp <= bound * 1.02, "{emp} vs {bound}");
}
