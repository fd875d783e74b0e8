//! Randomized invariants across the library.

use std::f64::consts::FRAC_PI_2;

use fmlab::diagnostics::count_outside;
use fmlab::objectives::target_from_parts;
use fmlab::trainer::{order_times, read_metrics_csv, write_metrics_csv};
use fmlab::{
    energy_distance, few_step_sample, flow_map, post_cfg_sample, Conditioning, FieldNet, FieldNetConfig,
    GaussianMixture, Interpolant, MetricsRecord, SampleSchedule,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn interp(i: usize) -> Interpolant {
    match i % 5 {
        0 => Interpolant::linear(),
        1 => Interpolant::trigonometric(),
        2 => Interpolant::power(0.5).unwrap(),
        3 => Interpolant::power(0.7).unwrap(),
        _ => Interpolant::power(1.0).unwrap(),
    }
}

fn mixture_strategy(dim: usize) -> impl Strategy<Value = GaussianMixture> {
    (1usize..5).prop_flat_map(move |k| {
        (
            prop::collection::vec(0.1f64..1.0, k),
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), k),
            prop::collection::vec(prop::collection::vec(0.02f64..1.0, dim), k),
        )
            .prop_map(|(w, m, v)| {
                let total: f64 = w.iter().sum();
                GaussianMixture::new(w.iter().map(|x| x / total).collect(), m, v).unwrap()
            })
    })
}

fn small_net(seed: u64, classes: Option<usize>) -> (FieldNet, Vec<f64>) {
    let net = FieldNet::new(FieldNetConfig {
        hidden: 8,
        depth: 3,
        num_freqs: 2,
        num_classes: classes,
        label_dim: 3,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = net.init_params(&mut rng);
    (net, theta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn nu_is_constant(i in 0usize..5, u in 0.0f64..=1.0) {
        let it = interp(i);
        let s = it.schedule(it.to_domain(u)).unwrap();
        prop_assert!((s.alpha * s.dsigma - s.sigma * s.dalpha - it.nu()).abs() < 1e-6);
    }

    #[test]
    fn bridge_is_antisymmetric(i in 0usize..5, u in 0.0f64..=1.0, w in 0.0f64..=1.0) {
        let it = interp(i);
        let (t, s) = (it.to_domain(u), it.to_domain(w));
        let a = it.bridge(t, s).unwrap().a;
        let b = it.bridge(s, t).unwrap().a;
        prop_assert!((a + b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn power_one_is_linear(u in 0.0f64..=1.0) {
        let p = Interpolant::power(1.0).unwrap().schedule(u).unwrap();
        let l = Interpolant::linear().schedule(u).unwrap();
        prop_assert!((p.alpha - l.alpha).abs() < 1e-9 && (p.sigma - l.sigma).abs() < 1e-9);
    }

    #[test]
    fn power_half_is_trigonometric(u in 0.0f64..=1.0) {
        let p = Interpolant::power(0.5).unwrap().schedule(u).unwrap();
        let tau = FRAC_PI_2 * u;
        prop_assert!((p.alpha - tau.cos()).abs() < 1e-8 && (p.sigma - tau.sin()).abs() < 1e-8);
    }

    #[test]
    fn ordered_times_respect_domain(i in 0usize..5, u1 in 0.0f64..=1.0, u2 in 0.0f64..=1.0) {
        let it = interp(i);
        let (t, s) = order_times(&it, u1, u2);
        let (lo, hi) = it.domain();
        prop_assert!(t >= s && s >= lo && t <= hi);
        prop_assert!(t >= it.to_domain(fmlab::T_MIN));
    }

    #[test]
    fn flow_map_at_equal_times_is_identity(
        i in 0usize..5,
        u in 0.0f64..=1.0,
        x in prop::collection::vec(-5.0f64..5.0, 1..4),
        scale in -10.0f64..10.0,
    ) {
        let it = interp(i);
        let t = it.to_domain(u);
        let f: Vec<f64> = x.iter().map(|v| scale * v + 1.0).collect();
        let out = flow_map(&it, &x, t, t, &f).unwrap();
        for (o, xi) in out.iter().zip(&x) {
            prop_assert!((o - xi).abs() <= 2.0 * f64::EPSILON * xi.abs());
        }
    }

    #[test]
    fn linear_target_is_bitwise_mean_velocity_form(
        t in 0.0f64..=1.0,
        frac in 0.0f64..=1.0,
        parts in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let it = Interpolant::linear();
        let s = t * frac;
        let (x, v, f, df) = (&parts[0..2], &parts[2..4], &parts[4..6], &parts[6..8]);
        let got = target_from_parts(&it.bridge(t, s).unwrap(), it.nu(), x, v, f, df);
        for k in 0..2 {
            prop_assert_eq!(got[k].to_bits(), (v[k] - (t - s) * df[k]).to_bits());
        }
    }

    #[test]
    fn responsibilities_sum_to_one(
        m in mixture_strategy(2),
        i in 0usize..5,
        u in 0.05f64..=1.0,
        y in prop::collection::vec(-4.0f64..4.0, 2),
    ) {
        let it = interp(i);
        let stats = m.posterior_stats(&it, &y, it.to_domain(u)).unwrap();
        let total: f64 = stats.responsibilities.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        let mut mean = vec![0.0; 2];
        for (r, mu) in stats.responsibilities.iter().zip(&stats.component_means) {
            for d in 0..2 {
                mean[d] += r * mu[d];
            }
        }
        prop_assert_eq!(mean, stats.mean);
    }

    #[test]
    fn terminal_posterior_mean_is_the_data_mean(
        m in mixture_strategy(2),
        i in 0usize..5,
        y in prop::collection::vec(-20.0f64..20.0, 2),
    ) {
        let it = interp(i);
        prop_assert_eq!(m.posterior_stats(&it, &y, it.domain_end()).unwrap().mean, m.mean());
    }

    #[test]
    fn energy_distance_symmetric_and_permutation_invariant(
        a in prop::collection::vec(-3.0f64..3.0, 2..40),
        b in prop::collection::vec(-3.0f64..3.0, 2..40),
        rot in 0usize..40,
    ) {
        let ab = energy_distance(&a, &b, 1).unwrap();
        let ba = energy_distance(&b, &a, 1).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * (1.0 + ab.abs()));
        let mut a2 = a.clone();
        let r = rot % a2.len();
        a2.rotate_left(r);
        let rotated = energy_distance(&a2, &b, 1).unwrap();
        prop_assert!((ab - rotated).abs() <= 1e-12 * (1.0 + ab.abs()));
    }

    #[test]
    fn spikes_never_exceed_grid(values in prop::collection::vec(-5.0f64..5.0, 0..100), mean in -1.0f64..1.0, sigma in 0.0f64..2.0) {
        prop_assert!(count_outside(&values, mean, sigma) <= values.len());
    }

    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec(
        (0u64..100_000, -1e6f64..1e6, -1e6f64..1e6, -1e6f64..1e6, 0.0f64..1e6, prop::option::of(-1e3f64..1e3), prop::option::of(-1.0f64..1.0)),
        0..20,
    )) {
        let rows: Vec<MetricsRecord> = rows
            .into_iter()
            .map(|(step, a, b, c, g, e, d)| MetricsRecord {
                step, loss_total: a, loss_cfm: b, loss_sd: c, grad_norm: g, ed_proxy: e, dist_energy: d,
            })
            .collect();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        prop_assert_eq!(read_metrics_csv(&buf[..]).unwrap(), rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn repeated_time_schedule_returns_input(seed in 0u64..1000, i in 0usize..5, u in 0.0f64..=1.0) {
        let it = interp(i);
        let (net, theta) = small_net(seed, None);
        let field = net.bind(&theta);
        let t = it.to_domain(u);
        let z: Vec<f64> = (0..10).map(|k| k as f64 * 0.3 - 1.5).collect();
        let sched = SampleSchedule::new(&it, vec![t, t]).unwrap();
        let out = few_step_sample(&field, &it, &z, &sched, &Conditioning::unconditional()).unwrap();
        prop_assert_eq!(out, z);
    }

    #[test]
    fn post_cfg_at_one_is_conditional_sampling(seed in 0u64..1000, steps in 1usize..6, label in 0usize..3) {
        let it = Interpolant::linear();
        let (net, theta) = small_net(seed, Some(3));
        let field = net.bind(&theta);
        let z: Vec<f64> = (0..12).map(|k| (k as f64 * 0.7).sin()).collect();
        let sched = SampleSchedule::uniform(&it, steps).unwrap();
        let cond = Conditioning::label(label);
        let a = few_step_sample(&field, &it, &z, &sched, &cond).unwrap();
        let b = post_cfg_sample(&field, &it, &z, &sched, &cond, 1.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn one_dimensional_flow_preserves_order(
        m in mixture_strategy(1),
        mut starts in prop::collection::vec(-3.0f64..3.0, 2..8),
    ) {
        let it = Interpolant::linear();
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        let ends: Vec<f64> = starts
            .iter()
            .map(|&x| m.true_flowmap(&it, &[x], 1.0, 0.0, 200).unwrap()[0])
            .collect();
        prop_assert!(ends.windows(2).all(|w| w[0] <= w[1]), "{starts:?} -> {ends:?}");
    }
}
