use std::collections::HashSet;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_8};

use hydrarm_core::datapipe::split_indices;
use hydrarm_core::geometry::wrap_angle;
use hydrarm_core::nnet::{mlp, Matrix, Mode};
use hydrarm_core::plant::{pressure_diff, step, PRESSURE_MAX, PRESSURE_MIN};
use hydrarm_core::{
    regulate, ArmGeometry, ArmState, Network, NormalizationSpec, PlantConfig, RegulatorConfig,
    ValveVector,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bend() -> impl Strategy<Value = f64> {
    -FRAC_PI_8..=FRAC_PI_8
}

fn valves() -> impl Strategy<Value = ValveVector> {
    any::<[bool; 8]>().prop_map(ValveVector)
}

proptest! {
    #[test]
    fn markers_round_trip_to_bends(a in bend(), b in bend()) {
        let g = ArmGeometry::default();
        let back = g.bend_from_markers(&g.marker_positions(&[a, b]).unwrap()).unwrap();
        prop_assert!((back[0] - a).abs() < 1e-9);
        prop_assert!((back[1] - b).abs() < 1e-9);
    }

    #[test]
    fn negated_bends_mirror_the_arm(a in bend(), b in bend()) {
        let g = ArmGeometry::default();
        let m = g.marker_positions(&[a, b]).unwrap();
        let n = g.marker_positions(&[-a, -b]).unwrap();
        for (p, q) in m.iter().zip(&n) {
            prop_assert!((p.x + q.x).abs() < 1e-12);
            prop_assert!((p.y - q.y).abs() < 1e-12);
            prop_assert!((wrap_angle(p.phi - FRAC_PI_2) + wrap_angle(q.phi - FRAC_PI_2)).abs() < 1e-12);
        }
    }

    #[test]
    fn module_markers_share_a_circle(a in bend(), b in bend()) {
        prop_assume!(a.abs() > 1e-3 && b.abs() > 1e-3);
        let g = ArmGeometry::default();
        let m = g.marker_positions(&[a, b]).unwrap();
        let mut base = (g.base.x, g.base.y, g.base.heading);
        for (i, theta) in [a, b].into_iter().enumerate() {
            let r = g.module_length / theta;
            // center sits to the left of the base tangent for positive bend
            let (cx, cy) = (base.0 - r * base.2.sin(), base.1 + r * base.2.cos());
            let seg = &m[i * 5..(i + 1) * 5];
            for p in seg {
                prop_assert!(((p.x - cx).hypot(p.y - cy) - r.abs()).abs() < 1e-9);
            }
            let tip = seg[4];
            base = (tip.x, tip.y, tip.phi);
        }
    }

    #[test]
    fn markers_move_smoothly(a in bend(), b in bend()) {
        let g = ArmGeometry::default();
        let d = 1e-7;
        let lo = g.markers_unchecked(&[a - d, b]);
        let hi = g.markers_unchecked(&[a + d, b]);
        let mid = g.markers_unchecked(&[a, b]);
        for ((l, h), m) in lo.iter().zip(&hi).zip(&mid) {
            // the central difference predicts the midpoint to second order
            prop_assert!(((l.x + h.x) / 2.0 - m.x).abs() < 1e-12);
            prop_assert!(((l.y + h.y) / 2.0 - m.y).abs() < 1e-12);
            prop_assert!(l.distance(h) <= 2.0 * d * 0.4 + 1e-15);
        }
    }

    #[test]
    fn pressures_stay_in_sensor_range(cmds in prop::collection::vec((valves(), 1usize..300), 1..12)) {
        let cfg = PlantConfig::default();
        let mut s = ArmState::at_rest(&cfg);
        for (u, n) in cmds {
            for _ in 0..n {
                s = step(&s, u, &cfg).unwrap();
                for p in s.p {
                    prop_assert!((PRESSURE_MIN..=PRESSURE_MAX).contains(&p));
                }
                for m in 0..2 {
                    prop_assert!((s.z[m] - pressure_diff(&s.p, m)).abs() <= cfg.play_width[m] + 1e-12);
                    prop_assert!(s.theta[m].abs() <= cfg.geometry.theta_max);
                }
            }
        }
    }

    #[test]
    fn normalization_round_trips_inside_bounds(p in 95.0f64..=121.0, x in -0.15f64..=0.15, y in 0.0f64..=0.40) {
        let n = NormalizationSpec::default();
        prop_assert!((n.pressure_inv(n.pressure(p)) - p).abs() < 1e-12);
        prop_assert!((n.x_inv(n.x(x)) - x).abs() < 1e-12);
        prop_assert!((n.y_inv(n.y(y)) - y).abs() < 1e-12);
    }

    #[test]
    fn normalization_is_monotone_and_clamped(a in 80.0f64..140.0, b in 80.0f64..140.0) {
        let n = NormalizationSpec::default();
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(n.pressure(lo) <= n.pressure(hi));
        prop_assert!((0.0..=1.0).contains(&n.pressure(a)));
        if (95.0..=121.0).contains(&lo) && (95.0..=121.0).contains(&hi) && lo < hi {
            prop_assert!(n.pressure(lo) < n.pressure(hi));
        }
    }

    #[test]
    fn split_partitions_without_leakage(n in 1usize..2000, seed in any::<u64>(), ratio in 0.05f64..0.95) {
        let (tr, te) = split_indices(n, ratio, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), n);
        let train: HashSet<_> = tr.iter().collect();
        prop_assert!(te.iter().all(|i| !train.contains(i)));
        let all: HashSet<_> = tr.iter().chain(&te).copied().collect();
        prop_assert_eq!(all.len(), n);
    }

    #[test]
    fn regulator_never_opens_both_valves(t in prop::array::uniform4(90.0f64..130.0), c in prop::array::uniform4(90.0f64..130.0)) {
        let rc = RegulatorConfig::default();
        let u = regulate(&t, &c, &rc);
        for a in 0..4 {
            prop_assert!(!(u.in_open(a) && u.out_open(a)));
        }
        prop_assert_eq!(u, regulate(&t, &c, &rc));
    }
}

#[test]
fn dropout_averages_to_eval_output() {
    // one hidden layer with dropout, linear everywhere so the expectation is exact
    let mut layers = mlp(&[6, 16, 3], 0.2);
    layers[0].activation = hydrarm_core::nnet::Activation::Linear;
    let net = Network::new(layers, 11).unwrap();
    let x = Matrix::new(1, 6, vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.9]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let eval = net
        .forward(&x, Mode::Eval, &mut rng)
        .unwrap()
        .output()
        .to_vec();
    let draws = 20_000;
    let mut mean = [0.0; 3];
    for _ in 0..draws {
        let out = net.forward(&x, Mode::Train, &mut rng).unwrap();
        for (m, o) in mean.iter_mut().zip(out.output()) {
            *m += o / draws as f64;
        }
    }
    let scale = eval.iter().map(|v| v.abs()).fold(0.0, f64::max);
    for (m, e) in mean.iter().zip(&eval) {
        assert!((m - e).abs() <= 0.02 * scale, "{m} vs {e}");
    }
}
