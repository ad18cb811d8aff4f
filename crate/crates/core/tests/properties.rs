use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spn_core::guidance::Conv2d;
use spn_core::propagation::{
    propagate_direction, propagate_direction_backward, spn_backward, spn_forward,
};
use spn_core::stability::{max_abs_gate_sum, project_gates};
use spn_core::tensor::{bilinear_resize, bilinear_resize_backward};
use spn_core::{ConnectionKind, Direction, GateTensor, Map, SpnConfig};

fn kind_of(three: bool) -> ConnectionKind {
    if three {
        ConnectionKind::ThreeWay
    } else {
        ConnectionKind::OneWay
    }
}

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Map<f64> {
    Map::from_vec(
        h,
        w,
        c,
        (0..h * w * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn signed_gates(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    c: usize,
    kind: ConnectionKind,
) -> GateTensor<f64> {
    project_gates(&GateTensor::random(h, w, c, kind, -1.0, 1.0, rng).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scan_is_linear_in_its_input(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, three in any::<bool>(), d in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = Direction::ALL[d];
        let g = signed_gates(&mut rng, h, w, 2, kind_of(three));
        let (x, y) = (random_map(&mut rng, h, w, 2), random_map(&mut rng, h, w, 2));
        let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let mut mix = x.clone();
        for (m, v) in mix.data_mut().iter_mut().zip(y.data()) {
            *m = a * *m + b * v;
        }
        let hx = propagate_direction(&x, &g, dir).unwrap();
        let hy = propagate_direction(&y, &g, dir).unwrap();
        let hm = propagate_direction(&mix, &g, dir).unwrap();
        for ((m, p), q) in hm.data().iter().zip(hx.data()).zip(hy.data()) {
            prop_assert!((m - (a * p + b * q)).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_maps_are_fixed_points(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, three in any::<bool>(), value in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = signed_gates(&mut rng, h, w, 1, kind_of(three));
        let x = Map::new(h, w, 1, value).unwrap();
        for dir in Direction::ALL {
            let y = propagate_direction(&x, &g, dir).unwrap();
            prop_assert!(y.data().iter().all(|v| (v - value).abs() < 1e-12));
        }
    }

    #[test]
    fn input_gradient_is_the_adjoint(seed in any::<u64>(), h in 1usize..8, w in 1usize..8, three in any::<bool>(), d in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dir = Direction::ALL[d];
        let g = signed_gates(&mut rng, h, w, 2, kind_of(three));
        let x = random_map(&mut rng, h, w, 2);
        let dy = random_map(&mut rng, h, w, 2);
        let y = propagate_direction(&x, &g, dir).unwrap();
        let (dx, dg) = propagate_direction_backward(&x, &y, &g, dir, &dy).unwrap();
        // y is linear in x, so <dy, y> = <dx, x>
        prop_assert!((dot(dy.data(), y.data()) - dot(dx.data(), x.data())).abs() < 1e-10);
        for other in Direction::ALL.into_iter().filter(|&o| o != dir) {
            for r in 0..h {
                for c in 0..w {
                    for ch in 0..2 {
                        for k in 0..g.kind().multiplicity() {
                            prop_assert_eq!(dg.get(r, c, ch, other, k), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn gate_gradient_matches_directional_derivative(seed in any::<u64>(), h in 2usize..7, w in 2usize..7, three in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = kind_of(three);
        let cfg = SpnConfig { units: 2, connection: kind, hidden_channels: 2, propagation_scale: 1 };
        let gates: Vec<_> = (0..2).map(|_| {
            GateTensor::random(h, w, 2, kind, 0.0, 0.9 / kind.multiplicity() as f64, &mut rng).unwrap()
        }).collect();
        let x = random_map(&mut rng, h, w, 2);
        let dy = random_map(&mut rng, h, w, 2);
        let (_, cache) = spn_forward(&x, &gates, &cfg).unwrap();
        let (_, dgs) = spn_backward(&dy, &cache).unwrap();
        // random direction in gate space, boundary kept at zero
        let dirs: Vec<GateTensor<f64>> = gates.iter().map(|g| {
            let mut v = g.zeros_like();
            v.data_mut().iter_mut().for_each(|e| *e = rng.gen_range(-1.0..1.0));
            v.zero_boundary();
            v
        }).collect();
        let loss = |t: f64| {
            let gs: Vec<_> = gates.iter().zip(&dirs).map(|(g, v)| {
                let mut s = g.clone();
                s.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += t * b);
                s
            }).collect();
            let (y, cache) = spn_forward(&x, &gs, &cfg).unwrap();
            (dot(dy.data(), y.data()), cache.units.iter().map(|u| u.winners.clone()).collect::<Vec<_>>())
        };
        let eps = 1e-6;
        let (lp, wp) = loss(eps);
        let (lm, wm) = loss(-eps);
        let (_, w0) = loss(0.0);
        prop_assume!(wp == w0 && wm == w0);
        let numeric = (lp - lm) / (2.0 * eps);
        let analytic: f64 = dgs.iter().zip(&dirs).map(|(g, v)| dot(g.data(), v.data())).sum();
        prop_assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "{} vs {}", numeric, analytic);
    }

    #[test]
    fn projection_bounds_and_is_idempotent(seed in any::<u64>(), three in any::<bool>(), scale in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: GateTensor<f64> = GateTensor::random(5, 6, 2, kind_of(three), -scale, scale, &mut rng).unwrap();
        let p = project_gates(&raw).unwrap();
        prop_assert!(max_abs_gate_sum(&p) <= 1.0 + 1e-12);
        let again = project_gates(&p).unwrap();
        prop_assert_eq!(again.data(), p.data());
        for (a, b) in raw.data().iter().zip(p.data()) {
            prop_assert!(a.signum() == b.signum() || *b == 0.0);
        }
    }

    #[test]
    fn resize_backward_is_the_adjoint(seed in any::<u64>(), ih in 1usize..9, iw in 1usize..9, oh in 1usize..17, ow in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_map(&mut rng, ih, iw, 2);
        let dy = random_map(&mut rng, oh, ow, 2);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        let dx = bilinear_resize_backward(&dy, ih, iw).unwrap();
        prop_assert!((dot(dy.data(), y.data()) - dot(dx.data(), x.data())).abs() < 1e-10);
    }

    #[test]
    fn conv_backward_is_the_adjoint(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, stride in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::<f64>::init(3, 4, stride, 1.0, &mut rng);
        let x = random_map(&mut rng, h, w, 3);
        let y = conv.forward(&x).unwrap();
        let dy = random_map(&mut rng, y.height(), y.width(), 4);
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &dy, &mut grad).unwrap();
        prop_assert!((dot(dy.data(), y.data()) - dot(dx.data(), x.data())).abs() < 1e-10);
        // y is also linear in the weights
        prop_assert!((dot(dy.data(), y.data()) - dot(&grad.weight, &conv.weight)).abs() < 1e-10);
    }
}
