use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use switchdiff::averaging::Path;
use switchdiff::experiments::EventSpec;
use switchdiff::fastchain;
use switchdiff::fixtures;
use switchdiff::ratefn::{self, ControlTriple, LocalRateOptions};
use switchdiff::simulator::{self, SimSpec};
use switchdiff::{Model, StreamId};

fn model_from(seed: u64, l: usize, d: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fixtures::random_affine_model(&mut rng, l, d, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stationary_law_is_a_balanced_probability(seed in any::<u64>(), l in 1usize..6, x in -4.0f64..4.0) {
        let model = model_from(seed, l, 1);
        let nu = fastchain::nu(&model, &[x]).unwrap();
        prop_assert!((nu.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        prop_assert!(nu.iter().all(|&p| p > 0.0));
        prop_assert!(fastchain::generator(&model, &[x]).balance_residual(&nu) < 1e-12);
    }

    #[test]
    fn entropy_is_nonnegative_and_convex(a in 0.0f64..20.0, b in 0.0f64..20.0) {
        let la = ratefn::ell(a).unwrap();
        let lb = ratefn::ell(b).unwrap();
        let lm = ratefn::ell(0.5 * (a + b)).unwrap();
        prop_assert!(la >= 0.0 && lb >= 0.0);
        prop_assert!(lm <= 0.5 * (la + lb) + 1e-12);
    }

    #[test]
    fn capping_never_raises_the_jump_cost(seed in any::<u64>(), l in 2usize..5, scale in 0.05f64..8.0) {
        let model = model_from(seed, l, 1);
        let g = fastchain::jump_geometry(&model, &[0.2]);
        let pi = fastchain::nu(&model, &[0.2]).unwrap();
        let q: Vec<f64> = g.rho.iter().map(|r| r * scale).collect();
        let before = ratefn::jump_cost(&g, &pi, &q);
        let cap = ratefn::cap_rate_control(&g, &pi, &q);
        prop_assert!(cap.reduced_cost <= before + 1e-12);
        let t = ControlTriple { pi: pi.clone(), q: cap.q.clone(), u: vec![0.0; l] };
        prop_assert!(t.stationarity_residual(&g).unwrap() < 1e-10);
    }

    #[test]
    fn local_rate_is_below_the_averaged_law_cost(seed in any::<u64>(), l in 1usize..4, shift in -1.0f64..1.0) {
        let model = model_from(seed, l, 1);
        let x = [0.1];
        let nu = fastchain::nu(&model, &x).unwrap();
        let bhat = switchdiff::averaging::averaged_drift(&model, &x).unwrap();
        let beta = [bhat[0] + shift];
        let inner = ratefn::inner_quadratic(&model, &x, &nu, &beta);
        let lr = ratefn::local_rate(&model, &x, &beta, &LocalRateOptions::default()).unwrap();
        prop_assert!(lr.value >= 0.0);
        // (nu, rho, least-norm u) is admissible with zero jump cost
        prop_assert!(lr.value <= inner.value + 1e-9);
    }

    #[test]
    fn trajectories_are_valid_and_reproducible(seed in any::<u64>(), l in 1usize..4, stream in 1u64..1000) {
        let model = model_from(seed, l, 1);
        let spec = SimSpec::new(0.05, vec![0.0], 0, 0.5, 0.02);
        let id = StreamId::new(seed, stream);
        let a = simulator::simulate(&model, &spec, id).unwrap();
        let b = simulator::simulate(&model, &spec, id).unwrap();
        prop_assert_eq!(&a, &b);
        let mut state = a.y0;
        let mut last = 0.0;
        for j in &a.jumps {
            prop_assert_eq!(j.from, state);
            prop_assert!(j.time > last && j.time <= 0.5);
            prop_assert!(model.channel_index(j.from, j.to).is_some());
            state = j.to;
            last = j.time;
        }
        let occ = simulator::occupation_measure(&a, l, 0.5).unwrap();
        prop_assert!((occ.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn projection_lands_in_the_event(cx in -3.0f64..3.0, r in 0.01f64..2.0, px in -10.0f64..10.0, py in -10.0f64..10.0) {
        let ball = EventSpec::ball(vec![cx, 0.0], r);
        let p = ball.project(&[px, py]);
        prop_assert!(ball.contains(&p) || ((p[0] - cx).hypot(p[1]) - r).abs() < 1e-12);
        let half = EventSpec::halfspace(vec![1.0, -2.0], cx);
        let q = half.project(&[px, py]);
        prop_assert!((q[0] - 2.0 * q[1] - cx).abs() < 1e-9 || half.contains(&[px, py]));
    }

    #[test]
    fn sup_distance_is_symmetric(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0) {
        let p = Path::straight_line(&[a], &[b], 1.0, 6).unwrap();
        let q = Path::straight_line(&[c], &[b], 1.0, 6).unwrap();
        prop_assert_eq!(p.sup_distance(&q).unwrap(), q.sup_distance(&p).unwrap());
        prop_assert!((p.sup_distance(&q).unwrap() - (a - c).abs()).abs() < 1e-12);
    }
}
