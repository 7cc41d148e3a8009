use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vistree::diff::{backward, check_gradients, Tape, Var};
use vistree::tree::{Action, ActionSpace, ControlTree, Relaxation, TreeInit};

#[test]
fn depth_two_tree_log_prob_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 20 {
        let mut t = ControlTree::new(2, 3, ActionSpace::Discrete(2), &TreeInit::default(), &mut rng).unwrap();
        let p: Vec<f64> = (0..t.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        t.set_params(&p);
        t.alpha = 2.0;
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = check_gradients(
            |tape, pv| {
                let b = t.bind(tape, pv);
                b.record(&t, tape, &x, Relaxation::Hard, None).log_prob(tape, &Action::Discrete(1))
            },
            &t.params(),
            1e-6,
        )
        .unwrap();
        if report.excluded {
            continue;
        }
        assert!(report.max_rel_error <= 1e-5, "{report}");
        checked += 1;
    }
}

/// Random smooth expression over three parameters, built from a recipe.
fn smooth(tape: &mut Tape, p: Var, recipe: &[u8]) -> Var {
    let mut acc = tape.index(p, 0);
    for (i, op) in recipe.iter().enumerate() {
        let other = tape.index(p, (i + 1) % 3);
        acc = match op % 7 {
            0 => tape.add(acc, other),
            1 => tape.mul(acc, other),
            2 => {
                let s = tape.logistic(acc);
                tape.add(s, other)
            }
            3 => {
                let t = tape.tanh(acc);
                tape.mul(t, other)
            }
            4 => {
                let sp = tape.softplus(acc);
                tape.sub(sp, other)
            }
            5 => {
                let both = tape.stack(&[acc, other]);
                let sm = tape.softmax(both);
                tape.index(sm, 0)
            }
            _ => {
                let sq = tape.square(other);
                let d = tape.offset(sq, 1.0);
                tape.div(acc, d)
            }
        };
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn smooth_compositions_match_central_differences(
        recipe in prop::collection::vec(0u8..7, 1..8),
        p in prop::collection::vec(-1.5f64..1.5, 3),
    ) {
        let report = check_gradients(|t, v| smooth(t, v, &recipe), &p, 1e-5).unwrap();
        let scale = report.checks.iter().map(|c| c.analytic.abs()).fold(0.0, f64::max);
        // entries far below the largest one sit at the finite-difference rounding floor
        for c in &report.checks {
            prop_assert!(c.rel_error <= 1e-5 || (c.analytic - c.numeric).abs() <= 1e-9 * scale.max(1.0), "{}", report);
        }
    }

    #[test]
    fn backward_is_deterministic(recipe in prop::collection::vec(0u8..7, 1..8), p in prop::collection::vec(-1.5f64..1.5, 3)) {
        let run = || {
            let mut t = Tape::new();
            let v = t.row(&p);
            let out = smooth(&mut t, v, &recipe);
            backward(&t, out).unwrap().get(v).iter().map(|g| g.to_bits()).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(), run());
    }
}
