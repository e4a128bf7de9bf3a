use nac_core::graph::{assignment_total, solve_assignment};
use nac_core::layers::link_probability_matrix;
use nac_core::pruning::eliminate_edges;
use nac_core::tensor::{grad_check, Tape, Tensor, TensorError};
use proptest::prelude::*;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, len)
}

/// `[a, b, c]` against one of `[a, b, c]`, `[1, b, c]`, `[b, 1]`-style
/// broadcast partners, described by which axes keep their size.
fn broadcast_case() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<f64>, Vec<f64>)> {
    (1..4usize, 1..4usize, 1..5usize, prop::array::uniform3(any::<bool>())).prop_flat_map(|(a, b, c, keep)| {
        let full = vec![a, b, c];
        let other: Vec<usize> = full.iter().zip(keep).map(|(&d, k)| if k { d } else { 1 }).collect();
        let (n, m) = (a * b * c, other.iter().product());
        (Just(full), Just(other), values(n), values(m))
    })
}

fn index_of(shape: &[usize], idx: &[usize]) -> usize {
    idx.iter()
        .zip(shape)
        .fold(0, |acc, (&i, &d)| acc * d + if d == 1 { 0 } else { i })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcast_ops_match_explicit_loops((sa, sb, da, db) in broadcast_case()) {
        let a = Tensor::new(sa.clone(), da).unwrap();
        let b = Tensor::new(sb.clone(), db.iter().map(|x| x + 4.0).collect()).unwrap();
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let sum = tape.add(va, vb).unwrap();
        let prod = tape.mul(vb, va).unwrap();
        let quot = tape.div(va, vb).unwrap();
        for i in 0..sa[0] {
            for j in 0..sa[1] {
                for k in 0..sa[2] {
                    let x = a.data()[index_of(&sa, &[i, j, k])];
                    let y = b.data()[index_of(&sb, &[i, j, k])];
                    let at = index_of(&sa, &[i, j, k]);
                    prop_assert_eq!(tape.value(sum)[at], x + y);
                    prop_assert_eq!(tape.value(prod)[at], y * x);
                    prop_assert_eq!(tape.value(quot)[at], x / y);
                }
            }
        }
    }

    #[test]
    fn broadcast_gradients_match_central_differences((sa, sb, da, db) in broadcast_case()) {
        let a = Tensor::new(sa, da).unwrap();
        let b = Tensor::new(sb, db.iter().map(|x| x + 4.0).collect()).unwrap();
        let report = grad_check::<TensorError, _>(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                let q = t.div(p, v[1])?;
                let r = t.add(q, v[1])?;
                let s = t.square(r);
                Ok(t.sum(s))
            },
            &[a, b],
        )
        .unwrap();
        prop_assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn assignment_is_optimal_and_a_permutation(n in 1..7usize, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let cost = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let sigma = solve_assignment(&cost).unwrap();
        let mut seen = sigma.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let mut best = f64::INFINITY;
        let mut perm: Vec<usize> = (0..n).collect();
        permutations(&mut perm, 0, &mut |p| best = best.min(assignment_total(&cost, p)));
        prop_assert!((assignment_total(&cost, &sigma) - best).abs() < 1e-12);
    }

    #[test]
    fn edge_masks_are_symmetric_and_keep_the_diagonal(u in 2..12usize, fraction in 0.0..=1.0f64, data in values(144)) {
        let s = Tensor::new(vec![u, 3], data[..u * 3].iter().map(|x| x + 0.01).collect()).unwrap();
        let p = link_probability_matrix(&s, &s, 1.0).unwrap();
        let mask = eliminate_edges(&p, fraction).unwrap();
        let pairs = u * (u - 1) / 2;
        let mut zeros = 0;
        for i in 0..u {
            prop_assert_eq!(mask.at(&[i, i]), 1.0);
            for j in 0..u {
                prop_assert_eq!(mask.at(&[i, j]), mask.at(&[j, i]));
                zeros += usize::from(mask.at(&[i, j]) == 0.0);
            }
        }
        prop_assert_eq!(zeros, 2 * (fraction * pairs as f64).round() as usize);
    }

    #[test]
    fn link_probabilities_are_symmetric_with_unit_diagonal(u in 1..10usize, data in values(40)) {
        let s = Tensor::new(vec![u, 4], data[..u * 4].iter().map(|x| x + 0.01).collect()).unwrap();
        let p = link_probability_matrix(&s, &s, 0.5).unwrap();
        for i in 0..u {
            prop_assert!((p.at(&[i, i]) - 1.0).abs() < 1e-12);
            for j in 0..u {
                prop_assert_eq!(p.at(&[i, j]), p.at(&[j, i]));
                prop_assert!(p.at(&[i, j]) > 0.0 && p.at(&[i, j]) <= 1.0 + 1e-12);
            }
        }
    }
}

fn permutations(p: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permutations(p, k + 1, visit);
        p.swap(k, i);
    }
}
