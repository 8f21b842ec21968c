use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;

use progembed::corpus::{annotate, bundled_task, zipf_frequency};
use progembed::dsl::{
    binarize, canonical_id, CanonicalId, cyclomatic_complexity, inline_calls, parse, pretty, subtrees, Ast, NodeKind,
};
use progembed::feedback::{kmeans, pr_sweep, select_exemplars, tree_edit_distance, Averaging, SelectionStrategy};
use progembed::gridworld::{
    decode_state, encode_state, state_variable_accuracy, Heading, StateLayout, StateVector, WorldSpec, WorldState,
};
use progembed::interpreter::{extract_triples, run, HaltReason};
use progembed::numcore::{block_softmax, ridge_regression, ridge_residual, rng};
use progembed::treemodels::{tree_forward, Forest};
use progembed::{Matrix64, TreeParams64};

const CONDITIONS: [NodeKind; 8] = [
    NodeKind::FrontClear,
    NodeKind::LeftClear,
    NodeKind::RightClear,
    NodeKind::BeepersPresent,
    NodeKind::FacingNorth,
    NodeKind::FacingEast,
    NodeKind::FacingSouth,
    NodeKind::FacingWest,
];

fn condition() -> impl Strategy<Value = Ast> {
    (0..CONDITIONS.len(), any::<bool>()).prop_map(|(i, neg)| {
        let c = Ast::leaf(CONDITIONS[i].clone());
        if neg {
            Ast::not(c)
        } else {
            c
        }
    })
}

fn primitive() -> impl Strategy<Value = Ast> {
    prop_oneof![
        3 => Just(Ast::mv()),
        2 => Just(Ast::turn_left()),
        1 => Just(Ast::turn_right()),
        1 => Just(Ast::put_beeper()),
        1 => Just(Ast::pick_beeper()),
    ]
}

/// Statements in the shape the parser produces.
fn statement() -> impl Strategy<Value = Ast> {
    primitive().prop_recursive(4, 24, 4, |inner| {
        let block = prop::collection::vec(inner, 0..4).prop_map(Ast::block);
        prop_oneof![
            (1u8..=10, block.clone()).prop_map(|(n, b)| Ast::repeat(n, b)),
            (condition(), block.clone()).prop_map(|(c, b)| Ast::while_loop(c, b)),
            (condition(), block.clone()).prop_map(|(c, b)| Ast::if_then(c, b)),
            (condition(), block.clone(), block).prop_map(|(c, t, e)| Ast::if_else(c, t, e)),
        ]
    })
}

fn program() -> impl Strategy<Value = Ast> {
    prop::collection::vec(statement(), 0..5).prop_map(|mut items| match items.len() {
        0 => Ast::empty(),
        1 => items.pop().unwrap(),
        _ => Ast::seq(items),
    })
}

/// Programs drawn from a tiny space so that equal pairs are common.
fn tiny_program() -> impl Strategy<Value = Ast> {
    prop::collection::vec(prop_oneof![Just(Ast::mv()), Just(Ast::turn_left())], 1..3).prop_map(|mut v| {
        if v.len() == 1 {
            v.pop().unwrap()
        } else {
            Ast::seq(v)
        }
    })
}

fn world() -> impl Strategy<Value = (WorldSpec, WorldState)> {
    (1usize..5, 1usize..5, 0u8..3).prop_flat_map(|(rows, cols, bmax)| {
        let cells = rows * cols;
        (
            prop::collection::vec(prop::bool::weighted(0.2), cells),
            prop::collection::vec(0..=bmax, cells),
            0..cells,
            0usize..4,
        )
            .prop_map(move |(walls, beepers, agent, heading)| {
                let mut spec = WorldSpec::new(rows, cols, bmax).unwrap();
                spec.walls = walls;
                spec.walls[agent] = false;
                let state = WorldState {
                    row: agent / cols,
                    col: agent % cols,
                    heading: Heading::from_index(heading),
                    crashed: false,
                    beepers,
                };
                (spec, state)
            })
    })
}

fn random_state(layout: &StateLayout) -> impl Strategy<Value = WorldState> {
    let cells = layout.cell_count();
    (0..layout.rows, 0..layout.cols, 0usize..4, any::<bool>(), prop::collection::vec(0..=layout.beeper_max, cells))
        .prop_map(|(row, col, h, crashed, beepers)| WorldState {
            row,
            col,
            heading: Heading::from_index(h),
            crashed,
            beepers,
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, ..ProptestConfig::default() })]

    #[test]
    fn parse_inverts_pretty(t in program()) {
        prop_assert_eq!(parse(&pretty(&t)).unwrap(), t);
    }

    #[test]
    fn ids_agree_with_structure(a in tiny_program(), b in tiny_program()) {
        prop_assert_eq!(canonical_id(&a) == canonical_id(&b), a == b);
    }

    #[test]
    fn subtree_ids_agree_with_structure(t in program()) {
        let subs = subtrees(&t);
        for (x, ix) in &subs {
            for (y, iy) in &subs {
                prop_assert_eq!(ix == iy, x == y);
            }
        }
    }

    #[test]
    fn one_subtree_per_statement(t in program()) {
        let subs = subtrees(&t);
        prop_assert_eq!(subs.len(), t.statement_count());
        prop_assert!(std::ptr::eq(subs[0].0, &t));
        prop_assert_eq!(subs[0].1, canonical_id(&t));
    }

    #[test]
    fn binarize_preserves_behaviour(t in program(), (spec, start) in world()) {
        let a = run(&t, &spec, &start, 300);
        let b = run(&binarize(&t), &spec, &start, 300);
        prop_assert_eq!(a.halted, b.halted);
        prop_assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn complexity_of_sequence(a in statement(), b in statement()) {
        let both = Ast::seq(vec![a.clone(), b.clone()]);
        prop_assert_eq!(cyclomatic_complexity(&both), cyclomatic_complexity(&a) + cyclomatic_complexity(&b) - 1);
    }

    #[test]
    fn encoding_round_trips((spec, start) in world()) {
        let layout = spec.layout();
        let v = encode_state(&start, &spec).unwrap();
        prop_assert_eq!(v.dim(), layout.rows + layout.cols + 6 + layout.cell_count() * (usize::from(layout.beeper_max) + 1));
        for (off, n) in layout.blocks() {
            prop_assert_eq!(v.0[off..off + n].iter().sum::<f64>(), 1.0);
        }
        prop_assert_eq!(decode_state(&v.0, &layout).unwrap(), start);
    }

    #[test]
    fn accuracy_symmetric_and_bounded(
        (l, a, b) in (1usize..4, 1usize..4, 0u8..3).prop_flat_map(|(r, c, m)| {
            let l = StateLayout::new(r, c, m);
            (Just(l.clone()), random_state(&l), random_state(&l))
        })
    ) {
        let ab = state_variable_accuracy(&a, &b, &l);
        prop_assert_eq!(ab, state_variable_accuracy(&b, &a, &l));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(state_variable_accuracy(&a, &a, &l), 1.0);
    }

    #[test]
    fn sequences_compose(t in program(), (spec, start) in world()) {
        let tree = binarize(&t);
        // A step-limit cutoff records a partial root triple; only whole runs compose.
        if run(&tree, &spec, &start, 300).halted == HaltReason::StepLimit {
            return Ok(());
        }
        let layout = spec.layout();
        let triples = extract_triples(&tree, &[(spec, start)], 300, usize::MAX);
        let mut post_of: HashMap<(CanonicalId, Vec<u8>), Vec<u8>> = HashMap::new();
        for tr in &triples {
            // Execution is deterministic: one post per (subtree, pre).
            if let Some(prev) = post_of.insert((tr.subtree, tr.pre.to_bits()), tr.post.to_bits()) {
                prop_assert_eq!(prev, tr.post.to_bits());
            }
        }
        let mut seqs = Vec::new();
        tree.walk(&mut |n| if n.kind == NodeKind::Seq { seqs.push(n) });
        for s in seqs {
            let (id, ia, ib) = (canonical_id(s), canonical_id(&s.children[0]), canonical_id(&s.children[1]));
            for tr in triples.iter().filter(|tr| tr.subtree == id) {
                let mid = post_of.get(&(ia, tr.pre.to_bits())).expect("first part recorded");
                let mid_state = decode_state(&StateVector::from_bits(mid, layout.dim()).unwrap().0, &layout).unwrap();
                if mid_state.crashed {
                    // Statements after a crash do not run and leave no triple.
                    prop_assert_eq!(mid, &tr.post.to_bits());
                } else {
                    let end = post_of.get(&(ib, mid.clone())).expect("second part recorded");
                    prop_assert_eq!(end, &tr.post.to_bits());
                }
            }
        }
    }

    #[test]
    fn crashed_states_are_absorbing(t in program(), (spec, start) in world()) {
        let layout = spec.layout();
        for tr in extract_triples(&binarize(&t), &[(spec, start)], 300, usize::MAX) {
            let pre = decode_state(&tr.pre.0, &layout).unwrap();
            if pre.crashed {
                prop_assert_eq!(&tr.post, &tr.pre);
            }
        }
    }

    #[test]
    fn extraction_is_deterministic_and_capped(t in program(), (spec, start) in world(), cap in 1usize..4) {
        let worlds = [(spec, start)];
        let a = extract_triples(&binarize(&t), &worlds, 300, cap);
        prop_assert_eq!(&a, &extract_triples(&binarize(&t), &worlds, 300, cap));
        let mut per: BTreeMap<_, usize> = BTreeMap::new();
        for tr in &a {
            *per.entry(tr.subtree).or_default() += 1;
        }
        prop_assert!(per.values().all(|&c| c <= cap));
    }

    #[test]
    fn annotation_is_pure(t in program()) {
        for name in ["maze", "fetch", "midpoint"] {
            let task = bundled_task(name).unwrap();
            prop_assert_eq!(annotate(&t, &task), annotate(&t, &task));
        }
    }

    #[test]
    fn zipf_concentrates_mass(n in 100usize..3000) {
        let freqs: Vec<u64> = (1..=n).map(|r| zipf_frequency(r, n)).collect();
        let total: u64 = freqs.iter().sum();
        let top: u64 = freqs[..n.div_ceil(100)].iter().sum();
        prop_assert!(top as f64 >= 0.2 * total as f64);
    }

    #[test]
    fn block_softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 12)) {
        let blocks = [(0, 3), (3, 4), (7, 5)];
        let p = block_softmax(&x, &blocks).unwrap();
        for (off, n) in blocks {
            let s: f64 = p[off..off + n].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p[off..off + n].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn ridge_satisfies_normal_equations(seed in any::<u64>(), lambda in 1e-4f64..1.0) {
        let mut r = rng(seed);
        let x = Matrix64::random(4, 9, 1.0, &mut r);
        let y = Matrix64::random(3, 9, 1.0, &mut r);
        let w = ridge_regression(&x, &y, lambda).unwrap();
        prop_assert!(ridge_residual(&w, &x, &y, lambda) < 1e-8);
    }

    #[test]
    fn recall_is_monotone_in_precision(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 3), prop::collection::vec(any::<bool>(), 3), 1u64..20), 1..30),
        p1 in 0.0f64..1.0,
        p2 in 0.0f64..1.0,
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|r| r.0.clone()).collect();
        let truth: Vec<Vec<bool>> = rows.iter().map(|r| r.1.clone()).collect();
        let weights: Vec<u64> = rows.iter().map(|r| r.2).collect();
        for avg in [Averaging::Micro, Averaging::Macro] {
            let curve = pr_sweep(&probs, &truth, &weights, avg);
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            prop_assert!(curve.recall_at(hi).unwrap_or(0.0) <= curve.recall_at(lo).unwrap_or(0.0));
            for pt in &curve.points {
                prop_assert!((0.0..=1.0).contains(&pt.precision) && (0.0..=1.0).contains(&pt.recall));
            }
            prop_assert!(curve.points.windows(2).all(|w| w[0].threshold < w[1].threshold));
        }
    }

    #[test]
    fn kmeans_is_deterministic_and_descends(
        pts in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 4..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let a = kmeans(&pts, k, seed).unwrap();
        prop_assert_eq!(&a, &kmeans(&pts, k, seed).unwrap());
        prop_assert!(a.objective.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12));
        let mut reps = a.centroids.clone();
        reps.sort_unstable();
        reps.dedup();
        prop_assert_eq!(reps.len(), k);
        let freqs = vec![1u64; pts.len()];
        prop_assert_eq!(
            select_exemplars(&freqs, &pts, k, SelectionStrategy::RandomUniform, seed).unwrap(),
            select_exemplars(&freqs, &pts, k, SelectionStrategy::RandomUniform, seed).unwrap()
        );
    }

    #[test]
    fn edit_distance_is_a_metric(a in statement(), b in statement(), c in statement()) {
        let ab = tree_edit_distance(&a, &b);
        prop_assert_eq!(tree_edit_distance(&a, &a), 0);
        prop_assert_eq!(ab == 0, a == b);
        prop_assert_eq!(ab, tree_edit_distance(&b, &a));
        prop_assert!(tree_edit_distance(&a, &c) <= ab + tree_edit_distance(&b, &c));
    }

    #[test]
    fn zero_injection_matches_plain_tree(t in program(), seed in any::<u64>()) {
        let tree = binarize(&inline_calls(&t, 8));
        let mut forest = Forest::new();
        let root = forest.insert(&tree);
        let params = TreeParams64::new(4, 0.0, 0.3, &mut rng(seed));
        let empty = BTreeMap::new();
        let plain = tree_forward(&forest, &[root], &params, None).unwrap();
        let injected = tree_forward(&forest, &[root], &params, Some(&empty)).unwrap();
        prop_assert_eq!(plain.get(root).unwrap(), injected.get(root).unwrap());
    }
}
