use std::collections::{BTreeMap, BTreeSet};

use mli_core::ast::{dependency_graph, infer_value_types, validate, Statement};
use mli_core::augment::{self, AugmentationKind, AugmentationPolicy};
use mli_core::exec::{self, ExecError, DEFAULT_SOFT_DELTA_STD};
use mli_core::text::{self, fmt_num};
use mli_core::{programs, rng, Program, Slot};
use proptest::prelude::*;
use proptest::sample::select;

fn builtins() -> Vec<Program> {
    programs::builtin_programs().into_values().collect()
}

/// A valid program: a built-in, possibly pushed through a few random augmentations.
fn arb_program() -> impl Strategy<Value = Program> {
    (select(builtins()), any::<u64>(), any::<bool>()).prop_map(|(p, seed, aug)| {
        if aug {
            augment::random_augment(&p, &AugmentationPolicy::default(), seed)
        } else {
            p
        }
    })
}

fn six_digits(v: f64) -> f64 {
    fmt_num(v).parse().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statement_order_is_topological(p in arb_program()) {
        let g = dependency_graph(&p).unwrap();
        prop_assert!(g.topo_order().is_some());
        let position: BTreeMap<_, _> = p.declared().into_iter().enumerate().map(|(i, v)| (v, i)).collect();
        for (u, v) in &g.edges {
            prop_assert!(position[u] < position[v], "{u} -> {v}");
        }
    }

    #[test]
    fn valid_programs_never_hit_undefined_variables(p in arb_program(), seed in any::<u64>()) {
        prop_assert!(validate(&p).is_empty());
        match exec::run(&p, seed, None) {
            Ok(_) | Err(ExecError::Domain { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn value_type_inference_is_idempotent(p in arb_program()) {
        let once = infer_value_types(&p);
        prop_assert_eq!(infer_value_types(&once), once);
    }

    #[test]
    fn render_parse_round_trip(p in arb_program(), seed in any::<u64>(), k in prop::option::of(1usize..4), mask_bits in any::<u64>()) {
        let Ok(trace) = exec::run(&p, seed, k) else { return Ok(()) };
        let slots: Vec<Slot> = trace.values.keys().cloned().collect();
        let masks: BTreeSet<Slot> = slots.iter().enumerate().filter(|(i, _)| mask_bits >> (i % 64) & 1 == 1).map(|(_, s)| s.clone()).collect();
        let listing = text::render(&p, &trace, &masks).unwrap();
        prop_assert_eq!(&listing, &text::render(&p, &trace, &masks).unwrap());
        let parsed = text::parse(&listing).unwrap();
        prop_assert_eq!(&parsed.program.statements, &p.statements);
        prop_assert_eq!(&parsed.trace.masked, &masks);
        for s in &slots {
            let want = if masks.contains(s) { None } else { Some(six_digits(trace.get(s).unwrap())) };
            prop_assert_eq!(parsed.trace.get(s), want, "{}", s);
        }
        prop_assert_eq!(parsed.trace.values.len() + masks.len(), slots.len());
        // a second pass is bit-exact
        let again = text::render(&parsed.program, &parsed.trace, &masks).unwrap();
        prop_assert_eq!(again, listing);
    }

    #[test]
    fn executed_traces_have_finite_log_joint(p in arb_program(), seed in any::<u64>()) {
        if let Ok(t) = exec::run(&p, seed, None) {
            prop_assert!(exec::log_joint(&p, &t, DEFAULT_SOFT_DELTA_STD).unwrap().is_finite());
        }
    }

    #[test]
    fn line_swaps_keep_the_graph_and_the_joint(p in select(builtins()), seed in any::<u64>(), run_seed in any::<u64>()) {
        let Some(q) = augment::apply(&p, AugmentationKind::LineSwap, seed).unwrap() else { return Ok(()) };
        prop_assert_eq!(dependency_graph(&q).unwrap(), dependency_graph(&p).unwrap());
        let Ok(t) = exec::run(&p, run_seed, None) else { return Ok(()) };
        let a = exec::log_joint(&p, &t, DEFAULT_SOFT_DELTA_STD).unwrap();
        let b = exec::log_joint(&q, &t, DEFAULT_SOFT_DELTA_STD).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn augmentations_respect_variable_sets(p in select(programs::toy_programs()), kind in select(AugmentationKind::ALL.to_vec()), seed in any::<u64>()) {
        let Some(q) = augment::apply(&p, kind, seed).unwrap() else { return Ok(()) };
        prop_assert!(validate(&q).is_empty());
        let before: BTreeSet<_> = p.declared().into_iter().collect();
        let after: BTreeSet<_> = q.declared().into_iter().collect();
        match kind {
            AugmentationKind::FuzzFunction | AugmentationKind::FuzzConstant | AugmentationKind::LineSwap => prop_assert_eq!(after, before),
            AugmentationKind::CutAndGlue => prop_assert!(after.is_subset(&before)),
            AugmentationKind::CreateAndUse => {
                prop_assert!(before.is_subset(&after));
                prop_assert_eq!(after.len(), before.len() + 1);
            }
        }
    }

    #[test]
    fn accepted_augmentations_execute(p in select(programs::toy_programs()), seed in any::<u64>()) {
        let q = augment::random_augment(&p, &AugmentationPolicy::default(), seed);
        let reparsed = text::parse_program(&text::render_program(&q)).unwrap();
        prop_assert_eq!(&reparsed.statements, &q.statements);
        prop_assert!(validate(&reparsed).is_empty());
        prop_assert!((0..8).any(|t| exec::run(&reparsed, rng::derive(seed, "fresh", t), None).is_ok()));
    }
}

/// Every k-subset of the plate, scaled by n/k, averages to the full in-plate sum.
#[test]
fn plate_scaling_is_unbiased_over_all_subsets() {
    let p = text::parse_program("m ~ gaussian(0, 1)\nplate(5):\n  x[i] ~ gaussian(m, 2)\n  y[i] = x[i] * 3\n").unwrap();
    let full = exec::run(&p, 11, None).unwrap();
    let outside = {
        let lone = Program::new("outside", p.statements.iter().filter(|s| matches!(s, Statement::Assign(_))).cloned().collect());
        exec::log_joint(&lone, &full, DEFAULT_SOFT_DELTA_STD).unwrap()
    };
    let whole = exec::log_joint(&p, &full, DEFAULT_SOFT_DELTA_STD).unwrap() - outside;
    for k in 1..=5 {
        let subsets: Vec<Vec<usize>> = (0u32..32).filter(|m| m.count_ones() as usize == k).map(|m| (1..=5).filter(|i| m >> (i - 1) & 1 == 1).collect()).collect();
        let mut total = 0.0;
        for s in &subsets {
            let t = mli_core::infer::restrict_members(&p, &full, s);
            total += exec::log_joint_plated(&p, &t, DEFAULT_SOFT_DELTA_STD).unwrap() - outside;
        }
        let avg = total / subsets.len() as f64;
        assert!((avg - whole).abs() < 1e-9 * whole.abs().max(1.0), "k={k}: {avg} vs {whole}");
    }
}

#[test]
fn standard_normal_sample_mean() {
    let p = text::parse_program("x ~ gaussian(0, 1)").unwrap();
    let n = 100_000;
    let sum: f64 = (0..n).map(|s| exec::run(&p, rng::derive(17, "mc", s), None).unwrap().get(&Slot::top("x")).unwrap()).sum();
    assert!((sum / n as f64).abs() < 0.02);
}
