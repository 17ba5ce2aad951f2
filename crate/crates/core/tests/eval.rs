use mli_core::eval::*;
use mli_core::exec::{self, DEFAULT_SOFT_DELTA_STD};
use mli_core::nn::{ModelConfig, Posterior};
use mli_core::text::parse;
use mli_core::{programs, rng, Model, Slot};
use rand_distr::{Distribution, Normal};

const TWO_BERNOULLI: &str = "a ~ bernoulli(0.5)\nb ~ bernoulli(if (a == 1) 0.75 else 0.25) -> 1\n";

/// p(a = 1 | b = 1) by enumerating the four outcomes of the joint table of
/// `TWO_BERNOULLI`, written out by hand.
fn enumerate_conditional() -> f64 {
    let p_a = [0.5, 0.5];
    let p_b1_given_a = [0.25, 0.75];
    let mut joint = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            joint[a][b] = p_a[a] * if b == 1 { p_b1_given_a[a] } else { 1.0 - p_b1_given_a[a] };
        }
    }
    assert_eq!(joint.iter().flatten().sum::<f64>(), 1.0);
    joint[1][1] / (joint[0][1] + joint[1][1])
}

#[test]
fn exact_discrete_conditional_has_zero_iw_variance() {
    let p1 = enumerate_conditional();
    let parsed = parse(TWO_BERNOULLI).unwrap();
    let q = [Posterior::Bernoulli { p: p1 }];
    let mut r = rng::stream(1, "test", 0);
    let rep = log_iw_with(&parsed.program, &parsed.trace, &[Slot::top("a")], &q, 64, &mut r, DEFAULT_SOFT_DELTA_STD).unwrap();
    assert_eq!(rep.log_zero, 0);
    assert!(!rep.degenerate);
    assert_eq!(rep.variance, 0.0);
}

#[test]
fn conjugate_gaussian_variance_is_tiny_and_wrong_q_is_worse() {
    let parsed = parse("z ~ gaussian(0, 1)\nx ~ gaussian(z, 1) -> 1.4\n").unwrap();
    let latents = [Slot::top("z")];
    let exact = [Posterior::Gaussian { mean: 0.7, std: 0.5f64.sqrt() }];
    let wrong = [Posterior::Gaussian { mean: 0.7 + 10.0 * 0.5f64.sqrt(), std: 0.5f64.sqrt() }];
    let mut r = rng::stream(2, "test", 0);
    let good = log_iw_with(&parsed.program, &parsed.trace, &latents, &exact, 64, &mut r, DEFAULT_SOFT_DELTA_STD).unwrap();
    let bad = log_iw_with(&parsed.program, &parsed.trace, &latents, &wrong, 64, &mut r, DEFAULT_SOFT_DELTA_STD).unwrap();
    assert!(good.variance < 1e-3, "{}", good.variance);
    assert!(bad.variance > good.variance);
}

#[test]
fn two_state_prior_mh_matches_enumeration() {
    let parsed = parse(TWO_BERNOULLI).unwrap();
    let target = enumerate_conditional();
    let cfg = MhConfig {
        chains: 2,
        steps: 100_000,
        burn_in: 100,
        proposal: ProposalKind::Prior,
        seed: 7,
        ..Default::default()
    };
    let r = mh_sample(&parsed.program, &parsed.trace, &[Slot::top("a")], &Proposal::Prior, &cfg).unwrap();
    for chain in &r.samples {
        let freq = chain[0].iter().sum::<f64>() / chain[0].len() as f64;
        assert!((freq - target).abs() < 0.02, "{freq} vs {target}");
    }
}

#[test]
fn r_hat_of_iid_chains_is_near_one() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut hits = 0;
    for trial in 0..20 {
        let mut r = rng::stream(3, "r-hat", trial);
        let chains: Vec<Vec<f64>> = (0..4).map(|_| (0..2000).map(|_| normal.sample(&mut r)).collect()).collect();
        let rh = r_hat(&chains).unwrap();
        assert!(rh > 0.99, "{rh}");
        if (0.995..=1.02).contains(&rh) {
            hits += 1;
        }
    }
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn ks_rejects_shift_and_bonferroni_summary() {
    let mut r = rng::stream(4, "ks", 0);
    let n0 = Normal::new(0.0, 1.0).unwrap();
    let n1 = Normal::new(0.5, 1.0).unwrap();
    let a: Vec<f64> = (0..2000).map(|_| n0.sample(&mut r)).collect();
    let b: Vec<f64> = (0..2000).map(|_| n0.sample(&mut r)).collect();
    let c: Vec<f64> = (0..2000).map(|_| n1.sample(&mut r)).collect();
    assert!(ks_two_sample(&a, &c).unwrap().1 < 1e-3);
    let (per, summary) = ks_per_dimension(&[a.clone(), a.clone()], &[b.clone(), c.clone()]).unwrap();
    assert_eq!(per.len(), 2);
    assert!((summary - (2.0 * per[1].1).min(1.0)).abs() < 1e-15);
    assert!(ks_per_dimension(&[a], &[]).is_err());
}

#[test]
fn heatmaps_have_expected_shape() {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        max_len: 128,
    };
    let m = Model::init(&cfg, 0).unwrap();

    let p = programs::independent_gaussians();
    let t = exec::run(&p, 5, None).unwrap();
    let wanted = ["y1", "y2", "z1", "z2"];
    let pats: Vec<HeatmapPattern> = mask_each(&p, &t).into_iter().filter(|x| wanted.contains(&x.focus.name.as_str())).collect();
    let h = attention_heatmap(&m, &p, &t, &pats).unwrap();
    assert_eq!(h.rows.len(), 4);
    assert!(h.cols.len() >= 4);
    for row in &h.matrix {
        assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
    }
    let tsv = h.to_tsv();
    assert_eq!(tsv.lines().count(), 5);
    assert!(tsv.lines().all(|l| l.split('\t').count() == h.cols.len() + 1));

    let p = programs::common_effect();
    let t = exec::run(&p, 5, None).unwrap();
    let sets = vec![vec![Slot::top("z")], vec![Slot::top("z"), Slot::top("y")]];
    let pats = observed_sets(&p, &t, &Slot::top("x"), &sets);
    let h = attention_heatmap(&m, &p, &t, &pats).unwrap();
    assert_eq!(h.rows, ["observe z", "observe z y"]);
}

#[test]
fn single_instance_log_posterior_is_that_instance() {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        max_len: 128,
    };
    let m = Model::init(&cfg, 0).unwrap();
    let opts = mli_core::dataset::CorpusOptions {
        n_per_program: 1,
        dev_per_program: 1,
        test_per_program: 1,
        ..Default::default()
    };
    let c = mli_core::dataset::build_corpus(&[programs::latent()], None, 3, &opts).unwrap();
    let rep = eval_log_posterior(&m, &c.test).unwrap();
    assert_eq!(rep.per_instance.len(), 1);
    assert_eq!(rep.mean, rep.per_instance[0]);
    // untrained heads output N(0, 1) and Bernoulli(0.5)
    let ex = &c.test[0];
    let stored = ex.stored(0.0);
    let oracle: f64 = stored
        .inf_targets
        .iter()
        .map(|t| match t.value_type {
            mli_core::ast::ValueType::Binary => 0.5f64.ln(),
            _ => -0.5 * t.value * t.value - 0.5 * (2.0 * std::f64::consts::PI).ln(),
        })
        .sum::<f64>()
        / stored.inf_targets.len() as f64;
    assert!((rep.mean - oracle).abs() < 1e-4 * oracle.abs().max(1.0), "{} vs {oracle}", rep.mean);
}

#[test]
fn mh_model_proposal_runs_on_latent_program() {
    let cfg = ModelConfig {
        d_model: 16,
        layers: 1,
        heads: 2,
        ff_mult: 2,
        max_len: 128,
    };
    let m = Model::init(&cfg, 0).unwrap();
    let p = programs::latent();
    let t = exec::run(&p, 9, None).unwrap();
    let samples: Vec<Slot> = p.instances(None).into_iter().filter(|(_, a)| a.is_sample()).map(|(s, _)| s).take(2).collect();
    let (obs, lat, dep) = mh_query(&p, &t, &samples).unwrap();
    let prop = model_proposal(&m, &p, &obs, &lat, &dep).unwrap();
    let mh = MhConfig {
        chains: 3,
        steps: 200,
        ..Default::default()
    };
    let r = mh_sample(&p, &obs, &lat, &prop, &mh).unwrap();
    assert_eq!(r.samples.len(), 3);
    assert!(r.samples.iter().all(|c| c.len() == lat.len() && c.iter().all(|s| s.len() == 200)));
    let again = mh_sample(&p, &obs, &lat, &prop, &mh).unwrap();
    assert_eq!(r, again);
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-1e3f64..1e3, 10..60)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn ks_statistic_is_a_distance(a in sample(), b in sample()) {
            let (d, p) = ks_two_sample(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert_eq!(ks_two_sample(&a, &a).unwrap().0, 0.0);
        }

        #[test]
        fn ks_p_falls_as_d_grows(n in 10usize..40, m in 10usize..40, seeds in any::<(u64, u64)>(), shift in 0.0f64..3.0) {
            let normal = Normal::new(0.0, 1.0).unwrap();
            let draw = |seed: u64, len: usize, mu: f64| -> Vec<f64> {
                let mut r = rng::stream(seed, "ks-prop", 0);
                (0..len).map(|_| mu + normal.sample(&mut r)).collect()
            };
            let (d1, p1) = ks_two_sample(&draw(seeds.0, n, 0.0), &draw(seeds.1, m, 0.0)).unwrap();
            let (d2, p2) = ks_two_sample(&draw(seeds.0, n, 0.0), &draw(seeds.1, m, shift)).unwrap();
            if d1 < d2 {
                prop_assert!(p1 >= p2, "D {d1} -> {d2} but p {p1} -> {p2}");
            } else if d1 > d2 {
                prop_assert!(p1 <= p2);
            }
        }

        #[test]
        fn kolmogorov_survival_is_monotone(a in 0.0f64..4.0, b in 0.0f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(kolmogorov_survival(lo) >= kolmogorov_survival(hi));
        }

        #[test]
        fn r_hat_is_at_least_one_minus_epsilon(chains in prop::collection::vec(prop::collection::vec(-1e2f64..1e2, 8..40), 2..6)) {
            let len = chains.iter().map(Vec::len).min().unwrap();
            let chains: Vec<Vec<f64>> = chains.into_iter().map(|c| c[..len].to_vec()).collect();
            match r_hat(&chains) {
                Ok(rh) => {
                    // V ≥ W(n'−1)/n' with n' = len/2 draws per split chain
                    let half = (len / 2) as f64;
                    prop_assert!(rh >= ((half - 1.0) / half).sqrt() - 1e-12, "{rh}");
                }
                Err(EvalError::ZeroWithinVariance) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn exact_posterior_proposal_accepts_every_move() {
        // conjugate pair: z | x = 1.4 is N(0.7, 1/2)
        let parsed = parse("z ~ gaussian(0, 1)\nx ~ gaussian(z, 1) -> 1.4\n").unwrap();
        let q = Posterior::Gaussian { mean: 0.7, std: 0.5f64.sqrt() };
        let proposal = Proposal::Posterior([(Slot::top("z"), q)].into_iter().collect());
        let cfg = MhConfig {
            chains: 2,
            steps: 500,
            ..Default::default()
        };
        let r = mh_sample(&parsed.program, &parsed.trace, &[Slot::top("z")], &proposal, &cfg).unwrap();
        assert!(r.acceptance.iter().all(|&a| (a - 1.0).abs() < 1e-12), "{:?}", r.acceptance);
    }
}
