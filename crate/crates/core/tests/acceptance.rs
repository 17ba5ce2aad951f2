//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines always reach the
//! test output. Criteria that need trained models share them; sizes are set in
//! the `*_RUN` constants below.

use std::collections::BTreeSet;
use std::time::Instant;

use mli_core::ast::{dependency_graph, Family, Rhs};
use mli_core::augment::{self, AugmentationKind, AugmentationPolicy};
use mli_core::dataset::{build_corpus, Corpus, CorpusOptions, Example};
use mli_core::eval::{self, Proposal};
use mli_core::exec::{self, Trace, DEFAULT_SOFT_DELTA_STD};
use mli_core::infer::{self, InferenceQuery, SviConfig, SviObservation};
use mli_core::nn::{ModelConfig, Posterior};
use mli_core::text::{self, parse};
use mli_core::train::{self, mli_loss, mli_loss_value, TrainConfig};
use mli_core::{programs, rng, Model, Model64, Program, Slot};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

struct TrainRun {
    n: usize,
    test: usize,
    epochs: usize,
    d_model: usize,
    layers: usize,
    warmup: u64,
    minibatch_k: Option<usize>,
}

const DESK_HEADS: usize = 4;

const GAUSSIANS_RUN: TrainRun = TrainRun {
    n: 10_000,
    test: 200,
    epochs: 20,
    d_model: 32,
    layers: 2,
    warmup: 300,
    minibatch_k: None,
};

const LATENT_RUN: TrainRun = TrainRun {
    n: 5_000,
    test: 100,
    epochs: 10,
    d_model: 32,
    layers: 2,
    warmup: 300,
    minibatch_k: None,
};

const IRT_RUN: TrainRun = TrainRun {
    n: 5_000,
    test: 0,
    epochs: 4,
    d_model: 32,
    layers: 2,
    warmup: 100,
    minibatch_k: Some(2),
};

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
    seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    let o = Outcome {
        name,
        pass,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    };
    println!("{} {:<22} {} [{:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail, o.seconds);
    o
}

fn desk_config(run: &TrainRun) -> ModelConfig {
    ModelConfig {
        d_model: run.d_model,
        layers: run.layers,
        heads: DESK_HEADS,
        ff_mult: 4,
        max_len: 256,
    }
}

fn corpus_for(program: &Program, run: &TrainRun, seed: u64) -> Corpus {
    let opts = CorpusOptions {
        n_per_program: run.n,
        dev_per_program: 200,
        test_per_program: run.test,
        minibatch_k: run.minibatch_k,
        ..Default::default()
    };
    build_corpus(std::slice::from_ref(program), None, seed, &opts).expect("corpus builds")
}

fn train_model(init: Model, corpus: &Corpus, run: &TrainRun, seed: u64, mlm: bool) -> Model {
    let cfg = TrainConfig {
        epochs: run.epochs,
        warmup_steps: run.warmup,
        mlm_enabled: mlm,
        seed,
        ..Default::default()
    };
    train::train(init, &corpus.train, &corpus.dev, &cfg, None).expect("training runs").best
}

fn sci(xs: &[f64]) -> String {
    let v: Vec<String> = xs.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", v.join(", "))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// gradient exactness

fn gradient_exactness() -> (bool, String) {
    let cfg = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_mult: 4,
        max_len: 16,
    };
    let mut params = Model64::init(&cfg, 11).unwrap();
    // move every tensor (heads included) away from its structured init
    let mut r = rng::stream(11, "gradcheck", 0);
    for t in params.tensors.iter_mut() {
        t.mapv_inplace(|v| v + 0.3 * r.sample::<f64, _>(StandardNormal));
    }
    let mut batch = Vec::new();
    for (i, src) in ["z ~ gaussian(0, 1)", "b ~ bernoulli(0.3)", "u ~ uniform(-2, 3)"].iter().enumerate() {
        let p = parse(src).unwrap().program;
        let t = exec::run(&p, i as u64, None).unwrap();
        let ex = Example::from_trace(&p, &t, "gradcheck", i as u64, 16).unwrap();
        let mut inst = ex.instance(&[0], 0.5, &mut r);
        while inst.mlm_targets.is_empty() {
            inst = ex.instance(&[0], 0.5, &mut r);
        }
        batch.push(inst);
    }
    let tc = TrainConfig::default();
    let (m, grads) = mli_loss(&params, &batch, &tc).unwrap();
    let h = 1e-5;
    let mut worst_tensor = 0.0f64;
    let mut worst_elem = 0.0f64;
    let mut worst_name = String::new();
    for ti in 0..params.tensors.len() {
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        let shape = params.tensors[ti].dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = params.tensors[ti][[i, j]];
                params.tensors[ti][[i, j]] = orig + h;
                let up = mli_loss_value(&params, &batch, &tc).unwrap().loss;
                params.tensors[ti][[i, j]] = orig - h;
                let down = mli_loss_value(&params, &batch, &tc).unwrap().loss;
                params.tensors[ti][[i, j]] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads[ti][[i, j]];
                diff2 += (g - fd).powi(2);
                norm2 += g.powi(2).max(fd.powi(2));
                // elementwise, with a floor at the finite-difference noise level
                let e = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-5);
                worst_elem = worst_elem.max(e);
            }
        }
        let rel = if norm2 > 0.0 { (diff2 / norm2).sqrt() } else { diff2.sqrt() };
        if rel > worst_tensor {
            worst_tensor = rel;
            worst_name = params.names[ti].clone();
        }
    }
    let pass = worst_tensor < 1e-4 && worst_elem < 1e-4;
    (
        pass,
        format!(
            "{} tensors, {} mlm + {} inf targets: max tensor rel err {worst_tensor:.2e} ({worst_name}), max elementwise {worst_elem:.2e} (< 1e-4)",
            params.tensors.len(),
            m.n_mlm,
            m.n_inf
        ),
    )
}

// ---------------------------------------------------------------------------
// plating

fn plating_unbiased() -> (bool, String) {
    let p = parse("mu ~ gaussian(0, 3)\ns ~ uniform(0.5, 2)\nplate(5):\n  x[i] ~ gaussian(mu, s)\n  y[i] = x[i] * 2").unwrap().program;
    let full = exec::run(&p, 5, None).unwrap();
    let inside = |members: &[usize]| -> f64 {
        let t = infer::restrict_members(&p, &full, members);
        let outside = exec::joint_terms::<f64, _>(&p, Some(&[]), &|s| full.get(s), DEFAULT_SOFT_DELTA_STD).unwrap().unwrap().outside;
        exec::log_joint_plated(&p, &t, DEFAULT_SOFT_DELTA_STD).unwrap() - outside
    };
    let all = inside(&[1, 2, 3, 4, 5]);
    let mut terms = Vec::new();
    for a in 1..=5 {
        for b in a + 1..=5 {
            terms.push(inside(&[a, b]));
        }
    }
    let avg = mean(&terms);
    let err = (avg - all).abs();
    (terms.len() == 10 && err < 1e-10, format!("{} minibatches, |mean − full| = {err:.2e} (< 1e-10)", terms.len()))
}

// ---------------------------------------------------------------------------
// product of experts

fn product_of_experts() -> (bool, String) {
    let a = Posterior::Gaussian { mean: 0.0, std: 1.0 };
    let b = Posterior::Gaussian { mean: 2.0, std: 1.0 };
    let c = infer::product_of_experts(&[a, b]).unwrap();
    let (lo, hi, n) = (-12.0, 14.0, 260_001);
    let step = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let grid: Vec<f64> = xs.iter().map(|&x| (a.log_prob(x) + b.log_prob(x)).exp()).collect();
    let poe: Vec<f64> = xs.iter().map(|&x| c.log_prob(x).exp()).collect();
    let (zg, zp) = (grid.iter().sum::<f64>(), poe.iter().sum::<f64>());
    let tv = 0.5 * grid.iter().zip(&poe).map(|(g, p)| (g / zg - p / zp).abs()).sum::<f64>();
    (tv < 1e-6, format!("N(0,1)·N(2,1) -> {c:?}; TV vs grid {tv:.2e} (< 1e-6)"))
}

// ---------------------------------------------------------------------------
// augmentation soundness

fn augmentation_soundness() -> (bool, String) {
    let toys = programs::toy_programs();
    let policy = AugmentationPolicy::default();
    let mut bad = Vec::new();
    let mut fell_back = 0;
    let mut first_run_errors = 0;
    for i in 0..1000u64 {
        let src = &toys[i as usize % toys.len()];
        let o = augment::random_augment_traced(src, &policy, rng::derive(1, "acceptance-augment", i));
        fell_back += o.fell_back as usize;
        let listing = text::render_program(&o.program);
        // Executes: completes an ancestral run on fresh seeds, unrelated to the augmentor's trial seeds.
        // Programs whose domain errors are merely likely can pass the trials, so a single
        // fresh run is not guaranteed; those are counted separately.
        let ok = match text::parse_program(&listing) {
            Ok(reparsed) => {
                let runs: Vec<bool> = (0..policy.trial_executions as u64)
                    .map(|t| exec::run(&reparsed, rng::derive(3, "acceptance-exec", i * 64 + t), None).is_ok())
                    .collect();
                first_run_errors += !runs[0] as usize;
                mli_core::ast::validate(&reparsed).is_empty() && reparsed.statements == o.program.statements && runs.contains(&true)
            }
            Err(_) => false,
        };
        if !ok {
            bad.push(i);
        }
    }
    let mut swaps = 0;
    let mut broken_swaps = 0;
    for i in 0..1000u64 {
        let src = &toys[i as usize % toys.len()];
        if let Ok(Some(p)) = augment::apply(src, AugmentationKind::LineSwap, rng::derive(2, "acceptance-swap", i)) {
            if augment::accept(&p, 3, i) {
                swaps += 1;
                if dependency_graph(&p).ok() != dependency_graph(src).ok() {
                    broken_swaps += 1;
                }
            }
        }
    }
    (
        bad.is_empty() && broken_swaps == 0 && swaps > 0,
        format!("1000 outputs: {} failed parse/validate/execute ({fell_back} fell back to source, {first_run_errors} hit a domain error on their first fresh run); {swaps} accepted line swaps, {broken_swaps} changed the graph", bad.len()),
    )
}

// ---------------------------------------------------------------------------
// trainability

fn trainability() -> (bool, String) {
    let run = &GAUSSIANS_RUN;
    let p = programs::independent_gaussians();
    let corpus = corpus_for(&p, run, 5);
    let init = Model::init(&desk_config(run), rng::derive(5, "model-init", 0)).unwrap();
    let before = eval::eval_log_posterior(&init, &corpus.test).unwrap().mean;
    let model = train_model(init, &corpus, run, 5, true);
    let after = eval::eval_log_posterior(&model, &corpus.test).unwrap().mean;
    let mut hits = 0;
    for i in 0..200u64 {
        let t = exec::run(&p, rng::derive(5, "z2-check", i), None).unwrap();
        let q = InferenceQuery::from_trace(&p, &t, &[Slot::top("z2")]);
        let post = infer::zero_shot_list(&model, &q).unwrap();
        if (post[0].mean() - 2.0 * t.get(&Slot::top("z1")).unwrap()).abs() < 0.1 {
            hits += 1;
        }
    }
    let gain = after - before;
    (
        gain >= 2.0 && hits >= 180,
        format!("{} instances x {} epochs: held-out log q {before:.3} -> {after:.3} (gain {gain:.2} >= 2); z2 within 0.1 of 2·z1 on {hits}/200 (>= 180)", run.n, run.epochs),
    )
}

// ---------------------------------------------------------------------------
// latent-program models shared by the ablation, finetuning and MH checks

struct LatentModels {
    corpus: Corpus,
    with_mlm: Vec<Model>,
    without_mlm: Vec<Model>,
}

fn latent_models() -> LatentModels {
    let run = &LATENT_RUN;
    let p = programs::latent();
    let corpus = corpus_for(&p, run, 6);
    let mut with_mlm = Vec::new();
    let mut without_mlm = Vec::new();
    for seed in 0..3u64 {
        let init = Model::init(&desk_config(run), rng::derive(seed, "model-init", 0)).unwrap();
        with_mlm.push(train_model(init.clone(), &corpus, run, seed, true));
        without_mlm.push(train_model(init, &corpus, run, seed, false));
    }
    LatentModels { corpus, with_mlm, without_mlm }
}

fn mean_var_log_iw(model: &Model, test: &[Example], seed: u64) -> (f64, usize) {
    let reps = eval::var_log_iw_corpus(model, test, 64, seed).unwrap();
    let v: Vec<f64> = reps.iter().filter(|r| !r.degenerate).map(|r| r.variance).collect();
    (mean(&v), reps.len() - v.len())
}

fn mlm_ablation(m: &LatentModels) -> (bool, String) {
    let mut with = Vec::new();
    let mut without = Vec::new();
    let mut degenerate = 0;
    for s in 0..3 {
        let (a, da) = mean_var_log_iw(&m.with_mlm[s], &m.corpus.test, 60 + s as u64);
        let (b, db) = mean_var_log_iw(&m.without_mlm[s], &m.corpus.test, 60 + s as u64);
        with.push(a);
        without.push(b);
        degenerate += da + db;
    }
    let (a, b) = (mean(&with), mean(&without));
    (
        a <= b,
        format!("mean var log IW over 3 seeds: MLM {a:.4e} <= no MLM {b:.4e} (per seed {} vs {}; {degenerate} degenerate reports excluded)", sci(&with), sci(&without)),
    )
}

/// Sample statements whose family has unbounded support; proposals drawn from
/// a Gaussian never leave it.
fn gaussian_samples(p: &Program, t: &Trace) -> Vec<Slot> {
    p.instances(t.members())
        .into_iter()
        .filter(|(_, a)| matches!(a.rhs, Rhs::Sample { family: Family::Gaussian, .. }))
        .map(|(s, _)| s)
        .collect()
}

/// Reparameterised draws per SVI step. With one draw the noise in 50-step
/// block means of the ELBO is larger than its change over 200 steps.
const SVI_SAMPLES: usize = 16;

fn svi_finetuning(m: &LatentModels) -> (bool, String) {
    let model = &m.with_mlm[0];
    let base = programs::latent();
    let policy = AugmentationPolicy::default();
    let mut chosen = None;
    for i in 0..200u64 {
        let o = augment::random_augment_traced(&base, &policy, rng::derive(7, "heldout-program", i));
        if o.fell_back || o.program.statements == base.statements {
            continue;
        }
        let Ok(t) = exec::run(&o.program, 0, None) else { continue };
        if !gaussian_samples(&o.program, &t).is_empty() {
            chosen = Some((o.program, o.applied));
            break;
        }
    }
    let Some((program, applied)) = chosen else {
        return (false, "no usable augmented program".into());
    };
    let mut r = rng::stream(7, "svi-masks", 0);
    let mut data = Vec::new();
    let mut truth = Vec::new();
    for i in 0..20u64 {
        let t = exec::run(&program, rng::derive(7, "svi-obs", i), None).unwrap();
        let cands = gaussian_samples(&program, &t);
        let mut latents: Vec<Slot> = cands.iter().filter(|_| r.gen::<f64>() < 0.5).cloned().collect();
        if latents.is_empty() {
            latents.push(cands[r.gen_range(0..cands.len())].clone());
        }
        // deterministic dependents of the latents are hidden too and recomputed
        let (_, latents, dependents) = eval::mh_query(&program, &t, &latents).unwrap();
        truth.push(latents.iter().map(|l| t.get(l).unwrap()).collect::<Vec<_>>());
        let mut all = latents;
        all.extend(dependents);
        let q = InferenceQuery::from_trace(&program, &t, &all);
        data.push(SviObservation {
            observed: q.observed,
            latents: all,
        });
    }
    let score = |model: &Model| -> f64 {
        let per: Vec<f64> = data
            .iter()
            .zip(&truth)
            .map(|(d, z)| {
                let q = InferenceQuery::new(program.clone(), d.observed.clone(), d.latents.clone());
                let post = infer::zero_shot_list(model, &q).unwrap();
                mean(&post.iter().take(z.len()).zip(z).map(|(p, &v)| p.log_prob(v)).collect::<Vec<_>>())
            })
            .collect();
        mean(&per)
    };
    let zero_shot = score(model);
    let cfg = SviConfig {
        steps: 200,
        samples_per_step: SVI_SAMPLES,
        seed: 7,
        ..Default::default()
    };
    let (tuned, elbo) = match infer::svi_finetune(model, &program, &data, &cfg) {
        Ok(x) => x,
        Err(e) => return (false, format!("finetuning failed: {e}")),
    };
    let finetuned = score(&tuned);
    let blocks: Vec<f64> = elbo.chunks(50).map(|c| mean(&c.iter().map(|r| r.elbo).collect::<Vec<_>>())).collect();
    let monotone = blocks.windows(2).all(|w| w[1] >= w[0]);
    (
        finetuned > zero_shot && monotone,
        format!(
            "program `{}` ({applied:?}), 20 observations, {SVI_SAMPLES} draws per step: log q zero-shot {zero_shot:.3} -> finetuned {finetuned:.3}; ELBO 50-step block means {blocks:.2?} non-decreasing: {monotone}",
            program.name
        ),
    )
}

fn mh_r_hat(m: &LatentModels) -> (bool, String) {
    let model = &m.with_mlm[0];
    let p = programs::latent();
    let mut model_r = Vec::new();
    let mut prior_r = Vec::new();
    let mut undefined = [0usize; 2];
    let mut used = 0;
    for (i, ex) in m.corpus.test.iter().enumerate() {
        if used == 50 {
            break;
        }
        let (_, trace) = ex.program_and_trace().unwrap();
        let (observed, latents, dependents) = eval::mh_query(&p, &trace, &ex.stored_latents()).unwrap();
        if latents.is_empty() {
            continue;
        }
        used += 1;
        let cfg = eval::MhConfig {
            chains: 10,
            steps: 1000,
            seed: rng::derive(9, "mh", i as u64),
            ..Default::default()
        };
        let proposals = [eval::model_proposal(model, &p, &observed, &latents, &dependents).unwrap(), Proposal::Prior];
        for (k, prop) in proposals.iter().enumerate() {
            let r = eval::mh_sample(&p, &observed, &latents, prop, &cfg).unwrap();
            match r.r_hat_max() {
                Some(v) => [&mut model_r, &mut prior_r][k].push(v),
                None => undefined[k] += 1,
            }
        }
    }
    let (a, b) = (mean(&model_r), mean(&prior_r));
    (
        used == 50 && a < b && a < 1.05,
        format!(
            "{used} instances, 10 chains x 1000 steps: mean split R-hat model {a:.4} < prior {b:.4}, model < 1.05 (undefined: model {}, prior {})",
            undefined[0], undefined[1]
        ),
    )
}

// ---------------------------------------------------------------------------
// IRT

fn irt_ordering() -> (bool, String) {
    let run = &IRT_RUN;
    let p = programs::irt();
    let corpus = corpus_for(&p, run, 8);
    let init = Model::init(&desk_config(run), rng::derive(8, "model-init", 0)).unwrap();
    let model = train_model(init, &corpus, run, 8, true);
    let ability = Slot::top("ability");
    let latents = [ability.clone()];
    let (mut zs, mut poe, mut ft, mut corrected) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..20u64 {
        let t = exec::run(&p, rng::derive(8, "irt-heldout", i), None).unwrap();
        let truth = t.get(&ability).unwrap();
        let q = InferenceQuery::from_trace(&p, &t, &latents);
        let res = infer::poe_zero_shot(&model, &p, &q.observed, &latents, 2, 10, rng::derive(8, "irt-poe", i)).unwrap();
        zs.push(mean(&res.experts.iter().map(|e| e[&ability].log_prob(truth)).collect::<Vec<_>>()));
        poe.push(res.combined[&ability].log_prob(truth));
        // Diagnostic only: every expert already contains the N(0, 1) prior, so
        // the plain product counts it R times. Dividing R - 1 copies back out
        // gives the combination of independent minibatch posteriors.
        if let Posterior::Gaussian { mean: m, std: s } = res.combined[&ability] {
            let prec = 1.0 / (s * s) - (res.experts.len() - 1) as f64;
            if prec > 0.0 {
                let mu = m / (s * s) / prec;
                corrected.push(Posterior::Gaussian { mean: mu, std: prec.powf(-0.5) }.log_prob(truth));
            }
        }
        let cfg = SviConfig {
            steps: 200,
            minibatch_k: Some(2),
            seed: rng::derive(8, "irt-svi", i),
            ..Default::default()
        };
        let data = [SviObservation {
            observed: q.observed.clone(),
            latents: latents.to_vec(),
        }];
        let (tuned, _) = infer::svi_finetune(&model, &p, &data, &cfg).unwrap();
        let per_mb: Vec<f64> = res
            .minibatches
            .iter()
            .map(|mb| {
                let qq = InferenceQuery::new(p.clone(), infer::restrict_members(&p, &q.observed, mb), latents.to_vec());
                infer::zero_shot_list(&tuned, &qq).unwrap()[0].log_prob(truth)
            })
            .collect();
        ft.push(mean(&per_mb));
    }
    let (a, b, c) = (mean(&ft), mean(&poe), mean(&zs));
    (
        a > b && b > c,
        format!(
            "20 held-out programs, k=2: mean log p(ability) finetune {a:.4} > product {b:.4} > zero-shot {c:.4}; prior-corrected product {:.4} on {}/20 (diagnostic)",
            mean(&corrected),
            corrected.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// KS calibration and exact-posterior IW

fn ks_calibration() -> (bool, String) {
    let n0 = Normal::new(0.0, 1.0).unwrap();
    let n1 = Normal::new(0.5, 1.0).unwrap();
    let (mut same, mut shifted) = (0, 0);
    for trial in 0..100u64 {
        let mut r = rng::stream(10, "ks", trial);
        let a: Vec<f64> = (0..10_000).map(|_| n0.sample(&mut r)).collect();
        let b: Vec<f64> = (0..10_000).map(|_| n0.sample(&mut r)).collect();
        let c: Vec<f64> = (0..10_000).map(|_| n1.sample(&mut r)).collect();
        same += (eval::ks_two_sample(&a, &b).unwrap().1 > 0.01) as usize;
        shifted += (eval::ks_two_sample(&a, &c).unwrap().1 < 1e-3) as usize;
    }
    (same >= 95 && shifted >= 99, format!("same distribution p > 0.01 in {same}/100 (>= 95); shifted p < 1e-3 in {shifted}/100 (>= 99)"))
}

fn exact_iw(pa1: f64, pb1_a1: f64, pb1_a0: f64) -> (f64, eval::IwReport) {
    let src = format!("a ~ bernoulli({pa1})\nb ~ bernoulli(if (a == 1) {pb1_a1} else {pb1_a0}) -> 1");
    let parsed = parse(&src).unwrap();
    // enumerate the joint table by hand: p(a, b = 1)
    let conditional = pa1 * pb1_a1 / (pa1 * pb1_a1 + (1.0 - pa1) * pb1_a0);
    let q = [Posterior::Bernoulli { p: conditional }];
    let mut r = rng::stream(11, "exact-iw", 0);
    let rep = eval::log_iw_with(&parsed.program, &parsed.trace, &[Slot::top("a")], &q, 64, &mut r, DEFAULT_SOFT_DELTA_STD).unwrap();
    (conditional, rep)
}

fn exact_posterior_iw() -> (bool, String) {
    // Probabilities with exact binary expansions, so the conditional itself is representable.
    let (conditional, rep) = exact_iw(0.5, 0.75, 0.25);
    let distinct: BTreeSet<u64> = rep.log_iw.iter().map(|x| x.to_bits()).collect();
    // With 0.3 / 0.9 / 0.2 the conditional is rounded and the log IW differ in the last bit.
    let (_, rounded) = exact_iw(0.3, 0.9, 0.2);
    (
        rep.variance == 0.0 && !rep.degenerate,
        format!(
            "q(a=1) = {conditional}; 64 draws, {} distinct log IW values, variance {:e} (== 0); non-dyadic program gives {}",
            distinct.len(),
            rep.variance,
            format!("{:.3e}", rounded.variance)
        ),
    )
}

/// `MLI_ACCEPTANCE_ONLY=name,name` runs a subset.
fn selected(name: &str) -> bool {
    match std::env::var("MLI_ACCEPTANCE_ONLY") {
        Ok(v) if !v.trim().is_empty() => v.split(',').any(|x| x.trim() == name),
        _ => true,
    }
}

fn main() {
    // `cargo test -- --list` and filters: this binary has a single entry.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let start = Instant::now();
    let mut results = Vec::new();
    let cheap: [(&'static str, fn() -> (bool, String)); 7] = [
        ("gradient-exactness", gradient_exactness),
        ("plating-unbiased", plating_unbiased),
        ("product-of-experts", product_of_experts),
        ("augmentation-soundness", augmentation_soundness),
        ("ks-calibration", ks_calibration),
        ("exact-posterior-iw", exact_posterior_iw),
        ("trainability", trainability),
    ];
    for (name, f) in cheap {
        if selected(name) {
            results.push(check(name, f));
        }
    }
    let shared: [(&'static str, fn(&LatentModels) -> (bool, String)); 3] = [("mlm-ablation", mlm_ablation), ("svi-finetuning", svi_finetuning), ("mh-r-hat", mh_r_hat)];
    if shared.iter().any(|(n, _)| selected(n)) {
        let t = Instant::now();
        let latent = latent_models();
        println!("(trained 6 latent-program models in {:.1}s)", t.elapsed().as_secs_f64());
        for (name, f) in shared {
            if selected(name) {
                results.push(check(name, || f(&latent)));
            }
        }
    }
    if selected("irt-ordering") {
        results.push(check("irt-ordering", irt_ordering));
    }
    let failed: Vec<&str> = results.iter().filter(|o| !o.pass).map(|o| o.name).collect();
    println!(
        "acceptance: {} passed, {} failed in {:.1}s",
        results.len() - failed.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
