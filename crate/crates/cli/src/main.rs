mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use mli_core::augment::random_augment_traced;
use mli_core::dataset::{self, build_corpus, read_corpus, write_corpus, Corpus};
use mli_core::eval::{self, HeatmapPattern, Proposal, ProposalKind};
use mli_core::infer::{self, DecodeOrder, InferenceQuery, SviObservation};
use mli_core::nn::checkpoint;
use mli_core::nn::Posterior;
use mli_core::text::{self, Parsed};
use mli_core::train::{self, EpochRecord, LogRecord, TrainOutput};
use mli_core::{programs, rng, Model, Program, Slot};
use serde::Serialize;

use config::{InferMode, RunConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn usage(m: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: m.into() }
    }
    pub fn validation(m: impl Into<String>) -> Self {
        CliError { code: EXIT_VALIDATION, message: m.into() }
    }
    pub fn runtime(m: impl std::fmt::Display) -> Self {
        CliError { code: EXIT_RUNTIME, message: m.to_string() }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "mli", version, about = "Masked language inference for a small probabilistic programming language")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (overrides `paths.out`).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute programs and write train/dev/test corpora.
    Generate(Common),
    /// Write augmented variants of programs.
    Augment(Common),
    /// Train a model on a corpus.
    Train(Common),
    /// Posterior for the masked slots of a query program.
    Infer(Common),
    /// Variational finetuning on query observations.
    Finetune(Common),
    /// Held-out log q and log importance weight variance per program.
    Eval(Common),
    /// Metropolis-Hastings with model or prior proposals, plus R-hat.
    Mh(Common),
    /// Line-level attention heatmap for a program trace.
    Attn(Common),
    /// Summarise a training log.
    Report(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

struct Ctx {
    command: &'static str,
    cfg: RunConfig,
    out: PathBuf,
    start: Instant,
    outputs: Vec<String>,
}

impl Ctx {
    fn new(command: &'static str, common: Common) -> Result<Ctx> {
        let cfg = RunConfig::load(common.config.as_deref(), &common.set)?;
        let out = common
            .out
            .or_else(|| cfg.paths.out.clone())
            .ok_or_else(|| CliError::usage("no output directory: pass --out or set paths.out"))?;
        Ok(Ctx {
            command,
            cfg,
            out,
            start: Instant::now(),
            outputs: Vec::new(),
        })
    }

    fn create_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::runtime(format!("{}: {e}", self.out.display())))
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        checkpoint::write_atomic(&path, contents).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(mut self) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            command: &'a str,
            version: String,
            config_hash: String,
            seed: u64,
            wall_time: f64,
            outputs: &'a [String],
            config: &'a RunConfig,
        }
        let outputs = std::mem::take(&mut self.outputs);
        let cfg = self.cfg.clone();
        let m = Manifest {
            command: self.command,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            wall_time: self.start.elapsed().as_secs_f64(),
            outputs: &outputs,
            config: &cfg,
        };
        self.write_json("manifest.json", &m)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(c) => cmd_generate(Ctx::new("generate", c)?),
        Command::Augment(c) => cmd_augment(Ctx::new("augment", c)?),
        Command::Train(c) => cmd_train(Ctx::new("train", c)?),
        Command::Infer(c) => cmd_infer(Ctx::new("infer", c)?),
        Command::Finetune(c) => cmd_finetune(Ctx::new("finetune", c)?),
        Command::Eval(c) => cmd_eval(Ctx::new("eval", c)?),
        Command::Mh(c) => cmd_mh(Ctx::new("mh", c)?),
        Command::Attn(c) => cmd_attn(Ctx::new("attn", c)?),
        Command::Report(c) => cmd_report(Ctx::new("report", c)?),
    }
}

// ---------------------------------------------------------------------------
// inputs

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| CliError::validation(format!("`{key}` is not set")))?;
    if !p.exists() {
        return Err(CliError::validation(format!("{}: no such file or directory ({key})", p.display())));
    }
    Ok(p)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Built-in program name or a path to a program file (possibly `---`-separated).
fn load_programs(specs: &[String]) -> Result<Vec<Program>> {
    if specs.is_empty() {
        return Err(CliError::validation("`paths.programs` is empty"));
    }
    let mut out = Vec::new();
    for s in specs {
        if let Some(p) = programs::builtin(s) {
            out.push(p);
            continue;
        }
        let path = Path::new(s);
        if !path.exists() {
            return Err(CliError::validation(format!("{s}: not a built-in program and no such file")));
        }
        let parsed = text::parse_many(&read_text(path)?).map_err(|e| CliError::validation(format!("{s}: {e}")))?;
        let stem = path.file_stem().and_then(|x| x.to_str()).unwrap_or("program");
        let n = parsed.len();
        for (i, mut p) in parsed.into_iter().enumerate() {
            if p.program.name == "anonymous" {
                p.program.name = if n == 1 { stem.to_string() } else { format!("{stem}-{i}") };
            }
            out.push(p.program);
        }
    }
    for p in &out {
        mli_core::ast::ensure_valid(p).map_err(|e| CliError::validation(format!("{}: {e}", p.name)))?;
    }
    Ok(out)
}

fn load_queries(cfg: &RunConfig) -> Result<Vec<Parsed>> {
    let path = require(&cfg.paths.query, "paths.query")?;
    let parsed = text::parse_many(&read_text(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if parsed.is_empty() {
        return Err(CliError::validation(format!("{}: no program", path.display())));
    }
    Ok(parsed)
}

fn query_of(p: &Parsed) -> Result<InferenceQuery> {
    let latents: Vec<Slot> = p.trace.masked.iter().cloned().collect();
    let mut observed = p.trace.clone();
    observed.masked.clear();
    let q = InferenceQuery::new(p.program.clone(), observed, latents);
    q.check().map_err(|e| CliError::validation(e.to_string()))?;
    Ok(q)
}

fn load_model(cfg: &RunConfig) -> Result<Model> {
    let path = require(&cfg.paths.checkpoint, "paths.checkpoint")?;
    load_model_at(path)
}

fn load_model_at(path: &Path) -> Result<Model> {
    checkpoint::load::<f32>(path).map(|(m, _)| m).map_err(|e| CliError::validation(e.to_string()))
}

fn parse_slot(s: &str) -> Result<Slot> {
    let s = s.trim();
    match s.split_once('[') {
        Some((name, rest)) => {
            let idx = rest
                .strip_suffix(']')
                .and_then(|i| i.parse().ok())
                .ok_or_else(|| CliError::validation(format!("bad slot `{s}`")))?;
            Ok(Slot::member(name, idx))
        }
        None => Ok(Slot::top(s)),
    }
}

fn posterior_map(m: &BTreeMap<Slot, Posterior>) -> BTreeMap<String, Posterior> {
    m.iter().map(|(s, p)| (s.to_string(), p.clone())).collect()
}

fn tsv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join("\t");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    s
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v.sqrt())
}

// ---------------------------------------------------------------------------
// commands

fn cmd_generate(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let progs = load_programs(&cfg.paths.programs)?;
    cfg.corpus.schedule.check().map_err(|e| CliError::validation(e.to_string()))?;
    let policy = cfg.generate.augment.then_some(&cfg.augment.policy);
    let corpus: Corpus = build_corpus(&progs, policy, cfg.seed, &cfg.corpus).map_err(CliError::runtime)?;
    ctx.create_out()?;
    let dir = ctx.out.join("corpus");
    write_corpus(&dir, &corpus, &cfg.corpus.schedule).map_err(CliError::runtime)?;
    for split in [dataset::Split::Train, dataset::Split::Dev, dataset::Split::Test] {
        let (a, b) = dataset::split_paths(Path::new("corpus"), split);
        ctx.outputs.push(a.display().to_string());
        ctx.outputs.push(b.display().to_string());
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (i, split) in [&corpus.train, &corpus.dev, &corpus.test].into_iter().enumerate() {
        for ex in split {
            counts.entry(ex.program.clone()).or_default()[i] += 1;
        }
    }
    #[derive(Serialize)]
    struct Summary {
        train: usize,
        dev: usize,
        test: usize,
        total: usize,
        per_program: BTreeMap<String, [usize; 3]>,
    }
    let s = Summary {
        train: corpus.train.len(),
        dev: corpus.dev.len(),
        test: corpus.test.len(),
        total: corpus.train.len() + corpus.dev.len() + corpus.test.len(),
        per_program: counts,
    };
    println!("wrote {} train, {} dev, {} test instances to {}", s.train, s.dev, s.test, dir.display());
    ctx.write_json("counts.json", &s)?;
    ctx.finish()
}

fn cmd_augment(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let progs = load_programs(&cfg.paths.programs)?;
    cfg.augment.policy.check().map_err(|e| CliError::validation(e.to_string()))?;
    let mut text_out = String::new();
    let mut rows = Vec::new();
    for (pi, p) in progs.iter().enumerate() {
        for i in 0..cfg.augment.count {
            let seed = rng::derive(cfg.seed, &format!("augment/{}", p.name), i as u64);
            let o = random_augment_traced(p, &cfg.augment.policy, seed);
            let name = format!("{}-aug{i}", p.name);
            let kinds: Vec<String> = o.applied.iter().map(|k| format!("{k:?}")).collect();
            let _ = writeln!(text_out, "---\n# program: {name}\n# kinds: {}", kinds.join(" "));
            text_out.push_str(&text::render_program(&o.program));
            rows.push(vec![name, p.name.clone(), pi.to_string(), kinds.join(","), o.rejects.to_string(), o.fell_back.to_string()]);
        }
    }
    ctx.create_out()?;
    ctx.write("augmented.mli", text_out.as_bytes())?;
    ctx.write("augmented.tsv", tsv(&["name", "source", "source_index", "kinds", "rejects", "fell_back"], &rows).as_bytes())?;
    println!("wrote {} programs", rows.len());
    ctx.finish()
}

fn cmd_train(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let dir = require(&cfg.paths.corpus, "paths.corpus")?;
    cfg.train.check().map_err(|e| CliError::validation(e.to_string()))?;
    cfg.model.check().map_err(|e| CliError::validation(e.to_string()))?;
    let corpus = read_corpus(dir, cfg.model.max_len).map_err(|e| CliError::validation(e.to_string()))?;
    let init = Model::init(&cfg.model, rng::derive(cfg.seed, "model-init", 0)).map_err(|e| CliError::validation(e.to_string()))?;
    ctx.create_out()?;
    let out = TrainOutput { dir: ctx.out.clone() };
    let outcome = train::train(init, &corpus.train, &corpus.dev, &cfg.train, Some(&out)).map_err(CliError::runtime)?;
    ctx.outputs.extend(["best.ckpt", "final.ckpt", "train_log.jsonl"].map(String::from));
    let mut epochs = String::new();
    for e in &outcome.epochs {
        epochs.push_str(&serde_json::to_string(e).map_err(CliError::runtime)?);
        epochs.push('\n');
    }
    ctx.write("epochs.jsonl", epochs.as_bytes())?;
    println!("best dev loss {:.4} at epoch {}; final {:.4}", outcome.best_dev, outcome.best_epoch, outcome.final_dev);
    ctx.finish()
}

fn cmd_infer(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let model = load_model(&cfg)?;
    let queries = load_queries(&cfg)?;
    let mut results = Vec::new();
    for (i, p) in queries.iter().enumerate() {
        let q = query_of(p)?;
        let seed = rng::derive(cfg.seed, "infer", i as u64);
        let post = match cfg.infer.mode {
            InferMode::ZeroShot => infer::zero_shot(&model, &q).map_err(CliError::runtime)?,
            InferMode::Autoregressive => {
                let order = match cfg.infer.order.as_str() {
                    "given" => DecodeOrder::Given,
                    "random" => DecodeOrder::Random(seed),
                    o => return Err(CliError::validation(format!("infer.order must be `given` or `random`, got `{o}`"))),
                };
                infer::autoregressive_decode(&model, &q, &order, cfg.infer.sample, seed).map_err(CliError::runtime)?.posteriors
            }
            InferMode::Product => {
                infer::poe_zero_shot(&model, &q.program, &q.observed, &q.latents, cfg.infer.k, cfg.infer.resamples, seed)
                    .map_err(CliError::runtime)?
                    .combined
            }
        };
        results.push(posterior_map(&post));
    }
    ctx.create_out()?;
    ctx.write_json("posteriors.json", &results)?;
    ctx.finish()
}

fn cmd_finetune(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let model = load_model(&cfg)?;
    let queries = load_queries(&cfg)?;
    let qs: Vec<InferenceQuery> = queries.iter().map(query_of).collect::<Result<_>>()?;
    let program = qs[0].program.clone();
    if qs.iter().any(|q| q.program.statements != program.statements) {
        return Err(CliError::validation("all finetuning observations must come from one program"));
    }
    let data: Vec<SviObservation> = qs
        .iter()
        .map(|q| SviObservation {
            observed: q.observed.clone(),
            latents: q.latents.clone(),
        })
        .collect();
    let (tuned, elbo) = infer::svi_finetune(&model, &program, &data, &cfg.svi).map_err(CliError::runtime)?;
    let results: Vec<_> = qs
        .iter()
        .map(|q| infer::zero_shot(&tuned, q).map(|m| posterior_map(&m)))
        .collect::<std::result::Result<_, _>>()
        .map_err(CliError::runtime)?;
    ctx.create_out()?;
    let mut log = String::new();
    for r in &elbo {
        log.push_str(&serde_json::to_string(r).map_err(CliError::runtime)?);
        log.push('\n');
    }
    ctx.write("elbo.jsonl", log.as_bytes())?;
    ctx.write_json("posteriors.json", &results)?;
    let meta = serde_json::json!({ "finetuned_from": cfg.paths.checkpoint, "steps": cfg.svi.steps });
    ctx.write("finetuned.ckpt", &checkpoint::to_bytes(&tuned, meta))?;
    ctx.finish()
}

fn cmd_eval(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let dir = require(&cfg.paths.corpus, "paths.corpus")?;
    let mut ckpts = cfg.paths.checkpoints.clone();
    if ckpts.is_empty() {
        ckpts.push(require(&cfg.paths.checkpoint, "paths.checkpoint")?.to_path_buf());
    }
    for c in &ckpts {
        require(&Some(c.clone()), "paths.checkpoints")?;
    }
    let models: Vec<Model> = ckpts.iter().map(|c| load_model_at(c)).collect::<Result<_>>()?;
    let max_len = models.iter().map(|m| m.config.max_len).min().unwrap_or(256);
    let (_, mut test) = dataset::read_split(dir, dataset::Split::Test, max_len).map_err(|e| CliError::validation(e.to_string()))?;
    if cfg.eval.limit > 0 {
        test.truncate(cfg.eval.limit);
    }
    // per program: one value per checkpoint
    let mut log_q: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut var_iw: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut zero: BTreeMap<String, usize> = BTreeMap::new();
    let mut n: BTreeMap<String, usize> = BTreeMap::new();
    for ex in &test {
        *n.entry(ex.program.clone()).or_default() += 1;
    }
    for (ci, m) in models.iter().enumerate() {
        let lq = eval::eval_log_posterior(m, &test).map_err(CliError::runtime)?;
        let iw = eval::var_log_iw_corpus(m, &test, cfg.eval.iw_samples, rng::derive(cfg.seed, "eval-iw", ci as u64)).map_err(CliError::runtime)?;
        let mut by_prog: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((ex, l), r) in test.iter().zip(&lq.per_instance).zip(&iw) {
            let e = by_prog.entry(&ex.program).or_default();
            e.0.push(*l);
            if !r.degenerate {
                e.1.push(r.variance);
            }
            *zero.entry(ex.program.clone()).or_default() += r.log_zero;
        }
        for (p, (l, v)) in by_prog {
            log_q.entry(p.to_string()).or_default().push(mean_std(&l).0);
            var_iw.entry(p.to_string()).or_default().push(mean_std(&v).0);
        }
    }
    let mut rows = Vec::new();
    for (p, count) in &n {
        for (metric, vals) in [("log_q", &log_q[p]), ("var_log_iw", &var_iw[p])] {
            let (m, s) = mean_std(vals);
            rows.push(vec![metric.to_string(), p.clone(), format!("{m:.6}"), format!("{s:.6}"), count.to_string(), cfg.seed.to_string()]);
        }
        rows.push(vec!["log_zero_samples".into(), p.clone(), zero[p].to_string(), "0".into(), count.to_string(), cfg.seed.to_string()]);
    }
    let table = tsv(&["metric", "program", "value", "std", "n", "seed"], &rows);
    print!("{table}");
    ctx.create_out()?;
    ctx.write("metrics.tsv", table.as_bytes())?;
    ctx.finish()
}

fn cmd_mh(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let queries = load_queries(&cfg)?;
    let model = match cfg.mh.proposal {
        ProposalKind::Model => Some(load_model(&cfg)?),
        ProposalKind::Prior => None,
    };
    cfg.mh.check().map_err(|e| CliError::validation(e.to_string()))?;
    let mut samples = String::new();
    let mut rows = Vec::new();
    for (qi, p) in queries.iter().enumerate() {
        let q = query_of(p)?;
        let (observed, latents, dependents) = eval::mh_query(&q.program, &q.observed, &q.latents).map_err(CliError::runtime)?;
        let proposal = match &model {
            Some(m) => eval::model_proposal(m, &q.program, &observed, &latents, &dependents).map_err(CliError::runtime)?,
            None => Proposal::Prior,
        };
        let mut mh = cfg.mh.clone();
        mh.seed = rng::derive(cfg.mh.seed, "query", qi as u64);
        let r = eval::mh_sample(&q.program, &observed, &latents, &proposal, &mh).map_err(CliError::runtime)?;
        for (c, chain) in r.samples.iter().enumerate() {
            for (l, series) in r.latents.iter().zip(chain) {
                let vals: Vec<String> = series.iter().map(|v| text::fmt_num(*v)).collect();
                let _ = writeln!(samples, "{qi}\t{c}\t{l}\t{}", vals.join(","));
            }
        }
        let acc = mean_std(&r.acceptance).0;
        for (l, rh) in r.latents.iter().zip(r.r_hat_per_latent()) {
            rows.push(vec![qi.to_string(), l.to_string(), rh.map_or("undefined".into(), |x| format!("{x:.6}")), format!("{acc:.4}")]);
        }
    }
    ctx.create_out()?;
    ctx.write("samples.tsv", format!("query\tchain\tlatent\tvalues\n{samples}").as_bytes())?;
    let table = tsv(&["query", "latent", "r_hat", "acceptance"], &rows);
    print!("{table}");
    ctx.write("r_hat.tsv", table.as_bytes())?;
    ctx.finish()
}

fn cmd_attn(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let model = load_model(&cfg)?;
    let queries = load_queries(&cfg)?;
    let p = &queries[0];
    if !p.trace.masked.is_empty() {
        return Err(CliError::validation("attn expects a fully annotated trace (no <mask>)"));
    }
    let patterns: Vec<HeatmapPattern> = if cfg.attn.observed.is_empty() {
        eval::mask_each(&p.program, &p.trace)
    } else {
        let focus = parse_slot(cfg.attn.focus.as_deref().ok_or_else(|| CliError::validation("attn.focus is required with attn.observed"))?)?;
        let sets: Vec<Vec<Slot>> = cfg.attn.observed.iter().map(|s| s.iter().map(|x| parse_slot(x)).collect::<Result<_>>()).collect::<Result<_>>()?;
        eval::observed_sets(&p.program, &p.trace, &focus, &sets)
    };
    let h = eval::attention_heatmap(&model, &p.program, &p.trace, &patterns).map_err(CliError::runtime)?;
    ctx.create_out()?;
    ctx.write("heatmap.tsv", h.to_tsv().as_bytes())?;
    ctx.finish()
}

fn cmd_report(mut ctx: Ctx) -> Result<()> {
    let cfg = ctx.cfg.clone();
    let path = require(&cfg.paths.log, "paths.log")?;
    let text = read_text(path)?;
    let mut by_epoch: BTreeMap<usize, Vec<LogRecord>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: LogRecord = serde_json::from_str(line).map_err(|e| CliError::validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        by_epoch.entry(r.epoch).or_default().push(r);
    }
    let epochs_path = path.with_file_name("epochs.jsonl");
    let mut dev: BTreeMap<usize, EpochRecord> = BTreeMap::new();
    if let Ok(t) = std::fs::read_to_string(&epochs_path) {
        for line in t.lines().filter(|l| !l.trim().is_empty()) {
            if let Ok(e) = serde_json::from_str::<EpochRecord>(line) {
                dev.insert(e.epoch, e);
            }
        }
    }
    let mut rows = Vec::new();
    for (epoch, recs) in &by_epoch {
        let avg = |f: fn(&LogRecord) -> f64| recs.iter().map(f).sum::<f64>() / recs.len() as f64;
        let last = recs.last().unwrap();
        let d = dev.get(epoch);
        rows.push(vec![
            epoch.to_string(),
            last.step.to_string(),
            format!("{:.5}", avg(|r| r.loss)),
            format!("{:.5}", avg(|r| r.mlm_loss)),
            format!("{:.5}", avg(|r| r.inf_loss)),
            format!("{:.3}", avg(|r| r.mask_rate)),
            format!("{:.2e}", last.lr),
            d.map_or("-".into(), |d| format!("{:.5}", d.dev_loss)),
            format!("{:.1}", last.wall_time),
        ]);
    }
    let table = tsv(&["epoch", "step", "loss", "mlm_loss", "inf_loss", "mask_rate", "lr", "dev_loss", "wall_time"], &rows);
    print!("{table}");
    ctx.create_out()?;
    ctx.write("report.tsv", table.as_bytes())?;
    ctx.finish()
}
