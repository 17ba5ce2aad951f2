//! Paired masked views of program executions, and corpus files.
//!
//! A corpus split is two files: `<split>.mli` holds the masked annotated
//! programs separated by `---`, and `<split>.idx.jsonl` holds a header line
//! followed by one record per program with its masked targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ast::{infer_value_types, Program, Slot, ValueType};
use crate::augment::{random_augment, AugmentationPolicy};
use crate::exec::{self, ExecError};
use crate::nn::tokenizer::{self, is_symbolic, TokenSeq, TokenizeError, MASK, NUM};
use crate::rng::{self, Rng};
use crate::text::{self, ParseError, RenderError};

pub const CORPUS_FORMAT_VERSION: u32 = 1;
/// Base seed of the held-out split; independent of the run seed.
pub const HELDOUT_SEED: u64 = 0x5eed_0fff;

const TRAIN_BASE: u64 = 0;
const DEV_BASE: u64 = 1 << 40;
const TEST_BASE: u64 = 2 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSchedule {
    pub mlm_rate: f64,
    pub inf_rate_start: f64,
    pub inf_rate_end: f64,
    pub total_steps: u64,
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule {
            mlm_rate: 0.15,
            inf_rate_start: 0.15,
            inf_rate_end: 0.50,
            total_steps: 0,
        }
    }
}

impl MaskSchedule {
    /// Linear interpolation from start to end over `total_steps`. A zero
    /// `total_steps` holds the start rate (the trainer fills in its run length).
    pub fn inf_rate(&self, step: u64) -> f64 {
        let frac = if self.total_steps == 0 {
            0.0
        } else {
            (step as f64 / self.total_steps as f64).min(1.0)
        };
        self.inf_rate_start + (self.inf_rate_end - self.inf_rate_start) * frac
    }

    pub fn check(&self) -> Result<(), DatasetError> {
        let open = |r: f64| r > 0.0 && r < 1.0;
        if !(open(self.mlm_rate) && open(self.inf_rate_start) && open(self.inf_rate_end)) || self.inf_rate_start > self.inf_rate_end {
            return Err(DatasetError::Config(format!("invalid mask schedule {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Tokenize(#[from] TokenizeError),
    #[error("record {record}: {source}")]
    Parse { record: usize, source: ParseError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Config(String),
    #[error("program `{program}` has no annotated assignments")]
    NoAssignments { program: String },
}

/// One annotated assignment in a token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct InfTarget {
    /// Line index in the token sequence.
    pub line: usize,
    /// Position of the annotation value token.
    pub pos: usize,
    pub slot: Slot,
    pub value: f64,
    pub value_type: ValueType,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedInstance {
    pub source_program: String,
    pub seed: u64,
    pub mlm_tokens: TokenSeq,
    /// `(position, original token id)`
    pub mlm_targets: Vec<(usize, u32)>,
    pub inf_tokens: TokenSeq,
    pub inf_targets: Vec<InfTarget>,
}

/// An unmasked execution ready to be masked any number of times.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub program: String,
    /// Name of the built-in program this one derives from.
    pub source: String,
    pub seed: u64,
    pub tokens: TokenSeq,
    pub assignments: Vec<InfTarget>,
    /// Indices into `assignments` masked in the stored corpus record.
    pub stored_mask: Vec<usize>,
}

fn mask_tokens(seq: &TokenSeq, positions: impl IntoIterator<Item = usize>) -> TokenSeq {
    let mut t = seq.clone();
    for p in positions {
        t.ids[p] = MASK;
        t.payloads[p] = None;
    }
    t
}

impl Example {
    /// Builds an example from a fully observed program trace.
    pub fn from_trace(program: &Program, trace: &exec::Trace, source: &str, seed: u64, max_len: usize) -> Result<Example, DatasetError> {
        let full = exec::Trace {
            masked: BTreeSet::new(),
            ..trace.clone()
        };
        let text = text::render(program, &full, &BTreeSet::new())?;
        let tokens = tokenizer::tokenize_max(&text, max_len)?;
        let typed = infer_value_types(program);
        let mut assignments = Vec::new();
        for (line, span) in tokens.lines.iter().enumerate() {
            let (Some(slot), Some(pos)) = (&span.slot, span.value_pos) else { continue };
            let value_type = typed.assign(&slot.name).map(|a| a.value_type).unwrap_or_default();
            let value = trace.get(slot).ok_or_else(|| ExecError::MissingValue(slot.clone()))?;
            assignments.push(InfTarget {
                line,
                pos,
                slot: slot.clone(),
                value,
                value_type,
            });
        }
        if assignments.is_empty() {
            return Err(DatasetError::NoAssignments { program: program.name.clone() });
        }
        Ok(Example {
            program: program.name.clone(),
            source: source.to_string(),
            seed,
            tokens,
            assignments,
            stored_mask: Vec::new(),
        })
    }

    /// Masks the given assignments for the inference view and draws a fresh
    /// symbolic mask for the masked-token view.
    pub fn instance(&self, inf_mask: &[usize], mlm_rate: f64, rng: &mut Rng) -> MaskedInstance {
        let mlm_targets: Vec<(usize, u32)> = self
            .tokens
            .ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| is_symbolic(id))
            .filter(|_| rng.gen::<f64>() < mlm_rate)
            .map(|(p, &id)| (p, id))
            .collect();
        let inf_targets: Vec<InfTarget> = inf_mask.iter().map(|&i| self.assignments[i].clone()).collect();
        MaskedInstance {
            source_program: self.program.clone(),
            seed: self.seed,
            mlm_tokens: mask_tokens(&self.tokens, mlm_targets.iter().map(|t| t.0)),
            mlm_targets,
            inf_tokens: mask_tokens(&self.tokens, inf_targets.iter().map(|t| t.pos)),
            inf_targets,
        }
    }

    /// Masks each assignment independently with probability `rate`, redrawing
    /// until at least one is masked.
    pub fn draw_mask(&self, rate: f64, rng: &mut Rng) -> Vec<usize> {
        loop {
            let m: Vec<usize> = (0..self.assignments.len()).filter(|_| rng.gen::<f64>() < rate).collect();
            if !m.is_empty() {
                return m;
            }
        }
    }

    pub fn remask(&self, schedule: &MaskSchedule, step: u64, rng: &mut Rng) -> MaskedInstance {
        let m = self.draw_mask(schedule.inf_rate(step), rng);
        self.instance(&m, schedule.mlm_rate, rng)
    }

    /// The instance as stored in the corpus, with a symbolic mask fixed by the example's seed.
    pub fn stored(&self, mlm_rate: f64) -> MaskedInstance {
        let mut rng = rng::stream(self.seed, "stored-mlm", 0);
        self.instance(&self.stored_mask, mlm_rate, &mut rng)
    }

    /// The program and full trace behind this example.
    pub fn program_and_trace(&self) -> Result<(Program, exec::Trace), DatasetError> {
        let parsed = text::parse(&tokenizer::detokenize(&self.tokens)).map_err(|source| DatasetError::Parse { record: 0, source })?;
        let mut program = parsed.program;
        program.name = self.program.clone();
        let mut trace = parsed.trace;
        for a in &self.assignments {
            trace.values.insert(a.slot.clone(), a.value);
        }
        Ok((program, trace))
    }

    /// Slots hidden by the stored mask, in text order.
    pub fn stored_latents(&self) -> Vec<Slot> {
        self.stored_mask.iter().map(|&i| self.assignments[i].slot.clone()).collect()
    }

    /// Annotated text with the stored mask applied.
    pub fn masked_text(&self) -> String {
        let seq = mask_tokens(&self.tokens, self.stored_mask.iter().map(|&i| self.assignments[i].pos));
        tokenizer::detokenize(&seq)
    }
}

/// Executes `program` and masks the result at the schedule's rate for `step`.
pub fn make_instance(program: &Program, schedule: &MaskSchedule, step: u64, seed: u64, minibatch_k: Option<usize>) -> Result<MaskedInstance, DatasetError> {
    let k = program.plate().and(minibatch_k);
    let trace = exec::run(program, seed, k)?;
    let ex = Example::from_trace(program, &trace, &program.name, seed, usize::MAX)?;
    let mut rng = rng::stream(seed, "mask", 0);
    Ok(ex.remask(schedule, step, &mut rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusOptions {
    pub n_per_program: usize,
    pub dev_per_program: usize,
    pub test_per_program: usize,
    /// Plate minibatch size for plated programs (all members when absent).
    pub minibatch_k: Option<usize>,
    /// Masking rate for stored dev/test masks.
    pub heldout_mask_rate: f64,
    pub max_len: usize,
    pub schedule: MaskSchedule,
    /// Fresh executions tried per instance before giving up.
    pub max_attempts: usize,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            n_per_program: 10_000,
            dev_per_program: 500,
            test_per_program: 500,
            minibatch_k: None,
            heldout_mask_rate: 0.5,
            max_len: tokenizer::DEFAULT_MAX_LEN,
            schedule: MaskSchedule::default(),
            max_attempts: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn base(self) -> u64 {
        match self {
            Split::Train => TRAIN_BASE,
            Split::Dev => DEV_BASE,
            Split::Test => TEST_BASE,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[Example] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Example> {
        match s {
            Split::Train => &mut self.train,
            Split::Dev => &mut self.dev,
            Split::Test => &mut self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Generates one example. Failed executions and over-length programs are
/// retried with fresh draws.
fn generate_one(program: &Program, augment: Option<&AugmentationPolicy>, split: Split, index: u64, base_seed: u64, opts: &CorpusOptions) -> Result<Example, DatasetError> {
    let seed = split.base() + index;
    let stream_seed = rng::derive(base_seed, &program.name, seed);
    let mut last_err = None;
    for attempt in 0..opts.max_attempts.max(1) as u64 {
        let p = match augment {
            Some(policy) => random_augment(program, policy, rng::derive(stream_seed, "augment", attempt)),
            None => program.clone(),
        };
        let k = p.plate().and(opts.minibatch_k);
        let mut exec_rng = rng::stream(stream_seed, "exec", attempt);
        let trace = match exec::run_with(&p, &mut exec_rng, k) {
            Ok(t) => t,
            Err(e) => {
                last_err = Some(DatasetError::from(e));
                continue;
            }
        };
        let mut ex = match Example::from_trace(&p, &trace, &program.name, seed, opts.max_len) {
            Ok(ex) => ex,
            Err(e @ (DatasetError::Tokenize(_) | DatasetError::Render(_))) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let rate = match split {
            Split::Train => opts.schedule.inf_rate(0),
            _ => opts.heldout_mask_rate,
        };
        let mut mask_rng = rng::stream(stream_seed, "mask", attempt);
        ex.stored_mask = ex.draw_mask(rate, &mut mask_rng);
        return Ok(ex);
    }
    Err(last_err.expect("at least one attempt"))
}

/// Builds train/dev/test splits for every program. Training and dev
/// instances derive from `seed`; the test split always uses [`HELDOUT_SEED`].
pub fn build_corpus(programs: &[Program], augment: Option<&AugmentationPolicy>, seed: u64, opts: &CorpusOptions) -> Result<Corpus, DatasetError> {
    opts.schedule.check()?;
    if let Some(p) = augment {
        p.check().map_err(|e| DatasetError::Config(e.to_string()))?;
    }
    let mut corpus = Corpus::default();
    for split in Split::ALL {
        let n = match split {
            Split::Train => opts.n_per_program,
            Split::Dev => opts.dev_per_program,
            Split::Test => opts.test_per_program,
        };
        let base_seed = if split == Split::Test { HELDOUT_SEED } else { seed };
        for program in programs {
            let items: Result<Vec<Example>, DatasetError> = (0..n as u64)
                .into_par_iter()
                .map(|i| generate_one(program, augment, split, i, base_seed, opts))
                .collect();
            corpus.split_mut(split).extend(items?);
        }
    }
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub split: Split,
    pub schedule: MaskSchedule,
    pub programs: Vec<String>,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexRecord {
    program: String,
    source: String,
    seed: u64,
    /// `(line index, value)` for every masked assignment.
    targets: Vec<(usize, f64)>,
}

pub fn split_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    (dir.join(format!("{}.mli", split.name())), dir.join(format!("{}.idx.jsonl", split.name())))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

pub fn write_split(dir: &Path, split: Split, examples: &[Example], schedule: &MaskSchedule) -> Result<(), DatasetError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (text_path, idx_path) = split_paths(dir, split);
    let programs: BTreeSet<String> = examples.iter().map(|e| e.source.clone()).collect();
    let header = CorpusHeader {
        format_version: CORPUS_FORMAT_VERSION,
        split,
        schedule: *schedule,
        programs: programs.into_iter().collect(),
        count: examples.len(),
    };
    let mut body = String::new();
    let _ = writeln!(body, "# mli corpus v{CORPUS_FORMAT_VERSION} split={} count={}", split.name(), examples.len());
    let mut idx = serde_json::to_string(&header).expect("header serializes");
    idx.push('\n');
    for ex in examples {
        body.push_str("---\n");
        let _ = writeln!(body, "# program: {}", ex.program);
        let _ = writeln!(body, "# seed: {}", ex.seed);
        body.push_str(&ex.masked_text());
        let rec = IndexRecord {
            program: ex.program.clone(),
            source: ex.source.clone(),
            seed: ex.seed,
            targets: ex.stored_mask.iter().map(|&i| (ex.assignments[i].line, ex.assignments[i].value)).collect(),
        };
        idx.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        idx.push('\n');
    }
    crate::nn::checkpoint::write_atomic(&text_path, body.as_bytes()).map_err(io_err(&text_path))?;
    crate::nn::checkpoint::write_atomic(&idx_path, idx.as_bytes()).map_err(io_err(&idx_path))?;
    Ok(())
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, schedule: &MaskSchedule) -> Result<(), DatasetError> {
    for s in Split::ALL {
        write_split(dir, s, corpus.split(s), schedule)?;
    }
    Ok(())
}

/// Reads one split back, restoring the masked values from the index.
pub fn read_split(dir: &Path, split: Split, max_len: usize) -> Result<(CorpusHeader, Vec<Example>), DatasetError> {
    let (text_path, idx_path) = split_paths(dir, split);
    let text = fs::read_to_string(&text_path).map_err(io_err(&text_path))?;
    let idx = fs::read_to_string(&idx_path).map_err(io_err(&idx_path))?;
    let fmt = |path: &Path, message: String| DatasetError::Format { path: path.to_path_buf(), message };
    let mut lines = idx.lines();
    let header: CorpusHeader = serde_json::from_str(lines.next().unwrap_or("")).map_err(|e| fmt(&idx_path, format!("header: {e}")))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(fmt(&idx_path, format!("unsupported format version {}", header.format_version)));
    }
    let records: Vec<IndexRecord> = lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| fmt(&idx_path, format!("record {i}: {e}"))))
        .collect::<Result<_, _>>()?;
    let blocks: Vec<&str> = text.split("\n---\n").skip(1).collect();
    if blocks.len() != records.len() || records.len() != header.count {
        return Err(fmt(&text_path, format!("{} text blocks, {} index records, header count {}", blocks.len(), records.len(), header.count)));
    }
    let examples = blocks
        .par_iter()
        .zip(records.par_iter())
        .enumerate()
        .map(|(i, (block, rec))| example_from_record(block, rec, max_len).map_err(|e| match e {
            DatasetError::Tokenize(TokenizeError::Parse(source)) => DatasetError::Parse { record: i, source },
            other => other,
        }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((header, examples))
}

fn example_from_record(block: &str, rec: &IndexRecord, max_len: usize) -> Result<Example, DatasetError> {
    let masked = tokenizer::tokenize_max(block, max_len)?;
    let parsed = text::parse(block).map_err(TokenizeError::Parse)?;
    let mut fill = BTreeMap::new();
    for &(line, value) in &rec.targets {
        let slot = masked
            .lines
            .get(line)
            .and_then(|l| l.slot.clone())
            .ok_or_else(|| DatasetError::Config(format!("target line {line} out of range")))?;
        fill.insert(slot, value);
    }
    let trace = parsed.trace.fill(&fill);
    let mut program = parsed.program;
    program.name = rec.program.clone();
    let mut ex = Example::from_trace(&program, &trace, &rec.source, rec.seed, max_len)?;
    ex.stored_mask = ex
        .assignments
        .iter()
        .enumerate()
        .filter(|(_, a)| masked.ids[a.pos] == MASK)
        .map(|(i, _)| i)
        .collect();
    // Visible values keep the precision of the text; masked ones the index's.
    for a in ex.assignments.iter_mut() {
        if masked.ids[a.pos] == NUM {
            a.value = masked.payloads[a.pos].unwrap_or(a.value);
        }
    }
    Ok(ex)
}

pub fn read_corpus(dir: &Path, max_len: usize) -> Result<Corpus, DatasetError> {
    let mut c = Corpus::default();
    for s in Split::ALL {
        *c.split_mut(s) = read_split(dir, s, max_len)?.1;
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::programs;

    #[test]
    fn schedule_rates() {
        let s = MaskSchedule {
            total_steps: 100,
            ..Default::default()
        };
        assert_eq!(s.inf_rate(0), 0.15);
        assert!((s.inf_rate(50) - 0.325).abs() < 1e-12);
        assert_eq!(s.inf_rate(100), 0.5);
        assert_eq!(s.inf_rate(1000), 0.5);
    }

    #[test]
    fn instance_invariants() {
        let p = programs::latent();
        let s = MaskSchedule::default();
        for seed in 0..50 {
            let inst = make_instance(&p, &s, 0, seed, None).unwrap();
            assert!(!inst.inf_targets.is_empty());
            for (pos, id) in &inst.mlm_targets {
                assert!(is_symbolic(*id));
                assert_eq!(inst.mlm_tokens.ids[*pos], MASK);
            }
            let trace = exec::run(&p, seed, None).unwrap();
            for t in &inst.inf_targets {
                assert_eq!(inst.inf_tokens.ids[t.pos], MASK);
                assert_eq!(inst.inf_tokens.lines[t.line].value_pos, Some(t.pos));
                assert_eq!(trace.get(&t.slot), Some(t.value));
            }
        }
    }

    #[test]
    fn plated_instances_use_minibatch() {
        let p = programs::irt();
        let inst = make_instance(&p, &MaskSchedule::default(), 0, 3, Some(2)).unwrap();
        // ability, plate header, two members of two statements
        assert_eq!(inst.inf_tokens.lines.len(), 6);
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CorpusOptions {
            n_per_program: 4,
            dev_per_program: 2,
            test_per_program: 2,
            ..Default::default()
        };
        let progs = [programs::latent(), programs::common_effect()];
        let c = build_corpus(&progs, None, 7, &opts).unwrap();
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (8, 4, 4));
        write_corpus(dir.path(), &c, &opts.schedule).unwrap();
        let back = read_corpus(dir.path(), opts.max_len).unwrap();
        for s in Split::ALL {
            for (a, b) in c.split(s).iter().zip(back.split(s)) {
                assert_eq!(a.stored_mask, b.stored_mask);
                assert_eq!(a.masked_text(), b.masked_text());
                for &i in &a.stored_mask {
                    assert_eq!(a.assignments[i].value, b.assignments[i].value);
                }
            }
        }
    }

    #[test]
    fn empty_corpus_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let opts = CorpusOptions {
            n_per_program: 0,
            dev_per_program: 0,
            test_per_program: 0,
            ..Default::default()
        };
        let c = build_corpus(&programs::toy_programs(), None, 1, &opts).unwrap();
        assert!(c.is_empty());
        write_corpus(dir.path(), &c, &opts.schedule).unwrap();
        assert!(read_corpus(dir.path(), 256).unwrap().is_empty());
    }

    #[test]
    fn heldout_split_ignores_run_seed() {
        let opts = CorpusOptions {
            n_per_program: 1,
            dev_per_program: 1,
            test_per_program: 3,
            ..Default::default()
        };
        let progs = [programs::latent()];
        let a = build_corpus(&progs, None, 1, &opts).unwrap();
        let b = build_corpus(&progs, None, 2, &opts).unwrap();
        assert_eq!(a.test, b.test);
        assert_ne!(a.train, b.train);
    }
}
