//! Pretraining, finetuning, evaluation and ladder execution.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adafactor::{OptimState, Schedule};
use super::corpus::Corpus;
use super::record::{ResultsSink, RunRecord, RunStatus, SCHEMA_VERSION};
use super::span::{span_corrupt, Denoising};
use super::tasks::{sample_example, Example, Task};
use super::tokenizer::{EOS, PAD};
use crate::config::{Family, ModelConfig};
use crate::cost::count_flops;
use crate::error::{Error, Result};
use crate::ladders::LadderEntry;
use crate::layers::Ctx;
use crate::model::{read_checkpoint, write_checkpoint, Checkpoint, Model};
use crate::tensor::{Float, Graph, Var};

/// Training loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e4;
const EVAL_SEED: u64 = 0x5eed_e7a1;
const DATA_SALT: u64 = 0xda7a;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainOptions {
    pub steps: u64,
    pub batch: usize,
    /// Raw tokens per window before corruption.
    pub seq_len: usize,
    pub lr_scale: f64,
    pub warmup: u64,
    pub seed: u64,
    pub eval_windows: usize,
    pub rate: f64,
    pub mean_span: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 2000,
            batch: 32,
            seq_len: 128,
            lr_scale: 0.05,
            warmup: 100,
            seed: 0,
            eval_windows: 64,
            rate: 0.15,
            mean_span: 3.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub steps: u64,
    pub batch: usize,
    pub payload_len: usize,
    pub lr_scale: f64,
    pub warmup: u64,
    pub seed: u64,
    /// Held-out examples per task.
    pub eval_examples: usize,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions { steps: 500, batch: 32, payload_len: 8, lr_scale: 0.05, warmup: 100, seed: 0, eval_examples: 50 }
    }
}

/// One source/target pair; the decoder reads the target shifted right by PAD.
#[derive(Clone, Debug)]
struct Pair {
    enc: Vec<usize>,
    target: Vec<usize>,
}

impl Pair {
    fn dec_input(&self) -> Vec<usize> {
        std::iter::once(PAD).chain(self.target[..self.target.len() - 1].iter().copied()).collect()
    }
}

/// Fixed-length encoders see inputs truncated or right-padded with PAD.
pub fn prepare_encoder_input(config: &ModelConfig, ids: &[usize]) -> Vec<usize> {
    if config.family != Family::Mixer {
        return ids.to_vec();
    }
    let mut v: Vec<usize> = ids.iter().copied().take(config.n_enc_fixed).collect();
    v.resize(config.n_enc_fixed, PAD);
    v
}

fn pair_from(config: &ModelConfig, enc: &[usize], target: Vec<usize>) -> Pair {
    Pair { enc: prepare_encoder_input(config, enc), target }
}

fn window<'a, R: Rng>(stream: &'a [usize], len: usize, rng: &mut R) -> &'a [usize] {
    if stream.len() <= len {
        return stream;
    }
    let start = rng.gen_range(0..=stream.len() - len);
    &stream[start..start + len]
}

fn denoising_pair<R: Rng>(config: &ModelConfig, tokens: &[usize], opts: &PretrainOptions, rng: &mut R) -> Result<Option<Pair>> {
    Ok(span_corrupt(tokens, opts.rate, opts.mean_span, rng)?.map(|Denoising { enc, target }| pair_from(config, &enc, target)))
}

/// Fixed validation windows, identical for every seed.
fn validation_pairs(config: &ModelConfig, corpus: &Corpus, opts: &PretrainOptions) -> Result<Vec<Pair>> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let mut out = Vec::new();
    for chunk in corpus.valid.chunks(opts.seq_len).take(opts.eval_windows) {
        if let Some(p) = denoising_pair(config, chunk, opts, &mut rng)? {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::Input("validation split too short to evaluate".into()));
    }
    Ok(out)
}

/// Token-weighted loss over `pairs` on one tape.
fn batch_loss<T: Float>(model: &Model<T>, cx: &mut Ctx<'_, T>, pairs: &[Pair]) -> Result<(Var, f64)> {
    let tokens: usize = pairs.iter().map(|p| p.target.len()).sum();
    let mut total: Option<Var> = None;
    let mut ce_sum = 0.0;
    for p in pairs {
        let l = model.arch.loss(cx, &p.enc, &p.dec_input(), &p.target)?;
        let w = p.target.len() as f64 / tokens as f64;
        ce_sum += cx.g.value(l.cross_entropy).item().as_f64() * p.target.len() as f64;
        let part = cx.g.scale(l.total, w);
        total = Some(match total {
            Some(t) => cx.g.add(t, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::Input("empty batch".into()))?;
    Ok((total, ce_sum / tokens as f64))
}

/// Mean cross-entropy per target token.
fn evaluate_loss<T: Float>(model: &Model<T>, pairs: &[Pair]) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pairs {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params);
        let l = model.arch.loss(&mut cx, &p.enc, &p.dec_input(), &p.target)?;
        sum += g.value(l.cross_entropy).item().as_f64() * p.target.len() as f64;
        n += p.target.len();
    }
    Ok(sum / n as f64)
}

/// Outcome of a training loop.
struct Trained {
    steps: u64,
    skipped: u64,
    steps_per_sec: f64,
    failure: Option<String>,
}

fn train_loop<T: Float>(
    model: &mut Model<T>,
    steps: u64,
    schedule: Schedule,
    mut next_batch: impl FnMut() -> Result<Vec<Pair>>,
) -> Result<Trained> {
    let mut opt = OptimState::new(&model.params, schedule);
    let start = Instant::now();
    let mut done = 0;
    for step in 0..steps {
        let batch = next_batch()?;
        let (grads, loss) = {
            let mut g = Graph::new();
            let mut cx = Ctx::new(&mut g, &model.params);
            let (total, ce) = batch_loss(model, &mut cx, &batch)?;
            let lv = g.value(total).item().as_f64();
            if !lv.is_finite() || lv > DIVERGENCE_LOSS {
                let secs = start.elapsed().as_secs_f64();
                return Ok(Trained {
                    steps: done,
                    skipped: opt.skipped,
                    steps_per_sec: done as f64 / secs.max(1e-9),
                    failure: Some(format!("diverged at step {} with loss {}", step, lv)),
                });
            }
            (g.backward(total)?.into_params(), ce)
        };
        opt.update(&mut model.params, &grads)?;
        done += 1;
        if (step + 1) % 100 == 0 {
            log::debug!("step {} loss {:.4} lr {:.5}", step + 1, loss, schedule.lr(opt.step));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Trained { steps: done, skipped: opt.skipped, steps_per_sec: done as f64 / secs.max(1e-9), failure: None })
}

/// Span-corruption pretraining followed by held-out evaluation.
pub fn pretrain<T: Float>(model: &mut Model<T>, corpus: &Corpus, opts: &PretrainOptions, size_label: &str) -> Result<RunRecord> {
    if opts.batch == 0 || opts.seq_len < 2 {
        return Err(Error::config("batch must be positive and seq_len at least 2"));
    }
    if corpus.train.len() < 2 {
        return Err(Error::Input("training split too short".into()));
    }
    let config = model.config().clone();
    let valid = validation_pairs(&config, corpus, opts)?;
    let n_enc = prepare_encoder_input(&config, &vec![0; opts.seq_len]).len();
    let cost = count_flops(&config, n_enc, opts.seq_len)?;
    let mut rec = RunRecord {
        schema_version: SCHEMA_VERSION,
        run_id: format!("{}-{}-s{}", config.family.name(), size_label, opts.seed),
        family: config.family,
        size_label: size_label.to_string(),
        params: cost.params_total,
        flops_forward: cost.flops_forward,
        n_enc,
        n_dec: opts.seq_len,
        steps_per_sec: 0.0,
        upstream_neg_log_ppl: None,
        initial_loss: None,
        downstream: BTreeMap::new(),
        downstream_mean: None,
        pretrain_steps: 0,
        finetune_steps: 0,
        skipped_steps: 0,
        seed: opts.seed,
        status: RunStatus::Pretrained,
        failure: None,
    };
    rec.initial_loss = Some(evaluate_loss(model, &valid)?);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ DATA_SALT);
    let schedule = Schedule { scale: opts.lr_scale, warmup: opts.warmup };
    let trained = train_loop(model, opts.steps, schedule, || {
        let mut batch = Vec::with_capacity(opts.batch);
        while batch.len() < opts.batch {
            let w = window(&corpus.train, opts.seq_len, &mut rng);
            if let Some(p) = denoising_pair(&config, w, opts, &mut rng)? {
                batch.push(p);
            }
        }
        Ok(batch)
    })?;
    rec.pretrain_steps = trained.steps;
    rec.skipped_steps = trained.skipped;
    rec.steps_per_sec = trained.steps_per_sec;
    if let Some(f) = trained.failure {
        warn!("{}: {}", rec.run_id, f);
        rec.status = RunStatus::Failed;
        rec.failure = Some(f);
        return Ok(rec);
    }
    let loss = evaluate_loss(model, &valid)?;
    rec.upstream_neg_log_ppl = Some(-loss);
    info!("{}: pretrained {} steps, U = {:.4}", rec.run_id, rec.pretrain_steps, -loss);
    Ok(rec)
}

/// Greedy decoding until EOS or `max_len` tokens; EOS is not returned.
pub fn greedy_decode<T: Float>(model: &Model<T>, enc: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let enc = prepare_encoder_input(model.config(), enc);
    let mut dec = vec![PAD];
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = model.logits(&enc, &dec)?;
        let last = logits.row(logits.rows() - 1);
        let next = last
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        if next == EOS {
            break;
        }
        out.push(next);
        dec.push(next);
    }
    Ok(out)
}

/// Exact-match accuracy of greedy decoding.
pub fn task_accuracy<T: Float>(model: &Model<T>, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Input("no evaluation examples".into()));
    }
    let mut hits = 0;
    for ex in examples {
        let want = &ex.target[..ex.target.len() - 1];
        if greedy_decode(model, &ex.input, want.len() + 1)? == want {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Held-out examples for one task, identical for every seed.
pub fn eval_examples(task: Task, n: usize, payload_len: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED ^ (task as u64 + 1));
    (0..n).map(|_| sample_example(task, payload_len, &mut rng)).collect()
}

/// Multi-task finetuning; completes `record` with per-task accuracies.
pub fn finetune<T: Float>(model: &mut Model<T>, opts: &FinetuneOptions, mut record: RunRecord) -> Result<RunRecord> {
    if record.status == RunStatus::Failed {
        warn!("{}: not finetuning a failed run", record.run_id);
        return Ok(record);
    }
    if opts.batch == 0 || opts.payload_len == 0 {
        return Err(Error::config("batch and payload_len must be positive"));
    }
    let config = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ DATA_SALT ^ 0xf17e);
    let schedule = Schedule { scale: opts.lr_scale, warmup: opts.warmup };
    let trained = train_loop(model, opts.steps, schedule, || {
        Ok((0..opts.batch)
            .map(|_| {
                let task = *Task::ALL.choose(&mut rng).expect("nonempty");
                let ex = sample_example(task, opts.payload_len, &mut rng);
                pair_from(&config, &ex.input, ex.target)
            })
            .collect())
    })?;
    record.finetune_steps = trained.steps;
    record.skipped_steps += trained.skipped;
    if let Some(f) = trained.failure {
        warn!("{}: {}", record.run_id, f);
        record.status = RunStatus::Failed;
        record.failure = Some(f);
        return Ok(record);
    }
    for task in Task::ALL {
        let acc = task_accuracy(model, &eval_examples(task, opts.eval_examples, opts.payload_len))?;
        record.downstream.insert(task.name().to_string(), acc);
    }
    record.downstream_mean = Some(record.downstream.values().sum::<f64>() / record.downstream.len() as f64);
    record.status = RunStatus::Complete;
    info!("{}: finetuned {} steps, D = {:.4}", record.run_id, record.finetune_steps, record.downstream_mean.unwrap_or(0.0));
    Ok(record)
}

/// Checkpoint metadata key holding the run record as JSON.
pub const RECORD_KEY: &str = "record";

pub fn save_run<T: Float>(path: &Path, model: &Model<T>, record: &RunRecord) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(RECORD_KEY.to_string(), record.to_json_line()?);
    let ck = Checkpoint { model: model.clone(), metadata };
    write_checkpoint(BufWriter::new(File::create(path)?), &ck)
}

pub fn load_run<T: Float>(path: &Path) -> Result<(Model<T>, RunRecord)> {
    let ck: Checkpoint<T> = read_checkpoint(BufReader::new(File::open(path)?))?;
    let json = ck
        .metadata
        .get(RECORD_KEY)
        .ok_or_else(|| Error::Format(format!("{} has no run record", path.display())))?;
    Ok((ck.model, serde_json::from_str(json)?))
}

/// Where a ladder run persists its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs<'a> {
    pub sink: Option<&'a ResultsSink>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Pretrains and finetunes every `(entry, seed)` pair on up to `jobs` threads.
/// Records come back in entry-major, seed-minor order.
pub fn run_ladder(
    entries: &[LadderEntry],
    seeds: &[u64],
    corpus: &Corpus,
    pre: &PretrainOptions,
    fine: &FinetuneOptions,
    jobs: usize,
    outputs: &RunOutputs<'_>,
) -> Result<Vec<RunRecord>> {
    let work: Vec<(&LadderEntry, u64)> = entries.iter().flat_map(|e| seeds.iter().map(move |&s| (e, s))).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRecord>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let run_one = |entry: &LadderEntry, seed: u64| -> Result<RunRecord> {
        let mut model = Model::<f32>::build(&entry.config, seed)?;
        let rec = pretrain(&mut model, corpus, &PretrainOptions { seed, ..pre.clone() }, &entry.label)?;
        if let Some(dir) = &outputs.checkpoint_dir {
            save_run(&dir.join(format!("{}.ckpt", rec.run_id)), &model, &rec)?;
        }
        let rec = if fine.steps == 0 { rec } else { finetune(&mut model, &FinetuneOptions { seed, ..fine.clone() }, rec)? };
        if let Some(sink) = outputs.sink {
            sink.append(&rec)?;
        }
        Ok(rec)
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, work.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(entry, seed)) = work.get(i) else { break };
                let r = run_one(entry, seed);
                results.lock().expect("results lock poisoned")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock poisoned")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}
