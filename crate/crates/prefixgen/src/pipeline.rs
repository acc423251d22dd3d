//! End-to-end harness: synthetic corpus generation, ingestion with
//! property labeling, the training loop (adaptive-moment updates, gradient
//! clipping, condition dropout, checkpoint cadence), evaluation metrics,
//! and the control sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as FmtWrite;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    parse_pocket_file, select_anchor_inference, select_anchor_training, EncoderError, PocketGraph,
};
use crate::losses::{
    autoregressive_loss, total_loss, triplet_property_loss, LossError, DEFAULT_PRED_WEIGHT,
};
use crate::model::{
    save_checkpoint, CheckpointError, LoadedCheckpoint, LoadedTensor, Model, ModelConfig,
    ModelError, SampleParams,
};
use crate::props::{
    fingerprint, property_vector, tanimoto, Fingerprint, PropVec, VinaOracle, N_PROPERTIES,
};
use crate::smiles::{
    build_vocab, detokenize, parse, tokenize, validate, Vocab, BOS_ID, EOS_ID, PAD_ID,
};
use crate::tensor::{no_grad, Tensor, TensorError};

/// Circular-fingerprint radius used by every similarity metric here.
pub const FP_RADIUS: usize = 2;

/// Version of the JSONL dataset schema.
pub const DATA_FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("dataset is empty after filtering")]
    EmptyDataset,
    #[error("loss diverged at step {step} (at {at}, pred {pred})")]
    Diverged { step: u64, at: f32, pred: f32 },
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("dataset line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("dataset tokens are not covered by the checkpoint vocabulary")]
    VocabMismatch,
    #[error("checkpoint model configuration does not match the requested one")]
    ConfigMismatch,
    #[error("optimizer state for {name} is missing or malformed")]
    OptState { name: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Distinct valid molecules from a small fragment grammar: chain atoms,
/// decorated carbons, and six-membered rings with alternating closure
/// digits. Every candidate is parsed and valence-checked before acceptance.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts <= n.max(64) * 200, "fragment grammar starved after {attempts} attempts");
        let s = random_molecule(&mut rng);
        let short = tokenize(&s).map(|t| t.len() <= 40).unwrap_or(false);
        let ok = short && parse(&s).map(|g| validate(&g).valid).unwrap_or(false);
        if ok && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

fn random_molecule<R: Rng>(rng: &mut R) -> String {
    const CHAIN: [&str; 8] = ["C", "C", "C", "CC", "N", "O", "CO", "CN"];
    const DECOR: [&str; 5] = ["C(C)", "C(F)", "C(Cl)", "C(=O)", "C(O)"];
    let units = rng.gen_range(3..=7);
    let mut s = String::new();
    let mut ring_digit = 1u8;
    for _ in 0..units {
        match rng.gen_range(0..10u8) {
            0..=5 => s.push_str(CHAIN[rng.gen_range(0..CHAIN.len())]),
            6..=7 => s.push_str(DECOR[rng.gen_range(0..DECOR.len())]),
            8 => {
                let d = ring_digit;
                ring_digit = 3 - d;
                let _ = write!(s, "c{d}ccccc{d}");
            }
            _ => {
                let d = ring_digit;
                ring_digit = 3 - d;
                let _ = write!(s, "C{d}CCCCC{d}");
            }
        }
    }
    s
}

/// A pocket file: a Gaussian atom cloud around the origin plus a few
/// ligand reference points near its center.
pub fn synthetic_pocket(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    const ELEMENTS: [&str; 4] = ["C", "N", "O", "S"];
    let n = rng.gen_range(12..=20);
    let mut text = String::from("# synthetic pocket\n");
    for _ in 0..n {
        let e = ELEMENTS[rng.gen_range(0..ELEMENTS.len())];
        let _ = writeln!(
            text,
            "{e} {:.3} {:.3} {:.3}",
            3.0 * gauss(&mut rng),
            3.0 * gauss(&mut rng),
            3.0 * gauss(&mut rng)
        );
    }
    text.push_str("LIGAND\n");
    for _ in 0..rng.gen_range(1..=3) {
        let _ = writeln!(
            text,
            "{:.3} {:.3} {:.3}",
            gauss(&mut rng),
            gauss(&mut rng),
            gauss(&mut rng)
        );
    }
    text
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub smiles: String,
    pub props: PropVec,
    pub pocket: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
}

pub struct IngestReport {
    pub dataset: Dataset,
    pub skipped: usize,
}

/// Reads one molecule per line (`SMILES` or `SMILES<TAB>pocket_file`,
/// `#` comments allowed), validates it, and labels it with freshly computed
/// properties. Unparseable molecules and unreadable pockets are counted
/// and dropped.
pub fn ingest(
    smiles_text: &str,
    pocket_dir: Option<&Path>,
    oracle: &dyn VinaOracle,
) -> Result<IngestReport, PipelineError> {
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for raw in smiles_text.lines() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (smi, pocket_name) = match line.split_once('\t') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (line, None),
        };
        let labeled = parse(smi)
            .ok()
            .filter(|g| validate(g).valid)
            .and_then(|g| property_vector(&g, oracle).ok());
        let Some(props) = labeled else {
            skipped += 1;
            continue;
        };
        let pocket = match pocket_name {
            Some(name) if !name.is_empty() => {
                let path =
                    pocket_dir.map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name));
                let readable = std::fs::read_to_string(&path)
                    .ok()
                    .and_then(|t| parse_pocket_file(&t).ok())
                    .is_some();
                if !readable {
                    skipped += 1;
                    continue;
                }
                Some(path)
            }
            _ => None,
        };
        examples.push(LabeledExample { smiles: smi.to_string(), props, pocket });
    }
    if examples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(IngestReport { dataset: Dataset { examples }, skipped })
}

#[derive(Serialize, Deserialize)]
struct Record {
    smiles: String,
    vina: Option<f64>,
    qed: f64,
    sa: f64,
    logp: f64,
    lipinski: u8,
    pocket: Option<String>,
}

pub fn write_dataset_jsonl<W: Write>(w: &mut W, data: &Dataset) -> io::Result<()> {
    for ex in &data.examples {
        let rec = Record {
            smiles: ex.smiles.clone(),
            vina: ex.props.mask[0].then_some(ex.props.vina),
            qed: ex.props.qed,
            sa: ex.props.sa,
            logp: ex.props.logp,
            lipinski: ex.props.lipinski,
            pocket: ex.pocket.as_ref().map(|p| p.to_string_lossy().into_owned()),
        };
        serde_json::to_writer(&mut *w, &rec)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Loads a labeled dataset. Unless `trust` is set the stored labels are
/// ignored and recomputed from the SMILES, dropping rows that no longer
/// validate; malformed JSON is a hard error either way.
pub fn read_dataset_jsonl(
    text: &str,
    trust: bool,
    oracle: &dyn VinaOracle,
) -> Result<IngestReport, PipelineError> {
    let mut examples = Vec::new();
    let mut skipped = 0usize;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| PipelineError::BadRecord { line: idx + 1, reason: e.to_string() })?;
        let pocket = rec.pocket.clone().map(PathBuf::from);
        if trust {
            let props = PropVec {
                vina: rec.vina.unwrap_or(0.0),
                qed: rec.qed,
                sa: rec.sa,
                logp: rec.logp,
                lipinski: rec.lipinski,
                mask: [rec.vina.is_some(), true, true, true, true],
            };
            examples.push(LabeledExample { smiles: rec.smiles, props, pocket });
        } else {
            let labeled = parse(&rec.smiles)
                .ok()
                .filter(|g| validate(g).valid)
                .and_then(|g| property_vector(&g, oracle).ok());
            match labeled {
                Some(props) => {
                    examples.push(LabeledExample { smiles: rec.smiles, props, pocket })
                }
                None => skipped += 1,
            }
        }
    }
    if examples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    Ok(IngestReport { dataset: Dataset { examples }, skipped })
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adaptive-moment estimation with bias correction and optional global
/// gradient-norm clipping. All state is f32 so checkpoint round trips are
/// lossless; a missing gradient counts as zero so moments keep decaying.
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    slots: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f32, beta1: f32, beta2: f32, eps: f32) -> AdamState {
        assert!(lr.is_finite() && lr >= 0.0, "learning rate must be finite and non-negative");
        AdamState { lr, beta1, beta2, eps, t: 0, slots: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over every parameter. `clip` caps the global L2 norm of
    /// the concatenated gradient; pass infinity to disable.
    pub fn step(&mut self, params: &[(String, Tensor)], clip: f32) {
        self.t += 1;
        let mut sq = 0.0f64;
        for (_, p) in params {
            if let Some(g) = p.grad() {
                for x in &g {
                    sq += (*x as f64) * (*x as f64);
                }
            }
        }
        let norm = sq.sqrt();
        let scale = if clip > 0.0 && clip.is_finite() && norm > clip as f64 {
            (clip as f64 / norm) as f32
        } else {
            1.0
        };
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params {
            let n = p.len();
            let g = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let mut w = p.to_vec();
            for i in 0..n {
                let gi = g[i] * scale;
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
            p.set_data(&w);
        }
    }
}

fn optimizer_extras(model: &Model, opt: &AdamState) -> Vec<(String, Tensor)> {
    if opt.t == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for (name, p) in model.parameters() {
        if let Some((m, v)) = opt.slots.get(&name) {
            let (r, c) = p.shape();
            out.push((format!("opt.m.{name}"), Tensor::from_vec(r, c, m.clone())));
            out.push((format!("opt.v.{name}"), Tensor::from_vec(r, c, v.clone())));
        }
    }
    out
}

fn restore_optimizer(
    opt: &mut AdamState,
    extras: &[LoadedTensor],
    step: u64,
    params: &[(String, Tensor)],
) -> Result<(), PipelineError> {
    if !extras.iter().any(|e| e.name.starts_with("opt.")) {
        return Ok(());
    }
    for (name, p) in params {
        let find = |kind: &str| {
            extras
                .iter()
                .find(|e| e.name == format!("opt.{kind}.{name}"))
                .filter(|e| (e.rows, e.cols) == p.shape())
                .ok_or_else(|| PipelineError::OptState { name: name.clone() })
        };
        let m = find("m")?;
        let v = find("v")?;
        opt.slots.insert(name.clone(), (m.data.clone(), v.data.clone()));
    }
    opt.t = step;
    Ok(())
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub grad_clip: f32,
    pub batch_size: usize,
    pub steps: u64,
    pub w_pred: f32,
    pub p_drop: f32,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub holdout: usize,
    /// Molecules sampled per step to feed the property-prediction loss.
    pub pred_samples: usize,
}

impl TrainConfig {
    pub fn desk(model: ModelConfig) -> TrainConfig {
        TrainConfig {
            model,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            batch_size: 16,
            steps: 200,
            w_pred: DEFAULT_PRED_WEIGHT,
            p_drop: 0.1,
            seed: 0,
            checkpoint_every: 0,
            holdout: 32,
            pred_samples: 2,
        }
    }

    /// Applies one `key = value` override; keys mirror the field names,
    /// with the model's under `d`, `heads`, `layers`, `max_len`,
    /// `model_seed`. The vocabulary size always comes from the data.
    pub fn apply_key_value(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, PipelineError> {
            value
                .parse()
                .map_err(|_| PipelineError::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "d" => self.model.d = num(key, value)?,
            "heads" => self.model.heads = num(key, value)?,
            "layers" => self.model.layers = num(key, value)?,
            "max_len" => self.model.max_len = num(key, value)?,
            "model_seed" => self.model.seed = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "grad_clip" => self.grad_clip = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "w_pred" => self.w_pred = num(key, value)?,
            "p_drop" => self.p_drop = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            "holdout" => self.holdout = num(key, value)?,
            "pred_samples" => self.pred_samples = num(key, value)?,
            _ => return Err(PipelineError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` config file ('#' comments allowed) on
    /// top of this configuration.
    pub fn apply_file_text(&mut self, text: &str) -> Result<(), PipelineError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected key = value", idx + 1))
            })?;
            self.apply_key_value(k.trim(), v.trim())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub at_loss: f32,
    pub pred_loss: f32,
    pub total: f32,
    pub tokens: usize,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocab,
    pub opt: AdamState,
    pub steps_done: u64,
    pub log: Vec<StepLog>,
    /// Held-out mean per-token loss when this call started and when it
    /// finished.
    pub initial_holdout: f32,
    pub final_holdout: f32,
    /// Examples dropped for exceeding the context or failing to tokenize.
    pub skipped_long: usize,
}

impl TrainOutcome {
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut buf = Vec::new();
        save_checkpoint(
            &mut buf,
            &self.model,
            &self.vocab,
            self.steps_done,
            &optimizer_extras(&self.model, &self.opt),
        )?;
        Ok(buf)
    }
}

/// Training-log CSV: one line per step with the loss breakdown and
/// throughput. Only the timing column depends on the wall clock.
pub fn write_train_log<W: Write>(w: &mut W, log: &[StepLog]) -> io::Result<()> {
    writeln!(w, "step,at_loss,pred_loss,total,tokens_per_sec")?;
    for l in log {
        let tps = if l.seconds > 0.0 { l.tokens as f64 / l.seconds } else { 0.0 };
        writeln!(w, "{},{},{},{},{:.1}", l.step, l.at_loss, l.pred_loss, l.total, tps)?;
    }
    Ok(())
}

#[derive(Default)]
struct PocketCache {
    map: BTreeMap<PathBuf, (PocketGraph, Vec<[f64; 3]>)>,
}

impl PocketCache {
    fn load(&mut self, path: &Path) -> Result<&(PocketGraph, Vec<[f64; 3]>), PipelineError> {
        if !self.map.contains_key(path) {
            let text = std::fs::read_to_string(path)?;
            let cloud = parse_pocket_file(&text)?;
            let g = PocketGraph::build(&cloud)?;
            self.map.insert(path.to_path_buf(), (g, cloud.ligand_refs));
        }
        Ok(&self.map[path])
    }

    fn training<R: Rng>(&mut self, path: &Path, rng: &mut R) -> Result<PocketGraph, PipelineError> {
        let (g0, refs) = self.load(path)?;
        let mut g = g0.clone();
        g.anchor = Some(select_anchor_training(&g, refs, rng)?);
        Ok(g)
    }

    fn inference(&mut self, path: &Path) -> Result<PocketGraph, PipelineError> {
        let (g0, refs) = self.load(path)?;
        let mut g = g0.clone();
        g.anchor = Some(select_anchor_inference(&g, refs)?);
        Ok(g)
    }
}

/// Teacher-forcing pair: the model reads `[BOS, tokens, EOS]` and is scored
/// against `[tokens, EOS]`; the position after EOS gets a padding target
/// that the loss ignores, and the EOS position's hidden state feeds the
/// property head.
fn teacher_pair(content: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(content.len() + 2);
    input.push(BOS_ID);
    input.extend_from_slice(content);
    input.push(EOS_ID);
    let mut targets = Vec::with_capacity(content.len() + 2);
    targets.extend_from_slice(content);
    targets.push(EOS_ID);
    targets.push(PAD_ID);
    (input, targets)
}

fn prop_tensor(c: &PropVec) -> Tensor {
    Tensor::from_vec(1, N_PROPERTIES, c.values().iter().map(|&v| v as f32).collect())
}

fn mean_at_loss(
    model: &Model,
    items: &[(usize, Vec<usize>)],
    data: &Dataset,
    cache: &mut PocketCache,
) -> Result<f32, PipelineError> {
    let _guard = no_grad();
    let mut total = 0.0f64;
    for (ei, content) in items {
        let ex = &data.examples[*ei];
        let pocket = match &ex.pocket {
            Some(p) => Some(cache.inference(p)?),
            None => None,
        };
        let prefix = model.encoder.assemble_prefix(pocket.as_ref(), &ex.props)?;
        let (input, targets) = teacher_pair(content);
        let (logits, _) = model.forward(&prefix, &input)?;
        total += autoregressive_loss(&logits, &targets)?.item() as f64;
    }
    Ok((total / items.len() as f64) as f32)
}

fn sampled_properties(
    model: &Model,
    prefix: &Tensor,
    seed: u64,
    vocab: &Vocab,
    oracle: &dyn VinaOracle,
    conditioned: &PropVec,
) -> Result<Option<(Tensor, [bool; N_PROPERTIES])>, PipelineError> {
    let params = SampleParams {
        max_len: model.config.max_len,
        temperature: 1.0,
        top_k: 20,
        seed,
    };
    let ids = model.sample(prefix, &params)?;
    let Ok(toks) = vocab.decode(&ids) else { return Ok(None) };
    let smiles = detokenize(&toks);
    let Ok(g) = parse(&smiles) else { return Ok(None) };
    if !validate(&g).valid {
        return Ok(None);
    }
    let Ok(p) = property_vector(&g, oracle) else { return Ok(None) };
    let mut mask = [false; N_PROPERTIES];
    for i in 0..N_PROPERTIES {
        mask[i] = conditioned.mask[i] && p.mask[i];
    }
    Ok(Some((prop_tensor(&p), mask)))
}

/// Runs `config.steps` optimization steps, continuing from `resume_from`
/// when given. The step counter, minibatch RNG streams, and optimizer state
/// all carry across the boundary, so a split run reproduces an
/// uninterrupted one bit for bit.
pub fn train(
    config: &TrainConfig,
    data: &Dataset,
    oracle: &dyn VinaOracle,
    resume_from: Option<LoadedCheckpoint>,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome, PipelineError> {
    assert!(config.batch_size >= 1, "batch size must be at least 1");
    assert!((0.0..=1.0).contains(&config.p_drop), "p_drop must be a probability");

    // Tokenize and length-filter up front; everything downstream reuses
    // these id sequences.
    let mut skipped_long = 0usize;
    let mut token_seqs = Vec::new();
    for (i, ex) in data.examples.iter().enumerate() {
        match tokenize(&ex.smiles) {
            Ok(t) if t.len() + 2 <= config.model.max_len => token_seqs.push((i, t)),
            _ => skipped_long += 1,
        }
    }
    if token_seqs.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }

    let vocab = match &resume_from {
        Some(ckpt) => ckpt.vocab.clone(),
        None => build_vocab(token_seqs.iter().map(|(_, t)| t.as_slice()))
            .map_err(|_| PipelineError::EmptyDataset)?,
    };
    let mut encoded = Vec::with_capacity(token_seqs.len());
    for (i, toks) in &token_seqs {
        let ids = vocab.encode(toks).map_err(|_| PipelineError::VocabMismatch)?;
        encoded.push((*i, ids));
    }

    let h = config.holdout.min(encoded.len() - 1);
    let (train_items, holdout_items) = encoded.split_at(encoded.len() - h);
    let holdout_items = if holdout_items.is_empty() { train_items } else { holdout_items };

    let mut expected = config.model;
    expected.vocab = vocab.size();
    let (model, start_step, resume_extras) = match resume_from {
        Some(ckpt) => {
            if ckpt.model.config != expected {
                return Err(PipelineError::ConfigMismatch);
            }
            (ckpt.model, ckpt.step, ckpt.extra)
        }
        None => (Model::init(expected), 0, Vec::new()),
    };
    let params = model.parameters();
    let mut opt = AdamState::new(config.lr, config.beta1, config.beta2, config.adam_eps);
    restore_optimizer(&mut opt, &resume_extras, start_step, &params)?;
    let mut cache = PocketCache::default();

    let initial_holdout = mean_at_loss(&model, holdout_items, data, &mut cache)?;
    let mut log = Vec::with_capacity(config.steps as usize);
    let end_step = start_step + config.steps;
    for step in start_step..end_step {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step + 1);

        let mut at_sum: Option<Tensor> = None;
        let mut pred_sum: Option<Tensor> = None;
        let mut pred_n = 0usize;
        let mut tokens = 0usize;
        for b in 0..config.batch_size {
            let (ei, content) = &train_items[rng.gen_range(0..train_items.len())];
            let ex = &data.examples[*ei];
            let drop_pocket = rng.gen::<f32>() < config.p_drop;
            let mut c = ex.props;
            for i in 0..N_PROPERTIES {
                if rng.gen::<f32>() < config.p_drop {
                    c.mask[i] = false;
                }
            }
            let pocket = match &ex.pocket {
                Some(p) if !drop_pocket => Some(cache.training(p, &mut rng)?),
                _ => None,
            };
            let prefix = model.encoder.assemble_prefix(pocket.as_ref(), &c)?;
            let (input, targets) = teacher_pair(content);
            tokens += input.len();
            let (logits, hiddens) = model.forward(&prefix, &input)?;
            let at = autoregressive_loss(&logits, &targets)?;
            at_sum = Some(match at_sum {
                Some(s) => s.add(&at),
                None => at,
            });
            if b < config.pred_samples {
                let sample_seed = rng.gen::<u64>();
                if let Some((measured, mask)) =
                    sampled_properties(&model, &prefix, sample_seed, &vocab, oracle, &c)?
                {
                    let pred = model.predict_conditions(&hiddens);
                    let loss = triplet_property_loss(&pred, &prop_tensor(&c), &measured, &mask);
                    pred_sum = Some(match pred_sum {
                        Some(s) => s.add(&loss),
                        None => loss,
                    });
                    pred_n += 1;
                }
            }
        }
        let at_batch = at_sum.expect("batch_size >= 1").scale(1.0 / config.batch_size as f32);
        let pred_batch = match pred_sum {
            Some(s) => s.scale(1.0 / pred_n as f32),
            None => Tensor::scalar(0.0),
        };
        let breakdown = total_loss(&at_batch, &pred_batch, config.w_pred);
        let (at_v, pred_v, total_v) =
            (breakdown.at_loss.item(), breakdown.pred_loss.item(), breakdown.total.item());
        if !total_v.is_finite() {
            return Err(PipelineError::Diverged { step, at: at_v, pred: pred_v });
        }
        breakdown.total.backward()?;
        opt.step(&params, config.grad_clip);
        for (_, p) in &params {
            p.zero_grad();
        }
        log.push(StepLog {
            step,
            at_loss: at_v,
            pred_loss: pred_v,
            total: total_v,
            tokens,
            seconds: started.elapsed().as_secs_f64(),
        });

        let done = step + 1;
        if let Some(dir) = ckpt_dir {
            if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < end_step
            {
                save_to_dir(dir, &format!("step{done:06}.ckpt"), &model, &vocab, done, &opt)?;
            }
        }
    }

    let final_holdout = mean_at_loss(&model, holdout_items, data, &mut cache)?;
    if let Some(dir) = ckpt_dir {
        save_to_dir(dir, "final.ckpt", &model, &vocab, end_step, &opt)?;
    }
    Ok(TrainOutcome {
        vocab,
        opt,
        steps_done: end_step,
        log,
        initial_holdout,
        final_holdout,
        skipped_long,
        model,
    })
}

fn save_to_dir(
    dir: &Path,
    name: &str,
    model: &Model,
    vocab: &Vocab,
    step: u64,
    opt: &AdamState,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    save_checkpoint(&mut w, model, vocab, step, &optimizer_extras(model, opt))?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConditionsMode {
    GroundTruth,
    Shifted { property: usize, scale: f64 },
    Unconditional,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub requested: usize,
    pub valid: usize,
    pub validity: f64,
    pub diversity: f64,
    pub sim_train: f64,
    /// Achieved-property statistics over the valid samples; NaN when
    /// nothing was valid (or, for the MAE, nothing was conditioned).
    pub property_mean: [f64; N_PROPERTIES],
    pub property_std: [f64; N_PROPERTIES],
    pub property_mae: [f64; N_PROPERTIES],
}

pub(crate) fn pairwise_diversity(fps: &[Fingerprint]) -> f64 {
    if fps.len() < 2 {
        return 0.0;
    }
    let mut total = 0.0f64;
    let mut n = 0u64;
    for i in 0..fps.len() {
        for j in i + 1..fps.len() {
            total += tanimoto(&fps[i], &fps[j]).expect("uniform fingerprint width");
            n += 1;
        }
    }
    1.0 - total / n as f64
}

pub(crate) fn mean_max_similarity(sample: &[Fingerprint], train: &[Fingerprint]) -> f64 {
    if sample.is_empty() || train.is_empty() {
        return 0.0;
    }
    let mut total = 0.0f64;
    for s in sample {
        let best = train
            .iter()
            .map(|t| tanimoto(s, t).expect("uniform fingerprint width"))
            .fold(0.0f64, f64::max);
        total += best;
    }
    total / sample.len() as f64
}

/// Samples molecules against the dataset's conditions (cycled) and scores
/// them. Sample i uses seed `seed + i`, so equal seeds reproduce equal
/// reports and a zero-shift sweep row matches the ground-truth one.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    data: &Dataset,
    n_samples: usize,
    mode: ConditionsMode,
    seed: u64,
    oracle: &dyn VinaOracle,
) -> Result<EvalReport, PipelineError> {
    assert!(n_samples >= 1, "need at least one sample");
    if data.examples.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut cache = PocketCache::default();
    let train_fps: Vec<Fingerprint> = data
        .examples
        .iter()
        .filter_map(|ex| parse(&ex.smiles).ok().map(|g| fingerprint(&g, FP_RADIUS)))
        .collect();

    let mut fps = Vec::new();
    let mut achieved: Vec<[f64; N_PROPERTIES]> = Vec::new();
    let mut conditioned: Vec<PropVec> = Vec::new();
    for i in 0..n_samples {
        let ex = &data.examples[i % data.examples.len()];
        let (c, pocket_path) = match mode {
            ConditionsMode::GroundTruth => (ex.props, ex.pocket.as_deref()),
            ConditionsMode::Shifted { property, scale } => {
                (ex.props.shifted(property, scale), ex.pocket.as_deref())
            }
            ConditionsMode::Unconditional => {
                (PropVec { mask: [false; N_PROPERTIES], ..ex.props }, None)
            }
        };
        let pocket = match pocket_path {
            Some(p) => Some(cache.inference(p)?),
            None => None,
        };
        let prefix = model.encoder.assemble_prefix(pocket.as_ref(), &c)?;
        let params = SampleParams {
            max_len: model.config.max_len,
            temperature: 1.0,
            top_k: 20,
            seed: seed.wrapping_add(i as u64),
        };
        let ids = model.sample(&prefix, &params)?;
        let Ok(toks) = vocab.decode(&ids) else { continue };
        let smiles = detokenize(&toks);
        let Ok(g) = parse(&smiles) else { continue };
        if !validate(&g).valid {
            continue;
        }
        let Ok(p) = property_vector(&g, oracle) else { continue };
        fps.push(fingerprint(&g, FP_RADIUS));
        achieved.push(p.values());
        conditioned.push(c);
    }

    let valid = fps.len();
    let mut property_mean = [f64::NAN; N_PROPERTIES];
    let mut property_std = [f64::NAN; N_PROPERTIES];
    let mut property_mae = [f64::NAN; N_PROPERTIES];
    if valid > 0 {
        for p in 0..N_PROPERTIES {
            let vals: Vec<f64> = achieved.iter().map(|a| a[p]).collect();
            let mean = vals.iter().sum::<f64>() / valid as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / valid as f64;
            property_mean[p] = mean;
            property_std[p] = var.sqrt();
            let errs: Vec<f64> = achieved
                .iter()
                .zip(&conditioned)
                .filter(|(_, c)| c.mask[p])
                .map(|(a, c)| (a[p] - c.values()[p]).abs())
                .collect();
            if !errs.is_empty() {
                property_mae[p] = errs.iter().sum::<f64>() / errs.len() as f64;
            }
        }
    }
    Ok(EvalReport {
        requested: n_samples,
        valid,
        validity: valid as f64 / n_samples as f64,
        diversity: pairwise_diversity(&fps),
        sim_train: mean_max_similarity(&fps, &train_fps),
        property_mean,
        property_std,
        property_mae,
    })
}

/// Scalar condition names in prefix-row order; also the JSONL field names.
pub const PROPERTY_NAMES: [&str; N_PROPERTIES] = ["vina", "qed", "sa", "logp", "lipinski"];

pub fn write_eval_report<W: Write>(w: &mut W, r: &EvalReport) -> io::Result<()> {
    writeln!(w, "samples,{}", r.requested)?;
    writeln!(w, "valid,{}", r.valid)?;
    writeln!(w, "validity,{}", r.validity)?;
    writeln!(w, "diversity,{}", r.diversity)?;
    writeln!(w, "sim_train,{}", r.sim_train)?;
    for p in 0..N_PROPERTIES {
        writeln!(
            w,
            "{},{},{},{}",
            PROPERTY_NAMES[p], r.property_mean[p], r.property_std[p], r.property_mae[p]
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub scale: f64,
    pub mean: f64,
    pub std: f64,
    pub valid: usize,
}

/// Shifts one property's conditioning by each scale, samples, and reports
/// the achieved statistics for that property. Every scale reuses the same
/// base seed, so the zero-scale row coincides with a ground-truth run.
pub fn control_sweep(
    model: &Model,
    vocab: &Vocab,
    data: &Dataset,
    property: usize,
    scales: &[f64],
    n_samples: usize,
    seed: u64,
    oracle: &dyn VinaOracle,
) -> Result<Vec<SweepRow>, PipelineError> {
    assert!(property < N_PROPERTIES, "property index out of range");
    scales
        .iter()
        .map(|&scale| {
            let rep = evaluate(
                model,
                vocab,
                data,
                n_samples,
                ConditionsMode::Shifted { property, scale },
                seed,
                oracle,
            )?;
            Ok(SweepRow {
                scale,
                mean: rep.property_mean[property],
                std: rep.property_std[property],
                valid: rep.valid,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(w: &mut W, property: usize, rows: &[SweepRow]) -> io::Result<()> {
    writeln!(w, "scale,{0}_mean,{0}_std,valid", PROPERTY_NAMES[property])?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.scale, r.mean, r.std, r.valid)?;
    }
    Ok(())
}
