//! The prefix-conditional decoder: token and positional embeddings, a
//! stack of causal transformer blocks over the extended (prefix + tokens)
//! matrix, an LM head over token positions, a property prediction head on
//! the final position, and autoregressive sampling.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{transformer_block_with_maps, AttentionError, AttentionWeights};
use crate::encoders::{ConditionEncoder, Mlp, CONDITION_ROWS};
use crate::smiles::{Vocab, BOS_ID, EOS_ID, PAD_ID};
use crate::tensor::store::{read_container, write_container, StoreError};
pub use crate::tensor::store::LoadedTensor;
use crate::tensor::{no_grad, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults; vocabulary size comes from the corpus.
    pub fn desk(vocab: usize, seed: u64) -> ModelConfig {
        ModelConfig { d: 128, heads: 4, layers: 4, max_len: 128, vocab, seed }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    VocabMismatch { id: usize, vocab: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("checkpoint meta: {0}")]
    Meta(String),
    #[error("checkpoint is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("tensor {name}: checkpoint shape {got:?} does not match model {expected:?}")]
    TensorShape { name: String, expected: (usize, usize), got: (usize, usize) },
    #[error(transparent)]
    Vocab(#[from] crate::smiles::VocabError),
}

pub struct Model {
    pub config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<AttentionWeights>,
    lm_w: Tensor,
    lm_b: Tensor,
    prop_head: Mlp,
    pub encoder: ConditionEncoder,
}

impl Model {
    /// Builds a freshly initialized model; all randomness comes from the
    /// config seed, so equal configs give bit-identical weights.
    pub fn init(config: ModelConfig) -> Model {
        assert!(config.d % config.heads == 0, "width {} not divisible by {} heads", config.d, config.heads);
        assert!(config.max_len >= 2, "max_len must be at least 2");
        assert!(config.vocab > EOS_ID, "vocabulary must include the specials");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        Model {
            tok_emb: Tensor::randn(config.vocab, d, 0.02, &mut rng).with_grad(),
            pos_emb: Tensor::randn(config.max_len, d, 0.02, &mut rng).with_grad(),
            blocks: (0..config.layers).map(|_| AttentionWeights::init(d, config.heads, &mut rng)).collect(),
            lm_w: Tensor::randn(d, config.vocab, 1.0 / (d as f32).sqrt(), &mut rng).with_grad(),
            lm_b: Tensor::zeros(1, config.vocab).with_grad(),
            prop_head: Mlp::init(d, d / 2, crate::props::N_PROPERTIES, &mut rng),
            encoder: ConditionEncoder::init(d, &mut rng),
            config,
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        assert!(!ids.is_empty() && ids[0] == BOS_ID, "sequences start at BOS");
        if ids.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: ids.len(), max: self.config.max_len });
        }
        for &id in ids {
            if id >= self.config.vocab {
                return Err(ModelError::VocabMismatch { id, vocab: self.config.vocab });
            }
        }
        Ok(())
    }

    /// Runs the stack over `[prefix; embed(ids) + positions]` under the
    /// causal mask. Returns LM logits for the token positions and the final
    /// hidden matrix over all extended positions.
    pub fn forward(&self, prefix: &Tensor, ids: &[usize]) -> Result<(Tensor, Tensor), ModelError> {
        self.forward_with_maps(prefix, ids).map(|(l, h, _)| (l, h))
    }

    /// `forward` plus every block's per-head attention maps, each map
    /// shaped over the extended positions.
    pub fn forward_with_maps(
        &self,
        prefix: &Tensor,
        ids: &[usize],
    ) -> Result<(Tensor, Tensor, Vec<Vec<Tensor>>), ModelError> {
        self.check_ids(ids)?;
        assert_eq!(prefix.shape(), (CONDITION_ROWS, self.config.d), "prefix shape");
        let l = ids.len();
        let tok = self.tok_emb.embed(&std::rc::Rc::new(ids.to_vec()));
        let x = tok.add(&self.pos_emb.slice_rows(0, l));
        let mut h = prefix.concat_rows(&x);
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (next, block_maps) = transformer_block_with_maps(&h, block)?;
            h = next;
            maps.push(block_maps);
        }
        let logits = h.slice_rows(CONDITION_ROWS, l).matmul(&self.lm_w).add(&self.lm_b.tile_rows(l));
        Ok((logits, h, maps))
    }

    /// Property estimates read from the final position's hidden state.
    pub fn predict_conditions(&self, hiddens: &Tensor) -> Tensor {
        let last = hiddens.slice_rows(hiddens.rows() - 1, 1);
        self.prop_head.forward(&last)
    }

    /// Autoregressive decoding. Greedy at temperature 0, otherwise top-k
    /// truncated temperature sampling. Returns content token ids, BOS and
    /// the terminating EOS stripped. BOS and PAD are never emitted.
    pub fn sample(&self, prefix: &Tensor, params: &SampleParams) -> Result<Vec<usize>, ModelError> {
        let _guard = no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let max_len = params.max_len.min(self.config.max_len);
        let mut ids = vec![BOS_ID];
        while ids.len() < max_len {
            let (logits, _) = self.forward(prefix, &ids)?;
            let row = logits.slice_rows(logits.rows() - 1, 1).to_vec();
            let next = pick_token(&row, params.temperature, params.top_k, &mut rng);
            if next == EOS_ID {
                break;
            }
            ids.push(next);
        }
        Ok(ids[1..].to_vec())
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.clone()), ("pos_emb".to_string(), self.pos_emb.clone())];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.parameters() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out.push(("lm.w".into(), self.lm_w.clone()));
        out.push(("lm.b".into(), self.lm_b.clone()));
        self.prop_head.push_params("prop", &mut out);
        out.extend(self.encoder.parameters());
        out
    }

    #[cfg(test)]
    fn lm_bias(&self) -> &Tensor {
        &self.lm_b
    }

    #[cfg(test)]
    fn prop_head(&self) -> &Mlp {
        &self.prop_head
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleParams {
    pub max_len: usize,
    pub temperature: f32,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams { max_len: 128, temperature: 1.0, top_k: 20, seed: 0 }
    }
}

/// Next-token choice from one logit row. BOS and PAD are masked out; ties
/// resolve to the lowest id so greedy decoding is total-order deterministic.
fn pick_token<R: Rng>(row: &[f32], temperature: f32, top_k: usize, rng: &mut R) -> usize {
    let allowed: Vec<usize> = (0..row.len()).filter(|&i| i != BOS_ID && i != PAD_ID).collect();
    if temperature <= 0.0 {
        return allowed
            .iter()
            .copied()
            .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(b.cmp(&a)))
            .unwrap();
    }
    let mut order = allowed;
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k.max(1));
    let scaled: Vec<f64> = order.iter().map(|&i| (row[i] / temperature) as f64).collect();
    let m = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (k, &w) in weights.iter().enumerate() {
        draw -= w;
        if draw <= 0.0 {
            return order[k];
        }
    }
    *order.last().unwrap()
}

/// Writes config, vocabulary, step counter and every named tensor. Extra
/// tensors (e.g. optimizer state) ride along under their own names.
pub fn save_checkpoint<W: Write>(
    w: &mut W,
    model: &Model,
    vocab: &Vocab,
    step: u64,
    extra: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let meta = serde_json::json!({
        "version": CHECKPOINT_VERSION,
        "step": step,
        "config": model.config,
        "vocab": vocab.texts(),
    });
    let mut tensors = model.parameters();
    tensors.extend(extra.iter().cloned());
    write_container(w, meta, &tensors)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub step: u64,
    /// Tensors in the file that are not model parameters (optimizer state).
    pub extra: Vec<LoadedTensor>,
}

pub fn load_checkpoint<R: Read>(r: &mut R) -> Result<LoadedCheckpoint, CheckpointError> {
    let (meta, tensors) = read_container(r)?;
    let version = meta["version"].as_u64().ok_or_else(|| CheckpointError::Meta("missing version".into()))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(CheckpointError::Meta(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| CheckpointError::Meta(format!("bad config: {e}")))?;
    let step = meta["step"].as_u64().ok_or_else(|| CheckpointError::Meta("missing step".into()))?;
    let texts: Vec<String> = serde_json::from_value(meta["vocab"].clone())
        .map_err(|e| CheckpointError::Meta(format!("bad vocab: {e}")))?;
    let vocab = Vocab::from_texts(&texts)?;

    let model = Model::init(config);
    let mut used = vec![false; tensors.len()];
    for (name, t) in model.parameters() {
        let idx = tensors
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        let l = &tensors[idx];
        if (l.rows, l.cols) != t.shape() {
            return Err(CheckpointError::TensorShape {
                name,
                expected: t.shape(),
                got: (l.rows, l.cols),
            });
        }
        t.set_data(&l.data);
        used[idx] = true;
    }
    let extra = tensors
        .into_iter()
        .zip(used)
        .filter_map(|(l, u)| (!u).then_some(l))
        .collect();
    Ok(LoadedCheckpoint { model, vocab, step, extra })
}
