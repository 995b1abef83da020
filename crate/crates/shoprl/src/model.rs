//! The sequence policy: a GRU encoder over the goal-and-observation context,
//! a GRU decoder over action token prefixes feeding a language-modeling head,
//! and a small value head on the encoder summary.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ShopError;
use crate::nn::{GruIds, ParamId, ParamSet, Tape, TensorSpec, Val};
use crate::scalar::Scalar;
use crate::text::{Vocabulary, EOS_ID, PAD_ID, SEP_ID, UNK_ID};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SHOPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Longest generated search query, excluding the end token.
pub const MAX_QUERY_TOKENS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub context_limit: usize,
    /// How many recent observations enter the context (1 or 2).
    pub obs_history: u8,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim: 64,
            context_limit: 256,
            obs_history: 2,
        }
    }

    pub fn descriptor(&self) -> String {
        format!(
            "gru-encdec-v3 vocab={} dim={} ctx={} obs={}",
            self.vocab_size, self.dim, self.context_limit, self.obs_history
        )
    }

    pub fn arch_hash(&self) -> u64 {
        fnv1a(self.descriptor().as_bytes())
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// Parameter declaration order; the checkpoint layout follows it.
pub const EMB: ParamId = ParamId(0);
pub const ENC_WX: ParamId = ParamId(1);
pub const ENC_UZR: ParamId = ParamId(2);
pub const ENC_UH: ParamId = ParamId(3);
pub const ENC_B: ParamId = ParamId(4);
pub const DEC_WX: ParamId = ParamId(5);
pub const DEC_UZR: ParamId = ParamId(6);
pub const DEC_UH: ParamId = ParamId(7);
pub const DEC_B: ParamId = ParamId(8);
pub const LM_W: ParamId = ParamId(9);
pub const LM_B: ParamId = ParamId(10);
pub const VAL_W1: ParamId = ParamId(11);
pub const VAL_B1: ParamId = ParamId(12);
pub const VAL_W2: ParamId = ParamId(13);
pub const VAL_B2: ParamId = ParamId(14);

const ENC_GRU: GruIds = GruIds { w_x: ENC_WX, u_zr: ENC_UZR, u_h: ENC_UH, b: ENC_B };
const DEC_GRU: GruIds = GruIds { w_x: DEC_WX, u_zr: DEC_UZR, u_h: DEC_UH, b: DEC_B };

pub fn parameter_specs(cfg: &ModelConfig) -> Vec<TensorSpec> {
    let n = cfg.vocab_size;
    let d = cfg.dim;
    vec![
        TensorSpec::matrix("embedding", n, d),
        TensorSpec::matrix("encoder.w_x", 3 * d, d),
        TensorSpec::matrix("encoder.u_zr", 2 * d, d),
        TensorSpec::matrix("encoder.u_h", d, d),
        TensorSpec::vector("encoder.b", 3 * d),
        // The decoder re-reads the encoder summary at every step, so its
        // input is the token embedding concatenated with the summary.
        TensorSpec::matrix("decoder.w_x", 3 * d, 2 * d),
        TensorSpec::matrix("decoder.u_zr", 2 * d, d),
        TensorSpec::matrix("decoder.u_h", d, d),
        TensorSpec::vector("decoder.b", 3 * d),
        TensorSpec::matrix("lm_head.w", n, d),
        TensorSpec::vector("lm_head.b", n),
        TensorSpec::matrix("value.w1", d, d),
        TensorSpec::vector("value.b1", d),
        TensorSpec::matrix("value.w2", 1, d),
        TensorSpec::vector("value.b2", 1),
    ]
}

/// Token ids of one model input: goal, separator, previous observation (when
/// kept), separator, current observation; left-truncated to the limit with
/// goal tokens preserved longest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextEncoding {
    pub token_ids: Vec<u32>,
}

impl ContextEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

pub fn encode_context(
    vocab: &Vocabulary,
    goal: &[String],
    prev_obs: Option<&[String]>,
    cur_obs: &[String],
    limit: usize,
) -> ContextEncoding {
    assert!(limit >= 16, "context limit must be at least 16");
    let goal_ids = vocab.encode(goal);

    let mut tail: Vec<u32> = vec![SEP_ID];
    if let Some(prev) = prev_obs {
        tail.extend(vocab.encode(prev));
        tail.push(SEP_ID);
    }
    tail.extend(vocab.encode(cur_obs));

    let total = goal_ids.len() + tail.len();
    let mut token_ids = Vec::with_capacity(total.min(limit));
    if total <= limit {
        token_ids.extend(goal_ids);
        token_ids.extend(tail);
    } else if goal_ids.len() < limit {
        // Drop the oldest non-goal tokens first.
        let keep_tail = limit - goal_ids.len();
        token_ids.extend(goal_ids);
        token_ids.extend(&tail[tail.len() - keep_tail..]);
    } else {
        // The goal alone overflows; keep its newest tokens.
        token_ids.extend(&goal_ids[goal_ids.len() - limit..]);
    }
    ContextEncoding { token_ids }
}

#[derive(Debug, Clone)]
pub struct SeqModel<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
}

impl<S: Scalar> SeqModel<S> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let params = ParamSet::init_uniform(parameter_specs(&cfg), seed);
        SeqModel { cfg, params }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ShopError> {
        for id in ids {
            if *id as usize >= self.cfg.vocab_size {
                return Err(ShopError::Contract(format!(
                    "token id {id} out of range for vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Run the encoder over a context; the summary is the mean of the
    /// per-token hidden states, so early goal tokens contribute to it
    /// undecayed no matter how long the page text runs.
    pub fn encode(&self, tape: &mut Tape<S>, ctx: &ContextEncoding) -> Val {
        let d = self.cfg.dim;
        let zeros = vec![S::zero(); d];
        let mut h = tape.constant(&zeros);
        let mut pooled = tape.constant(&zeros);
        let n = ctx.token_ids.len().max(1);
        for id in &ctx.token_ids {
            let x = tape.embed(&self.params, EMB, *id as usize);
            h = tape.gru_cell(&self.params, ENC_GRU, x, h);
            pooled = tape.add(pooled, h);
        }
        tape.scale(pooled, S::from_f64_c(1.0 / n as f64))
    }

    fn decode_step(&self, tape: &mut Tape<S>, summary: Val, token: u32, h: Val) -> Val {
        let emb = tape.embed(&self.params, EMB, token as usize);
        let x = tape.concat2(emb, summary);
        tape.gru_cell(&self.params, DEC_GRU, x, h)
    }

    /// Log-probabilities over the vocabulary for the token following
    /// `prefix`, teacher-forced. The decoder is primed with the end token
    /// and re-reads the encoder summary at every step.
    pub fn next_token_logprobs(&self, tape: &mut Tape<S>, summary: Val, prefix: &[u32]) -> Result<Val, ShopError> {
        self.check_ids(prefix)?;
        let mut h = summary;
        h = self.decode_step(tape, summary, EOS_ID, h);
        for id in prefix {
            h = self.decode_step(tape, summary, *id, h);
        }
        let logits = tape.affine(&self.params, LM_W, Some(LM_B), h);
        Ok(tape.log_softmax(logits))
    }

    /// Token-averaged action log-probability: the mean conditional
    /// log-probability over the action's tokens plus its end-token
    /// terminator.
    pub fn action_score(&self, tape: &mut Tape<S>, summary: Val, action_ids: &[u32]) -> Result<Val, ShopError> {
        if action_ids.is_empty() {
            return Err(ShopError::Contract("cannot score an empty action surface".into()));
        }
        self.check_ids(action_ids)?;
        let mut h = summary;
        let mut input = EOS_ID;
        let mut picks = Vec::with_capacity(action_ids.len() + 1);
        for k in 0..=action_ids.len() {
            h = self.decode_step(tape, summary, input, h);
            let logits = tape.affine(&self.params, LM_W, Some(LM_B), h);
            let logp = tape.log_softmax(logits);
            let target = if k < action_ids.len() { action_ids[k] } else { EOS_ID };
            picks.push(tape.pick(logp, target as usize));
            if k < action_ids.len() {
                input = action_ids[k];
            }
        }
        let stacked = tape.stack(&picks);
        Ok(tape.mean(stacked))
    }

    /// Scalar state-value estimate from the encoder summary.
    pub fn value(&self, tape: &mut Tape<S>, summary: Val) -> Val {
        let hidden = tape.affine(&self.params, VAL_W1, Some(VAL_B1), summary);
        let act = tape.tanh(hidden);
        tape.affine(&self.params, VAL_W2, Some(VAL_B2), act)
    }

    /// Convenience inference path for the full next-token distribution.
    pub fn token_logprobs(&self, ctx: &ContextEncoding, prefix: &[u32]) -> Result<Vec<S>, ShopError> {
        self.check_ids(&ctx.token_ids)?;
        let mut tape = Tape::inference();
        let summary = self.encode(&mut tape, ctx);
        let logp = self.next_token_logprobs(&mut tape, summary, prefix)?;
        Ok(tape.value(logp).to_vec())
    }

    /// Convenience inference path for the value estimate.
    pub fn estimate_value(&self, ctx: &ContextEncoding) -> S {
        let mut tape = Tape::inference();
        let summary = self.encode(&mut tape, ctx);
        let v = self.value(&mut tape, summary);
        tape.scalar_value(v)
    }

    /// Sample a search query autoregressively at temperature 1, up to
    /// [`MAX_QUERY_TOKENS`] tokens, stopping at the end token. The first
    /// token always draws from the regular vocabulary so the query is never
    /// empty; padding and separator tokens are never emitted.
    pub fn sample_query(&self, tape: &mut Tape<S>, summary: Val, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let mut h = summary;
        let mut input = EOS_ID;
        let mut out = Vec::new();
        for k in 0..=MAX_QUERY_TOKENS {
            h = self.decode_step(tape, summary, input, h);
            if k == MAX_QUERY_TOKENS {
                break;
            }
            let logits = tape.affine(&self.params, LM_W, Some(LM_B), h);
            let logp = tape.log_softmax(logits);
            let mut probs: Vec<f64> = tape.value(logp).iter().map(|v| v.to_f64_c().exp()).collect();
            probs[PAD_ID as usize] = 0.0;
            probs[SEP_ID as usize] = 0.0;
            probs[UNK_ID as usize] = 0.0;
            if k == 0 {
                probs[EOS_ID as usize] = 0.0;
            }
            let total: f64 = probs.iter().sum();
            let mut draw = rng.gen::<f64>() * total;
            let mut tok = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                draw -= p;
                if draw <= 0.0 {
                    tok = i;
                    break;
                }
            }
            if tok as u32 == EOS_ID {
                break;
            }
            out.push(tok as u32);
            input = tok as u32;
        }
        out
    }

    /// Checkpoint: header then every parameter as little-endian f32 in
    /// declaration order.
    pub fn save(&self, path: &Path) -> Result<(), ShopError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&self.cfg.arch_hash().to_le_bytes())?;
        f.write_all(&(self.cfg.vocab_size as u32).to_le_bytes())?;
        f.write_all(&(self.cfg.dim as u32).to_le_bytes())?;
        f.write_all(&(self.parameter_count() as u64).to_le_bytes())?;
        let flat = self.params.to_f32_flat();
        let mut bytes = Vec::with_capacity(flat.len() * 4);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path, cfg: ModelConfig) -> Result<Self, ShopError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ShopError::Format("not a checkpoint file".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        f.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
            return Err(ShopError::Format("unsupported checkpoint version".into()));
        }
        f.read_exact(&mut u64buf)?;
        if u64::from_le_bytes(u64buf) != cfg.arch_hash() {
            return Err(ShopError::Format(
                "architecture hash mismatch between checkpoint and configuration".into(),
            ));
        }
        f.read_exact(&mut u32buf)?;
        let vocab = u32::from_le_bytes(u32buf) as usize;
        f.read_exact(&mut u32buf)?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if vocab != cfg.vocab_size || dim != cfg.dim {
            return Err(ShopError::Format("checkpoint shape mismatch".into()));
        }
        f.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut data = Vec::new();
        f.read_to_end(&mut data)?;
        if data.len() != count * 4 {
            return Err(ShopError::Format("checkpoint payload truncated".into()));
        }
        let flat: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let params = ParamSet::from_f32_flat(parameter_specs(&cfg), &flat)?;
        Ok(SeqModel { cfg, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::GradStore;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            dim: 8,
            context_limit: 32,
            obs_history: 2,
        }
    }

    fn strings(ts: &[&str]) -> Vec<String> {
        ts.iter().map(|t| t.to_string()).collect()
    }

    fn test_vocab() -> Vocabulary {
        Vocabulary::build(["find", "red", "soap", "buy", "now", "page", "tea", "pot"])
    }

    #[test]
    fn context_layout_without_history() {
        let vocab = test_vocab();
        let goal = strings(&["find", "red", "soap"]);
        let cur = strings(&["page", "tea"]);
        let ctx = encode_context(&vocab, &goal, None, &cur, 32);
        let mut expected = vocab.encode(&goal);
        expected.push(SEP_ID);
        expected.extend(vocab.encode(&cur));
        assert_eq!(ctx.token_ids, expected);
    }

    #[test]
    fn context_truncates_oldest_first_and_keeps_goal() {
        let vocab = test_vocab();
        let goal = strings(&["find", "red", "soap", "buy"]);
        let prev: Vec<String> = (0..20).map(|_| "tea".to_string()).collect();
        let cur: Vec<String> = (0..10).map(|_| "pot".to_string()).collect();
        let ctx = encode_context(&vocab, &goal, Some(&prev), &cur, 16);
        assert_eq!(ctx.len(), 16);
        let goal_ids = vocab.encode(&goal);
        assert_eq!(&ctx.token_ids[..4], goal_ids.as_slice());
        // The tail keeps only the newest tokens: all of cur plus two prev.
        let pot = vocab.id("pot");
        assert_eq!(ctx.token_ids[15], pot);
        assert_eq!(ctx.token_ids[6], pot);
    }

    #[test]
    fn identical_inputs_encode_identically() {
        let vocab = test_vocab();
        let goal = strings(&["find", "tea"]);
        let cur = strings(&["page", "tea", "pot"]);
        let a = encode_context(&vocab, &goal, None, &cur, 64);
        let b = encode_context(&vocab, &goal, None, &cur, 64);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_lm_head_gives_uniform_distribution() {
        let cfg = tiny_cfg();
        let mut model: SeqModel<f64> = SeqModel::new(cfg, 3);
        model.params.tensor_mut(LM_W).iter_mut().for_each(|v| *v = 0.0);
        model.params.tensor_mut(LM_B).iter_mut().for_each(|v| *v = 0.0);
        let ctx = ContextEncoding { token_ids: vec![5, 6, 7] };
        let logp = model.token_logprobs(&ctx, &[4]).unwrap();
        let expected = -(cfg.vocab_size as f64).ln();
        for v in &logp {
            assert!((v - expected).abs() < 1e-12);
        }
        let total: f64 = logp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn perturbing_the_head_changes_the_distribution() {
        let cfg = tiny_cfg();
        let mut model: SeqModel<f64> = SeqModel::new(cfg, 3);
        let ctx = ContextEncoding { token_ids: vec![1, 2, 3] };
        let before = model.token_logprobs(&ctx, &[]).unwrap();
        model.params.tensor_mut(LM_W)[5] += 0.25;
        let after = model.token_logprobs(&ctx, &[]).unwrap();
        assert_ne!(before, after);
    }

    #[test]
    fn zero_value_head_returns_its_bias() {
        let cfg = tiny_cfg();
        let mut model: SeqModel<f64> = SeqModel::new(cfg, 9);
        model.params.tensor_mut(VAL_W1).iter_mut().for_each(|v| *v = 0.0);
        model.params.tensor_mut(VAL_B1).iter_mut().for_each(|v| *v = 0.0);
        model.params.tensor_mut(VAL_W2).iter_mut().for_each(|v| *v = 0.0);
        model.params.tensor_mut(VAL_B2)[0] = -0.37;
        for ids in [vec![1u32, 2], vec![7, 7, 7, 7], vec![11]] {
            let v = model.estimate_value(&ContextEncoding { token_ids: ids });
            assert_eq!(v, -0.37);
        }
    }

    #[test]
    fn value_and_language_heads_are_separate() {
        let cfg = tiny_cfg();
        let model: SeqModel<f64> = SeqModel::new(cfg, 11);
        let ctx = ContextEncoding { token_ids: vec![2, 9, 4] };

        // Gradient of an action score must not touch the value head.
        let mut tape = Tape::recording();
        let summary = model.encode(&mut tape, &ctx);
        let score = model.action_score(&mut tape, summary, &[5, 6]).unwrap();
        let grads = tape.backward(score, &model.params).unwrap();
        for id in [VAL_W1, VAL_B1, VAL_W2, VAL_B2] {
            assert!(grads.tensor(id).iter().all(|v| *v == 0.0));
        }
        assert!(grads.tensor(LM_W).iter().any(|v| *v != 0.0));

        // Gradient of the value must not touch the language-modeling head or
        // the decoder.
        let mut tape = Tape::recording();
        let summary = model.encode(&mut tape, &ctx);
        let value = model.value(&mut tape, summary);
        let grads: GradStore<f64> = tape.backward(value, &model.params).unwrap();
        for id in [LM_W, LM_B, DEC_WX, DEC_UZR, DEC_UH, DEC_B] {
            assert!(grads.tensor(id).iter().all(|v| *v == 0.0));
        }
        assert!(grads.tensor(VAL_W2).iter().any(|v| *v != 0.0));
        // Perturbing the value head leaves token logprobs untouched.
        let before = model.token_logprobs(&ctx, &[]).unwrap();
        let mut perturbed = model.clone();
        perturbed.params.tensor_mut(VAL_W1)[3] += 0.5;
        assert_eq!(perturbed.token_logprobs(&ctx, &[]).unwrap(), before);
        assert_ne!(perturbed.estimate_value(&ctx), model.estimate_value(&ctx));
    }

    #[test]
    fn out_of_range_ids_are_refused() {
        let model: SeqModel<f64> = SeqModel::new(tiny_cfg(), 1);
        let ctx = ContextEncoding { token_ids: vec![1] };
        assert!(model.token_logprobs(&ctx, &[99]).is_err());
        let bad = ContextEncoding { token_ids: vec![99] };
        assert!(model.token_logprobs(&bad, &[]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_identical() {
        let cfg = ModelConfig::new(40);
        let model: SeqModel<f32> = SeqModel::new(cfg, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = SeqModel::<f32>::load(&path, cfg).unwrap();
        assert_eq!(model.params, loaded.params);
        let ctx = ContextEncoding { token_ids: vec![4, 8, 15, 16, 23] };
        assert_eq!(
            model.token_logprobs(&ctx, &[2]).unwrap(),
            loaded.token_logprobs(&ctx, &[2]).unwrap()
        );
    }

    #[test]
    fn mismatched_architecture_is_refused() {
        let cfg = ModelConfig::new(40);
        let model: SeqModel<f32> = SeqModel::new(cfg, 17);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let other = ModelConfig::new(41);
        assert!(SeqModel::<f32>::load(&path, other).is_err());
    }

    #[test]
    fn sampled_queries_are_nonempty_and_bounded() {
        let model: SeqModel<f64> = SeqModel::new(tiny_cfg(), 2);
        let ctx = ContextEncoding { token_ids: vec![1, 2] };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let mut tape = Tape::inference();
            let summary = model.encode(&mut tape, &ctx);
            let q = model.sample_query(&mut tape, summary, &mut rng);
            assert!(!q.is_empty());
            assert!(q.len() <= MAX_QUERY_TOKENS);
            for id in &q {
                assert!(*id != PAD_ID && *id != SEP_ID && *id != EOS_ID && *id != UNK_ID);
            }
        }
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let cfg = ModelConfig::new(100);
        let a: SeqModel<f32> = SeqModel::new(cfg, 1);
        let b: SeqModel<f32> = SeqModel::new(cfg, 2);
        assert_eq!(a.parameter_count(), b.parameter_count());
        let d = cfg.dim;
        let n = cfg.vocab_size;
        let enc_gru = 3 * d * d + 2 * d * d + d * d + 3 * d;
        let dec_gru = 3 * d * (2 * d) + 2 * d * d + d * d + 3 * d;
        let expected = n * d + enc_gru + dec_gru + (n * d + n) + (d * d + d) + (d + 1);
        assert_eq!(a.parameter_count(), expected);
    }
}
