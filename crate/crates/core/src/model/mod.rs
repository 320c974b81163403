//! The joint reward model: a transformer encoder whose scoring-token output
//! `h` feeds a Gaussian reward head and a causal language head.
//!
//! Input layout: `[instruction] <sep> [source regions] <sep> [edited regions] <score>`.
//! The language head sees `h` only through a projected prefix position, so
//! anything it has to say about a candidate must be recoverable from `h`.

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION};
pub use params::{ParamGroup, ParamStore};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeedStream;
use crate::synthworld::{Vocabs, WorldConfig};
use crate::tensor::{scalar, AttnLayout, Tape, Tensor, TensorError, Var};

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const SCORE: usize = 2;
pub const EOS: usize = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub instr_vocab: usize,
    pub expl_vocab: usize,
    pub n_regions: usize,
    pub reward_dims: usize,
    pub sigma_floor: f64,
    /// Transformer blocks in the language head.
    pub lm_layers: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_world(&WorldConfig::default())
    }
}

impl ModelConfig {
    pub fn for_world(world: &WorldConfig) -> Self {
        let v = Vocabs::new(world.n_regions);
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_seq: 64,
            instr_vocab: v.input.len(),
            expl_vocab: v.explanation.len(),
            n_regions: world.n_regions,
            reward_dims: 2,
            sigma_floor: 1e-3,
            lm_layers: 1,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.reward_dims != 2 {
            return err(format!("reward_dims is fixed at 2, got {}", self.reward_dims));
        }
        let v = Vocabs::new(self.n_regions);
        if self.instr_vocab < v.input.len() || self.expl_vocab < v.explanation.len() {
            return err(format!(
                "vocab sizes ({}, {}) smaller than the defined tokens ({}, {})",
                self.instr_vocab,
                self.expl_vocab,
                v.input.len(),
                v.explanation.len()
            ));
        }
        if !(self.sigma_floor > 0.0) || self.d_ff == 0 || self.max_seq < 2 {
            return err("sigma_floor, d_ff and max_seq must be positive".into());
        }
        Ok(())
    }
}

/// Final hidden state of the scoring token.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardOutput {
    pub mu_if: f64,
    pub mu_vq: f64,
    pub sigma_if: f64,
    pub sigma_vq: f64,
}

/// Scalar reward used for ranking summaries and RL: the mean of both μ.
pub fn overall_score(out: &RewardOutput) -> f64 {
    (out.mu_if + out.mu_vq) / 2.0
}

/// Tape handles for a batch of reward outputs; both are `n×2` with columns
/// (instruction following, visual quality).
#[derive(Clone, Copy, Debug)]
pub struct RewardVars {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_tok: usize,
    enc_pos: usize,
    enc_blocks: Vec<BlockIds>,
    enc_ln_g: usize,
    enc_ln_b: usize,
    head_w: usize,
    head_b: usize,
    lm_proj_w: usize,
    lm_proj_b: usize,
    lm_tok: usize,
    lm_pos: usize,
    lm_blocks: Vec<BlockIds>,
    lm_ln_g: usize,
    lm_ln_b: usize,
    lm_out_w: usize,
    lm_out_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct Builder {
    store: ParamStore,
    rng: SeedStream,
    std: f64,
}

impl Builder {
    fn add(&mut self, name: &str, shape: &[usize], init: Init) -> usize {
        let t = match init {
            Init::Normal => Tensor::randn(shape, self.std, &mut self.rng.split(name)),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
        };
        self.store.push(name.to_string(), t)
    }

    fn block(&mut self, prefix: &str, d: usize, ff: usize) -> BlockIds {
        let mut p = |n: &str, s: &[usize], i| self.add(&format!("{prefix}.{n}"), s, i);
        BlockIds {
            ln1_g: p("ln1.gain", &[d], Init::Ones),
            ln1_b: p("ln1.bias", &[d], Init::Zeros),
            wq: p("attn.wq", &[d, d], Init::Normal),
            bq: p("attn.bq", &[d], Init::Zeros),
            wk: p("attn.wk", &[d, d], Init::Normal),
            bk: p("attn.bk", &[d], Init::Zeros),
            wv: p("attn.wv", &[d, d], Init::Normal),
            bv: p("attn.bv", &[d], Init::Zeros),
            wo: p("attn.wo", &[d, d], Init::Normal),
            bo: p("attn.bo", &[d], Init::Zeros),
            ln2_g: p("ln2.gain", &[d], Init::Ones),
            ln2_b: p("ln2.bias", &[d], Init::Zeros),
            w1: p("ff.w1", &[d, ff], Init::Normal),
            b1: p("ff.b1", &[ff], Init::Zeros),
            w2: p("ff.w2", &[ff, d], Init::Normal),
            b2: p("ff.b2", &[d], Init::Zeros),
        }
    }
}

pub struct JrmModel {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

impl Clone for JrmModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

/// Lazily places model parameters on a tape, counting each placement as a
/// touch of that parameter.
pub struct Binding<'m> {
    model: &'m JrmModel,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'m> Binding<'m> {
    fn get(&mut self, tape: &mut Tape, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        self.model.params.touch(id, self.trainable);
        let t = self.model.params.tensor(id);
        let v = if self.trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        };
        self.vars[id] = Some(v);
        v
    }

    /// Parameter ids bound so far paired with their tape variables.
    pub fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

impl JrmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let mut b = Builder {
            store: ParamStore::default(),
            rng: SeedStream::new(seed).split("init"),
            std: config.init_std,
        };
        let enc_tok = b.add("encoder.tok_emb", &[config.instr_vocab, d], Init::Normal);
        let enc_pos = b.add("encoder.pos_emb", &[config.max_seq, d], Init::Normal);
        let enc_blocks = (0..config.n_layers)
            .map(|i| b.block(&format!("encoder.block{i}"), d, ff))
            .collect();
        let enc_ln_g = b.add("encoder.ln_f.gain", &[d], Init::Ones);
        let enc_ln_b = b.add("encoder.ln_f.bias", &[d], Init::Zeros);
        let head_w = b.add("reward_head.w", &[d, 4], Init::Normal);
        let head_b = b.add("reward_head.b", &[4], Init::Zeros);
        let lm_proj_w = b.add("lm_head.proj.w", &[d, d], Init::Normal);
        let lm_proj_b = b.add("lm_head.proj.b", &[d], Init::Zeros);
        let lm_tok = b.add("lm_head.tok_emb", &[config.expl_vocab, d], Init::Normal);
        let lm_pos = b.add("lm_head.pos_emb", &[config.max_seq, d], Init::Normal);
        let lm_blocks = (0..config.lm_layers)
            .map(|i| b.block(&format!("lm_head.block{i}"), d, ff))
            .collect();
        let lm_ln_g = b.add("lm_head.ln_f.gain", &[d], Init::Ones);
        let lm_ln_b = b.add("lm_head.ln_f.bias", &[d], Init::Zeros);
        let lm_out_w = b.add("lm_head.out.w", &[d, config.expl_vocab], Init::Normal);
        let lm_out_b = b.add("lm_head.out.b", &[config.expl_vocab], Init::Zeros);
        let layout = Layout {
            enc_tok,
            enc_pos,
            enc_blocks,
            enc_ln_g,
            enc_ln_b,
            head_w,
            head_b,
            lm_proj_w,
            lm_proj_b,
            lm_tok,
            lm_pos,
            lm_blocks,
            lm_ln_g,
            lm_ln_b,
            lm_out_w,
            lm_out_b,
        };
        Ok(Self {
            config,
            params: b.store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Binding<'_> {
        Binding {
            model: self,
            vars: vec![None; self.params.len()],
            trainable,
        }
    }

    /// Full encoder sequence for one candidate.
    pub fn layout_tokens(&self, instruction: &[usize], source: &[usize], edited: &[usize]) -> Result<Vec<usize>> {
        let len = instruction.len() + source.len() + edited.len() + 3;
        if len > self.config.max_seq {
            return Err(ModelError::Length {
                len,
                max: self.config.max_seq,
            });
        }
        let mut seq = Vec::with_capacity(len);
        seq.extend_from_slice(instruction);
        seq.push(SEP);
        seq.extend_from_slice(source);
        seq.push(SEP);
        seq.extend_from_slice(edited);
        seq.push(SCORE);
        Ok(seq)
    }

    fn affine(&self, tape: &mut Tape, bind: &mut Binding, x: Var, w: usize, b: usize) -> Result<Var> {
        let wv = bind.get(tape, w);
        let bv = bind.get(tape, b);
        let rows = tape.shape(x)[0];
        let y = tape.matmul(x, wv)?;
        let bias = tape.expand_rows(bv, rows)?;
        Ok(tape.add(y, bias)?)
    }

    fn layer_norm(&self, tape: &mut Tape, bind: &mut Binding, x: Var, g: usize, b: usize) -> Result<Var> {
        let gv = bind.get(tape, g);
        let bv = bind.get(tape, b);
        Ok(tape.layer_norm(x, gv, bv, LN_EPS)?)
    }

    fn block(&self, tape: &mut Tape, bind: &mut Binding, x: Var, ids: &BlockIds, layout: AttnLayout) -> Result<Var> {
        let a = self.layer_norm(tape, bind, x, ids.ln1_g, ids.ln1_b)?;
        let q = self.affine(tape, bind, a, ids.wq, ids.bq)?;
        let k = self.affine(tape, bind, a, ids.wk, ids.bk)?;
        let v = self.affine(tape, bind, a, ids.wv, ids.bv)?;
        let att = tape.attention(q, k, v, layout)?;
        let o = self.affine(tape, bind, att, ids.wo, ids.bo)?;
        let x = tape.add(x, o)?;
        let f = self.layer_norm(tape, bind, x, ids.ln2_g, ids.ln2_b)?;
        let f = self.affine(tape, bind, f, ids.w1, ids.b1)?;
        let f = tape.gelu(f)?;
        let f = self.affine(tape, bind, f, ids.w2, ids.b2)?;
        Ok(tape.add(x, f)?)
    }

    /// Encodes equal-length sequences; returns the `n×d_model` scoring-token
    /// states.
    pub fn encode_batch(&self, tape: &mut Tape, bind: &mut Binding, seqs: &[Vec<usize>]) -> Result<Var> {
        let len = seqs.first().map(Vec::len).unwrap_or(0);
        if len == 0 {
            return Err(ModelError::Config("encode_batch needs at least one sequence".into()));
        }
        if let Some(bad) = seqs.iter().find(|s| s.len() != len) {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "encode_batch",
                lhs: vec![len],
                rhs: vec![bad.len()],
            }));
        }
        if len > self.config.max_seq {
            return Err(ModelError::Length {
                len,
                max: self.config.max_seq,
            });
        }
        let l = &self.layout;
        let ids: Vec<usize> = seqs.iter().flatten().copied().collect();
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = bind.get(tape, l.enc_tok);
        let pos = bind.get(tape, l.enc_pos);
        let x = tape.select_rows(tok, &ids)?;
        let p = tape.select_rows(pos, &positions)?;
        let mut x = tape.add(x, p)?;
        let layout = AttnLayout {
            seqs: seqs.len(),
            len,
            heads: self.config.n_heads,
            causal: false,
        };
        for ids in &l.enc_blocks {
            x = self.block(tape, bind, x, ids, layout)?;
        }
        let x = self.layer_norm(tape, bind, x, l.enc_ln_g, l.enc_ln_b)?;
        let last: Vec<usize> = (0..seqs.len()).map(|s| s * len + len - 1).collect();
        Ok(tape.select_rows(x, &last)?)
    }

    /// Linear map to four raw values: μ_if, μ_vq, then σ through
    /// `softplus + sigma_floor`.
    pub fn reward_vars(&self, tape: &mut Tape, bind: &mut Binding, h: Var) -> Result<RewardVars> {
        let z = self.affine(tape, bind, h, self.layout.head_w, self.layout.head_b)?;
        let mu = tape.select_cols(z, &[0, 1])?;
        let raw = tape.select_cols(z, &[2, 3])?;
        let sp = tape.softplus(raw)?;
        let sigma = tape.add_scalar(sp, self.config.sigma_floor)?;
        Ok(RewardVars { mu, sigma })
    }

    /// Causal decoder over `[proj(h_s), inputs_s...]` for each sequence `s`.
    /// Returns logits for every real position, sequences concatenated in
    /// order; sequence `s` contributes `inputs[s].len() + 1` rows.
    pub fn lm_forward(&self, tape: &mut Tape, bind: &mut Binding, h: Var, inputs: &[Vec<usize>]) -> Result<Var> {
        let l = &self.layout;
        let n = inputs.len();
        if tape.shape(h) != [n, self.config.d_model] {
            return Err(ModelError::Tensor(TensorError::Shape {
                op: "lm_forward",
                lhs: tape.shape(h).to_vec(),
                rhs: vec![n, self.config.d_model],
            }));
        }
        let t_max = inputs.iter().map(Vec::len).max().unwrap_or(0) + 1;
        if t_max > self.config.max_seq {
            return Err(ModelError::Length {
                len: t_max,
                max: self.config.max_seq,
            });
        }
        let hp = self.affine(tape, bind, h, l.lm_proj_w, l.lm_proj_b)?;
        let x = if t_max == 1 {
            hp
        } else {
            let mut ids = Vec::with_capacity(n * (t_max - 1));
            for s in inputs {
                ids.extend_from_slice(s);
                ids.extend(std::iter::repeat_n(EOS, t_max - 1 - s.len()));
            }
            let tok = bind.get(tape, l.lm_tok);
            let emb = tape.select_rows(tok, &ids)?;
            let cat = tape.concat_rows(&[hp, emb])?;
            let mut perm = Vec::with_capacity(n * t_max);
            for s in 0..n {
                perm.push(s);
                perm.extend((1..t_max).map(|t| n + s * (t_max - 1) + t - 1));
            }
            tape.select_rows(cat, &perm)?
        };
        let positions: Vec<usize> = (0..n).flat_map(|_| 0..t_max).collect();
        let pos = bind.get(tape, l.lm_pos);
        let p = tape.select_rows(pos, &positions)?;
        let mut x = tape.add(x, p)?;
        let layout = AttnLayout {
            seqs: n,
            len: t_max,
            heads: self.config.n_heads,
            causal: true,
        };
        for ids in &l.lm_blocks {
            x = self.block(tape, bind, x, ids, layout)?;
        }
        let x = self.layer_norm(tape, bind, x, l.lm_ln_g, l.lm_ln_b)?;
        let real: Vec<usize> = inputs
            .iter()
            .enumerate()
            .flat_map(|(s, inp)| (0..=inp.len()).map(move |t| s * t_max + t))
            .collect();
        let x = if real.len() == n * t_max {
            x
        } else {
            tape.select_rows(x, &real)?
        };
        self.affine(tape, bind, x, l.lm_out_w, l.lm_out_b)
    }

    pub fn encode(&self, instruction: &[usize], source: &[usize], edited: &[usize]) -> Result<HiddenState> {
        let seq = self.layout_tokens(instruction, source, edited)?;
        let mut tape = Tape::new();
        let mut bind = self.bind(false);
        let h = self.encode_batch(&mut tape, &mut bind, &[seq])?;
        Ok(HiddenState(tape.value(h).to_vec()))
    }

    /// Hidden states for many laid-out sequences, processed in chunks.
    pub fn hidden_states(&self, seqs: &[Vec<usize>]) -> Result<Vec<HiddenState>> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(128) {
            let mut tape = Tape::new();
            let mut bind = self.bind(false);
            let h = self.encode_batch(&mut tape, &mut bind, chunk)?;
            out.extend(tape.value(h).chunks(d).map(|r| HiddenState(r.to_vec())));
        }
        Ok(out)
    }

    pub fn reward_head(&self, h: &HiddenState) -> RewardOutput {
        let d = self.config.d_model;
        let w = self.params.tensor(self.layout.head_w);
        let b = self.params.tensor(self.layout.head_b);
        self.params.touch(self.layout.head_w, false);
        self.params.touch(self.layout.head_b, false);
        let mut z = [0.0; 4];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = b.data()[j] + (0..d).map(|i| h.0[i] * w.data()[i * 4 + j]).sum::<f64>();
        }
        let floor = self.config.sigma_floor;
        RewardOutput {
            mu_if: z[0],
            mu_vq: z[1],
            sigma_if: scalar::softplus(z[2]) + floor,
            sigma_vq: scalar::softplus(z[3]) + floor,
        }
    }

    /// Discriminative-only scoring of laid-out sequences.
    pub fn score_batch(&self, seqs: &[Vec<usize>]) -> Result<Vec<RewardOutput>> {
        Ok(self
            .hidden_states(seqs)?
            .iter()
            .map(|h| self.reward_head(h))
            .collect())
    }

    /// Teacher-forced logits: row `t` is the distribution of `prefix[t]`
    /// given `h` and `prefix[..t]`.
    pub fn lm_logits(&self, h: &HiddenState, prefix: &[usize]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(ModelError::Config("lm_logits needs a non-empty prefix".into()));
        }
        let mut tape = Tape::new();
        let mut bind = self.bind(false);
        let hv = tape.constant(&Tensor::matrix(1, h.0.len(), h.0.clone())?);
        let logits = self.lm_forward(&mut tape, &mut bind, hv, &[prefix[..prefix.len() - 1].to_vec()])?;
        Ok(tape.tensor(logits))
    }

    /// Greedy argmax decoding; stops after emitting `<eos>` or `max_len`
    /// tokens.
    pub fn decode_greedy(&self, h: &HiddenState, max_len: usize) -> Result<Vec<usize>> {
        if max_len + 1 > self.config.max_seq {
            return Err(ModelError::Length {
                len: max_len + 1,
                max: self.config.max_seq,
            });
        }
        let v = self.config.expl_vocab;
        let hm = Tensor::matrix(1, h.0.len(), h.0.clone())?;
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut tape = Tape::new();
            let mut bind = self.bind(false);
            let hv = tape.constant(&hm);
            let logits = self.lm_forward(&mut tape, &mut bind, hv, &[out.clone()])?;
            let vals = tape.value(logits);
            let last = &vals[vals.len() - v..];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            out.push(best);
            if best == EOS {
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> JrmModel {
        JrmModel::new(ModelConfig::default(), 42).unwrap()
    }

    fn sample_seq(m: &JrmModel) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let v = Vocabs::new(4);
        let instr = vec![v.in_reg(1), 10, 0, 0, 0, 0];
        let src: Vec<usize> = (0..4).flat_map(|k| [v.in_reg(k), 7 + k, 13 + k, 18 + k]).collect();
        let mut edited = src.clone();
        edited[5] = 10;
        edited.push(v.in_noise(0.2));
        let _ = m;
        (instr, src, edited)
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.n_heads = 5;
        assert!(JrmModel::new(c, 1).is_err());
        let mut c = ModelConfig::default();
        c.expl_vocab = 3;
        assert!(JrmModel::new(c, 1).is_err());
    }

    #[test]
    fn encode_is_deterministic_and_nonzero() {
        let m = model();
        let (i, s, e) = sample_seq(&m);
        let a = m.encode(&i, &s, &e).unwrap();
        let b = m.encode(&i, &s, &e).unwrap();
        assert_eq!(a, b);
        let norm = a.0.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm.is_finite() && norm > 1.0, "{norm}");
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let m = model();
        let long = vec![3usize; 70];
        assert!(matches!(m.encode(&long, &[], &[]), Err(ModelError::Length { len: 73, max: 64 })));
    }

    #[test]
    fn zero_head_gives_softplus_floor() {
        let mut m = model();
        for id in [m.layout.head_w, m.layout.head_b] {
            m.params_mut().tensor_mut(id).data_mut().fill(0.0);
        }
        let out = m.reward_head(&HiddenState(vec![0.3; 64]));
        assert_eq!(out.mu_if, 0.0);
        assert_eq!(out.mu_vq, 0.0);
        assert!((out.sigma_if - (std::f64::consts::LN_2 + 1e-3)).abs() < 1e-12);
        assert!((out.sigma_if - 0.6941).abs() < 1e-4);
    }

    #[test]
    fn overall_score_is_mean_of_mu() {
        let mk = |a, b| RewardOutput {
            mu_if: a,
            mu_vq: b,
            sigma_if: 1.0,
            sigma_vq: 1.0,
        };
        assert_eq!(overall_score(&mk(2.0, 2.0)), 2.0);
        assert_eq!(overall_score(&mk(1.0, 3.0)), 2.0);
        assert!((overall_score(&mk(1.5, 3.25)) + 0.75 - overall_score(&mk(2.25, 4.0))).abs() < 1e-12);
    }

    #[test]
    fn lm_logits_shape_and_vocab_check() {
        let m = model();
        let h = HiddenState(vec![0.1; 64]);
        let t = m.lm_logits(&h, &[1, 5, 6, 7, 8, 9, 0]).unwrap();
        assert_eq!(t.shape(), &[7, 37]);
        assert!(m.lm_logits(&h, &[1, 99, 0]).is_err());
    }

    #[test]
    fn decode_respects_max_len() {
        let m = model();
        let h = HiddenState(vec![0.1; 64]);
        let out = m.decode_greedy(&h, 5).unwrap();
        assert!(out.len() <= 5);
        if let Some(p) = out.iter().position(|&t| t == EOS) {
            assert_eq!(p, out.len() - 1);
        }
        assert!(m.decode_greedy(&h, 64).is_err());
    }
}
