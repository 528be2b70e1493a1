//! Small causal transformer over semantic-ID tokens with hand-written
//! backpropagation and optional low-rank adapters.
//!
//! The model never predicts control tokens: every prediction targets one
//! quantizer level, so each output distribution ranges over that level's
//! `K` codes only.

mod align;
mod decode;
mod model;
mod sft;

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sidcodec::SemanticId;
use crate::tensor_io::Container;

pub use align::{
    alignment_accuracy, alignment_forward, alignment_prompt, alignment_sft, build_alignment_set, AlignConfig, AlignLog,
    AlignmentSample,
};
pub(crate) use decode::log_softmax;
pub use decode::{
    beam_search, greedy, pack_branches, sample_group, score_candidates, sequence_logprob, serialize_context,
    token_logprobs, Beam, SampledGroup, SidTrie,
};
pub use model::{Packed, PrefixCache, Query, Tape};
pub use sft::{warmup_sft, SftConfig, SftExample, SftLog};

/// Token layout: eight control tokens, then `K` codes per level in level order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub levels: usize,
    pub codebook_size: usize,
}

impl Vocab {
    pub const BOS: u32 = 0;
    pub const EOS: u32 = 1;
    pub const SEP_NEG: u32 = 2;
    pub const SEP_POS: u32 = 3;
    pub const NUM_OPTIONS: usize = 4;
    const FIRST_OPTION: u32 = 4;
    pub const NUM_CONTROL: u32 = 8;

    pub fn new(levels: usize, codebook_size: usize) -> Self {
        Vocab { levels, codebook_size }
    }

    pub fn size(&self) -> usize {
        Self::NUM_CONTROL as usize + self.levels * self.codebook_size
    }

    /// Marker preceding option `i` (0-based) in the alignment prompt.
    pub fn option(i: usize) -> u32 {
        assert!(i < Self::NUM_OPTIONS, "option index {i} out of range");
        Self::FIRST_OPTION + i as u32
    }

    pub fn code_token(&self, level: usize, code: u32) -> u32 {
        debug_assert!(level < self.levels && (code as usize) < self.codebook_size);
        Self::NUM_CONTROL + (level * self.codebook_size) as u32 + code
    }

    /// `(level, code)` of a code token; `None` for control tokens.
    pub fn token_code(&self, token: u32) -> Option<(usize, u32)> {
        let t = token.checked_sub(Self::NUM_CONTROL)? as usize;
        (t < self.levels * self.codebook_size).then(|| (t / self.codebook_size, (t % self.codebook_size) as u32))
    }

    pub fn sid_tokens(&self, sid: &SemanticId) -> Result<Vec<u32>> {
        if sid.depth() != self.levels || sid.0.iter().any(|&c| c as usize >= self.codebook_size) {
            return Err(Error::InvalidSid(format!(
                "{sid} does not fit {} levels of {} codes",
                self.levels, self.codebook_size
            )));
        }
        Ok(sid.0.iter().enumerate().map(|(l, &c)| self.code_token(l, c)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Per-section history limit when serializing contexts.
    pub max_context_events: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig { d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_positions: 512, max_context_events: 64 }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidConfig("d_model must be a positive multiple of n_heads".into()));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::InvalidConfig("n_layers, d_ff and max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// Low-rank update `scale * B A` added to a linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct Lora {
    pub rank: usize,
    pub scale: f64,
    /// `[rank, d_in]`.
    pub a: Vec<f64>,
    /// `[d_out, rank]`, zero at creation.
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_out, d_in]`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub lora: Option<Lora>,
}

impl Linear {
    fn random<R: Rng>(d_in: usize, d_out: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Linear {
            d_in,
            d_out,
            w: (0..d_in * d_out).map(|_| normal.sample(rng)).collect(),
            b: vec![0.0; d_out],
            lora: None,
        }
    }

    fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { d_in, d_out, w: vec![0.0; d_in * d_out], b: vec![0.0; d_out], lora: None }
    }

    /// Weight with the adapter folded in.
    pub fn effective_weight(&self) -> Vec<f64> {
        let mut w = self.w.clone();
        if let Some(l) = &self.lora {
            for o in 0..self.d_out {
                for r in 0..l.rank {
                    let coef = l.scale * l.b[o * l.rank + r];
                    if coef != 0.0 {
                        crate::linalg::axpy(
                            coef,
                            &l.a[r * self.d_in..(r + 1) * self.d_in],
                            &mut w[o * self.d_in..(o + 1) * self.d_in],
                        );
                    }
                }
            }
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    fn new(d: usize) -> Self {
        LayerNorm { gain: vec![1.0; d], bias: vec![0.0; d] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
}

impl Block {
    fn linears(&self) -> [&Linear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.w2]
    }

    fn linears_mut(&mut self) -> [&mut Linear; 6] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.w1, &mut self.w2]
    }
}

/// Which parameters an optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Every base parameter plus any adapters.
    All,
    /// Adapter matrices only; base weights frozen.
    AdaptersOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub vocab: Vocab,
    /// `[V, d]`.
    pub tok_emb: Vec<f64>,
    /// `[max_positions, d]`.
    pub pos_emb: Vec<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// Maps the final hidden state to `levels * K` code logits. Starts at
    /// zero so an untrained policy is uniform over each level's codes.
    pub head: Linear,
}

impl Policy {
    pub fn new<R: Rng>(cfg: PolicyConfig, vocab: Vocab, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let emb = Normal::new(0.0, 0.1).expect("finite std");
        let std_in = (d as f64).powf(-0.5);
        let std_out = std_in / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = (0..vocab.size() * d).map(|_| emb.sample(rng)).collect();
        let pos_emb = (0..cfg.max_positions * d).map(|_| emb.sample(rng)).collect();
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: Linear::random(d, d, std_in, rng),
                wk: Linear::random(d, d, std_in, rng),
                wv: Linear::random(d, d, std_in, rng),
                wo: Linear::random(d, d, std_out, rng),
                ln2: LayerNorm::new(d),
                w1: Linear::random(d, cfg.d_ff, std_in, rng),
                w2: Linear::random(cfg.d_ff, d, std_out * (d as f64 / cfg.d_ff as f64).sqrt(), rng),
            })
            .collect();
        Ok(Policy {
            cfg,
            vocab,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head: Linear::zeros(d, vocab.levels * vocab.codebook_size),
        })
    }

    /// Same shapes (adapters included), every entry zero. Used as a
    /// gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.all_slices_mut() {
            s.fill(0.0);
        }
        z
    }

    fn linears(&self) -> Vec<&Linear> {
        let mut v: Vec<&Linear> = self.blocks.iter().flat_map(|b| b.linears()).collect();
        v.push(&self.head);
        v
    }

    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        let mut v: Vec<&mut Linear> = self.blocks.iter_mut().flat_map(|b| b.linears_mut()).collect();
        v.push(&mut self.head);
        v
    }

    pub fn has_adapters(&self) -> bool {
        self.linears().iter().any(|l| l.lora.is_some())
    }

    /// Attaches rank-`rank` adapters to every projection (attention, MLP and
    /// output head) with `B = 0` and Gaussian `A`.
    pub fn apply_lora<R: Rng>(&mut self, rank: usize, scale: f64, rng: &mut R) -> Result<()> {
        if rank == 0 {
            return Err(Error::InvalidConfig("adapter rank must be >= 1".into()));
        }
        if self.has_adapters() {
            return Err(Error::InvalidArgument("policy already has adapters".into()));
        }
        for l in self.linears_mut() {
            let normal = Normal::new(0.0, (l.d_in as f64).powf(-0.5)).expect("finite std");
            l.lora = Some(Lora {
                rank,
                scale,
                a: (0..rank * l.d_in).map(|_| normal.sample(rng)).collect(),
                b: vec![0.0; l.d_out * rank],
            });
        }
        Ok(())
    }

    /// Folds every adapter into its base weight and removes it.
    pub fn merge_lora(&mut self) {
        for l in self.linears_mut() {
            if l.lora.is_some() {
                l.w = l.effective_weight();
                l.lora = None;
            }
        }
    }

    pub fn adapter_parameter_count(&self) -> usize {
        self.linears().iter().filter_map(|l| l.lora.as_ref()).map(|l| l.a.len() + l.b.len()).sum()
    }

    fn base_slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            v.extend([&b.ln1.gain[..], &b.ln1.bias]);
            for l in &b.linears()[..4] {
                v.extend([&l.w[..], &l.b]);
            }
            v.extend([&b.ln2.gain[..], &b.ln2.bias]);
            for l in &b.linears()[4..] {
                v.extend([&l.w[..], &l.b]);
            }
        }
        v.extend([&self.ln_f.gain[..], &self.ln_f.bias, &self.head.w, &self.head.b]);
        v
    }

    /// Base parameters and adapter matrices, each in the fixed order.
    fn split_slices_mut(&mut self) -> (Vec<&mut [f64]>, Vec<&mut [f64]>) {
        fn linear<'a>(l: &'a mut Linear, base: &mut Vec<&'a mut [f64]>, adapters: &mut Vec<&'a mut [f64]>) {
            let Linear { w, b, lora, .. } = l;
            base.push(w);
            base.push(b);
            if let Some(Lora { a, b, .. }) = lora {
                adapters.push(a);
                adapters.push(b);
            }
        }
        let mut base: Vec<&mut [f64]> = vec![&mut self.tok_emb, &mut self.pos_emb];
        let mut adapters: Vec<&mut [f64]> = Vec::new();
        for blk in &mut self.blocks {
            let Block { ln1, wq, wk, wv, wo, ln2, w1, w2 } = blk;
            base.push(&mut ln1.gain);
            base.push(&mut ln1.bias);
            for l in [wq, wk, wv, wo] {
                linear(l, &mut base, &mut adapters);
            }
            base.push(&mut ln2.gain);
            base.push(&mut ln2.bias);
            for l in [w1, w2] {
                linear(l, &mut base, &mut adapters);
            }
        }
        base.push(&mut self.ln_f.gain);
        base.push(&mut self.ln_f.bias);
        linear(&mut self.head, &mut base, &mut adapters);
        (base, adapters)
    }

    fn adapter_slices(&self) -> Vec<&[f64]> {
        self.linears().into_iter().filter_map(|l| l.lora.as_ref()).flat_map(|l| [&l.a[..], &l.b[..]]).collect()
    }

    fn all_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let (mut base, adapters) = self.split_slices_mut();
        base.extend(adapters);
        base
    }

    /// Parameters selected by `mode`, in a fixed order.
    pub fn slices(&self, mode: Trainable) -> Vec<&[f64]> {
        match mode {
            Trainable::All => {
                let mut v = self.base_slices();
                v.extend(self.adapter_slices());
                v
            }
            Trainable::AdaptersOnly => self.adapter_slices(),
        }
    }

    pub fn slices_mut(&mut self, mode: Trainable) -> Vec<&mut [f64]> {
        match mode {
            Trainable::All => self.all_slices_mut(),
            Trainable::AdaptersOnly => self.split_slices_mut().1,
        }
    }

    pub fn add_scaled(&mut self, other: &Policy, s: f64) {
        for (a, b) in self.all_slices_mut().into_iter().zip(other.slices(Trainable::All)) {
            crate::linalg::axpy(s, b, a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.slices(Trainable::All).iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Flattened parameters, for hashing snapshots.
    pub fn flat(&self) -> Vec<&[f64]> {
        self.slices(Trainable::All)
    }

    fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.cfg.d_model;
        let mut names = vec![
            ("tok_emb".to_string(), vec![self.vocab.size(), d]),
            ("pos_emb".to_string(), vec![self.cfg.max_positions, d]),
        ];
        let lin =
            |p: &str, l: &Linear| vec![(format!("{p}.w"), vec![l.d_out, l.d_in]), (format!("{p}.b"), vec![l.d_out])];
        for (i, b) in self.blocks.iter().enumerate() {
            names.push((format!("block.{i}.ln1.gain"), vec![d]));
            names.push((format!("block.{i}.ln1.bias"), vec![d]));
            for (n, l) in ["wq", "wk", "wv", "wo"].iter().zip(&b.linears()[..4]) {
                names.extend(lin(&format!("block.{i}.{n}"), l));
            }
            names.push((format!("block.{i}.ln2.gain"), vec![d]));
            names.push((format!("block.{i}.ln2.bias"), vec![d]));
            for (n, l) in ["w1", "w2"].iter().zip(&b.linears()[4..]) {
                names.extend(lin(&format!("block.{i}.{n}"), l));
            }
        }
        names.push(("ln_f.gain".to_string(), vec![d]));
        names.push(("ln_f.bias".to_string(), vec![d]));
        names.extend(lin("head", &self.head));
        let mut linear_names: Vec<String> = Vec::new();
        for i in 0..self.blocks.len() {
            for n in ["wq", "wk", "wv", "wo", "w1", "w2"] {
                linear_names.push(format!("block.{i}.{n}"));
            }
        }
        linear_names.push("head".to_string());
        for (name, l) in linear_names.iter().zip(self.linears()) {
            if let Some(a) = &l.lora {
                names.push((format!("{name}.lora_a"), vec![a.rank, l.d_in]));
                names.push((format!("{name}.lora_b"), vec![l.d_out, a.rank]));
            }
        }
        names
    }

    /// Header integers: `[levels, K, d_model, n_layers, n_heads, d_ff,
    /// max_positions, max_context_events, adapter_rank]` (rank 0 when no
    /// adapters); reals: `[adapter_scale]`; then every tensor by name in
    /// the fixed parameter order.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut c = Container::new(*b"PLCY");
        let lora = self.head.lora.as_ref();
        c.ints = vec![
            self.vocab.levels as u32,
            self.vocab.codebook_size as u32,
            self.cfg.d_model as u32,
            self.cfg.n_layers as u32,
            self.cfg.n_heads as u32,
            self.cfg.d_ff as u32,
            self.cfg.max_positions as u32,
            self.cfg.max_context_events as u32,
            lora.map_or(0, |l| l.rank as u32),
        ];
        c.reals = vec![lora.map_or(0.0, |l| l.scale)];
        for ((name, dims), data) in self.tensor_layout().into_iter().zip(self.slices(Trainable::All)) {
            c.push(name, dims, data);
        }
        c.write_to(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Policy> {
        let c = Container::read_from(r)?;
        if &c.kind != b"PLCY" || c.ints.len() != 9 || c.reals.len() != 1 {
            return Err(Error::Format("not a policy file".into()));
        }
        let i = |k: usize| c.ints[k] as usize;
        let vocab = Vocab::new(i(0), i(1));
        let cfg = PolicyConfig {
            d_model: i(2),
            n_layers: i(3),
            n_heads: i(4),
            d_ff: i(5),
            max_positions: i(6),
            max_context_events: i(7),
        };
        let mut rng = crate::seed::rng(0);
        let mut p = Policy::new(cfg, vocab, &mut rng)?;
        if i(8) > 0 {
            p.apply_lora(i(8), c.reals[0], &mut rng)?;
        }
        let layout = p.tensor_layout();
        let mut reader = c.reader();
        let mut values = Vec::with_capacity(layout.len());
        for (name, dims) in &layout {
            values.push(reader.take(name, dims)?);
        }
        reader.finish()?;
        for (dst, src) in p.all_slices_mut().into_iter().zip(values) {
            dst.copy_from_slice(&src);
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests;
