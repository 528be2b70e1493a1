//! Residual-quantized autoencoder producing hierarchical semantic IDs.
//!
//! An item's feature vector is encoded to a latent, the latent is quantized
//! greedily level by level against per-level codebooks (each level quantizes
//! what the previous levels left over), and the decoder reconstructs the
//! features from the sum of selected codewords. The selected indices form the
//! item's [`SemanticId`].

mod loss;
mod mlp;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{ItemDescriptor, ItemId};
use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::tensor_io::Container;

pub use loss::{rqvae_loss, rqvae_loss_grad, CodecGrads, RqvaeLoss};
pub use mlp::{Dense, Mlp, MlpCache, MlpGrads};
pub use train::{reconstruction_report, train_codec, CodecTrainConfig, EpochLog, ReconstructionReport, TrainedCodec};

/// Ordered codeword indices, one per quantizer level.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    /// Number of leading levels shared with `other`.
    pub fn common_prefix(&self, other: &SemanticId) -> usize {
        self.0.iter().zip(&other.0).take_while(|(a, b)| a == b).count()
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split('-')
            .map(|p| p.parse().map_err(|_| Error::InvalidSid(s.to_string())))
            .collect::<Result<Vec<u32>>>()
            .map(SemanticId)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// Row-major `[size, dim]`.
    pub data: Vec<f64>,
}

impl Codebook {
    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.dim..(k + 1) * self.dim]
    }

    pub fn row_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest codeword under squared Euclidean distance; ties go to the
    /// lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size {
            let d = sq_dist(self.row(k), v);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

/// Running EMA statistics behind each codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    /// `[level][codeword]` running assignment counts.
    pub counts: Vec<Vec<f64>>,
    /// `[level]` row-major `[codeword, dim]` running residual sums.
    pub sums: Vec<Vec<f64>>,
}

/// Laplace smoothing constant for EMA counts.
pub const EMA_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub codebooks: Vec<Codebook>,
    /// Weight of the quantization terms.
    pub lambda: f64,
    pub ema_decay: f64,
    /// When set, codebooks learn through [`Codec::ema_update`] and receive no
    /// loss gradient.
    pub use_ema: bool,
    pub ema: Option<EmaState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub sid: SemanticId,
    /// Sum of selected codewords, accumulated level by level from zero.
    pub quantized: Vec<f64>,
    /// Input to each level: `residuals[0]` is the latent.
    pub residuals: Vec<Vec<f64>>,
}

impl QuantizeResult {
    /// What remains after the last level.
    pub fn final_residual(&self, codec: &Codec) -> Vec<f64> {
        let d = self.residuals.len() - 1;
        let z = codec.codebooks[d].row(self.sid.0[d] as usize);
        self.residuals[d].iter().zip(z).map(|(r, z)| r - z).collect()
    }
}

impl Codec {
    pub fn levels(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebooks[0].size
    }

    pub fn d_lat(&self) -> usize {
        self.encoder.d_out()
    }

    pub fn d_feat(&self) -> usize {
        self.encoder.d_in()
    }

    fn check_dims(&self) -> Result<()> {
        if self.codebooks.is_empty() {
            return Err(Error::InvalidConfig("codec needs at least one level".into()));
        }
        let k = self.codebooks[0].size;
        for cb in &self.codebooks {
            if cb.size != k || cb.dim != self.d_lat() || cb.data.len() != k * cb.dim {
                return Err(Error::InvalidConfig("inconsistent codebook shapes".into()));
            }
        }
        if self.decoder.d_in() != self.d_lat() || self.decoder.d_out() != self.d_feat() {
            return Err(Error::InvalidConfig("decoder shape does not mirror encoder".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_feat() {
            return Err(Error::DimensionMismatch { expected: self.d_feat(), got: x.len() });
        }
        Ok(self.encoder.forward(x))
    }

    pub fn quantize(&self, latent: &[f64]) -> QuantizeResult {
        let mut residual = latent.to_vec();
        let mut quantized = vec![0.0; latent.len()];
        let mut codes = Vec::with_capacity(self.levels());
        let mut residuals = Vec::with_capacity(self.levels());
        for cb in &self.codebooks {
            let k = cb.nearest(&residual);
            let z = cb.row(k);
            for (q, zi) in quantized.iter_mut().zip(z) {
                *q += zi;
            }
            let next: Vec<f64> = residual.iter().zip(z).map(|(r, zi)| r - zi).collect();
            residuals.push(std::mem::replace(&mut residual, next));
            codes.push(k as u32);
        }
        QuantizeResult { sid: SemanticId(codes), quantized, residuals }
    }

    pub fn decode(&self, quantized: &[f64]) -> Result<Vec<f64>> {
        if quantized.len() != self.d_lat() {
            return Err(Error::DimensionMismatch { expected: self.d_lat(), got: quantized.len() });
        }
        Ok(self.decoder.forward(quantized))
    }

    pub fn sid_of(&self, x: &[f64]) -> Result<SemanticId> {
        Ok(self.quantize(&self.encode(x)?).sid)
    }

    pub fn validate_sid(&self, sid: &SemanticId) -> Result<()> {
        if sid.depth() != self.levels() {
            return Err(Error::InvalidSid(format!("{sid} has {} levels, codec has {}", sid.depth(), self.levels())));
        }
        if let Some(c) = sid.0.iter().find(|&&c| c as usize >= self.codebook_size()) {
            return Err(Error::InvalidSid(format!("code {c} out of range in {sid}")));
        }
        Ok(())
    }

    /// Sum of the codewords named by `sid`, accumulated in level order.
    /// Defined for every valid code combination, assigned or not.
    pub fn reconstruct_from_sid(&self, sid: &SemanticId) -> Result<Vec<f64>> {
        self.validate_sid(sid)?;
        let mut out = vec![0.0; self.d_lat()];
        for (cb, &k) in self.codebooks.iter().zip(&sid.0) {
            for (o, z) in out.iter_mut().zip(cb.row(k as usize)) {
                *o += z;
            }
        }
        Ok(out)
    }

    /// EMA codebook update from one batch. `assignments[n]` is the quantize
    /// result of the batch's n-th latent under the current codebooks.
    ///
    /// Per level and codeword: `N <- decay N + (1 - decay) n`,
    /// `M <- decay M + (1 - decay) s`, where `n` counts batch assignments and
    /// `s` sums their residuals. Codewords that received assignments become
    /// `M / N~`, with `N~ = (N + eps) / (total + K eps) * total` the
    /// Laplace-smoothed count. Unassigned codewords keep their value.
    pub fn ema_update(&mut self, assignments: &[QuantizeResult]) {
        let k = self.codebook_size();
        let dim = self.d_lat();
        let decay = self.ema_decay;
        let ema = self.ema.get_or_insert_with(|| EmaState {
            counts: vec![vec![1.0; k]; self.codebooks.len()],
            sums: self.codebooks.iter().map(|cb| cb.data.clone()).collect(),
        });
        for (level, cb) in self.codebooks.iter_mut().enumerate() {
            let mut n = vec![0.0; k];
            let mut s = vec![0.0; k * dim];
            for a in assignments {
                let c = a.sid.0[level] as usize;
                n[c] += 1.0;
                for (acc, r) in s[c * dim..(c + 1) * dim].iter_mut().zip(&a.residuals[level]) {
                    *acc += r;
                }
            }
            let counts = &mut ema.counts[level];
            let sums = &mut ema.sums[level];
            for c in 0..k {
                counts[c] = decay * counts[c] + (1.0 - decay) * n[c];
            }
            for (m, si) in sums.iter_mut().zip(&s) {
                *m = decay * *m + (1.0 - decay) * si;
            }
            let total: f64 = counts.iter().sum();
            for c in 0..k {
                if n[c] == 0.0 {
                    continue;
                }
                let smoothed = (counts[c] + EMA_EPSILON) / (total + k as f64 * EMA_EPSILON) * total;
                for (z, m) in cb.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *z = m / smoothed;
                }
            }
        }
    }

    /// Resets one codeword and its EMA statistics.
    pub fn reseed_codeword(&mut self, level: usize, k: usize, value: &[f64]) {
        self.codebooks[level].row_mut(k).copy_from_slice(value);
        if let Some(ema) = self.ema.as_mut() {
            let dim = value.len();
            ema.counts[level][k] = 1.0;
            ema.sums[level][k * dim..(k + 1) * dim].copy_from_slice(value);
        }
    }

    /// Header integers: `[D, K, d_lat, d_feat, n_encoder_layers,
    /// n_decoder_layers, use_ema]`; reals: `[lambda, ema_decay]`; tensors:
    /// `encoder.{l}.w [out, in]`, `encoder.{l}.b [out]`, the same for
    /// `decoder`, then `codebook.{d} [K, d_lat]`.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut c = Container::new(*b"CDEC");
        c.ints = vec![
            self.levels() as u32,
            self.codebook_size() as u32,
            self.d_lat() as u32,
            self.d_feat() as u32,
            self.encoder.layers.len() as u32,
            self.decoder.layers.len() as u32,
            self.use_ema as u32,
        ];
        c.reals = vec![self.lambda, self.ema_decay];
        for (prefix, mlp) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (l, layer) in mlp.layers.iter().enumerate() {
                c.push(format!("{prefix}.{l}.w"), vec![layer.d_out, layer.d_in], &layer.w);
                c.push(format!("{prefix}.{l}.b"), vec![layer.d_out], &layer.b);
            }
        }
        for (d, cb) in self.codebooks.iter().enumerate() {
            c.push(format!("codebook.{d}"), vec![cb.size, cb.dim], &cb.data);
        }
        c.write_to(w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Codec> {
        let c = Container::read_from(r)?;
        if &c.kind != b"CDEC" || c.ints.len() != 7 || c.reals.len() != 2 {
            return Err(Error::Format("not a codec file".into()));
        }
        let [levels, k, d_lat, _d_feat, n_enc, n_dec, use_ema] =
            <[u32; 7]>::try_from(c.ints.as_slice()).expect("length checked");
        let mut idx = 0;
        let mut read_mlp = |prefix: &str, n: u32| -> Result<Mlp> {
            let mut layers = Vec::new();
            for l in 0..n {
                let wt = c.tensors.get(idx).ok_or_else(|| Error::Format("truncated codec".into()))?;
                let bt = c.tensors.get(idx + 1).ok_or_else(|| Error::Format("truncated codec".into()))?;
                if wt.name != format!("{prefix}.{l}.w") || bt.name != format!("{prefix}.{l}.b") || wt.dims.len() != 2 {
                    return Err(Error::Format(format!("unexpected tensor {}", wt.name)));
                }
                layers.push(Dense { d_in: wt.dims[1], d_out: wt.dims[0], w: wt.data.clone(), b: bt.data.clone() });
                idx += 2;
            }
            Ok(Mlp { layers })
        };
        let encoder = read_mlp("encoder", n_enc)?;
        let decoder = read_mlp("decoder", n_dec)?;
        let mut codebooks = Vec::new();
        for d in 0..levels as usize {
            let t = c.tensors.get(idx + d).ok_or_else(|| Error::Format("truncated codec".into()))?;
            if t.name != format!("codebook.{d}") || t.dims != [k as usize, d_lat as usize] {
                return Err(Error::Format(format!("unexpected tensor {}", t.name)));
            }
            codebooks.push(Codebook { size: k as usize, dim: d_lat as usize, data: t.data.clone() });
        }
        if c.tensors.len() != idx + levels as usize {
            return Err(Error::Format("trailing tensors in codec file".into()));
        }
        let codec = Codec {
            encoder,
            decoder,
            codebooks,
            lambda: c.reals[0],
            ema_decay: c.reals[1],
            use_ema: use_ema != 0,
            ema: None,
        };
        codec.check_dims()?;
        Ok(codec)
    }
}

/// Item → semantic ID table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SidTable {
    pub sids: BTreeMap<ItemId, SemanticId>,
}

/// Items sharing one semantic ID.
#[derive(Debug, Clone, PartialEq)]
pub struct Collision {
    pub sid: SemanticId,
    pub items: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub table: SidTable,
    pub collisions: Vec<Collision>,
}

impl Assignment {
    /// Fraction of items whose semantic ID is shared with another item.
    pub fn collision_rate(&self) -> f64 {
        if self.table.sids.is_empty() {
            return 0.0;
        }
        let shared: usize = self.collisions.iter().map(|c| c.items.len()).sum();
        shared as f64 / self.table.sids.len() as f64
    }
}

impl SidTable {
    pub fn get(&self, item: ItemId) -> Result<&SemanticId> {
        self.sids.get(&item).ok_or(Error::UnassignedSid(item.0))
    }

    /// Items grouped by semantic ID.
    pub fn inverse(&self) -> BTreeMap<SemanticId, Vec<ItemId>> {
        let mut inv: BTreeMap<SemanticId, Vec<ItemId>> = BTreeMap::new();
        for (&item, sid) in &self.sids {
            inv.entry(sid.clone()).or_default().push(item);
        }
        inv
    }

    /// `item  sid` per line, sid written as dash-joined codes.
    pub fn to_tsv(&self) -> String {
        self.sids.iter().map(|(i, s)| format!("{i}\t{s}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut sids = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (item, sid) = line.split_once('\t').ok_or_else(|| Error::Format(format!("bad sid line {line:?}")))?;
            let item = ItemId(item.parse().map_err(|_| Error::Format(format!("bad item {item:?}")))?);
            sids.insert(item, sid.parse()?);
        }
        Ok(SidTable { sids })
    }
}

/// Maps every item to its semantic ID and reports shared IDs.
pub fn assign_all(codec: &Codec, items: &[ItemDescriptor]) -> Result<Assignment> {
    let mut table = SidTable::default();
    for it in items {
        table.sids.insert(it.item, codec.sid_of(&it.features)?);
    }
    let collisions = table
        .inverse()
        .into_iter()
        .filter(|(_, members)| members.len() > 1)
        .map(|(sid, items)| Collision { sid, items })
        .collect();
    Ok(Assignment { table, collisions })
}
