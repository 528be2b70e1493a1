//! Forward and backward passes.
//!
//! Inputs are "packed": several continuations share one context. Token `j`
//! is visible from token `i` when `j <= i` and `j` is either shared context
//! (branch 0) or in the same branch as `i`. Positions are explicit, so each
//! branch continues the context's positions independently.

use super::{LayerNorm, Linear, Policy};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Packed {
    pub tokens: Vec<u32>,
    pub positions: Vec<usize>,
    /// 0 marks shared context; other values name a continuation.
    pub branch: Vec<u32>,
}

impl Packed {
    /// One plain causal sequence.
    pub fn sequence(tokens: &[u32]) -> Self {
        Packed { tokens: tokens.to_vec(), positions: (0..tokens.len()).collect(), branch: vec![0; tokens.len()] }
    }

    pub fn push(&mut self, token: u32, position: usize, branch: u32) {
        self.tokens.push(token);
        self.positions.push(position);
        self.branch.push(branch);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn visible(&self) -> Vec<Vec<usize>> {
        let mut shared: Vec<usize> = Vec::new();
        let mut own: std::collections::HashMap<u32, Vec<usize>> = std::collections::HashMap::new();
        let mut out = Vec::with_capacity(self.len());
        for (i, &b) in self.branch.iter().enumerate() {
            if b == 0 {
                shared.push(i);
                out.push(shared.clone());
            } else {
                let mine = own.entry(b).or_default();
                mine.push(i);
                let mut v = Vec::with_capacity(shared.len() + mine.len());
                let (mut x, mut y) = (0, 0);
                while x < shared.len() || y < mine.len() {
                    if y == mine.len() || (x < shared.len() && shared[x] < mine[y]) {
                        v.push(shared[x]);
                        x += 1;
                    } else {
                        v.push(mine[y]);
                        y += 1;
                    }
                }
                out.push(v);
            }
        }
        out
    }
}

/// Request for the code distribution of `level` read off the hidden state
/// at packed index `index`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    pub index: usize,
    pub level: usize,
}

/// Keys and values of an already-processed context, every token of which
/// is visible to everything that follows.
#[derive(Debug, Clone)]
pub struct PrefixCache {
    pub len: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct LnTape {
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

/// Final hidden states, per-layer tapes, visible sets and the fresh keys and values.
type BlockOutput = (Vec<f64>, Vec<LayerTape>, Vec<Vec<usize>>, Vec<(Vec<f64>, Vec<f64>)>);

#[derive(Debug, Clone)]
struct LayerTape {
    ln1: LnTape,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `[head][row]` attention weights over that row's visible keys.
    probs: Vec<Vec<Vec<f64>>>,
    att: Vec<f64>,
    ln2: LnTape,
    m: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations kept for [`Policy::backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    visible: Vec<Vec<usize>>,
    layers: Vec<LayerTape>,
    ln_f: LnTape,
    z: Vec<f64>,
    queries: Vec<Query>,
}

fn layer_norm(ln: &LayerNorm, x: &[f64], d: usize) -> (Vec<f64>, LnTape) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + LayerNorm::EPS).sqrt();
        rstd[r] = s;
        for c in 0..d {
            let h = (row[c] - mean) * s;
            xhat[r * d + c] = h;
            y[r * d + c] = ln.gain[c] * h + ln.bias[c];
        }
    }
    (y, LnTape { xhat, rstd })
}

fn layer_norm_backward(ln: &LayerNorm, tape: &LnTape, dy: &[f64], d: usize, g: &mut LayerNorm) -> Vec<f64> {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let xh = &tape.xhat[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        for c in 0..d {
            g.gain[c] += dyr[c] * xh[c];
            g.bias[c] += dyr[c];
            dxhat[c] = dyr[c] * ln.gain[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for c in 0..d {
            dx[r * d + c] = tape.rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `y = W x + b + scale * B (A x)` for every row of `x`.
fn linear_forward(l: &Linear, x: &[f64]) -> Vec<f64> {
    let rows = x.len() / l.d_in;
    let mut y = vec![0.0; rows * l.d_out];
    for r in 0..rows {
        let xr = &x[r * l.d_in..(r + 1) * l.d_in];
        let yr = &mut y[r * l.d_out..(r + 1) * l.d_out];
        for o in 0..l.d_out {
            yr[o] = dot(&l.w[o * l.d_in..(o + 1) * l.d_in], xr) + l.b[o];
        }
        if let Some(a) = &l.lora {
            for k in 0..a.rank {
                let ax = a.scale * dot(&a.a[k * l.d_in..(k + 1) * l.d_in], xr);
                if ax != 0.0 {
                    for o in 0..l.d_out {
                        yr[o] += a.b[o * a.rank + k] * ax;
                    }
                }
            }
        }
    }
    y
}

/// Accumulates parameter gradients into `g` and returns `dx`.
fn linear_backward(l: &Linear, x: &[f64], dy: &[f64], g: &mut Linear) -> Vec<f64> {
    let rows = x.len() / l.d_in;
    let mut dx = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * l.d_in..(r + 1) * l.d_in];
        let dyr = &dy[r * l.d_out..(r + 1) * l.d_out];
        let dxr = &mut dx[r * l.d_in..(r + 1) * l.d_in];
        for o in 0..l.d_out {
            let d = dyr[o];
            if d == 0.0 {
                continue;
            }
            g.b[o] += d;
            axpy(d, xr, &mut g.w[o * l.d_in..(o + 1) * l.d_in]);
            axpy(d, &l.w[o * l.d_in..(o + 1) * l.d_in], dxr);
        }
        if let (Some(a), Some(ga)) = (&l.lora, g.lora.as_mut()) {
            for k in 0..a.rank {
                let ak = &a.a[k * l.d_in..(k + 1) * l.d_in];
                let ax = dot(ak, xr);
                let mut bdy = 0.0;
                for o in 0..l.d_out {
                    bdy += a.b[o * a.rank + k] * dyr[o];
                    ga.b[o * a.rank + k] += a.scale * dyr[o] * ax;
                }
                if bdy != 0.0 {
                    axpy(a.scale * bdy, xr, &mut ga.a[k * l.d_in..(k + 1) * l.d_in]);
                    axpy(a.scale * bdy, ak, dxr);
                }
            }
        }
    }
    dx
}

impl Policy {
    fn check_input(&self, packed: &Packed, offset: usize) -> Result<()> {
        if packed.positions.len() != packed.len() || packed.branch.len() != packed.len() {
            return Err(Error::InvalidArgument("packed input fields differ in length".into()));
        }
        let v = self.vocab.size() as u32;
        if let Some(t) = packed.tokens.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {v}")));
        }
        if let Some(p) = packed.positions.iter().find(|&&p| p >= self.cfg.max_positions) {
            return Err(Error::InvalidArgument(format!("position {p} exceeds limit {}", self.cfg.max_positions)));
        }
        if offset > 0 && packed.branch.contains(&0) {
            return Err(Error::InvalidArgument("continuations after a prefix need nonzero branches".into()));
        }
        Ok(())
    }

    fn embed(&self, packed: &Packed) -> Vec<f64> {
        let d = self.cfg.d_model;
        let mut h = vec![0.0; packed.len() * d];
        for (i, (&t, &p)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
            let row = &mut h[i * d..(i + 1) * d];
            row.copy_from_slice(&self.tok_emb[t as usize * d..(t as usize + 1) * d]);
            axpy(1.0, &self.pos_emb[p * d..(p + 1) * d], row);
        }
        h
    }

    /// Runs every block. With a prefix, its keys and values are prepended
    /// to each row's visible set.
    fn run_blocks(&self, packed: &Packed, prefix: Option<&PrefixCache>, keep_tape: bool) -> BlockOutput {
        let d = self.cfg.d_model;
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = packed.len();
        let visible = packed.visible();
        let plen = prefix.map_or(0, |p| p.len);
        let mut h = self.embed(packed);
        let mut tapes = Vec::new();
        let mut kv = Vec::new();
        for (li, blk) in self.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(&blk.ln1, &h, d);
            let q = linear_forward(&blk.wq, &a);
            let k = linear_forward(&blk.wk, &a);
            let v = linear_forward(&blk.wv, &a);
            let mut att = vec![0.0; t * d];
            let mut probs = vec![Vec::with_capacity(t); n_heads];
            let (pk, pv): (&[f64], &[f64]) = match prefix {
                Some(p) => (&p.keys[li], &p.values[li]),
                None => (&[], &[]),
            };
            let mut scores = Vec::new();
            for hd in 0..n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let qi = &q[i * d + cols.start..i * d + cols.end];
                    scores.clear();
                    for j in 0..plen {
                        scores.push(scale * dot(qi, &pk[j * d + cols.start..j * d + cols.end]));
                    }
                    for &j in &visible[i] {
                        scores.push(scale * dot(qi, &k[j * d + cols.start..j * d + cols.end]));
                    }
                    crate::linalg::softmax_in_place(&mut scores);
                    let out = &mut att[i * d + cols.start..i * d + cols.end];
                    for (j, &p) in scores[..plen].iter().enumerate() {
                        axpy(p, &pv[j * d + cols.start..j * d + cols.end], out);
                    }
                    for (&j, &p) in visible[i].iter().zip(&scores[plen..]) {
                        axpy(p, &v[j * d + cols.start..j * d + cols.end], out);
                    }
                    if keep_tape {
                        probs[hd].push(scores.clone());
                    }
                }
            }
            let o = linear_forward(&blk.wo, &att);
            let mut h2 = h.clone();
            axpy(1.0, &o, &mut h2);
            let (m, ln2) = layer_norm(&blk.ln2, &h2, d);
            let u = linear_forward(&blk.w1, &m);
            let g: Vec<f64> = u.iter().map(|&x| gelu(x)).collect();
            let f = linear_forward(&blk.w2, &g);
            let mut h3 = h2.clone();
            axpy(1.0, &f, &mut h3);
            if keep_tape {
                tapes.push(LayerTape { ln1, a, q, k: k.clone(), v: v.clone(), probs, att, ln2, m, u, g });
            }
            kv.push((k, v));
            h = h3;
        }
        (h, tapes, visible, kv)
    }

    fn head_logits(&self, z: &[f64], level: usize) -> Vec<f64> {
        let kk = self.vocab.codebook_size;
        let d = self.cfg.d_model;
        let l = &self.head;
        let mut out: Vec<f64> =
            (level * kk..(level + 1) * kk).map(|o| dot(&l.w[o * d..(o + 1) * d], z) + l.b[o]).collect();
        if let Some(a) = &l.lora {
            for r in 0..a.rank {
                let az = a.scale * dot(&a.a[r * d..(r + 1) * d], z);
                for (c, o) in (level * kk..(level + 1) * kk).enumerate() {
                    out[c] += a.b[o * a.rank + r] * az;
                }
            }
        }
        out
    }

    fn check_queries(&self, packed: &Packed, queries: &[Query]) -> Result<()> {
        for q in queries {
            if q.index >= packed.len() || q.level >= self.vocab.levels {
                return Err(Error::InvalidArgument(format!("query {q:?} out of range")));
            }
        }
        Ok(())
    }

    fn finish(&self, h: &[f64], queries: &[Query]) -> (Vec<Vec<f64>>, Vec<f64>, LnTape) {
        let d = self.cfg.d_model;
        let mut last = Vec::with_capacity(queries.len() * d);
        for q in queries {
            last.extend_from_slice(&h[q.index * d..(q.index + 1) * d]);
        }
        let (z, tape) = layer_norm(&self.ln_f, &last, d);
        let logits =
            queries.iter().enumerate().map(|(n, q)| self.head_logits(&z[n * d..(n + 1) * d], q.level)).collect();
        (logits, z, tape)
    }

    /// Code logits (`K` per query) for each query.
    pub fn forward(&self, packed: &Packed, queries: &[Query]) -> Result<Vec<Vec<f64>>> {
        self.check_input(packed, 0)?;
        self.check_queries(packed, queries)?;
        let (h, _, _, _) = self.run_blocks(packed, None, false);
        Ok(self.finish(&h, queries).0)
    }

    /// Like [`Policy::forward`], also returning what the backward pass needs.
    pub fn forward_train(&self, packed: &Packed, queries: &[Query]) -> Result<(Vec<Vec<f64>>, Tape)> {
        self.check_input(packed, 0)?;
        self.check_queries(packed, queries)?;
        let (h, layers, visible, _) = self.run_blocks(packed, None, true);
        let (logits, z, ln_f) = self.finish(&h, queries);
        Ok((logits, Tape { visible, layers, ln_f, z, queries: queries.to_vec() }))
    }

    /// Processes a shared context once for later [`Policy::forward_with_prefix`] calls.
    pub fn encode_prefix(&self, tokens: &[u32]) -> Result<PrefixCache> {
        let packed = Packed::sequence(tokens);
        self.check_input(&packed, 0)?;
        let (_, _, _, kv) = self.run_blocks(&packed, None, false);
        let (keys, values) = kv.into_iter().unzip();
        Ok(PrefixCache { len: tokens.len(), keys, values })
    }

    /// Forward for continuations (all branches nonzero) of a cached context.
    /// Equivalent to packing the context as branch 0 in front.
    pub fn forward_with_prefix(
        &self,
        prefix: &PrefixCache,
        packed: &Packed,
        queries: &[Query],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_input(packed, prefix.len.max(1))?;
        self.check_queries(packed, queries)?;
        let (h, _, _, _) = self.run_blocks(packed, Some(prefix), false);
        Ok(self.finish(&h, queries).0)
    }

    /// Accumulates into `grads` the gradient of `sum_q dlogits[q] . logits[q]`.
    pub fn backward(&self, packed: &Packed, tape: &Tape, dlogits: &[Vec<f64>], grads: &mut Policy) {
        let d = self.cfg.d_model;
        let kk = self.vocab.codebook_size;
        let n_heads = self.cfg.n_heads;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let t = packed.len();

        // output head on the query rows
        let mut dz = vec![0.0; tape.queries.len() * d];
        for (n, (q, dl)) in tape.queries.iter().zip(dlogits).enumerate() {
            let z = &tape.z[n * d..(n + 1) * d];
            let dzr = &mut dz[n * d..(n + 1) * d];
            for (c, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let o = q.level * kk + c;
                grads.head.b[o] += g;
                axpy(g, z, &mut grads.head.w[o * d..(o + 1) * d]);
                axpy(g, &self.head.w[o * d..(o + 1) * d], dzr);
            }
            if let (Some(a), Some(ga)) = (&self.head.lora, grads.head.lora.as_mut()) {
                for r in 0..a.rank {
                    let ar = &a.a[r * d..(r + 1) * d];
                    let az = dot(ar, z);
                    let mut bdy = 0.0;
                    for (c, &g) in dl.iter().enumerate() {
                        let o = q.level * kk + c;
                        bdy += a.b[o * a.rank + r] * g;
                        ga.b[o * a.rank + r] += a.scale * g * az;
                    }
                    axpy(a.scale * bdy, z, &mut ga.a[r * d..(r + 1) * d]);
                    axpy(a.scale * bdy, ar, dzr);
                }
            }
        }
        let dlast = layer_norm_backward(&self.ln_f, &tape.ln_f, &dz, d, &mut grads.ln_f);
        let mut dh_res = vec![0.0; t * d];
        for (n, q) in tape.queries.iter().enumerate() {
            axpy(1.0, &dlast[n * d..(n + 1) * d], &mut dh_res[q.index * d..(q.index + 1) * d]);
        }

        for (li, blk) in self.blocks.iter().enumerate().rev() {
            let lt = &tape.layers[li];
            let gb = &mut grads.blocks[li];
            // MLP branch: h3 = h2 + W2 gelu(W1 LN2(h2))
            let dg = linear_backward(&blk.w2, &lt.g, &dh_res, &mut gb.w2);
            let du: Vec<f64> = dg.iter().zip(&lt.u).map(|(g, &u)| g * gelu_grad(u)).collect();
            let dm = linear_backward(&blk.w1, &lt.m, &du, &mut gb.w1);
            let dh2_ln = layer_norm_backward(&blk.ln2, &lt.ln2, &dm, d, &mut gb.ln2);
            let mut dh2 = dh_res;
            axpy(1.0, &dh2_ln, &mut dh2);
            // attention branch: h2 = h + Wo att
            let datt = linear_backward(&blk.wo, &lt.att, &dh2, &mut gb.wo);
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dp = Vec::new();
            for hd in 0..n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..t {
                    let probs = &lt.probs[hd][i];
                    let dout = &datt[i * d + cols.start..i * d + cols.end];
                    dp.clear();
                    let mut sum = 0.0;
                    for (&j, &p) in tape.visible[i].iter().zip(probs) {
                        let g = dot(dout, &lt.v[j * d + cols.start..j * d + cols.end]);
                        sum += p * g;
                        dp.push(g);
                        axpy(p, dout, &mut dv[j * d + cols.start..j * d + cols.end]);
                    }
                    let qi = &lt.q[i * d + cols.start..i * d + cols.end];
                    for ((&j, &p), &g) in tape.visible[i].iter().zip(probs).zip(&dp) {
                        let ds = scale * p * (g - sum);
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(
                            ds,
                            &lt.k[j * d + cols.start..j * d + cols.end],
                            &mut dq[i * d + cols.start..i * d + cols.end],
                        );
                        axpy(ds, qi, &mut dk[j * d + cols.start..j * d + cols.end]);
                    }
                }
            }
            let mut da = linear_backward(&blk.wq, &lt.a, &dq, &mut gb.wq);
            axpy(1.0, &linear_backward(&blk.wk, &lt.a, &dk, &mut gb.wk), &mut da);
            axpy(1.0, &linear_backward(&blk.wv, &lt.a, &dv, &mut gb.wv), &mut da);
            let dx_ln = layer_norm_backward(&blk.ln1, &lt.ln1, &da, d, &mut gb.ln1);
            axpy(1.0, &dx_ln, &mut dh2);
            dh_res = dh2;
        }

        for (i, (&tok, &pos)) in packed.tokens.iter().zip(&packed.positions).enumerate() {
            let g = &dh_res[i * d..(i + 1) * d];
            axpy(1.0, g, &mut grads.tok_emb[tok as usize * d..(tok as usize + 1) * d]);
            axpy(1.0, g, &mut grads.pos_emb[pos * d..(pos + 1) * d]);
        }
    }
}
