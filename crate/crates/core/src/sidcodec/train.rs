//! Minibatch training loop for the codec.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rqvae_loss_grad, Codebook, Codec, CodecGrads, Mlp, MlpGrads};
use crate::corpus::ItemDescriptor;
use crate::error::{Error, Result};
use crate::linalg::sq_dist;
use crate::optim::Adam;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub levels: usize,
    pub codebook_size: usize,
    pub d_lat: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub lambda: f64,
    pub ema_decay: f64,
    pub use_ema: bool,
    pub epochs: usize,
    /// Autoencoder-only epochs before codebooks are initialized.
    pub warm_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub kmeans_iters: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig {
            levels: 3,
            codebook_size: 64,
            d_lat: 16,
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            lambda: 0.25,
            ema_decay: 0.9,
            use_ema: true,
            epochs: 60,
            warm_epochs: 1,
            batch_size: 32,
            lr: 2e-3,
            kmeans_iters: 10,
        }
    }
}

impl CodecTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.codebook_size == 0 || self.d_lat == 0 {
            return Err(Error::InvalidConfig("levels, codebook_size and d_lat must be positive".into()));
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig("batch_size, lr must be positive and lambda >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-item squared reconstruction error.
    pub reconstruction: f64,
    /// Mean per-item `sum_d |R_d - Z_d|^2`.
    pub quantization: f64,
    pub reseeded: usize,
}

#[derive(Debug, Clone)]
pub struct TrainedCodec {
    pub codec: Codec,
    pub log: Vec<EpochLog>,
}

/// k-means++ seeding followed by Lloyd iterations. Returns `[k, dim]`.
fn kmeans<R: Rng>(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut R) -> Vec<f64> {
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // fewer distinct points than codewords: duplicate with jitter
            let mut p = points[rng.random_range(0..points.len())].clone();
            for v in p.iter_mut() {
                *v += 1e-3 * (rng.random::<f64>() - 0.5);
            }
            p
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            points[pick].clone()
        };
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &next));
        }
        centers.push(next);
    }
    let mut cb = Codebook { size: k, dim, data: centers.concat() };
    for _ in 0..iters {
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for p in points {
            let c = cb.nearest(p);
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (z, s) in cb.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *z = s / counts[c] as f64;
                }
            }
        }
    }
    cb.data
}

fn check_finite(v: f64, what: &str, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("non-finite {what} loss at epoch {epoch}")))
    }
}

/// Trains encoder and decoder by Adam on the reconstruction-plus-
/// quantization loss, updating codebooks by EMA (or by gradient when EMA is
/// off), reseeding codewords left unused for a whole epoch.
pub fn train_codec(items: &[ItemDescriptor], cfg: &CodecTrainConfig, seed_value: u64) -> Result<TrainedCodec> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("cannot train a codec on an empty catalog".into()));
    }
    let d_feat = items[0].features.len();
    let mut rng = seed::rng(seed_value);
    let enc_dims: Vec<usize> =
        std::iter::once(d_feat).chain(cfg.encoder_hidden.iter().copied()).chain([cfg.d_lat]).collect();
    let dec_dims: Vec<usize> =
        std::iter::once(cfg.d_lat).chain(cfg.decoder_hidden.iter().copied()).chain([d_feat]).collect();
    let mut codec = Codec {
        encoder: Mlp::random(&enc_dims, &mut rng),
        decoder: Mlp::random(&dec_dims, &mut rng),
        codebooks: (0..cfg.levels)
            .map(|_| Codebook {
                size: cfg.codebook_size,
                dim: cfg.d_lat,
                data: vec![0.0; cfg.codebook_size * cfg.d_lat],
            })
            .collect(),
        lambda: cfg.lambda,
        ema_decay: cfg.ema_decay,
        use_ema: cfg.use_ema,
        ema: None,
    };
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut warm_opt = Adam::new(cfg.lr);
    for epoch in 0..cfg.warm_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut ge = MlpGrads::zeros_like(&codec.encoder);
            let mut gd = MlpGrads::zeros_like(&codec.decoder);
            for &i in batch {
                let x = &items[i].features;
                let ec = codec.encoder.forward_cached(x);
                let dc = codec.decoder.forward_cached(&ec.output);
                let dy: Vec<f64> = dc.output.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
                check_finite(dy.iter().sum(), "warm-up", epoch)?;
                let dz = codec.decoder.backward(&dc, &dy, &mut gd);
                codec.encoder.backward(&ec, &dz, &mut ge);
            }
            let s = 1.0 / batch.len() as f64;
            scale(&mut ge, s);
            scale(&mut gd, s);
            let grads: Vec<&[f64]> = ge.slices().into_iter().chain(gd.slices()).collect();
            let params: Vec<&mut [f64]> =
                codec.encoder.params_mut().into_iter().chain(codec.decoder.params_mut()).collect();
            warm_opt.step(params, grads);
        }
    }

    // level-wise k-means on encoder outputs and their residuals
    let mut residuals: Vec<Vec<f64>> = items.iter().map(|it| codec.encoder.forward(&it.features)).collect();
    for level in 0..cfg.levels {
        let data = kmeans(&residuals, cfg.codebook_size, cfg.kmeans_iters, &mut rng);
        codec.codebooks[level].data = data;
        let cb = &codec.codebooks[level];
        for r in residuals.iter_mut() {
            let k = cb.nearest(r);
            for (v, z) in r.iter_mut().zip(cb.row(k)) {
                *v -= z;
            }
        }
    }
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut used = vec![vec![false; cfg.codebook_size]; cfg.levels];
        let mut level_inputs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); cfg.levels];
        let (mut rec_sum, mut quant_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = CodecGrads::zeros_like(&codec);
            let mut assignments = Vec::with_capacity(batch.len());
            for &i in batch {
                let (loss, g, q) = rqvae_loss_grad(&codec, &items[i].features)?;
                check_finite(loss.total, "training", epoch)?;
                rec_sum += loss.reconstruction;
                quant_sum += loss.commitment;
                grads.add_scaled(&g, 1.0 / batch.len() as f64);
                for (d, &c) in q.sid.0.iter().enumerate() {
                    used[d][c as usize] = true;
                    level_inputs[d].push(q.residuals[d].clone());
                }
                assignments.push(q);
            }
            {
                let mut params: Vec<&mut [f64]> =
                    codec.encoder.params_mut().into_iter().chain(codec.decoder.params_mut()).collect();
                let mut gs: Vec<&[f64]> = grads.encoder.slices().into_iter().chain(grads.decoder.slices()).collect();
                if !cfg.use_ema {
                    params.extend(codec.codebooks.iter_mut().map(|cb| &mut cb.data[..]));
                    gs.extend(grads.codebooks.iter().map(|g| &g[..]));
                }
                opt.step(params, gs);
            }
            if cfg.use_ema {
                codec.ema_update(&assignments);
            }
        }
        let mut reseeded = 0;
        for (level, flags) in used.iter().enumerate() {
            for (k, &was_used) in flags.iter().enumerate() {
                if !was_used {
                    let pick = &level_inputs[level][rng.random_range(0..level_inputs[level].len())];
                    let value = pick.clone();
                    codec.reseed_codeword(level, k, &value);
                    reseeded += 1;
                }
            }
        }
        let n = items.len() as f64;
        log.push(EpochLog { epoch, reconstruction: rec_sum / n, quantization: quant_sum / n, reseeded });
    }
    Ok(TrainedCodec { codec, log })
}

fn scale(g: &mut MlpGrads, s: f64) {
    for v in g.w.iter_mut().chain(g.b.iter_mut()).flat_map(|v| v.iter_mut()) {
        *v *= s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconstructionReport {
    /// Mean over items and feature dimensions of the squared error.
    pub mse_per_dim: f64,
    /// Mean over feature dimensions of the per-dimension variance.
    pub feature_variance: f64,
}

impl ReconstructionReport {
    pub fn relative_error(&self) -> f64 {
        self.mse_per_dim / self.feature_variance
    }
}

pub fn reconstruction_report(codec: &Codec, items: &[ItemDescriptor]) -> Result<ReconstructionReport> {
    let d = codec.d_feat();
    let n = items.len() as f64;
    let mut err = 0.0;
    let mut mean = vec![0.0; d];
    for it in items {
        let q = codec.quantize(&codec.encode(&it.features)?);
        err += sq_dist(&it.features, &codec.decode(&q.quantized)?);
        for (m, v) in mean.iter_mut().zip(&it.features) {
            *m += v / n;
        }
    }
    let var: f64 = items.iter().map(|it| sq_dist(&it.features, &mean)).sum::<f64>() / n;
    Ok(ReconstructionReport { mse_per_dim: err / (n * d as f64), feature_variance: var / d as f64 })
}
