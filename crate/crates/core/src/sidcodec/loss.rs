//! Reconstruction plus quantization loss with stop-gradient routing.
//!
//! For latent `X = E(x)`, level inputs `R_d`, selected codewords `Z_d` and
//! reconstruction `x^ = D(sum_d Z_d)`:
//!
//! ```text
//! L = |x - x^|^2 + lambda * sum_d ( |R_d - sg[Z_d]|^2 + |sg[R_d] - Z_d|^2 )
//! ```
//!
//! The first quantization term pulls the encoder toward its codewords; the
//! second pulls codewords toward residuals and is only differentiated when
//! EMA updates are off. Decoder gradients reach the encoder through the
//! straight-through estimator (quantization treated as identity).

use super::{Codec, MlpGrads, QuantizeResult};
use crate::error::{Error, Result};
use crate::linalg::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqvaeLoss {
    pub total: f64,
    pub reconstruction: f64,
    /// `sum_d |R_d - sg[Z_d]|^2`.
    pub commitment: f64,
    /// `sum_d |sg[R_d] - Z_d|^2`.
    pub codebook: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecGrads {
    pub encoder: MlpGrads,
    pub decoder: MlpGrads,
    /// Per-level `[K, d_lat]`; stays zero when the codec uses EMA.
    pub codebooks: Vec<Vec<f64>>,
}

impl CodecGrads {
    pub fn zeros_like(codec: &Codec) -> Self {
        CodecGrads {
            encoder: MlpGrads::zeros_like(&codec.encoder),
            decoder: MlpGrads::zeros_like(&codec.decoder),
            codebooks: codec.codebooks.iter().map(|cb| vec![0.0; cb.data.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &CodecGrads, s: f64) {
        self.encoder.add_scaled(&other.encoder, s);
        self.decoder.add_scaled(&other.decoder, s);
        for (a, b) in self.codebooks.iter_mut().zip(&other.codebooks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }
}

fn breakdown(codec: &Codec, x: &[f64], x_hat: &[f64], q: &QuantizeResult) -> RqvaeLoss {
    let reconstruction = sq_dist(x, x_hat);
    let mut quant = 0.0;
    for (d, r) in q.residuals.iter().enumerate() {
        quant += sq_dist(r, codec.codebooks[d].row(q.sid.0[d] as usize));
    }
    // both terms share a value; they differ only in gradient routing
    RqvaeLoss { total: reconstruction + codec.lambda * 2.0 * quant, reconstruction, commitment: quant, codebook: quant }
}

pub fn rqvae_loss(codec: &Codec, x: &[f64]) -> Result<RqvaeLoss> {
    let latent = codec.encode(x)?;
    let q = codec.quantize(&latent);
    let x_hat = codec.decode(&q.quantized)?;
    Ok(breakdown(codec, x, &x_hat, &q))
}

/// Loss, gradients and the quantization used for one input.
pub fn rqvae_loss_grad(codec: &Codec, x: &[f64]) -> Result<(RqvaeLoss, CodecGrads, QuantizeResult)> {
    if x.len() != codec.d_feat() {
        return Err(Error::DimensionMismatch { expected: codec.d_feat(), got: x.len() });
    }
    let enc_cache = codec.encoder.forward_cached(x);
    let latent = &enc_cache.output;
    let q = codec.quantize(latent);
    let dec_cache = codec.decoder.forward_cached(&q.quantized);
    let x_hat = &dec_cache.output;
    let loss = breakdown(codec, x, x_hat, &q);

    let mut grads = CodecGrads::zeros_like(codec);
    let d_xhat: Vec<f64> = x_hat.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
    // straight-through: gradient w.r.t. the quantized sum lands on the latent
    let mut d_latent = codec.decoder.backward(&dec_cache, &d_xhat, &mut grads.decoder);
    for (d, r) in q.residuals.iter().enumerate() {
        let k = q.sid.0[d] as usize;
        let z = codec.codebooks[d].row(k);
        for (g, (ri, zi)) in d_latent.iter_mut().zip(r.iter().zip(z)) {
            *g += codec.lambda * 2.0 * (ri - zi);
        }
        if !codec.use_ema {
            let dim = z.len();
            let gz = &mut grads.codebooks[d][k * dim..(k + 1) * dim];
            for (g, (ri, zi)) in gz.iter_mut().zip(r.iter().zip(z)) {
                *g += codec.lambda * 2.0 * (zi - ri);
            }
        }
    }
    codec.encoder.backward(&enc_cache, &d_latent, &mut grads.encoder);
    Ok((loss, grads, q))
}
