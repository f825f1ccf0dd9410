//! Gaussian VAE whose latent prior is supplied by the factor-analysis layer.
//!
//! Encoder: `q(f | o) = N(μ(o), diag(exp(logvar(o))))`; decoder:
//! `p(o | f) = N(μ_θ(f), σ² I)` with fixed `σ`. Per sample the objective is
//! `log p(o | f) − β KL(q(f | o) ‖ N(m, τ⁻¹ I))` with `f` a single
//! reparameterised draw and `(m, τ)` the prior row from the linear layer.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, DenseGrad, Mlp};
use super::{optimize_step, AdamState};
use crate::error::{FaError, Result};
use crate::rng::{derive_seed, seeded};

/// Encoder log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 12.0;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeArchitecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub activation: Activation,
    pub beta: f64,
    pub decoder_sigma: f64,
}

impl Default for VaeArchitecture {
    fn default() -> Self {
        VaeArchitecture {
            input_dim: 0,
            latent_dim: 8,
            encoder_hidden: vec![64],
            decoder_hidden: vec![64],
            activation: Activation::Tanh,
            beta: 1.0,
            decoder_sigma: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeNet {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub beta: f64,
    pub decoder_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGradients {
    pub encoder: Vec<DenseGrad>,
    pub decoder: Vec<DenseGrad>,
}

impl VaeGradients {
    /// Flattened in the same order as [`VaeNet::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(|g| g.weight.iter().chain(g.bias.iter()).copied())
            .collect()
    }
}

/// Prior rows `N(mean_n, τ⁻¹ I)` imposed on the latent codes.
#[derive(Debug, Clone, PartialEq)]
pub struct FaPrior {
    pub mean: DMatrix<f64>,
    pub tau: f64,
}

impl FaPrior {
    pub fn standard(rows: usize, latent_dim: usize) -> Self {
        FaPrior {
            mean: DMatrix::zeros(rows, latent_dim),
            tau: 1.0,
        }
    }
}

impl VaeNet {
    pub fn new<R: Rng>(arch: &VaeArchitecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.latent_dim == 0 {
            return Err(FaError::invalid(
                "VAE input and latent dimensions must be positive",
            ));
        }
        if !(arch.beta >= 1.0) {
            return Err(FaError::invalid(format!(
                "VAE beta must be >= 1, got {}",
                arch.beta
            )));
        }
        if !(arch.decoder_sigma > 0.0) {
            return Err(FaError::invalid(format!(
                "decoder sigma must be > 0, got {}",
                arch.decoder_sigma
            )));
        }
        let mut enc = vec![arch.input_dim];
        enc.extend(&arch.encoder_hidden);
        enc.push(2 * arch.latent_dim);
        let mut dec = vec![arch.latent_dim];
        dec.extend(&arch.decoder_hidden);
        dec.push(arch.input_dim);
        Ok(VaeNet {
            encoder: Mlp::new(&enc, arch.activation, rng),
            decoder: Mlp::new(&dec, arch.activation, rng),
            latent_dim: arch.latent_dim,
            beta: arch.beta,
            decoder_sigma: arch.decoder_sigma,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.output_dim() != 2 * self.latent_dim {
            return Err(FaError::dim(
                "encoder output width",
                2 * self.latent_dim,
                self.encoder.output_dim(),
            ));
        }
        if self.decoder.input_dim() != self.latent_dim {
            return Err(FaError::dim(
                "decoder input width",
                self.latent_dim,
                self.decoder.input_dim(),
            ));
        }
        if self.decoder.output_dim() != self.encoder.input_dim() {
            return Err(FaError::dim(
                "decoder output width",
                self.encoder.input_dim(),
                self.decoder.output_dim(),
            ));
        }
        if !(self.decoder_sigma > 0.0) || !(self.beta >= 1.0) {
            return Err(FaError::invalid(
                "VAE needs decoder_sigma > 0 and beta >= 1",
            ));
        }
        Ok(())
    }

    /// Means and clamped log-variances for a batch (rows are samples).
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if x.ncols() != self.input_dim() {
            return Err(FaError::dim("encoder input", self.input_dim(), x.ncols()));
        }
        let out = self.encoder.forward(x);
        let mu = out.columns(0, self.latent_dim).into_owned();
        let logvar = out
            .columns(self.latent_dim, self.latent_dim)
            .map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
        Ok((mu, logvar))
    }

    /// Encodes one observation.
    pub fn encode(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let (mu, lv) = self.encode_batch(&DMatrix::from_row_slice(1, x.len(), x.as_slice()))?;
        Ok((mu.row(0).transpose(), lv.row(0).transpose()))
    }

    /// Decoder means for a batch of codes.
    pub fn decode_batch(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if f.ncols() != self.latent_dim {
            return Err(FaError::dim("decoder input", self.latent_dim, f.ncols()));
        }
        Ok(self.decoder.forward(f))
    }

    pub fn n_params(&self) -> usize {
        self.encoder.n_params() + self.decoder.n_params()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.encoder
            .layers
            .iter()
            .chain(&self.decoder.layers)
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params(), "parameter vector length");
        let mut offset = 0;
        for layer in self
            .encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
        {
            let nw = layer.weight.len();
            layer
                .weight
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = layer.bias.len();
            layer
                .bias
                .as_mut_slice()
                .copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }
}

/// Standard normal draws filled row by row from a seeded stream.
pub fn standard_normal_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = seeded(seed);
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

/// `f = μ + exp(logvar / 2) ⊙ ε`, `ε ~ N(0, I)`.
pub fn reparam_sample(mu: &DVector<f64>, logvar: &DVector<f64>, seed: u64) -> DVector<f64> {
    let eps = standard_normal_matrix(1, mu.len(), seed);
    DVector::from_fn(mu.len(), |i, _| {
        mu[i] + (0.5 * logvar[i]).exp() * eps[(0, i)]
    })
}

/// `KL(N(μ, diag e^logvar) ‖ N(m, τ⁻¹ I))`.
pub fn kl_to_fa_prior(mu: &[f64], logvar: &[f64], prior_mean: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(FaError::invalid(format!(
            "prior precision must be positive, got {tau}"
        )));
    }
    if mu.len() != logvar.len() || mu.len() != prior_mean.len() {
        return Err(FaError::dim(
            "KL arguments",
            mu.len(),
            format!("{}/{}", logvar.len(), prior_mean.len()),
        ));
    }
    let ln_tau = tau.ln();
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .zip(prior_mean)
            .map(|((&m, &lv), &p)| tau * (lv.exp() + (m - p) * (m - p)) - 1.0 - lv - ln_tau)
            .sum::<f64>())
}

/// `log N(x | x̂, σ² I)`.
pub fn gaussian_log_lik(x: &[f64], x_hat: &[f64], sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let c = LN_2PI + s2.ln();
    -0.5 * x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b) / s2 + c)
        .sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct ElboBatch {
    /// `Σ_batch [GLL − β KL]`.
    pub elbo: f64,
    pub gll: f64,
    pub kl: f64,
    pub grads: VaeGradients,
}

/// Batch objective and its gradient by reverse-mode differentiation through
/// the reparameterised sample. `ε` is drawn with
/// [`standard_normal_matrix`]`(rows, latent_dim, seed)`.
pub fn vae_elbo_batch(
    net: &VaeNet,
    x: &DMatrix<f64>,
    prior: &FaPrior,
    seed: u64,
) -> Result<ElboBatch> {
    let b = x.nrows();
    let k = net.latent_dim;
    if prior.mean.shape() != (b, k) {
        return Err(FaError::dim(
            "prior rows",
            format!("({b}, {k})"),
            format!("{:?}", prior.mean.shape()),
        ));
    }
    if !(prior.tau > 0.0) {
        return Err(FaError::invalid(format!(
            "prior precision must be positive, got {}",
            prior.tau
        )));
    }
    if x.ncols() != net.input_dim() {
        return Err(FaError::dim("encoder input", net.input_dim(), x.ncols()));
    }

    let (enc_out, enc_tape) = net.encoder.forward_tape(x);
    let eps = standard_normal_matrix(b, k, seed);
    let mut mu = DMatrix::zeros(b, k);
    let mut lv = DMatrix::zeros(b, k);
    let mut clamped = vec![false; b * k];
    let mut std = DMatrix::zeros(b, k);
    let mut f = DMatrix::zeros(b, k);
    for i in 0..b {
        for j in 0..k {
            let raw = enc_out[(i, k + j)];
            let l = raw.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            clamped[i * k + j] = l != raw;
            mu[(i, j)] = enc_out[(i, j)];
            lv[(i, j)] = l;
            std[(i, j)] = (0.5 * l).exp();
            f[(i, j)] = mu[(i, j)] + std[(i, j)] * eps[(i, j)];
        }
    }

    let (x_hat, dec_tape) = net.decoder.forward_tape(&f);
    let s2 = net.decoder_sigma * net.decoder_sigma;
    let tau = prior.tau;
    let beta = net.beta;

    let mut gll_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..b {
        let xr: Vec<f64> = x.row(i).iter().copied().collect();
        let hr: Vec<f64> = x_hat.row(i).iter().copied().collect();
        let gll = gaussian_log_lik(&xr, &hr, net.decoder_sigma);
        let mur: Vec<f64> = mu.row(i).iter().copied().collect();
        let lvr: Vec<f64> = lv.row(i).iter().copied().collect();
        let pr: Vec<f64> = prior.mean.row(i).iter().copied().collect();
        let kl = kl_to_fa_prior(&mur, &lvr, &pr, tau)?;
        if !gll.is_finite() || !kl.is_finite() {
            return Err(FaError::numerical(
                "VAE objective",
                format!("non-finite loss at batch sample {i} (gll={gll}, kl={kl})"),
            ));
        }
        gll_sum += gll;
        kl_sum += kl;
    }

    // ∂GLL/∂x̂ = (x − x̂)/σ²
    let d_xhat = (x - &x_hat) / s2;
    let (d_f, dec_grads) = net.decoder.backward(&dec_tape, d_xhat);

    let mut d_enc = DMatrix::zeros(b, 2 * k);
    for i in 0..b {
        for j in 0..k {
            let dmu = d_f[(i, j)] - beta * tau * (mu[(i, j)] - prior.mean[(i, j)]);
            let dlv = if clamped[i * k + j] {
                0.0
            } else {
                d_f[(i, j)] * 0.5 * std[(i, j)] * eps[(i, j)]
                    - beta * 0.5 * (tau * lv[(i, j)].exp() - 1.0)
            };
            d_enc[(i, j)] = dmu;
            d_enc[(i, k + j)] = dlv;
        }
    }
    let (_, enc_grads) = net.encoder.backward(&enc_tape, d_enc);

    Ok(ElboBatch {
        elbo: gll_sum - beta * kl_sum,
        gll: gll_sum,
        kl: kl_sum,
        grads: VaeGradients {
            encoder: enc_grads,
            decoder: dec_grads,
        },
    })
}

/// Per-sample averages over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub elbo: f64,
    pub gll: f64,
    pub kl: f64,
}

/// One pass over `rows` in shuffled mini-batches, stepping Adam after each.
/// `prior_mean` is indexed by sample (all `N` rows).
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    net: &mut VaeNet,
    adam: &mut AdamState,
    data: &DMatrix<f64>,
    rows: &[usize],
    prior_mean: &DMatrix<f64>,
    tau: f64,
    batch_size: usize,
    seed: u64,
) -> Result<EpochStats> {
    if rows.is_empty() {
        return Ok(EpochStats {
            elbo: 0.0,
            gll: 0.0,
            kl: 0.0,
        });
    }
    let mut order = rows.to_vec();
    order.shuffle(&mut seeded(derive_seed(seed, &[0])));
    let mut totals = (0.0, 0.0, 0.0);
    for (bi, chunk) in order.chunks(batch_size.max(1)).enumerate() {
        let x = data.select_rows(chunk);
        let prior = FaPrior {
            mean: prior_mean.select_rows(chunk),
            tau,
        };
        let out = vae_elbo_batch(net, &x, &prior, derive_seed(seed, &[1, bi as u64])).map_err(
            |e| match e {
                FaError::Numerical { context, detail } => FaError::Numerical {
                    context,
                    detail: format!(
                        "{detail} (sample index {})",
                        chunk.first().copied().unwrap_or(0)
                    ),
                },
                other => other,
            },
        )?;
        optimize_step(net, &out.grads, adam);
        totals.0 += out.elbo;
        totals.1 += out.gll;
        totals.2 += out.kl;
    }
    let n = rows.len() as f64;
    Ok(EpochStats {
        elbo: totals.0 / n,
        gll: totals.1 / n,
        kl: totals.2 / n,
    })
}

/// Plain VAE training against the standard normal prior.
pub fn train_standalone(
    net: &mut VaeNet,
    adam: &mut AdamState,
    data: &DMatrix<f64>,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<EpochStats>> {
    let rows: Vec<usize> = (0..data.nrows()).collect();
    let prior = DMatrix::zeros(data.nrows(), net.latent_dim);
    (0..epochs)
        .map(|e| {
            train_epoch(
                net,
                adam,
                data,
                &rows,
                &prior,
                1.0,
                batch_size,
                derive_seed(seed, &[e as u64]),
            )
        })
        .collect()
}

/// Decoder output at the encoder mean.
pub fn reconstruct(net: &VaeNet, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (mu, _) = net.encode_batch(x)?;
    net.decode_batch(&mu)
}

/// Mean per-sample Gaussian log-likelihood of the mean reconstruction.
pub fn reconstruction_gll(net: &VaeNet, x: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let rec = reconstruct(net, x)?;
    let total: f64 = (0..x.nrows())
        .map(|i| {
            let a: Vec<f64> = x.row(i).iter().copied().collect();
            let b: Vec<f64> = rec.row(i).iter().copied().collect();
            gaussian_log_lik(&a, &b, net.decoder_sigma)
        })
        .sum();
    Ok(total / x.nrows() as f64)
}
