//! Semantic feature expansion: an AE or VAE over visual features whose
//! latent code is trained jointly for reconstruction and for cosine
//! alignment with the MDS embedding of the seen-class centers.
//!
//! For a training example `x` of seen class `y`, the combined semantic
//! vector is `s = [predefined(y), z]` where `z` is the AE code or the
//! reparameterized VAE sample. The objective per batch is
//!
//! ```text
//! α · (mean ‖x − x̂‖² [+ mean KL(q(z|x) ‖ N(0, I))]) + β · mean (1 − cos(s, o_y))
//! ```
//!
//! Both terms are batch means. The KL term is added (it pulls the posterior
//! toward the prior).

use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{format_f64, write_text, LabeledDataset};
use crate::error::{Error, Result};
use crate::mds::EmbeddedManifold;
use crate::nn::{mlp_specs, Activation, Adam, AdamConfig, Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Ae,
    Vae,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Ae => "ae",
            Variant::Vae => "vae",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ae" => Some(Variant::Ae),
            "vae" => Some(Variant::Vae),
            _ => None,
        }
    }
}

/// Encoder/decoder pair. A VAE encoder emits `[μ, log σ²]` (width `2k`).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionModel {
    variant: Variant,
    latent_dim: usize,
    encoder: Network,
    decoder: Network,
}

impl ExpansionModel {
    pub fn new(variant: Variant, encoder: Network, decoder: Network) -> Result<Self> {
        let latent_dim = decoder.input_dim();
        let enc_out = match variant {
            Variant::Ae => latent_dim,
            Variant::Vae => 2 * latent_dim,
        };
        if encoder.output_dim() != enc_out {
            return Err(Error::shape("encoder output", enc_out, encoder.output_dim()));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(Error::shape("decoder output", encoder.input_dim(), decoder.output_dim()));
        }
        Ok(Self {
            variant,
            latent_dim,
            encoder,
            decoder,
        })
    }

    /// Draws encoder then decoder parameters from `rng`.
    pub fn init(
        variant: Variant,
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::Invalid("latent dimension must be >= 1".into()));
        }
        let enc_out = match variant {
            Variant::Ae => latent_dim,
            Variant::Vae => 2 * latent_dim,
        };
        let encoder = Network::init(&mlp_specs(input_dim, hidden, enc_out, activation), rng)?;
        let reversed: Vec<usize> = hidden.iter().rev().copied().collect();
        let decoder = Network::init(&mlp_specs(latent_dim, &reversed, input_dim, activation), rng)?;
        Self::new(variant, encoder, decoder)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn encoder(&self) -> &Network {
        &self.encoder
    }

    pub fn decoder(&self) -> &Network {
        &self.decoder
    }

    pub fn encoder_mut(&mut self) -> &mut Network {
        &mut self.encoder
    }

    pub fn decoder_mut(&mut self) -> &mut Network {
        &mut self.decoder
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = format!("expansion {} {}\n", self.variant.name(), self.latent_dim);
        self.encoder.write_checkpoint(&mut out);
        self.decoder.write_checkpoint(&mut out);
        write_text(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let variant = match header.as_slice() {
            ["expansion", v, _] => Variant::parse(v),
            _ => None,
        }
        .ok_or_else(|| Error::Invalid(format!("{}: not an expansion checkpoint", path.display())))?;
        let encoder = Network::read_checkpoint(&mut lines)?;
        let decoder = Network::read_checkpoint(&mut lines)?;
        Self::new(variant, encoder, decoder)
    }
}

/// Latent codes for each row of `features`: the AE code, or `μ` for a VAE.
pub fn encode_examples(model: &ExpansionModel, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let out = model.encoder.predict(features)?;
    Ok(match model.variant {
        Variant::Ae => out,
        Variant::Vae => out.slice(s![.., ..model.latent_dim]).to_owned(),
    })
}

/// Predefined seen prototypes and the per-class alignment targets.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentContext {
    /// `m × n`, seen classes in class-list order.
    predefined: Array2<f64>,
    /// `(n + k) × m`; column `j` is the target for seen class `j`.
    targets: Array2<f64>,
    target_norms: Vec<f64>,
}

impl AlignmentContext {
    pub fn new(seen_predefined: Array2<f64>, manifold: &EmbeddedManifold) -> Result<Self> {
        let (m, n) = seen_predefined.dim();
        let targets = manifold.coords.clone();
        if targets.ncols() != m {
            return Err(Error::shape("embedding columns", m, targets.ncols()));
        }
        if targets.nrows() <= n {
            return Err(Error::shape("embedding rows", format!("> {n} (n + k)"), targets.nrows()));
        }
        let target_norms: Vec<f64> = targets.columns().into_iter().map(|c| c.dot(&c).sqrt()).collect();
        if let Some(j) = target_norms.iter().position(|&v| v == 0.0) {
            return Err(Error::ZeroNorm(format!(
                "embedding of seen class {j} has zero norm; cosine alignment is undefined"
            )));
        }
        Ok(Self {
            predefined: seen_predefined,
            targets,
            target_norms,
        })
    }

    pub fn classes(&self) -> usize {
        self.predefined.nrows()
    }

    pub fn predefined_dim(&self) -> usize {
        self.predefined.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.targets.nrows() - self.predefined.ncols()
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    /// Infimum over all latent codes of `1 − cos([p_j, z], o_j)` for seen class `j`.
    ///
    /// With `a = p̂·ô[..n]` and `r = ‖ô[n..]‖` the best cosine is `√(a² + r²)`
    /// when `a > 0`, else `r` (approached as `‖z‖ → ∞`).
    pub fn best_alignment_loss(&self, class: usize) -> f64 {
        let n = self.predefined_dim();
        let p = self.predefined.row(class);
        let o = self.targets.column(class);
        let on = self.target_norms[class];
        let pn = p.dot(&p).sqrt();
        let tail = o.slice(s![n..]);
        let r = tail.dot(&tail).sqrt() / on;
        let a = if pn > 0.0 { p.dot(&o.slice(s![..n])) / (pn * on) } else { 0.0 };
        let best = if a > 0.0 { (a * a + r * r).sqrt() } else { r };
        1.0 - best
    }

    /// Mean of [`Self::best_alignment_loss`] over a label sequence (seen positions).
    pub fn alignment_floor(&self, labels: &[usize]) -> f64 {
        labels.iter().map(|&y| self.best_alignment_loss(y)).sum::<f64>() / labels.len() as f64
    }
}

/// Reconstruction and alignment weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 9.0, beta: 77.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(Error::Invalid("alpha and beta must be finite and nonnegative".into()));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::Invalid("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

fn check_same_shape(context: &'static str, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(context, format!("{:?}", a.dim()), format!("{:?}", b.dim())));
    }
    Ok(())
}

/// Mean over rows of `‖x − x̂‖²`.
pub fn reconstruction_loss(x: ArrayView2<'_, f64>, xhat: ArrayView2<'_, f64>) -> Result<f64> {
    check_same_shape("reconstruction", x, xhat)?;
    let sum: f64 = x.iter().zip(xhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.nrows() as f64)
}

/// Mean over rows of `½ Σ (μ² + exp(logvar) − 1 − logvar)`.
pub fn kl_to_standard_normal(mu: ArrayView2<'_, f64>, logvar: ArrayView2<'_, f64>) -> Result<f64> {
    check_same_shape("kl", mu, logvar)?;
    if mu.iter().chain(logvar.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kl inputs".into()));
    }
    let sum: f64 = mu
        .iter()
        .zip(logvar.iter())
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum();
    Ok(0.5 * sum / mu.nrows() as f64)
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn reparameterize(
    mu: ArrayView2<'_, f64>,
    logvar: ArrayView2<'_, f64>,
    eps: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    check_same_shape("reparameterize", mu, logvar)?;
    check_same_shape("reparameterize noise", mu, eps)?;
    let mut z = mu.to_owned();
    ndarray::Zip::from(&mut z)
        .and(logvar)
        .and(eps)
        .for_each(|z, &lv, &e| *z += (0.5 * lv).exp() * e);
    Ok(z)
}

/// Mean `1 − cos([predefined(y), z], o_y)` and its gradient w.r.t. `z`.
/// `labels` are positions within the seen classes.
pub fn alignment_loss_and_grad(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    ctx: &AlignmentContext,
) -> Result<(f64, Array2<f64>)> {
    let (b, k) = z.dim();
    if k != ctx.latent_dim() {
        return Err(Error::shape("alignment latent", ctx.latent_dim(), k));
    }
    if labels.len() != b {
        return Err(Error::shape("alignment labels", b, labels.len()));
    }
    let n = ctx.predefined_dim();
    let mut grad = Array2::zeros((b, k));
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= ctx.classes() {
            return Err(Error::Invalid(format!("alignment label {y} is not a seen class position")));
        }
        let p = ctx.predefined.row(y);
        let zi = z.row(i);
        let o = ctx.targets.column(y);
        let o_norm = ctx.target_norms[y];
        let s_sq = p.dot(&p) + zi.dot(&zi);
        if s_sq == 0.0 {
            return Err(Error::ZeroNorm(format!(
                "combined semantic vector of batch row {i} has zero norm; cosine alignment is undefined"
            )));
        }
        let s_norm = s_sq.sqrt();
        let dot = p.dot(&o.slice(s![..n])) + zi.dot(&o.slice(s![n..]));
        let cos = dot / (s_norm * o_norm);
        total += 1.0 - cos;
        // ∂(1 − cos)/∂s = −(o/‖o‖ − cos · s/‖s‖) / ‖s‖
        let mut g = grad.row_mut(i);
        for j in 0..k {
            g[j] = -(o[n + j] / o_norm - cos * zi[j] / s_norm) / (s_norm * b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

pub fn alignment_loss(z: ArrayView2<'_, f64>, labels: &[usize], ctx: &AlignmentContext) -> Result<f64> {
    Ok(alignment_loss_and_grad(z, labels, ctx)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    /// Zero for the AE variant.
    pub kl: f64,
    pub alignment: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradients {
    pub encoder: Gradients,
    pub decoder: Gradients,
}

impl ModelGradients {
    /// Encoder then decoder parameters, matching [`model_flat_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.encoder.to_flat();
        out.extend(self.decoder.to_flat());
        out
    }
}

/// Encoder then decoder parameters as one flat vector.
pub fn model_flat_params(model: &ExpansionModel) -> Vec<f64> {
    let mut out = model.encoder.to_flat();
    out.extend(model.decoder.to_flat());
    out
}

pub fn set_model_flat_params(model: &mut ExpansionModel, values: &[f64]) -> Result<()> {
    let split = model.encoder.param_count();
    if values.len() != split + model.decoder.param_count() {
        return Err(Error::shape(
            "model parameters",
            split + model.decoder.param_count(),
            values.len(),
        ));
    }
    model.encoder.set_flat(&values[..split])?;
    model.decoder.set_flat(&values[split..])
}

/// Joint objective on one batch and its exact gradients.
///
/// `labels` are seen-class positions. `eps` is the standard normal draw used
/// by the VAE reparameterization (`B × k`) and is ignored by the AE.
pub fn unified_loss(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    model: &ExpansionModel,
    ctx: &AlignmentContext,
    weights: LossWeights,
    eps: Option<ArrayView2<'_, f64>>,
) -> Result<(LossBreakdown, ModelGradients)> {
    let b = x.nrows();
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let k = model.latent_dim;
    let enc_pass = model.encoder.forward(x)?;
    let enc_out = enc_pass.output();
    let (z, mu_lv) = match model.variant {
        Variant::Ae => (enc_out.clone(), None),
        Variant::Vae => {
            let eps = eps.ok_or_else(|| Error::Invalid("VAE loss needs a noise draw".into()))?;
            let mu = enc_out.slice(s![.., ..k]);
            let lv = enc_out.slice(s![.., k..]);
            (reparameterize(mu, lv, eps)?, Some((mu, lv, eps)))
        }
    };
    let dec_pass = model.decoder.forward(z.view())?;
    let xhat = dec_pass.output();
    let reconstruction = reconstruction_loss(x, xhat.view())?;
    let dxhat = (xhat - &x) * (2.0 * weights.alpha / b as f64);
    let (decoder, dz_rec) = model.decoder.backward(&dec_pass, dxhat.view())?;
    let (alignment, dalign) = alignment_loss_and_grad(z.view(), labels, ctx)?;
    let dz = dz_rec + &(dalign * weights.beta);

    let (kl, enc_grad_out) = match mu_lv {
        None => (0.0, dz),
        Some((mu, lv, eps)) => {
            let kl = kl_to_standard_normal(mu, lv)?;
            let scale = weights.alpha / b as f64;
            let mut g = Array2::zeros((b, 2 * k));
            for i in 0..b {
                for j in 0..k {
                    let sigma = (0.5 * lv[[i, j]]).exp();
                    g[[i, j]] = dz[[i, j]] + scale * mu[[i, j]];
                    g[[i, k + j]] = dz[[i, j]] * eps[[i, j]] * 0.5 * sigma + scale * 0.5 * (sigma * sigma - 1.0);
                }
            }
            (kl, g)
        }
    };
    let (encoder, _) = model.encoder.backward(&enc_pass, enc_grad_out.view())?;
    let total = weights.alpha * (reconstruction + kl) + weights.beta * alignment;
    Ok((
        LossBreakdown {
            reconstruction,
            kl,
            alignment,
            total,
        },
        ModelGradients { encoder, decoder },
    ))
}

/// Relu sign pattern of the encoder and decoder passes that
/// [`unified_loss`] would run on this batch.
pub fn relu_pattern(model: &ExpansionModel, x: ArrayView2<'_, f64>, eps: Option<ArrayView2<'_, f64>>) -> Result<Vec<bool>> {
    let k = model.latent_dim;
    let enc_pass = model.encoder.forward(x)?;
    let out = enc_pass.output();
    let z = match (model.variant, eps) {
        (Variant::Ae, _) => out.clone(),
        (Variant::Vae, Some(eps)) => reparameterize(out.slice(s![.., ..k]), out.slice(s![.., k..]), eps)?,
        (Variant::Vae, None) => return Err(Error::Invalid("VAE pattern needs a noise draw".into())),
    };
    let dec_pass = model.decoder.forward(z.view())?;
    let mut pattern = Network::relu_pattern(&enc_pass, &model.encoder);
    pattern.extend(Network::relu_pattern(&dec_pass, &model.decoder));
    Ok(pattern)
}

/// Objective terms over a whole dataset without sampling: the VAE code is
/// taken at `μ` (zero noise), so the KL term is still included.
pub fn evaluate_expansion(
    model: &ExpansionModel,
    ds: &LabeledDataset,
    ctx: &AlignmentContext,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let labels = ds.seen_positions()?;
    let zeros = Array2::zeros((ds.len(), model.latent_dim));
    let eps = match model.variant {
        Variant::Ae => None,
        Variant::Vae => Some(zeros.view()),
    };
    Ok(unified_loss(ds.features().view(), &labels, model, ctx, weights, eps)?.0)
}

/// Training hyperparameters for the expansion network.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionConfig {
    pub variant: Variant,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub weights: LossWeights,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Vae,
            latent_dim: 6,
            hidden: vec![256],
            activation: Activation::Relu,
            weights: LossWeights::default(),
            epochs: 200,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 7,
        }
    }
}

/// Default expanded dimension: `round(rate · n)`, at least 1, and capped so
/// that `n + k ≤ d − 1`.
pub fn default_latent_dim(n: usize, d: usize, rate: f64) -> Result<usize> {
    if d < n + 2 {
        return Err(Error::Invalid(format!(
            "visual dimension {d} leaves no room to expand {n} predefined dimensions"
        )));
    }
    let k = ((rate * n as f64).round() as usize).max(1);
    Ok(k.min(d - 1 - n))
}

/// Batch-averaged losses of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub alignment: f64,
    pub total: f64,
}

/// Per-epoch loss curves.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    pub epochs: Vec<EpochLosses>,
}

impl LossTrace {
    pub const HEADER: &'static str = "epoch,reconstruction,kl,alignment,total";

    pub fn first(&self) -> Option<&EpochLosses> {
        self.epochs.first()
    }

    pub fn last(&self) -> Option<&EpochLosses> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch,
                format_f64(e.reconstruction),
                format_f64(e.kl),
                format_f64(e.alignment),
                format_f64(e.total)
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(Error::Invalid("loss trace: bad header".into()));
        }
        let mut epochs = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            let bad = || Error::Invalid(format!("loss trace: bad row `{line}`"));
            if cells.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| cells[i].parse::<f64>().map_err(|_| bad());
            epochs.push(EpochLosses {
                epoch: cells[0].parse().map_err(|_| bad())?,
                reconstruction: num(1)?,
                kl: num(2)?,
                alignment: num(3)?,
                total: num(4)?,
            });
        }
        Ok(Self { epochs })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_csv())
    }
}

/// Trains the expansion network on the seen-class examples of `ds`.
///
/// One `ChaCha8Rng` seeded with `config.seed` drives, in order: encoder
/// initialization, decoder initialization, then per epoch a shuffle of the
/// example order and (VAE only) one `B × k` standard normal draw per batch.
/// The trace records batch-size-weighted epoch means.
pub fn train_expansion(
    ds: &LabeledDataset,
    ctx: &AlignmentContext,
    config: &ExpansionConfig,
) -> Result<(ExpansionModel, LossTrace)> {
    config.weights.validate()?;
    if config.batch_size == 0 {
        return Err(Error::Invalid("batch size must be >= 1".into()));
    }
    if config.latent_dim != ctx.latent_dim() {
        return Err(Error::shape("expansion latent vs alignment context", ctx.latent_dim(), config.latent_dim));
    }
    let labels = ds.seen_positions()?;
    if ctx.classes() != ds.classes().seen().len() {
        return Err(Error::shape("alignment classes", ds.classes().seen().len(), ctx.classes()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = ExpansionModel::init(
        config.variant,
        ds.dim(),
        &config.hidden,
        config.latent_dim,
        config.activation,
        &mut rng,
    )?;
    let mut enc_opt = Adam::new(config.adam, &model.encoder);
    let mut dec_opt = Adam::new(config.adam, &model.decoder);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut trace = LossTrace::default();
    let k = config.latent_dim;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = ds.features().select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let eps = match config.variant {
                Variant::Ae => None,
                Variant::Vae => Some(Array2::from_shape_fn((chunk.len(), k), |_| {
                    StandardNormal.sample(&mut rng)
                })),
            };
            let (loss, grads) = unified_loss(x.view(), &y, &model, ctx, config.weights, eps.as_ref().map(|e| e.view()))?;
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "expansion loss at epoch {epoch}, batch {batch_index}: reconstruction {}, kl {}, alignment {}",
                    loss.reconstruction, loss.kl, loss.alignment
                )));
            }
            enc_opt.step(&mut model.encoder, &grads.encoder)?;
            dec_opt.step(&mut model.decoder, &grads.decoder)?;
            let w = chunk.len() as f64;
            sums.reconstruction += w * loss.reconstruction;
            sums.kl += w * loss.kl;
            sums.alignment += w * loss.alignment;
            sums.total += w * loss.total;
        }
        let l = ds.len() as f64;
        trace.epochs.push(EpochLosses {
            epoch,
            reconstruction: sums.reconstruction / l,
            kl: sums.kl / l,
            alignment: sums.alignment / l,
            total: sums.total / l,
        });
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_centers, generate_synthetic, l2_normalize_rows, SyntheticSpec};
    use crate::mds::embed_centers;
    use crate::nn::{gradient_check, GradCheckOptions, Layer, LayerSpec};
    use ndarray::{array, Array1};
    use rand::Rng;

    fn manifold_from(coords: Array2<f64>) -> EmbeddedManifold {
        EmbeddedManifold {
            eigenvalues: Array1::zeros(coords.ncols()),
            effective_rank: coords.nrows(),
            coords,
        }
    }

    /// One class with predefined (1, 0) and target o = (1, 0, 1, 0).
    fn unit_ctx() -> AlignmentContext {
        AlignmentContext::new(array![[1.0, 0.0]], &manifold_from(array![[1.0], [0.0], [1.0], [0.0]])).unwrap()
    }

    #[test]
    fn alignment_floor_bounds_every_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let centers = Array2::from_shape_fn((7, 9), |_| rng.random_range(-1.0f64..1.0));
        let manifold = crate::mds::embed_centers(centers.view(), 5).unwrap();
        let pre = Array2::from_shape_fn((7, 2), |_| rng.random_range(-1.0f64..1.0));
        let ctx = AlignmentContext::new(pre, &manifold).unwrap();
        for class in 0..7 {
            let floor = ctx.best_alignment_loss(class);
            for _ in 0..2000 {
                let scale = rng.random_range(0.0f64..50.0);
                let z = Array2::from_shape_fn((1, 3), |_| scale * rng.random_range(-1.0f64..1.0));
                assert!(alignment_loss(z.view(), &[class], &ctx).unwrap() >= floor - 1e-12);
            }
            // the optimum direction scaled far out approaches the floor
            let n = 2;
            let o = ctx.targets().column(class);
            let p = ctx.predefined.row(class);
            let a = p.dot(&o.slice(s![..n]));
            let tail = o.slice(s![n..]).to_owned();
            let t = if a > 0.0 { p.dot(&p) * tail.dot(&tail).sqrt() / a } else { 1e9 };
            let unit = &tail / tail.dot(&tail).sqrt();
            let z = (unit * t).insert_axis(Axis(0));
            let best = alignment_loss(z.view(), &[class], &ctx).unwrap();
            assert!((best - floor).abs() < 1e-6, "class {class}: {best} vs {floor}");
        }
    }

    #[test]
    fn reconstruction_cases() {
        let x = array![[1.0, 0.0]];
        assert_eq!(reconstruction_loss(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(x.view(), array![[0.0, 0.0]].view()).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0f64..1.0));
        let b = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0f64..1.0));
        let mut brute = 0.0;
        for i in 0..5 {
            for j in 0..3 {
                brute += (a[[i, j]] - b[[i, j]]).powi(2);
            }
        }
        assert!((reconstruction_loss(a.view(), b.view()).unwrap() - brute / 5.0).abs() <= 1e-12);
        assert!(reconstruction_loss(a.view(), x.view()).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let z = array![[0.0, 0.0]];
        assert_eq!(kl_to_standard_normal(z.view(), z.view()).unwrap(), 0.0);
        let v = kl_to_standard_normal(array![[1.0]].view(), array![[0.0]].view()).unwrap();
        assert!((v - 0.5).abs() <= 1e-12);
        assert!(kl_to_standard_normal(array![[f64::NAN]].view(), array![[0.0]].view()).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let mu = array![[0.5, -1.0]];
        let zero = Array2::zeros((1, 2));
        assert_eq!(reparameterize(mu.view(), zero.view(), zero.view()).unwrap(), mu);
        let one = Array2::from_elem((1, 2), 1.0);
        assert_eq!(reparameterize(mu.view(), zero.view(), one.view()).unwrap(), array![[1.5, 0.0]]);
    }

    #[test]
    fn reparameterize_moments_monte_carlo() {
        let n = 100_000;
        let mu = Array2::from_elem((n, 1), 0.7);
        let lv = Array2::from_elem((n, 1), 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let eps = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut rng));
        let z = reparameterize(mu.view(), lv.view(), eps.view()).unwrap();
        let var = lv[[0, 0]].exp();
        let mean = z.sum() / n as f64;
        let sample_var = z.mapv(|v| (v - mean).powi(2)).sum() / (n - 1) as f64;
        let se_mean = (var / n as f64).sqrt();
        // standard error of the sample variance for a normal: var·sqrt(2/(n−1))
        let se_var = var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - 0.7).abs() <= 3.0 * se_mean, "mean {mean}");
        assert!((sample_var - var).abs() <= 3.0 * se_var, "var {sample_var} vs {var}");
    }

    #[test]
    fn alignment_parallel_antiparallel_orthogonal() {
        let ctx = unit_ctx();
        // s = (1,0,z); o = (1,0,1,0)
        let parallel = array![[1.0, 0.0]];
        assert!(alignment_loss(parallel.view(), &[0], &ctx).unwrap().abs() <= 1e-15);
        let ctx_anti = AlignmentContext::new(array![[1.0, 0.0]], &manifold_from(array![[-1.0], [0.0], [-1.0], [0.0]])).unwrap();
        assert!((alignment_loss(parallel.view(), &[0], &ctx_anti).unwrap() - 2.0).abs() <= 1e-15);
        let orth = array![[-1.0, 0.0]];
        assert!((alignment_loss(orth.view(), &[0], &ctx).unwrap() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn alignment_zero_norm_errors() {
        let ctx = AlignmentContext::new(array![[0.0]], &manifold_from(array![[1.0], [1.0]])).unwrap();
        assert!(matches!(alignment_loss(array![[0.0]].view(), &[0], &ctx), Err(Error::ZeroNorm(_))));
        assert!(AlignmentContext::new(array![[1.0]], &manifold_from(array![[0.0], [0.0]])).is_err());
    }

    #[test]
    fn alignment_invariant_to_target_rescaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let o = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let mut scaled = o.clone();
        scaled.column_mut(1).mapv_inplace(|v| v * 17.0);
        let z = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let labels = [0, 1, 2, 1];
        let a = alignment_loss(z.view(), &labels, &AlignmentContext::new(p.clone(), &manifold_from(o)).unwrap()).unwrap();
        let b = alignment_loss(z.view(), &labels, &AlignmentContext::new(p, &manifold_from(scaled)).unwrap()).unwrap();
        assert!((a - b).abs() <= 1e-14);
        assert!((0.0..=2.0).contains(&a));
    }

    fn small_problem(variant: Variant, seed: u64) -> (Array2<f64>, Vec<usize>, ExpansionModel, AlignmentContext, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 6;
        let k = 3;
        let n = 2;
        let m = 3;
        let model = ExpansionModel::init(variant, d, &[8, 5], k, Activation::Tanh, &mut rng).unwrap();
        let x = Array2::from_shape_fn((5, d), |_| rng.random_range(-1.0..1.0));
        let labels = vec![0, 1, 2, 0, 1];
        let p = Array2::from_shape_fn((m, n), |_| rng.random_range(-1.0..1.0));
        let o = Array2::from_shape_fn((n + k, m), |_| rng.random_range(-1.0..1.0));
        let ctx = AlignmentContext::new(p, &manifold_from(o)).unwrap();
        let eps = Array2::from_shape_fn((5, k), |_| StandardNormal.sample(&mut rng));
        (x, labels, model, ctx, eps)
    }

    #[test]
    fn unified_gradients_match_finite_differences() {
        for variant in [Variant::Ae, Variant::Vae] {
            let (x, labels, model, ctx, eps) = small_problem(variant, 42);
            let weights = LossWeights { alpha: 0.9, beta: 7.7 };
            let (_, grads) = unified_loss(x.view(), &labels, &model, &ctx, weights, Some(eps.view())).unwrap();
            let mut probe = model.clone();
            let report = gradient_check(
                |p| {
                    set_model_flat_params(&mut probe, p).unwrap();
                    unified_loss(x.view(), &labels, &probe, &ctx, weights, Some(eps.view())).unwrap().0.total
                },
                &model_flat_params(&model),
                &grads.to_flat(),
                GradCheckOptions::default(),
            );
            assert!(report.passed(), "{variant:?}: {report:?}");
        }
    }

    #[test]
    fn term_isolation() {
        let (x, labels, model, ctx, eps) = small_problem(Variant::Ae, 5);
        let (l, _) = unified_loss(x.view(), &labels, &model, &ctx, LossWeights { alpha: 2.5, beta: 0.0 }, None).unwrap();
        assert_eq!(l.total, 2.5 * l.reconstruction);
        let (l, _) = unified_loss(x.view(), &labels, &model, &ctx, LossWeights { alpha: 0.0, beta: 3.0 }, None).unwrap();
        assert_eq!(l.total, 3.0 * l.alignment);
        let (l, _) = unified_loss(x.view(), &labels, &model, &ctx, LossWeights { alpha: 0.0, beta: 3.0 }, Some(eps.view())).unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn loss_linear_in_weights() {
        let (x, labels, model, ctx, eps) = small_problem(Variant::Vae, 8);
        let w = LossWeights { alpha: 1.5, beta: 4.0 };
        let w3 = LossWeights { alpha: 4.5, beta: 12.0 };
        let (a, ga) = unified_loss(x.view(), &labels, &model, &ctx, w, Some(eps.view())).unwrap();
        let (b, gb) = unified_loss(x.view(), &labels, &model, &ctx, w3, Some(eps.view())).unwrap();
        assert!((b.total - 3.0 * a.total).abs() <= 1e-12 * b.total.abs());
        for (u, v) in ga.to_flat().iter().zip(gb.to_flat()) {
            assert!((v - 3.0 * u).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn identity_encoder_returns_input() {
        let identity = |d: usize| {
            Network::from_layers(vec![Layer {
                spec: LayerSpec::new(d, d, Activation::Linear),
                weight: Array2::eye(d),
                bias: Array1::zeros(d),
            }])
            .unwrap()
        };
        let model = ExpansionModel::new(Variant::Ae, identity(3), identity(3)).unwrap();
        let x = array![[1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]];
        assert_eq!(encode_examples(&model, x.view()).unwrap(), x);
    }

    #[test]
    fn encode_batch_matches_rows() {
        let (x, _, model, _, _) = small_problem(Variant::Vae, 13);
        let all = encode_examples(&model, x.view()).unwrap();
        for i in 0..x.nrows() {
            let one = encode_examples(&model, x.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(one.row(0), all.row(i));
        }
        // the VAE code is μ, so it is just the first k encoder outputs
        let raw = model.encoder().predict(x.view()).unwrap();
        assert_eq!(all, raw.slice(s![.., ..3]).to_owned());
    }

    fn tiny_training_setup() -> (LabeledDataset, AlignmentContext, ExpansionConfig) {
        let bench = generate_synthetic(&SyntheticSpec {
            seed: 7,
            m_seen: 6,
            v_unseen: 2,
            d: 12,
            n: 3,
            cluster_spread: 0.5,
            examples_per_class: 6,
        })
        .unwrap();
        let train = bench.train.with_features(l2_normalize_rows(bench.train.features())).unwrap();
        let k = 2;
        let manifold = embed_centers(class_centers(&train).unwrap().view(), 3 + k).unwrap();
        let seen = bench.prototypes.classes().seen();
        let ctx = AlignmentContext::new(bench.prototypes.predefined().select(Axis(0), &seen), &manifold).unwrap();
        let config = ExpansionConfig {
            latent_dim: k,
            hidden: vec![16],
            epochs: 5,
            batch_size: 8,
            ..Default::default()
        };
        (train, ctx, config)
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let (train, ctx, mut config) = tiny_training_setup();
        config.epochs = 0;
        let (model, trace) = train_expansion(&train, &ctx, &config).unwrap();
        assert!(trace.epochs.is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let fresh = ExpansionModel::init(config.variant, train.dim(), &config.hidden, config.latent_dim, config.activation, &mut rng).unwrap();
        assert_eq!(model, fresh);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, ctx, config) = tiny_training_setup();
        let (a, ta) = train_expansion(&train, &ctx, &config).unwrap();
        let (b, tb) = train_expansion(&train, &ctx, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_eq!(ta.epochs.len(), 5);
    }

    #[test]
    fn trace_and_checkpoint_round_trip() {
        let (train, ctx, config) = tiny_training_setup();
        let (model, trace) = train_expansion(&train, &ctx, &config).unwrap();
        assert_eq!(LossTrace::from_csv(&trace.to_csv()).unwrap(), trace);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        assert_eq!(ExpansionModel::load(&path).unwrap(), model);
    }

    #[test]
    fn default_latent_rule() {
        assert_eq!(default_latent_dim(10, 64, 0.6).unwrap(), 6);
        assert_eq!(default_latent_dim(85, 90, 0.6).unwrap(), 4);
        assert_eq!(default_latent_dim(1, 64, 0.1).unwrap(), 1);
        assert!(default_latent_dim(10, 11, 0.6).is_err());
    }
}
