//! Convolutional variational autoencoder and its negative ELBO.
//!
//! Encoder: four stride-2 convolutions (kernel 4, padding 1) taking a 40x40
//! image to 2x2, batch norm + ELU after the first three, then two linear
//! heads for the posterior mean and log-variance. Decoder: a linear layer
//! back to the encoder's last feature map followed by four transposed
//! convolutions mirroring the encoder spatially, batch norm + ELU after the
//! first three, and a sigmoid producing Bernoulli means.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::kernels::ConvGeom;
use crate::tensor::{expect_dim, expect_rank, Scalar, Tensor};

/// Lower bound on log-probabilities in the Bernoulli likelihood, so that a
/// zero-probability pixel costs a large but finite amount.
pub const LOG_FLOOR: f64 = -100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeConfig {
    pub latent_size: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub input_hw: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// `(mean, std)` applied to the encoder input only.
    pub input_norm: Option<(f64, f64)>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            latent_size: 8,
            encoder_channels: [32, 32, 64, 16],
            decoder_channels: [32, 16, 16, 1],
            input_hw: 40,
            kernel: 4,
            stride: 2,
            padding: 1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            input_norm: None,
        }
    }
}

impl VaeConfig {
    pub fn with_latent(latent_size: usize) -> Self {
        Self { latent_size, ..Self::default() }
    }

    /// Spatial extent after each encoder layer, starting with the input.
    pub fn encoder_extents(&self) -> Result<[usize; 5]> {
        let mut s = [self.input_hw; 5];
        for i in 0..4 {
            s[i + 1] = ConvGeom::out_extent(s[i], self.kernel, self.stride, self.padding)
                .filter(|&e| e >= 1)
                .ok_or_else(|| Error::Config(format!("input size {} too small for four conv layers", self.input_hw)))?;
        }
        Ok(s)
    }

    /// Kernel of decoder layer `i` chosen so it inverts encoder layer `3 - i`.
    fn decoder_kernel(&self, from: usize, to: usize) -> Result<usize> {
        (to + 2 * self.padding)
            .checked_sub((from - 1) * self.stride)
            .filter(|&k| k >= 1)
            .ok_or_else(|| Error::Config(format!("no transposed kernel maps {from} to {to}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0 {
            return Err(Error::Config("latent_size must be at least 1".into()));
        }
        if self.decoder_channels[3] != 1 {
            return Err(Error::Config("decoder must end with one channel".into()));
        }
        self.encoder_extents().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    weight: usize,
    bias: usize,
    bn: Option<usize>,
    transposed: bool,
}

#[derive(Debug, Clone)]
pub struct BatchNormState<T> {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Encoder and decoder parameters plus batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct VaeModel<T> {
    pub config: VaeConfig,
    pub mode: Mode,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    encoder: Vec<ConvLayer>,
    mu_head: (usize, usize),
    logvar_head: (usize, usize),
    decoder_in: (usize, usize),
    decoder: Vec<ConvLayer>,
    batch_norms: Vec<BatchNormState<T>>,
}

impl<T: Scalar> VaeModel<T> {
    /// Fresh model with uniform `+-1/sqrt(fan_in)` initialization.
    pub fn new<R: Rng + ?Sized>(config: VaeConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { names: Vec::new(), params: Vec::new(), batch_norms: Vec::new(), rng };
        let extents = config.encoder_extents()?;
        let k = config.kernel;

        let mut encoder = Vec::new();
        let mut cin = 1;
        for (i, &cout) in config.encoder_channels.iter().enumerate() {
            let fan_in = cin * k * k;
            let weight = b.uniform(format!("encoder.{i}.weight"), &[cout, cin, k, k], fan_in);
            let bias = b.uniform(format!("encoder.{i}.bias"), &[cout], fan_in);
            let bn = (i < 3).then(|| b.batch_norm(format!("encoder.{i}.bn"), cout));
            encoder.push(ConvLayer { weight, bias, bn, transposed: false });
            cin = cout;
        }
        let flat = config.encoder_channels[3] * extents[4] * extents[4];
        let lat = config.latent_size;
        let mu_head = (b.uniform("mu.weight".into(), &[lat, flat], flat), b.uniform("mu.bias".into(), &[lat], flat));
        let logvar_head = (
            b.uniform("logvar.weight".into(), &[lat, flat], flat),
            b.uniform("logvar.bias".into(), &[lat], flat),
        );
        let decoder_in = (
            b.uniform("decoder.in.weight".into(), &[flat, lat], lat),
            b.uniform("decoder.in.bias".into(), &[flat], lat),
        );
        let mut decoder = Vec::new();
        let mut cin = config.encoder_channels[3];
        for (i, &cout) in config.decoder_channels.iter().enumerate() {
            let kd = config.decoder_kernel(extents[4 - i], extents[3 - i])?;
            let fan_in = cin * kd * kd;
            let weight = b.uniform(format!("decoder.{i}.weight"), &[cin, cout, kd, kd], fan_in);
            let bias = b.uniform(format!("decoder.{i}.bias"), &[cout], fan_in);
            let bn = (i < 3).then(|| b.batch_norm(format!("decoder.{i}.bn"), cout));
            decoder.push(ConvLayer { weight, bias, bn, transposed: true });
            cin = cout;
        }
        let Builder { names, params, batch_norms, .. } = b;
        Ok(Self {
            config,
            mode: Mode::Train,
            names,
            params,
            encoder,
            mu_head,
            logvar_head,
            decoder_in,
            decoder,
            batch_norms,
        })
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params.iter_mut().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn batch_norms(&self) -> &[BatchNormState<T>] {
        &self.batch_norms
    }

    /// Replaces parameter values and running statistics, e.g. from a
    /// checkpoint. Shapes must match the current architecture.
    pub fn load_state(&mut self, params: Vec<Tensor<T>>, running: Vec<(Vec<T>, Vec<T>)>) -> Result<()> {
        expect_dim("load_state", "parameter count", self.params.len(), params.len())?;
        expect_dim("load_state", "batch norm count", self.batch_norms.len(), running.len())?;
        for (cur, new) in self.params.iter().zip(&params) {
            if cur.shape() != new.shape() {
                return Err(Error::Rank { op: "load_state", expected: cur.rank(), got: new.shape().to_vec() });
            }
        }
        for (bn, (m, v)) in self.batch_norms.iter().zip(&running) {
            expect_dim("load_state", "running mean", bn.running_mean.len(), m.len())?;
            expect_dim("load_state", "running var", bn.running_var.len(), v.len())?;
        }
        self.params = params;
        for (bn, (m, v)) in self.batch_norms.iter_mut().zip(running) {
            bn.running_mean = m;
            bn.running_var = v;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, updates: Vec<(usize, BatchStats<T>)>) {
        let m = T::lit(self.config.bn_momentum);
        let keep = T::one() - m;
        for (i, stats) in updates {
            let bn = &mut self.batch_norms[i];
            for (r, &b) in bn.running_mean.iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in bn.running_var.iter_mut().zip(&stats.var_unbiased) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> VaeModel<U> {
        VaeModel {
            config: self.config.clone(),
            mode: self.mode,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            encoder: self.encoder.clone(),
            mu_head: self.mu_head,
            logvar_head: self.logvar_head,
            decoder_in: self.decoder_in,
            decoder: self.decoder.clone(),
            batch_norms: self
                .batch_norms
                .iter()
                .map(|bn| BatchNormState {
                    gamma: bn.gamma,
                    beta: bn.beta,
                    running_mean: bn.running_mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    running_var: bn.running_var.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

struct Builder<'r, T, R: ?Sized> {
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    batch_norms: Vec<BatchNormState<T>>,
    rng: &'r mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    fn batch_norm(&mut self, name: String, c: usize) -> usize {
        let gamma = self.push(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
        let beta = self.push(format!("{name}.beta"), Tensor::zeros(&[c]));
        self.batch_norms.push(BatchNormState {
            gamma,
            beta,
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        });
        self.batch_norms.len() - 1
    }
}

/// One forward pass of a model on a graph: parameter leaves plus the batch
/// statistics collected by training-mode batch norms.
pub struct Pass<'m, T> {
    model: &'m VaeModel<T>,
    mode: Mode,
    params: Vec<Var>,
    batch_stats: Vec<(usize, BatchStats<T>)>,
}

impl<'m, T: Scalar> Pass<'m, T> {
    /// Binds the model's parameters as leaves; `trainable` decides whether
    /// their gradients are tracked.
    pub fn new(g: &mut Graph<T>, model: &'m VaeModel<T>, mode: Mode, trainable: bool) -> Self {
        let params = model.params.iter().map(|p| g.leaf(p, trainable)).collect();
        Self { model, mode, params, batch_stats: Vec::new() }
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn into_batch_stats(self) -> Vec<(usize, BatchStats<T>)> {
        self.batch_stats
    }

    fn layer(&mut self, g: &mut Graph<T>, layer: &ConvLayer, x: Var, last: bool) -> Result<Var> {
        let (w, b) = (self.params[layer.weight], self.params[layer.bias]);
        let cfg = &self.model.config;
        let y = if layer.transposed {
            g.conv_transpose2d(x, w, b, cfg.stride, cfg.padding)?
        } else {
            g.conv2d(x, w, b, cfg.stride, cfg.padding)?
        };
        let Some(bi) = layer.bn else {
            return Ok(if last { y } else { g.elu(y) });
        };
        let bn = &self.model.batch_norms[bi];
        let (gamma, beta) = (self.params[bn.gamma], self.params[bn.beta]);
        let eps = T::lit(cfg.bn_eps);
        let y = match self.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(y, gamma, beta, eps)?;
                self.batch_stats.push((bi, stats));
                y
            }
            Mode::Eval => g.batch_norm_eval(y, gamma, beta, &bn.running_mean, &bn.running_var, eps)?,
        };
        Ok(g.elu(y))
    }

    /// `(n, 1, hw, hw)` images to posterior `(mu, logvar)`, each `(n, latent)`.
    pub fn encode(&mut self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let model = self.model;
        let cfg = &model.config;
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Rank { op: "encode", expected: 4, got: s });
        }
        expect_dim("encode", "channels", 1, s[1])?;
        expect_dim("encode", "height", cfg.input_hw, s[2])?;
        expect_dim("encode", "width", cfg.input_hw, s[3])?;
        let mut h = x;
        if let Some((mean, std)) = cfg.input_norm {
            h = g.add_scalar(h, T::lit(-mean));
            h = g.scale(h, T::lit(1.0 / std));
        }
        for (i, layer) in model.encoder.iter().enumerate() {
            h = self.layer(g, layer, h, i == 3)?;
        }
        let n = s[0];
        let flat = g.value(h).numel() / n;
        let h = g.reshape(h, &[n, flat])?;
        let mu = g.linear(h, self.params[model.mu_head.0], self.params[model.mu_head.1])?;
        let logvar = g.linear(h, self.params[model.logvar_head.0], self.params[model.logvar_head.1])?;
        Ok((mu, logvar))
    }

    /// `(n, latent)` codes to `(n, 1, hw, hw)` Bernoulli means.
    pub fn decode(&mut self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let model = self.model;
        let s = g.shape(z).to_vec();
        if s.len() != 2 {
            return Err(Error::Rank { op: "decode", expected: 2, got: s });
        }
        expect_dim("decode", "latent", model.config.latent_size, s[1])?;
        let h = g.linear(z, self.params[model.decoder_in.0], self.params[model.decoder_in.1])?;
        let e = model.config.encoder_extents()?[4];
        let mut h = g.reshape(h, &[s[0], model.config.encoder_channels[3], e, e])?;
        for (i, layer) in model.decoder.iter().enumerate() {
            h = self.layer(g, layer, h, i == 3)?;
        }
        Ok(g.sigmoid(h))
    }
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize_var<T: Scalar>(g: &mut Graph<T>, mu: Var, logvar: Var, eps: Var) -> Result<Var> {
    let half = g.scale(logvar, T::lit(0.5));
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Per-sample negative ELBO terms on a graph.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    /// `(n)` summed Bernoulli negative log-likelihood.
    pub recon: Var,
    /// `(n)` KL divergence to the standard normal prior.
    pub kl: Var,
    /// `(n)` recon + kl.
    pub total: Var,
}

impl ElboVars {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport::from_terms(g.value(self.recon).data(), g.value(self.kl).data())
    }

    pub fn per_sample<T: Scalar>(&self, g: &Graph<T>) -> Vec<LossReport> {
        g.value(self.recon)
            .data()
            .iter()
            .zip(g.value(self.kl).data())
            .map(|(&r, &k)| LossReport::new(r.as_f64(), k.as_f64()))
            .collect()
    }

    /// Batch-mean total as a scalar variable.
    pub fn mean_total<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        g.mean(self.total)
    }
}

/// Negative ELBO of `x` under Bernoulli means `p` and posterior
/// `(mu, logvar)`. `x` must not require gradients.
pub fn elbo_vars<T: Scalar>(g: &mut Graph<T>, x: &Tensor<T>, p: Var, mu: Var, logvar: Var) -> Result<ElboVars> {
    if g.shape(p) != x.shape() {
        return Err(Error::Rank { op: "elbo", expected: x.rank(), got: g.shape(p).to_vec() });
    }
    let floor = T::lit(LOG_FLOOR);
    let one_minus_x = Tensor::new(x.shape(), x.data().iter().map(|&v| T::one() - v).collect())?;
    let xv = g.constant(x.clone());
    let xc = g.constant(one_minus_x);
    let log_p = g.ln_clamped(p, floor);
    let q = g.scale(p, -T::one());
    let q = g.add_scalar(q, T::one());
    let log_q = g.ln_clamped(q, floor);
    let a = g.mul(xv, log_p)?;
    let b = g.mul(xc, log_q)?;
    let ll = g.add(a, b)?;
    let ll = g.sum_per_sample(ll)?;
    let recon = g.scale(ll, -T::one());

    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(logvar);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -T::one());
    let t = g.sum_per_sample(t)?;
    let kl = g.scale(t, T::lit(0.5));
    let total = g.add(recon, kl)?;
    Ok(ElboVars { recon, kl, total })
}

/// Decomposed negative ELBO: `recon` summed over pixels, both terms averaged
/// over the batch, `total = recon + kl`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(recon: f64, kl: f64) -> Self {
        Self { recon, kl, total: recon + kl }
    }

    pub fn from_terms<T: Scalar>(recon: &[T], kl: &[T]) -> Self {
        let n = recon.len().max(1) as f64;
        let r = recon.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let k = kl.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        Self::new(r, k)
    }

    pub fn mean(reports: &[LossReport]) -> Self {
        let n = reports.len().max(1) as f64;
        Self::new(
            reports.iter().map(|r| r.recon).sum::<f64>() / n,
            reports.iter().map(|r| r.kl).sum::<f64>() / n,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats<T> {
    pub mu: Tensor<T>,
    pub logvar: Tensor<T>,
}

fn check_unit_range<T: Scalar>(x: &Tensor<T>) -> Result<()> {
    match x.data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        Some(v) => Err(Error::Domain(v.as_f64())),
        None => Ok(()),
    }
}

/// Posterior parameters of a batch, using the model's current mode without
/// touching its running statistics.
pub fn encode<T: Scalar>(model: &VaeModel<T>, x: &Tensor<T>) -> Result<LatentStats<T>> {
    expect_rank(x, "encode", 4)?;
    let mut g = Graph::new();
    let mut pass = Pass::new(&mut g, model, model.mode, false);
    let xv = g.constant(x.clone());
    let (mu, logvar) = pass.encode(&mut g, xv)?;
    Ok(LatentStats { mu: g.value(mu).clone(), logvar: g.value(logvar).clone() })
}

pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(stats: &LatentStats<T>, rng: &mut R) -> Tensor<T> {
    let eps = Tensor::<T>::randn(stats.mu.shape(), rng);
    let data = stats
        .mu
        .data()
        .iter()
        .zip(stats.logvar.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (lv * T::lit(0.5)).exp() * e)
        .collect();
    Tensor::new(stats.mu.shape(), data).unwrap()
}

pub fn decode<T: Scalar>(model: &VaeModel<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = Pass::new(&mut g, model, model.mode, false);
    let zv = g.constant(z.clone());
    let out = pass.decode(&mut g, zv)?;
    Ok(g.value(out).clone())
}

/// Negative ELBO of a reconstruction, batch-averaged.
pub fn elbo_loss<T: Scalar>(x: &Tensor<T>, x_recon: &Tensor<T>, stats: &LatentStats<T>) -> Result<LossReport> {
    check_unit_range(x)?;
    let mut g = Graph::new();
    let p = g.constant(x_recon.clone());
    let mu = g.constant(stats.mu.clone());
    let lv = g.constant(stats.logvar.clone());
    Ok(elbo_vars(&mut g, x, p, mu, lv)?.report(&g))
}

/// Result of [`vae_forward`] on a graph.
pub struct VaeForward<T> {
    pub recon: Var,
    pub mu: Var,
    pub logvar: Var,
    pub elbo: ElboVars,
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
    pub params: Vec<Var>,
}

/// Encode, reparameterize with the given standard-normal `noise`
/// `(n, latent)`, decode and score, all on one graph.
pub fn vae_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &VaeModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    mode: Mode,
    trainable: bool,
) -> Result<VaeForward<T>> {
    check_unit_range(x)?;
    let mut pass = Pass::new(g, model, mode, trainable);
    let xv = g.constant(x.clone());
    let (mu, logvar) = pass.encode(g, xv)?;
    if g.shape(mu) != noise.shape() {
        return Err(Error::Rank { op: "reparameterize", expected: 2, got: noise.shape().to_vec() });
    }
    let eps = g.constant(noise.clone());
    let z = reparameterize_var(g, mu, logvar, eps)?;
    let recon = pass.decode(g, z)?;
    let elbo = elbo_vars(g, x, recon, mu, logvar)?;
    let params = pass.param_vars().to_vec();
    Ok(VaeForward { recon, mu, logvar, elbo, batch_stats: pass.into_batch_stats(), params })
}

/// Value-level forward without gradients; returns the reconstruction and
/// the per-sample losses.
pub fn vae_eval<T: Scalar>(model: &VaeModel<T>, x: &Tensor<T>, noise: &Tensor<T>) -> Result<(Tensor<T>, Vec<LossReport>)> {
    let mut g = Graph::new();
    let f = vae_forward(&mut g, model, x, noise, Mode::Eval, false)?;
    Ok((g.value(f.recon).clone(), f.elbo.per_sample(&g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> VaeModel<f64> {
        VaeModel::new(VaeConfig::with_latent(3), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn architecture_shapes() {
        let m = small_model();
        assert_eq!(m.config.encoder_extents().unwrap(), [40, 20, 10, 5, 2]);
        let shapes: Vec<_> = m.param_names().iter().zip(m.params()).map(|(n, p)| (n.as_str(), p.shape().to_vec())).collect();
        assert!(shapes.contains(&("encoder.0.weight", vec![32, 1, 4, 4])));
        assert!(shapes.contains(&("encoder.3.weight", vec![16, 64, 4, 4])));
        assert!(shapes.contains(&("decoder.0.weight", vec![16, 32, 5, 5])));
        assert!(shapes.contains(&("decoder.3.weight", vec![16, 1, 4, 4])));
        assert!(shapes.contains(&("mu.weight", vec![3, 64])));
        assert_eq!(m.batch_norms().len(), 6);
    }

    #[test]
    fn shape_contracts() {
        let mut m = VaeModel::<f64>::new(VaeConfig::with_latent(8), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        m.set_mode(Mode::Eval);
        let x = Tensor::from_fn(&[3, 1, 40, 40], |i| ((i * 7) % 11) as f64 / 10.0);
        let s = encode(&m, &x).unwrap();
        assert_eq!(s.mu.shape(), &[3, 8]);
        assert_eq!(s.logvar.shape(), &[3, 8]);
        let again = encode(&m, &x).unwrap();
        assert_eq!(s, again);
        let out = decode(&m, &s.mu).unwrap();
        assert_eq!(out.shape(), &[3, 1, 40, 40]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::<f64>::zeros(&[1, 1, 28, 28]);
        assert!(matches!(encode(&m, &bad), Err(Error::ShapeMismatch { dim: "height", .. })));
        assert!(decode(&m, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn reparameterize_zero_noise_limit() {
        let stats = LatentStats {
            mu: Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap(),
            logvar: Tensor::full(&[1, 3], -50.0),
        };
        let z = reparameterize(&stats, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(z.max_abs_diff(&stats.mu) < 1e-9);
        let a = reparameterize(&LatentStats { logvar: Tensor::zeros(&[1, 3]), ..stats.clone() }, &mut ChaCha8Rng::seed_from_u64(9));
        let b = reparameterize(&LatentStats { logvar: Tensor::zeros(&[1, 3]), ..stats }, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn kl_examples() {
        let x = Tensor::<f64>::full(&[1, 1, 40, 40], 0.0);
        let p = Tensor::full(&[1, 1, 40, 40], 0.5);
        let zero = LatentStats { mu: Tensor::zeros(&[1, 4]), logvar: Tensor::zeros(&[1, 4]) };
        assert_eq!(elbo_loss(&x, &p, &zero).unwrap().kl, 0.0);
        let one = LatentStats { mu: Tensor::full(&[1, 1], 1.0), logvar: Tensor::zeros(&[1, 1]) };
        assert!((elbo_loss(&x, &p, &one).unwrap().kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bernoulli_half_is_ln2_per_pixel() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 40, 40], |i| (i % 3 == 0) as u8 as f64);
        let p = Tensor::full(&[2, 1, 40, 40], 0.5);
        let stats = LatentStats { mu: Tensor::zeros(&[2, 2]), logvar: Tensor::zeros(&[2, 2]) };
        let r = elbo_loss(&x, &p, &stats).unwrap();
        assert!((r.recon - 1600.0 * 2f64.ln()).abs() < 1e-9);
        assert!((r.recon - 1109.04).abs() < 0.01);
        assert_eq!(r.total, r.recon + r.kl);
    }

    #[test]
    fn elbo_rejects_out_of_range_targets() {
        let x = Tensor::<f64>::full(&[1, 1, 40, 40], 1.5);
        let stats = LatentStats { mu: Tensor::zeros(&[1, 1]), logvar: Tensor::zeros(&[1, 1]) };
        assert_eq!(elbo_loss(&x, &x, &stats), Err(Error::Domain(1.5)));
    }

    #[test]
    fn forward_is_finite_at_init() {
        let m = small_model();
        let x = Tensor::from_fn(&[4, 1, 40, 40], |i| ((i * 13) % 17) as f64 / 16.0);
        let noise = Tensor::randn(&[4, 3], &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let f = vae_forward(&mut g, &m, &x, &noise, Mode::Train, true).unwrap();
        let r = f.elbo.report(&g);
        assert!(r.total.is_finite() && r.kl >= 0.0);
        assert_eq!(f.batch_stats.len(), 6);
    }
}
