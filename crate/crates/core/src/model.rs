//! SAVAE and NVDM parameterization: bag-of-words MLP encoder, next-word
//! softmax decoder with an optional local-context channel, the ELBO and its
//! single-sample reparameterized gradient.
//!
//! In SAVAE mode the decoder predicts word `w^t` from `concat(z, h_t)` where
//! `h_t = sigmoid(c + sum of local embeddings of the previous k words)`. In
//! NVDM mode the local channel is absent and the decoder sees `z` alone.

use std::fmt;
use std::ops::{Deref, DerefMut};

use thiserror::Error;

use crate::corpus::Document;
use crate::numerics::{axpy, dot, relu, sigmoid, softmax_into, AnchoredSum, GaussianPosterior, Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("empty document: at least one in-vocabulary token is required")]
    EmptyDocument,
    #[error("all documents are empty")]
    AllDocumentsEmpty,
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("invalid model config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    Savae,
    Nvdm,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::Savae => "savae",
            ModelMode::Nvdm => "nvdm",
        })
    }
}

impl std::str::FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "savae" => Ok(ModelMode::Savae),
            "nvdm" => Ok(ModelMode::Nvdm),
            other => Err(format!("unknown model mode '{other}' (expected savae or nvdm)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Vocabulary size `m`.
    pub vocab_size: usize,
    /// Latent and local-embedding dimension `d`.
    pub latent_dim: usize,
    /// Local context window `k` (SAVAE only).
    pub window: usize,
    pub encoder_layers: Vec<usize>,
    pub train_samples: usize,
    pub eval_samples: usize,
}

impl ModelConfig {
    pub fn savae(vocab_size: usize, latent_dim: usize, window: usize) -> Self {
        Self {
            mode: ModelMode::Savae,
            vocab_size,
            latent_dim,
            window,
            encoder_layers: vec![500, 500],
            train_samples: 1,
            eval_samples: 20,
        }
    }

    pub fn nvdm(vocab_size: usize, latent_dim: usize) -> Self {
        Self {
            mode: ModelMode::Nvdm,
            window: 0,
            ..Self::savae(vocab_size, latent_dim, 0)
        }
    }

    pub fn with_encoder_layers(mut self, layers: Vec<usize>) -> Self {
        self.encoder_layers = layers;
        self
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.vocab_size == 0 {
            v.push("model.vocab_size must be >= 1".to_string());
        }
        if self.latent_dim == 0 {
            v.push("model.d must be >= 1".to_string());
        }
        if self.mode == ModelMode::Savae && self.window == 0 {
            v.push("model.k must be >= 1 in savae mode".to_string());
        }
        if self.encoder_layers.is_empty() {
            v.push("model.encoder_layers must be non-empty".to_string());
        }
        if self.encoder_layers.iter().any(|&w| w == 0) {
            v.push("model.encoder_layers widths must be >= 1".to_string());
        }
        if self.train_samples == 0 {
            v.push("model.train_samples must be >= 1".to_string());
        }
        if self.eval_samples == 0 {
            v.push("model.eval_samples must be >= 1".to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError::InvalidConfig(v))
        }
    }

    /// Width of the decoder input: `2d` with the local channel, `d` without.
    pub fn decoder_dim(&self) -> usize {
        match self.mode {
            ModelMode::Savae => 2 * self.latent_dim,
            ModelMode::Nvdm => self.latent_dim,
        }
    }
}

/// Affine layer stored input-major: `weight` is `in x out`, so row `i` holds
/// the outgoing weights of input unit `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// `bias + x W`, skipping zero inputs.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                axpy(xi, self.weight.row(i), &mut out);
            }
        }
        out
    }
}

/// Named flat views over every trainable array.
pub trait ParamSet {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Decoder output embeddings `x_v`, `m x 2d` (SAVAE) or `m x d` (NVDM).
    pub decoder_emb: Matrix,
    pub decoder_bias: Vec<f64>,
    /// Local embeddings `h_w`, `m x d` (SAVAE only).
    pub local_emb: Option<Matrix>,
    /// Local bias `c`, length `d` (SAVAE only).
    pub local_bias: Option<Vec<f64>>,
    /// Hidden layers; the first maps `m` count inputs.
    pub encoder: Vec<Dense>,
    pub mu_head: Dense,
    pub logvar_head: Dense,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let m = config.vocab_size;
        let d = config.latent_dim;
        let savae = config.mode == ModelMode::Savae;
        let mut encoder = Vec::with_capacity(config.encoder_layers.len());
        let mut input = m;
        for &width in &config.encoder_layers {
            encoder.push(Dense::zeros(input, width));
            input = width;
        }
        Self {
            decoder_emb: Matrix::zeros(m, config.decoder_dim()),
            decoder_bias: vec![0.0; m],
            local_emb: savae.then(|| Matrix::zeros(m, d)),
            local_bias: savae.then(|| vec![0.0; d]),
            encoder,
            mu_head: Dense::zeros(input, d),
            logvar_head: Dense::zeros(input, d),
        }
    }

    /// Xavier-uniform weights, zero biases. Matrices are filled in the order
    /// decoder, local, encoder layers, mu head, log-variance head.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(config);
        let mut xavier = |w: &mut Matrix| {
            let s = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for x in w.as_mut_slice() {
                *x = rng.uniform_range(-s, s);
            }
        };
        xavier(&mut p.decoder_emb);
        if let Some(local) = p.local_emb.as_mut() {
            xavier(local);
        }
        for layer in &mut p.encoder {
            xavier(&mut layer.weight);
        }
        xavier(&mut p.mu_head.weight);
        xavier(&mut p.logvar_head.weight);
        p
    }

    pub fn mode(&self) -> ModelMode {
        if self.local_emb.is_some() {
            ModelMode::Savae
        } else {
            ModelMode::Nvdm
        }
    }

    /// `(name, shape)` of every array in serialization order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("decoder.embedding".to_string(), mat_shape(&self.decoder_emb)),
            ("decoder.bias".to_string(), vec![self.decoder_bias.len()]),
        ];
        if let (Some(e), Some(b)) = (&self.local_emb, &self.local_bias) {
            out.push(("local.embedding".to_string(), mat_shape(e)));
            out.push(("local.bias".to_string(), vec![b.len()]));
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), mat_shape(&layer.weight)));
            out.push((format!("encoder.{i}.bias"), vec![layer.bias.len()]));
        }
        out.push(("mu_head.weight".to_string(), mat_shape(&self.mu_head.weight)));
        out.push(("mu_head.bias".to_string(), vec![self.mu_head.bias.len()]));
        out.push(("logvar_head.weight".to_string(), mat_shape(&self.logvar_head.weight)));
        out.push(("logvar_head.bias".to_string(), vec![self.logvar_head.bias.len()]));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, array by array.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) {
        for ((_, dst), (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, src, dst);
        }
    }

    pub fn fill(&mut self, v: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }
}

fn mat_shape(m: &Matrix) -> Vec<usize> {
    vec![m.rows(), m.cols()]
}

impl ParamSet for ModelParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("decoder.embedding".into(), self.decoder_emb.as_slice()),
            ("decoder.bias".into(), &self.decoder_bias),
        ];
        if let (Some(e), Some(b)) = (&self.local_emb, &self.local_bias) {
            out.push(("local.embedding".into(), e.as_slice()));
            out.push(("local.bias".into(), b));
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            out.push((format!("encoder.{i}.weight"), layer.weight.as_slice()));
            out.push((format!("encoder.{i}.bias"), &layer.bias));
        }
        out.push(("mu_head.weight".into(), self.mu_head.weight.as_slice()));
        out.push(("mu_head.bias".into(), &self.mu_head.bias));
        out.push(("logvar_head.weight".into(), self.logvar_head.weight.as_slice()));
        out.push(("logvar_head.bias".into(), &self.logvar_head.bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("decoder.embedding".into(), self.decoder_emb.as_mut_slice()),
            ("decoder.bias".into(), &mut self.decoder_bias),
        ];
        if let (Some(e), Some(b)) = (&mut self.local_emb, &mut self.local_bias) {
            out.push(("local.embedding".into(), e.as_mut_slice()));
            out.push(("local.bias".into(), b));
        }
        for (i, layer) in self.encoder.iter_mut().enumerate() {
            out.push((format!("encoder.{i}.weight"), layer.weight.as_mut_slice()));
            out.push((format!("encoder.{i}.bias"), &mut layer.bias));
        }
        out.push(("mu_head.weight".into(), self.mu_head.weight.as_mut_slice()));
        out.push(("mu_head.bias".into(), &mut self.mu_head.bias));
        out.push(("logvar_head.weight".into(), self.logvar_head.weight.as_mut_slice()));
        out.push(("logvar_head.bias".into(), &mut self.logvar_head.bias));
        out
    }
}

/// Gradient buffers shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(ModelParams);

impl ParamGrads {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self(ModelParams::zeros(config))
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        let mut g = params.clone();
        g.fill(0.0);
        Self(g)
    }

    pub fn into_inner(self) -> ModelParams {
        self.0
    }
}

impl Deref for ParamGrads {
    type Target = ModelParams;

    fn deref(&self) -> &ModelParams {
        &self.0
    }
}

impl DerefMut for ParamGrads {
    fn deref_mut(&mut self) -> &mut ModelParams {
        &mut self.0
    }
}

impl ParamSet for ParamGrads {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0.tensors_mut()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEstimate {
    /// Monte-Carlo estimate of the expected log-likelihood.
    pub reconstruction: f64,
    pub kl: f64,
    /// `reconstruction - kl`
    pub total: f64,
    pub samples: usize,
}

impl ElboEstimate {
    fn new(reconstruction: f64, kl: f64, samples: usize) -> Self {
        Self {
            reconstruction,
            kl,
            total: reconstruction - kl,
            samples,
        }
    }
}

/// Sorted `(id, count)` pairs; the encoder's order-free view of a document.
pub fn bag_of_words(ids: &[u32]) -> Vec<(u32, f64)> {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut bag: Vec<(u32, f64)> = Vec::new();
    for id in sorted {
        match bag.last_mut() {
            Some((last, c)) if *last == id => *c += 1.0,
            _ => bag.push((id, 1.0)),
        }
    }
    bag
}

fn check_document(doc: &Document, config: &ModelConfig) -> Result<()> {
    if doc.ids.is_empty() {
        return Err(ModelError::EmptyDocument);
    }
    if let Some(&id) = doc.ids.iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Intermediate values of an encoder pass, kept for backpropagation.
struct EncoderTrace {
    bag: Vec<(u32, f64)>,
    /// Post-ReLU activations of each hidden layer.
    hidden: Vec<Vec<f64>>,
    posterior: GaussianPosterior,
}

fn encoder_forward(ids: &[u32], params: &ModelParams) -> EncoderTrace {
    let bag = bag_of_words(ids);
    let mut hidden = Vec::with_capacity(params.encoder.len());
    let first = &params.encoder[0];
    let mut act = first.bias.clone();
    for &(w, c) in &bag {
        axpy(c, first.weight.row(w as usize), &mut act);
    }
    act.iter_mut().for_each(|x| *x = relu(*x));
    hidden.push(act);
    for layer in &params.encoder[1..] {
        let mut next = layer.forward(hidden.last().unwrap());
        next.iter_mut().for_each(|x| *x = relu(*x));
        hidden.push(next);
    }
    let top = hidden.last().unwrap();
    let posterior = GaussianPosterior::new(params.mu_head.forward(top), params.logvar_head.forward(top));
    EncoderTrace {
        bag,
        hidden,
        posterior,
    }
}

/// Approximate posterior `q(z | doc)` from the bag-of-words counts.
pub fn encode(doc: &Document, params: &ModelParams, config: &ModelConfig) -> Result<GaussianPosterior> {
    check_document(doc, config)?;
    Ok(encoder_forward(&doc.ids, params).posterior)
}

/// First-layer pre-activations of the encoder for raw counts `bag`.
pub fn encoder_first_preactivation(bag: &[(u32, f64)], params: &ModelParams) -> Vec<f64> {
    let first = &params.encoder[0];
    let mut pre = first.bias.clone();
    for &(w, c) in bag {
        axpy(c, first.weight.row(w as usize), &mut pre);
    }
    pre
}

/// `h = sigmoid(c + sum_{w in window} V_local[w])`. Panics in NVDM mode.
pub fn local_context(window: &[u32], params: &ModelParams) -> Vec<f64> {
    let (local, bias) = local_parts(params);
    let mut pre = bias.to_vec();
    for &w in window {
        axpy(1.0, local.row(w as usize), &mut pre);
    }
    pre.iter().map(|&x| sigmoid(x)).collect()
}

fn local_parts(params: &ModelParams) -> (&Matrix, &[f64]) {
    match (&params.local_emb, &params.local_bias) {
        (Some(e), Some(b)) => (e, b),
        _ => panic!("local context requested from a model without a local channel"),
    }
}

/// Previous `k` words before position `t`, truncated at the document start.
#[inline]
pub fn window_before(ids: &[u32], t: usize, k: usize) -> &[u32] {
    &ids[t.saturating_sub(k)..t]
}

/// `log p(word | z, h)`. `h` is ignored in NVDM mode.
pub fn next_word_log_prob(word: u32, z: &[f64], h: &[f64], params: &ModelParams, config: &ModelConfig) -> f64 {
    let logits = decoder_logits(z, h, params, config);
    let mut probs = vec![0.0; logits.len()];
    let lse = softmax_into(&logits, &mut probs);
    logits[word as usize] - lse
}

fn decoder_logits(z: &[f64], h: &[f64], params: &ModelParams, config: &ModelConfig) -> Vec<f64> {
    let d = config.latent_dim;
    (0..config.vocab_size)
        .map(|v| {
            let row = params.decoder_emb.row(v);
            let mut s = params.decoder_bias[v] + dot(&row[..d], z);
            if config.mode == ModelMode::Savae {
                s += dot(&row[d..], h);
            }
            s
        })
        .collect()
}

/// `b + X_z z`: the part of the logits that is shared by every position.
fn global_logits(z: &[f64], params: &ModelParams, config: &ModelConfig) -> Vec<f64> {
    let d = config.latent_dim;
    (0..config.vocab_size)
        .map(|v| params.decoder_bias[v] + dot(&params.decoder_emb.row(v)[..d], z))
        .collect()
}

/// `sum_v c_v logit_v - l * lse` over the sorted bag, so the value does not
/// depend on word order down to the last bit.
fn bag_log_likelihood(ids: &[u32], logits: &[f64], lse: f64) -> f64 {
    let dot: f64 = bag_of_words(ids).iter().map(|&(w, c)| c * logits[w as usize]).sum();
    dot - ids.len() as f64 * lse
}

/// `sum_t log p(w^t | w^{t-k..t-1}, z)`.
pub fn doc_log_likelihood(doc: &Document, z: &[f64], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    check_document(doc, config)?;
    Ok(log_likelihood_unchecked(&doc.ids, z, params, config))
}

fn log_likelihood_unchecked(ids: &[u32], z: &[f64], params: &ModelParams, config: &ModelConfig) -> f64 {
    let m = config.vocab_size;
    let d = config.latent_dim;
    let base = global_logits(z, params, config);
    let mut probs = vec![0.0; m];
    match config.mode {
        ModelMode::Nvdm => {
            let lse = softmax_into(&base, &mut probs);
            bag_log_likelihood(ids, &base, lse)
        }
        ModelMode::Savae => {
            let mut logits = vec![0.0; m];
            let mut total = AnchoredSum::default();
            for (t, &w) in ids.iter().enumerate() {
                let h = local_context(window_before(ids, t, config.window), params);
                for v in 0..m {
                    logits[v] = base[v] + dot(&params.decoder_emb.row(v)[d..], &h);
                }
                let lse = softmax_into(&logits, &mut probs);
                total.push(logits[w as usize] - lse);
            }
            total.sum()
        }
    }
}

/// Multi-sample ELBO; `samples` fresh noise vectors are drawn from `rng`.
pub fn elbo(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut Rng,
    samples: usize,
) -> Result<ElboEstimate> {
    check_document(doc, config)?;
    let samples = samples.max(1);
    let q = encoder_forward(&doc.ids, params).posterior;
    let mut rec = AnchoredSum::default();
    for _ in 0..samples {
        let eps = rng.normals(config.latent_dim);
        let z = q.sample_reparameterized(&eps);
        rec.push(log_likelihood_unchecked(&doc.ids, &z, params, config));
    }
    Ok(ElboEstimate::new(rec.mean(), q.kl_standard_normal(), samples))
}

/// Single-sample ELBO gradient with noise drawn from `rng`.
pub fn elbo_gradients(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut Rng,
) -> Result<(ElboEstimate, ParamGrads)> {
    let eps = rng.normals(config.latent_dim);
    elbo_gradients_with_eps(doc, params, config, &eps)
}

/// Single-sample ELBO gradient at fixed noise `eps`.
pub fn elbo_gradients_with_eps(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    eps: &[f64],
) -> Result<(ElboEstimate, ParamGrads)> {
    let mut grads = ParamGrads::zeros_like(params);
    let est = accumulate_elbo_gradients(doc, params, config, eps, 1.0, &mut grads)?;
    Ok((est, grads))
}

/// Adds `scale * d(total)/d(params)` into `grads` for noise `eps` and
/// returns the single-sample estimate.
pub fn accumulate_elbo_gradients(
    doc: &Document,
    params: &ModelParams,
    config: &ModelConfig,
    eps: &[f64],
    scale: f64,
    grads: &mut ParamGrads,
) -> Result<ElboEstimate> {
    check_document(doc, config)?;
    assert_eq!(eps.len(), config.latent_dim, "eps dimension mismatch");
    let d = config.latent_dim;
    let m = config.vocab_size;
    let ids = &doc.ids;

    let trace = encoder_forward(ids, params);
    let q = &trace.posterior;
    let std: Vec<f64> = q.log_var.iter().map(|lv| (0.5 * lv).exp()).collect();
    let z: Vec<f64> = (0..d).map(|i| q.mu[i] + std[i] * eps[i]).collect();

    // Decoder: accumulate d(loglik)/d(logits) summed over positions for the
    // position-independent parts (bias, z-block of X, z itself).
    let base = global_logits(&z, params, config);
    let mut probs = vec![0.0; m];
    let mut g_sum = vec![0.0; m];
    let rec;
    let g = &mut **grads;
    match config.mode {
        ModelMode::Nvdm => {
            let lse = softmax_into(&base, &mut probs);
            let l = ids.len() as f64;
            rec = bag_log_likelihood(ids, &base, lse);
            for &w in ids {
                g_sum[w as usize] += 1.0;
            }
            axpy(-l, &probs, &mut g_sum);
        }
        ModelMode::Savae => {
            let mut logits = vec![0.0; m];
            let mut dh = vec![0.0; d];
            let mut dpre = vec![0.0; d];
            let mut terms = AnchoredSum::default();
            for (t, &w) in ids.iter().enumerate() {
                let window = window_before(ids, t, config.window);
                let h = local_context(window, params);
                for v in 0..m {
                    logits[v] = base[v] + dot(&params.decoder_emb.row(v)[d..], &h);
                }
                let lse = softmax_into(&logits, &mut probs);
                terms.push(logits[w as usize] - lse);

                // dlogits = onehot(w) - probs
                dh.iter_mut().for_each(|x| *x = 0.0);
                for v in 0..m {
                    let gv = if v == w as usize { 1.0 - probs[v] } else { -probs[v] };
                    g_sum[v] += gv;
                    let x_h = &params.decoder_emb.row(v)[d..];
                    axpy(gv, x_h, &mut dh);
                    axpy(scale * gv, &h, &mut g.decoder_emb.row_mut(v)[d..]);
                }
                for i in 0..d {
                    dpre[i] = dh[i] * h[i] * (1.0 - h[i]);
                }
                let local_bias_grad = g.local_bias.as_mut().expect("savae grads");
                axpy(scale, &dpre, local_bias_grad);
                let local_grad = g.local_emb.as_mut().expect("savae grads");
                for &u in window {
                    axpy(scale, &dpre, local_grad.row_mut(u as usize));
                }
            }
            rec = terms.sum();
        }
    }

    axpy(scale, &g_sum, &mut g.decoder_bias);
    let mut dz = vec![0.0; d];
    for v in 0..m {
        let gv = g_sum[v];
        if gv != 0.0 {
            axpy(gv, &params.decoder_emb.row(v)[..d], &mut dz);
            axpy(scale * gv, &z, &mut g.decoder_emb.row_mut(v)[..d]);
        }
    }

    // Through z = mu + exp(0.5 lv) eps, minus the analytic KL gradient.
    let dmu: Vec<f64> = (0..d).map(|i| dz[i] - q.mu[i]).collect();
    let dlv: Vec<f64> = (0..d)
        .map(|i| dz[i] * 0.5 * std[i] * eps[i] - 0.5 * (q.log_var[i].exp() - 1.0))
        .collect();

    backprop_encoder(&trace, params, &dmu, &dlv, scale, g);

    Ok(ElboEstimate::new(rec, q.kl_standard_normal(), 1))
}

fn backprop_dense_into(
    layer: &Dense,
    grad: &mut Dense,
    input: &[f64],
    dout: &[f64],
    scale: f64,
    dinput: Option<&mut [f64]>,
) {
    axpy(scale, dout, &mut grad.bias);
    for (i, &xi) in input.iter().enumerate() {
        if xi != 0.0 {
            axpy(scale * xi, dout, grad.weight.row_mut(i));
        }
    }
    if let Some(dinput) = dinput {
        for (i, di) in dinput.iter_mut().enumerate() {
            *di += dot(layer.weight.row(i), dout);
        }
    }
}

fn backprop_encoder(
    trace: &EncoderTrace,
    params: &ModelParams,
    dmu: &[f64],
    dlv: &[f64],
    scale: f64,
    g: &mut ModelParams,
) {
    let top = trace.hidden.last().unwrap();
    let mut da = vec![0.0; top.len()];
    backprop_dense_into(&params.mu_head, &mut g.mu_head, top, dmu, scale, Some(&mut da));
    backprop_dense_into(&params.logvar_head, &mut g.logvar_head, top, dlv, scale, Some(&mut da));

    for l in (0..params.encoder.len()).rev() {
        // ReLU mask: the post-activation is positive iff the pre-activation was.
        let act = &trace.hidden[l];
        let dpre: Vec<f64> = da
            .iter()
            .zip(act)
            .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
            .collect();
        if l == 0 {
            let grad = &mut g.encoder[0];
            axpy(scale, &dpre, &mut grad.bias);
            for &(w, c) in &trace.bag {
                axpy(scale * c, &dpre, grad.weight.row_mut(w as usize));
            }
        } else {
            let input = &trace.hidden[l - 1];
            let mut dinput = vec![0.0; input.len()];
            backprop_dense_into(&params.encoder[l], &mut g.encoder[l], input, &dpre, scale, Some(&mut dinput));
            da = dinput;
        }
    }
}

/// Running `exp(-sum of bounds / sum of lengths)`, accumulated as the excess
/// of each bound over the uniform model's `-l ln m`. The value is the same;
/// a uniform model gives exactly `m`.
#[derive(Debug, Clone, Copy)]
pub struct PerplexityAccumulator {
    vocab_size: usize,
    log_vocab: f64,
    excess: f64,
    words: usize,
}

impl PerplexityAccumulator {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            log_vocab: (vocab_size as f64).ln(),
            excess: 0.0,
            words: 0,
        }
    }

    /// Adds one bound `total` over `len` words.
    pub fn push(&mut self, total: f64, len: usize) {
        self.excess += total + len as f64 * self.log_vocab;
        self.words += len;
    }

    pub fn words(&self) -> usize {
        self.words
    }

    /// `None` before any word was added.
    pub fn perplexity(&self) -> Option<f64> {
        (self.words > 0).then(|| self.vocab_size as f64 * (-self.excess / self.words as f64).exp())
    }
}

/// `exp(-sum_docs elbo.total / sum_docs l)` over non-empty documents.
pub fn perplexity<'a, I>(
    docs: I,
    params: &ModelParams,
    config: &ModelConfig,
    rng: &mut Rng,
    samples: usize,
) -> Result<f64>
where
    I: IntoIterator<Item = &'a Document>,
{
    let mut acc = PerplexityAccumulator::new(config.vocab_size);
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        acc.push(elbo(doc, params, config, rng, samples)?.total, doc.len());
    }
    acc.perplexity().ok_or(ModelError::AllDocumentsEmpty)
}
