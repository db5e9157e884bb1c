//! Bilinear Koopman forward model `D(K(a)·E(s))` with `K(a) = K₀ + Σ aᵢKᵢ`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{self, MODEL_MAGIC};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{from_row_major, lstsq_with_rank, to_row_major};
use crate::nnet::{huber, Activation, AdamState, ForwardCache, Gradients, Layer, Mlp};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Identity,
    Mlp,
}

/// Encoder or decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Codec {
    Identity,
    Mlp(Mlp),
}

impl Codec {
    pub fn kind(&self) -> CodecKind {
        match self {
            Codec::Identity => CodecKind::Identity,
            Codec::Mlp(_) => CodecKind::Mlp,
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Codec::Identity => Ok(x.clone()),
            Codec::Mlp(net) => net.forward(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KoopmanTrainConfig {
    pub codec: CodecKind,
    pub latent_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub recon_weight: f64,
    pub input_noise_std: f64,
    pub val_fraction: f64,
    pub huber_delta: f64,
    pub seed: u64,
}

impl Default for KoopmanTrainConfig {
    fn default() -> Self {
        Self {
            codec: CodecKind::Mlp,
            latent_dim: 32,
            hidden_dims: vec![128, 128],
            epochs: 75,
            batch_size: 256,
            lr: 3e-4,
            recon_weight: 1.0,
            input_noise_std: 1e-2,
            val_fraction: 0.30,
            huber_delta: 1.0,
            seed: 0,
        }
    }
}

impl KoopmanTrainConfig {
    /// Full-width architecture (512-wide hidden layers).
    pub fn paper_scale() -> Self {
        Self {
            hidden_dims: vec![512, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0,1), got {}",
                self.val_fraction
            )));
        }
        if self.latent_dim == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("latent_dim, epochs and batch_size must be positive".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.huber_delta > 0.0) || self.input_noise_std < 0.0 {
            return Err(Error::Config("lr and huber_delta must be positive, noise nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-epoch losses of [`train`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Root mean square one-step prediction error on the validation split.
    pub val_prediction_rmse: f64,
    /// Root mean square autoencoder error on the validation split.
    pub val_reconstruction_rmse: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanForwardModel {
    pub encoder: Codec,
    pub decoder: Codec,
    pub k0: DMatrix<f64>,
    pub k_forcing: Vec<DMatrix<f64>>,
    pub latent_dim: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Configuration that produced the model, if it was trained.
    pub config: Option<KoopmanTrainConfig>,
}

impl KoopmanForwardModel {
    /// Model with identity observables.
    pub fn identity(k0: DMatrix<f64>, k_forcing: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = k0.nrows();
        if k0.ncols() != n || k_forcing.iter().any(|k| k.shape() != (n, n)) {
            return Err(Error::DimensionMismatch("Koopman matrices must all be NxN".into()));
        }
        let m = k_forcing.len();
        Ok(Self {
            encoder: Codec::Identity,
            decoder: Codec::Identity,
            k0,
            k_forcing,
            latent_dim: n,
            state_dim: n,
            action_dim: m,
            config: None,
        })
    }

    pub fn is_identity_codec(&self) -> bool {
        matches!(self.encoder, Codec::Identity) && matches!(self.decoder, Codec::Identity)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.latent_dim;
        if self.k0.shape() != (n, n)
            || self.k_forcing.len() != self.action_dim
            || self.k_forcing.iter().any(|k| k.shape() != (n, n))
        {
            return Err(Error::DimensionMismatch("Koopman matrix shapes".into()));
        }
        match (&self.encoder, &self.decoder) {
            (Codec::Identity, Codec::Identity) => {
                if n != self.state_dim {
                    return Err(Error::DimensionMismatch(
                        "identity observables require latent_dim == state_dim".into(),
                    ));
                }
            }
            (Codec::Mlp(e), Codec::Mlp(d)) => {
                if e.input_dim() != self.state_dim
                    || e.output_dim() != n
                    || d.input_dim() != n
                    || d.output_dim() != self.state_dim
                {
                    return Err(Error::DimensionMismatch("codec widths".into()));
                }
            }
            _ => {
                return Err(Error::DimensionMismatch(
                    "encoder and decoder must both be identity or both MLP".into(),
                ))
            }
        }
        Ok(())
    }

    /// `K(a) = K₀ + Σ aᵢKᵢ`.
    pub fn k_of_a(&self, a: &[f64]) -> DMatrix<f64> {
        assert_eq!(a.len(), self.action_dim, "action length");
        let mut k = self.k0.clone();
        for (ai, ki) in a.iter().zip(&self.k_forcing) {
            if *ai != 0.0 {
                k += ki * *ai;
            }
        }
        k
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.state_dim {
            return Err(Error::DimensionMismatch(format!(
                "state of length {} for a model with state_dim {}",
                s.len(),
                self.state_dim
            )));
        }
        Ok(())
    }

    pub fn encode(&self, s: &[f64]) -> Result<DVector<f64>> {
        self.check_state(s)?;
        let z = self.encoder.apply(&DMatrix::from_row_slice(1, s.len(), s))?;
        Ok(DVector::from_iterator(z.ncols(), z.iter().copied()))
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim {
            return Err(Error::DimensionMismatch("latent vector length".into()));
        }
        let s = self.decoder.apply(&DMatrix::from_row_slice(1, z.len(), z.as_slice()))?;
        Ok(s.iter().copied().collect())
    }

    /// `D(K(a)·E(s))`.
    pub fn predict_next(&self, s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.action_dim {
            return Err(Error::DimensionMismatch("action length".into()));
        }
        let z = self.encode(s)?;
        self.decode(&(self.k_of_a(a) * z))
    }

    /// `D(E(s))`.
    pub fn reconstruct(&self, s: &[f64]) -> Result<Vec<f64>> {
        let z = self.encode(s)?;
        self.decode(&z)
    }

    // ---- persistence ----

    fn header(&self) -> ModelHeader {
        let arch = |c: &Codec| match c {
            Codec::Identity => None,
            Codec::Mlp(m) => Some(MlpArch {
                layer_dims: m.layer_dims(),
                activations: m.activations(),
            }),
        };
        let mut blocks = Vec::new();
        if let Codec::Mlp(m) = &self.encoder {
            blocks.push(BlockSpec::new("encoder", m.num_params()));
        }
        if let Codec::Mlp(m) = &self.decoder {
            blocks.push(BlockSpec::new("decoder", m.num_params()));
        }
        let nn = self.latent_dim * self.latent_dim;
        blocks.push(BlockSpec::new("k0", nn));
        for i in 0..self.action_dim {
            blocks.push(BlockSpec::new(&format!("k{}", i + 1), nn));
        }
        ModelHeader {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            latent_dim: self.latent_dim,
            codec: self.encoder.kind(),
            encoder: arch(&self.encoder),
            decoder: arch(&self.decoder),
            config: self.config.clone(),
            seed: self.config.as_ref().map(|c| c.seed),
            blocks,
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        self.validate()?;
        container::write_preamble(w, MODEL_MAGIC, &self.header())?;
        if let Codec::Mlp(m) = &self.encoder {
            container::write_f64s(w, &m.params_flat())?;
        }
        if let Codec::Mlp(m) = &self.decoder {
            container::write_f64s(w, &m.params_flat())?;
        }
        container::write_f64s(w, &to_row_major(&self.k0))?;
        for k in &self.k_forcing {
            container::write_f64s(w, &to_row_major(k))?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (h, _): (ModelHeader, u64) = container::read_preamble(r, MODEL_MAGIC)?;
        let expected = h.clone_expected_blocks();
        if expected != h.blocks {
            return Err(Error::Header("block table does not match declared architecture".into()));
        }
        let read_codec = |r: &mut R, arch: &Option<MlpArch>, name: &str| -> Result<Codec> {
            match arch {
                None => Ok(Codec::Identity),
                Some(a) => {
                    let mut net = a.build()?;
                    let params = container::read_f64s(r, net.num_params(), name)?;
                    if params.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("{name} parameters")));
                    }
                    net.set_params_flat(&params)?;
                    Ok(Codec::Mlp(net))
                }
            }
        };
        let encoder = read_codec(r, &h.encoder, "encoder")?;
        let decoder = read_codec(r, &h.decoder, "decoder")?;
        let n = h.latent_dim;
        let k0 = from_row_major(n, n, &container::read_f64s(r, n * n, "k0")?)?;
        let mut k_forcing = Vec::with_capacity(h.action_dim);
        for i in 0..h.action_dim {
            let vals = container::read_f64s(r, n * n, &format!("k{}", i + 1))?;
            k_forcing.push(from_row_major(n, n, &vals)?);
        }
        container::expect_eof(r)?;
        let model = Self {
            encoder,
            decoder,
            k0,
            k_forcing,
            latent_dim: n,
            state_dim: h.state_dim,
            action_dim: h.action_dim,
            config: h.config,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub layer_dims: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpArch {
    pub fn build(&self) -> Result<Mlp> {
        if self.layer_dims.len() < 2 || self.activations.len() + 1 != self.layer_dims.len() {
            return Err(Error::Header("inconsistent MLP architecture".into()));
        }
        let layers = self
            .activations
            .iter()
            .enumerate()
            .map(|(i, &activation)| Layer {
                weight: DMatrix::zeros(self.layer_dims[i + 1], self.layer_dims[i]),
                bias: DVector::zeros(self.layer_dims[i + 1]),
                activation,
            })
            .collect();
        Mlp::from_layers(layers)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub name: String,
    pub len: usize,
}

impl BlockSpec {
    pub fn new(name: &str, len: usize) -> Self {
        Self {
            name: name.to_string(),
            len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    state_dim: usize,
    action_dim: usize,
    latent_dim: usize,
    codec: CodecKind,
    encoder: Option<MlpArch>,
    decoder: Option<MlpArch>,
    config: Option<KoopmanTrainConfig>,
    seed: Option<u64>,
    blocks: Vec<BlockSpec>,
}

impl ModelHeader {
    fn clone_expected_blocks(&self) -> Vec<BlockSpec> {
        let count = |a: &MlpArch| -> usize {
            a.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
        };
        let mut b = Vec::new();
        if let Some(a) = &self.encoder {
            b.push(BlockSpec::new("encoder", count(a)));
        }
        if let Some(a) = &self.decoder {
            b.push(BlockSpec::new("decoder", count(a)));
        }
        let nn = self.latent_dim * self.latent_dim;
        b.push(BlockSpec::new("k0", nn));
        for i in 0..self.action_dim {
            b.push(BlockSpec::new(&format!("k{}", i + 1), nn));
        }
        b
    }
}

// ---- closed-form fit ----

/// Least-squares fit of `[K₀|K₁|…|K_m]` with identity observables.
///
/// Regresses `s_{t+1}` on `z = [s_t; a₁s_t; …; a_m s_t]`; exact for data
/// generated by a bilinear system. A rank-deficient design falls back to the
/// minimum-norm solution with a warning.
pub fn fit_linear(dataset: &Dataset) -> Result<KoopmanForwardModel> {
    if dataset.is_empty() {
        return Err(Error::Empty("fit_linear on an empty dataset".into()));
    }
    let n = dataset.state_dim;
    let m = dataset.action_dim;
    let rows = dataset.len();
    let cols = n * (1 + m);
    let mut z = DMatrix::<f64>::zeros(rows, cols);
    let mut y = DMatrix::<f64>::zeros(rows, n);
    for t in 0..rows {
        let s = dataset.state(t);
        let a = dataset.action(t);
        for j in 0..n {
            z[(t, j)] = s[j];
            for (i, ai) in a.iter().enumerate() {
                z[(t, (i + 1) * n + j)] = ai * s[j];
            }
            y[(t, j)] = dataset.next_state(t)[j];
        }
    }
    let (x, rank) = lstsq_with_rank(&z, &y)?;
    if rank < cols {
        log::warn!("fit_linear: design matrix has rank {rank} < {cols}; using minimum-norm solution");
    }
    // s_{t+1}ᵀ = zᵀ X, so each block of rows of X is a transposed K.
    let block = |i: usize| x.rows(i * n, n).transpose();
    let k0 = block(0);
    let k_forcing = (1..=m).map(block).collect();
    KoopmanForwardModel::identity(k0, k_forcing)
}

// ---- gradient training ----

struct BatchOut {
    loss: f64,
    pred_sq: f64,
    recon_sq: f64,
    grads: Option<ModelGrads>,
}

struct ModelGrads {
    encoder: Option<Gradients>,
    decoder: Option<Gradients>,
    k: Vec<DMatrix<f64>>,
}

fn codec_forward(c: &Codec, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Option<ForwardCache>)> {
    match c {
        Codec::Identity => Ok((x.clone(), None)),
        Codec::Mlp(net) => {
            let cache = net.forward_cached(x)?;
            Ok((cache.output().clone(), Some(cache)))
        }
    }
}

fn codec_backward(
    c: &Codec,
    cache: &Option<ForwardCache>,
    dy: &DMatrix<f64>,
) -> Result<(Option<Gradients>, DMatrix<f64>)> {
    match (c, cache) {
        (Codec::Mlp(net), Some(cache)) => {
            let (g, dx) = net.backward(cache, dy)?;
            Ok((Some(g), dx))
        }
        _ => Ok((None, dy.clone())),
    }
}

fn accumulate(acc: &mut Option<Gradients>, g: Option<Gradients>) {
    match (acc.as_mut(), g) {
        (Some(a), Some(g)) => a.add_assign(&g),
        (None, Some(g)) => *acc = Some(g),
        _ => {}
    }
}

/// Rows of `z` mapped through their own `K(a)`: `y_b = K(a_b) z_b`.
fn apply_bilinear(model: &KoopmanForwardModel, z: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut y = z * model.k0.transpose();
    for (i, ki) in model.k_forcing.iter().enumerate() {
        let mut term = z * ki.transpose();
        for (r, mut row) in term.row_iter_mut().enumerate() {
            row *= a[(r, i)];
        }
        y += term;
    }
    y
}

fn batch_pass(
    model: &KoopmanForwardModel,
    s: &DMatrix<f64>,
    a: &DMatrix<f64>,
    s1: &DMatrix<f64>,
    noisy: &DMatrix<f64>,
    cfg: &KoopmanTrainConfig,
    want_grads: bool,
) -> Result<BatchOut> {
    let (z, enc_cache) = codec_forward(&model.encoder, s)?;
    let y = apply_bilinear(model, &z, a);
    let (pred, dec_cache) = codec_forward(&model.decoder, &y)?;
    let (l_pred, g_pred) = huber(&pred, s1, cfg.huber_delta)?;
    let pred_sq = (&pred - s1).norm_squared();

    let has_recon = !model.is_identity_codec();
    let (mut loss, mut recon_sq) = (l_pred, 0.0);
    let mut recon = None;
    if has_recon {
        let (zr, enc_cache_r) = codec_forward(&model.encoder, noisy)?;
        let (rec, dec_cache_r) = codec_forward(&model.decoder, &zr)?;
        let (l_rec, g_rec) = huber(&rec, noisy, cfg.huber_delta)?;
        loss += cfg.recon_weight * l_rec;
        recon_sq = (&rec - noisy).norm_squared();
        recon = Some((enc_cache_r, dec_cache_r, g_rec));
    }

    if !want_grads {
        return Ok(BatchOut {
            loss,
            pred_sq,
            recon_sq,
            grads: None,
        });
    }

    let (mut g_dec, dy) = codec_backward(&model.decoder, &dec_cache, &g_pred)?;
    let mut k = Vec::with_capacity(1 + model.action_dim);
    k.push(dy.tr_mul(&z));
    let mut dz = &dy * &model.k0;
    for (i, ki) in model.k_forcing.iter().enumerate() {
        let mut dyi = dy.clone();
        for (r, mut row) in dyi.row_iter_mut().enumerate() {
            row *= a[(r, i)];
        }
        k.push(dyi.tr_mul(&z));
        dz += &dyi * ki;
    }
    let (mut g_enc, _) = codec_backward(&model.encoder, &enc_cache, &dz)?;

    if let Some((enc_cache_r, dec_cache_r, g_rec)) = recon {
        let g_rec = g_rec * cfg.recon_weight;
        let (gd, dzr) = codec_backward(&model.decoder, &dec_cache_r, &g_rec)?;
        accumulate(&mut g_dec, gd);
        let (ge, _) = codec_backward(&model.encoder, &enc_cache_r, &dzr)?;
        accumulate(&mut g_enc, ge);
    }

    Ok(BatchOut {
        loss,
        pred_sq,
        recon_sq,
        grads: Some(ModelGrads {
            encoder: g_enc,
            decoder: g_dec,
            k,
        }),
    })
}

fn param_shapes(model: &KoopmanForwardModel) -> Vec<usize> {
    let mut shapes = Vec::new();
    if let Codec::Mlp(e) = &model.encoder {
        shapes.extend(e.param_shapes());
    }
    if let Codec::Mlp(d) = &model.decoder {
        shapes.extend(d.param_shapes());
    }
    let nn = model.latent_dim * model.latent_dim;
    shapes.extend(std::iter::repeat_n(nn, 1 + model.action_dim));
    shapes
}

fn adam_update(model: &mut KoopmanForwardModel, adam: &mut AdamState, g: &ModelGrads) -> Result<()> {
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut grads: Vec<&[f64]> = Vec::new();
    if let (Codec::Mlp(e), Some(ge)) = (&mut model.encoder, &g.encoder) {
        params.extend(e.param_slices_mut());
        grads.extend(ge.slices());
    }
    if let (Codec::Mlp(d), Some(gd)) = (&mut model.decoder, &g.decoder) {
        params.extend(d.param_slices_mut());
        grads.extend(gd.slices());
    }
    params.push(model.k0.as_mut_slice());
    for k in model.k_forcing.iter_mut() {
        params.push(k.as_mut_slice());
    }
    grads.extend(g.k.iter().map(|k| k.as_slice()));
    adam.step(params, &grads)
}

/// Initial model: Glorot-initialized codecs (or identity), `K₀ = I`, `Kᵢ = 0`.
pub fn init_model(
    state_dim: usize,
    action_dim: usize,
    cfg: &KoopmanTrainConfig,
    rng: &mut impl Rng,
) -> KoopmanForwardModel {
    let (encoder, decoder, n) = match cfg.codec {
        CodecKind::Identity => (Codec::Identity, Codec::Identity, state_dim),
        CodecKind::Mlp => {
            let n = cfg.latent_dim;
            let mut enc_dims = vec![state_dim];
            enc_dims.extend(&cfg.hidden_dims);
            enc_dims.push(n);
            let mut dec_dims = vec![n];
            dec_dims.extend(cfg.hidden_dims.iter().rev());
            dec_dims.push(state_dim);
            let e = Mlp::new(&enc_dims, Activation::Relu, Activation::Identity, rng);
            let d = Mlp::new(&dec_dims, Activation::Relu, Activation::Identity, rng);
            (Codec::Mlp(e), Codec::Mlp(d), n)
        }
    };
    KoopmanForwardModel {
        encoder,
        decoder,
        k0: DMatrix::identity(n, n),
        k_forcing: vec![DMatrix::zeros(n, n); action_dim],
        latent_dim: n,
        state_dim,
        action_dim,
        config: Some(cfg.clone()),
    }
}

/// Gradient training of the forward model.
///
/// Loss per batch: `huber(D(K(a)E(s_t)), s_{t+1}) + γ₂·huber(D(E(s̄)), s̄)`
/// with `s̄ = s_t + noise`. The split is a seeded 70/30 shuffle (by
/// default) and all parameters share one Adam optimizer.
pub fn train(
    dataset: &Dataset,
    cfg: &KoopmanTrainConfig,
) -> Result<(KoopmanForwardModel, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("cannot train on an empty dataset".into()));
    }
    if dataset.state_dim == 0 {
        return Err(Error::DimensionMismatch("state_dim is zero".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut model = init_model(dataset.state_dim, dataset.action_dim, cfg, &mut rng);

    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng);
    let n_val = ((dataset.len() as f64) * cfg.val_fraction).round() as usize;
    let n_val = n_val.min(dataset.len().saturating_sub(1));
    let (val_idx, train_idx) = idx.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let val_idx = val_idx.to_vec();

    let mut adam = AdamState::new(&param_shapes(&model), cfg.lr);
    let mut report = TrainReport {
        train_losses: Vec::with_capacity(cfg.epochs),
        val_losses: Vec::with_capacity(cfg.epochs),
        val_prediction_rmse: f64::NAN,
        val_reconstruction_rmse: f64::NAN,
        n_train: train_idx.len(),
        n_val: val_idx.len(),
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in train_idx.chunks(cfg.batch_size).enumerate() {
            let s = dataset.states_matrix(chunk);
            let a = dataset.actions_matrix(chunk);
            let s1 = dataset.next_states_matrix(chunk);
            let noisy = if model.is_identity_codec() {
                s.clone()
            } else {
                s.map(|x| x + cfg.input_noise_std * rng.sample::<f64, _>(StandardNormal))
            };
            let out = batch_pass(&model, &s, &a, &s1, &noisy, cfg, true)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("epoch {epoch}, batch {b}"),
                    detail: format!(
                        "loss {} (prediction sq-error {}, reconstruction sq-error {})",
                        out.loss, out.pred_sq, out.recon_sq
                    ),
                });
            }
            adam_update(&mut model, &mut adam, out.grads.as_ref().expect("grads requested"))?;
            total += out.loss;
            batches += 1;
        }
        report.train_losses.push(total / batches.max(1) as f64);
        report.steps = adam.step;

        let val = evaluate(&model, dataset, &val_idx, cfg)?;
        report.val_losses.push(val.0);
        report.val_prediction_rmse = val.1;
        report.val_reconstruction_rmse = val.2;
        log::debug!(
            "koopman epoch {epoch}: train {:.3e} val {:.3e}",
            report.train_losses[epoch],
            val.0
        );
    }
    Ok((model, report))
}

/// Validation loss and RMS errors; noise-free.
fn evaluate(
    model: &KoopmanForwardModel,
    dataset: &Dataset,
    idx: &[usize],
    cfg: &KoopmanTrainConfig,
) -> Result<(f64, f64, f64)> {
    if idx.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let (mut loss, mut pred_sq, mut recon_sq) = (0.0, 0.0, 0.0);
    for chunk in idx.chunks(4096) {
        let s = dataset.states_matrix(chunk);
        let a = dataset.actions_matrix(chunk);
        let s1 = dataset.next_states_matrix(chunk);
        let out = batch_pass(model, &s, &a, &s1, &s, cfg, false)?;
        loss += out.loss * chunk.len() as f64;
        pred_sq += out.pred_sq;
        recon_sq += out.recon_sq;
    }
    let count = (idx.len() * dataset.state_dim) as f64;
    Ok((
        loss / idx.len() as f64,
        (pred_sq / count).sqrt(),
        (recon_sq / count).sqrt(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TransitionTuple;

    fn decay_dataset(n: usize) -> Dataset {
        let mut rng = seeded(42);
        let mut d = Dataset::new(3, 1);
        for _ in 0..n {
            let s: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }];
            let next = s.iter().map(|x| 0.9 * x).collect();
            d.push(&TransitionTuple {
                state: s,
                action: a,
                reward: 0.0,
                next_state: next,
            })
            .unwrap();
        }
        d
    }

    #[test]
    fn k_of_a_is_linear() {
        let k0 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let k2 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let m = KoopmanForwardModel::identity(k0.clone(), vec![k1.clone(), k2.clone()]).unwrap();
        assert_eq!(m.k_of_a(&[0.0, 0.0]), k0);
        assert_eq!(m.k_of_a(&[1.0, 1.0]), &k0 + &k1 + &k2);
    }

    #[test]
    fn identity_model_predicts_state_under_identity_k() {
        let m = KoopmanForwardModel::identity(DMatrix::identity(3, 3), vec![DMatrix::zeros(3, 3)])
            .unwrap();
        let s = [0.1, -2.0, 3.5];
        assert_eq!(m.predict_next(&s, &[0.7]).unwrap(), s.to_vec());
        assert_eq!(m.reconstruct(&s).unwrap(), s.to_vec());
        assert_eq!(m.reconstruct(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn fit_linear_recovers_decay() {
        let m = fit_linear(&decay_dataset(200)).unwrap();
        assert!((&m.k0 - DMatrix::identity(3, 3) * 0.9).norm() < 1e-12);
        assert!(m.k_forcing[0].norm() < 1e-12);
    }

    #[test]
    fn fit_linear_single_transition_is_min_norm() {
        let d = decay_dataset(1);
        let m = fit_linear(&d).unwrap();
        let pred = m.predict_next(d.state(0), d.action(0)).unwrap();
        for (p, t) in pred.iter().zip(d.next_state(0)) {
            assert!((p - t).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_dataset_errors() {
        let d = Dataset::new(3, 1);
        assert!(fit_linear(&d).is_err());
        assert!(train(&d, &KoopmanTrainConfig::default()).is_err());
    }

    #[test]
    fn train_identity_codec_learns_decay() {
        let cfg = KoopmanTrainConfig {
            codec: CodecKind::Identity,
            epochs: 150,
            batch_size: 64,
            lr: 1e-2,
            ..Default::default()
        };
        let (m, report) = train(&decay_dataset(1000), &cfg).unwrap();
        assert!(
            (&m.k0 - DMatrix::identity(3, 3) * 0.9).abs().max() < 1e-3,
            "{}",
            m.k0
        );
        assert!(m.k_forcing[0].abs().max() < 1e-3);
        assert_eq!(report.train_losses.len(), 150);
    }

    #[test]
    fn mlp_model_file_is_stable() {
        let cfg = KoopmanTrainConfig {
            latent_dim: 4,
            hidden_dims: vec![8],
            epochs: 2,
            ..Default::default()
        };
        let (m, _) = train(&decay_dataset(100), &cfg).unwrap();
        let mut a = Vec::new();
        m.write_to(&mut a).unwrap();
        let loaded = KoopmanForwardModel::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(loaded, m);
        let mut b = Vec::new();
        loaded.write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn corrupt_model_is_rejected() {
        let m = KoopmanForwardModel::identity(DMatrix::identity(2, 2), vec![]).unwrap();
        let mut a = Vec::new();
        m.write_to(&mut a).unwrap();
        a.pop();
        assert!(KoopmanForwardModel::read_from(&mut a.as_slice()).is_err());
    }
}
