//! Autoencoder training and the GAN fine-tuning phase.
//!
//! The generator starts as a copy of the trained decoder. Its loss is the
//! non-saturating adversarial term plus a feature loss measured with the
//! frozen encoder plus `β` times the content loss, where the last two are
//! evaluated on a "paired" part of every fake batch: reconstructions
//! `g(z_i)` of real samples `x_i` that also sit, aligned, at the front of
//! the real batch.

use std::io::{BufRead, Write};

use rand::seq::{index, SliceRandom};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extension::LatentSampler;
use crate::geometry::{sq_dist, PointCloud};
use crate::nn::{adam_step, Activation, AdamState, GradientBundle, LayerSpec, Matrix, Mlp};
use crate::rng::RngStream;

/// Lower clamp inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Rows pushed through a network at once outside training.
const EVAL_CHUNK: usize = 4096;

fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}

/// `d/dp ln(max(p, floor))`.
fn clamped_ln_slope(p: f64) -> f64 {
    if p > LOG_FLOOR {
        1.0 / p
    } else {
        0.0
    }
}

fn predict_chunked(net: &Mlp, x: &PointCloud) -> Result<PointCloud> {
    if x.dim() != net.in_dim() {
        return Err(Error::DimensionMismatch { expected: net.in_dim(), got: x.dim() });
    }
    let mut flat = Vec::with_capacity(x.len() * net.out_dim());
    for chunk in x.as_flat().chunks(EVAL_CHUNK * x.dim()) {
        let m = Matrix::new(chunk.len() / x.dim(), x.dim(), chunk.to_vec())?;
        flat.extend(net.predict(&m)?.into_vec());
    }
    PointCloud::from_flat(net.out_dim(), flat)
}

fn squared_rows(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).powi(2)).sum()
}

// ---------------------------------------------------------------------------
// Autoencoder

/// Hidden layer widths of the encoder; the decoder mirrors them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeArchitecture {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default = "default_hidden_activation")]
    pub activation: Activation,
}

fn default_hidden_activation() -> Activation {
    Activation::LeakyRelu
}

fn chain(widths: &[usize], hidden: Activation, last: Activation) -> Vec<LayerSpec> {
    (0..widths.len() - 1)
        .map(|k| LayerSpec {
            inputs: widths[k],
            outputs: widths[k + 1],
            activation: if k + 2 == widths.len() { last } else { hidden },
        })
        .collect()
}

impl AeArchitecture {
    pub fn new(data_dim: usize, latent_dim: usize, hidden: Vec<usize>) -> Self {
        AeArchitecture { data_dim, latent_dim, hidden, activation: Activation::LeakyRelu }
    }

    fn validate(&self) -> Result<()> {
        if self.data_dim == 0 || self.latent_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("autoencoder widths must be positive"));
        }
        Ok(())
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut w = vec![self.data_dim];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        chain(&w, self.activation, Activation::Identity)
    }

    pub fn decoder_specs(&self) -> Vec<LayerSpec> {
        let mut w = vec![self.latent_dim];
        w.extend(self.hidden.iter().rev());
        w.push(self.data_dim);
        chain(&w, self.activation, Activation::Identity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final reconstruction MSE above this is flagged in the history.
    pub mse_threshold: f64,
}

impl Default for AeSchedule {
    fn default() -> Self {
        AeSchedule { epochs: 300, batch_size: 64, lr: 1e-3, mse_threshold: 1e-3 }
    }
}

/// Reconstruction MSE after every epoch. MSE is the mean over points of
/// `‖x − g(f(x))‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeHistory {
    pub mse: Vec<f64>,
    pub final_mse: f64,
    pub threshold: f64,
    pub below_threshold: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Autoencoder {
    pub fn new(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.out_dim() != decoder.in_dim() {
            return Err(Error::DimensionMismatch { expected: encoder.out_dim(), got: decoder.in_dim() });
        }
        if decoder.out_dim() != encoder.in_dim() {
            return Err(Error::DimensionMismatch { expected: encoder.in_dim(), got: decoder.out_dim() });
        }
        Ok(Autoencoder { encoder, decoder })
    }

    pub fn init(arch: &AeArchitecture, rng: &RngStream) -> Result<Self> {
        arch.validate()?;
        Autoencoder::new(
            Mlp::init(&arch.encoder_specs(), &rng.split_named("encoder"))?,
            Mlp::init(&arch.decoder_specs(), &rng.split_named("decoder"))?,
        )
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.out_dim()
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn encode(&self, data: &PointCloud) -> Result<PointCloud> {
        predict_chunked(&self.encoder, data)
    }

    pub fn decode(&self, codes: &PointCloud) -> Result<PointCloud> {
        predict_chunked(&self.decoder, codes)
    }

    pub fn reconstruction_mse(&self, data: &PointCloud) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let back = self.decode(&self.encode(data)?)?;
        let total: f64 = data.iter().zip(back.iter()).map(|(a, b)| sq_dist(a, b)).sum();
        Ok(total / data.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ae: Autoencoder = serde_json::from_str(text)?;
        Autoencoder::new(ae.encoder, ae.decoder)
    }
}

/// Minimizes the summed reconstruction error with Adam over shuffled
/// minibatches.
pub fn train_autoencoder(
    dataset: &PointCloud,
    arch: &AeArchitecture,
    schedule: &AeSchedule,
    rng: &RngStream,
) -> Result<(Autoencoder, AeHistory)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if dataset.dim() != arch.data_dim {
        return Err(Error::DimensionMismatch { expected: arch.data_dim, got: dataset.dim() });
    }
    if schedule.batch_size == 0 || !(schedule.lr > 0.0) {
        return Err(Error::invalid("autoencoder batch size and learning rate must be positive"));
    }
    let mut ae = Autoencoder::init(arch, rng)?;
    let mut enc_state = AdamState::new(&ae.encoder, schedule.lr);
    let mut dec_state = AdamState::new(&ae.decoder, schedule.lr);
    let mut shuffle = rng.split_named("shuffle");
    let data = Matrix::from_cloud(dataset);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut mse = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(schedule.batch_size) {
            let x = data.select_rows(batch);
            let (z, enc_trace) = ae.encoder.forward(&x)?;
            let (y, dec_trace) = ae.decoder.forward(&z)?;
            let scale = 2.0 / batch.len() as f64;
            let up: Vec<f64> = y.as_slice().iter().zip(x.as_slice()).map(|(a, b)| scale * (a - b)).collect();
            let dec_grads = ae.decoder.backward(&dec_trace, &Matrix::new(x.rows(), x.cols(), up)?)?;
            let enc_grads = ae.encoder.backward(&enc_trace, &dec_grads.input)?;
            if !dec_grads.is_finite() || !enc_grads.is_finite() {
                return Err(Error::Diverged { epoch, what: "non-finite autoencoder gradient".into() });
            }
            adam_step(&mut ae.decoder, &mut dec_state, &dec_grads)?;
            adam_step(&mut ae.encoder, &mut enc_state, &enc_grads)?;
        }
        let m = ae.reconstruction_mse(dataset)?;
        if !m.is_finite() {
            return Err(Error::Diverged { epoch, what: format!("reconstruction loss is {m}") });
        }
        mse.push(m);
    }
    let final_mse = match mse.last() {
        Some(&m) => m,
        None => ae.reconstruction_mse(dataset)?,
    };
    let history = AeHistory {
        mse,
        final_mse,
        threshold: schedule.mse_threshold,
        below_threshold: final_mse < schedule.mse_threshold,
    };
    Ok((ae, history))
}

/// Latent codes `f(x_i)`, aligned with `dataset`.
pub fn encode_dataset(ae: &Autoencoder, dataset: &PointCloud) -> Result<PointCloud> {
    ae.encode(dataset)
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, PartialEq)]
pub struct PairedTriple {
    /// Row of `x` in the dataset.
    pub index: usize,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub reconstruction: Vec<f64>,
}

fn stack(rows: impl Iterator<Item = Vec<f64>>, cols: usize) -> Result<Matrix> {
    let data: Vec<f64> = rows.flatten().collect();
    Matrix::new(data.len() / cols.max(1), cols, data)
}

fn triple_matrices(triples: &[PairedTriple]) -> Result<(Matrix, Matrix)> {
    let first = triples.first().ok_or(Error::Empty("triples"))?;
    let dim = first.x.len();
    for t in triples {
        if t.x.len() != dim || t.reconstruction.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: t.reconstruction.len() });
        }
    }
    Ok((
        stack(triples.iter().map(|t| t.x.clone()), dim)?,
        stack(triples.iter().map(|t| t.reconstruction.clone()), dim)?,
    ))
}

/// `(1/n) Σ ‖g(z_i) − x_i‖²`.
pub fn content_loss(triples: &[PairedTriple]) -> Result<f64> {
    let (x, recon) = triple_matrices(triples)?;
    Ok(content_term(&x, &recon).0)
}

/// `(1/n) Σ_i Σ_l α_l ‖f^(l)(x_i) − f^(l)(g(z_i))‖²`, one weight per
/// encoder layer.
pub fn feature_loss(triples: &[PairedTriple], encoder: &Mlp, alpha: &[f64]) -> Result<f64> {
    let (x, recon) = triple_matrices(triples)?;
    Ok(feature_term(encoder, &x, &recon, alpha)?.0)
}

/// Value and gradient with respect to `recon`.
fn content_term(x: &Matrix, recon: &Matrix) -> (f64, Matrix) {
    let n = x.rows() as f64;
    let grad: Vec<f64> = recon.as_slice().iter().zip(x.as_slice()).map(|(r, v)| 2.0 * (r - v) / n).collect();
    (squared_rows(recon, x) / n, Matrix::new(x.rows(), x.cols(), grad).expect("same shape"))
}

fn feature_term(encoder: &Mlp, x: &Matrix, recon: &Matrix, alpha: &[f64]) -> Result<(f64, Matrix)> {
    if alpha.len() != encoder.depth() {
        return Err(Error::SizeMismatch(alpha.len(), encoder.depth()));
    }
    let n = x.rows() as f64;
    let (_, tx) = encoder.forward(x)?;
    let (_, tr) = encoder.forward(recon)?;
    let mut value = 0.0;
    let mut injected = Vec::with_capacity(alpha.len());
    for (l, &a) in alpha.iter().enumerate() {
        let (fx, fr) = (&tx.outputs[l], &tr.outputs[l]);
        value += a * squared_rows(fr, fx) / n;
        let g: Vec<f64> = fr.as_slice().iter().zip(fx.as_slice()).map(|(p, q)| 2.0 * a * (p - q) / n).collect();
        injected.push(Matrix::new(fr.rows(), fr.cols(), g)?);
    }
    let refs: Vec<Option<&Matrix>> = injected.iter().map(Some).collect();
    Ok((value, encoder.backward_injected(&tr, &refs)?.input))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdversarialLosses {
    pub disc_loss: f64,
    pub gen_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// `disc_loss = −mean ln d(real) − mean ln(1 − d(fake))` and the
/// non-saturating `gen_loss = −mean ln d(fake)`.
pub fn adversarial_losses(disc: &Mlp, real: &Matrix, fake: &Matrix) -> Result<AdversarialLosses> {
    Ok(discriminator_objective(disc, real, fake)?.0)
}

fn check_disc(disc: &Mlp) -> Result<()> {
    let last = disc.layers().last().expect("non-empty network");
    if disc.out_dim() != 1 || last.activation != Activation::Sigmoid {
        return Err(Error::invalid("discriminator must end in a single sigmoid unit"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Batches

/// Generated : reconstructed parts of a fake batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeRatio {
    pub generated: usize,
    pub reconstructed: usize,
}

impl Default for FakeRatio {
    fn default() -> Self {
        FakeRatio { generated: 3, reconstructed: 1 }
    }
}

impl FakeRatio {
    /// Number of paired (reconstructed) rows in a batch of `batch_size`.
    pub fn paired(&self, batch_size: usize) -> Result<usize> {
        let parts = self.generated + self.reconstructed;
        if self.generated == 0 || self.reconstructed == 0 {
            return Err(Error::invalid("fake batch ratio parts must be positive"));
        }
        if batch_size == 0 || !batch_size.is_multiple_of(parts) {
            return Err(Error::invalid(format!(
                "batch size {batch_size} is not a positive multiple of {parts}"
            )));
        }
        Ok(batch_size / parts * self.reconstructed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedBatch {
    /// Paired rows first, then randomly selected samples.
    pub real: Matrix,
    /// Reconstructions of the paired rows first, then generated samples.
    pub fake: Matrix,
    /// Generator inputs for every row of `fake`.
    pub latents: Matrix,
    pub triples: Vec<PairedTriple>,
}

impl ComposedBatch {
    pub fn paired(&self) -> usize {
        self.triples.len()
    }
}

/// `count` distinct indices below `n` when possible, else with replacement.
fn draw_indices(n: usize, count: usize, rng: &mut RngStream) -> Vec<usize> {
    if count <= n {
        index::sample(rng, n, count).into_vec()
    } else {
        (0..count).map(|_| (rng.next_u64() % n as u64) as usize).collect()
    }
}

struct Draw {
    paired: Vec<usize>,
    real: Matrix,
    latents: Matrix,
}

fn draw_batch(
    dataset: &PointCloud,
    codes: &PointCloud,
    sampler: &dyn LatentSampler,
    batch_size: usize,
    ratio: FakeRatio,
    rng: &mut RngStream,
) -> Result<Draw> {
    let q = ratio.paired(batch_size)?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if codes.len() != dataset.len() {
        return Err(Error::SizeMismatch(codes.len(), dataset.len()));
    }
    let paired = draw_indices(dataset.len(), q, rng);
    let others = draw_indices(dataset.len(), batch_size - q, rng);
    let real_rows: Vec<usize> = paired.iter().chain(&others).copied().collect();
    let real = Matrix::from_cloud(&dataset.select(&real_rows));
    let key = rng.next_u64();
    let stream = rng.split(key);
    let generated = sampler.sample_latent(batch_size - q, &stream)?;
    let latents = Matrix::from_cloud(&codes.select(&paired)).vstack(&Matrix::from_cloud(&generated))?;
    Ok(Draw { paired, real, latents })
}

/// One real and one fake batch. The first `batch_size · reconstructed /
/// (generated + reconstructed)` rows of both are paired: `fake[k]` is the
/// generator applied to the code of `real[k]`.
pub fn compose_batches(
    dataset: &PointCloud,
    codes: &PointCloud,
    sampler: &dyn LatentSampler,
    generator: &Mlp,
    batch_size: usize,
    ratio: FakeRatio,
    rng: &mut RngStream,
) -> Result<ComposedBatch> {
    let d = draw_batch(dataset, codes, sampler, batch_size, ratio, rng)?;
    let fake = generator.predict(&d.latents)?;
    let triples = d
        .paired
        .iter()
        .enumerate()
        .map(|(k, &i)| PairedTriple {
            index: i,
            x: d.real.row(k).to_vec(),
            z: d.latents.row(k).to_vec(),
            reconstruction: fake.row(k).to_vec(),
        })
        .collect();
    Ok(ComposedBatch { real: d.real, fake, latents: d.latents, triples })
}

// ---------------------------------------------------------------------------
// GAN phase

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub lr_g: f64,
    /// `lr_D = lr_G / ratio`.
    pub lr_ratio: f64,
    /// Generator updates per discriminator update.
    pub t_inner: usize,
    pub beta: f64,
    /// Feature weight of every encoder layer but the last.
    pub alpha_hidden: f64,
    /// Feature weight of the last encoder layer; `None` means
    /// `2 / mean ‖z‖` over the training codes.
    pub alpha_last: Option<f64>,
    pub batch_size: usize,
    pub epochs: usize,
    pub fake_ratio: FakeRatio,
    pub disc_hidden: Vec<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            lr_g: 2e-5,
            lr_ratio: 15.0,
            t_inner: 3,
            beta: 2000.0,
            alpha_hidden: 0.06,
            alpha_last: None,
            batch_size: 64,
            epochs: 500,
            fake_ratio: FakeRatio::default(),
            disc_hidden: vec![64, 64],
        }
    }
}

impl TrainSchedule {
    pub fn lr_d(&self) -> f64 {
        self.lr_g / self.lr_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_ratio > 1.0) {
            return Err(Error::invalid("learning-rate ratio must exceed 1"));
        }
        if self.t_inner == 0 {
            return Err(Error::invalid("at least one generator step per discriminator step"));
        }
        if !(self.beta >= 0.0) || !(self.lr_g > 0.0) {
            return Err(Error::invalid("β must be non-negative and lr_G positive"));
        }
        if self.disc_hidden.contains(&0) {
            return Err(Error::invalid("discriminator widths must be positive"));
        }
        self.fake_ratio.paired(self.batch_size)?;
        Ok(())
    }

    /// Per-layer feature weights for an encoder of `depth` layers.
    pub fn alpha(&self, depth: usize, codes: &PointCloud) -> Result<Vec<f64>> {
        let last = match self.alpha_last {
            Some(a) => a,
            None => {
                if codes.is_empty() {
                    return Err(Error::Empty("latent codes"));
                }
                let norm = codes.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>()
                    / codes.len() as f64;
                if !(norm > 0.0) {
                    return Err(Error::invalid("latent codes have zero mean norm"));
                }
                2.0 / norm
            }
        };
        let mut a = vec![self.alpha_hidden; depth];
        a[depth - 1] = last;
        Ok(a)
    }

    pub fn disc_specs(&self, data_dim: usize) -> Vec<LayerSpec> {
        let mut w = vec![data_dim];
        w.extend(&self.disc_hidden);
        w.push(1);
        chain(&w, Activation::LeakyRelu, Activation::Sigmoid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub generator: Mlp,
    pub discriminator: Mlp,
    /// Feature extractor; never updated.
    pub frozen_encoder: Mlp,
}

impl GanModel {
    /// Generator and encoder copied from `ae`, fresh discriminator.
    pub fn warm_start(ae: &Autoencoder, disc_specs: &[LayerSpec], rng: &RngStream) -> Result<Self> {
        let discriminator = Mlp::init(disc_specs, rng)?;
        if discriminator.in_dim() != ae.data_dim() {
            return Err(Error::DimensionMismatch { expected: ae.data_dim(), got: discriminator.in_dim() });
        }
        check_disc(&discriminator)?;
        Ok(GanModel {
            generator: ae.decoder.clone(),
            discriminator,
            frozen_encoder: ae.encoder.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Epoch means of every loss component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    #[serde(rename = "L_img")]
    pub l_img: f64,
    #[serde(rename = "L_feat")]
    pub l_feat: f64,
    #[serde(rename = "L_adv_disc")]
    pub l_adv_disc: f64,
    #[serde(rename = "L_adv_gen")]
    pub l_adv_gen: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

pub const HISTORY_COLUMNS: [&str; 7] =
    ["epoch", "L_img", "L_feat", "L_adv_disc", "L_adv_gen", "d_real_mean", "d_fake_mean"];

impl HistoryRow {
    fn values(&self) -> [f64; 6] {
        [self.l_img, self.l_feat, self.l_adv_disc, self.l_adv_gen, self.d_real_mean, self.d_fake_mean]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

pub fn write_history_csv<W: Write>(rows: &[HistoryRow], mut w: W) -> Result<()> {
    writeln!(w, "{}", HISTORY_COLUMNS.join(","))?;
    for r in rows {
        let v = r.values();
        writeln!(w, "{},{},{},{},{},{},{}", r.epoch, v[0], v[1], v[2], v[3], v[4], v[5])?;
    }
    Ok(())
}

pub fn read_history_csv<R: BufRead>(r: R) -> Result<Vec<HistoryRow>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        let at = offset;
        offset += line.len() + 1;
        if k == 0 {
            if line.trim() != HISTORY_COLUMNS.join(",") {
                return Err(Error::Format { offset: 0, msg: "unexpected history header".into() });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != HISTORY_COLUMNS.len() {
            return Err(Error::Format { offset: at, msg: format!("expected 7 fields, got {}", f.len()) });
        }
        let num = |s: &str| {
            s.trim().parse::<f64>().map_err(|e| Error::Format { offset: at, msg: e.to_string() })
        };
        rows.push(HistoryRow {
            epoch: f[0].trim().parse().map_err(|_| Error::Format { offset: at, msg: "bad epoch".into() })?,
            l_img: num(f[1])?,
            l_feat: num(f[2])?,
            l_adv_disc: num(f[3])?,
            l_adv_gen: num(f[4])?,
            d_real_mean: num(f[5])?,
            d_fake_mean: num(f[6])?,
        });
    }
    Ok(rows)
}

/// Quantities of one generator update.
struct GenStep {
    l_img: f64,
    l_feat: f64,
    gen_loss: f64,
}

struct Gan<'a> {
    dataset: &'a PointCloud,
    codes: PointCloud,
    sampler: &'a dyn LatentSampler,
    schedule: &'a TrainSchedule,
    alpha: Vec<f64>,
}

impl Gan<'_> {
    fn disc_step(&self, model: &mut GanModel, state: &mut AdamState, rng: &mut RngStream) -> Result<AdversarialLosses> {
        let s = self.schedule;
        let d = draw_batch(self.dataset, &self.codes, self.sampler, s.batch_size, s.fake_ratio, rng)?;
        let fake = model.generator.predict(&d.latents)?;
        let (losses, grads) = discriminator_objective(&model.discriminator, &d.real, &fake)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("discriminator gradient".into()));
        }
        adam_step(&mut model.discriminator, state, &grads)?;
        Ok(losses)
    }

    fn gen_step(&self, model: &mut GanModel, state: &mut AdamState, rng: &mut RngStream) -> Result<GenStep> {
        let s = self.schedule;
        let d = draw_batch(self.dataset, &self.codes, self.sampler, s.batch_size, s.fake_ratio, rng)?;
        let (step, grads) = objective(model, &d.real, &d.latents, d.paired.len(), s.beta, &self.alpha)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite("generator gradient".into()));
        }
        adam_step(&mut model.generator, state, &grads)?;
        Ok(step)
    }
}

fn objective(
    model: &GanModel,
    real: &Matrix,
    latents: &Matrix,
    q: usize,
    beta: f64,
    alpha: &[f64],
) -> Result<(GenStep, GradientBundle)> {
    let (fake, gtrace) = model.generator.forward(latents)?;
    let (gen_loss, mut up) = generator_adversarial_grad(&model.discriminator, &fake)?;
    let x = real.slice_rows(0, q);
    let recon = fake.slice_rows(0, q);
    let (l_img, g_img) = content_term(&x, &recon);
    let (l_feat, g_feat) = feature_term(&model.frozen_encoder, &x, &recon, alpha)?;
    for (k, u) in up.as_mut_slice()[..q * fake.cols()].iter_mut().enumerate() {
        *u += beta * g_img.as_slice()[k] + g_feat.as_slice()[k];
    }
    let grads = model.generator.backward(&gtrace, &up)?;
    Ok((GenStep { l_img, l_feat, gen_loss }, grads))
}

/// Adversarial losses and the gradient of `disc_loss` with respect to the
/// discriminator parameters.
pub fn discriminator_objective(disc: &Mlp, real: &Matrix, fake: &Matrix) -> Result<(AdversarialLosses, GradientBundle)> {
    if real.rows() == 0 || fake.rows() == 0 {
        return Err(Error::Empty("adversarial batch"));
    }
    check_disc(disc)?;
    let (pr, tr) = disc.forward(real)?;
    let (pf, tf) = disc.forward(fake)?;
    let (pr, pf) = (pr.into_vec(), pf.into_vec());
    let (nr, nf) = (pr.len() as f64, pf.len() as f64);
    let up_r: Vec<f64> = pr.iter().map(|&p| -clamped_ln_slope(p) / nr).collect();
    // d/dp −ln(1 − p) = 1/(1 − p)
    let up_f: Vec<f64> = pf.iter().map(|&p| clamped_ln_slope(1.0 - p) / nf).collect();
    let mut grads = disc.backward(&tr, &Matrix::new(pr.len(), 1, up_r)?)?;
    grads.accumulate(&disc.backward(&tf, &Matrix::new(pf.len(), 1, up_f)?)?, 1.0);
    let losses = AdversarialLosses {
        disc_loss: -pr.iter().map(|&p| clamped_ln(p)).sum::<f64>() / nr
            - pf.iter().map(|&p| clamped_ln(1.0 - p)).sum::<f64>() / nf,
        gen_loss: -pf.iter().map(|&p| clamped_ln(p)).sum::<f64>() / nf,
        d_real_mean: mean(&pr),
        d_fake_mean: mean(&pf),
    };
    Ok((losses, grads))
}

/// Non-saturating generator loss on `fake` and its gradient with respect to
/// the fake rows.
fn generator_adversarial_grad(disc: &Mlp, fake: &Matrix) -> Result<(f64, Matrix)> {
    let (p, trace) = disc.forward(fake)?;
    let p = p.into_vec();
    let n = p.len() as f64;
    let up: Vec<f64> = p.iter().map(|&v| -clamped_ln_slope(v) / n).collect();
    let loss = -p.iter().map(|&v| clamped_ln(v)).sum::<f64>() / n;
    Ok((loss, disc.backward(&trace, &Matrix::new(p.len(), 1, up)?)?.input))
}

/// Generator loss `gen_adv + L_feat + β L_img` on a composed batch, as the
/// training loop evaluates it, together with its gradient with respect to
/// every generator parameter.
pub fn generator_objective(
    model: &GanModel,
    batch: &ComposedBatch,
    beta: f64,
    alpha: &[f64],
) -> Result<(f64, GradientBundle)> {
    let (s, grads) = objective(model, &batch.real, &batch.latents, batch.paired(), beta, alpha)?;
    Ok((s.gen_loss + s.l_feat + beta * s.l_img, grads))
}

/// [`train_gan_with`] without a per-epoch hook.
pub fn train_gan(
    ae: &Autoencoder,
    sampler: &dyn LatentSampler,
    dataset: &PointCloud,
    schedule: &TrainSchedule,
    rng: &RngStream,
) -> Result<(GanModel, Vec<HistoryRow>)> {
    train_gan_with(ae, sampler, dataset, schedule, rng, |_, _| Ok(()))
}

/// Alternates one discriminator update with `t_inner` generator updates,
/// each on a freshly composed batch; an epoch is `⌈n / batch⌉`
/// discriminator updates. `on_epoch` sees the model after every epoch,
/// so a caller can checkpoint; on divergence the error is returned and the
/// last checkpoint is whatever `on_epoch` last stored.
pub fn train_gan_with<F>(
    ae: &Autoencoder,
    sampler: &dyn LatentSampler,
    dataset: &PointCloud,
    schedule: &TrainSchedule,
    rng: &RngStream,
    mut on_epoch: F,
) -> Result<(GanModel, Vec<HistoryRow>)>
where
    F: FnMut(&GanModel, &HistoryRow) -> Result<()>,
{
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    if sampler.latent_dim() != ae.latent_dim() {
        return Err(Error::DimensionMismatch { expected: ae.latent_dim(), got: sampler.latent_dim() });
    }
    let codes = encode_dataset(ae, dataset)?;
    let gan = Gan {
        dataset,
        alpha: schedule.alpha(ae.encoder.depth(), &codes)?,
        codes,
        sampler,
        schedule,
    };
    let mut model = GanModel::warm_start(ae, &schedule.disc_specs(ae.data_dim()), &rng.split_named("discriminator"))?;
    let mut g_state = AdamState::new(&model.generator, schedule.lr_g);
    let mut d_state = AdamState::new(&model.discriminator, schedule.lr_d());
    let mut stream = rng.split_named("batches");
    let steps = dataset.len().div_ceil(schedule.batch_size);
    let mut history = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let mut sums = [0.0; 6];
        let diverged = |what: String| Error::Diverged { epoch, what };
        for _ in 0..steps {
            let adv = gan.disc_step(&mut model, &mut d_state, &mut stream).map_err(|e| diverged(e.to_string()))?;
            sums[2] += adv.disc_loss;
            sums[4] += adv.d_real_mean;
            sums[5] += adv.d_fake_mean;
            for _ in 0..schedule.t_inner {
                let g = gan.gen_step(&mut model, &mut g_state, &mut stream).map_err(|e| diverged(e.to_string()))?;
                sums[0] += g.l_img;
                sums[1] += g.l_feat;
                sums[3] += g.gen_loss;
            }
        }
        let (nd, ng) = (steps as f64, (steps * schedule.t_inner) as f64);
        let row = HistoryRow {
            epoch,
            l_img: sums[0] / ng,
            l_feat: sums[1] / ng,
            l_adv_disc: sums[2] / nd,
            l_adv_gen: sums[3] / ng,
            d_real_mean: sums[4] / nd,
            d_fake_mean: sums[5] / nd,
        };
        if !row.is_finite() || !model.generator.is_finite() || !model.discriminator.is_finite() {
            return Err(diverged(format!("non-finite losses {:?}", row.values())));
        }
        on_epoch(&model, &row)?;
        history.push(row);
    }
    Ok((model, history))
}

/// `g(T̃(w))` for `count` uniform draws `w`.
pub fn generate(model: &GanModel, sampler: &dyn LatentSampler, count: usize, rng: &RngStream) -> Result<PointCloud> {
    decode_samples(&model.generator, sampler, count, rng)
}

/// Pushes `count` latent samples through any decoder-shaped network; with
/// the autoencoder's decoder this is the plain AE-OT output.
pub fn decode_samples(net: &Mlp, sampler: &dyn LatentSampler, count: usize, rng: &RngStream) -> Result<PointCloud> {
    if count == 0 {
        return PointCloud::new(net.out_dim());
    }
    predict_chunked(net, &sampler.sample_latent(count, rng)?)
}
