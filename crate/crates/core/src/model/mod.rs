//! Disentangled convolutional autoencoder.
//!
//! Two encoder paths (shape, appearance) each compress the input to a
//! `H/16 × W/16` bottleneck; their outputs are concatenated along channels and
//! decoded by one decoder. Decoder leaves are split by channel group into a
//! shape half and an appearance half, so θ_S and θ_A partition the whole model.
//! The baseline autoencoder has a single encoder path and an unsplit decoder,
//! all tagged as shape.

pub mod checkpoint;
pub mod params;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nn::{Cache, Layer, Mode, NormKind, ParamRef, Sequential, StatUpdate, LEAKY_SLOPE};
use crate::phantom::ScanSlice;
use crate::scalar::Scalar;
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

pub use params::{Gradients, Leaf, LeafKind, ModelParams, PathTag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub base_filters: usize,
    pub max_filters: usize,
    pub bottleneck_channels: usize,
    pub dropout: f64,
    pub norm_kind: NormKind,
    /// Group norm only; the effective group count is `gcd(channels, group_count)`.
    pub group_count: usize,
    pub input_size: (usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_filters: 32,
            max_filters: 128,
            bottleneck_channels: 128,
            dropout: 0.2,
            norm_kind: NormKind::Batch,
            group_count: 8,
            input_size: (128, 128),
        }
    }
}

fn round_up(v: f64, multiple: usize) -> usize {
    ((v / multiple as f64).ceil() as usize * multiple).max(multiple)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl ArchConfig {
    pub fn validate(&self, disentangled: bool) -> Result<()> {
        let (h, w) = self.input_size;
        ensure!(
            h > 0 && w > 0 && h % 16 == 0 && w % 16 == 0,
            Config,
            "input size {h}x{w} must be divisible by 16"
        );
        ensure!(
            self.base_filters > 0 && self.max_filters >= self.base_filters,
            Config,
            "filters must satisfy 0 < base_filters <= max_filters"
        );
        ensure!(
            self.bottleneck_channels > 0,
            Config,
            "bottleneck_channels must be positive"
        );
        ensure!(
            !disentangled || self.bottleneck_channels.is_multiple_of(2),
            Config,
            "a disentangled model needs an even bottleneck, got {}",
            self.bottleneck_channels
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout),
            Config,
            "dropout must lie in [0, 1), got {}",
            self.dropout
        );
        ensure!(self.group_count > 0, Config, "group_count must be positive");
        Ok(())
    }

    /// Baseline encoder widths: interpolated from `base_filters` to
    /// `max_filters`, ending at the bottleneck width.
    pub fn encoder_widths(&self) -> [usize; 4] {
        let (b, m) = (self.base_filters, self.max_filters);
        [b, b + (m - b) / 3, b + 2 * (m - b) / 3, self.bottleneck_channels]
    }

    /// Widths of one disentangled encoder path. Interior widths are scaled by
    /// 1/√2 so two paths together hold about as many weights as one baseline
    /// encoder; the last stage emits half the bottleneck.
    pub fn path_widths(&self) -> [usize; 4] {
        let e = self.encoder_widths();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        [
            round_up(e[0] as f64 * s, 4),
            round_up(e[1] as f64 * s, 4),
            round_up(e[2] as f64 * s, 4),
            self.bottleneck_channels / 2,
        ]
    }

    pub fn decoder_widths(&self) -> [usize; 4] {
        let e = self.encoder_widths();
        let even = |v: usize| v.div_ceil(2) * 2;
        [even(e[2]), even(e[1]), even(e[0]), even((e[0] / 2).max(2))]
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.input_size.0 / 16, self.input_size.1 / 16)
    }

    /// (C_S, C_A) for the given model kind.
    pub fn latent_channels(&self, disentangled: bool) -> (usize, usize) {
        if disentangled {
            (self.bottleneck_channels / 2, self.bottleneck_channels / 2)
        } else {
            (self.bottleneck_channels, 0)
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Glorot { fan_in: usize },
    Const(f64),
}

struct LeafSpec {
    name: String,
    path: PathTag,
    kind: LeafKind,
    dims: Vec<usize>,
    init: Init,
}

#[derive(Default)]
struct Builder {
    specs: Vec<LeafSpec>,
}

impl Builder {
    fn add(&mut self, name: String, path: PathTag, kind: LeafKind, dims: Vec<usize>, init: Init) -> usize {
        self.specs.push(LeafSpec {
            name,
            path,
            kind,
            dims,
            init,
        });
        self.specs.len() - 1
    }

    /// One flat parameter split into tagged channel groups.
    fn split(&mut self, name: &str, parts: &[(PathTag, Vec<usize>)], kind: LeafKind, init: Init) -> ParamRef {
        let ids = parts
            .iter()
            .map(|(tag, dims)| {
                let full = if parts.len() == 1 {
                    name.to_string()
                } else {
                    format!("{name}.{}", tag_suffix(*tag))
                };
                self.add(full, *tag, kind, dims.clone(), init)
            })
            .collect();
        ParamRef(ids)
    }

    fn norm(&mut self, prefix: &str, parts: &[(PathTag, usize)], arch: &ArchConfig) -> Layer {
        let channels: usize = parts.iter().map(|p| p.1).sum();
        let dims: Vec<(PathTag, Vec<usize>)> = parts.iter().map(|&(t, c)| (t, vec![c])).collect();
        let scale = self.split(&format!("{prefix}.scale"), &dims, LeafKind::Learnable, Init::Const(1.0));
        let shift = self.split(&format!("{prefix}.shift"), &dims, LeafKind::Learnable, Init::Const(0.0));
        let running = match arch.norm_kind {
            NormKind::Batch => Some((
                self.split(
                    &format!("{prefix}.running_mean"),
                    &dims,
                    LeafKind::NormStatistic,
                    Init::Const(0.0),
                ),
                self.split(
                    &format!("{prefix}.running_var"),
                    &dims,
                    LeafKind::NormStatistic,
                    Init::Const(1.0),
                ),
            )),
            NormKind::Group => None,
        };
        Layer::Norm {
            scale,
            shift,
            running,
            groups: gcd(channels, arch.group_count),
        }
    }

    fn encoder(&mut self, prefix: &str, tag: PathTag, widths: [usize; 4], arch: &ArchConfig) -> Sequential {
        let mut layers = Vec::new();
        let mut cin = 1;
        for (i, &cout) in widths.iter().enumerate() {
            let weight = self.split(
                &format!("{prefix}.{i}.conv.weight"),
                &[(tag, vec![cout, cin, 3, 3])],
                LeafKind::Learnable,
                Init::He { fan_in: cin * 9 },
            );
            layers.push(Layer::Conv {
                weight,
                bias: None,
                cout,
            });
            layers.push(self.norm(&format!("{prefix}.{i}.norm"), &[(tag, cout)], arch));
            layers.push(Layer::LeakyRelu);
            layers.push(Layer::AvgPool2);
            cin = cout;
        }
        Sequential { layers }
    }

    fn decoder(&mut self, arch: &ArchConfig, disentangled: bool) -> Sequential {
        let halves = |c: usize| -> Vec<(PathTag, usize)> {
            if disentangled {
                vec![(PathTag::DecoderShape, c / 2), (PathTag::DecoderAppearance, c / 2)]
            } else {
                vec![(PathTag::DecoderShape, c)]
            }
        };
        let mut layers = Vec::new();
        let mut cin = arch.bottleneck_channels;
        for (i, &cout) in arch.decoder_widths().iter().enumerate() {
            layers.push(Layer::Upsample2);
            let parts: Vec<(PathTag, Vec<usize>)> =
                halves(cout).into_iter().map(|(t, c)| (t, vec![c, cin, 3, 3])).collect();
            let weight = self.split(
                &format!("dec.{i}.conv.weight"),
                &parts,
                LeafKind::Learnable,
                Init::He { fan_in: cin * 9 },
            );
            layers.push(Layer::Conv {
                weight,
                bias: None,
                cout,
            });
            layers.push(self.norm(&format!("dec.{i}.norm"), &halves(cout), arch));
            layers.push(Layer::LeakyRelu);
            cin = cout;
        }
        // single output channel: split by input-channel halves instead
        let parts: Vec<(PathTag, Vec<usize>)> = halves(cin).into_iter().map(|(t, c)| (t, vec![1, c, 3, 3])).collect();
        let weight = self.split(
            "dec.out.conv.weight",
            &parts,
            LeafKind::Learnable,
            Init::Glorot { fan_in: cin * 9 },
        );
        let bias = self.split(
            "dec.out.conv.bias",
            &[(PathTag::DecoderShape, vec![1])],
            LeafKind::Learnable,
            Init::Const(0.0),
        );
        layers.push(Layer::Conv {
            weight,
            bias: Some(bias),
            cout: 1,
        });
        layers.push(Layer::Sigmoid);
        Sequential { layers }
    }
}

fn tag_suffix(tag: PathTag) -> &'static str {
    match tag {
        PathTag::Shape | PathTag::DecoderShape => "shape",
        PathTag::Appearance | PathTag::DecoderAppearance => "appearance",
    }
}

/// Layer graph of one architecture; holds leaf indices, not values.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    arch: ArchConfig,
    disentangled: bool,
    shape_encoder: Sequential,
    appearance_encoder: Option<Sequential>,
    decoder: Sequential,
}

impl Autoencoder {
    fn build(arch: &ArchConfig, disentangled: bool) -> (Self, Vec<LeafSpec>) {
        let mut b = Builder::default();
        let (shape_encoder, appearance_encoder) = if disentangled {
            let w = arch.path_widths();
            let s = b.encoder("enc_shape", PathTag::Shape, w, arch);
            let a = b.encoder("enc_appearance", PathTag::Appearance, w, arch);
            (s, Some(a))
        } else {
            (b.encoder("enc", PathTag::Shape, arch.encoder_widths(), arch), None)
        };
        let decoder = b.decoder(arch, disentangled);
        (
            Self {
                arch: arch.clone(),
                disentangled,
                shape_encoder,
                appearance_encoder,
                decoder,
            },
            b.specs,
        )
    }

    pub fn new(arch: &ArchConfig, disentangled: bool) -> Result<Self> {
        arch.validate(disentangled)?;
        Ok(Self::build(arch, disentangled).0)
    }

    pub fn for_params<T: Scalar>(params: &ModelParams<T>) -> Result<Self> {
        let (net, specs) = {
            params.arch.validate(params.disentangled)?;
            Self::build(&params.arch, params.disentangled)
        };
        let consistent = specs.len() == params.leaves.len()
            && specs
                .iter()
                .zip(&params.leaves)
                .all(|(s, l)| s.name == l.name && s.dims == l.dims && s.path == l.path && s.kind == l.kind);
        if !consistent {
            return Err(Error::Shape("parameter tree does not match its architecture".into()));
        }
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn is_disentangled(&self) -> bool {
        self.disentangled
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.arch.input_size;
        ensure!(
            x.channels() == 1 && x.height() == h && x.width() == w,
            Shape,
            "input {:?} does not match the configured {h}x{w} single-channel input",
            x.shape
        );
        Ok(())
    }

    fn check_latents<T: Scalar>(&self, z_s: &Tensor<T>, z_a: &Tensor<T>) -> Result<()> {
        let (bh, bw) = self.arch.bottleneck_size();
        let (cs, ca) = self.arch.latent_channels(self.disentangled);
        ensure!(
            z_s.shape[1..] == [cs, bh, bw] && z_a.shape[1..] == [ca, bh, bw] && z_s.batch() == z_a.batch(),
            Shape,
            "latents {:?} / {:?} do not match the bottleneck [{cs}|{ca}, {bh}, {bw}]",
            z_s.shape,
            z_a.shape
        );
        Ok(())
    }

    fn empty_appearance<T: Scalar>(&self, z_s: &Tensor<T>) -> Tensor<T> {
        Tensor::zeros([z_s.batch(), 0, z_s.height(), z_s.width()])
    }

    /// Evaluation-mode encoding of a batch.
    pub fn encode<T: Scalar>(&self, params: &ModelParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(x)?;
        let (z_s, _) = self
            .shape_encoder
            .forward(&params.leaves, x.clone(), Mode::Eval, false, None);
        let z_a = match &self.appearance_encoder {
            Some(enc) => enc.forward(&params.leaves, x.clone(), Mode::Eval, false, None).0,
            None => self.empty_appearance(&z_s),
        };
        Ok((z_s, z_a))
    }

    /// Evaluation-mode decoding; output lies in `[0,1]`.
    pub fn decode<T: Scalar>(&self, params: &ModelParams<T>, z_s: &Tensor<T>, z_a: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latents(z_s, z_a)?;
        let z = Tensor::concat_channels(z_s, z_a)?;
        Ok(self.decoder.forward(&params.leaves, z, Mode::Eval, false, None).0)
    }

    pub fn reconstruct<T: Scalar>(&self, params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (z_s, z_a) = self.encode(params, x)?;
        self.decode(params, &z_s, &z_a)
    }

    /// Forward pass keeping everything needed for [`Autoencoder::backward`].
    ///
    /// `x_gamma`, when given, is re-encoded by the shape path only to produce
    /// z_γS. In `Mode::Train` norm layers use batch statistics (the gamma pass
    /// does not update running statistics) and dropout, seeded by
    /// `dropout_seed`, is applied to the concatenated latent before decoding.
    pub fn forward_train<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        x: &Tensor<T>,
        x_gamma: Option<&Tensor<T>>,
        mode: Mode,
        dropout_seed: u64,
    ) -> Result<TrainPass<T>> {
        self.check_input(x)?;
        if let Some(g) = x_gamma {
            ensure!(
                g.shape == x.shape,
                Shape,
                "gamma-shifted batch {:?} differs from {:?}",
                g.shape,
                x.shape
            );
        }
        let leaves = &params.leaves;
        let mut stats = Vec::new();
        let collect = (mode == Mode::Train).then_some(&mut stats);
        let (z_s, shape_caches) = self.shape_encoder.forward(leaves, x.clone(), mode, true, collect);
        let (z_a, app_caches) = match &self.appearance_encoder {
            Some(enc) => {
                let collect = (mode == Mode::Train).then_some(&mut stats);
                let (z, c) = enc.forward(leaves, x.clone(), mode, true, collect);
                (z, Some(c))
            }
            None => (self.empty_appearance(&z_s), None),
        };
        let (z_gs, gamma_caches) = match x_gamma {
            Some(g) => {
                let (z, c) = self.shape_encoder.forward(leaves, g.clone(), mode, true, None);
                (Some(z), Some(c))
            }
            None => (None, None),
        };
        let mut z = Tensor::concat_channels(&z_s, &z_a)?;
        let dropout_mask = if mode == Mode::Train && self.arch.dropout > 0.0 {
            let p = self.arch.dropout;
            let keep = T::c(1.0 / (1.0 - p));
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let mask: Vec<T> = (0..z.data.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            for (v, &m) in z.data.iter_mut().zip(&mask) {
                *v *= m;
            }
            Some(mask)
        } else {
            None
        };
        let collect = (mode == Mode::Train).then_some(&mut stats);
        let (x_rec, dec_caches) = self.decoder.forward(leaves, z, mode, true, collect);
        Ok(TrainPass {
            x_rec,
            z_s,
            z_a,
            z_gs,
            shape_caches,
            app_caches,
            gamma_caches,
            dec_caches,
            dropout_mask,
            stat_updates: stats,
        })
    }

    /// Gradients of a scalar objective given its gradients w.r.t. the pass outputs.
    pub fn backward<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        pass: &TrainPass<T>,
        grads: &OutputGrads<T>,
    ) -> Result<Gradients<T>> {
        ensure!(
            grads.x_rec.shape == pass.x_rec.shape,
            Shape,
            "reconstruction gradient {:?} does not match {:?}",
            grads.x_rec.shape,
            pass.x_rec.shape
        );
        let leaves = &params.leaves;
        let mut out = Gradients::zeros_like(params);
        let mut g = self
            .decoder
            .backward(leaves, &pass.dec_caches, grads.x_rec.clone(), &mut out.per_leaf);
        if let Some(mask) = &pass.dropout_mask {
            for (v, &m) in g.data.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        let (mut g_s, mut g_a) = g.split_channels(pass.z_s.channels());
        let add = |acc: &mut Tensor<T>, extra: &Option<Tensor<T>>, what: &str| -> Result<()> {
            if let Some(e) = extra {
                ensure!(
                    e.shape == acc.shape,
                    Shape,
                    "{what} gradient {:?} does not match {:?}",
                    e.shape,
                    acc.shape
                );
                for (a, &b) in acc.data.iter_mut().zip(&e.data) {
                    *a += b;
                }
            }
            Ok(())
        };
        add(&mut g_s, &grads.z_s, "z_S")?;
        add(&mut g_a, &grads.z_a, "z_A")?;
        self.shape_encoder
            .backward(leaves, &pass.shape_caches, g_s, &mut out.per_leaf);
        if let (Some(enc), Some(c)) = (&self.appearance_encoder, &pass.app_caches) {
            enc.backward(leaves, c, g_a, &mut out.per_leaf);
        }
        if let Some(gz) = &grads.z_gs {
            let caches = pass
                .gamma_caches
                .as_ref()
                .ok_or_else(|| Error::State("z_γS gradient given but no gamma pass was run".into()))?;
            ensure!(
                Some(gz.shape) == pass.z_gs.as_ref().map(|z| z.shape),
                Shape,
                "z_γS gradient has shape {:?}",
                gz.shape
            );
            self.shape_encoder
                .backward(leaves, caches, gz.clone(), &mut out.per_leaf);
        }
        Ok(out)
    }
}

/// Everything a training-mode forward pass produced.
pub struct TrainPass<T> {
    pub x_rec: Tensor<T>,
    pub z_s: Tensor<T>,
    pub z_a: Tensor<T>,
    pub z_gs: Option<Tensor<T>>,
    shape_caches: Vec<Cache<T>>,
    app_caches: Option<Vec<Cache<T>>>,
    gamma_caches: Option<Vec<Cache<T>>>,
    dec_caches: Vec<Cache<T>>,
    dropout_mask: Option<Vec<T>>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> TrainPass<T> {
    pub fn triple(&self) -> Option<LatentTriple<T>> {
        self.z_gs.as_ref().map(|z_gs| LatentTriple {
            z_s: self.z_s.clone(),
            z_a: self.z_a.clone(),
            z_gs: z_gs.clone(),
        })
    }

    /// Writes the batch-norm running statistics observed in this pass into `params`.
    pub fn commit_running_stats(&self, params: &mut ModelParams<T>) {
        for u in &self.stat_updates {
            u.target.scatter_set(&u.values, &mut params.leaves);
        }
    }
}

/// Gradients of the objective w.r.t. the outputs of a [`TrainPass`].
pub struct OutputGrads<T> {
    pub x_rec: Tensor<T>,
    pub z_s: Option<Tensor<T>>,
    pub z_a: Option<Tensor<T>>,
    pub z_gs: Option<Tensor<T>>,
}

/// Bottleneck embeddings of one batch: shape, appearance, and shape of the
/// gamma-shifted input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTriple<T> {
    pub z_s: Tensor<T>,
    pub z_a: Tensor<T>,
    pub z_gs: Tensor<T>,
}

/// Deterministic initialization of every leaf.
pub fn init_model<T: Scalar>(arch: &ArchConfig, seed: u64, disentangled: bool) -> Result<ModelParams<T>> {
    arch.validate(disentangled)?;
    let (_, specs) = Autoencoder::build(arch, disentangled);
    let slope2 = LEAKY_SLOPE * LEAKY_SLOPE;
    let leaves = specs
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let n: usize = s.dims.iter().product();
            let values = match s.init {
                Init::Const(c) => vec![T::c(c); n],
                Init::He { fan_in } | Init::Glorot { fan_in } => {
                    let std = match s.init {
                        Init::He { .. } => (2.0 / ((1.0 + slope2) * fan_in as f64)).sqrt(),
                        _ => (1.0 / fan_in as f64).sqrt(),
                    };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "init", i as u64));
                    (0..n).map(|_| T::c(normal.sample(&mut rng))).collect()
                }
            };
            Leaf {
                name: s.name,
                path: s.path,
                kind: s.kind,
                dims: s.dims,
                values,
            }
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        disentangled,
        seed,
        leaves,
    })
}

/// Pixelwise `x^gamma` inside the brain mask; masks are carried over unchanged.
pub fn gamma_augment<T: Scalar>(x: &ScanSlice<T>, gamma: T) -> Result<ScanSlice<T>> {
    ensure!(
        gamma > T::zero() && gamma.is_finite(),
        Config,
        "gamma must be positive, got {gamma}"
    );
    let mut out = x.clone();
    for (p, &m) in out.pixels.iter_mut().zip(&x.brain_mask.data) {
        if m {
            *p = p.powf(gamma);
        }
    }
    Ok(out)
}

/// Evaluation-mode encoding of one slice.
pub fn encode<T: Scalar>(params: &ModelParams<T>, x: &ScanSlice<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    Autoencoder::for_params(params)?.encode(params, &x.to_tensor())
}

pub fn decode<T: Scalar>(params: &ModelParams<T>, z_s: &Tensor<T>, z_a: &Tensor<T>) -> Result<Tensor<T>> {
    Autoencoder::for_params(params)?.decode(params, z_s, z_a)
}

/// Reconstruction of the un-shifted slice plus its latent triple, with
/// z_γS taken from `gamma_augment(x, gamma)`.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    x: &ScanSlice<T>,
    gamma: T,
    mode: Mode,
    dropout_seed: u64,
) -> Result<(Tensor<T>, LatentTriple<T>)> {
    let net = Autoencoder::for_params(params)?;
    let shifted = gamma_augment(x, gamma)?.to_tensor();
    let pass = net.forward_train(params, &x.to_tensor(), Some(&shifted), mode, dropout_seed)?;
    let triple = pass.triple().expect("gamma pass was requested");
    Ok((pass.x_rec, triple))
}
