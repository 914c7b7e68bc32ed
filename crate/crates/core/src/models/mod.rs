//! Encoder, decoder and adversary networks.
//!
//! The encoder maps an image batch `[N, c, h, w]` to codes `[N, d]`; the
//! decoder maps codes back to images in `[0, 1]`; the adversary reads codes
//! only and predicts the confounder (logits for a categorical confounder, a
//! single real value for a continuous one).
//!
//! Parameters live in plain structs. A forward pass binds them onto a
//! [`Tape`] either as trainable parameters or as frozen constants, which is
//! how the training loop keeps one side of the min/max game fixed.

mod checkpoint;

pub use checkpoint::{ModelCheckpoint, OptimizerMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Network geometry. Encoder convolutions use stride 2 and "same" padding,
/// so `image_size` must be divisible by `2^conv_channels.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub image_size: usize,
    pub channels: usize,
    pub conv_channels: Vec<usize>,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    pub latent_dim: usize,
    pub leaky_alpha: f64,
    pub adv_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            conv_channels: vec![16, 32, 64],
            enc_kernel: 3,
            dec_kernel: 4,
            latent_dim: 64,
            leaky_alpha: 0.01,
            adv_hidden: vec![64],
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be non-empty and positive".into());
        }
        if self.channels == 0 || self.latent_dim == 0 || self.adv_hidden.contains(&0) {
            return bad("channels, latent_dim and adv_hidden must be positive".into());
        }
        let down = 1usize << self.conv_channels.len();
        if self.image_size == 0 || self.image_size % down != 0 {
            return bad(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.conv_channels.len()
            ));
        }
        if self.enc_kernel % 2 == 0 {
            return bad("enc_kernel must be odd".into());
        }
        // stride-2 transposed convs double the grid when dec_kernel = 2 + 2·pad
        if self.dec_kernel < 2 || self.dec_kernel % 2 != 0 {
            return bad("dec_kernel must be even and at least 2".into());
        }
        let input = self.channels * self.image_size * self.image_size;
        if self.latent_dim * 8 > input {
            return bad(format!(
                "latent_dim {} is not small relative to input size {input}",
                self.latent_dim
            ));
        }
        if !(self.leaky_alpha >= 0.0 && self.leaky_alpha < 1.0) {
            return bad("leaky_alpha must lie in [0, 1)".into());
        }
        Ok(())
    }

    /// Side of the smallest feature grid.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size >> self.conv_channels.len()
    }

    fn bottleneck_width(&self) -> usize {
        let s = self.bottleneck_size();
        self.conv_channels.last().copied().unwrap_or(1) * s * s
    }

    fn enc_padding(&self) -> usize {
        (self.enc_kernel - 1) / 2
    }

    fn dec_padding(&self) -> usize {
        (self.dec_kernel - 2) / 2
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.image_size, self.image_size]
    }
}

/// What the adversary predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Categorical { classes: usize },
    Continuous,
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Categorical { classes } => *classes,
            HeadKind::Continuous => 1,
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadKind::Categorical { classes } => write!(f, "categorical({classes})"),
            HeadKind::Continuous => write!(f, "continuous"),
        }
    }
}

/// How parameters enter a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Trainable,
    Frozen,
}

/// Weight and bias of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Layer<T> {
    fn he_uniform<R: Rng + ?Sized>(shape: &[usize], bias: usize, fan_in: f64, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in).sqrt();
        Self { weight: Tensor::uniform(shape, -bound, bound, rng), bias: Tensor::zeros(&[bias]) }
    }

    fn zeros(shape: &[usize], bias: usize) -> Self {
        Self { weight: Tensor::zeros(shape), bias: Tensor::zeros(&[bias]) }
    }

    fn bind(&self, tape: &mut Tape<T>, name: &str, mode: Bind) -> (Var, Var) {
        let leaf = |tape: &mut Tape<T>, suffix: &str, t: &Tensor<T>| match mode {
            Bind::Trainable => tape.param(format!("{name}.{suffix}"), t.clone()),
            Bind::Frozen => tape.constant(t.clone()),
        };
        (leaf(tape, "weight", &self.weight), leaf(tape, "bias", &self.bias))
    }

    fn push_named<'a>(&'a self, name: String, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{name}.weight"), &self.weight));
        out.push((format!("{name}.bias"), &self.bias));
    }

    fn push_named_mut<'a>(&'a mut self, name: String, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{name}.weight"), &mut self.weight));
        out.push((format!("{name}.bias"), &mut self.bias));
    }
}

/// Convolutional encoder: strided convs with leaky-ReLU, then a dense map
/// from flattened features to `latent_dim` units.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub convs: Vec<Layer<T>>,
    pub fc: Layer<T>,
}

/// Dense map from codes to the bottleneck grid, then stride-2 transposed
/// convs back to the input geometry, ending in a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams<T> {
    pub fc: Layer<T>,
    pub deconvs: Vec<Layer<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryParams<T> {
    pub hidden: Vec<Layer<T>>,
    pub head: Layer<T>,
    pub kind: HeadKind,
}

/// Encoder/decoder pair plus its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder<T> {
    pub arch: ArchConfig,
    pub encoder: EncoderParams<T>,
    pub decoder: DecoderParams<T>,
}

/// Adversary plus the geometry it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adversary<T> {
    pub arch: ArchConfig,
    pub params: AdversaryParams<T>,
}

/// Images per internal forward chunk when encoding whole datasets.
const ENCODE_CHUNK: usize = 256;

impl<T: Scalar> Autoencoder<T> {
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        Self::build(arch, |shape, bias, fan_in| Layer::he_uniform(shape, bias, fan_in, rng))
    }

    /// All-zero parameters; encodes everything to 0 and decodes to 0.5.
    pub fn zeros(arch: &ArchConfig) -> Result<Self> {
        Self::build(arch, |shape, bias, _| Layer::zeros(shape, bias))
    }

    fn build(arch: &ArchConfig, mut layer: impl FnMut(&[usize], usize, f64) -> Layer<T>) -> Result<Self> {
        arch.validate()?;
        let k = arch.enc_kernel;
        let mut convs = Vec::new();
        let mut cin = arch.channels;
        for &cout in &arch.conv_channels {
            convs.push(layer(&[cout, cin, k, k], cout, (cin * k * k) as f64));
            cin = cout;
        }
        let flat = arch.bottleneck_width();
        let fc = layer(&[arch.latent_dim, flat], arch.latent_dim, flat as f64);

        let dec_fc = layer(&[flat, arch.latent_dim], flat, arch.latent_dim as f64);
        let kd = arch.dec_kernel;
        let mut deconvs = Vec::new();
        let mut chans: Vec<usize> = arch.conv_channels.iter().rev().copied().collect();
        chans.push(arch.channels);
        for pair in chans.windows(2) {
            let (ci, co) = (pair[0], pair[1]);
            // each output sees about ci·k²/stride² inputs
            deconvs.push(layer(&[ci, co, kd, kd], co, (ci * kd * kd) as f64 / 4.0));
        }
        Ok(Self {
            arch: arch.clone(),
            encoder: EncoderParams { convs, fc },
            decoder: DecoderParams { fc: dec_fc, deconvs },
        })
    }

    fn check_images(&self, op: &'static str, x: &Tensor<T>) -> Result<usize> {
        let a = &self.arch;
        match *x.shape() {
            [n, c, h, w] if c == a.channels && h == a.image_size && w == a.image_size => Ok(n),
            ref s => Err(shape_err(
                op,
                format!("expected [N, {}, {s2}, {s2}], got {s:?}", a.channels, s2 = a.image_size),
            )),
        }
    }

    /// Records the encoder on `tape`; returns the `[N, d]` code node.
    pub fn encode_on(&self, tape: &mut Tape<T>, x: Var, mode: Bind) -> Result<Var> {
        self.check_images("encode", tape.value(x))?;
        let a = &self.arch;
        let alpha = T::of(a.leaky_alpha);
        let mut h = x;
        for (i, layer) in self.encoder.convs.iter().enumerate() {
            let (w, b) = layer.bind(tape, &format!("enc.conv{i}"), mode);
            h = tape.conv2d(h, w, b, 2, a.enc_padding())?;
            h = tape.leaky_relu(h, alpha);
        }
        let n = tape.value(h).shape()[0];
        h = tape.reshape(h, &[n, a.bottleneck_width()])?;
        let (w, b) = self.encoder.fc.bind(tape, "enc.fc", mode);
        tape.dense(h, w, b)
    }

    /// Records the decoder on `tape`; returns the `[N, c, h, w]` image node.
    pub fn decode_on(&self, tape: &mut Tape<T>, z: Var, mode: Bind) -> Result<Var> {
        let a = &self.arch;
        let n = match *tape.value(z).shape() {
            [n, d] if d == a.latent_dim => n,
            ref s => {
                return Err(shape_err("decode", format!("expected [N, {}], got {s:?}", a.latent_dim)))
            }
        };
        let alpha = T::of(a.leaky_alpha);
        let (w, b) = self.decoder.fc.bind(tape, "dec.fc", mode);
        let mut h = tape.dense(z, w, b)?;
        h = tape.leaky_relu(h, alpha);
        let s = a.bottleneck_size();
        let top = *a.conv_channels.last().expect("validated non-empty");
        h = tape.reshape(h, &[n, top, s, s])?;
        let last = self.decoder.deconvs.len() - 1;
        for (i, layer) in self.decoder.deconvs.iter().enumerate() {
            let (w, b) = layer.bind(tape, &format!("dec.deconv{i}"), mode);
            h = tape.conv_transpose2d(h, w, b, 2, a.dec_padding())?;
            if i < last {
                h = tape.leaky_relu(h, alpha);
            }
        }
        Ok(tape.sigmoid(h))
    }

    /// Codes for a batch of images, deterministic.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_images("encode", x)?;
        let mut codes = Vec::with_capacity(n * self.arch.latent_dim);
        for start in (0..n).step_by(ENCODE_CHUNK) {
            let idx: Vec<usize> = (start..n.min(start + ENCODE_CHUNK)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x.gather_rows(&idx)?);
            let z = self.encode_on(&mut tape, xv, Bind::Frozen)?;
            codes.extend_from_slice(tape.value(z).data());
        }
        Tensor::new(&[n, self.arch.latent_dim], codes)
    }

    pub fn decode(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.decode_on(&mut tape, zv, Bind::Frozen)?;
        Ok(tape.value(y).clone())
    }

    /// `decode(encode(x))`.
    pub fn reconstruct(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decode(&self.encode(x)?)
    }

    pub fn encoder_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.convs.iter().enumerate() {
            l.push_named(format!("enc.conv{i}"), &mut out);
        }
        self.encoder.fc.push_named("enc.fc".into(), &mut out);
        out
    }

    pub fn decoder_named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.decoder.fc.push_named("dec.fc".into(), &mut out);
        for (i, l) in self.decoder.deconvs.iter().enumerate() {
            l.push_named(format!("dec.deconv{i}"), &mut out);
        }
        out
    }

    /// Every parameter, encoder first.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder_named();
        out.extend(self.decoder_named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.convs.iter_mut().enumerate() {
            l.push_named_mut(format!("enc.conv{i}"), &mut out);
        }
        self.encoder.fc.push_named_mut("enc.fc".into(), &mut out);
        self.decoder.fc.push_named_mut("dec.fc".into(), &mut out);
        for (i, l) in self.decoder.deconvs.iter_mut().enumerate() {
            l.push_named_mut(format!("dec.deconv{i}"), &mut out);
        }
        out
    }
}

impl<T: Scalar> Adversary<T> {
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, kind: HeadKind, rng: &mut R) -> Result<Self> {
        Self::build(arch, kind, |shape, bias, fan_in| Layer::he_uniform(shape, bias, fan_in, rng))
    }

    pub fn zeros(arch: &ArchConfig, kind: HeadKind) -> Result<Self> {
        Self::build(arch, kind, |shape, bias, _| Layer::zeros(shape, bias))
    }

    fn build(
        arch: &ArchConfig,
        kind: HeadKind,
        mut layer: impl FnMut(&[usize], usize, f64) -> Layer<T>,
    ) -> Result<Self> {
        arch.validate()?;
        if let HeadKind::Categorical { classes } = kind {
            if classes < 2 {
                return Err(Error::InvalidConfig("categorical head needs at least 2 classes".into()));
            }
        }
        let mut hidden = Vec::new();
        let mut din = arch.latent_dim;
        for &h in &arch.adv_hidden {
            hidden.push(layer(&[h, din], h, din as f64));
            din = h;
        }
        let out = kind.outputs();
        let head = layer(&[out, din], out, din as f64);
        Ok(Self { arch: arch.clone(), params: AdversaryParams { hidden, head, kind } })
    }

    pub fn kind(&self) -> HeadKind {
        self.params.kind
    }

    /// Records the adversary on `tape`: logits `[N, K]` or predictions `[N, 1]`.
    pub fn forward_on(&self, tape: &mut Tape<T>, z: Var, mode: Bind) -> Result<Var> {
        match *tape.value(z).shape() {
            [_, d] if d == self.arch.latent_dim => {}
            ref s => {
                return Err(shape_err(
                    "adversary_forward",
                    format!("expected [N, {}], got {s:?}", self.arch.latent_dim),
                ))
            }
        }
        let alpha = T::of(self.arch.leaky_alpha);
        let mut h = z;
        for (i, l) in self.params.hidden.iter().enumerate() {
            let (w, b) = l.bind(tape, &format!("adv.fc{i}"), mode);
            h = tape.dense(h, w, b)?;
            h = tape.leaky_relu(h, alpha);
        }
        let (w, b) = self.params.head.bind(tape, "adv.head", mode);
        tape.dense(h, w, b)
    }

    pub fn forward(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.forward_on(&mut tape, zv, Bind::Frozen)?;
        Ok(tape.value(y).clone())
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.params.hidden.iter().enumerate() {
            l.push_named(format!("adv.fc{i}"), &mut out);
        }
        self.params.head.push_named("adv.head".into(), &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.params.hidden.iter_mut().enumerate() {
            l.push_named_mut(format!("adv.fc{i}"), &mut out);
        }
        self.params.head.push_named_mut("adv.head".into(), &mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::cross_entropy_loss;
    use crate::rng::substream;

    #[test]
    fn default_shapes() {
        let arch = ArchConfig::default();
        let cae = Autoencoder::<f32>::init(&arch, &mut substream(0, "init", 0)).unwrap();
        let x = Tensor::zeros(&[4, 3, 32, 32]);
        let z = cae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[4, 64]);
        assert_eq!(cae.decode(&z).unwrap().shape(), &[4, 3, 32, 32]);
    }

    #[test]
    fn supports_128_pixel_patches() {
        let arch = ArchConfig { image_size: 128, ..ArchConfig::default() };
        let cae = Autoencoder::<f32>::init(&arch, &mut substream(0, "init", 0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 128, 128]);
        assert_eq!(cae.reconstruct(&x).unwrap().shape(), &[1, 3, 128, 128]);
    }

    #[test]
    fn zero_params_encode_zero_and_decode_half() {
        let arch = ArchConfig::default();
        let cae = Autoencoder::<f32>::zeros(&arch).unwrap();
        let mut rng = substream(1, "x", 0);
        let x = Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng);
        assert!(cae.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
        let z = Tensor::uniform(&[2, 64], -1.0, 1.0, &mut rng);
        assert!(cae.decode(&z).unwrap().data().iter().all(|&v| v == 0.5));
        let gray = Tensor::full(&[2, 3, 32, 32], 0.5);
        let r = cae.reconstruct(&gray).unwrap();
        assert_eq!(crate::ops::mse_loss(&r, &gray).unwrap(), 0.0);
    }

    #[test]
    fn decoder_output_stays_in_unit_interval() {
        let arch = ArchConfig::default();
        let cae = Autoencoder::<f32>::init(&arch, &mut substream(2, "init", 0)).unwrap();
        let z = Tensor::uniform(&[3, 64], -1e6, 1e6, &mut substream(2, "z", 0));
        let y = cae.decode(&z).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn encoding_is_deterministic() {
        let arch = ArchConfig::default();
        let cae = Autoencoder::<f32>::init(&arch, &mut substream(3, "init", 0)).unwrap();
        let one = Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut substream(3, "x", 0));
        let two = one.gather_rows(&[0, 0]).unwrap();
        let z = cae.encode(&two).unwrap();
        assert_eq!(z.data()[..64], z.data()[64..]);
    }

    #[test]
    fn wrong_geometry_rejected() {
        let cae = Autoencoder::<f32>::zeros(&ArchConfig::default()).unwrap();
        assert!(cae.encode(&Tensor::zeros(&[1, 3, 16, 16])).is_err());
        assert!(cae.decode(&Tensor::zeros(&[1, 63])).is_err());
        let bad = ArchConfig { image_size: 36, ..ArchConfig::default() };
        assert!(bad.validate().is_err());
        let big = ArchConfig { latent_dim: 1024, ..ArchConfig::default() };
        assert!(big.validate().is_err());
    }

    #[test]
    fn adversary_heads() {
        let arch = ArchConfig::default();
        let mut rng = substream(4, "init", 0);
        let z = Tensor::<f32>::uniform(&[8, 64], -1.0, 1.0, &mut rng);
        let cat = Adversary::init(&arch, HeadKind::Categorical { classes: 10 }, &mut rng).unwrap();
        assert_eq!(cat.forward(&z).unwrap().shape(), &[8, 10]);

        let zero = Adversary::<f32>::zeros(&arch, HeadKind::Categorical { classes: 10 }).unwrap();
        let logits = zero.forward(&z).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let ce = cross_entropy_loss(&logits, &[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert!((ce - 10f32.ln()).abs() < 1e-6);

        let cont = Adversary::<f32>::zeros(&arch, HeadKind::Continuous).unwrap();
        let pred = cont.forward(&z).unwrap();
        assert_eq!(pred.shape(), &[8, 1]);
        assert!(pred.data().iter().all(|&v| v == 0.0));
        assert!(cont.forward(&Tensor::zeros(&[8, 32])).is_err());
    }

    #[test]
    fn adversarial_loss_reaches_encoder_and_adversary_only() {
        let arch = ArchConfig::default();
        let mut rng = substream(5, "init", 0);
        let cae = Autoencoder::<f64>::init(&arch, &mut rng).unwrap();
        let adv = Adversary::init(&arch, HeadKind::Categorical { classes: 3 }, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
        let z = cae.encode_on(&mut tape, x, Bind::Trainable).unwrap();
        let _recon = cae.decode_on(&mut tape, z, Bind::Trainable).unwrap();
        let logits = adv.forward_on(&mut tape, z, Bind::Trainable).unwrap();
        let l = tape.cross_entropy(logits, &[0, 2]).unwrap();
        let g = tape.backward(l).unwrap();
        for (name, _) in cae.encoder_named() {
            assert!(g.contains(&name), "{name}");
        }
        for (name, _) in adv.named() {
            assert!(g.contains(&name), "{name}");
        }
        for (name, _) in cae.decoder_named() {
            assert!(!g.contains(&name), "{name}");
        }
    }
}
