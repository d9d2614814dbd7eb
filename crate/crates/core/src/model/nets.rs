use rand::Rng;

use super::blocks::{delegate_collections, AnciBlock, CompositeUnit, ConvHead, LayerList, BLOCK_FILTERS};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, STREAM_INIT};
use crate::tensor::{Dense, Layer, Parameter, Reshape, Scalar, Tensor};

pub const DENOISER_BLOCKS: usize = 4;
pub const DECODER_BLOCKS: usize = 3;
const STEM_FILTERS: usize = 64;

fn check_image(op: &'static str, x: &Tensor<impl Scalar>, cfg: &ModelConfig) -> Result<()> {
    let want = [2, cfg.n_cc, cfg.n_t];
    match *x.shape() {
        [_, c, h, w] if [c, h, w] == want => Ok(()),
        _ => Err(Error::dim(op, x.shape(), &[0, 2, cfg.n_cc, cfg.n_t])),
    }
}

/// Glorot-uniform weights, zero biases. Values are drawn in `f32` so that
/// `f32` and `f64` networks built from one seed are identical.
pub(crate) fn glorot_init<T: Scalar>(net: &mut dyn Layer<T>, rng: &mut impl Rng) {
    for p in net.parameters_mut() {
        if p.name.ends_with(".weight") {
            let (fan_in, fan_out) = fans(p.value.shape());
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            for v in p.value.data_mut() {
                *v = T::from_f64(rng.random_range(-bound..=bound) as f64);
            }
        } else if p.name.ends_with(".bias") {
            p.value.fill_zero();
        }
    }
}

/// `(fan_in, fan_out)` of a dense `[out, in]` or conv `[f, k, m, m]` weight.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [o, i] => (i, o),
        [f, k, kh, kw] => (k * kh * kw, f * kh * kw),
        _ => (shape.iter().product(), shape.iter().product()),
    }
}

/// Residual denoiser mapping a noisy image to an estimate of the clean one.
#[derive(Clone, Debug)]
pub struct Denoiser<T: Scalar = f32> {
    cfg: ModelConfig,
    c1: CompositeUnit<T>,
    c2: CompositeUnit<T>,
    blocks: Vec<AnciBlock<T>>,
    head: ConvHead<T>,
}

impl<T: Scalar> Denoiser<T> {
    pub const PREFIX: &'static str = "denoiser";

    /// Zero-initialized network.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.leaky_slope;
        let p = Self::PREFIX;
        let mut c1 = CompositeUnit::new(&format!("{p}.c1"), STEM_FILTERS, 2, 7, s)?;
        c1.conv.set_propagate_input_grad(false);
        Ok(Denoiser {
            cfg: cfg.clone(),
            c1,
            c2: CompositeUnit::new(&format!("{p}.c2"), BLOCK_FILTERS, STEM_FILTERS, 1, s)?,
            blocks: (0..DENOISER_BLOCKS)
                .map(|i| AnciBlock::new(&format!("{p}.block{i}"), true, s))
                .collect::<Result<_>>()?,
            head: ConvHead::new(&format!("{p}.head"), 2, BLOCK_FILTERS, 3)?,
        })
    }

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        glorot_init(&mut net, &mut stream_rng(cfg.seed, STREAM_INIT, 0));
        Ok(net)
    }

    /// Whether [`Layer::backward`] computes the gradient with respect to the
    /// network input. Off by default since the input is data.
    pub fn set_input_grad(&mut self, on: bool) {
        self.c1.conv.set_propagate_input_grad(on);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

impl<T: Scalar> Layer<T> for Denoiser<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("denoiser input", x, &self.cfg)?;
        let mut y = self.c2.forward(&self.c1.forward(x)?)?;
        for b in &mut self.blocks {
            y = b.forward(&y)?;
        }
        self.head.forward(&y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("denoiser input", x, &self.cfg)?;
        let mut y = self.c2.infer(&self.c1.infer(x)?)?;
        for b in &self.blocks {
            y = b.infer(&y)?;
        }
        self.head.infer(&y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.c1.backward(&self.c2.backward(&g)?)
    }

    delegate_collections!(c1, c2, blocks, head);
}

/// Compresses an image to an `M`-dimensional codeword.
#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar = f32> {
    cfg: ModelConfig,
    c1: CompositeUnit<T>,
    c2: CompositeUnit<T>,
    block: AnciBlock<T>,
    c3: CompositeUnit<T>,
    flatten: Reshape,
    pub dense: Dense<T>,
}

impl<T: Scalar> Encoder<T> {
    pub const PREFIX: &'static str = "encoder";

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.leaky_slope;
        let p = Self::PREFIX;
        let n = cfg.image_len();
        let mut c1 = CompositeUnit::new(&format!("{p}.c1"), STEM_FILTERS, 2, 7, s)?;
        c1.conv.set_propagate_input_grad(false);
        Ok(Encoder {
            cfg: cfg.clone(),
            c1,
            c2: CompositeUnit::new(&format!("{p}.c2"), BLOCK_FILTERS, STEM_FILTERS, 1, s)?,
            block: AnciBlock::new(&format!("{p}.block0"), false, s)?,
            c3: CompositeUnit::new(&format!("{p}.c3"), 2, BLOCK_FILTERS, 1, s)?,
            flatten: Reshape::new(&[n]),
            dense: Dense::new(&format!("{p}.dense"), n, cfg.codeword_len()?)?,
        })
    }

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        glorot_init(&mut net, &mut stream_rng(cfg.seed, STREAM_INIT, 1));
        Ok(net)
    }

    pub fn set_input_grad(&mut self, on: bool) {
        self.c1.conv.set_propagate_input_grad(on);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

impl<T: Scalar> Layer<T> for Encoder<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("encoder input", x, &self.cfg)?;
        let y = self.c2.forward(&self.c1.forward(x)?)?;
        let y = self.c3.forward(&self.block.forward(&y)?)?;
        self.dense.forward(&self.flatten.forward(&y)?)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_image("encoder input", x, &self.cfg)?;
        let y = self.c2.infer(&self.c1.infer(x)?)?;
        let y = self.c3.infer(&self.block.infer(&y)?)?;
        self.dense.infer(&self.flatten.infer(&y)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Layer::<T>::backward(&mut self.flatten, &self.dense.backward(g)?)?;
        let g = self.block.backward(&self.c3.backward(&g)?)?;
        self.c1.backward(&self.c2.backward(&g)?)
    }

    delegate_collections!(c1, c2, block, c3, dense);
}

/// Maps a codeword back to an image.
#[derive(Clone, Debug)]
pub struct Decoder<T: Scalar = f32> {
    cfg: ModelConfig,
    pub dense: Dense<T>,
    unflatten: Reshape,
    c1: CompositeUnit<T>,
    blocks: Vec<AnciBlock<T>>,
    head: ConvHead<T>,
}

impl<T: Scalar> Decoder<T> {
    pub const PREFIX: &'static str = "decoder";

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let s = cfg.leaky_slope;
        let p = Self::PREFIX;
        Ok(Decoder {
            cfg: cfg.clone(),
            dense: Dense::new(&format!("{p}.dense"), cfg.codeword_len()?, cfg.image_len())?,
            unflatten: Reshape::new(&[2, cfg.n_cc, cfg.n_t]),
            c1: CompositeUnit::new(&format!("{p}.c1"), BLOCK_FILTERS, 2, 1, s)?,
            blocks: (0..DECODER_BLOCKS)
                .map(|i| AnciBlock::new(&format!("{p}.block{i}"), true, s))
                .collect::<Result<_>>()?,
            head: ConvHead::new(&format!("{p}.head"), 2, BLOCK_FILTERS, 3)?,
        })
    }

    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        glorot_init(&mut net, &mut stream_rng(cfg.seed, STREAM_INIT, 2));
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

impl<T: Scalar> Layer<T> for Decoder<T> {
    fn forward(&mut self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.unflatten.forward(&self.dense.forward(s)?)?;
        let mut y = self.c1.forward(&y)?;
        for b in &mut self.blocks {
            y = b.forward(&y)?;
        }
        self.head.forward(&y)
    }

    fn infer(&self, s: &Tensor<T>) -> Result<Tensor<T>> {
        let y = Layer::<T>::infer(&self.unflatten, &self.dense.infer(s)?)?;
        let mut y = self.c1.infer(&y)?;
        for b in &self.blocks {
            y = b.infer(&y)?;
        }
        self.head.infer(&y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(g)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        let g = Layer::<T>::backward(&mut self.unflatten, &self.c1.backward(&g)?)?;
        self.dense.backward(&g)
    }

    delegate_collections!(dense, c1, blocks, head);
}

/// Encoder followed by decoder: the network trained in the second stage.
#[derive(Clone, Debug)]
pub struct Feedback<T: Scalar = f32> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> Feedback<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Feedback {
            encoder: Encoder::new(cfg)?,
            decoder: Decoder::new(cfg)?,
        })
    }
}

impl<T: Scalar> Layer<T> for Feedback<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.encoder.forward(x)?;
        self.decoder.forward(&s)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.decoder.infer(&self.encoder.infer(x)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.decoder.backward(g)?;
        self.encoder.backward(&g)
    }

    delegate_collections!(encoder, decoder);
}

/// Denoiser, encoder and decoder trained as a single network.
#[derive(Clone, Debug)]
pub struct EndToEnd<T: Scalar = f32> {
    pub denoiser: Denoiser<T>,
    pub feedback: Feedback<T>,
}

impl<T: Scalar> EndToEnd<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Self::from_parts(Denoiser::new(cfg)?, Feedback::new(cfg)?)
    }

    pub fn from_parts(denoiser: Denoiser<T>, mut feedback: Feedback<T>) -> Result<Self> {
        // Gradients now flow from the encoder into the denoiser.
        feedback.encoder.set_input_grad(true);
        Ok(EndToEnd { denoiser, feedback })
    }

    pub fn into_parts(mut self) -> (Denoiser<T>, Feedback<T>) {
        self.feedback.encoder.set_input_grad(false);
        (self.denoiser, self.feedback)
    }
}

impl<T: Scalar> Layer<T> for EndToEnd<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.denoiser.forward(x)?;
        self.feedback.forward(&y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.feedback.infer(&self.denoiser.infer(x)?)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.feedback.backward(g)?;
        self.denoiser.backward(&g)
    }

    delegate_collections!(denoiser, feedback);
}
