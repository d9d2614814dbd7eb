use crate::channel::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Layer, Tensor};

/// Inputs and labels stacked along the batch axis, `[N, 2, n_cc, n_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub inputs: Tensor<f32>,
    pub labels: Tensor<f32>,
}

impl Pairs {
    pub fn new(inputs: Tensor<f32>, labels: Tensor<f32>) -> Result<Self> {
        if inputs.shape() != labels.shape() || inputs.rank() != 4 {
            return Err(Error::dim("training pairs", inputs.shape(), labels.shape()));
        }
        Ok(Pairs { inputs, labels })
    }

    /// Noisy inputs and clean labels of `ds`, checked against `cfg`.
    pub fn from_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<Self> {
        check_dataset(ds, cfg)?;
        let inputs: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.input).collect();
        let labels: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.label).collect();
        Pairs::new(Tensor::stack(&inputs)?, Tensor::stack(&labels)?)
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs and labels of the listed samples, in order.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((gather(&self.inputs, idx)?, gather(&self.labels, idx)?))
    }

    /// The same labels with inputs replaced by `net`'s inference output.
    pub fn map_inputs(&self, net: &dyn Layer<f32>, chunk: usize) -> Result<Self> {
        Pairs::new(infer_batched(net, &self.inputs, chunk)?, self.labels.clone())
    }
}

/// Fails with a configuration error if the dataset images do not match the
/// model dimensions.
pub fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Config("dataset has no samples".into()));
    }
    let (n_cc, n_t) = (ds.params.n_cc, ds.params.n_t);
    if (n_cc, n_t) != (cfg.n_cc, cfg.n_t) {
        return Err(Error::Config(format!(
            "dataset images are {n_cc}x{n_t} but the model expects {}x{}",
            cfg.n_cc, cfg.n_t
        )));
    }
    Ok(())
}

pub fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let n = t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * t.len() / n.max(1));
    for &i in idx {
        if i >= n {
            return Err(Error::Parameter(format!("sample index {i} out of range for {n} samples")));
        }
        data.extend_from_slice(t.sample(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data)
}

/// Inference over the leading axis in chunks of at most `chunk` samples.
pub fn infer_batched(net: &dyn Layer<f32>, inputs: &Tensor<f32>, chunk: usize) -> Result<Tensor<f32>> {
    let n = inputs.shape()[0];
    let chunk = chunk.max(1);
    let mut data = Vec::new();
    let mut shape = None;
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let y = net.infer(&gather(inputs, &idx)?)?;
        shape.get_or_insert_with(|| y.shape().to_vec());
        data.extend_from_slice(y.data());
    }
    let mut shape = shape.ok_or_else(|| Error::Parameter("no samples to infer".into()))?;
    shape[0] = n;
    Tensor::new(&shape, data)
}
