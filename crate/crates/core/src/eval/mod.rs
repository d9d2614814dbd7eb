//! NMSE on the physical scale, CNR and compression-ratio sweeps, and the
//! results CSV.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use crate::channel::{denormalize, Dataset};
use crate::error::{Error, Result};
use crate::model::{CompressionRatio, ModelConfig};
use crate::tensor::{Layer, Tensor};
use crate::train::{infer_batched, to_db, Pairs};

/// Reported in place of `-inf` dB for an exact reconstruction.
pub const NMSE_DB_FLOOR: f64 = -300.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nmse {
    /// Mean over samples of `||H_de - H_s||^2 / ||H_s||^2`.
    pub ratio: f64,
    pub db: f64,
    /// Set when `ratio` is zero and `db` is [`NMSE_DB_FLOOR`].
    pub floored: bool,
}

impl Nmse {
    pub fn from_ratio(ratio: f64) -> Self {
        if ratio > 0.0 {
            Nmse {
                ratio,
                db: to_db(ratio),
                floored: false,
            }
        } else {
            Nmse {
                ratio,
                db: NMSE_DB_FLOOR,
                floored: true,
            }
        }
    }
}

/// Per-sample error ratios of normalized reconstructions `pred` against
/// `label`, each sample first mapped back to the physical scale.
pub fn sample_ratios(pred: &Tensor<f32>, label: &Tensor<f32>, scales: &[f32]) -> Result<Vec<f64>> {
    if pred.shape() != label.shape() || pred.rank() != 4 {
        return Err(Error::dim("nmse", pred.shape(), label.shape()));
    }
    let b = pred.shape()[0];
    if scales.len() != b {
        return Err(Error::dim("nmse scales", &[scales.len()], &[b]));
    }
    let per = &pred.shape()[1..];
    (0..b)
        .map(|i| {
            let p = denormalize(&Tensor::new(per, pred.sample(i).to_vec())?, scales[i])?;
            let l = denormalize(&Tensor::new(per, label.sample(i).to_vec())?, scales[i])?;
            let energy = l.energy();
            if energy == 0.0 {
                return Err(Error::DegenerateSample(format!("label {i} has zero energy")));
            }
            let err: f64 = p.data().iter().zip(l.data()).map(|(a, b)| (a - b).norm_sqr()).sum();
            Ok(err / energy)
        })
        .collect()
}

pub fn nmse(pred: &Tensor<f32>, label: &Tensor<f32>, scales: &[f32]) -> Result<Nmse> {
    let r = sample_ratios(pred, label, scales)?;
    Ok(Nmse::from_ratio(r.iter().sum::<f64>() / r.len() as f64))
}

/// Something that maps noisy images to reconstructions.
pub struct Model<'a> {
    pub name: String,
    pub gamma: CompressionRatio,
    /// `None` is the identity: the noisy input is the reconstruction.
    pub net: Option<&'a dyn Layer<f32>>,
    pub cfg: Option<&'a ModelConfig>,
}

impl<'a> Model<'a> {
    pub fn network(name: &str, cfg: &'a ModelConfig, net: &'a dyn Layer<f32>) -> Self {
        Model {
            name: name.to_string(),
            gamma: cfg.gamma,
            net: Some(net),
            cfg: Some(cfg),
        }
    }

    pub fn identity() -> Self {
        Model {
            name: "identity".into(),
            gamma: CompressionRatio::new(1, 1).expect("1/1"),
            net: None,
            cfg: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub model: String,
    pub gamma: CompressionRatio,
    pub cnr_db: f64,
    pub nmse_db: f64,
    pub n_samples: usize,
}

/// Runs `model` on every sample of `ds` in inference mode.
pub fn evaluate_with_ratios(model: &Model, ds: &Dataset, chunk: usize) -> Result<(EvalResult, Vec<f64>)> {
    if let Some(cfg) = model.cfg {
        let (h, w) = (ds.params.n_cc, ds.params.n_t);
        if (h, w) != (cfg.n_cc, cfg.n_t) {
            return Err(Error::dim("evaluate", &[2, h, w], &[2, cfg.n_cc, cfg.n_t]));
        }
    }
    let inputs: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.input).collect();
    let labels: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.label).collect();
    let pairs = Pairs::new(Tensor::stack(&inputs)?, Tensor::stack(&labels)?)?;
    let pred = match model.net {
        Some(net) => infer_batched(net, &pairs.inputs, chunk)?,
        None => pairs.inputs.clone(),
    };
    let scales: Vec<f32> = ds.samples.iter().map(|s| s.scale).collect();
    let ratios = sample_ratios(&pred, &pairs.labels, &scales)?;
    let n = Nmse::from_ratio(ratios.iter().sum::<f64>() / ratios.len() as f64);
    let result = EvalResult {
        model: model.name.clone(),
        gamma: model.gamma,
        cnr_db: ds.cnr_db,
        nmse_db: n.db,
        n_samples: ds.len(),
    };
    Ok((result, ratios))
}

pub fn evaluate(model: &Model, ds: &Dataset, chunk: usize) -> Result<EvalResult> {
    evaluate_with_ratios(model, ds, chunk).map(|r| r.0)
}

/// One result per (model, dataset) pair, in CSV order.
pub fn evaluate_sweep(models: &[Model], datasets: &[Dataset], chunk: usize) -> Result<Vec<EvalResult>> {
    let mut out = Vec::with_capacity(models.len() * datasets.len());
    for m in models {
        for ds in datasets {
            out.push(evaluate(m, ds, chunk)?);
        }
    }
    sort_results(&mut out);
    Ok(out)
}

/// Model name, then compression ratio descending, then CNR ascending.
pub fn sort_results(results: &mut [EvalResult]) {
    results.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(b.gamma.cmp(&a.gamma))
            .then(a.cnr_db.partial_cmp(&b.cnr_db).unwrap_or(Ordering::Equal))
    });
}

pub const RESULTS_HEADER: &str = "model,gamma,cnr_db,nmse_db,n_samples";

/// Values print in shortest round-trip form.
pub fn results_csv(results: &[EvalResult]) -> String {
    let mut sorted = results.to_vec();
    sort_results(&mut sorted);
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in &sorted {
        s.push_str(&format!("{},{},{},{},{}\n", r.model, r.gamma, r.cnr_db, r.nmse_db, r.n_samples));
    }
    s
}

pub fn emit_csv(results: &[EvalResult], path: &Path) -> Result<()> {
    fs::write(path, results_csv(results)).map_err(|e| Error::io(path, e))
}

pub fn parse_results(text: &str) -> Result<Vec<EvalResult>> {
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Format {
            offset: 0,
            reason: format!("results must start with {RESULTS_HEADER:?}"),
        });
    }
    let mut offset = RESULTS_HEADER.len() + 1;
    let mut out = Vec::new();
    for line in lines {
        let bad = |why: String| Error::Format {
            offset: offset as u64,
            reason: format!("{why} in results row {line:?}"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields".into()));
        }
        out.push(EvalResult {
            model: f[0].to_string(),
            gamma: f[1].parse().map_err(|e: Error| bad(e.to_string()))?,
            cnr_db: f[2].parse().map_err(|_| bad("bad cnr_db".into()))?,
            nmse_db: f[3].parse().map_err(|_| bad("bad nmse_db".into()))?,
            n_samples: f[4].parse().map_err(|_| bad("bad n_samples".into()))?,
        });
        offset += line.len() + 1;
    }
    Ok(out)
}

/// `sample_idx,nmse_db` rows for distribution analysis.
pub fn sample_dump_csv(ratios: &[f64]) -> String {
    let mut s = String::from("sample_idx,nmse_db\n");
    for (i, &r) in ratios.iter().enumerate() {
        s.push_str(&format!("{i},{}\n", Nmse::from_ratio(r).db));
    }
    s
}
