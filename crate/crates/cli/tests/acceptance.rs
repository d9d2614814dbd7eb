//! Acceptance suite. Every criterion prints one PASS/FAIL line on stderr,
//! outside the test harness's capture, and the test fails if any did.
//!
//! The desk-scale training criterion trains real networks and takes well
//! over an hour on a single core.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ancinet::channel::{
    from_angular_delay, generate_angular_delay, generate_dataset, to_angular_delay, CMatrix, GeneratorParams,
};
use ancinet::eval::{evaluate, parse_results, Model};
use ancinet::model::{count_params, Checkpoint, reference_total, CompressionRatio, EndToEnd, ModelConfig, REFERENCE_GAP};
use ancinet::rng::stream_rng;
use ancinet::tensor::{gradient_check, Layer, LayerSpec, Tensor};
use ancinet::train::{loss_gradient_check, LossLog};
use ancinet_cli::commands::{DENOISER_CKPT, LOSS_LOG, LOSS_LOG_E2E, RESULTS, VAL_NMSE};
use ancinet_cli::{run, Cli};
use clap::Parser;
use num_complex::Complex64;
use rand::Rng;

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

#[derive(Default)]
struct Tally {
    failed: Vec<String>,
}

impl Tally {
    fn check(&mut self, id: &str, ok: bool, detail: String) {
        report(&format!("[{}] criterion {id}: {detail}", if ok { "PASS" } else { "FAIL" }));
        if !ok {
            self.failed.push(id.to_string());
        }
    }
}

fn cli(args: &[&str]) {
    let mut v = vec!["ancinet"];
    v.extend_from_slice(args);
    run(&Cli::try_parse_from(v).unwrap()).unwrap_or_else(|e| panic!("ancinet {}: {e}", args.join(" ")));
}

fn gamma(s: &str) -> CompressionRatio {
    s.parse().unwrap()
}

fn parameter_counts(t: &mut Tally) {
    let expected = [("1/4", 2_285_494), ("1/16", 712_246), ("1/32", 450_038), ("1/64", 318_934)];
    let published = [("1/4", 2_289_334), ("1/16", 716_086), ("1/32", 453_878), ("1/64", 322_774)];
    let mut ok = true;
    let mut parts = Vec::new();
    for ((g, want), (_, table)) in expected.iter().zip(&published) {
        let cfg = ModelConfig::new(32, 32, gamma(g), 0).unwrap();
        let c = count_params(&cfg).unwrap();
        // The instantiated networks must agree with the ledger.
        let net = EndToEnd::<f32>::new(&cfg).unwrap();
        let built: usize =
            net.parameters().iter().filter(|p| !p.name.contains(".bn.")).map(|p| p.value.len()).sum();
        ok &= c.conv_dense() == *want && built == *want && table - REFERENCE_GAP == *want;
        ok &= reference_total(gamma(g)) == Some(*table);
        parts.push(format!("{g}: {}", c.conv_dense()));
    }
    // Differences between ratios come from the two dense layers alone.
    let dense = |g: &str| count_params(&ModelConfig::new(32, 32, gamma(g), 0).unwrap()).unwrap().dense();
    for i in 1..4 {
        ok &= published[0].1 - published[i].1 == dense(published[0].0) - dense(published[i].0);
    }
    ok &= dense("1/4") - dense("1/16") == 1_573_248;
    t.check("1", ok, format!("conv+dense {} (published minus {REFERENCE_GAP})", parts.join(", ")));
}

fn random_tensor(shape: &[usize], seed: u64, away_from_zero: bool) -> Tensor<f32> {
    let mut rng = stream_rng(seed, "acceptance", 0);
    Tensor::from_fn(shape, |_| {
        let v: f32 = rng.random_range(-1.0..1.0);
        if away_from_zero {
            v.signum() * (0.1 + v.abs())
        } else {
            v
        }
    })
    .unwrap()
}

fn gradients(t: &mut Tally) {
    let start = Instant::now();
    let conv = |f, k, m| LayerSpec::Conv2d {
        filters: f,
        in_channels: k,
        kernel: (m, m),
    };
    let cases: Vec<(&str, LayerSpec, Vec<usize>, bool)> = vec![
        ("conv 2->64 7x7", conv(64, 2, 7), vec![1, 2, 8, 8], false),
        ("conv 64->16 1x1", conv(16, 64, 1), vec![2, 64, 4, 4], false),
        ("conv 16->16 5x5", conv(16, 16, 5), vec![1, 16, 6, 6], false),
        ("conv 16->2 3x3", conv(2, 16, 3), vec![2, 16, 5, 5], false),
        ("batchnorm", LayerSpec::batch_norm(4), vec![3, 4, 3, 3], false),
        ("leaky relu", LayerSpec::LeakyRelu, vec![2, 3, 4, 4], true),
        ("tanh", LayerSpec::Tanh, vec![2, 3, 4, 4], false),
        ("dense", LayerSpec::Dense { f_in: 24, f_out: 6 }, vec![3, 24], false),
        ("add", LayerSpec::Add, vec![2, 3, 2, 2], false),
        ("reshape", LayerSpec::Reshape(vec![12]), vec![2, 3, 2, 2], false),
    ];
    let mut worst: (f64, &str) = (0.0, "");
    for (i, (name, spec, shape, away)) in cases.iter().enumerate() {
        let x = random_tensor(shape, 100 + i as u64, *away);
        let e = gradient_check(spec, &x, 1e-3, 200 + i as u64).unwrap();
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name);
        }
    }
    let cfg = ModelConfig::new(8, 8, gamma("1/4"), 11).unwrap();
    let full = loss_gradient_check(&cfg, 1e-6, 3, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let ok = worst.0 < 1e-3 && full.max_tensor_error < 1e-2 && secs < 60.0;
    t.check(
        "2",
        ok,
        format!(
            "worst layer error {:.2e} ({}) < 1e-3; end-to-end 8x8 error {:.2e} over {} tensors < 1e-2; {secs:.1} s",
            worst.0, worst.1, full.max_tensor_error, full.tensors
        ),
    );
}

fn calibration(t: &mut Tally) {
    // Unitarity and round trip of the 2-D DFT.
    let mut rng = stream_rng(3, "acceptance", 1);
    let mut dft_err: f64 = 0.0;
    let mut trip_err: f64 = 0.0;
    for _ in 0..20 {
        let h = CMatrix::from_fn(256, 32, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        let hd = to_angular_delay(&h);
        dft_err = dft_err.max((hd.energy() - h.energy()).abs() / h.energy());
        let back = from_angular_delay(&hd);
        for (a, b) in back.data().iter().zip(h.data()) {
            trip_err = trip_err.max((a - b).norm());
        }
    }

    // Energy compaction of the generator into the kept delay rows.
    let params = GeneratorParams::default();
    let mut min_kept: f64 = 1.0;
    for seed in 0..100 {
        let mut rng = stream_rng(seed, "acceptance-sparsity", 0);
        let hd = generate_angular_delay(&params, &mut rng).unwrap();
        let kept: f64 = hd.data()[..params.n_cc * params.n_t].iter().map(|z| z.norm_sqr()).sum();
        min_kept = min_kept.min(kept / hd.energy());
    }

    let mut cnr_err: f64 = 0.0;
    let mut cnr_parts = Vec::new();
    for c in [0.0, 10.0, 25.0] {
        let ds = generate_dataset(&params, c, 200, 41).unwrap();
        let got = ds.empirical_cnr_db();
        cnr_err = cnr_err.max((got - c).abs());
        cnr_parts.push(format!("{c}->{got:.2}"));
    }
    let ok = dft_err <= 1e-5 && trip_err <= 1e-5 && min_kept >= 0.99 && cnr_err <= 0.5;
    t.check(
        "3",
        ok,
        format!(
            "DFT energy error {dft_err:.1e}, round trip {trip_err:.1e}; min kept energy {:.3}% over 100 seeds; \
             empirical CNR dB {} (200 samples each)",
            100.0 * min_kept,
            cnr_parts.join(", ")
        ),
    );
}

fn evaluator(t: &mut Tally) {
    let params = GeneratorParams::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for c in [0.0, 10.0, 25.0] {
        let ds = generate_dataset(&params, c, 400, 77).unwrap();
        let r = evaluate(&Model::identity(), &ds, 100).unwrap();
        ok &= (r.nmse_db + c).abs() <= 0.5;
        parts.push(format!("CNR {c}: {:.2} dB", r.nmse_db));
    }
    t.check("4", ok, format!("identity NMSE {}", parts.join(", ")));
}

/// `(stage, epoch, val_nmse_db)` rows.
fn val_nmse(path: &Path) -> Vec<(String, usize, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

/// Validation NMSE of the epoch training keeps (lowest validation loss) and
/// of epoch 1.
fn selected_db(dir: &Path, stage: &str) -> (f64, f64) {
    let log = LossLog::read_csv(&dir.join(LOSS_LOG)).unwrap();
    let best = log
        .rows
        .iter()
        .filter(|r| r.stage.name() == stage)
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap()
        .epoch;
    let rows = val_nmse(&dir.join(VAL_NMSE));
    let at = |e: usize| rows.iter().find(|r| r.0 == stage && r.1 == e).unwrap().2;
    (at(best), at(1))
}

fn desk_training(t: &mut Tally, root: &Path) {
    let out = root.join("desk");
    let o = out.to_str().unwrap();
    let desk = |args: &[&str]| {
        let mut v = vec!["--profile", "desk", "--out", o];
        v.extend_from_slice(args);
        cli(&v);
    };
    let start = Instant::now();
    desk(&["gen-data"]);
    desk(&["train", "--stage", "denoiser", "--gamma", "1/4"]);
    let dir4 = out.join("gamma-1-4");
    let before = fs::read(dir4.join(DENOISER_CKPT)).unwrap();
    desk(&["train", "--stage", "feedback", "--gamma", "1/4"]);
    let after = fs::read(dir4.join(DENOISER_CKPT)).unwrap();
    let den = dir4.join(DENOISER_CKPT);
    desk(&["train", "--stage", "feedback", "--gamma", "1/64", "--denoiser", den.to_str().unwrap()]);
    desk(&["eval", "--gammas", "1/4,1/64"]);
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let (s1, _) = selected_db(&dir4, "denoiser");
    t.check("5a", s1 <= -12.0, format!("stage-1 selected validation NMSE {s1:.2} dB <= -12 dB (identity -10 dB)"));
    let (s2, s2_first) = selected_db(&dir4, "feedback");
    t.check(
        "5b",
        s2 <= -5.0 && s2 < s2_first,
        format!("stage-2 selected validation NMSE {s2:.2} dB <= -5 dB, epoch 1 {s2_first:.2} dB"),
    );

    let results = parse_results(&fs::read_to_string(out.join(RESULTS)).unwrap()).unwrap();
    let at = |g: &str, c: f64| {
        results
            .iter()
            .find(|r| r.model == "two-stage" && r.gamma == gamma(g) && (r.cnr_db - c).abs() < 1e-9)
            .map(|r| r.nmse_db)
            .unwrap()
    };
    let (n4, n64) = (at("1/4", 10.0), at("1/64", 10.0));
    t.check("5c", n4 <= n64, format!("test NMSE at CNR 10: 1/4 {n4:.2} dB <= 1/64 {n64:.2} dB"));
    let sweep: Vec<f64> = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0].iter().map(|&c| at("1/4", c)).collect();
    let mono = sweep.windows(2).all(|w| w[1] <= w[0] + 0.5);
    let shown: Vec<String> = sweep.iter().map(|v| format!("{v:.2}")).collect();
    t.check("5d", mono, format!("1/4 NMSE over CNR 0..25: [{}] dB, +0.5 dB slack", shown.join(", ")));
    report(&format!("[INFO] criterion 5 wall time {minutes:.1} min on this machine (target 30 min on a desktop CPU)"));

    // Two-stage contract.
    // The copy reused for 1/64 carries that ratio in its header; its tensors
    // must match bit for bit.
    let entries = |p: &Path| Checkpoint::load(p).unwrap().entries().to_vec();
    let copied = entries(&out.join("gamma-1-64").join(DENOISER_CKPT)) == entries(&dir4.join(DENOISER_CKPT));
    let same = before == after && copied;
    desk(&["train", "--stage", "end-to-end", "--gamma", "1/4", "--epochs", "2"]);
    let header = |p: &Path| fs::read_to_string(p).unwrap().lines().next().unwrap().to_string();
    let (h2, he) = (header(&dir4.join(LOSS_LOG)), header(&dir4.join(LOSS_LOG_E2E)));
    let e2e = LossLog::read_csv(&dir4.join(LOSS_LOG_E2E)).unwrap();
    let schema = h2 == he && e2e.rows.len() == 2 && LossLog::read_csv(&dir4.join(LOSS_LOG)).is_ok();
    t.check(
        "6",
        same && schema,
        format!(
            "denoiser checkpoint bit-identical across stage 2: {same}; end-to-end log header matches ({he}): {schema}"
        ),
    );
}

const SMALL: &str = r#"
seed = 19
[generator]
n_c = 64
n_t = 8
n_cc = 8
max_delay = 4.0
[data]
train = 40
val = 10
test = 10
[train]
epochs = 3
batch_size = 10
[eval]
cnrs = [0.0, 10.0]
chunk = 10
"#;

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(t: &mut Tally, root: &Path) {
    let cfg = root.join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (root.join("rep-a"), root.join("rep-b"));
    for step in [vec!["gen-data"], vec!["train"], vec!["eval"]] {
        let mut args = vec!["--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()];
        args.extend(step);
        cli(&args);
    }
    let resolved = a.join(ancinet_cli::config::RESOLVED_NAME);
    for step in ["gen-data", "train", "eval"] {
        cli(&["--config", resolved.to_str().unwrap(), "--out", b.to_str().unwrap(), step]);
    }
    let data: Vec<PathBuf> = files(&a.join("data"));
    let bitwise = !data.is_empty()
        && data.iter().all(|p| fs::read(p).unwrap() == fs::read(b.join(p.strip_prefix(&a).unwrap())).unwrap());
    let log = |root: &Path| LossLog::read_csv(&root.join("gamma-1-4").join(LOSS_LOG)).unwrap();
    let (la, lb) = (log(&a), log(&b));
    let mut diff: f64 = if la.rows.len() == lb.rows.len() { 0.0 } else { f64::INFINITY };
    for (x, y) in la.rows.iter().zip(&lb.rows) {
        diff = diff.max((x.train_loss - y.train_loss).abs()).max((x.val_loss - y.val_loss).abs());
    }
    t.check(
        "7",
        bitwise && diff <= 1e-6,
        format!("{} dataset files bitwise equal: {bitwise}; max loss-log difference {diff:.1e} <= 1e-6", data.len()),
    );
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Tally::default();
    // The harness has already printed "test acceptance ... " on this line.
    report("");
    parameter_counts(&mut t);
    gradients(&mut t);
    calibration(&mut t);
    evaluator(&mut t);
    reproducibility(&mut t, tmp.path());
    desk_training(&mut t, tmp.path());
    assert!(t.failed.is_empty(), "failed criteria: {:?}", t.failed);
}
