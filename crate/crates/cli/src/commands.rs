use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ancinet::channel::{dataset_read, dataset_write, denormalize, generate_dataset, CMatrix, Dataset};
use ancinet::eval::{emit_csv, evaluate_with_ratios, nmse, sample_dump_csv, sort_results, EvalResult, Model};
use ancinet::model::{count_params, reference_total, Checkpoint, CompressionRatio, Denoiser, EndToEnd, Feedback, ModelConfig, REFERENCE_GAP, REFERENCE_TOTALS};
use ancinet::tensor::{Layer, Tensor};
use ancinet::train::{check_dataset, has_saved_state, stage2_pairs, EpochRecord, LossLog, Pairs, Session, Stage};

use crate::config::{fmt_num, parse_gamma, Baseline, ExperimentConfig, TrainMode, RESOLVED_NAME};
use crate::error::{io_err, CliError, CliResult};

pub const DENOISER_CKPT: &str = "denoiser.ckpt";
pub const FEEDBACK_CKPT: &str = "feedback.ckpt";
pub const END_TO_END_CKPT: &str = "end_to_end.ckpt";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const LOSS_LOG_E2E: &str = "loss_log_e2e.csv";
pub const VAL_NMSE: &str = "val_nmse.csv";
pub const VAL_NMSE_E2E: &str = "val_nmse_e2e.csv";
pub const STATE: &str = "train_state.ckpt";
pub const STATE_E2E: &str = "train_state_e2e.ckpt";
pub const RESULTS: &str = "results.csv";

pub const MODEL_TWO_STAGE: &str = "two-stage";
pub const MODEL_END_TO_END: &str = "end-to-end";

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Writes the resolved configuration into the output directory.
pub fn write_resolved(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    create_dir(&cfg.out)?;
    let path = cfg.out.join(RESOLVED_NAME);
    write_text(&path, &cfg.to_toml())?;
    Ok(path)
}

fn refuse_existing(paths: &[PathBuf], force: bool) -> CliResult<()> {
    match paths.iter().find(|p| p.exists()) {
        Some(p) if !force => Err(CliError::Exists(p.clone())),
        _ => Ok(()),
    }
}

fn read_dataset(path: &Path, what: &str) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: format!("{what} (run gen-data first)"),
            path: path.to_path_buf(),
        });
    }
    Ok(dataset_read(path)?)
}

/// Train, validation and one test file per evaluation CNR.
pub fn gen_data(cfg: &ExperimentConfig, force: bool) -> CliResult<()> {
    let params = cfg.generator_params();
    let [train_seed, val_seed, test_seed] = cfg.split_seeds();
    let mut jobs = vec![
        ("train", cfg.train_path(), cfg.data.train, cfg.data.cnr_db, train_seed),
        ("val", cfg.val_path(), cfg.data.val, cfg.data.cnr_db, val_seed),
    ];
    // Test sets share one channel seed, so CNR is the only thing that varies
    // across them.
    for &c in &cfg.eval.cnrs {
        jobs.push(("test", cfg.test_path(c), cfg.data.test, c, test_seed));
    }
    refuse_existing(&jobs.iter().map(|j| j.1.clone()).collect::<Vec<_>>(), force)?;
    write_resolved(cfg)?;
    create_dir(&cfg.data_dir())?;
    for (name, path, count, cnr, seed) in jobs {
        let ds = generate_dataset(&params, cnr, count, seed)?;
        dataset_write(&ds, &path)?;
        println!(
            "{name:5} {count:>7} samples  CNR {} dB requested, {:.2} dB empirical  -> {}",
            fmt_num(cnr),
            ds.empirical_cnr_db(),
            path.display()
        );
    }
    Ok(())
}

fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: format!("{what} checkpoint"),
            path: path.to_path_buf(),
        });
    }
    Ok(Checkpoint::load(path)?)
}

fn save_network(path: &Path, model: &ModelConfig, net: &dyn Layer<f32>) -> CliResult<()> {
    let mut ck = Checkpoint::new(model)?;
    ck.insert_network("", net);
    Ok(ck.save(path)?)
}

/// The denoiser does not depend on the compression ratio, so only the
/// image dimensions are checked.
pub fn load_denoiser(path: &Path, model: &ModelConfig) -> CliResult<Denoiser> {
    let ck = load_checkpoint(path, "denoiser")?;
    let stored = ModelConfig {
        gamma: ck.gamma,
        ..model.clone()
    };
    ck.check_config(&stored)?;
    let mut den = Denoiser::new(model)?;
    ck.load_network("", &mut den)?;
    Ok(den)
}

pub fn load_feedback(path: &Path, model: &ModelConfig) -> CliResult<Feedback> {
    let ck = load_checkpoint(path, "feedback")?;
    ck.check_config(model)?;
    let mut fb = Feedback::new(model)?;
    ck.load_network("", &mut fb)?;
    Ok(fb)
}

pub fn load_end_to_end(path: &Path, model: &ModelConfig) -> CliResult<EndToEnd> {
    let ck = load_checkpoint(path, "end-to-end")?;
    ck.check_config(model)?;
    let mut net = EndToEnd::new(model)?;
    ck.load_network("", &mut net)?;
    Ok(net)
}

/// Options of `train` that are not part of the experiment configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub force: bool,
    /// Denoiser checkpoint to reuse in feedback mode instead of the one in
    /// the model directory.
    pub denoiser: Option<PathBuf>,
}

fn nmse_csv(log: &LossLog) -> String {
    let mut s = String::from("stage,epoch,val_nmse_db\n");
    for r in &log.rows {
        if let Some(db) = r.val_nmse_db {
            let _ = writeln!(s, "{},{},{}", r.stage, r.epoch, db);
        }
    }
    s
}

/// Where one stage keeps its resumable state and logs.
struct StageFiles<'a> {
    state: PathBuf,
    log: PathBuf,
    nmse: PathBuf,
    /// Rows of earlier stages, kept at the head of the log.
    prior: &'a LossLog,
    model: &'a ModelConfig,
    resume: bool,
}

/// The state file's checkpoint when resuming and it holds `stage`.
fn saved_state(files: &StageFiles, stage: Stage) -> CliResult<Option<Checkpoint>> {
    if !files.resume || !files.state.exists() {
        return Ok(None);
    }
    let ck = Checkpoint::load(&files.state)?;
    ck.check_config(files.model)?;
    Ok(has_saved_state(stage, &ck).then_some(ck))
}

fn run_stage<N: Layer<f32>>(
    mut session: Session<N>,
    train: &Pairs,
    val: &Pairs,
    files: &StageFiles,
) -> CliResult<(N, LossLog)> {
    if let Some(ck) = saved_state(files, session.stage())? {
        session.resume(&ck)?;
        println!("{}: resuming after epoch {}", session.stage(), session.epoch());
    }
    let total = session.config().epochs;
    let write_logs = |s: &Session<N>| -> CliResult<()> {
        let mut log = files.prior.clone();
        log.extend(s.log());
        log.write_csv(&files.log)?;
        write_text(&files.nmse, &nmse_csv(&log))
    };
    let mut failure: Option<CliError> = None;
    let outcome = session.run(train, val, |s, r: &EpochRecord| {
        let mut ck = Checkpoint::new(files.model)?;
        s.save(&mut ck);
        ck.save(&files.state)?;
        if let Err(e) = write_logs(s) {
            failure = Some(e);
            return Err(ancinet::Error::State("could not write the loss log".into()));
        }
        println!(
            "{} epoch {:>4}/{total}  train {:.6e}  val {:.6e}  val NMSE {:.2} dB",
            r.stage,
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_nmse_db.unwrap_or(f64::NAN)
        );
        Ok(())
    });
    if let Some(e) = failure {
        return Err(e);
    }
    outcome?;
    println!(
        "{}: best validation loss {:.6e} at epoch {}",
        session.stage(),
        session.best_val(),
        session.best_epoch()
    );
    Ok(session.finish()?)
}

/// Rows of `stage` from an earlier run's loss log, with their validation NMSE
/// restored from `nmse` when it has them.
fn stage_rows(path: &Path, nmse: &Path, stage: Stage) -> CliResult<LossLog> {
    let mut log = LossLog::default();
    if !path.exists() {
        return Ok(log);
    }
    log.rows = LossLog::read_csv(path)?.rows.into_iter().filter(|r| r.stage == stage).collect();
    if nmse.exists() {
        let text = fs::read_to_string(nmse).map_err(|e| io_err(nmse, e))?;
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (Some(s), Some(e), Some(db)) = (f.first(), f.get(1), f.get(2)) else {
                continue;
            };
            if *s != stage.name() {
                continue;
            }
            let (Ok(e), Ok(db)) = (e.parse::<usize>(), db.parse::<f64>()) else {
                continue;
            };
            if let Some(r) = log.rows.iter_mut().find(|r| r.epoch == e) {
                r.val_nmse_db = Some(db);
            }
        }
    }
    Ok(log)
}

pub fn train(cfg: &ExperimentConfig, opts: &TrainOptions) -> CliResult<()> {
    let model = cfg.model_config()?;
    let tcfg = cfg.train_config();
    tcfg.validate()?;
    let train_ds = read_dataset(&cfg.train_path(), "training set")?;
    let val_ds = read_dataset(&cfg.val_path(), "validation set")?;
    check_dataset(&train_ds, &model)?;
    check_dataset(&val_ds, &model)?;
    let dir = cfg.model_dir(model.gamma);
    let mode = cfg.train.mode;
    let outputs: Vec<PathBuf> = match mode {
        TrainMode::TwoStage => vec![DENOISER_CKPT, FEEDBACK_CKPT, LOSS_LOG],
        TrainMode::Denoiser => vec![DENOISER_CKPT, LOSS_LOG],
        TrainMode::Feedback => vec![FEEDBACK_CKPT],
        TrainMode::EndToEnd => vec![END_TO_END_CKPT, LOSS_LOG_E2E],
    }
    .into_iter()
    .map(|f| dir.join(f))
    .collect();
    let den_path = dir.join(DENOISER_CKPT);
    if mode == TrainMode::Feedback {
        let src = opts.denoiser.clone().unwrap_or_else(|| den_path.clone());
        load_denoiser(&src, &model)?;
    }
    if !opts.resume {
        refuse_existing(&outputs, opts.force)?;
    }
    write_resolved(cfg)?;
    create_dir(&dir)?;
    let train = Pairs::from_dataset(&train_ds, &model)?;
    let val = Pairs::from_dataset(&val_ds, &model)?;
    drop((train_ds, val_ds));

    let state_path = dir.join(if mode == TrainMode::EndToEnd { STATE_E2E } else { STATE });
    if !opts.resume && state_path.exists() {
        fs::remove_file(&state_path).map_err(|e| io_err(&state_path, e))?;
    }
    let files = |prior| StageFiles {
        state: state_path.clone(),
        log: dir.join(if mode == TrainMode::EndToEnd { LOSS_LOG_E2E } else { LOSS_LOG }),
        nmse: dir.join(if mode == TrainMode::EndToEnd { VAL_NMSE_E2E } else { VAL_NMSE }),
        prior,
        model: &model,
        resume: opts.resume,
    };
    let empty = LossLog::default();

    if mode == TrainMode::EndToEnd {
        let session = Session::new(Stage::EndToEnd, EndToEnd::new(&model)?, &tcfg)?;
        let (net, _) = run_stage(session, &train, &val, &files(&empty))?;
        save_network(&dir.join(END_TO_END_CKPT), &model, &net)?;
        println!("wrote {}", dir.join(END_TO_END_CKPT).display());
        return Ok(());
    }

    // A saved first-stage state means stage 1 was interrupted or is being
    // extended; once stage 2 starts, its state replaces it.
    let stage1_saved = saved_state(&files(&empty), Stage::Denoiser)?.is_some();
    let (den, stage1_log) = if mode == TrainMode::Feedback || (opts.resume && !stage1_saved && den_path.exists()) {
        let src = opts.denoiser.clone().unwrap_or_else(|| den_path.clone());
        let den = load_denoiser(&src, &model)?;
        if src != den_path {
            save_network(&den_path, &model, &den)?;
        }
        println!("denoiser: loaded {}", src.display());
        (den, stage_rows(&dir.join(LOSS_LOG), &dir.join(VAL_NMSE), Stage::Denoiser)?)
    } else {
        let session = Session::new(Stage::Denoiser, Denoiser::new(&model)?, &tcfg)?;
        let (den, log) = run_stage(session, &train, &val, &files(&empty))?;
        save_network(&den_path, &model, &den)?;
        println!("wrote {}", den_path.display());
        (den, log)
    };
    if mode == TrainMode::Denoiser {
        return Ok(());
    }

    let train2 = stage2_pairs(&den, &train, tcfg.batch_size)?;
    let val2 = stage2_pairs(&den, &val, tcfg.batch_size)?;
    let session = Session::new(Stage::Feedback, Feedback::new(&model)?, &tcfg)?;
    let (fb, _) = run_stage(session, &train2, &val2, &files(&stage1_log))?;
    let fb_path = dir.join(FEEDBACK_CKPT);
    save_network(&fb_path, &model, &fb)?;
    println!("wrote {}", fb_path.display());
    Ok(())
}

/// A trained network found on disk, owned.
enum Trained {
    TwoStage(EndToEnd),
    EndToEnd(EndToEnd),
}

fn find_models(cfg: &ExperimentConfig, model: &ModelConfig) -> CliResult<Vec<Trained>> {
    let dir = cfg.model_dir(model.gamma);
    let mut found = Vec::new();
    let (den, fb) = (dir.join(DENOISER_CKPT), dir.join(FEEDBACK_CKPT));
    if fb.exists() {
        let net = EndToEnd::from_parts(load_denoiser(&den, model)?, load_feedback(&fb, model)?)?;
        found.push(Trained::TwoStage(net));
    }
    let e2e = dir.join(END_TO_END_CKPT);
    if e2e.exists() {
        found.push(Trained::EndToEnd(load_end_to_end(&e2e, model)?));
    }
    if found.is_empty() {
        return Err(CliError::Missing {
            what: format!("trained model for gamma = {} (run train first)", model.gamma),
            path: fb,
        });
    }
    Ok(found)
}

/// Evaluates every configured model and CNR; returns the sorted results.
pub fn eval(cfg: &ExperimentConfig) -> CliResult<Vec<EvalResult>> {
    let mut configs = Vec::new();
    for g in &cfg.eval.gammas {
        configs.push(cfg.model_config_for(parse_gamma(g)?)?);
    }
    let mut datasets = Vec::new();
    for &c in &cfg.eval.cnrs {
        let ds = read_dataset(&cfg.test_path(c), &format!("test set at CNR {} dB", fmt_num(c)))?;
        for m in &configs {
            check_dataset(&ds, m)?;
        }
        datasets.push(ds);
    }
    let mut trained = Vec::new();
    for m in &configs {
        trained.push((m, find_models(cfg, m)?));
    }
    write_resolved(cfg)?;

    let mut models = Vec::new();
    if cfg.eval.baseline == Baseline::Identity {
        models.push(Model::identity());
    }
    for (m, nets) in &trained {
        for t in nets {
            models.push(match t {
                Trained::TwoStage(n) => Model::network(MODEL_TWO_STAGE, m, n),
                Trained::EndToEnd(n) => Model::network(MODEL_END_TO_END, m, n),
            });
        }
    }
    let mut results = Vec::new();
    let dump_dir = cfg.out.join("samples");
    for model in &models {
        for ds in &datasets {
            let (r, ratios) = evaluate_with_ratios(model, ds, cfg.eval.chunk)?;
            if cfg.eval.dump_samples {
                create_dir(&dump_dir)?;
                let name = format!(
                    "{}_gamma{}-{}_cnr{}.csv",
                    r.model,
                    r.gamma.num(),
                    r.gamma.den(),
                    fmt_num(r.cnr_db)
                );
                write_text(&dump_dir.join(name), &sample_dump_csv(&ratios))?;
            }
            results.push(r);
        }
    }
    sort_results(&mut results);
    let path = cfg.out.join(RESULTS);
    emit_csv(&results, &path)?;
    print!("{}", results_table(&results));
    println!("wrote {}", path.display());
    Ok(results)
}

/// Rows are CNRs, columns are models with their compression ratio.
pub fn results_table(results: &[EvalResult]) -> String {
    let mut columns: Vec<(String, CompressionRatio)> = Vec::new();
    let mut cnrs: Vec<f64> = Vec::new();
    for r in results {
        if !columns.iter().any(|(m, g)| *m == r.model && *g == r.gamma) {
            columns.push((r.model.clone(), r.gamma));
        }
        if !cnrs.contains(&r.cnr_db) {
            cnrs.push(r.cnr_db);
        }
    }
    cnrs.sort_by(f64::total_cmp);
    let heads: Vec<String> = columns
        .iter()
        .map(|(m, g)| if m == "identity" { m.clone() } else { format!("{m} {g}") })
        .collect();
    let width = heads.iter().map(|h| h.len()).max().unwrap_or(0).max(10);
    let mut s = format!("{:>8}", "CNR (dB)");
    for h in &heads {
        let _ = write!(s, "  {h:>width$}");
    }
    s.push('\n');
    for c in cnrs {
        let _ = write!(s, "{:>8}", fmt_num(c));
        for (m, g) in &columns {
            match results.iter().find(|r| r.model == *m && r.gamma == *g && r.cnr_db == c) {
                Some(r) => {
                    let _ = write!(s, "  {:>width$.2}", r.nmse_db);
                }
                None => {
                    let _ = write!(s, "  {:>width$}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Parameter breakdown for one compression ratio, with the published total
/// when there is one.
pub fn param_report(cfg: &ExperimentConfig, gamma: CompressionRatio) -> CliResult<String> {
    let model = cfg.model_config_for(gamma)?;
    let c = count_params(&model)?;
    let mut s = String::new();
    let _ = writeln!(s, "gamma {gamma} (M = {})", model.codeword_len()?);
    for (name, v) in [
        ("denoiser conv", c.denoiser_conv),
        ("encoder conv", c.encoder_conv),
        ("decoder conv", c.decoder_conv),
        ("encoder dense", c.encoder_dense),
        ("decoder dense", c.decoder_dense),
        ("conv + dense", c.conv_dense()),
        ("norm aux", c.norm_aux),
        ("total", c.total()),
    ] {
        let _ = writeln!(s, "  {name:<14} {:>10}", thousands(v));
    }
    if (model.n_cc, model.n_t) == (32, 32) {
        if let Some(r) = reference_total(gamma) {
            let expect = r - REFERENCE_GAP;
            let verdict = if expect == c.conv_dense() { "match" } else { "MISMATCH" };
            let _ = writeln!(
                s,
                "  reference      {} - {} = {} ({verdict})",
                thousands(r),
                thousands(REFERENCE_GAP),
                thousands(expect)
            );
        }
    }
    Ok(s)
}

pub fn count_params_cmd(cfg: &ExperimentConfig, gamma: Option<CompressionRatio>) -> CliResult<String> {
    let gammas: Vec<CompressionRatio> = match gamma {
        Some(g) => vec![g],
        None => {
            let mut v: Vec<CompressionRatio> = REFERENCE_TOTALS
                .iter()
                .map(|&((n, d), _)| CompressionRatio::new(n, d))
                .collect::<Result<_, _>>()?;
            let own = cfg.gamma()?;
            if !v.contains(&own) {
                v.push(own);
            }
            v
        }
    };
    let mut s = String::new();
    for g in gammas {
        s.push_str(&param_report(cfg, g)?);
    }
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CodecModel {
    TwoStage,
    EndToEnd,
}

/// What `codec` produced for one sample.
#[derive(Clone, Debug)]
pub struct CodecOutput {
    pub denoised: Tensor<f32>,
    pub codeword: Tensor<f32>,
    pub reconstructed: Tensor<f32>,
    pub nmse_db: f64,
    pub noisy_nmse_db: f64,
    pub dir: PathBuf,
}

fn grid_csv(m: &CMatrix, f: impl Fn(f64, f64) -> f64) -> String {
    let mut s = String::new();
    for r in 0..m.rows() {
        let row: Vec<String> = (0..m.cols())
            .map(|c| {
                let z = m.get(r, c);
                format!("{}", f(z.re, z.im))
            })
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

fn write_grids(dir: &Path, name: &str, t: &Tensor<f32>, scale: f32) -> CliResult<()> {
    let m = denormalize(t, scale)?;
    write_text(&dir.join(format!("{name}_re.csv")), &grid_csv(&m, |re, _| re))?;
    write_text(&dir.join(format!("{name}_im.csv")), &grid_csv(&m, |_, im| im))?;
    write_text(&dir.join(format!("{name}_mag.csv")), &grid_csv(&m, f64::hypot))
}

/// Runs one sample of `input` through the trained model and writes the
/// intermediate grids and the codeword.
pub fn codec(cfg: &ExperimentConfig, input: &Path, index: usize, which: CodecModel, force: bool) -> CliResult<CodecOutput> {
    let model = cfg.model_config()?;
    let ds = read_dataset(input, "codec input")?;
    check_dataset(&ds, &model)?;
    let sample = ds.samples.get(index).ok_or_else(|| {
        CliError::Config(format!("sample index {index} out of range; {} has {} samples", input.display(), ds.len()))
    })?;
    let dir = cfg.model_dir(model.gamma);
    let net = match which {
        CodecModel::TwoStage => {
            EndToEnd::from_parts(load_denoiser(&dir.join(DENOISER_CKPT), &model)?, load_feedback(&dir.join(FEEDBACK_CKPT), &model)?)?
        }
        CodecModel::EndToEnd => load_end_to_end(&dir.join(END_TO_END_CKPT), &model)?,
    };
    let out_dir = cfg.out.join("codec").join(format!(
        "{}_gamma{}-{}_sample{index}",
        match which {
            CodecModel::TwoStage => MODEL_TWO_STAGE,
            CodecModel::EndToEnd => MODEL_END_TO_END,
        },
        model.gamma.num(),
        model.gamma.den()
    ));
    refuse_existing(&[out_dir.join("codeword.csv")], force)?;
    write_resolved(cfg)?;
    create_dir(&out_dir)?;

    let shape = [1, 2, model.n_cc, model.n_t];
    let x = Tensor::new(&shape, sample.input.data().to_vec())?;
    let label = Tensor::new(&shape, sample.label.data().to_vec())?;
    let denoised = net.denoiser.infer(&x)?;
    let codeword = net.feedback.encoder.infer(&denoised)?;
    let reconstructed = net.feedback.decoder.infer(&codeword)?;
    let image = |t: &Tensor<f32>| Tensor::new(&shape[1..], t.data().to_vec());
    write_grids(&out_dir, "input", &sample.input, sample.scale)?;
    write_grids(&out_dir, "label", &sample.label, sample.scale)?;
    write_grids(&out_dir, "denoised", &image(&denoised)?, sample.scale)?;
    write_grids(&out_dir, "reconstructed", &image(&reconstructed)?, sample.scale)?;
    let mut cw = String::from("index,value\n");
    for (i, v) in codeword.data().iter().enumerate() {
        let _ = writeln!(cw, "{i},{v}");
    }
    write_text(&out_dir.join("codeword.csv"), &cw)?;

    let scales = [sample.scale];
    let n = nmse(&reconstructed, &label, &scales)?;
    let noisy = nmse(&x, &label, &scales)?;
    println!("codeword length {}", codeword.len());
    println!("sample {index}: NMSE {:.2} dB (noisy input {:.2} dB)", n.db, noisy.db);
    println!("wrote {}", out_dir.display());
    Ok(CodecOutput {
        denoised,
        codeword,
        reconstructed,
        nmse_db: n.db,
        noisy_nmse_db: noisy.db,
        dir: out_dir,
    })
}
