use std::path::Path;

use kcal::bandwidth::{
    fit_bandwidth_constant, tune_bandwidth_with_queries, BandwidthLaw, BandwidthSearchConfig, BandwidthSelection,
};
use kcal::dataio::{
    decode_labels, decode_matrix, encode_labels, encode_matrix, stratified_subsample, EmbeddingDataset, MatrixKind,
};
use kcal::kde::{kde_probabilities_exact, round_to_f32, KdeModel, ProbMatrix};
use kcal::kernel::KernelSpec;
use kcal::metrics::{
    evaluate, reliability_data, BinningScheme, MetricReport, ReliabilityAxis, ThresholdRule,
};
use kcal::projection::{Arch, InputKind, ProjectionParams};
use kcal::synth::{full_calibration_error, make_oracle, oracle_posterior, GmmOracle};
use kcal::temperature::{apply_temperature, fit_temperature};
use kcal::trainer::{train_projection, TrainConfig};
use kcal::{KcalError, Result};
use ndarray::Array2;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::*;
use crate::run::{sibling, Run};

/// Prints to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Reliability(a) => reliability(a),
        Command::Sweep(a) => sweep(a),
        Command::TempScale(a) => temp_scale(a),
    }
}

fn input_matrix_kind(input: InputKind) -> MatrixKind {
    match input {
        InputKind::Embeddings => MatrixKind::Embeddings,
        InputKind::Logits => MatrixKind::Logits,
    }
}

fn read_matrix(run: &mut Run, path: &Path, kind: MatrixKind) -> Result<Array2<f64>> {
    decode_matrix(kind, &run.read(path)?)
}

fn read_labels(run: &mut Run, path: &Path) -> Result<(Vec<usize>, usize)> {
    decode_labels(&run.read(path)?)
}

fn read_probs(run: &mut Run, path: &Path) -> Result<ProbMatrix> {
    ProbMatrix::from_stored(read_matrix(run, path, MatrixKind::Probabilities)?)
}

fn read_dataset(run: &mut Run, emb: &Path, labels: &Path, kind: MatrixKind) -> Result<EmbeddingDataset> {
    let x = read_matrix(run, emb, kind)?;
    let (y, k) = read_labels(run, labels)?;
    EmbeddingDataset::new(x, y, k)
}

fn parse_json<T: serde::de::DeserializeOwned>(bytes: &[u8], what: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| KcalError::Format(format!("{what}: {e}")))
}

fn check_labels_len(probs: &ProbMatrix, labels: &[usize]) -> Result<()> {
    if probs.nrows() != labels.len() {
        return Err(KcalError::Validation(format!(
            "{} probability rows but {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut run = Run::new("synth", &a, Some(a.seed));
    let oracle: GmmOracle = match &a.from_oracle {
        Some(path) => {
            let o: GmmOracle = parse_json(&run.read(path)?, "oracle")?;
            o.validate()?;
            o
        }
        None => {
            let priors = a.priors.clone().unwrap_or_else(|| vec![1.0 / a.classes as f64; a.classes]);
            make_oracle(a.classes, a.dim, a.separation, a.sigma, &priors, a.seed)?
        }
    };
    let k = oracle.num_classes();
    // Samples use a stream distinct from the one that placed the means.
    let sample_seed = a.seed.wrapping_add(1);
    let ds = match (a.n, a.per_class) {
        (_, Some(m)) => oracle.sample_per_class(&vec![m; k], sample_seed)?,
        (Some(n), None) => oracle.sample(n, sample_seed)?,
        (None, None) => return Err(KcalError::Argument("one of --n or --per-class is required".into())),
    };
    run.write(&a.out_emb, &encode_matrix(MatrixKind::Embeddings, &ds.embeddings)?)?;
    run.write(&a.out_labels, &encode_labels(&ds.labels, k)?)?;
    if let Some(path) = &a.out_oracle {
        run.write_json(path, &oracle)?;
    }
    if let Some(path) = &a.out_posterior {
        let post = oracle_posterior(&oracle, ds.embeddings.view())?;
        run.write(path, &encode_matrix(MatrixKind::Probabilities, post.as_array())?)?;
    }
    if let Some(path) = &a.out_logits {
        let offsets = a.logit_offsets.clone().unwrap_or_default();
        let logits = oracle.logits(ds.embeddings.view(), a.logit_scale, &offsets)?;
        run.write(path, &encode_matrix(MatrixKind::Logits, &logits)?)?;
    }
    run.note("n", ds.len());
    run.note("class_counts", ds.partition().counts);
    say!("wrote {} samples, {} classes", ds.len(), k);
    run.finish(&a.out_emb)
}

fn train_config(a: &TrainArgs, run: &mut Run) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => parse_json(&run.read(path)?, "training config")?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:ident) => {
            if let Some(v) = $flag {
                cfg.$field = v;
            }
        };
    }
    set!(a.seed, seed);
    set!(a.epochs, epochs);
    set!(a.batches_per_epoch, batches_per_epoch);
    set!(a.batch_size, batch_size);
    set!(a.background, background_per_class);
    set!(a.lr, learning_rate);
    set!(a.plateau_patience, plateau_patience);
    set!(a.plateau_factor, plateau_factor);
    if let Some(arch) = &a.arch {
        cfg.arch = arch.parse::<Arch>()?;
    }
    if let Some(d) = a.dim {
        cfg.output_dim = Some(d);
    }
    if let Some(input) = a.input {
        cfg.input_kind = input.into();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut run = Run::new("train", &a, None);
    let cfg = train_config(&a, &mut run)?;
    let ds = read_dataset(&mut run, &a.emb, &a.labels, input_matrix_kind(cfg.input_kind))?;
    let report = train_projection(&cfg, &ds)?;
    for (epoch, (loss, lr)) in report.epoch_losses.iter().zip(&report.learning_rates).enumerate() {
        say!("epoch {epoch} loss {loss:.6} lr {lr:e}");
    }
    run.write(&a.out, &report.params.to_bytes()?)?;
    let report_path = a.report.clone().unwrap_or_else(|| sibling(&a.out, "report.json"));
    #[derive(Serialize)]
    struct Report<'a> {
        config: &'a TrainConfig,
        #[serde(flatten)]
        report: &'a kcal::trainer::TrainReport,
    }
    run.write_json(&report_path, &Report { config: &cfg, report: &report })?;
    run.note("config", &cfg);
    run.note("final_loss", report.epoch_losses.last());
    run.finish(&a.out)
}

/// The projection for `calibrate` and `sweep`: read from file, or identity.
fn load_projection(
    run: &mut Run,
    path: Option<&Path>,
    input: InputArg,
    input_dim: usize,
) -> Result<ProjectionParams> {
    let kind: InputKind = input.into();
    match path {
        Some(p) => {
            let params = ProjectionParams::from_bytes(&run.read(p)?)?;
            if params.input_kind != kind {
                return Err(KcalError::Validation(format!(
                    "projection consumes {:?} but --input is {:?}",
                    params.input_kind, kind
                )));
            }
            Ok(params)
        }
        None => {
            let mut params = ProjectionParams::init(input_dim, input_dim, Arch::Identity, 0)?;
            params.input_kind = kind;
            Ok(params)
        }
    }
}

/// Smallest nonzero class count.
fn rarest_count(counts: &[usize]) -> usize {
    counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(0)
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let mut run = Run::new("calibrate", &a, None);
    let kind: InputKind = a.input.into();
    let ds = read_dataset(&mut run, &a.emb, &a.labels, input_matrix_kind(kind))?;
    let projection = load_projection(&mut run, a.projection.as_deref(), a.input, ds.dim())?;
    let queries = projection.project(ds.embeddings.view())?;
    let support = round_to_f32(&queries);
    let counts = ds.partition().counts;
    let empty: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] == 0).collect();
    if !empty.is_empty() {
        log::warn!("classes {empty:?} have no calibration points and will always receive probability 0");
    }

    let mut selection: Option<BandwidthSelection> = None;
    let mut law: Option<BandwidthLaw> = None;
    let (bandwidth, source) = if let Some(b) = a.bandwidth {
        KernelSpec::rbf(b)?;
        (b, "fixed")
    } else if let Some(path) = &a.bandwidth_law {
        let l: BandwidthLaw = parse_json(&run.read(path)?, "bandwidth law")?;
        if l.dim != projection.output_dim {
            log::warn!("law fitted for d = {} but the projection outputs d = {}", l.dim, projection.output_dim);
        }
        let m = rarest_count(&counts);
        law = Some(l);
        (l.bandwidth(m), "law")
    } else {
        let cfg = BandwidthSearchConfig {
            lb: a.lb,
            ub: a.ub,
            tol: a.tol,
            loo: a.loo,
        };
        let sel = tune_bandwidth_with_queries(support.view(), &ds.labels, ds.num_classes, queries.view(), &cfg)?;
        selection = Some(sel);
        (sel.bandwidth, if a.loo { "golden_section_loo" } else { "golden_section" })
    };

    let mut model = KdeModel::new(support, ds.labels.clone(), ds.num_classes, bandwidth, projection)?;
    model.meta.leave_one_out = a.loo;
    model.meta.bandwidth_source = source.to_string();
    model.meta.bandwidth_law = law;
    model.meta.selection = selection;
    run.write(&a.out, &model.to_bytes()?)?;

    if let Some(path) = &a.loo_probs {
        let pred = kde_probabilities_exact(
            model.support.view(),
            &model.labels,
            &model.class_counts,
            queries.view(),
            &KernelSpec::rbf(bandwidth)?,
            a.loo,
        )?;
        run.write(path, &encode_matrix(MatrixKind::Probabilities, pred.probs.as_array())?)?;
    }
    say!("bandwidth {bandwidth} ({source}), {} calibration points", ds.len());
    run.note("bandwidth", bandwidth);
    run.note("bandwidth_source", source);
    run.note("class_counts", &counts);
    run.note("empty_classes", &empty);
    run.note("selection", selection);
    run.finish(&a.out)
}

fn predict(a: PredictArgs) -> Result<()> {
    let mut run = Run::new("predict", &a, None);
    let model = KdeModel::from_bytes(&run.read(&a.model)?)?;
    let x = read_matrix(&mut run, &a.emb, input_matrix_kind(model.projection.input_kind))?;
    if x.ncols() != model.projection.input_dim {
        return Err(KcalError::Validation(format!(
            "model expects {} input columns, queries have {}",
            model.projection.input_dim,
            x.ncols()
        )));
    }
    let pred = if x.nrows() == 0 {
        kcal::kde::KdePrediction {
            probs: ProbMatrix::new(Array2::zeros((0, model.num_classes())))?,
            fallback: Vec::new(),
        }
    } else {
        model.predict(x.view(), a.loo)?
    };
    run.write(&a.out, &encode_matrix(MatrixKind::Probabilities, pred.probs.as_array())?)?;
    let fallback = pred.fallback_count();
    if fallback > 0 {
        log::warn!("{fallback} queries had no kernel mass and received the class priors");
    }
    say!("predicted {} rows, {fallback} prior fallbacks", pred.probs.nrows());
    run.note("rows", pred.probs.nrows());
    run.note("fallback_count", fallback);
    run.finish(&a.out)
}

fn schemes(arg: SchemeArg, bins: usize) -> Vec<BinningScheme> {
    match arg {
        SchemeArg::Adaptive => vec![BinningScheme::adaptive(bins)],
        SchemeArg::Static => vec![BinningScheme::fixed_width(bins)],
        SchemeArg::Both => vec![BinningScheme::adaptive(bins), BinningScheme::fixed_width(bins)],
    }
}

#[derive(Serialize)]
struct EvalOutput {
    n: usize,
    num_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    validation: Option<Validation>,
    reports: Vec<MetricReport>,
}

#[derive(Serialize)]
struct Validation {
    rows: usize,
    max_row_sum_error: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut run = Run::new("eval", &a, None);
    let probs = read_probs(&mut run, &a.probs)?;
    let validation = a.validate.then(|| {
        let max_err = (0..probs.nrows())
            .map(|i| (probs.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        Validation {
            rows: probs.nrows(),
            max_row_sum_error: max_err,
        }
    });
    if let Some(v) = &validation {
        if v.max_row_sum_error > ProbMatrix::ROW_SUM_TOL {
            return Err(KcalError::Validation(format!("a row sum is off by {}", v.max_row_sum_error)));
        }
        eprintln!("{} rows on the simplex (max row-sum error {:e})", v.rows, v.max_row_sum_error);
    }
    let mut reports = Vec::new();
    if let Some(path) = &a.labels {
        let (labels, _) = read_labels(&mut run, path)?;
        check_labels_len(&probs, &labels)?;
        let rule = a.threshold.map_or(ThresholdRule::Standard, ThresholdRule::Absolute);
        for scheme in schemes(a.scheme, a.bins) {
            reports.push(evaluate(&probs, &labels, scheme, rule)?);
        }
    }
    let out = EvalOutput {
        n: probs.nrows(),
        num_classes: probs.num_classes(),
        validation,
        reports,
    };
    match &a.out {
        Some(path) => {
            run.write_json(path, &out)?;
            run.finish(path)
        }
        None => {
            let text = serde_json::to_string_pretty(&out).map_err(|e| KcalError::Format(e.to_string()))?;
            say!("{text}");
            Ok(())
        }
    }
}

fn reliability(a: ReliabilityArgs) -> Result<()> {
    let mut run = Run::new("reliability", &a, None);
    let probs = read_probs(&mut run, &a.probs)?;
    let (labels, _) = read_labels(&mut run, &a.labels)?;
    check_labels_len(&probs, &labels)?;
    let axis: ReliabilityAxis = a.axis.parse()?;
    let scheme = match a.scheme {
        SchemeArg::Adaptive => BinningScheme::adaptive(a.bins),
        SchemeArg::Static => BinningScheme::fixed_width(a.bins),
        SchemeArg::Both => return Err(KcalError::Argument("reliability takes a single scheme".into())),
    };
    let data = reliability_data(&probs, &labels, axis, scheme, a.min_count)?;
    run.write_json(&a.out, &data)?;
    if let Some(path) = &a.csv {
        run.write(path, data.to_csv().as_bytes())?;
    }
    run.note("bins", data.bins.len());
    run.finish(&a.out)
}

#[derive(Serialize)]
struct SweepRow {
    size: usize,
    per_class: usize,
    m: usize,
    bandwidth: f64,
    at_bound: bool,
    accuracy: f64,
    ece: f64,
    cece: f64,
    brier_top: f64,
    brier_multi: f64,
    nll: f64,
    full_calibration_error: Option<f64>,
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut run = Run::new("sweep", &a, Some(a.seed));
    let kind: InputKind = a.input.into();
    let pool = read_dataset(&mut run, &a.emb, &a.labels, input_matrix_kind(kind))?;
    let projection = load_projection(&mut run, a.projection.as_deref(), a.input, pool.dim())?;
    let test = match (&a.test_emb, &a.test_labels) {
        (Some(e), Some(l)) => Some(read_dataset(&mut run, e, l, input_matrix_kind(kind))?),
        _ => None,
    };
    let truth = match &a.oracle {
        Some(path) => {
            let oracle: GmmOracle = parse_json(&run.read(path)?, "oracle")?;
            let t = test.as_ref().expect("clap enforces --test-emb with --oracle");
            Some(oracle_posterior(&oracle, t.embeddings.view())?)
        }
        None => None,
    };
    let test_z = test.as_ref().map(|t| projection.project(t.embeddings.view())).transpose()?;

    let k = pool.num_classes;
    let scheme = BinningScheme::adaptive(a.bins);
    let cfg = BandwidthSearchConfig {
        loo: a.loo,
        ..BandwidthSearchConfig::default()
    };
    let mut master = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::new();
    for &size in &a.sizes {
        let subset_seed = master.next_u64();
        if size < k {
            log::warn!("size {size} is below the number of classes {k}; skipped");
            continue;
        }
        let per_class = size / k;
        let sub = stratified_subsample(&pool, per_class, subset_seed);
        let queries = projection.project(sub.embeddings.view())?;
        let support = round_to_f32(&queries);
        let sel = tune_bandwidth_with_queries(support.view(), &sub.labels, k, queries.view(), &cfg)?;
        let model = KdeModel::new(support, sub.labels.clone(), k, sel.bandwidth, projection.clone())?;
        let m = rarest_count(&model.class_counts);
        let (probs, labels) = match (&test_z, &test) {
            (Some(z), Some(t)) => (model.predict_projected(z.view(), false)?.probs, t.labels.clone()),
            _ => (model.predict_projected(queries.view(), true)?.probs, sub.labels.clone()),
        };
        let r = evaluate(&probs, &labels, scheme, ThresholdRule::Standard)?;
        let fce = truth.as_ref().map(|t| full_calibration_error(&probs, t)).transpose()?;
        say!("size {size}: m {m} b* {:.6} ece {:.4} cece {:.4}", sel.bandwidth, r.ece, r.cece);
        rows.push(SweepRow {
            size,
            per_class,
            m,
            bandwidth: sel.bandwidth,
            at_bound: sel.at_bound,
            accuracy: r.accuracy,
            ece: r.ece,
            cece: r.cece,
            brier_top: r.brier_top,
            brier_multi: r.brier_multi,
            nll: r.nll,
            full_calibration_error: fce,
        });
    }

    let mut csv = String::from(
        "size,per_class,m,bandwidth,at_bound,accuracy,ece,cece,brier_top,brier_multi,nll,full_calibration_error\n",
    );
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.size,
            r.per_class,
            r.m,
            r.bandwidth,
            r.at_bound,
            r.accuracy,
            r.ece,
            r.cece,
            r.brier_top,
            r.brier_multi,
            r.nll,
            r.full_calibration_error.map_or(String::new(), |v| v.to_string())
        ));
    }
    run.write(&a.out, csv.as_bytes())?;

    let pairs: Vec<(usize, f64)> = rows.iter().map(|r| (r.m, r.bandwidth)).collect();
    let law_path = a.law_out.clone().unwrap_or_else(|| sibling(&a.out, "law.json"));
    match fit_bandwidth_constant(&pairs, projection.output_dim) {
        Ok(law) => {
            say!("law: b = {:.6} * m^({:.4})", law.constant, BandwidthLaw::exponent(law.dim));
            run.write_json(&law_path, &law)?;
            run.note("law", law);
        }
        Err(e) => log::warn!("bandwidth law not fitted: {e}"),
    }
    run.note("rows", rows.len());
    run.finish(&a.out)
}

fn temp_scale(a: TempScaleArgs) -> Result<()> {
    let mut run = Run::new("temp-scale", &a, None);
    let cal = read_matrix(&mut run, &a.cal_logits, MatrixKind::Logits)?;
    let (labels, _) = read_labels(&mut run, &a.cal_labels)?;
    let logits = read_matrix(&mut run, &a.logits, MatrixKind::Logits)?;
    if logits.ncols() != cal.ncols() {
        return Err(KcalError::Validation(format!(
            "calibration logits have {} classes, targets {}",
            cal.ncols(),
            logits.ncols()
        )));
    }
    let model = fit_temperature(cal.view(), &labels)?;
    let probs = apply_temperature(&model, logits.view());
    run.write(&a.out, &encode_matrix(MatrixKind::Probabilities, probs.as_array())?)?;
    let report = a.report.clone().unwrap_or_else(|| sibling(&a.out, "temperature.json"));
    run.write_json(&report, &model)?;
    say!("temperature {}", model.temperature);
    run.note("temperature", model.temperature);
    run.note("at_search_bound", model.at_search_bound);
    run.finish(&a.out)
}
