//! Command implementations behind the `amformer` binary.
//!
//! Every command takes a decoded [`RunConfig`], writes its outputs plus an
//! echo of the effective configuration into the output directory, and returns
//! a summary. Errors map to exit codes with [`CliError::exit_code`].

use std::path::{Path, PathBuf};
use std::time::Instant;

use amformer::model::{
    count_score_ops, run_gradcheck, AmformerConfig, Batch, Checkpoint, GradcheckConfig, GradcheckRow, InputSpec, Mode,
    Model,
};
use amformer::rng::{derive_seed, seeded, stream};
use amformer::synth::{generate, sample_spec, split_train_test};
use amformer::tabular::{
    apply_normalizer, fit_normalizer, read_csv, sidecar_path, write_csv, Dataset, Sidecar, TaskKind,
};
use amformer::train::experiment::{run_experiment, CellCache, Experiment, ExperimentTable};
use amformer::train::{evaluate, train, Metrics, TrainReport};
use rand::Rng as _;
use serde::Serialize;
use thiserror::Error;

mod config;

pub use config::{
    DataSection, DataTask, ExperimentSection, FlopcountSection, GradcheckSection, RunConfig, CONFIG_ECHO,
    OUTPUT_ROOT_ENV,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Core(#[from] amformer::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for numeric failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) => 2,
            CliError::Core(e) if e.is_numeric() => 2,
            _ => 1,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const CHECKPOINT: &str = "model.json";
pub const TRAIN_REPORT: &str = "train_report.jsonl";
pub const METRICS: &str = "metrics.json";
pub const GRADCHECK_CSV: &str = "gradcheck.csv";
pub const FLOPCOUNT_CSV: &str = "flopcount.csv";

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Creates the output directory and writes the effective config into it.
pub fn prepare_output(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_path();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join(CONFIG_ECHO), &cfg.to_toml())?;
    Ok(dir)
}

#[derive(Clone, Debug)]
pub struct GenSummary {
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_path: PathBuf,
    pub test_path: PathBuf,
}

/// Generates the synthetic benchmark and writes a stratified train/test split
/// with schema sidecars. Features are written unnormalized.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenSummary> {
    let dir = prepare_output(cfg)?;
    let d = &cfg.data;
    let spec = sample_spec(
        d.n_features,
        d.n_terms,
        d.classes,
        d.n_samples,
        derive_seed(cfg.seed, &[stream::SYNTH_DATA]),
    )?;
    let table = generate(&spec)?;
    let (tr, te) = split_train_test(&table, d.train_frac, derive_seed(cfg.seed, &[stream::SPLIT]))?;
    let spec_json = serde_json::to_value(&spec).expect("spec serializes");
    let mut paths = Vec::new();
    for (name, part) in [(TRAIN_CSV, &tr), (TEST_CSV, &te)] {
        let ds = match d.task {
            DataTask::Classification => part.to_dataset(),
            DataTask::Regression => part.to_regression_dataset(),
        };
        let path = dir.join(name);
        write_csv(&ds, &path)?;
        Sidecar::new(&ds.schema, None, Some(spec_json.clone())).write(&sidecar_path(&path))?;
        paths.push(path);
    }
    log::info!("wrote {} train and {} test rows to {}", tr.len(), te.len(), dir.display());
    let test_path = paths.pop().expect("two files");
    Ok(GenSummary {
        train_rows: tr.len(),
        test_rows: te.len(),
        train_path: paths.pop().expect("two files"),
        test_path,
    })
}

/// Reads `path` using the schema in its sidecar.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let sc = Sidecar::read(&sidecar_path(path))?;
    Ok(read_csv(path, &sc.schema())?)
}

/// Trains on `train.csv` of the data directory, evaluating on `test.csv` when
/// present. Writes the checkpoint (with schema and normalizer) and the JSONL report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    let data = cfg.data_path();
    let train_raw = load_dataset(&data.join(TRAIN_CSV))?;
    let test_path = data.join(TEST_CSV);
    let test_raw = if test_path.exists() {
        Some(load_dataset(&test_path)?)
    } else {
        None
    };
    let dir = prepare_output(cfg)?;
    let stats = fit_normalizer(&train_raw);
    for w in &stats.warnings {
        log::warn!("{w}");
    }
    let train_ds = apply_normalizer(&train_raw, &stats)?;
    let test_ds = test_raw.map(|t| apply_normalizer(&t, &stats)).transpose()?;
    let mcfg = AmformerConfig {
        task: train_ds.schema.task,
        ..cfg.model.clone()
    };
    let mut model = Model::new(
        mcfg,
        InputSpec::from_schema(&train_ds.schema),
        derive_seed(cfg.seed, &[stream::MODEL_INIT]),
    )?;
    let report = train(&mut model, &train_ds, test_ds.as_ref(), &cfg.train_config(), "amformer")?;
    Checkpoint::new(&model, Some(train_raw.schema.clone()), Some(stats)).save(&dir.join(CHECKPOINT))?;
    write(&dir.join(TRAIN_REPORT), &report.to_jsonl())?;
    log::info!(
        "trained {} steps in {:.1}s, final eval {:?}",
        report.steps,
        report.wall_clock_s,
        report.final_eval
    );
    Ok(report)
}

/// Evaluates a checkpoint on `data` (default: `test.csv` of the data directory)
/// and writes `metrics.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> Result<Metrics> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let path = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.data_path().join(TEST_CSV));
    let raw = match &ck.schema {
        Some(schema) => read_csv(&path, schema)?,
        None => load_dataset(&path)?,
    };
    let ds = match &ck.stats {
        Some(stats) => apply_normalizer(&raw, stats)?,
        None => raw,
    };
    let metrics = evaluate(&model, &ds, 1024)?;
    let dir = prepare_output(cfg)?;
    let text = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write(&dir.join(METRICS), &(text + "\n"))?;
    Ok(metrics)
}

/// `finegrained`, `data-efficiency`, `generalization`, `ablation` or `all`.
pub fn parse_experiments(name: &str) -> Result<Vec<Experiment>> {
    if name == "all" {
        return Ok(Experiment::ALL.to_vec());
    }
    name.parse::<Experiment>()
        .map(|e| vec![e])
        .map_err(|e| CliError::Validation(format!("{e}; expected one of finegrained, data-efficiency, generalization, ablation, all")))
}

/// Runs the named experiments on `jobs` threads, writing `<name>.csv` for each.
/// Cells shared between experiments are trained once.
pub fn cmd_experiment(cfg: &RunConfig, name: &str, jobs: usize) -> Result<Vec<(Experiment, ExperimentTable)>> {
    let experiments = parse_experiments(name)?;
    let ecfg = cfg.experiment();
    let dir = prepare_output(cfg)?;
    let mut cache = CellCache::new();
    let mut out = Vec::new();
    for e in experiments {
        let (table, _) = run_experiment(e, &ecfg, jobs, &mut cache)?;
        table.write_csv(&dir.join(format!("{}.csv", e.name())))?;
        out.push((e, table));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub rows: Vec<GradcheckRow>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradcheckOutcome {
    /// `PASS max_rel_err < 1e-4` style summary line.
    pub fn summary(&self) -> String {
        if self.passed {
            format!("PASS max_rel_err {:.3e} < {:e}", self.max_rel_err, self.tolerance)
        } else {
            format!("FAIL max_rel_err {:.3e} >= {:e}", self.max_rel_err, self.tolerance)
        }
    }
}

#[derive(Serialize)]
struct GradcheckCsvRow<'a> {
    config: &'a str,
    max_rel_err: f64,
    worst_param: &'a str,
    worst_index: usize,
    analytic: f64,
    numeric: f64,
    checked: usize,
    attempts: usize,
    passed: bool,
}

pub fn gradcheck_config(cfg: &RunConfig) -> GradcheckConfig {
    let g = &cfg.gradcheck;
    let heads = cfg.model.heads.min(g.d).max(1);
    GradcheckConfig {
        model: AmformerConfig {
            d: g.d,
            heads: if g.d % heads == 0 { heads } else { 1 },
            k: g.k,
            prompt_schedule: vec![g.prompts; cfg.model.layers],
            task: TaskKind::Multiclass { classes: 3 },
            ..cfg.model.clone()
        },
        n_features: g.n_features,
        batch: g.batch,
        h: g.h,
        tolerance: g.tolerance,
        seed: cfg.seed,
    }
}

/// Finite-difference check of the whole model over the six ablation configs.
/// Writes `gradcheck.csv`; a failed check is reported in the outcome, not as an error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckOutcome> {
    let gcfg = gradcheck_config(cfg);
    let dir = prepare_output(cfg)?;
    let rows = run_gradcheck(&gcfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(GradcheckCsvRow {
            config: &r.name,
            max_rel_err: r.report.max_rel_err,
            worst_param: &r.report.worst_param,
            worst_index: r.report.worst_index,
            analytic: r.report.analytic,
            numeric: r.report.numeric,
            checked: r.report.checked,
            attempts: r.attempts,
            passed: r.passed,
        })
        .map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8");
    write(&dir.join(GRADCHECK_CSV), &text)?;
    let max_rel_err = rows.iter().map(|r| r.report.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckOutcome {
        passed: rows.iter().all(|r| r.passed),
        rows,
        max_rel_err,
        tolerance: gcfg.tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "N_p")]
    pub n_p: usize,
    /// First-layer score multiplies with `N_p` prompt queries.
    pub prompt_ops: u64,
    /// The same with one query per feature.
    pub dense_ops: u64,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_forward_s: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dense_forward_s: Option<f64>,
}

/// The model used for flop counts: `[model]` with `N_p` prompts in every layer,
/// or with prompts off for the dense count.
pub fn flop_model_config(cfg: &RunConfig, prompts: bool) -> AmformerConfig {
    AmformerConfig {
        use_prompts: prompts,
        prompt_schedule: if prompts {
            vec![cfg.flopcount.prompts; cfg.model.layers]
        } else {
            Vec::new()
        },
        task: TaskKind::Multiclass { classes: 2 },
        ..cfg.model.clone()
    }
}

/// Median wall-clock seconds of an eval-mode forward pass on `batch` random rows.
pub fn time_forward(mcfg: &AmformerConfig, n: usize, batch: usize, repeats: usize, seed: u64) -> Result<f64> {
    let model = Model::new(mcfg.clone(), InputSpec::numeric(n), seed)?;
    let mut rng = seeded(seed);
    let x: Vec<f64> = (0..batch * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = Batch::numeric_only(batch, x);
    model.forward(&b, Mode::Eval, None)?;
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            model.forward(&b, Mode::Eval, None).map(|_| t.elapsed().as_secs_f64())
        })
        .collect::<std::result::Result<_, _>>()?;
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Attention-score cost with and without prompts for every `N` of `[flopcount]`.
/// Writes `flopcount.csv`.
pub fn cmd_flopcount(cfg: &RunConfig) -> Result<Vec<FlopRow>> {
    let f = &cfg.flopcount;
    let (pcfg, dcfg) = (flop_model_config(cfg, true), flop_model_config(cfg, false));
    pcfg.validate()?;
    let mut rows = Vec::new();
    for &n in &f.n {
        let (prompt_ops, dense_ops) = (count_score_ops(&pcfg, n), count_score_ops(&dcfg, n));
        let (mut pt, mut dt) = (None, None);
        if f.timing {
            let seed = derive_seed(cfg.seed, &[stream::MODEL_INIT, n as u64]);
            pt = Some(time_forward(&pcfg, n, f.timing_batch, f.timing_repeats, seed)?);
            dt = Some(time_forward(&dcfg, n, f.timing_batch, f.timing_repeats, seed)?);
        }
        rows.push(FlopRow {
            n,
            n_p: f.prompts,
            prompt_ops,
            dense_ops,
            ratio: prompt_ops as f64 / dense_ops as f64,
            prompt_forward_s: pt,
            dense_forward_s: dt,
        });
    }
    let dir = prepare_output(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| CliError::Validation(e.to_string()))?;
    }
    let text = String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv is utf-8");
    write(&dir.join(FLOPCOUNT_CSV), &text)?;
    Ok(rows)
}
