use std::path::PathBuf;
use std::process::ExitCode;

use amformer_cli::{
    cmd_eval, cmd_experiment, cmd_flopcount, cmd_gen_data, cmd_gradcheck, cmd_train, CliError, RunConfig, CHECKPOINT,
};
use clap::{Parser, Subcommand};

/// Arithmetic-attention tabular transformer: data generation, training,
/// experiments and checks.
#[derive(Parser, Debug)]
#[command(name = "amformer", version)]
struct Cli {
    /// TOML run configuration (defaults to the desk preset).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Master seed; same as `--set seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for experiments (results do not depend on it).
    #[arg(long, short, global = true)]
    jobs: Option<usize>,
    /// Output directory; same as `--set output_dir=DIR`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark as train.csv / test.csv.
    GenData,
    /// Train on the generated data; writes model.json and train_report.jsonl.
    Train,
    /// Evaluate a checkpoint; writes metrics.json.
    Eval {
        /// Defaults to model.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to test.csv in the data directory.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run an experiment: finegrained, data-efficiency, generalization, ablation or all.
    Experiment { name: String },
    /// Finite-difference gradient check over the ablation grid.
    Gradcheck,
    /// Attention-score operation counts with and without prompts.
    Flopcount {
        /// Also time forward passes.
        #[arg(long)]
        timing: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut sets = cli.sets.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &sets)?;
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    match cli.command {
        Command::GenData => {
            let s = cmd_gen_data(&cfg)?;
            println!("{} ({} rows)", s.train_path.display(), s.train_rows);
            println!("{} ({} rows)", s.test_path.display(), s.test_rows);
        }
        Command::Train => {
            let r = cmd_train(&cfg)?;
            let eval = r.final_eval.map(|m| serde_json::to_string(&m).expect("metrics serialize"));
            println!("{} steps, final eval {}", r.steps, eval.unwrap_or_else(|| "-".into()));
        }
        Command::Eval { checkpoint, data } => {
            let ck = checkpoint.unwrap_or_else(|| cfg.output_path().join(CHECKPOINT));
            let m = cmd_eval(&cfg, &ck, data.as_deref())?;
            println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
        }
        Command::Experiment { name } => {
            for (e, table) in cmd_experiment(&cfg, &name, jobs)? {
                println!("{}:", e.name());
                for r in table.rows.iter().filter(|r| r.seed == "median") {
                    let f = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
                    println!(
                        "  {:<22} C={:<4} f1={:<4} f2={:<4} {:<28} {:.4}",
                        r.model,
                        r.classes,
                        f(r.f1),
                        f(r.f2),
                        r.metric,
                        r.value
                    );
                }
            }
        }
        Command::Gradcheck => {
            let o = cmd_gradcheck(&cfg)?;
            for r in &o.rows {
                println!(
                    "  {:<20} {:.3e} ({}, {} entries)",
                    r.name, r.report.max_rel_err, r.report.worst_param, r.report.checked
                );
            }
            println!("{}", o.summary());
            if !o.passed {
                return Err(CliError::Numeric(o.summary()));
            }
        }
        Command::Flopcount { timing } => {
            cfg.flopcount.timing |= timing;
            for r in cmd_flopcount(&cfg)? {
                print!("N={} N_p={} prompt_ops={} dense_ops={} ratio={}", r.n, r.n_p, r.prompt_ops, r.dense_ops, r.ratio);
                if let (Some(p), Some(d)) = (r.prompt_forward_s, r.dense_forward_s) {
                    print!(" forward {p:.4}s vs {d:.4}s");
                }
                println!();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
