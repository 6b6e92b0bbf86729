use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curvature_train::bench::bench_uniform;
use curvature_train::check::{parse_sizes, run_checks};
use curvature_train::config::{ExecutorConfig, RunConfig, ScheduleConfig};
use curvature_train::harness::{
    demo_newton_1d, demo_stochastic_mean, load_splits, train_with, write_summary, MetricsWriter,
};
use curvature_train::TrainError;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Curvature-rescaled training, self-checks and cost benchmarks.
#[derive(Parser)]
#[command(name = "curvature", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes metrics.csv and summary.json.
    Train(TrainArgs),
    /// Run the finite-difference checks on every layer kind.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated widths of the composite network.
        #[arg(long, default_value = "4,6,3", value_parser = |s: &str| parse_sizes(s).map(Sizes))]
        sizes: Sizes,
        /// Only the cases whose name starts with this.
        #[arg(long)]
        layer: Option<String>,
    },
    /// Compare gradient-only, plain and checkpointed curvature passes.
    Bench {
        #[arg(long, default_value_t = 8)]
        layers: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Checkpoint split; balanced by default.
        #[arg(long)]
        split: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One-dimensional demonstrations of the rescaled step.
    Demo(DemoArgs),
}

#[derive(Clone)]
struct Sizes(Vec<usize>);

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta3: Option<f64>,
    #[arg(long)]
    denom_const: Option<f64>,
    #[arg(long)]
    schedule: Option<ScheduleConfig>,
    #[arg(long)]
    executor: Option<ExecutorConfig>,
    /// Defaults to the directory holding the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Demo {
    Newton1d,
    StochasticMean,
}

#[derive(Args)]
struct DemoArgs {
    name: Demo,
    #[arg(long, default_value_t = 1.5)]
    theta0: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Number of standard-normal samples for stochastic-mean.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 10)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    beta3: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const NUMERIC_FAILURE: u8 = 1;
const USAGE_FAILURE: u8 = 2;

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args_os(), &mut std::io::stdout().lock()))
}

/// Parse `args`, run the command, and return the process exit status.
fn run<I, T>(args: I, out: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code() as u8;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args, out),
        Command::Check { seed, sizes, layer } => cmd_check(seed, &sizes.0, layer.as_deref(), out),
        Command::Bench {
            layers,
            width,
            batch,
            split,
            seed,
        } => cmd_bench(layers, width, batch, split, seed, out),
        Command::Demo(args) => cmd_demo(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                NUMERIC_FAILURE
            } else {
                USAGE_FAILURE
            }
        }
    }
}

fn io(e: std::io::Error) -> TrainError {
    TrainError::Io {
        path: "<stdout>".into(),
        source: e,
    }
}

fn cmd_train(args: TrainArgs, out: &mut dyn Write) -> Result<u8, TrainError> {
    let mut config = RunConfig::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new(".")).to_path_buf();
    config.resolve_paths(&base);
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v;
    }
    if let Some(v) = args.beta3 {
        config.beta3 = v;
    }
    if let Some(v) = args.denom_const {
        config.denom_const = v;
    }
    if let Some(v) = args.schedule {
        config.schedule = v;
    }
    if let Some(v) = args.executor {
        config.executor = v;
    }
    config.validate()?;

    let out_dir = args.out_dir.unwrap_or(base);
    std::fs::create_dir_all(&out_dir).map_err(|e| TrainError::Io {
        path: out_dir.clone(),
        source: e,
    })?;
    let csv_path = out_dir.join("metrics.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| TrainError::Io {
        path: csv_path.clone(),
        source: e,
    })?;
    let mut writer = MetricsWriter::new(file);
    let splits = load_splits(&config)?;
    let outcome = train_with(&config, &splits, |row| writer.write(row))?;
    let summary_path = out_dir.join("summary.json");
    write_summary(&summary_path, &outcome.summary)?;

    let s = &outcome.summary;
    writeln!(
        out,
        "{} iterations, train loss {:.6} -> {:.6}{}",
        s.iterations,
        s.initial_train_loss,
        s.final_train_loss,
        s.final_test_accuracy
            .map(|a| format!(", test accuracy {:.4}", a))
            .unwrap_or_default()
    )
    .map_err(io)?;
    writeln!(out, "wrote {} and {}", csv_path.display(), summary_path.display()).map_err(io)?;
    Ok(0)
}

fn cmd_check(seed: u64, sizes: &[usize], layer: Option<&str>, out: &mut dyn Write) -> Result<u8, TrainError> {
    let lines = run_checks(seed, sizes, layer)?;
    let mut failed = 0;
    for l in &lines {
        let verdict = match (l.passed(), l.required) {
            (true, _) => "PASS",
            (false, true) => {
                failed += 1;
                "FAIL"
            }
            (false, false) => "rejected",
        };
        writeln!(
            out,
            "{verdict:8} {:<52} err {:.3e}  tol {:.0e}",
            l.name, l.error, l.tolerance
        )
        .map_err(io)?;
    }
    let rules: Vec<&str> = lines
        .iter()
        .filter(|l| l.name.contains(" rule ") && l.passed())
        .filter_map(|l| l.name.rsplit(' ').next())
        .collect();
    if !rules.is_empty() {
        let mut rules = rules;
        rules.dedup();
        writeln!(
            out,
            "normalizing second-order rule passing the check: {}",
            rules.join(", ")
        )
        .map_err(io)?;
    }
    if failed > 0 {
        writeln!(out, "{failed} check(s) failed").map_err(io)?;
        Ok(NUMERIC_FAILURE)
    } else {
        writeln!(out, "all {} checks passed", lines.iter().filter(|l| l.required).count()).map_err(io)?;
        Ok(0)
    }
}

fn cmd_bench(
    layers: usize,
    width: usize,
    batch: usize,
    split: Option<usize>,
    seed: u64,
    out: &mut dyn Write,
) -> Result<u8, TrainError> {
    let r = bench_uniform(layers, width, batch, split, seed)?;
    writeln!(out, "layers {}  split L = {}", r.layers, r.split).map_err(io)?;
    writeln!(
        out,
        "{:<14} {:>10} {:>8} {:>10}",
        "schedule", "passes", "ratio", "peak slots"
    )
    .map_err(io)?;
    for row in &r.rows {
        writeln!(
            out,
            "{:<14} {:>10.3} {:>8.3} {:>10}",
            row.schedule, row.pass_units, row.ratio, row.peak_activation_slots
        )
        .map_err(io)?;
    }
    writeln!(
        out,
        "plain vs checkpointed max relative difference {:.3e}",
        r.max_output_diff
    )
    .map_err(io)?;
    Ok(0)
}

fn cmd_demo(args: DemoArgs, out: &mut dyn Write) -> Result<u8, TrainError> {
    match args.name {
        Demo::Newton1d => {
            for (k, theta) in demo_newton_1d(args.theta0, args.steps)?.iter().enumerate() {
                writeln!(out, "{k:4} {theta}").map_err(io)?;
            }
        }
        Demo::StochasticMean => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let xs: Vec<f64> = (0..args.samples).map(|_| StandardNormal.sample(&mut rng)).collect();
            let traj = demo_stochastic_mean(&xs, args.batch_size, args.steps, args.theta0, args.beta3, args.seed)?;
            writeln!(out, "{:>4} {:>22} {:>22}", "k", "theta", "batch mean").map_err(io)?;
            writeln!(out, "{:4} {:22.15}", 0, args.theta0).map_err(io)?;
            for (k, s) in traj.iter().enumerate() {
                writeln!(out, "{:4} {:22.15} {:22.15}", k + 1, s.theta, s.batch_mean).map_err(io)?;
            }
        }
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    struct Output {
        code: u8,
        stdout: String,
    }

    fn curvature(args: &[&str]) -> Output {
        let mut buf = Vec::new();
        let code = run(std::iter::once("curvature").chain(args.iter().copied()), &mut buf);
        Output {
            code,
            stdout: String::from_utf8(buf).unwrap(),
        }
    }

    fn stdout(o: &Output) -> String {
        o.stdout.clone()
    }

    const BLOBS: &str = r#"{
      "seed": 3,
      "dataset": { "kind": "blobs", "classes": 3, "per_class": 40, "dim": 2, "test_per_class": 10 },
      "network": [ { "type": "dense", "outputs": 8 }, { "type": "tanh" }, { "type": "dense", "outputs": 3 } ],
      "epochs": 2,
      "batch_size": 32
    }"#;

    fn write_config(dir: &Path, text: &str) -> String {
        let p = dir.join("run.json");
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_owned()
    }

    #[test]
    fn missing_config_is_an_io_error() {
        let o = curvature(&["train", "--config", "/definitely/not/here.json"]);
        assert_eq!(o.code, 2);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), r#"{"epochs": 1, "learning_rate": 0.1}"#);
        let o = curvature(&["train", "--config", &cfg]);
        assert_eq!(o.code, 2);
    }

    #[test]
    fn train_writes_metrics_beside_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), BLOBS);
        let o = curvature(&["train", "--config", &cfg, "--lambda", "1e-4"]);
        assert_eq!(o.code, 0);

        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(header, curvature_train::harness::METRICS_HEADER.join(","));
        assert_eq!(csv.lines().filter(|l| l.starts_with("epoch,")).count(), 2);

        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["config"]["lambda"], 1e-4);
        assert!(summary["wall_time_secs"].as_f64().is_some());
    }

    #[test]
    fn repeated_runs_give_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), BLOBS);
        let mut files = Vec::new();
        for out in ["a", "b"] {
            let out_dir = dir.path().join(out);
            let o = curvature(&["train", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
            assert!(o.code == 0);
            files.push(std::fs::read(out_dir.join("metrics.csv")).unwrap());
        }
        assert_eq!(files[0], files[1]);
    }

    #[test]
    fn flags_override_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), BLOBS);
        let o = curvature(&[
            "train",
            "--config",
            &cfg,
            "--schedule",
            "constant:0.5",
            "--executor",
            "checkpointed",
            "--beta3",
            "0.5",
            "--denom-const",
            "4",
            "--seed",
            "11",
        ]);
        assert!(o.code == 0);
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        let c = &summary["config"];
        assert_eq!(c["schedule"]["kind"], "constant");
        assert_eq!(c["executor"], "checkpointed");
        assert_eq!(
            (c["beta3"].as_f64(), c["denom_const"].as_f64(), c["seed"].as_u64()),
            (Some(0.5), Some(4.0), Some(11))
        );
    }

    #[test]
    fn overflow_is_a_numeric_failure() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            r#"{
              "dataset": { "kind": "blobs", "classes": 2, "per_class": 8, "dim": 4, "center_scale": 1e307 },
              "network": [ { "type": "dense", "outputs": 2 } ],
              "epochs": 1, "batch_size": 4
            }"#,
        );
        let o = curvature(&["train", "--config", &cfg]);
        assert_eq!(o.code, 1);
    }

    #[test]
    fn shape_errors_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(
            dir.path(),
            r#"{
              "dataset": { "kind": "blobs", "classes": 2, "per_class": 8, "dim": 2 },
              "network": [ { "type": "dense", "outputs": 2 } ],
              "loss": "mse",
              "epochs": 1, "batch_size": 4
            }"#,
        );
        assert_eq!(curvature(&["train", "--config", &cfg]).code, 2);
        let bad_schedule = curvature(&["train", "--config", &cfg, "--schedule", "sideways"]);
        assert_eq!(bad_schedule.code, 2);
    }

    #[test]
    fn newton_demo_prints_the_cubing_map() {
        let o = curvature(&["demo", "newton1d", "--theta0", "1.5", "--steps", "3"]);
        assert!(o.code == 0);
        let values: Vec<f64> = stdout(&o)
            .lines()
            .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(values.len(), 4);
        for (got, want) in values.iter().zip([1.5, -3.375, 38.443359375, -56815.128662109375]) {
            assert!((got - want).abs() <= 1e-10 * want.abs(), "{got} vs {want}");
        }

        let o = curvature(&["demo", "newton1d", "--theta0", "0.5", "--steps", "4"]);
        let last: f64 = stdout(&o)
            .lines()
            .last()
            .unwrap()
            .split_whitespace()
            .nth(1)
            .unwrap()
            .parse()
            .unwrap();
        assert!(last.abs() < 1e-20);
    }

    #[test]
    fn stochastic_mean_demo_runs() {
        let o = curvature(&[
            "demo",
            "stochastic-mean",
            "--steps",
            "5",
            "--batch-size",
            "4",
            "--samples",
            "20",
            "--theta0",
            "10",
        ]);
        assert!(o.code == 0);
        for line in stdout(&o).lines().skip(2) {
            let cols: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
            assert!((cols[0] - cols[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(curvature(&["demo", "newton2d"]).code, 2);
        assert_eq!(curvature(&["check", "--sizes", "3,,2"]).code, 2);
        assert_eq!(curvature(&["check", "--layer", "relu"]).code, 2);
        assert_eq!(curvature(&["frobnicate"]).code, 2);
    }

    #[test]
    fn check_reports_the_normalizing_rule() {
        let o = curvature(&["check", "--layer", "normalizing"]);
        assert!(o.code == 0);
        let out = stdout(&o);
        assert!(out.contains("rule passing the check: full-second-derivative"));
        assert!(out.lines().any(|l| l.starts_with("rejected") && l.contains("printed")));
    }

    #[test]
    fn bench_reports_ratios_and_split() {
        let o = curvature(&["bench", "--layers", "12", "--width", "4", "--batch", "3"]);
        assert!(o.code == 0);
        let out = stdout(&o);
        assert!(out.contains("split L = 6"));
        let ratios: Vec<&str> = out
            .lines()
            .skip(2)
            .take(3)
            .map(|l| l.split_whitespace().nth(2).unwrap())
            .collect();
        assert_eq!(ratios, vec!["1.000", "1.500", "2.000"]);
    }
}
