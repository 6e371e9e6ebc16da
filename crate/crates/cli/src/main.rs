use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lampdet::config::{Mode, PipelineConfig};
use lampdet::pipeline::{
    comparison_csv, load_inputs, run_detect, run_eval, run_modes, run_synth, write_file, DetectionLog, ModeRow,
    PipelineError,
};

const LOG_FILE: &str = "detections.jsonl";

#[derive(Parser)]
#[command(name = "lampdet", version, about = "Ceiling lamp detection with orientation constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene into a dataset directory.
    Synth(Common),
    /// Run detection over a dataset and write the detection log.
    Detect(Common),
    /// Cluster a detection log and write the report and tables.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Log to evaluate; defaults to the one in the output directory.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Detect and evaluate under every mode and write a comparison table.
    AllModes(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(p) if !p.exists() => return Err(PipelineError::Ingest(format!("config {} not found", p.display()))),
            Some(p) => PipelineConfig::load(p).map_err(PipelineError::Validation)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        Ok(cfg)
    }
}

fn write_log(log: &DetectionLog, dir: &Path) -> Result<PathBuf, PipelineError> {
    let path = dir.join(LOG_FILE);
    write_file(&path, &log.to_jsonl())?;
    Ok(path)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth(c) => {
            let cfg = c.config()?;
            let paths = run_synth(&cfg, &c.out_dir)?;
            println!("wrote dataset to {}", paths.images.parent().unwrap_or(&c.out_dir).display());
        }
        Command::Detect(c) => {
            let cfg = c.config()?;
            let log = run_detect(&cfg)?;
            let path = write_log(&log, &c.out_dir)?;
            let accepted = log.records.iter().filter(|r| r.accepted).count();
            println!("{} records, {accepted} accepted, log at {}", log.records.len(), path.display());
        }
        Command::Eval { common, log } => {
            let cfg = common.config()?;
            let log_path = log.unwrap_or_else(|| common.out_dir.join(LOG_FILE));
            let log = DetectionLog::load(&log_path)?;
            let out = run_eval(&log, &cfg)?;
            out.write(&common.out_dir)?;
            println!("{} detections in {} clusters", out.report.counts.detections, out.report.counts.clusters);
        }
        Command::AllModes(c) => {
            let cfg = c.config()?;
            let inputs = load_inputs(&cfg)?;
            let runs = run_modes(&inputs, &cfg)?;
            let mut rows = Vec::new();
            for r in &runs {
                let dir = c.out_dir.join(r.mode.name());
                write_log(&r.log, &dir)?;
                r.eval.write(&dir)?;
                rows.push(ModeRow::from_report(&r.eval.report));
            }
            write_file(&c.out_dir.join("comparison.csv"), &comparison_csv(&rows))?;
            write_file(
                &c.out_dir.join("comparison.json"),
                &serde_json::to_string_pretty(&rows).expect("rows serialise"),
            )?;
            print!("{}", comparison_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                PipelineError::Ingest(_) => 2,
                PipelineError::Validation(_) => 3,
                PipelineError::Io { .. } => 1,
            })
        }
    }
}
