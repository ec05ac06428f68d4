//! Command-line front end of the experiment harness.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use csiveil::crypto::{hash_key, sample_psi, MagnitudeRange};
use csiveil::harness::run::{
    train_reference_classifier, write_csv, OptimizationSetup, RESULT_HEADER, TRAINING_HEADER,
};
use csiveil::harness::{reference_samples, report, run_experiment, ExperimentConfig, Lab, Recorder, ResultRow};
use csiveil::metrics::{eve_sdnr, sensing_snr, to_db};
use csiveil::optimizer::{objectives, optimize_psi};

#[derive(Parser)]
#[command(name = "csiveil", version, about = "Channel encryption for privacy-preserving Wi-Fi sensing")]
struct Cli {
    /// Experiment configuration (TOML); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record the reference scenario and write per-recording signal levels.
    Simulate {
        /// Recordings per class.
        #[arg(long, default_value_t = 4)]
        per_class: usize,
    },
    /// Optimize one encryption matrix against the reference deployment.
    Optimize,
    /// Train the gesture classifier on clean CSI.
    TrainClassifier,
    /// Train the classifier (unless one is configured) and the sub-model.
    TrainSubmodel,
    /// Run every role and sweep and write the result bundle.
    Evaluate,
    /// Run the configured eavesdropper attacks.
    Attack,
    /// Aggregate a result bundle into figure tables and a summary.
    Report {
        /// Bundle directory; defaults to the output directory.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn models_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let d = cfg.out_dir.join("models");
    fs::create_dir_all(&d)?;
    Ok(d)
}

fn simulate(cfg: &ExperimentConfig, per_class: usize) -> Result<()> {
    let rec = Recorder::new(cfg.reference.clone(), cfg.features.clone())?;
    let rc = &rec.reference;
    let (train, _) = reference_samples(rc, cfg.seed);
    let psi = sample_psi(rc.antennas, rc.num_packets(), cfg.seed, MagnitudeRange::UNIT)?;
    let mut rows = Vec::new();
    for (i, sample) in train.iter().take(per_class * csiveil::sensing::NUM_CLASSES).enumerate() {
        let sched = rec.schedule(sample, 0.0)?;
        for (role, at) in [("bob_s", rc.bob_s), ("bob_c", rc.bob_c), ("eve", rc.eve)] {
            let csi = rec.record(sample, at, &sched)?;
            rows.push(ResultRow {
                point: i,
                axis: "simulate".into(),
                coord: sample.label() as f64,
                role: role.into(),
                psi: "none".into(),
                n: csi.num_packets(),
                sdnr_db: Some(to_db(sensing_snr(&csi))),
                ..ResultRow::default()
            });
            if role == "eve" {
                rows.push(ResultRow {
                    point: i,
                    axis: "simulate".into(),
                    coord: sample.label() as f64,
                    role: "eve".into(),
                    psi: "random".into(),
                    n: csi.num_packets(),
                    sdnr_db: Some(eve_sdnr(&csi, &psi)?.value_db),
                    ..ResultRow::default()
                });
            }
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    let p = cfg.out_dir.join("simulation.csv");
    write_csv(&p, &rows, RESULT_HEADER)?;
    println!("wrote {}", p.display());
    Ok(())
}

fn optimize(cfg: &ExperimentConfig) -> Result<()> {
    let rec = Recorder::new(cfg.reference.clone(), cfg.features.clone())?;
    let rc = &rec.reference;
    let (train, _) = reference_samples(rc, cfg.seed);
    let setup = OptimizationSetup::new(&rec, &train[0], cfg)?;
    let init = sample_psi(rc.antennas, rc.num_packets(), cfg.seed, MagnitudeRange::UNIT)?;
    let o = &cfg.optimization;
    let (psi, trace) = optimize_psi(&init, &o.weights, &setup.bounds, &setup.bundle, &o.params)?;
    let dir = models_dir(cfg)?;
    psi.save(&dir.join("optimized.psi"))?;
    fs::write(dir.join("optimized.key"), hash_key(&psi).to_hex())?;
    trace.save_csv(&cfg.out_dir.join("optimization_trace.csv"))?;
    let before = objectives(&setup.truth, &init)?;
    let after = objectives(&setup.truth, &psi)?;
    println!("feasible {} converged {} iterations {}", trace.feasible, trace.converged, trace.rows.len());
    for (name, b, a) in [
        ("eta_c_bob", before.eta_c_bob, after.eta_c_bob),
        ("eta_sd_bob", before.eta_sd_bob, after.eta_sd_bob),
        ("eta_sd_eve", before.eta_sd_eve, after.eta_sd_eve),
    ] {
        println!("{name}: {:.3} dB -> {:.3} dB", to_db(b), to_db(a));
    }
    Ok(())
}

fn train_classifier(cfg: &ExperimentConfig) -> Result<()> {
    let rec = Recorder::new(cfg.reference.clone(), cfg.features.clone())?;
    let (train, test) = reference_samples(&rec.reference, cfg.seed);
    let (r, rows) = train_reference_classifier(&rec, &train, &test, cfg)?;
    let p = models_dir(cfg)?.join("classifier.mcnn");
    r.save(&p)?;
    write_csv(&cfg.out_dir.join("training_classifier.csv"), &rows, TRAINING_HEADER)?;
    if let Some(acc) = rows.last().and_then(|r| r.eval_accuracy) {
        println!("held-out accuracy {acc:.4}");
    }
    println!("wrote {}", p.display());
    Ok(())
}

fn train_submodel(cfg: &ExperimentConfig) -> Result<()> {
    let lab = Lab::prepare(cfg)?;
    let dir = models_dir(cfg)?;
    if cfg.classifier_path.is_none() {
        lab.classifier.save(&dir.join("classifier.mcnn"))?;
    }
    lab.submodel.save(&dir.join("submodel.mcnn"))?;
    for m in &lab.family {
        m.psi.save(&dir.join(format!("{}.psi", m.id)))?;
    }
    write_csv(&cfg.out_dir.join("training.csv"), &lab.training, TRAINING_HEADER)?;
    if let Some(acc) = lab.training.iter().rev().find(|r| r.model == "submodel").and_then(|r| r.eval_accuracy) {
        println!("held-out sub-model accuracy {acc:.4}");
    }
    Ok(())
}

fn attack(cfg: &ExperimentConfig) -> Result<bool> {
    let lab = Lab::prepare(cfg)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for (i, &a) in cfg.attacks.iter().enumerate() {
        match lab.attack_rows(i, a) {
            Ok(r) => {
                for row in &r {
                    println!("{}: accuracy {:.4} over {}", row.role, row.accuracy.unwrap_or(f64::NAN), row.n);
                }
                rows.extend(r);
            }
            Err(e) => {
                eprintln!("{}: {e}", a.name());
                ok = false;
            }
        }
    }
    fs::create_dir_all(&cfg.out_dir)?;
    write_csv(&cfg.out_dir.join("attack.csv"), &rows, RESULT_HEADER)?;
    Ok(ok)
}

fn run_report(bundle: &Path, out: &Path) -> Result<()> {
    let r = report(bundle, out)?;
    for c in &r.checks {
        println!("{}", c.line());
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Simulate { per_class } => simulate(&cfg, *per_class)?,
        Command::Optimize => optimize(&cfg)?,
        Command::TrainClassifier => train_classifier(&cfg)?,
        Command::TrainSubmodel => train_submodel(&cfg)?,
        Command::Evaluate => {
            let s = run_experiment(&cfg)?;
            for (stage, secs) in &s.timings {
                println!("{stage}: {secs:.1} s");
            }
            println!("{} points, {} failed; bundle in {}", s.points, s.failed_points, s.out_dir.display());
            return Ok(s.failed_points == 0);
        }
        Command::Attack => return attack(&cfg),
        Command::Report { bundle } => {
            let b = bundle.clone().unwrap_or_else(|| cfg.out_dir.clone());
            run_report(&b, &cfg.out_dir.join("report"))?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
