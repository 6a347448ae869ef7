//! Batch entry points around the gate-fusion pipeline.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 numeric failure,
//! 4 i/o or corruption, 5 verification failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use briges_core::align::Raster;
use briges_core::error::Error;
use briges_core::gradcheck::gradcheck;
use briges_core::io::{read_checkpoint, write_checkpoint, write_dmap};
use briges_core::losses::LossMode;
use briges_core::metrics::{average_rank, format_rank_table, Direction};
use briges_core::pipeline::StubModel;
use briges_core::{config::ModelConfig, gate::attention_entropy};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "briges",
    version,
    about = "Bridging-gate fusion: train, evaluate, ablate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the gates against the frozen synthetic generator.
    Train {
        /// Flat key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for checkpoint, loss log, and digest report.
        #[arg(long)]
        out: PathBuf,
        /// Run seed driving batch sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Step budget; defaults to the config's `steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Batch size; defaults to the config's `batch`.
        #[arg(long)]
        batch: Option<usize>,
        /// Loss mode override (v1 or v2).
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint on synthetic samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
        /// Inference temperature.
        #[arg(long, default_value_t = 2.5)]
        tau: f64,
        /// Comma-separated evaluation seeds.
        #[arg(long, default_value = "0,1,2,3,4,5,6,7")]
        seeds: String,
    },
    /// Run one forward pass and write the predicted raster as DMAP.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate several temperatures on the same seeds and rank them.
    AblateTau {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated temperature settings.
        #[arg(long, default_value = "2,2.5,3,3.5,4")]
        taus: String,
        #[arg(long, default_value = "0,1,2,3,4,5,6,7")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare gate gradients against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Test fixture: scale one analytic gradient to prove detection.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write attention weights and per-row entropies for one sample.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 2.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Parameter(_) => 2,
        Error::Io(_) | Error::Format(_) => 4,
        Error::NonFinite(_)
        | Error::Dimension(_)
        | Error::Data(_)
        | Error::Degenerate(_)
        | Error::Contract(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            steps,
            batch,
            mode,
        } => cmd_train(&config, &out, seed, steps, batch, mode.as_deref()),
        Command::Eval {
            ckpt,
            report,
            tau,
            seeds,
        } => cmd_eval(&ckpt, &report, tau, &seeds),
        Command::Infer {
            ckpt,
            seed,
            tau,
            out,
        } => cmd_infer(&ckpt, seed, tau, &out),
        Command::AblateTau {
            ckpt,
            taus,
            seeds,
            out,
        } => cmd_ablate_tau(&ckpt, &taus, &seeds, &out),
        Command::Gradcheck {
            seed,
            instances,
            inject_fault,
        } => {
            return cmd_gradcheck(seed, instances, inject_fault);
        }
        Command::DumpAttn {
            ckpt,
            seed,
            tau,
            out,
        } => cmd_dump_attn(&ckpt, seed, tau, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn parse_seed_list(text: &str) -> Result<Vec<u64>, Error> {
    let seeds: Result<Vec<u64>, _> = text.split(',').map(|s| s.trim().parse::<u64>()).collect();
    let seeds = seeds.map_err(|_| Error::Parameter(format!("invalid seed list `{text}`")))?;
    if seeds.is_empty() {
        return Err(Error::Parameter("seed list is empty".into()));
    }
    Ok(seeds)
}

fn require_tau(tau: f64) -> Result<(), Error> {
    if tau.is_nan() || tau < 1.0 {
        return Err(Error::Parameter(format!(
            "temperature must be at least 1, got {tau}"
        )));
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<ModelConfig, Error> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Parameter(format!("cannot read config file {}: {e}", path.display()))
    })?;
    ModelConfig::parse(&text)
}

fn cmd_train(
    config_path: &Path,
    out: &Path,
    seed: u64,
    steps: Option<usize>,
    batch: Option<usize>,
    mode: Option<&str>,
) -> Result<(), Error> {
    let mut cfg = load_config(config_path)?;
    if let Some(mode) = mode {
        cfg.mode = LossMode::parse(mode)?;
    }
    let steps = steps.unwrap_or(cfg.steps);
    let batch = batch.unwrap_or(cfg.batch);
    cfg.steps = steps;
    cfg.validate()?;
    fs::create_dir_all(out)?;

    let mut model = StubModel::new(cfg)?;
    let log = model.train(seed, steps, batch)?;

    let mut csv = String::from("step,lr,loss\n");
    for e in &log.entries {
        csv.push_str(&format!("{},{},{}\n", e.step, e.lr, e.loss));
    }
    fs::write(out.join("loss_log.csv"), csv)?;
    write_checkpoint(&out.join("checkpoint.bgck"), &model)?;
    fs::write(
        out.join("freeze_digest.txt"),
        format!(
            "before={}\nafter={}\nunchanged={}\n",
            log.digest_before,
            log.digest_after,
            log.digest_before == log.digest_after
        ),
    )?;
    let first = log.entries.first().expect("at least one step");
    let last = log.entries.last().expect("at least one step");
    println!(
        "trained {} steps: loss {} -> {} (ratio {:.4})",
        steps,
        first.loss,
        last.loss,
        last.loss / first.loss
    );
    Ok(())
}

fn eval_csv(model: &StubModel, seeds: &[u64], tau: f64) -> Result<String, Error> {
    let report = model.evaluate(seeds, tau)?;
    let mut csv = String::from("dataset,absrel,delta1,scale,shift,n_valid\n");
    for (seed, r) in &report.per_seed {
        csv.push_str(&format!(
            "seed_{seed},{},{},{},{},{}\n",
            r.absrel, r.delta1, r.scale, r.shift, r.n_valid
        ));
    }
    let a = &report.aggregate;
    csv.push_str(&format!(
        "aggregate,{},{},{},{},{}\n",
        a.absrel, a.delta1, a.scale, a.shift, a.n_valid
    ));
    Ok(csv)
}

fn cmd_eval(ckpt: &Path, report_path: &Path, tau: f64, seeds: &str) -> Result<(), Error> {
    require_tau(tau)?;
    let seeds = parse_seed_list(seeds)?;
    let model = read_checkpoint(ckpt)?;
    let csv = eval_csv(&model, &seeds, tau)?;
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(report_path, &csv)?;
    let aggregate = csv.lines().last().expect("aggregate row");
    println!("{aggregate}");
    Ok(())
}

fn cmd_infer(ckpt: &Path, seed: u64, tau: f64, out: &Path) -> Result<(), Error> {
    require_tau(tau)?;
    let model = read_checkpoint(ckpt)?;
    let (raster, _) = model.forward(seed, tau)?;
    fs::create_dir_all(out)?;
    let cfg = model.config();
    let path = out.join(format!("pred_seed{seed}.dmap"));
    write_dmap(&path, &Raster::new(cfg.out_h, cfg.out_w, 1, raster)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate_tau(ckpt: &Path, taus: &str, seeds: &str, out: &Path) -> Result<(), Error> {
    let parsed: Result<Vec<f64>, _> = taus.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let parsed =
        parsed.map_err(|_| Error::Parameter(format!("invalid temperature list `{taus}`")))?;
    let mut unique: Vec<f64> = Vec::new();
    for t in parsed {
        require_tau(t)?;
        if unique.contains(&t) {
            eprintln!("warning: duplicate temperature {t} dropped");
        } else {
            unique.push(t);
        }
    }
    if unique.len() < 2 {
        return Err(Error::Parameter(format!(
            "ablation needs at least 2 distinct temperatures, got {}",
            unique.len()
        )));
    }
    let seeds = parse_seed_list(seeds)?;
    let model = read_checkpoint(ckpt)?;

    let mut table = Vec::with_capacity(unique.len());
    let mut metrics_csv = String::from("tau,absrel,delta1\n");
    for &tau in &unique {
        let report = model.evaluate(&seeds, tau)?;
        metrics_csv.push_str(&format!(
            "{tau},{},{}\n",
            report.aggregate.absrel, report.aggregate.delta1
        ));
        table.push(vec![report.aggregate.absrel, report.aggregate.delta1]);
    }
    let ranks = average_rank(&table, &[Direction::LowerBetter, Direction::HigherBetter])?;
    let rank_table = format_rank_table(&unique, &ranks);

    fs::create_dir_all(out)?;
    fs::write(out.join("metrics_by_tau.csv"), &metrics_csv)?;
    fs::write(out.join("rank_table.csv"), &rank_table)?;
    print!("{metrics_csv}\n{rank_table}");
    Ok(())
}

fn cmd_gradcheck(seed: u64, instances: usize, inject_fault: bool) -> ExitCode {
    let fault = if inject_fault { Some(2.0) } else { None };
    let report = match gradcheck(seed, instances, fault) {
        Ok(r) => r,
        Err(err) => {
            eprintln!("error: {err}");
            return ExitCode::from(exit_code_for(&err));
        }
    };
    println!(
        "gradcheck: worst relative error {} at {} over {} components ({} instances)",
        report.worst_rel, report.worst_param, report.components, report.instances
    );
    if report.worst_rel <= GRADCHECK_TOLERANCE {
        ExitCode::SUCCESS
    } else {
        eprintln!(
            "error: gradient mismatch at {} (relative error {} > {GRADCHECK_TOLERANCE})",
            report.worst_param, report.worst_rel
        );
        ExitCode::from(5)
    }
}

fn cmd_dump_attn(ckpt: &Path, seed: u64, tau: f64, out: &Path) -> Result<(), Error> {
    require_tau(tau)?;
    let model = read_checkpoint(ckpt)?;
    let (_, records) = model.forward(seed, tau)?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("gate,block,row,entropy\n");
    for rec in &records {
        let raster = Raster::new(rec.rows(), rec.keys(), 1, rec.weights.data().to_vec())?;
        let name = format!("attn_gate{}_{}.dmap", rec.gate_index, rec.block.label());
        write_dmap(&out.join(name), &raster)?;
        for (row, entropy) in attention_entropy(rec).into_iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{row},{entropy}\n",
                rec.gate_index,
                rec.block.label()
            ));
        }
    }
    fs::write(out.join("entropy.csv"), csv)?;
    println!(
        "wrote {} attention records to {}",
        records.len(),
        out.display()
    );
    Ok(())
}
