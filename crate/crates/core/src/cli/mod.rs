//! The `mscnn` command line: one experiment per invocation, configured by a
//! TOML file and writing into an output directory.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::grid::{Grid2D, TransferKind, TransferPair};
use crate::model_io::{
    history_csv, load_model, save_model, summary_csv, write_text, LevelStamp, ModelFile,
    Provenance, SummaryRow,
};
use crate::multiscale::{
    adapt_model_resolution, cold_initial_loss, multilevel_train, shallow_to_deep_train, Direction,
    LevelSchedule, ResolutionPyramid,
};
use crate::propagation::{Classifier, NetworkParams};
use crate::stencil::{build_coarsen_map, stability_report, Stencil};
use crate::training::{bcd_train, init_model, IterRecord, TrainResult};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "mscnn", version, about = "Multiscale residual CNN training", after_help = config::keys_help())]
struct Cli {
    /// Worker threads for per-example parallelism (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run on a single worker.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct RunArgs {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train at one resolution and depth; writes model.bin and history.csv.
    #[command(after_help = config::keys_help())]
    Train(RunArgs),
    /// Coarse-to-fine training over an image pyramid; writes level_<i>.csv,
    /// summary.csv and model.bin.
    #[command(after_help = config::keys_help())]
    Multilevel(RunArgs),
    /// Shallow-to-deep training over the configured depths; writes
    /// depth_<N>.csv, depth_<N>_cold.csv, summary.csv and model.bin.
    #[command(after_help = config::keys_help())]
    Deepen(RunArgs),
    /// Move a trained model one resolution octave without retraining.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        /// coarsen | refine
        #[arg(long)]
        direction: String,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        /// constant | bilinear
        #[arg(long, default_value = "constant")]
        transfer: String,
    },
    /// Print per-layer stability diagnostics and stencil norms.
    Inspect {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let threads = if cli.sequential { Some(1) } else { cli.workers };
    let outcome = match threads {
        Some(n) => match rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
        {
            Ok(pool) => pool.install(|| dispatch(cli.command)),
            Err(e) => Err(Error::InvalidArgument(e.to_string())),
        },
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.module());
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => cmd_train(&load_config(&a)?, &a.out),
        Command::Multilevel(a) => cmd_multilevel(&load_config(&a)?, &a.out),
        Command::Deepen(a) => cmd_deepen(&load_config(&a)?, &a.out),
        Command::Adapt {
            model,
            direction,
            out,
            transfer,
        } => {
            let dir = Direction::from_name(&direction).ok_or_else(|| {
                Error::Config(format!("unknown direction `{direction}` (coarsen, refine)"))
            })?;
            let kind = TransferKind::from_name(&transfer).ok_or_else(|| {
                Error::Config(format!(
                    "unknown transfer `{transfer}` (constant, bilinear)"
                ))
            })?;
            cmd_adapt(&model, dir, &out, TransferPair::new(kind))
        }
        Command::Inspect { model } => {
            print!("{}", cmd_inspect(&model)?);
            Ok(())
        }
    }
}

fn load_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn stamp(grid: Grid2D, layers: usize, iterations: usize) -> LevelStamp {
    LevelStamp {
        nx: grid.nx(),
        ny: grid.ny(),
        layers,
        iterations,
    }
}

fn save(
    dir: &Path,
    cfg: &RunConfig,
    params: NetworkParams,
    classifier: Classifier,
    levels: Vec<LevelStamp>,
) -> Result<()> {
    let model = ModelFile {
        params,
        classifier,
        provenance: Provenance {
            config_hash: cfg.hash(),
            seed: cfg.seed,
            levels,
        },
    };
    save_model(&model, &dir.join("model.bin"))
}

fn final_accuracy(r: &IterRecord) -> f64 {
    r.val_acc.unwrap_or(r.train_acc)
}

fn report(label: &str, r: &TrainResult) {
    let f = r.final_record();
    let val = f.val_acc.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!(
        "{label}: iterations {} loss {:.6} -> {:.6} train_acc {:.4} val_acc {val}",
        r.history.len(),
        r.initial.loss,
        f.loss,
        f.train_acc
    );
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let (train, val) = cfg.datasets()?;
    let grid = train.grid().ok_or(Error::EmptyDataset)?;
    let arch = cfg.architecture()?;
    let (p, c) = init_model(&arch, grid, train.num_classes(), cfg.seed)?;
    let r = bcd_train(&train, val.as_ref(), &p, &c, &cfg.reg(), &cfg.bcd()?)?;
    write_text(&out.join("history.csv"), &history_csv(&r.history))?;
    report("train", &r);
    let levels = vec![stamp(grid, arch.layers, r.history.len())];
    save(out, cfg, r.params, r.classifier, levels)
}

pub fn cmd_multilevel(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let (train, val) = cfg.datasets()?;
    let pyr = ResolutionPyramid::build(
        &train,
        val.as_ref(),
        cfg.coarse_levels,
        cfg.transfer_pair()?,
        cfg.blur_sigma,
    )?;
    let sched = LevelSchedule::new(cfg.level_configs(pyr.levels())?)?;
    let arch = cfg.architecture()?;
    let coarsest = pyr.train(pyr.coarse_levels());
    let grid = coarsest.grid().ok_or(Error::EmptyDataset)?;
    let (p, c) = init_model(&arch, grid, coarsest.num_classes(), cfg.seed)?;
    let reg = cfg.reg();
    let result = multilevel_train(&pyr, &sched, (&p, &c), &reg)?;

    let mut rows = Vec::new();
    let mut stamps = Vec::new();
    for lr in &result.levels {
        let data = pyr.train(lr.level);
        write_text(
            &out.join(format!("level_{}.csv", lr.level)),
            &history_csv(&lr.result.history),
        )?;
        report(&format!("level {}", lr.level), &lr.result);
        rows.push(SummaryRow {
            level: lr.level,
            init_loss_warm: lr.result.initial.loss,
            init_loss_cold: cold_initial_loss(data, &arch, &reg, cfg.seed)?,
            final_acc: final_accuracy(&lr.result.final_record()),
            iterations: lr.result.history.len(),
            wall_seconds: lr.wall_seconds,
        });
        let g = data.grid().ok_or(Error::EmptyDataset)?;
        stamps.push(stamp(g, arch.layers, lr.result.history.len()));
    }
    write_text(&out.join("summary.csv"), &summary_csv(&rows))?;
    save(out, cfg, result.params, result.classifier, stamps)
}

pub fn cmd_deepen(cfg: &RunConfig, out: &Path) -> Result<()> {
    prepare_out(out)?;
    let (train, val) = cfg.datasets()?;
    let grid = train.grid().ok_or(Error::EmptyDataset)?;
    let arch = cfg.architecture()?;
    let result = shallow_to_deep_train(
        &train,
        val.as_ref(),
        &cfg.depths,
        &arch,
        &cfg.reg(),
        &cfg.bcd()?,
        cfg.seed,
    )?;
    let mut rows = Vec::new();
    let mut stamps = Vec::new();
    for d in &result.depths {
        write_text(
            &out.join(format!("depth_{}.csv", d.depth)),
            &history_csv(&d.warm.history),
        )?;
        report(&format!("depth {}", d.depth), &d.warm);
        if let Some(cold) = &d.cold {
            write_text(
                &out.join(format!("depth_{}_cold.csv", d.depth)),
                &history_csv(&cold.history),
            )?;
            report(&format!("depth {} (cold)", d.depth), cold);
        }
        rows.push(SummaryRow {
            level: d.depth,
            init_loss_warm: d.warm.initial.loss,
            init_loss_cold: d.cold.as_ref().unwrap_or(&d.warm).initial.loss,
            final_acc: final_accuracy(&d.warm.final_record()),
            iterations: d.warm.history.len(),
            wall_seconds: d.wall_seconds,
        });
        stamps.push(stamp(grid, d.depth, d.warm.history.len()));
    }
    write_text(&out.join("summary.csv"), &summary_csv(&rows))?;
    save(out, cfg, result.params, result.classifier, stamps)
}

pub fn cmd_adapt(model: &Path, direction: Direction, out: &Path, t: TransferPair) -> Result<()> {
    let m = load_model(model)?;
    let map = build_coarsen_map(m.params.k(), &t)?;
    let (params, classifier) =
        adapt_model_resolution(&m.params, &m.classifier, direction, &map, &t)?;
    let mut provenance = m.provenance;
    provenance
        .levels
        .push(stamp(classifier.grid(), params.num_layers(), 0));
    let g = classifier.grid();
    save_model(
        &ModelFile {
            params,
            classifier,
            provenance,
        },
        out,
    )?;
    println!(
        "{}: {}x{} grid, {} transfer, map condition {:.4e}",
        direction.name(),
        g.nx(),
        g.ny(),
        t.kind.name(),
        map.condition()
    );
    Ok(())
}

/// The stability table printed by `inspect`.
pub fn cmd_inspect(model: &Path) -> Result<String> {
    let m = load_model(model)?;
    let p = &m.params;
    let g = m.grid();
    let mut s = format!(
        "grid {}x{} h={} layers {} dt={} T={} channels {} k {} activation {}(gain {}) classes {}\n",
        g.nx(),
        g.ny(),
        g.h(),
        p.num_layers(),
        p.dt(),
        p.final_time(),
        p.channels(),
        p.k(),
        p.activation().kind.name(),
        p.activation().gain,
        m.classifier.num_classes()
    );
    s.push_str(&format!(
        "{:<7} {:>4} {:>4} {:>14} {:>14} {:>14}\n",
        "layer", "out", "in", "norm", "max_real", "growth"
    ));
    let mut row = |layer: String, o: usize, i: usize, st: &Stencil, dt: f64| -> Result<()> {
        let r = stability_report(st, &g, dt)?;
        s.push_str(&format!(
            "{layer:<7} {o:>4} {i:>4} {:>14.6e} {:>14.6e} {:>14.6e}\n",
            st.norm(),
            r.max_real,
            r.spectral_radius_step
        ));
        Ok(())
    };
    for o in 0..p.channels() {
        row("embed".into(), o, 0, p.embed().get(o, 0), p.dt())?;
    }
    for (l, bank) in p.banks().iter().enumerate() {
        for o in 0..bank.c_out() {
            for i in 0..bank.c_in() {
                row(l.to_string(), o, i, bank.get(o, i), p.dt())?;
            }
        }
    }
    Ok(s)
}
