//! Command-line front end. Every subcommand reads one config file and works
//! inside a run directory laid out as `config`, `data/`, `model/`,
//! `traces/` and `report/`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use mako::adapt::{AdaptConfig, AdaptMode, ADAPT_CSV_HEADER};
use mako::data::MetaDataset;
use mako::experiment::{
    evaluate_param_grid, run_closed_loop, stabilized, write_episode_csv, ClosedLoopConfig, ExperimentConfig,
    Scale, EPISODE_CSV_HEADER,
};
use mako::seed::derive_seed;
use mako::synthetic::{run_synthetic_study, SyntheticStudyConfig};
use mako::systems::{PhysicalConstants, SystemParams};
use mako::trainer::MakoModel;

#[derive(Parser, Debug)]
#[command(name = "mako", version, about = "Meta-learned Koopman models with adaptive MPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML); fields left out take the scale's defaults.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's scale.
    #[arg(long)]
    scale: Option<Scale>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Restricts adaptation to one mode; both modes run when omitted.
    #[arg(long)]
    mode: Option<AdaptMode>,
    /// Defaults to runs/<system>-<scale>-seed<seed>.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the meta-dataset into data/.
    GenData(Common),
    /// Meta-train the lifting and per-task operators into model/.
    Train(Common),
    /// Online adaptation study; writes adaptation traces.
    AdaptStudy {
        #[command(flatten)]
        common: Common,
        /// Use a lifted-linear plant with known operators instead of the
        /// trained model; the trace then includes the Lyapunov value.
        #[arg(long)]
        synthetic: bool,
    },
    /// Closed-loop evaluation over the parameter grid.
    ControlEval(Common),
    /// Assemble plot-ready CSVs from a finished run.
    Report(Common),
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on bad usage.
pub fn cli_dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&Run::open(&c)?),
        Command::Train(c) => train(&Run::open(&c)?),
        Command::AdaptStudy { common, synthetic } => {
            let run = Run::open(&common)?;
            if synthetic {
                adapt_synthetic(&run)
            } else {
                adapt_closed_loop(&run)
            }
        }
        Command::ControlEval(c) => control_eval(&Run::open(&c)?),
        Command::Report(c) => report(&Run::open(&c)?),
    }
}

struct Run {
    dir: PathBuf,
    cfg: ExperimentConfig,
    modes: Vec<AdaptMode>,
    force: bool,
}

impl Run {
    fn open(c: &Common) -> Result<Self> {
        let text = fs::read_to_string(&c.config).with_context(|| format!("reading {}", c.config.display()))?;
        let mut cfg = ExperimentConfig::from_toml_layered(&text, c.scale)
            .with_context(|| format!("parsing {}", c.config.display()))?;
        if let Some(seed) = c.seed {
            cfg.seed = seed;
        }
        let modes = match c.mode {
            Some(m) => vec![m],
            None => vec![AdaptMode::Nominal, AdaptMode::Robust],
        };
        let dir = c.run_dir.clone().unwrap_or_else(|| {
            let scale = match cfg.scale {
                Scale::Desk => "desk",
                Scale::Paper => "paper",
            };
            PathBuf::from("runs").join(format!("{}-{scale}-seed{}", cfg.system.name(), cfg.seed))
        });
        for sub in ["data", "model", "traces", "report"] {
            fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.display()))?;
        }
        let resolved = cfg.to_toml();
        let resolved_path = dir.join("resolved.toml");
        if let Ok(existing) = fs::read_to_string(&resolved_path) {
            if existing != resolved && !c.force {
                bail!(
                    "{} was produced with a different configuration (use --force to replace it)",
                    dir.display()
                );
            }
        }
        fs::write(dir.join("config"), &text)?;
        fs::write(&resolved_path, resolved)?;
        Ok(Self {
            dir,
            cfg,
            modes,
            force: c.force,
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Destination for a new output; refuses to clobber without `--force`.
    fn output(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            bail!("refusing to overwrite {} (use --force)", p.display());
        }
        Ok(p)
    }

    fn constants(&self) -> &'static PhysicalConstants {
        PhysicalConstants::builtin()
    }

    fn load_model(&self) -> Result<MakoModel> {
        let p = self.path("model/model.bin");
        MakoModel::load(&p).with_context(|| format!("loading {} (run `train` first)", p.display()))
    }

    fn closed_loop(&self, mode: AdaptMode, seed: u64) -> ClosedLoopConfig {
        ClosedLoopConfig {
            mpc: self.cfg.mpc_config(),
            adapt: self.cfg.adapt_config_for(mode),
            steps: self.cfg.evaluation.episode_length,
            seed,
        }
    }
}

fn write_csv(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", path.display()))
}

fn gen_data(run: &Run) -> Result<()> {
    let out = run.output("data/meta.bin")?;
    let meta = run.cfg.generate_data(run.constants())?;
    meta.save(&out)?;
    fs::write(run.path("data/manifest.json"), meta.manifest())?;
    println!(
        "generated {} tasks x {} episodes into {}",
        meta.num_tasks(),
        meta.subdatasets.first().map_or(0, |s| s.episodes.len()),
        out.display()
    );
    Ok(())
}

fn train(run: &Run) -> Result<()> {
    let out = run.output("model/model.bin")?;
    let data = run.path("data/meta.bin");
    let meta = if data.exists() {
        MetaDataset::load(&data)?
    } else {
        let meta = run.cfg.generate_data(run.constants())?;
        meta.save(&data)?;
        fs::write(run.path("data/manifest.json"), meta.manifest())?;
        meta
    };
    if meta.kind != run.cfg.system || meta.num_tasks() != run.cfg.data.num_tasks {
        bail!("{} does not match the configuration", data.display());
    }
    let (model, report) = run.cfg.train(&meta)?;
    model.save(&out)?;
    write_csv(&run.path("model/train_curves.csv"), |w| report.write_csv(w))?;
    if let Some(k) = report.aborted_at {
        println!("training stopped at epoch {k}: non-finite loss");
    }
    let best = report.best_validation().ok_or_else(|| anyhow!("no epochs were trained"))?;
    println!(
        "trained {} epochs; best validation error {best:.3e} at epoch {}",
        report.epochs.len(),
        report.best_epoch.unwrap_or(0)
    );
    Ok(())
}

/// Adaptation on a lifted-linear plant with known operators. The nominal
/// study is noise-free; the robust one injects noise at its bounds.
fn adapt_synthetic(run: &Run) -> Result<()> {
    for &mode in &run.modes {
        let out = run.output(&format!("traces/adapt_synthetic_{}.csv", mode.name()))?;
        let base = SyntheticStudyConfig {
            seed: derive_seed(run.cfg.seed, &[0xad, mode as u64]),
            ..SyntheticStudyConfig::default()
        };
        let cfg = match mode {
            AdaptMode::Nominal => base,
            AdaptMode::Robust => SyntheticStudyConfig {
                steps: 10_000,
                noise_w: 1e-3,
                noise_v: 1e-3,
                adapt: AdaptConfig::robust(1.0, 1e-3, 1e-3),
                ..base
            },
        };
        let study = run_synthetic_study(&cfg)?;
        write_csv(&out, |w| study.trace.write_csv(w))?;
        let last = study.trace.records.last().map_or(0.0, |r| r.x_resid_norm);
        println!(
            "{}: {} steps, final output residual {last:.3e}, worst Lyapunov slack {:.3e}",
            mode.name(),
            cfg.steps,
            study.max_lyapunov_violation(cfg.adapt.alpha)
        );
    }
    Ok(())
}

/// Adaptation along a closed-loop episode at the nominal setting.
fn adapt_closed_loop(run: &Run) -> Result<()> {
    let model = run.load_model()?;
    let kind = run.cfg.system;
    let params = SystemParams::with_constants(run.constants().for_kind(kind), kind.nominal_values().to_vec())?;
    for &mode in &run.modes {
        let out = run.output(&format!("traces/adapt_closed_loop_{}.csv", mode.name()))?;
        let rec = run_closed_loop(&model, &params, &run.closed_loop(mode, derive_seed(run.cfg.seed, &[0xad])))?;
        let mut text = format!("{ADAPT_CSV_HEADER}\nk,lambda,g_resid_norm,x_resid_norm,V_if_known\n");
        for s in &rec.steps {
            writeln!(text, "{},{:e},{:e},{:e},", s.k, s.lambda, s.g_resid_norm, s.x_resid_norm)?;
        }
        fs::write(&out, text)?;
        println!(
            "{}: {} steps, final output residual {:.3e}",
            mode.name(),
            rec.steps.len(),
            rec.steps.last().map_or(0.0, |s| s.x_resid_norm)
        );
    }
    Ok(())
}

fn control_eval(run: &Run) -> Result<()> {
    let outs = [
        run.output("report/grid_summary.csv")?,
        run.output("report/grid_aggregate.csv")?,
        run.output("report/timing.csv")?,
    ];
    let model = run.load_model()?;
    let report = evaluate_param_grid(&model, run.constants(), &run.cfg, &run.modes)?;
    for e in &report.entries {
        for (m, r) in report.modes.iter().zip(&e.records) {
            let p = run.path(&format!("traces/episode_{}_{:02}.csv", m.name(), e.index));
            write_csv(&p, |w| write_episode_csv(r, w))?;
        }
    }
    write_csv(&outs[0], |w| report.write_summary_csv(w))?;
    write_csv(&outs[1], |w| report.write_aggregate_csv(w))?;
    write_csv(&outs[2], |w| report.write_timing_csv(w))?;
    for &m in &run.modes {
        let s = report.summary(m).expect("mode evaluated");
        println!(
            "{}: stabilized {}/{}, mean cumulative error {:.4e}, max {:.4e}, mean step {:.2} ms",
            m.name(),
            s.stabilized,
            s.episodes,
            s.mean_cumulative_error,
            s.max_cumulative_error,
            1e3 * s.mean_step_seconds
        );
    }
    let nominal = report.entries.iter().find(|e| e.nominal_setting);
    if let Some(e) = nominal {
        for (m, r) in report.modes.iter().zip(&e.records) {
            let ok = stabilized(report.kind, r, report.steps);
            info!("nominal setting, {}: stabilized {ok}", m.name());
        }
    }
    Ok(())
}

/// Column `name` of a CSV written by this tool (first line is the version
/// header).
fn read_column(path: &Path, header: &str, name: &str) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        bail!("{} lacks the expected header", path.display());
    }
    let cols: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let idx = cols
        .iter()
        .position(|c| *c == name)
        .ok_or_else(|| anyhow!("{} has no column {name}", path.display()))?;
    Ok(lines.map(|l| l.split(',').nth(idx).unwrap_or_default().to_string()).collect())
}

/// Prediction-error curves and per-grid-point tracking-error trajectories,
/// all re-derived from the files of earlier steps.
fn report(run: &Run) -> Result<()> {
    let curves_out = run.output("report/prediction_error.csv")?;
    let curves = fs::read_to_string(run.path("model/train_curves.csv"))
        .context("reading model/train_curves.csv (run `train` first)")?;
    // the wall-clock column is dropped so the report is reproducible
    let mut text = String::from("# mako prediction-error v1\n");
    for line in curves.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        text.push_str(&fields[..fields.len().min(4)].join(","));
        text.push('\n');
    }
    fs::write(curves_out, text)?;

    for &m in &run.modes {
        let out = run.output(&format!("report/tracking_error_{}.csv", m.name()))?;
        let mut series = Vec::new();
        for idx in 0.. {
            let p = run.path(&format!("traces/episode_{}_{idx:02}.csv", m.name()));
            if !p.exists() {
                break;
            }
            series.push(read_column(&p, EPISODE_CSV_HEADER, "tracking_error")?);
        }
        if series.is_empty() {
            bail!("no {} episode traces found (run `control-eval` first)", m.name());
        }
        let len = series.iter().map(Vec::len).max().unwrap_or(0);
        let mut text = String::from("# mako tracking-error v1\nk");
        for i in 0..series.len() {
            write!(text, ",e{i:02}")?;
        }
        text.push('\n');
        for k in 0..len {
            write!(text, "{k}")?;
            for s in &series {
                write!(text, ",{}", s.get(k).map(String::as_str).unwrap_or(""))?;
            }
            text.push('\n');
        }
        fs::write(out, text)?;
    }
    println!("report written to {}", run.path("report").display());
    Ok(())
}
