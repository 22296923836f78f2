use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ndlab::data::{load_csv, save_csv};
use ndlab::exp::gradsuite::{report_csv, run_suite, GRADCHECK_TOL};
use ndlab::exp::plot::{dump_embeddings, parse_embeddings, scatter_svg};
use ndlab::exp::protocols::{ablation, msweep, sensitivity, sifn_sweep, trials, ProtocolOutput};
use ndlab::exp::runner::{prepare_teacher, run_one, Prepared, TeacherBundle};
use ndlab::exp::ExperimentConfig;
use ndlab::metrics::metrics_csv;
use ndlab::nets::Model;
use ndlab::Error;

#[derive(Parser)]
#[command(
    name = "ndlab",
    version,
    about = "Feature-norm and direction distillation experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the built-in recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `out_dir` from the config, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel runs (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    /// Run a single seed instead of the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write 0 in timing columns so reruns are byte-identical.
    #[arg(long, global = true)]
    no_timing: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every loss and network primitive.
    Gradcheck {
        /// Corrupt one analytic gradient; the suite must then fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Write the configured mixture as train.csv and test.csv.
    GenData,
    /// Train the teacher with cross-entropy.
    TrainTeacher,
    /// Distill one student with the configured losses.
    Distill {
        /// Use this teacher checkpoint instead of training one.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Run the twelve-setting regularizer ablation.
    Ablation,
    /// Two-stage sweep: beta at alpha = 1, then alpha at the best beta.
    Sensitivity {
        #[arg(long, value_delimiter = ',')]
        beta_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        alpha_grid: Option<Vec<f64>>,
    },
    /// Sweep the teacher-norm scale m of the ND loss.
    Msweep {
        #[arg(long = "m", value_delimiter = ',', allow_hyphen_values = true)]
        m_values: Option<Vec<f64>>,
    },
    /// Sweep the SIFN step size r.
    SifnSweep {
        #[arg(long = "r", value_delimiter = ',')]
        r_values: Option<Vec<f64>>,
    },
    /// Repeat the configured distillation over the seed list.
    Trials,
    /// Write eval-mode embeddings of a checkpoint as CSV.
    Dump {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled CSV to embed instead of the configured data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// The --data file has a header row.
        #[arg(long)]
        header: bool,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Render a 2-D embedding dump as an SVG scatter plot.
    Plot {
        #[arg(long)]
        input: PathBuf,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_IO: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;
const EXIT_DATA: u8 = 6;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Param(_) | Error::Contract(_) => EXIT_CONFIG,
                Error::Divergence { .. } | Error::NonFiniteGradient { .. } => EXIT_DIVERGENCE,
                Error::Io { .. } => EXIT_IO,
                Error::Data(_) | Error::Parse { .. } => EXIT_DATA,
                _ => EXIT_FAILURE,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.common.jobs).build();
    let result = match pool {
        Ok(pool) => pool.install(|| run(&cli)),
        Err(e) => Err(anyhow::Error::new(e)),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    seeds: Vec<u64>,
    timing: bool,
}

impl Ctx {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let cfg = match &common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default_recipe(),
        };
        let out = common
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs"));
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let seeds = match common.seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone(),
        };
        Ok(Self {
            cfg,
            out,
            seeds,
            timing: !common.no_timing,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Writes via a temporary file and a rename.
    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        let tmp = self.path(&format!(".{name}.tmp"));
        std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    if let Command::Gradcheck { inject_fault } = cli.command {
        return gradcheck(&cli.common, inject_fault);
    }
    if let Command::Plot { input } = &cli.command {
        let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("runs"));
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        let text = std::fs::read_to_string(input).map_err(|e| io_err(input, e))?;
        let svg = scatter_svg(&parse_embeddings(&text)?)?;
        let path = out.join("scatter.svg");
        std::fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
        println!("wrote {}", path.display());
        return Ok(0);
    }
    let ctx = Ctx::new(&cli.common)?;
    match &cli.command {
        Command::Gradcheck { .. } | Command::Plot { .. } => unreachable!(),
        Command::GenData => {
            let (train, test) = ctx.cfg.load_data()?;
            save_csv(&train, &ctx.path("train.csv"))?;
            save_csv(&test, &ctx.path("test.csv"))?;
            println!(
                "wrote {} train and {} test rows to {}",
                train.len(),
                test.len(),
                ctx.out.display()
            );
        }
        Command::TrainTeacher => {
            let data = Prepared::new(&ctx.cfg)?;
            let seed = ctx.seeds[0];
            let t = prepare_teacher(&ctx.cfg, &data, seed).with_context(|| format!("teacher, seed {seed}"))?;
            t.model.save(&ctx.path("teacher.ckpt"))?;
            ctx.write("teacher_metrics.csv", metrics_csv(&t.history, ctx.timing))?;
            ctx.write("class_means.csv", t.means.to_csv())?;
            report_final("teacher", &t.history);
        }
        Command::Distill { teacher } => {
            let data = Prepared::new(&ctx.cfg)?;
            let seed = ctx.seeds[0];
            let bundle = match teacher {
                Some(p) => {
                    let model = Model::load(p)?;
                    if model.spec.input_dim != data.train.dim() || model.spec.num_classes != data.train.num_classes {
                        return Err(Error::Contract(format!(
                            "teacher checkpoint {} does not fit the data",
                            p.display()
                        ))
                        .into());
                    }
                    TeacherBundle::from_model(model, vec![], &data, &ctx.cfg.distill)?
                }
                None => {
                    let t = prepare_teacher(&ctx.cfg, &data, seed)?;
                    t.model.save(&ctx.path("teacher.ckpt"))?;
                    ctx.write("teacher_metrics.csv", metrics_csv(&t.history, ctx.timing))?;
                    t
                }
            };
            let out = run_one(&ctx.cfg, &data, &bundle, &ctx.cfg.distill, seed)?;
            Model::save(&out.student, &ctx.path("student.ckpt"))?;
            if out.adapter.num_scalars() > 0 {
                ctx.write("adapter.bin", out.adapter.to_bytes())?;
            }
            ctx.write("metrics.csv", metrics_csv(&out.history, ctx.timing))?;
            report_final("student", &out.history);
        }
        Command::Ablation => {
            let data = Prepared::new(&ctx.cfg)?;
            let (out, meta) = ablation(&ctx.cfg, &data, &ctx.seeds)?;
            ctx.write("ablation_meta.json", serde_json::to_string_pretty(&meta)? + "\n")?;
            finish(&ctx, "ablation.csv", &out)?;
        }
        Command::Sensitivity { beta_grid, alpha_grid } => {
            let data = Prepared::new(&ctx.cfg)?;
            let betas = beta_grid.clone().unwrap_or_else(|| ctx.cfg.sweeps.beta_grid.clone());
            let alphas = alpha_grid.clone().unwrap_or_else(|| ctx.cfg.sweeps.alpha_grid.clone());
            let out = sensitivity(&ctx.cfg, &data, &ctx.seeds, &betas, &alphas)?;
            let path = ctx.write("sensitivity.csv", &out.csv)?;
            println!("best beta = {}", out.best_beta);
            println!("wrote {}", path.display());
        }
        Command::Msweep { m_values } => {
            let data = Prepared::new(&ctx.cfg)?;
            let ms = m_values.clone().unwrap_or_else(|| ctx.cfg.sweeps.m_values.clone());
            finish(&ctx, "msweep.csv", &msweep(&ctx.cfg, &data, &ctx.seeds, &ms)?)?;
        }
        Command::SifnSweep { r_values } => {
            let data = Prepared::new(&ctx.cfg)?;
            let rs = r_values.clone().unwrap_or_else(|| ctx.cfg.sweeps.sifn_r.clone());
            finish(&ctx, "sifn_sweep.csv", &sifn_sweep(&ctx.cfg, &data, &ctx.seeds, &rs)?)?;
        }
        Command::Trials => {
            let data = Prepared::new(&ctx.cfg)?;
            finish(&ctx, "trials.csv", &trials(&ctx.cfg, &data, &ctx.seeds)?)?;
        }
        Command::Dump {
            checkpoint,
            data,
            header,
            split,
        } => {
            let model = Model::load(checkpoint)?;
            let set = match data {
                Some(p) => load_csv(p, *header)?,
                None => {
                    let (train, test) = ctx.cfg.load_data()?;
                    match split {
                        SplitArg::Train => train,
                        SplitArg::Test => test,
                    }
                }
            };
            let path = ctx.write("embeddings.csv", dump_embeddings(&model, &set)?)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(0)
}

fn gradcheck(common: &Common, inject_fault: bool) -> anyhow::Result<u8> {
    let reports = run_suite(inject_fault)?;
    for r in &reports {
        println!(
            "{:<20} max_rel_error {:.3e}  {}",
            r.name,
            r.report.max_rel_error,
            if r.passes() { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        let path = out.join("gradcheck.csv");
        std::fs::write(&path, report_csv(&reports)).map_err(|e| io_err(&path, e))?;
    }
    if reports.iter().all(|r| r.passes()) {
        println!("all {} checks below {GRADCHECK_TOL:e}", reports.len());
        Ok(0)
    } else {
        eprintln!("gradient check failed");
        Ok(EXIT_GRADCHECK)
    }
}

fn report_final(who: &str, history: &[ndlab::metrics::MetricsRecord]) {
    if let Ok(m) = ndlab::exp::runner::final_metrics(history) {
        println!(
            "{who}: top1 {:.4}  mean_norm {:.4}  mean_angle_deg {:.3}",
            m.top1, m.mean_norm, m.mean_angle_deg
        );
    }
}

fn finish(ctx: &Ctx, name: &str, out: &ProtocolOutput) -> anyhow::Result<()> {
    if out.results.is_empty() {
        bail!("no runs were produced");
    }
    let path = ctx.write(name, &out.csv)?;
    println!("wrote {} ({} runs)", path.display(), out.results.len());
    Ok(())
}
