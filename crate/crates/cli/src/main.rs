use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtml::experiment::{prepare, run_experiment, run_grid_search, ExperimentConfig, RawConfig};
use mtml::io::{self, Dtype};
use mtml::retrieval::{evaluate, Encoder};
use mtml::synth::{gen_distractors, gen_multitask, marginal_std, SynthConfig};
use mtml::wpca::fit_wpca;
use mtml::{generate_pairs, CoupledModel, Dataset, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "mtml", version, about = "Coupled multi-task metric learning and compressed retrieval")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task dataset and a ready-to-run experiment config.
    Synth(SynthArgs),
    /// Sample positive and negative pairs from a label file.
    Pairs(PairsArgs),
    /// Fit a whitened PCA projection and save it as a model.
    Wpca(WpcaArgs),
    /// Train every configured variant, evaluate the main task, write models, logs and report.
    Train(ConfigArgs),
    /// Evaluate a saved model with n-call@K.
    Eval(EvalArgs),
    /// Select eta and gamma on a validation split of the main task.
    Grid(ConfigArgs),
    /// Print the header of a feature or model file.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    k_shared: usize,
    #[arg(long, default_value_t = 4)]
    k_task: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 40)]
    samples: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    /// Spread of class centers (library default when omitted).
    #[arg(long)]
    center_scale: Option<f64>,
    /// Spread of other tasks' blocks relative to --noise.
    #[arg(long)]
    foreign_ratio: Option<f64>,
    /// Spread of nuisance coordinates relative to --noise.
    #[arg(long)]
    nuisance_ratio: Option<f64>,
    #[arg(long, default_value_t = 2)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of Gaussian distractors to write (0 for none).
    #[arg(long, default_value_t = 0)]
    distractors: usize,
    #[arg(long, default_value = "f64")]
    dtype: Dtype,
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    n_pos: usize,
    #[arg(long)]
    n_neg: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WpcaArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    d: usize,
    /// Regularizer relative to the largest eigenvalue.
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. --set seed=3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    task: usize,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    query_labels: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    gallery_labels: PathBuf,
    #[arg(long)]
    distractors: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,20")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value = "n/a")]
    aux_task: String,
    /// Report CSV path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let mut raw = RawConfig::parse(&text)?;
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("override {o:?} is not KEY=VALUE");
        };
        raw.set(k.trim(), v.trim())?;
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    Ok(ExperimentConfig::from_raw(&raw, base)?)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let base = SynthConfig::default();
    let cfg = SynthConfig {
        dim: a.dim,
        k_shared: a.k_shared,
        k_task: a.k_task,
        classes_per_task: a.classes,
        samples_per_class: a.samples,
        noise_sigma: a.noise,
        tasks: a.tasks,
        seed: a.seed,
        center_scale: a.center_scale.unwrap_or(base.center_scale),
        foreign_ratio: a.foreign_ratio.unwrap_or(base.foreign_ratio),
        nuisance_ratio: a.nuisance_ratio.unwrap_or(base.nuisance_ratio),
    };
    let data = gen_multitask(&cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut config = String::new();
    for (t, task) in data.tasks.iter().enumerate() {
        io::save_features(&task.train.features, a.out.join(format!("task{t}.fvec")), a.dtype)?;
        io::save_labels(&task.train.labels, a.out.join(format!("task{t}.labels")))?;
        io::save_features(&task.queries.features, a.out.join(format!("queries{t}.fvec")), a.dtype)?;
        io::save_labels(&task.queries.labels, a.out.join(format!("queries{t}.labels")))?;
        let role = if t == 0 { "main" } else { "aux" };
        config.push_str(&format!(
            "task.{t}.name = task{t}\ntask.{t}.role = {role}\ntask.{t}.features = task{t}.fvec\n\
             task.{t}.labels = task{t}.labels\ntask.{t}.n_pos = 500\ntask.{t}.n_neg = 500\n"
        ));
    }
    config.push_str("queries.features = queries0.fvec\nqueries.labels = queries0.labels\n");
    if a.distractors > 0 {
        let std = marginal_std(&data.tasks[0].train.features);
        let d = gen_distractors(cfg.dim, a.distractors, std, a.seed.wrapping_add(1))?;
        io::save_features(&d, a.out.join("distractors.fvec"), a.dtype)?;
        config.push_str("distractors = distractors.fvec\n");
    }
    config.push_str(&format!(
        "variant = cpmtml,stml,utml,wpca\nd = {}\nniters = 20000\neta = auto\ngamma = 0.5\nseed = {}\n\
         ks = 1,2,5,10,20\nlog_every = 1000\nout.dir = results\n",
        8.min(cfg.dim),
        a.seed
    ));
    fs::write(a.out.join("experiment.cfg"), config)?;
    println!("wrote {} task(s) to {}", cfg.tasks, a.out.display());
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let head = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match head.get(..4) {
        Some(b"FVEC") => {
            let (count, dim, dtype) = io::feature_header(path)?;
            println!("feature file: count={count} dim={dim} dtype={dtype:?}");
            io::decode_features(&head)?;
        }
        Some(b"CPML") => {
            let m = io::decode_model(&head)?;
            println!(
                "model file: variant={} tasks={} d={} D={} gamma={} biases={:?}",
                m.variant(),
                m.task_count(),
                m.proj_dim(),
                m.input_dim(),
                m.gamma(),
                m.biases()
            );
        }
        _ => bail!("{}: neither a feature nor a model file", path.display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth(a) => synth(&a),
        Command::Pairs(a) => {
            let labels = io::load_labels(&a.labels)?;
            let ps = generate_pairs(&labels, a.n_pos, a.n_neg, 0, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
            io::save_pairs(&ps, &a.out)?;
            println!("wrote {} pairs to {}", ps.len(), a.out.display());
            Ok(())
        }
        Command::Wpca(a) => {
            let fs = io::load_features(&a.features)?;
            let res = fit_wpca(&fs, a.d, a.epsilon)?;
            io::save_model(&CoupledModel::single(Variant::Wpca, res.projection)?, &a.out)?;
            println!("top eigenvalues: {:?}", &res.eigenvalues[..res.eigenvalues.len().min(8)]);
            Ok(())
        }
        Command::Train(a) => {
            let cfg = load_config(&a)?;
            let out = run_experiment(&cfg)?;
            print!("{}", out.csv);
            Ok(())
        }
        Command::Eval(a) => {
            let model = io::load_model(&a.model)?;
            let queries = Dataset::new(io::load_features(&a.queries)?, io::load_labels(&a.query_labels)?)?;
            let gallery = Dataset::new(io::load_features(&a.gallery)?, io::load_labels(&a.gallery_labels)?)?;
            let distractors = a.distractors.as_ref().map(io::load_features).transpose()?;
            let enc = Encoder::for_task(&model, a.task)?;
            let rep = evaluate(&queries, &gallery, distractors.as_ref(), &enc, &a.ks, a.n)?;
            let csv = format!(
                "{}\n{}",
                io::REPORT_HEADER,
                io::report_rows(model.variant().name(), &a.aux_task, &rep)
            );
            match &a.out {
                Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Grid(a) => {
            let cfg = load_config(&a)?;
            let data = prepare(&cfg)?;
            let res = run_grid_search(&cfg, &data)?;
            let csv = res.to_csv();
            if let Some(dir) = &cfg.out_dir {
                fs::create_dir_all(dir)?;
                fs::write(dir.join("grid.csv"), &csv)?;
            }
            print!("{csv}");
            println!(
                "best eta={} gamma={} val_1call_at_10={}",
                res.best_eta, res.best_gamma, res.best_score
            );
            Ok(())
        }
        Command::Inspect { path } => inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e
                .chain()
                .find_map(|c| {
                    c.downcast_ref::<mtml::Error>()
                        .map(mtml::Error::class)
                        .or_else(|| c.downcast_ref::<std::io::Error>().map(|_| "io"))
                })
                .unwrap_or("cli");
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{class}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
