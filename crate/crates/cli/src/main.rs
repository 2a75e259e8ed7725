mod args;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use psst_core::agents::{Listener, Speaker};
use psst_core::estimators::{BaselineKind, EstimatorConfig, EstimatorKind};
use psst_core::experiment::{
    evaluate, evaluate_references, joint_train, matched_recall_by_rho, pretrain, resolve_output,
    sweep, tradeoff_summary, CurveAxis, RunConfig,
};
use psst_core::metrics::NGramStats;
use psst_core::oracle::{estimator_report, EnumInstance};
use psst_core::world::{generate_world, Split, World, WorldConfig};
use psst_core::CoreError;

use args::{GridArgs, RunArgs};

const EXIT_USAGE: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_GATE: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "psst",
    version,
    about = "Gradient estimators through discrete tokens on a speaker/listener game"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a world and write it as TOML.
    WorldGen(WorldGenArgs),
    /// Pretrain speaker (MLE) and listener (hinge) and write checkpoints.
    Pretrain(RunArgs),
    /// Joint training from pretrained checkpoints, or from fresh pretraining.
    Train(TrainArgs),
    /// Run a grid of joint-training runs and write consolidated curves.
    Sweep(SweepArgs),
    /// Beam-decode a split and report retrieval and CIDEr.
    Evaluate(EvaluateArgs),
    /// Compare an estimator's mean gradient with exact enumeration.
    Oracle(OracleArgs),
}

#[derive(Debug, clap::Args)]
struct WorldGenArgs {
    /// Output world file.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with world settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    values: Option<usize>,
    #[arg(long)]
    synonyms: Option<usize>,
    #[arg(long)]
    refs_per_scene: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    mention_prob: Option<f64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
}

#[derive(Debug, clap::Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Pretrained speaker checkpoint; pretraining runs first when absent.
    #[arg(long, requires = "listener")]
    speaker: Option<PathBuf>,
    /// Pretrained listener checkpoint.
    #[arg(long, requires = "speaker")]
    listener: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// CIDEr level for the matched-recall report; chosen from the curves
    /// when absent.
    #[arg(long)]
    cider_level: Option<f64>,
}

#[derive(Debug, clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    speaker: PathBuf,
    #[arg(long)]
    listener: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = 2)]
    beam_width: usize,
    /// Also score each scene's first reference caption.
    #[arg(long)]
    references: bool,
}

#[derive(Debug, clap::Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 3)]
    vocab: usize,
    #[arg(long, default_value_t = 2)]
    len: usize,
    #[arg(long, default_value_t = 200_000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "reinforce", value_parser = |s: &str| s.parse::<EstimatorKind>().map_err(|e| e.to_string()))]
    method: EstimatorKind,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value = "none", value_parser = |s: &str| s.parse::<BaselineKind>().map_err(|e| e.to_string()))]
    baseline: BaselineKind,
    /// Standard errors allowed between the estimator mean and the exact
    /// gradient (checked for REINFORCE only).
    #[arg(long, default_value_t = 3.0)]
    gate: f64,
}

fn load_world(cfg: &RunConfig) -> Result<World> {
    let Some(path) = &cfg.world else {
        bail!(CoreError::Config(
            "--world (or `world` in the config file) is required".into()
        ));
    };
    Ok(World::load(path)?)
}

fn world_gen(a: WorldGenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<WorldConfig>(&text)
                .map_err(|e| CoreError::Config(format!("{}: {e}", p.display())))?
        }
        None => WorldConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed,
        attributes => num_attributes,
        values => values_per_attribute,
        synonyms => synonyms_per_value,
        refs_per_scene => refs_per_scene,
        max_len => max_len,
        mention_prob => mention_prob,
        train => split_sizes.train,
        val => split_sizes.val,
        test => split_sizes.test
    );
    let world = generate_world(&cfg)?;
    let out = resolve_output(&a.out);
    world.save(&out)?;
    println!(
        "wrote {}: vocab {}, scenes {}/{}/{}",
        out.display(),
        world.vocab_size(),
        world.split_ids(Split::Train).len(),
        world.split_ids(Split::Val).len(),
        world.split_ids(Split::Test).len()
    );
    Ok(())
}

fn run_pretrain(a: RunArgs) -> Result<()> {
    let (cfg, _) = a.resolve()?;
    if cfg.output_dir.is_none() {
        bail!(CoreError::Config(
            "pretrain needs --output-dir for its checkpoints".into()
        ));
    }
    let world = load_world(&cfg)?;
    let p = pretrain(&world, &cfg)?;
    for e in &p.log {
        println!(
            "epoch {:>3}  speaker val nll {}  listener val recall@1 {}",
            e.epoch,
            e.speaker_val_nll.map_or("-".into(), |v| format!("{v:.4}")),
            e.listener_val_recall1
                .map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    if let Some(dir) = cfg.resolved_output_dir() {
        println!("checkpoints in {}", dir.display());
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let (cfg, _) = a.run.resolve()?;
    let world = load_world(&cfg)?;
    let (speaker, listener) = match (&a.speaker, &a.listener) {
        (Some(s), Some(l)) => (Speaker::load(s)?, Listener::load(l)?),
        _ => {
            let pre_cfg = RunConfig {
                output_dir: cfg.output_dir.as_ref().map(|d| d.join("pretrain")),
                ..cfg.clone()
            };
            let p = pretrain(&world, &pre_cfg)?;
            (p.speaker, p.listener)
        }
    };
    let out = joint_train(&world, &cfg, &speaker, &listener)?;
    for p in &out.curve {
        println!(
            "epoch {:>3}  cider {:.4}  recall@1 {:.3}  recall@5 {:.3}  recall@10 {:.3}",
            p.epoch, p.cider, p.recall1, p.recall5, p.recall10
        );
    }
    let m = &out.manifest;
    println!(
        "best epoch {} (val recall@10 {:.3}); final recall@1 {:.3} cider {:.4}; {:.1}s",
        m.best_epoch, m.best.recall10, m.last.recall1, m.last.cider, m.wall_seconds
    );
    if let Some(dir) = cfg.resolved_output_dir() {
        println!("manifest in {}", dir.join("manifest.json").display());
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<ExitCode> {
    let (base, table) = a.run.resolve()?;
    let grid = a.grid.resolve(&base, table)?;
    let world = load_world(&base)?;
    let out = sweep(&world, &base, &grid)?;
    for c in &out.cells {
        match (&c.manifest, &c.error) {
            (Some(m), _) => println!(
                "{:<32} best epoch {:>3}  final recall@1 {:.3}  cider {:.4}",
                c.cell.label(),
                m.best_epoch,
                m.last.recall1,
                m.last.cider
            ),
            (None, Some(e)) => println!("{:<32} FAILED: {e}", c.cell.label()),
            (None, None) => {}
        }
    }
    if grid.methods.len() == 1 && grid.lambdas.len() > 1 {
        let t = tradeoff_summary(&out)?;
        for ((l, r), c) in t.lambdas.iter().zip(&t.median_recall1).zip(&t.median_cider) {
            println!("lambda {l:<8} median recall@1 {r:.3}  median cider {c:.4}");
        }
        println!(
            "spearman(lambda, recall@1) {:+.3}  spearman(lambda, cider) {:+.3}",
            t.spearman_recall1, t.spearman_cider
        );
    }
    if grid.methods.iter().any(|m| m.is_psst())
        && grid.rhos.len() > 1
        && out.failures() < out.cells.len()
    {
        // With a lambda axis each (rho, seed) traces its trade-off curve over
        // lambda; otherwise the per-epoch curves are used.
        let axis = if grid.lambdas.len() > 1 {
            CurveAxis::Lambda
        } else {
            CurveAxis::Epochs
        };
        let m = matched_recall_by_rho(&out, axis, a.cider_level)?;
        println!("matched cider level {:.4} ({:?} curves)", m.level, axis);
        for i in 0..m.rhos.len() {
            println!(
                "rho {:<5} median recall@1 {} ({} of {} curves reach the level)",
                m.rhos[i],
                m.median_recall1[i].map_or("-".into(), |v| format!("{v:.3}")),
                m.curves[i],
                m.total_curves[i]
            );
        }
    }
    if let Some(dir) = base.resolved_output_dir() {
        println!("curves in {}", dir.join("curves.csv").display());
    }
    Ok(if out.cells.iter().any(|c| c.numerical) {
        ExitCode::from(EXIT_NUMERICAL)
    } else if out.failures() > 0 {
        ExitCode::from(EXIT_USAGE)
    } else {
        ExitCode::SUCCESS
    })
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let world = World::load(&a.world)?;
    let stats = NGramStats::from_world(&world)?;
    let speaker = Speaker::load(&a.speaker)?;
    let listener = Listener::load(&a.listener)?;
    let m = evaluate(&world, &stats, &speaker, &listener, a.split, a.beam_width)?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    if a.references {
        let r = evaluate_references(&world, &stats, &listener, a.split)?;
        println!("{}", serde_json::to_string_pretty(&r)?);
    }
    Ok(())
}

fn run_oracle(a: OracleArgs) -> Result<ExitCode> {
    let est = EstimatorConfig::resolve(a.method, a.rho, a.tau, a.baseline)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let instance = EnumInstance::random_table(a.vocab, a.len, &mut rng)?;
    let report = estimator_report(&instance, &est, a.samples, &mut rng)?;
    print!("{}", report.to_text());
    println!("# mean variance {:.6e}", report.mean_variance());
    if a.method != EstimatorKind::Reinforce {
        println!("# gate: not applicable (biased estimator)");
        return Ok(ExitCode::SUCCESS);
    }
    if report.within_std_errs(a.gate) {
        println!(
            "# gate: pass (every coordinate within {} standard errors)",
            a.gate
        );
        Ok(ExitCode::SUCCESS)
    } else {
        println!(
            "# gate: FAIL (some coordinate beyond {} standard errors)",
            a.gate
        );
        Ok(ExitCode::from(EXIT_GATE))
    }
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<CoreError>())
        .any(CoreError::is_numerical);
    if numerical {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::WorldGen(a) => world_gen(a).map(|_| ExitCode::SUCCESS),
        Command::Pretrain(a) => run_pretrain(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => run_train(a).map(|_| ExitCode::SUCCESS),
        Command::Sweep(a) => run_sweep(a),
        Command::Evaluate(a) => run_evaluate(a).map(|_| ExitCode::SUCCESS),
        Command::Oracle(a) => run_oracle(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
