use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use psst_core::estimators::{BaselineKind, EstimatorKind, Gating};
use psst_core::experiment::{RunConfig, SweepGrid};

fn parse_gating(s: &str) -> Result<Gating, String> {
    match s {
        "per-example" => Ok(Gating::PerExample),
        "per-token" => Ok(Gating::PerToken),
        other => Err(format!(
            "unknown gating {other:?}; expected per-example or per-token"
        )),
    }
}

/// Every run setting as an optional flag; unset flags keep the value from the
/// config file, or the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with run settings (kebab-case keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub world: Option<PathBuf>,
    #[arg(long, value_parser = |s: &str| s.parse::<EstimatorKind>().map_err(|e| e.to_string()))]
    pub method: Option<EstimatorKind>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long, value_parser = |s: &str| s.parse::<BaselineKind>().map_err(|e| e.to_string()))]
    pub baseline: Option<BaselineKind>,
    #[arg(long, value_parser = parse_gating)]
    pub gating: Option<Gating>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    #[arg(long)]
    pub speaker_pretrain_lr: Option<f64>,
    #[arg(long)]
    pub listener_pretrain_lr: Option<f64>,
    #[arg(long)]
    pub speaker_pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub listener_pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub joint_epochs: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub beam_width: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed: Option<usize>,
    #[arg(long)]
    pub listener_hidden: Option<usize>,
    /// Alternate speaker-only and listener-only steps.
    #[arg(long)]
    pub alternate: bool,
    /// Keep the speaker fixed during joint training.
    #[arg(long)]
    pub freeze_speaker: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.parse::<toml::Table>()
        .with_context(|| format!("parsing {}", path.display()))
}

impl RunArgs {
    /// The config file (minus any `[grid]` table) with flags applied on top.
    pub fn resolve(&self) -> Result<(RunConfig, Option<toml::Table>)> {
        let mut rho_explicit = self.rho.is_some();
        let (mut cfg, grid) = match &self.config {
            Some(path) => {
                let mut table = read_table(path)?;
                let grid = match table.remove("grid") {
                    Some(toml::Value::Table(t)) => Some(t),
                    Some(_) => bail!("{}: grid must be a table", path.display()),
                    None => None,
                };
                rho_explicit |= table.contains_key("rho");
                let cfg = RunConfig::from_toml(&toml::to_string(&table)?)
                    .with_context(|| format!("in {}", path.display()))?;
                (cfg, grid)
            }
            None => (RunConfig::default(), None),
        };
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        apply!(
            method,
            baseline,
            gating,
            lambda,
            batch_size,
            lr,
            lr_decay,
            lr_decay_every,
            speaker_pretrain_lr,
            listener_pretrain_lr,
            speaker_pretrain_epochs,
            listener_pretrain_epochs,
            joint_epochs,
            clip_norm,
            beam_width,
            hidden,
            embed,
            listener_hidden,
            seed
        );
        if self.world.is_some() {
            cfg.world = self.world.clone();
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        if self.rho.is_some() {
            cfg.rho = self.rho;
        }
        if self.tau.is_some() {
            cfg.tau = self.tau;
        }
        // Non-PSST methods drop the default rho unless one was asked for.
        if !rho_explicit && !cfg.method.is_psst() {
            cfg.rho = None;
        }
        cfg.alternate |= self.alternate;
        cfg.freeze_speaker |= self.freeze_speaker;
        cfg.validate()?;
        Ok((cfg, grid))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GridArgs {
    /// Comma-separated estimator methods.
    #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.parse::<EstimatorKind>().map_err(|e| e.to_string()))]
    pub methods: Option<Vec<EstimatorKind>>,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Option<Vec<f64>>,
    /// Comma-separated rho values, used by PSST methods.
    #[arg(long, value_delimiter = ',')]
    pub rhos: Option<Vec<f64>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

impl GridArgs {
    /// Grid from the config file's `[grid]` table with flags on top; missing
    /// axes fall back to the base config's single value.
    pub fn resolve(&self, base: &RunConfig, table: Option<toml::Table>) -> Result<SweepGrid> {
        let mut grid = SweepGrid {
            methods: vec![base.method],
            lambdas: vec![base.lambda],
            rhos: base.rho.into_iter().collect(),
            seeds: vec![base.seed],
        };
        if let Some(t) = table {
            #[derive(serde::Deserialize)]
            #[serde(deny_unknown_fields)]
            struct FileGrid {
                methods: Option<Vec<EstimatorKind>>,
                lambdas: Option<Vec<f64>>,
                rhos: Option<Vec<f64>>,
                seeds: Option<Vec<u64>>,
            }
            let f: FileGrid = toml::Value::Table(t).try_into().context("in [grid]")?;
            grid.methods = f.methods.unwrap_or(grid.methods);
            grid.lambdas = f.lambdas.unwrap_or(grid.lambdas);
            grid.rhos = f.rhos.unwrap_or(grid.rhos);
            grid.seeds = f.seeds.unwrap_or(grid.seeds);
        }
        if let Some(v) = &self.methods {
            grid.methods = v.clone();
        }
        if let Some(v) = &self.lambdas {
            grid.lambdas = v.clone();
        }
        if let Some(v) = &self.rhos {
            grid.rhos = v.clone();
        }
        if let Some(v) = &self.seeds {
            grid.seeds = v.clone();
        }
        grid.cells()?;
        Ok(grid)
    }
}
