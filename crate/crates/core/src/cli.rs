//! Command-line entry point: `gen-data`, `train`, `ablate`, `probe-flatness`
//! and `surface`.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical abort, 1 any
//! other failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, FrozenMixup, LatentRow};
use crate::checkpoint::{read_trajectory, trajectory_checkpoint, Checkpoint};
use crate::config::{Config, Manifest, MANIFEST};
use crate::datasets::{self, MultiDomainSplit};
use crate::error::{Error, Result};
use crate::models::ModelBundle;
use crate::trainer::{self, metrics_csv, RunConfig, TrainedResult, Variant};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FGMIX_OUT";
pub const CONFIG_SNAPSHOT: &str = "config.ini";
pub const INIT_CKPT: &str = "init.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const SWA_CKPT: &str = "swa.ckpt";
pub const TRAJECTORY_CKPT: &str = "trajectory.ckpt";
pub const SWA_TRAJECTORY_CKPT: &str = "swa_trajectory.ckpt";

#[derive(Parser, Debug)]
#[command(name = "fgmix", version, about = "Flatness-guided mixup lab on synthetic multi-domain data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (`[section]` / `key = value`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set mixup.lambda=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Base seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$FGMIX_OUT/<subcommand>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset as per-domain CSV files plus a manifest.
    GenData(Common),
    /// Train one model and write metrics and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Shortcut for `--set trainer.variant=...`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run the variant ladder over several seeds and summarize target accuracy.
    Ablate(Common),
    /// Measure flatness curves of trained runs.
    ProbeFlatness {
        #[command(flatten)]
        common: Common,
        /// Trained run as `NAME=DIR`. Repeatable.
        #[arg(long = "run", value_name = "NAME=DIR", required = true)]
        runs: Vec<String>,
    },
    /// Build loss/accuracy surfaces through three anchors and project paths.
    Surface {
        #[command(flatten)]
        common: Common,
        /// Directory of the ERM run (supplies the initialization and ERM+SWA anchors).
        #[arg(long)]
        erm: PathBuf,
        /// Directory of the FGMix run (supplies the FGMix+SWA anchor).
        #[arg(long)]
        fgmix: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train { .. } => "train",
            Command::Ablate(_) => "ablate",
            Command::ProbeFlatness { .. } => "probe-flatness",
            Command::Surface { .. } => "surface",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Ablate(c) => c,
            Command::Train { common, .. }
            | Command::ProbeFlatness { common, .. }
            | Command::Surface { common, .. } => common,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Numerical { .. } => 3,
        _ => 1,
    }
}

/// Parses arguments, runs the command and maps the outcome to an exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns its output directory.
pub fn execute(cli: &Cli) -> Result<PathBuf> {
    let common = cli.command.common();
    let mut cfg = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if let Command::Train {
        variant: Some(v), ..
    } = &cli.command
    {
        cfg.set("trainer.variant", v)?;
    }
    let out = output_dir(common.out.as_deref(), cli.command.name());
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_SNAPSHOT), cfg.snapshot())?;
    match &cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg, &out)?,
        Command::Train { .. } => {
            cmd_train(&cfg, &out)?;
        }
        Command::Ablate(_) => cmd_ablate(&cfg, &out)?,
        Command::ProbeFlatness { runs, .. } => cmd_probe(&cfg, runs, &out)?,
        Command::Surface { erm, fgmix, .. } => cmd_surface(&cfg, erm, fgmix, &out)?,
    }
    Ok(out)
}

fn output_dir(explicit: Option<&Path>, sub: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("fgmix-out"));
            root.join(sub)
        }
    }
}

/// Writes every generated domain (raw, before standardization) to its own
/// file, plus a manifest naming the target.
pub fn cmd_gen_data(cfg: &Config, out: &Path) -> Result<()> {
    if cfg.raw("data.source") == "csv" {
        return Err(Error::Config("gen-data needs data.source = rotated or spurious".into()));
    }
    let data = cfg.dataset()?;
    let mut files = Vec::new();
    for d in &data.raw {
        let name = format!("domain_{}.csv", d.domain_id);
        datasets::save_csv(&out.join(&name), std::slice::from_ref(d))?;
        files.push(name);
    }
    let manifest = Manifest {
        files,
        target_domain: data.target_id(),
        num_classes: data.num_classes,
        seed: cfg.seed()?,
    };
    fs::write(out.join(MANIFEST), manifest.render())?;
    Ok(())
}

pub fn write_run(result: &TrainedResult, data: &MultiDomainSplit, out: &Path) -> Result<()> {
    fs::write(out.join("metrics.csv"), metrics_csv(&result.metrics))?;
    result.init_bundle.to_checkpoint().save(&out.join(INIT_CKPT))?;
    result.final_bundle.to_checkpoint().save(&out.join(FINAL_CKPT))?;
    if let Some(swa) = &result.swa_bundle {
        swa.to_checkpoint().save(&out.join(SWA_CKPT))?;
    }
    if !result.trajectory.is_empty() {
        trajectory_checkpoint(&result.trajectory).save(&out.join(TRAJECTORY_CKPT))?;
    }
    if !result.swa_trajectory.is_empty() {
        trajectory_checkpoint(&result.swa_trajectory).save(&out.join(SWA_TRAJECTORY_CKPT))?;
    }
    if result.config.debug_weights && result.config.variant != Variant::Erm {
        let mut text = String::from(crate::mixup::DEBUG_HEADER);
        text.push('\n');
        text.push_str(&result.debug_rows);
        fs::write(out.join("weights_debug.csv"), text)?;
    }
    let mut summary = String::new();
    let _ = writeln!(summary, "variant = {}", result.config.variant);
    let _ = writeln!(summary, "target_acc = {:?}", result.final_target(data)?.accuracy);
    if let Some(e) = result.swa_target(data)? {
        let _ = writeln!(summary, "swa_target_acc = {:?}", e.accuracy);
    }
    let i = &result.instrumentation;
    let _ = writeln!(summary, "mixup_generations = {}", i.mixup_generations);
    let _ = writeln!(summary, "policy_updates = {}", i.policy_updates);
    let _ = writeln!(summary, "discriminator_updates = {}", i.discriminator_updates);
    let _ = writeln!(summary, "target_rows_consumed = {}", i.target_rows_consumed);
    fs::write(out.join("summary.txt"), summary)?;
    Ok(())
}

pub fn cmd_train(cfg: &Config, out: &Path) -> Result<TrainedResult> {
    let rc = cfg.run_config()?;
    let data = cfg.dataset()?;
    let result = trainer::run(&rc, &data)?;
    write_run(&result, &data, out)?;
    Ok(result)
}

/// One (variant, seed, SWA) cell of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub swa: bool,
    pub target_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub swa: bool,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub n: usize,
}

/// Trains each variant once per seed. The SWA average never feeds back into
/// training, so each run yields both the raw and the SWA cell.
pub fn ablation_cells(cfg: &Config) -> Result<Vec<AblationCell>> {
    let variants: Vec<Variant> = cfg.get_list("ablate.variants")?;
    let seeds: u64 = cfg.get("ablate.seeds")?;
    if variants.is_empty() || seeds == 0 {
        return Err(Error::Config("ablate needs at least one variant and one seed".into()));
    }
    let base = cfg.seed()?;
    let mut cells = Vec::new();
    for &variant in &variants {
        for seed in base..base + seeds {
            let mut c = cfg.clone();
            c.set("run.seed", &seed.to_string())?;
            c.set("trainer.variant", variant.name())?;
            c.set("trainer.swa_enabled", "true")?;
            let rc: RunConfig = c.run_config()?;
            let data = c.dataset()?;
            let r = trainer::run(&rc, &data)?;
            cells.push(AblationCell {
                variant,
                seed,
                swa: false,
                target_acc: r.final_target(&data)?.accuracy,
            });
            let swa = r
                .swa_target(&data)?
                .ok_or_else(|| Error::State("no SWA snapshots; is swa_start beyond total_iters?".into()))?;
            cells.push(AblationCell {
                variant,
                seed,
                swa: true,
                target_acc: swa.accuracy,
            });
        }
    }
    cells.sort_by(|a, b| (a.variant, a.seed, a.swa).cmp(&(b.variant, b.seed, b.swa)));
    Ok(cells)
}

pub fn summarize(cells: &[AblationCell]) -> Vec<AblationRow> {
    let mut keys: Vec<(Variant, bool)> = cells.iter().map(|c| (c.variant, c.swa)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(variant, swa)| {
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| c.variant == variant && c.swa == swa)
                .map(|c| c.target_acc)
                .collect();
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
            AblationRow {
                variant,
                swa,
                mean,
                std,
                n: v.len(),
            }
        })
        .collect()
}

pub fn cmd_ablate(cfg: &Config, out: &Path) -> Result<()> {
    let cells = ablation_cells(cfg)?;
    let mut text = String::from("variant,seed,swa,target_acc\n");
    for c in &cells {
        let _ = writeln!(text, "{},{},{},{:?}", c.variant, c.seed, c.swa, c.target_acc);
    }
    fs::write(out.join("cells.csv"), text)?;
    let mut text = String::from("variant,swa,mean,std,n\n");
    for r in summarize(&cells) {
        let _ = writeln!(text, "{},{},{:?},{:?},{}", r.variant, r.swa, r.mean, r.std, r.n);
    }
    fs::write(out.join("summary.csv"), text)?;
    Ok(())
}

/// A trained run read back from its output directory.
pub struct LoadedRun {
    pub config: Config,
    pub run: RunConfig,
    pub data: MultiDomainSplit,
    pub init: ModelBundle,
    pub last: ModelBundle,
    pub swa: Option<ModelBundle>,
    pub dir: PathBuf,
}

fn load_bundle(path: &Path) -> Result<ModelBundle> {
    if !path.exists() {
        return Err(Error::State(format!("missing checkpoint {}", path.display())));
    }
    ModelBundle::from_checkpoint(&Checkpoint::load(path)?)
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = Config::load(&dir.join(CONFIG_SNAPSHOT))?;
    let run = config.run_config()?;
    let data = config.dataset()?;
    let swa_path = dir.join(SWA_CKPT);
    Ok(LoadedRun {
        init: load_bundle(&dir.join(INIT_CKPT))?,
        last: load_bundle(&dir.join(FINAL_CKPT))?,
        swa: if swa_path.exists() {
            Some(load_bundle(&swa_path)?)
        } else {
            None
        },
        config,
        run,
        data,
        dir: dir.to_path_buf(),
    })
}

impl LoadedRun {
    /// Mixup batch generated by the final policy, frozen for measurement.
    pub fn frozen_mixup(&self, seed: u64) -> Result<Option<FrozenMixup>> {
        FrozenMixup::generate(
            &self.last,
            &self.data,
            self.run.variant,
            self.run.lambda,
            self.run.batch_size,
            self.run.mixup_per_iter,
            seed,
        )
    }

    fn trajectory(&self, file: &str) -> Result<Vec<(usize, Vec<f64>)>> {
        let p = self.dir.join(file);
        if p.exists() {
            read_trajectory(&Checkpoint::load(&p)?)
        } else {
            Ok(Vec::new())
        }
    }
}

fn parse_run_arg(s: &str) -> Result<(String, PathBuf)> {
    let (name, dir) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--run expects NAME=DIR, got {s:?}")))?;
    Ok((name.to_string(), PathBuf::from(dir)))
}

/// `flatness.csv` for each run (raw and SWA), and `latents.csv` with source,
/// target and mixup codes of each final model.
pub fn cmd_probe(cfg: &Config, runs: &[String], out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let radii: Vec<f64> = cfg.get_list("analysis.radii")?;
    let m: usize = cfg.get("analysis.directions")?;
    let mut flat = format!("{}\n", analysis::FLATNESS_HEADER);
    let mut latents: Vec<LatentRow> = Vec::new();
    for arg in runs {
        let (name, dir) = parse_run_arg(arg)?;
        let run = load_run(&dir)?;
        let frozen = run.frozen_mixup(seed)?;
        let mut models = vec![(name.clone(), &run.last)];
        if let Some(s) = &run.swa {
            models.push((format!("{name}+SWA"), s));
        }
        for (label, bundle) in models {
            let ld = analysis::loss_data(bundle, &run.data.train, frozen.as_ref())?;
            let curve = analysis::flatness_curve(bundle, &ld, &radii, m, seed)?;
            flat.push_str(&analysis::flatness_csv_rows(&label, &curve));
        }
        let mut sets: Vec<(String, &datasets::DomainDataset)> = run
            .data
            .train
            .iter()
            .map(|d| (format!("{name}:source_d{}", d.domain_id), d))
            .collect();
        sets.push((format!("{name}:target"), &run.data.target));
        let mixup = match &frozen {
            Some(f) => vec![(format!("{name}:mixup"), f.samples(&run.last)?)],
            None => Vec::new(),
        };
        latents.extend(analysis::export_latents(&run.last, &sets, &mixup)?);
    }
    fs::write(out.join("flatness.csv"), flat)?;
    fs::write(out.join("latents.csv"), analysis::latents_csv(&latents))?;
    Ok(())
}

/// Anchors: initialization (`w₁`), ERM+SWA (`w₂`), FGMix+SWA (`w₃`).
pub fn cmd_surface(cfg: &Config, erm_dir: &Path, fgmix_dir: &Path, out: &Path) -> Result<()> {
    let seed = cfg.seed()?;
    let res: usize = cfg.get("analysis.resolution")?;
    let margin: f64 = cfg.get("analysis.margin")?;
    let erm = load_run(erm_dir)?;
    let fg = load_run(fgmix_dir)?;
    let need_swa = |r: &LoadedRun| {
        r.swa
            .clone()
            .ok_or_else(|| Error::State(format!("{} has no SWA checkpoint", r.dir.display())))
    };
    let w1 = erm.init.base_flat();
    let w2 = need_swa(&erm)?.base_flat();
    let w3 = need_swa(&fg)?.base_flat();
    let basis = analysis::surface_basis(&w1, &w2, &w3)?;

    let mut path = format!("{}\n", analysis::PATH_HEADER);
    let mut all_points = Vec::new();
    let anchors = analysis::project_path(&basis, &[w1, w2, w3])?;
    path.push_str(&analysis::path_csv_rows("anchor", &[1, 2, 3], &anchors));
    all_points.extend_from_slice(&anchors);
    for (label, run, file) in [
        ("erm", &erm, TRAJECTORY_CKPT),
        ("erm_swa", &erm, SWA_TRAJECTORY_CKPT),
        ("fgmix", &fg, TRAJECTORY_CKPT),
        ("fgmix_swa", &fg, SWA_TRAJECTORY_CKPT),
    ] {
        let traj = run.trajectory(file)?;
        let iters: Vec<usize> = traj.iter().map(|(t, _)| *t).collect();
        let ws: Vec<Vec<f64>> = traj.into_iter().map(|(_, w)| w).collect();
        let coords = analysis::project_path(&basis, &ws)?;
        path.push_str(&analysis::path_csv_rows(label, &iters, &coords));
        all_points.extend(coords);
    }
    let (a_range, b_range) =
        analysis::covering_ranges(&all_points, margin).expect("anchors are always present");

    let frozen = fg.frozen_mixup(seed)?;
    let erm_loss = analysis::surface_grid(
        &basis,
        a_range,
        b_range,
        (res, res),
        analysis::train_loss_evaluator(&erm.last, &erm.data.train, None),
    )?;
    let fg_loss = analysis::surface_grid(
        &basis,
        a_range,
        b_range,
        (res, res),
        analysis::train_loss_evaluator(&fg.last, &fg.data.train, frozen.as_ref()),
    )?;
    let targets = [erm.data.target.clone()];
    let acc = analysis::surface_grid(
        &basis,
        a_range,
        b_range,
        (res, res),
        analysis::accuracy_evaluator(&erm.last, &targets),
    )?;
    let mut surface = format!("{}\n", analysis::SURFACE_HEADER);
    surface.push_str(&analysis::surface_csv_rows("erm_loss", &erm_loss));
    surface.push_str(&analysis::surface_csv_rows("fgmix_loss", &fg_loss));
    surface.push_str(&analysis::surface_csv_rows("test_acc", &acc));
    surface.push_str(&analysis::surface_scale_rows(&[&erm_loss, &fg_loss]));
    fs::write(out.join("surface.csv"), surface)?;
    fs::write(out.join("path.csv"), path)?;
    Ok(())
}
