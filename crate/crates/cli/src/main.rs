use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use crowdfit_core::body_model::SkeletonTemplate;
use crowdfit_core::io::{self, GeometryFormat, ResultFile, SceneFile};
use crowdfit_core::metrics;
use crowdfit_core::pipeline::{self, FitConfig, NormalMode};
use crowdfit_core::synth::{self, SceneSpec};

#[derive(Parser)]
#[command(name = "crowdfit", version, about = "Crowd-consistent 3D body fitting from 2D keypoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic crowd on a known ground plane.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the spec file.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit every person, then refine the crowd jointly.
    Fit(FitArgs),
    /// Score a result against the scene it came from.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write per-person and whole-scene geometry.
    Export {
        #[arg(long)]
        result: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Obj,
    Ply,
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip the crowd stage.
    #[arg(long)]
    no_crowd: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keypoint residuals in pixels rather than box units.
    #[arg(long)]
    raw_pixel_keyp: bool,
    /// Hold the plane normal constant within each step.
    #[arg(long, conflicts_with = "freeze_normal_every")]
    detach_normal: bool,
    /// Recompute the held normal every N steps.
    #[arg(long, value_name = "N")]
    freeze_normal_every: Option<usize>,
    /// Estimate the normal from each batch alone.
    #[arg(long)]
    per_batch_normal: bool,
    /// Scale the anchor term by the crowd loss.
    #[arg(long)]
    literal_init: bool,
}

impl FitArgs {
    fn config(&self) -> Result<FitConfig> {
        let mut c = match &self.config {
            Some(path) => io::load_config(path)?,
            None => FitConfig::default(),
        };
        c.no_crowd |= self.no_crowd;
        if let Some(v) = self.iters {
            c.crowd.iters = v;
        }
        if let Some(v) = self.batch_size {
            c.crowd.batch_size = v;
        }
        if let Some(v) = self.lr {
            c.crowd.lr = v;
        }
        if let Some(v) = self.threshold {
            c.threshold = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        c.crowd.raw_pixel_keyp |= self.raw_pixel_keyp;
        c.crowd.per_batch_normal |= self.per_batch_normal;
        c.crowd.literal_init |= self.literal_init;
        if self.detach_normal {
            c.crowd.normal_mode = NormalMode::FreezeEvery(1);
        }
        if let Some(n) = self.freeze_normal_every {
            c.crowd.normal_mode = NormalMode::FreezeEvery(n);
        }
        c.validate()?;
        Ok(c)
    }
}

fn template() -> Result<SkeletonTemplate> {
    let t = io::load_template().with_context(|| format!("loading body template (${})", io::TEMPLATE_ENV))?;
    t.validate()?;
    Ok(t)
}

fn generate(spec: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let mut spec_value: SceneSpec =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
    if let Some(s) = seed {
        spec_value.seed = s;
    }
    let t = template()?;
    let scene = synth::generate_scene(&t, &spec_value)?;
    SceneFile::from_observation(&scene, &t.role_map.layout).save(out)?;
    eprintln!("wrote {} persons to {}", scene.persons.len(), out.display());
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    let config = args.config()?;
    let t = template()?;
    let scene = SceneFile::load(&args.scene)?.to_observation(&t)?;
    let estimate = pipeline::reconstruct(&t, &scene, &config)?;
    for w in &estimate.warnings {
        eprintln!("warning: {w}");
    }
    let result = ResultFile::new(&t, &config, scene.intrinsics, estimate);
    result.save(&args.out)?;
    eprintln!("wrote {} persons to {}", result.persons.len(), args.out.display());
    Ok(())
}

fn load_result(t: &SkeletonTemplate, path: &Path) -> Result<ResultFile> {
    let result = ResultFile::load(path)?;
    if result.template_version != t.version {
        bail!(
            "{} was fitted with template `{}`, loaded template is `{}`",
            path.display(),
            result.template_version,
            t.version
        );
    }
    Ok(result)
}

fn eval(result: &Path, scene: &Path, out: Option<&Path>) -> Result<()> {
    let t = template()?;
    let result = load_result(&t, result)?;
    let scene = SceneFile::load(scene)?.to_observation(&t)?;
    let report = metrics::evaluate(&t, &scene, &result.persons)?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn export(result: &Path, format: Format, out: &Path) -> Result<()> {
    let t = template()?;
    let result = load_result(&t, result)?;
    let format = match format {
        Format::Obj => GeometryFormat::Obj,
        Format::Ply => GeometryFormat::Ply,
    };
    let files = io::export_geometry(&t, &result, format, out)?;
    eprintln!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out, seed } => generate(&spec, &out, seed),
        Command::Fit(args) => fit(&args),
        Command::Eval { result, scene, out } => eval(&result, &scene, out.as_deref()),
        Command::Export { result, format, out } => export(&result, format, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
