//! Command-line front end. Exit codes: 0 success, 1 invalid input, 2 I/O or
//! format error, 3 numerical failure.

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use crate::assets::{self, FileProvider, ReferenceProvider, SceneData, SceneSpec};
use crate::error::{Error, Result};
use crate::gaussians::{read_splat, write_splat};
use crate::geometry::Camera;
use crate::numerics::{ParamStore, Tensor};
use crate::pipeline::{self, PipelineConfig};
use crate::render;
use crate::texture;
use crate::training::{self, psnr, ssim};

pub const THREADS_ENV: &str = "SPLATFORGE_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "splatforge",
    version,
    about = "Reference-guided feed-forward Gaussian splatting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory.
    GenScene {
        /// Scene spec JSON; the built-in desk scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Parent directory; the scene is written to <out>/<id>.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        factor: usize,
        /// Size of the built-in scene.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "desk")]
        id: String,
    },
    /// Feed-forward reconstruction of a scene's context views into a .splat file.
    Reconstruct {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ignore the scene's reference gallery.
        #[arg(long)]
        no_reference: bool,
    },
    /// Render a .splat file from a camera.
    Render {
        #[arg(long)]
        splat: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR and SSIM of rendered views against a scene's ground truth.
    Eval {
        #[arg(long)]
        scene: PathBuf,
        /// Reconstruct with these parameters.
        #[arg(long, conflicts_with_all = ["splat", "renders"])]
        params: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Render this .splat instead of reconstructing.
        #[arg(long, conflicts_with = "renders")]
        splat: Option<PathBuf>,
        /// Compare pre-rendered images <renders>/<view>.png.
        #[arg(long)]
        renders: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ViewSet::HeldOut)]
        views: ViewSet,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        no_reference: bool,
    },
    /// Train the pipeline on scene directories.
    Train {
        #[arg(long = "scene", required = true)]
        scenes: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from these parameters instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        no_reference: bool,
    },
    /// Texture-richness map of an image.
    TrMap {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the learned predictor from these parameters instead of Sobel.
        #[arg(long)]
        params: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ViewSet {
    HeldOut,
    Targets,
    All,
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "{THREADS_ENV} must be a positive integer, got `{value}`"
            ))
        })?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_params(path: &Path, cfg: &PipelineConfig) -> Result<ParamStore> {
    let params = ParamStore::load(path)?;
    pipeline::check_params(cfg, &params)
        .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    Ok(params)
}

/// The reference twin listed in `<scene>/gallery.json`, or `None` (with a
/// warning) when the scene has no gallery.
fn scene_reference(scene: &SceneData, disabled: bool) -> Result<Option<Tensor>> {
    if disabled {
        return Ok(None);
    }
    let manifest = scene.dir.join("gallery.json");
    if !manifest.exists() {
        eprintln!(
            "warning: {} not found, reconstructing without a reference",
            manifest.display()
        );
        return Ok(None);
    }
    match FileProvider::from_manifest(&manifest)?.get_reference(&scene.id) {
        Ok(r) => Ok(Some(r)),
        Err(Error::Unavailable(why)) => {
            eprintln!("warning: reference unavailable ({why}), reconstructing without one");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenScene {
            spec,
            out,
            seed,
            factor,
            size,
            id,
        } => {
            let spec = match spec {
                Some(p) => SceneSpec::load(&p)?,
                None => SceneSpec::desk(&id, size, size),
            };
            let scene = assets::gen_scene(&spec, seed, factor)?;
            let dir = assets::write_scene(&scene, &out)?;
            println!("wrote {} views to {}", scene.cameras.len(), dir.display());
        }
        Command::Reconstruct {
            scene,
            config,
            params,
            out,
            no_reference,
        } => {
            let cfg = load_config(config.as_deref())?;
            let params = load_params(&params, &cfg)?;
            let data = SceneData::load(&scene)?;
            let reference = scene_reference(&data, no_reference)?;
            let start = Instant::now();
            let rec = pipeline::reconstruct(&data, reference.as_ref(), &cfg, &params)?;
            let elapsed = start.elapsed().as_secs_f64();
            write_splat(&rec.gaussians, &out)?;
            let c = rec.counts;
            println!(
                "coarse {}  dense {}  refined {}  ({elapsed:.2}s)",
                c.coarse, c.dense, c.refined
            );
        }
        Command::Render { splat, camera, out } => {
            let set = read_splat(&splat)?;
            let cam = Camera::load(&camera)?;
            if set.is_empty() {
                eprintln!(
                    "warning: {} holds no primitives, the image is background only",
                    splat.display()
                );
            }
            let img = render::rasterize(&set, &cam)?;
            assets::write_png(&out, &img.image)?;
        }
        Command::Eval {
            scene,
            params,
            config,
            splat,
            renders,
            views,
            csv,
            no_reference,
        } => {
            let data = SceneData::load(&scene)?;
            let selected: Vec<usize> = match views {
                ViewSet::HeldOut => data.roles.held_out.clone(),
                ViewSet::Targets => data.roles.targets.clone(),
                ViewSet::All => (0..data.cameras.len()).collect(),
            };
            let rendered: Box<dyn Fn(usize) -> Result<Tensor>> = if let Some(dir) = renders {
                Box::new(move |v| assets::read_png(&dir.join(format!("{v:03}.png"))))
            } else {
                let set = if let Some(path) = splat {
                    read_splat(&path)?
                } else {
                    let path = params.ok_or_else(|| {
                        Error::Invalid("eval needs one of --params, --splat or --renders".into())
                    })?;
                    let cfg = load_config(config.as_deref())?;
                    let params = load_params(&path, &cfg)?;
                    let reference = scene_reference(&data, no_reference)?;
                    pipeline::reconstruct(&data, reference.as_ref(), &cfg, &params)?.gaussians
                };
                let cams = data.cameras.clone();
                Box::new(move |v| Ok(render::rasterize(&set, &cams[v])?.image))
            };
            let mut rows = Vec::new();
            for &v in &selected {
                let img = rendered(v)?;
                rows.push((v, psnr(&img, &data.hr[v])?, ssim(&img, &data.hr[v])?));
            }
            let mut table = String::from("view,psnr,ssim\n");
            for (v, p, s) in &rows {
                table.push_str(&format!("{v},{p:.4},{s:.6}\n"));
            }
            if !rows.is_empty() {
                let n = rows.len() as f64;
                let (mp, ms) = rows.iter().fold((0.0, 0.0), |(a, b), r| (a + r.1, b + r.2));
                table.push_str(&format!("mean,{:.4},{:.6}\n", mp / n, ms / n));
            }
            print!("{table}");
            if let Some(path) = csv {
                std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Train {
            scenes,
            config,
            init,
            out,
            steps,
            seed,
            report,
            no_reference,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let steps = steps.unwrap_or(cfg.steps);
            let mut params = match init {
                Some(p) => load_params(&p, &cfg)?,
                None => pipeline::init_params(&cfg)?,
            };
            let data = scenes
                .iter()
                .map(|p| SceneData::load(p))
                .collect::<Result<Vec<_>>>()?;
            let refs = data
                .iter()
                .map(|s| scene_reference(s, no_reference))
                .collect::<Result<Vec<_>>>()?;
            let rep = training::train(&data, &refs, &cfg, &mut params, steps)?;
            params.save(&out)?;
            if let Some(path) = report {
                rep.save_csv(&path)?;
            }
            let mut stdout = std::io::stdout().lock();
            for s in &rep.steps {
                let _ = writeln!(stdout, "step {:5}  loss {:.6}", s.step, s.loss.total);
            }
            for e in &rep.evals {
                let _ = writeln!(
                    stdout,
                    "eval after {} steps: psnr {:.3} ssim {:.4}",
                    e.step, e.psnr, e.ssim
                );
            }
        }
        Command::TrMap { image, out, params } => {
            let img = assets::read_png(&image)?;
            let map = match params {
                Some(p) => texture::tr_perceptron(&img, &ParamStore::load(&p)?)?,
                None => texture::sobel_tr(&img)?,
            };
            let max = map.values.data().iter().copied().fold(0.0, f64::max);
            assets::write_png_normalized(&out, &map.values)?;
            println!("{}x{} texture map, max {max:.4}", map.height(), map.width());
        }
    }
    Ok(())
}
