use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use matforge::camera::{load_cameras, Camera, Projection};
use matforge::envlight::{save_prefiltered, EnvMap, PrefilterConfig, PrefilteredEnv};
use matforge::image::reinhard;
use matforge::imageio::{self, read_image, write_pfm, write_png, PngDepth, Transfer};
use matforge::losses::{l1_loss, psnr, ssi_loss, ssim, FeatureStack};
use matforge::mesh::{load_mesh, shapes};
use matforge::pipeline::synthetic::{bake_material_field, material_field, synthetic_env};
use matforge::pipeline::{
    decompose_object, file_entry, recover_view, six_view_cameras, write_manifest, write_outputs, Decomposer,
    GradientDecomposer, ManifestEntry, ObjectSource, OracleDecomposer, PipelineConfig, RecoverConfig, Role,
    ViewInput,
};
use matforge::scheduler::{self, BetaSchedule, NoiseSchedule, Spacing};
use matforge::shading::{render_view, MaterialMaps, MaterialSample};
use matforge::uvspace::{bake_uv_geometry, sample_uv_materials, ExternalRefiner, PullPush, Refiner};
use matforge::{rasterize_gbuffer, ImageF, TriMesh};

#[derive(Parser)]
#[command(name = "matforge", version, about = "Multi-view PBR material decomposition toolkit")]
struct Cli {
    /// JSON file with `prefilter`, `pipeline`, `recover` and `schedule` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed of the random feature stack used by perceptual losses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Shape {
    Sphere,
    Torus,
    Quad,
}

#[derive(clap::Args)]
struct MeshArgs {
    /// OBJ mesh with UVs.
    #[arg(long, conflicts_with = "shape")]
    mesh: Option<PathBuf>,
    /// Built-in mesh, used when no OBJ is given.
    #[arg(long, value_enum, default_value = "sphere")]
    shape: Shape,
}

#[derive(clap::Args)]
struct MaterialArgs {
    /// UV albedo map (PFM, or sRGB PNG).
    #[arg(long, requires = "rm")]
    albedo: Option<PathBuf>,
    /// UV packed roughness/metallic map (PFM, or linear PNG).
    #[arg(long, requires = "albedo")]
    rm: Option<PathBuf>,
    /// Atlas resolution of the built-in material field.
    #[arg(long, default_value_t = 512)]
    texture_size: usize,
}

#[derive(clap::Args)]
struct EnvArgs {
    /// Equirectangular PFM environments; repeat for several lights.
    #[arg(long = "env")]
    envs: Vec<PathBuf>,
    /// Built-in environments used when no `--env` is given.
    #[arg(long, default_value_t = 1)]
    lights: usize,
    /// Height of the built-in environments.
    #[arg(long, default_value_t = 64)]
    env_height: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecomposerKind {
    Oracle,
    Gradient,
}

#[derive(Subcommand)]
enum Command {
    /// Render a textured mesh under an environment.
    Render {
        #[command(flatten)]
        mesh: MeshArgs,
        #[command(flatten)]
        material: MaterialArgs,
        #[command(flatten)]
        env: EnvArgs,
        /// Camera set JSON; defaults to the six axis views.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// View resolution for the default cameras.
        #[arg(long, default_value_t = 512)]
        resolution: usize,
        /// Tone map PNG previews with Reinhard.
        #[arg(long)]
        reinhard: bool,
    },
    /// Precompute irradiance, specular chain and BRDF table for an environment.
    Prefilter {
        /// Equirectangular PFM.
        env: PathBuf,
    },
    /// Run the six-view pipeline end to end.
    Decompose {
        #[command(flatten)]
        mesh: MeshArgs,
        #[command(flatten)]
        material: MaterialArgs,
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long, value_enum, default_value = "gradient")]
        decomposer: DecomposerKind,
        /// External refiner program, called as `program <stem>`.
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Recover one view's materials from renders with known geometry and lights.
    Recover {
        #[command(flatten)]
        mesh: MeshArgs,
        #[command(flatten)]
        env: EnvArgs,
        /// Camera set JSON; defaults to the six axis views.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Which camera of the set to use.
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Observed images, one per light; rendered from the built-in
        /// material field when absent.
        #[arg(long = "obs")]
        observations: Vec<PathBuf>,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
    },
    /// Merge per-view material maps into refined UV maps.
    BakeUv {
        #[command(flatten)]
        mesh: MeshArgs,
        /// Directory with `view<k>.albedo.pfm` and `view<k>.rm.pfm` for the six views.
        #[arg(long)]
        views: PathBuf,
        /// External refiner program, called as `program <stem>`.
        #[arg(long)]
        refiner: Option<PathBuf>,
    },
    /// Compare two images, or matching files of two directories.
    Metrics { pred: PathBuf, target: PathBuf },
    /// Print inference timesteps and cumulative alphas as JSON.
    SchedulerDump {
        #[arg(long)]
        train_steps: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum)]
        spacing: Option<SpacingArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SpacingArg {
    Leading,
    Trailing,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ScheduleConfig {
    train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    beta_schedule: BetaSchedule,
    steps: usize,
    spacing: Spacing,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_schedule: BetaSchedule::ScaledLinear,
            steps: 1,
            spacing: Spacing::Trailing,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    prefilter: PrefilterConfig,
    pipeline: PipelineConfig,
    recover: RecoverConfig,
    schedule: ScheduleConfig,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn mesh_of(args: &MeshArgs) -> Result<TriMesh> {
    Ok(match &args.mesh {
        Some(p) => load_mesh(p).with_context(|| format!("loading {}", p.display()))?,
        None => match args.shape {
            Shape::Sphere => shapes::uv_sphere(96, 48),
            Shape::Torus => shapes::torus(1.0, 0.4, 96, 48),
            Shape::Quad => shapes::unit_quad(),
        },
    })
}

fn read_rm(path: &Path) -> Result<ImageF> {
    Ok(match imageio::ImageFormat::from_path(path)? {
        imageio::ImageFormat::Pfm => imageio::read_pfm(path)?,
        imageio::ImageFormat::Png => imageio::read_png(path, Transfer::Linear)?,
    })
}

/// UV materials and the texel validity mask they are defined on.
fn materials_of(args: &MaterialArgs, mesh: &TriMesh) -> Result<(MaterialMaps, Vec<bool>)> {
    match (&args.albedo, &args.rm) {
        (Some(a), Some(rm)) => {
            let maps = MaterialMaps::new(read_image(a)?, read_rm(rm)?)?;
            if maps.width() != maps.height() {
                bail!("UV maps must be square, got {}x{}", maps.width(), maps.height());
            }
            let atlas = bake_uv_geometry(mesh, maps.width())?;
            Ok((maps, atlas.valid))
        }
        _ => {
            let atlas = bake_uv_geometry(mesh, args.texture_size)?;
            Ok((bake_material_field(&atlas, material_field)?, atlas.valid))
        }
    }
}

fn lights_of(args: &EnvArgs, config: &PrefilterConfig) -> Result<Vec<PrefilteredEnv>> {
    let envs: Vec<EnvMap> = if args.envs.is_empty() {
        (0..args.lights)
            .map(|i| synthetic_env(i, args.env_height))
            .collect::<matforge::Result<_>>()?
    } else {
        args.envs
            .iter()
            .map(|p| EnvMap::load(p).with_context(|| format!("loading {}", p.display())))
            .collect::<Result<_>>()?
    };
    envs.iter()
        .map(|e| Ok(PrefilteredEnv::build(e, config)?))
        .collect()
}

fn cameras_of(path: Option<&Path>, mesh: &TriMesh, projection: Projection, resolution: usize) -> Result<Vec<Camera>> {
    Ok(match path {
        Some(p) => load_cameras(p).with_context(|| format!("loading {}", p.display()))?,
        None => six_view_cameras(mesh, projection, resolution)?,
    })
}

fn stack_of(seed: Option<u64>) -> Result<FeatureStack> {
    Ok(match seed {
        Some(s) => FeatureStack::random(s, 3, &[8, 8, 16, 16, 32, 32, 32, 32], vec![2, 4, 6, 8])?,
        None => FeatureStack::random_default(3),
    })
}

fn refiner_of(program: Option<&Path>, out: &Path) -> Box<dyn Refiner> {
    match program {
        Some(p) => Box::new(ExternalRefiner::new(out.join("refine"), p, Vec::new())),
        None => Box::new(PullPush),
    }
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn write_maps(dir: &Path, maps: &MaterialMaps, stem: &str, files: &mut Vec<ManifestEntry>) -> Result<()> {
    let albedo = format!("{stem}albedo.pfm");
    let rm = format!("{stem}rm.pfm");
    write_pfm(&maps.albedo, dir.join(&albedo))?;
    write_pfm(&maps.rm, dir.join(&rm))?;
    files.push(file_entry(dir, &albedo, Role::Albedo)?);
    files.push(file_entry(dir, &rm, Role::Rm)?);
    Ok(())
}

#[derive(Serialize)]
struct ImageScores {
    file: String,
    psnr: f64,
    ssim: f64,
    l1: f64,
    /// Undefined for a constant prediction.
    ssi: Option<f64>,
}

fn score(pred: &Path, target: &Path) -> Result<ImageScores> {
    let (a, b) = (read_image(pred)?, read_image(target)?);
    Ok(ImageScores {
        file: pred.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        psnr: psnr(&a, &b)?,
        ssim: ssim(&a, &b)?,
        l1: l1_loss(&a, &b)?,
        ssi: ssi_loss(&a, &b).ok(),
    })
}

#[derive(Serialize)]
struct MetricsReport {
    psnr: f64,
    ssim: f64,
    l1: f64,
    ssi: Option<f64>,
    images: Vec<ImageScores>,
}

fn metrics(pred: &Path, target: &Path) -> Result<MetricsReport> {
    let images = if pred.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(pred)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| imageio::ImageFormat::from_path(p).is_ok() && target.join(p.file_name().unwrap()).exists())
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no matching images in {} and {}", pred.display(), target.display());
        }
        names
            .iter()
            .map(|p| score(p, &target.join(p.file_name().unwrap())))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![score(pred, target)?]
    };
    let n = images.len() as f64;
    let mean = |f: fn(&ImageScores) -> f64| images.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        psnr: mean(|s| s.psnr),
        ssim: mean(|s| s.ssim),
        l1: mean(|s| s.l1),
        ssi: {
            let v: Vec<f64> = images.iter().filter_map(|s| s.ssi).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        },
        images,
    })
}

/// Hands precomputed per-view maps to the pipeline.
struct FileDecomposer(Vec<MaterialMaps>);

impl Decomposer for FileDecomposer {
    fn decompose(&mut self, views: &[ViewInput<'_>]) -> matforge::Result<Vec<MaterialMaps>> {
        if views.len() != self.0.len() {
            return Err(matforge::Error::ShapeMismatch(format!(
                "{} views, {} map pairs",
                views.len(),
                self.0.len()
            )));
        }
        Ok(std::mem::take(&mut self.0))
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Render {
            mesh,
            material,
            env,
            camera,
            resolution,
            reinhard: tonemap,
        } => {
            let mesh = mesh_of(&mesh)?;
            let (maps, valid) = materials_of(&material, &mesh)?;
            let lights = lights_of(&env, &config.prefilter)?;
            let cameras = cameras_of(camera.as_deref(), &mesh, config.pipeline.projection, resolution)?;
            let mut files = Vec::new();
            for (k, cam) in cameras.iter().enumerate() {
                let gbuf = rasterize_gbuffer(&mesh, cam)?;
                let view = sample_uv_materials(&gbuf, &maps, &valid)?;
                for (l, light) in lights.iter().enumerate() {
                    let img = render_view(&gbuf, &view, light, cam)?;
                    let stem = format!("view{k}_light{l}");
                    write_pfm(&img, out.join(format!("{stem}.pfm")))?;
                    let preview = if tonemap { img.map(reinhard) } else { img.map(|v| v.clamp(0.0, 1.0)) };
                    write_png(&preview, out.join(format!("{stem}.png")), PngDepth::Eight, Transfer::Srgb)?;
                    files.push(file_entry(out, &format!("{stem}.pfm"), Role::Image)?);
                    files.push(file_entry(out, &format!("{stem}.png"), Role::Image)?);
                }
            }
            write_manifest(out, files)?;
            info!("rendered {} views under {} lights", cameras.len(), lights.len());
        }
        Command::Prefilter { env } => {
            let env = EnvMap::load(&env).with_context(|| format!("loading {}", env.display()))?;
            let pre = PrefilteredEnv::build(&env, &config.prefilter)?;
            let manifest = save_prefiltered(&pre, out)?;
            info!("wrote {} specular levels", manifest.specular.len());
        }
        Command::Decompose {
            mesh,
            material,
            env,
            decomposer,
            refiner,
        } => {
            let mesh = mesh_of(&mesh)?;
            let atlas_res = config.pipeline.atlas_resolution;
            let material = MaterialArgs {
                texture_size: atlas_res,
                ..material
            };
            let (maps, valid) = materials_of(&material, &mesh)?;
            if maps.width() != atlas_res {
                bail!("UV maps are {} texels wide, pipeline atlas is {atlas_res}", maps.width());
            }
            let lights = lights_of(&env, &config.prefilter)?;
            let mut refiner = refiner_of(refiner.as_deref(), out);
            let source = ObjectSource::Textured {
                materials: &maps,
                lights: &lights,
            };
            let (output, extra) = match decomposer {
                DecomposerKind::Oracle => {
                    let mut d = OracleDecomposer::new(maps.clone(), valid)?;
                    (decompose_object(&mesh, source, &mut d, refiner.as_mut(), &config.pipeline)?, None)
                }
                DecomposerKind::Gradient => {
                    let recover = RecoverConfig {
                        lights: lights.len(),
                        ..config.recover.clone()
                    };
                    let mut d = GradientDecomposer::new(lights.clone(), recover)?.with_stack(stack_of(cli.seed)?);
                    let output = decompose_object(&mesh, source, &mut d, refiner.as_mut(), &config.pipeline)?;
                    write_json(out, "recover_reports.json", &d.reports())?;
                    (output, Some("recover_reports.json"))
                }
            };
            let mut manifest = write_outputs(&output, out)?;
            if let Some(file) = extra {
                manifest.files.push(file_entry(out, file, Role::Report)?);
                manifest = write_manifest(out, manifest.files)?;
            }
            if let Some(m) = &output.report.metrics {
                info!("albedo MAE {:.4}, rm MAE {:.4}", m.refined_albedo_mae, m.refined_rm_mae);
            }
            info!("wrote {} files", manifest.files.len());
        }
        Command::Recover {
            mesh,
            env,
            camera,
            view,
            observations,
            resolution,
        } => {
            let mesh = mesh_of(&mesh)?;
            let lights = lights_of(&env, &config.prefilter)?;
            let cameras = cameras_of(camera.as_deref(), &mesh, config.pipeline.projection, resolution)?;
            let cam = cameras
                .get(view)
                .with_context(|| format!("view {view} out of {} cameras", cameras.len()))?;
            let gbuf = rasterize_gbuffer(&mesh, cam)?;
            let obs: Vec<ImageF> = if observations.is_empty() {
                let gt = MaterialMaps::from_fn(cam.width, cam.height, |x, y| {
                    if gbuf.covered(x, y) {
                        material_field(gbuf.position_at(x, y))
                    } else {
                        MaterialSample::new([0.0; 3], 0.0, 0.0)
                    }
                })?;
                lights.iter().map(|l| render_view(&gbuf, &gt, l, cam)).collect::<matforge::Result<_>>()?
            } else {
                observations.iter().map(read_image).collect::<matforge::Result<_>>()?
            };
            let recover = RecoverConfig {
                lights: lights.len(),
                ..config.recover.clone()
            };
            let input = ViewInput {
                camera: cam,
                gbuf: &gbuf,
                observations: &obs,
            };
            let (maps, report) = recover_view(&input, &lights, &recover, &stack_of(cli.seed)?)?;
            let mut files = Vec::new();
            write_maps(out, &maps, "", &mut files)?;
            write_json(out, "report.json", &report)?;
            files.push(file_entry(out, "report.json", Role::Report)?);
            write_manifest(out, files)?;
            info!(
                "loss {:.3e} -> {:.3e} in {} iterations",
                report.initial_loss, report.final_loss, report.iterations
            );
        }
        Command::BakeUv { mesh, views, refiner } => {
            let mesh = mesh_of(&mesh)?;
            let maps = (0..6)
                .map(|k| {
                    let a = views.join(format!("view{k}.albedo.pfm"));
                    let rm = views.join(format!("view{k}.rm.pfm"));
                    Ok(MaterialMaps::new(imageio::read_pfm(&a)?, imageio::read_pfm(&rm)?)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let pipeline = PipelineConfig {
                view_resolution: maps[0].width(),
                ..config.pipeline.clone()
            };
            let observed = vec![Vec::new(); 6];
            let mut refiner = refiner_of(refiner.as_deref(), out);
            let output = decompose_object(
                &mesh,
                ObjectSource::Observed(&observed),
                &mut FileDecomposer(maps),
                refiner.as_mut(),
                &pipeline,
            )?;
            let manifest = write_outputs(&output, out)?;
            info!(
                "coverage {:.3}, wrote {} files",
                1.0 - output.report.coverage.missing_fraction,
                manifest.files.len()
            );
        }
        Command::Metrics { pred, target } => {
            let report = metrics(&pred, &target)?;
            print_json(&report)?;
            write_json(out, "metrics.json", &report)?;
            write_manifest(out, vec![file_entry(out, "metrics.json", Role::Report)?])?;
        }
        Command::SchedulerDump {
            train_steps,
            steps,
            spacing,
        } => {
            let s = config.schedule;
            let train_steps = train_steps.unwrap_or(s.train_steps);
            let spacing = match spacing {
                None => s.spacing,
                Some(SpacingArg::Trailing) => Spacing::Trailing,
                Some(SpacingArg::Leading) => Spacing::Leading { steps_offset: 1 },
            };
            let schedule = NoiseSchedule::new(train_steps, s.beta_start, s.beta_end, s.beta_schedule)?;
            let dump = scheduler::dump(&schedule, steps.unwrap_or(s.steps), spacing)?;
            print_json(&dump)?;
            write_json(out, "schedule.json", &dump)?;
            write_manifest(out, vec![file_entry(out, "schedule.json", Role::Report)?])?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli) {
        // Library errors already embed their source in the message.
        let mut msg = e.to_string();
        for cause in e.chain().skip(1) {
            let c = cause.to_string();
            if !msg.contains(&c) {
                msg = format!("{msg}: {c}");
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
