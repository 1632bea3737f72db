use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use stereosplat::gaussian::GaussianCloud;
use stereosplat::init::{init_dense, init_random, init_sparse, TriangulationGates};
use stereosplat::loss::{psnr, ssim};
use stereosplat::ply::{load_ply, save_ply};
use stereosplat::render::render;
use stereosplat::image::Image;
use stereosplat::scene::{load_depth, load_pfm, load_png, load_scene, save_depth, save_pfm, save_png, write_file, SceneBundle};
use stereosplat::testkit::{make_scene, SceneKind, SyntheticSceneSpec};
use stereosplat::train::{depth_error, train, write_config, TrainConfig, View, DEPTH_EVAL_ALPHA};

#[derive(Parser)]
#[command(name = "stereosplat", version, about = "Sparse-view Gaussian splatting on the CPU")]
struct Cli {
    /// Worker threads; defaults to rayon's choice.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene and write it as a scene directory.
    MakeSynthetic(MakeSyntheticArgs),
    /// Build an initial Gaussian cloud and write it as PLY.
    InitPoints(InitPointsArgs),
    /// Optimize a cloud against the training views of a scene.
    Train(TrainArgs),
    /// Render color and depth for scene cameras.
    Render(RenderArgs),
    /// Report PSNR and SSIM per view.
    Eval(EvalArgs),
}

#[derive(Parser)]
struct MakeSyntheticArgs {
    #[arg(long, value_enum, default_value = "two-layer")]
    kind: Kind,
    /// JSON file overriding the preset; missing fields take preset defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Correspondences per training-view pair; 0 writes none.
    #[arg(long, default_value_t = 3000)]
    matches: usize,
    /// Match noise in pixels; defaults to 0.5 px at a 1000 px focal length,
    /// scaled to the scene's focal length.
    #[arg(long)]
    noise_px: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    TexturedPlane,
    TwoLayer,
    RandomBlobCloud,
}

impl From<Kind> for SceneKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::TexturedPlane => SceneKind::TexturedPlane,
            Kind::TwoLayer => SceneKind::TwoLayer,
            Kind::RandomBlobCloud => SceneKind::RandomBlobCloud,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitMode {
    Dense,
    Sparse,
    Random,
}

#[derive(Parser)]
struct InitPointsArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "dense")]
    mode: InitMode,
    /// Correspondence file; defaults to the one named in the scene.
    #[arg(long)]
    correspondences: Option<PathBuf>,
    /// Point PLY for sparse mode; defaults to the scene's init PLY.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    max_reproj_px: f64,
    #[arg(long, default_value_t = 0.5)]
    min_confidence: f64,
    #[arg(long, default_value_t = 10_000)]
    count: usize,
    /// Lower corner of the random box, as x,y,z.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    min: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    max: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct TrainArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Initial cloud; defaults to the scene's init PLY.
    #[arg(long)]
    init: Option<PathBuf>,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum DepthFormat {
    Pfm,
    Png16,
}

#[derive(Parser)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cloud: PathBuf,
    /// Render only this view.
    #[arg(long)]
    view: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long, value_enum, default_value = "pfm")]
    depth_format: DepthFormat,
    /// Training config supplying background and render settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Parser)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Cloud to render and score.
    #[arg(long, conflicts_with = "renders", required_unless_present = "renders")]
    cloud: Option<PathBuf>,
    /// Directory of `<id>.png` renders to score instead.
    #[arg(long)]
    renders: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the metrics as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

enum CliError {
    Core(stereosplat::Error),
    Usage(String),
}

impl From<stereosplat::Error> for CliError {
    fn from(e: stereosplat::Error) -> Self {
        CliError::Core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "error[{}]: {e}", e.class()),
            CliError::Usage(m) => write!(f, "error[usage]: {m}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error[usage]: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::InitPoints(a) => init_points(a),
        Command::Train(a) => run_train(a),
        Command::Render(a) => run_render(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Messages can carry newlines from nested errors; keep one line.
            eprintln!("{}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(stereosplat::Error::Io { path: path.to_path_buf(), source: e })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text).map_err(stereosplat::Error::from)?)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    Ok(write_file(path, bytes)?)
}

fn load_cloud(path: &Path) -> CliResult<GaussianCloud> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(load_ply(&bytes)?)
}

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    let config = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    Ok(config)
}

fn make_synthetic(a: MakeSyntheticArgs) -> CliResult<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            // Fill unspecified fields from the chosen preset rather than the generic default.
            let overrides: serde_json::Value = read_json(p)?;
            let mut base = serde_json::to_value(SyntheticSceneSpec::preset(a.kind.into())).map_err(stereosplat::Error::from)?;
            if let (Some(base), Some(over)) = (base.as_object_mut(), overrides.as_object()) {
                for (k, v) in over {
                    base.insert(k.clone(), v.clone());
                }
            } else {
                return Err(CliError::Usage(format!("{} must hold a JSON object", p.display())));
            }
            serde_json::from_value(base).map_err(stereosplat::Error::from)?
        }
        None => SyntheticSceneSpec::preset(a.kind.into()),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let noise_px = a.noise_px.unwrap_or(0.5 * spec.focal / 1000.0);
    if !(noise_px >= 0.0) || !(0.0..=1.0).contains(&a.outlier_rate) {
        return Err(CliError::Usage("noise must be non-negative and the outlier rate within [0, 1]".into()));
    }
    let scene = make_scene(&spec)?;
    let correspondences = (a.matches > 0).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c0de);
        scene.fabricate_train_correspondences(a.matches, noise_px, a.outlier_rate, &mut rng)
    });
    let bundle = scene.write(&a.out, correspondences)?;
    write_bytes(&a.out.join("gt.ply"), &save_ply(&scene.gt))?;
    let mut spec_text = serde_json::to_string_pretty(&spec).map_err(stereosplat::Error::from)?;
    spec_text.push('\n');
    write_bytes(&a.out.join("synthetic.json"), spec_text.as_bytes())?;
    println!(
        "wrote {} ({} train, {} test views, {} ground-truth Gaussians)",
        a.out.display(),
        bundle.train.len(),
        bundle.test.len(),
        scene.gt.len()
    );
    Ok(())
}

fn to_box(v: &Option<Vec<f64>>, name: &str) -> CliResult<[f64; 3]> {
    match v.as_deref() {
        Some([x, y, z]) => Ok([*x, *y, *z]),
        _ => Err(CliError::Usage(format!("random init needs --{name} x,y,z"))),
    }
}

fn init_points(a: InitPointsArgs) -> CliResult<()> {
    let bundle = load_scene(&a.scene)?;
    let cloud = match a.mode {
        InitMode::Dense => {
            let sets = match &a.correspondences {
                Some(p) => stereosplat::scene::load_correspondences(p)?,
                None => bundle
                    .load_correspondences()?
                    .ok_or_else(|| CliError::Usage("scene has no correspondence file; pass --correspondences".into()))?,
            };
            let ids: Vec<String> = bundle.cameras.keys().cloned().collect();
            let images = bundle.load_images(&ids)?;
            let gates = TriangulationGates { max_reproj_px: a.max_reproj_px, min_confidence: a.min_confidence };
            init_dense(&bundle.cameras, &images, &sets, &gates)?
        }
        InitMode::Sparse => {
            let path = a
                .points
                .clone()
                .or_else(|| bundle.init_ply.clone())
                .ok_or_else(|| CliError::Usage("sparse init needs --points or an init PLY in the scene".into()))?;
            init_sparse(&path)?
        }
        InitMode::Random => {
            let (min, max) = (to_box(&a.min, "min")?, to_box(&a.max, "max")?);
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            init_random(a.count, min, max, &mut rng)?
        }
    };
    write_bytes(&a.out, &save_ply(&cloud))?;
    println!("wrote {} Gaussians to {}", cloud.len(), a.out.display());
    Ok(())
}

fn views_of(bundle: &SceneBundle, ids: &[String]) -> CliResult<Vec<View>> {
    ids.iter()
        .map(|id| {
            Ok(View {
                id: id.clone(),
                camera: bundle.camera(id)?.clone(),
                image: bundle.load_image(id)?,
                depth: bundle.load_depth(id)?,
            })
        })
        .collect()
}

fn run_train(a: TrainArgs) -> CliResult<()> {
    let bundle = load_scene(&a.scene)?;
    let mut config = load_config(a.config.as_deref())?;
    if let Some(n) = a.iters {
        config.total_iters = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    let init_path = a
        .init
        .clone()
        .or_else(|| bundle.init_ply.clone())
        .ok_or_else(|| CliError::Usage("no initial cloud; pass --init or add init_ply to the scene".into()))?;
    let cloud = load_cloud(&init_path)?;
    let train_views = views_of(&bundle, &bundle.train)?;
    let test_views = views_of(&bundle, &bundle.test)?;

    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_config(&a.out.join("config.json"), &config)?;
    let ckpt_dir = a.out.join("checkpoints");
    let (cloud, log) = train(&config, cloud, train_views, &test_views, |iter, cloud| {
        let path = ckpt_dir.join(format!("iter_{iter:06}.ply"));
        write_file(&path, &save_ply(cloud))
    })?;
    write_bytes(&a.out.join("point_cloud.ply"), &save_ply(&cloud))?;
    log.write(&a.out.join("log.jsonl"))?;
    let last = log.iterations().last();
    match last {
        Some(r) => println!("trained {} iterations; final loss {:.6}, {} Gaussians", config.total_iters, r.total, cloud.len()),
        None => println!("no iterations run; {} Gaussians", cloud.len()),
    }
    Ok(())
}

fn select(bundle: &SceneBundle, view: &Option<String>, split: Split) -> CliResult<Vec<String>> {
    if let Some(id) = view {
        bundle.camera(id)?;
        return Ok(vec![id.clone()]);
    }
    Ok(match split {
        Split::Train => bundle.train.clone(),
        Split::Test => bundle.test.clone(),
        Split::All => bundle.cameras.keys().cloned().collect(),
    })
}

fn run_render(a: RenderArgs) -> CliResult<()> {
    let bundle = load_scene(&a.scene)?;
    let config = load_config(a.config.as_deref())?;
    let cloud = load_cloud(&a.cloud)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    for id in select(&bundle, &a.view, a.split)? {
        let (fb, _) = render(&cloud, bundle.camera(&id)?, config.background, &config.render);
        save_png(&a.out.join(format!("{id}.png")), &fb.color)?;
        match a.depth_format {
            DepthFormat::Pfm => save_pfm(&a.out.join(format!("{id}_depth.pfm")), &fb.depth)?,
            DepthFormat::Png16 => save_depth(&a.out.join(format!("{id}_depth.png")), &fb.depth)?,
        }
        save_pfm(&a.out.join(format!("{id}_alpha.pfm")), &fb.alpha)?;
    }
    println!("wrote renders to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsRow {
    view: String,
    #[serde(serialize_with = "json_float")]
    psnr: f64,
    ssim: f64,
    depth_mae: Option<f64>,
}

/// JSON has no infinity; identical images are written as the string "inf".
fn json_float<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

/// Depth and alpha written by `render`, if both are present.
fn rendered_depth(dir: &Path, id: &str) -> CliResult<Option<(Image, Image)>> {
    let alpha = dir.join(format!("{id}_alpha.pfm"));
    if !alpha.exists() {
        return Ok(None);
    }
    let (pfm, png) = (dir.join(format!("{id}_depth.pfm")), dir.join(format!("{id}_depth.png")));
    let depth = if pfm.exists() {
        load_pfm(&pfm)?
    } else if png.exists() {
        load_depth(&png)?
    } else {
        return Ok(None);
    };
    Ok(Some((depth, load_pfm(&alpha)?)))
}

fn run_eval(a: EvalArgs) -> CliResult<()> {
    let bundle = load_scene(&a.scene)?;
    let config = load_config(a.config.as_deref())?;
    let cloud = a.cloud.as_deref().map(load_cloud).transpose()?;
    let mut rows = Vec::new();
    for id in select(&bundle, &None, a.split)? {
        let gt = bundle.load_image(&id)?;
        let (color, depth_mae) = match (&cloud, &a.renders) {
            (Some(cloud), _) => {
                let (fb, _) = render(cloud, bundle.camera(&id)?, config.background, &config.render);
                let mae = match bundle.load_depth(&id)? {
                    Some(d) => depth_error(&fb.depth, &d, &fb.alpha, DEPTH_EVAL_ALPHA)?,
                    None => None,
                };
                (fb.color, mae)
            }
            (None, Some(dir)) => {
                let mae = match (bundle.load_depth(&id)?, rendered_depth(dir, &id)?) {
                    (Some(gt), Some((depth, alpha))) => depth_error(&depth, &gt, &alpha, DEPTH_EVAL_ALPHA)?,
                    _ => None,
                };
                (load_png(&dir.join(format!("{id}.png")))?, mae)
            }
            (None, None) => return Err(CliError::Usage("pass --cloud or --renders".into())),
        };
        rows.push(MetricsRow { view: id, psnr: psnr(&color, &gt)?, ssim: ssim(&color, &gt)?, depth_mae });
    }
    if rows.is_empty() {
        return Err(CliError::Usage("the selected split has no views".into()));
    }

    println!("{:<12} {:>10} {:>10} {:>10}", "view", "psnr", "ssim", "depth_mae");
    for r in &rows {
        let mae = r.depth_mae.map_or("-".to_string(), |v| format!("{v:.5}"));
        println!("{:<12} {:>10} {:>10.6} {:>10}", r.view, fmt_psnr(r.psnr), r.ssim, mae);
    }
    let n = rows.len() as f64;
    let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    let maes: Vec<f64> = rows.iter().filter_map(|r| r.depth_mae).collect();
    let mean_mae = (!maes.is_empty()).then(|| maes.iter().sum::<f64>() / maes.len() as f64);
    let mae = mean_mae.map_or("-".to_string(), |v| format!("{v:.5}"));
    println!("{:<12} {:>10} {:>10.6} {:>10}", "mean", fmt_psnr(mean_psnr), mean_ssim, mae);

    if let Some(path) = &a.json {
        let mut text = serde_json::to_string_pretty(&rows).map_err(stereosplat::Error::from)?;
        text.push('\n');
        write_bytes(path, text.as_bytes())?;
    }
    Ok(())
}
