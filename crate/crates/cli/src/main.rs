use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use avatar_field::evaluation::{evaluate_split, mean_scores, write_scores, Predictor};
use avatar_field::imaging::{write_gray_png, Image};
use avatar_field::metrics::{
    error_map, f_dist, frequency_map, FrequencyHistogram, HISTOGRAM_MAX_STD,
};
use avatar_field::model::{AblationMode, AvatarField};
use avatar_field::renderer::{render_image, Camera, PosedModel, RenderConfig};
use avatar_field::skeleton::PosesFile;
use avatar_field::synthetic::{generate_dataset, Dataset, GenerateConfig, SceneSpec, Split};
use avatar_field::tensor::{read_checkpoint, TensorError};
use avatar_field::trainer::{train, TrainConfig, TrainOutputs};
use avatar_field::skeleton::SkeletonError;
use avatar_field::{verify, Error};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "avatar-field", version, about = "Pose-conditioned radiance fields for articulated bodies")]
struct Cli {
    /// Single worker and fixed reduction order.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset from a scene description.
    Generate {
        /// Scene JSON, or `default` for the built-in body.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// TOML overrides for the generator settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset's training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// TOML run config; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<AblationMode>,
        /// Skip network evaluation outside every part box (default on).
        #[arg(long)]
        cull: Option<Toggle>,
    },
    /// Render one image from a checkpoint.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        /// A camera JSON object or an array of them.
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = 0)]
        view: usize,
        /// Poses JSON (bone names and per-frame rotations).
        #[arg(long)]
        pose: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Rewire the checkpoint under another ablation mode.
        #[arg(long)]
        mode: Option<AblationMode>,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Score a held-out split; `--ckpt gt` scores the ground truth against
    /// itself and `--ckpt oracle` re-renders the analytic scene.
    Eval {
        #[arg(long)]
        ckpt: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-frame predictions, error and frequency maps to
        /// `OUT.maps/`.
        #[arg(long)]
        maps: bool,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Frequency maps, histograms and F-Dist for an image pair.
    Freq {
        #[arg(long)]
        image: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Usage,
    MissingFile,
    Schema,
    NonFinite,
    CheckFailed,
    Io,
}

impl Kind {
    fn code(&self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::MissingFile => 3,
            Kind::Schema => 4,
            Kind::NonFinite => 5,
            Kind::CheckFailed => 6,
            Kind::Io => 7,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Kind::Usage => "usage",
            Kind::MissingFile => "missing_file",
            Kind::Schema => "schema",
            Kind::NonFinite => "non_finite",
            Kind::CheckFailed => "check_failed",
            Kind::Io => "io",
        }
    }
}

#[derive(Debug)]
struct Failure(Kind, String);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failure {}

fn io_kind(e: &std::io::Error) -> Kind {
    if e.kind() == ErrorKind::NotFound {
        Kind::MissingFile
    } else {
        Kind::Io
    }
}

fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(Failure(kind, _)) = cause.downcast_ref::<Failure>() {
            return *kind;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NonFiniteLoss { .. } => Kind::NonFinite,
                Error::Io(io) => io_kind(io),
                Error::Tensor(TensorError::Io(io)) => io_kind(io),
                Error::Tensor(TensorError::NonFinite(_)) => Kind::NonFinite,
                Error::Skeleton(SkeletonError::Io(io)) => io_kind(io),
                _ => Kind::Schema,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_kind(io);
        }
    }
    Kind::Schema
}

fn require_file(p: &Path) -> anyhow::Result<()> {
    if !p.exists() {
        return Err(Failure(Kind::MissingFile, format!("no such file: {}", p.display())).into());
    }
    Ok(())
}

fn print_config(command: &str, value: serde_json::Value) {
    println!("# {command} config");
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn workers(serial: bool) -> Option<usize> {
    serial.then_some(1)
}

fn read_image(path: &Path) -> anyhow::Result<Image> {
    require_file(path)?;
    let img = if path.extension().is_some_and(|e| e == "bin") {
        Image::read_raw(path)
    } else {
        Image::read_png(path)
    };
    img.with_context(|| format!("reading {}", path.display()))
}

fn read_camera(path: &Path, view: usize) -> anyhow::Result<Camera> {
    require_file(path)?;
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let cam: Camera = if value.is_array() {
        let cams: Vec<Camera> = serde_json::from_value(value).map_err(Error::from)?;
        cams.into_iter()
            .nth(view)
            .ok_or_else(|| Failure(Kind::Usage, format!("camera file has no view {view}")))?
    } else {
        serde_json::from_value(value).map_err(Error::from)?
    };
    cam.validate()?;
    Ok(cam)
}

fn generate(scene: &str, out: &Path, seed: Option<u64>, config: Option<&Path>, serial: bool) -> anyhow::Result<()> {
    let spec = if scene == "default" {
        SceneSpec::default_body()
    } else {
        let path = Path::new(scene);
        require_file(path)?;
        serde_json::from_str(&fs::read_to_string(path)?).map_err(Error::from)?
    };
    let mut cfg = match config {
        Some(p) => {
            require_file(p)?;
            GenerateConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => GenerateConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if serial {
        cfg.workers = Some(1);
    }
    spec.validate()?;
    print_config("generate", json!({ "out": out, "generator": cfg, "scene": spec }));
    let start = Instant::now();
    let manifest = generate_dataset(&spec, &cfg, out)?;
    println!(
        "wrote {} frames to {} in {:.1}s",
        manifest.frames.len(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

struct TrainArgs<'a> {
    data: &'a Path,
    config: Option<&'a Path>,
    out: &'a Path,
    iterations: Option<usize>,
    seed: Option<u64>,
    mode: Option<AblationMode>,
    cull: Option<Toggle>,
    serial: bool,
}

fn run_train(a: TrainArgs<'_>) -> anyhow::Result<()> {
    require_file(a.data)?;
    let mut cfg = match a.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::from_toml(&fs::read_to_string(p)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.ablation = m;
    }
    if let Some(c) = a.cull {
        cfg.model.cull = matches!(c, Toggle::On);
    }
    cfg.serial |= a.serial;
    cfg.validate()?;
    println!("# train config (data {}, out {})", a.data.display(), a.out.display());
    println!("{}", cfg.to_toml());
    let dataset = Dataset::load(a.data)?;
    let outputs = TrainOutputs::beside(a.out);
    let start = Instant::now();
    let report_every = (cfg.iterations / 100).clamp(1, 100);
    let outcome = train(&dataset, &cfg, Some(&outputs), |r| {
        if r.iteration % report_every == 0 || r.iteration + 1 == cfg.iterations {
            log::info!(
                "iter {:>6}  l_rec {:.5}  l_s {:.4}  total {:.5}  lr {:.2e}  {:.1}s",
                r.iteration,
                r.l_rec,
                r.l_s,
                r.total,
                r.lr,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let last = outcome.log.last().expect("at least one iteration");
    println!(
        "trained {} iterations in {:.1}s, final loss {:.5}; checkpoint {}, loss log {}",
        outcome.log.len(),
        start.elapsed().as_secs_f64(),
        last.total,
        outputs.checkpoint.display(),
        outputs.loss_log.display()
    );
    Ok(())
}

struct RenderArgs<'a> {
    ckpt: &'a Path,
    camera: &'a Path,
    view: usize,
    pose: &'a Path,
    frame: usize,
    out: &'a Path,
    mode: Option<AblationMode>,
    samples: usize,
    serial: bool,
}

fn run_render(a: RenderArgs<'_>) -> anyhow::Result<()> {
    require_file(a.ckpt)?;
    require_file(a.pose)?;
    let camera = read_camera(a.camera, a.view)?;
    let poses = PosesFile::read(a.pose)?;
    let pose = poses
        .poses()
        .into_iter()
        .nth(a.frame)
        .ok_or_else(|| Failure(Kind::Usage, format!("pose file has no frame {}", a.frame)))?;
    let (model, mut params) = AvatarField::from_checkpoint(&read_checkpoint(a.ckpt)?)?;
    if pose.bone_count() != model.topology().bone_count() {
        bail!(Failure(
            Kind::Schema,
            format!(
                "pose has {} bones, checkpoint skeleton has {}",
                pose.bone_count(),
                model.topology().bone_count()
            )
        ));
    }
    let model = match a.mode {
        Some(m) => model.with_mode(m, &mut params)?,
        None => model,
    };
    let cfg = RenderConfig {
        samples: a.samples,
        workers: workers(a.serial),
        ..RenderConfig::default()
    };
    print_config(
        "render",
        json!({
            "ckpt": a.ckpt, "camera": a.camera, "view": a.view, "pose": a.pose,
            "frame": a.frame, "out": a.out, "mode": model.mode(), "render": cfg,
        }),
    );
    let field = PosedModel {
        model: &model,
        params: &params,
        pose: &pose,
    };
    let (img, _) = render_image(&field, &camera, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    img.write_png(a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

struct EvalArgs<'a> {
    ckpt: &'a str,
    data: &'a Path,
    split: Split,
    out: &'a Path,
    maps: bool,
    samples: usize,
    serial: bool,
}

fn run_eval(a: EvalArgs<'_>) -> anyhow::Result<()> {
    require_file(a.data)?;
    if a.split == Split::Train {
        bail!(Failure(Kind::Usage, "eval expects novel_view or novel_pose".into()));
    }
    let loaded = match a.ckpt {
        "gt" | "oracle" => None,
        path => {
            require_file(Path::new(path))?;
            Some(AvatarField::from_checkpoint(&read_checkpoint(path)?)?)
        }
    };
    let dataset = Dataset::load(a.data)?;
    let predictor = match (&loaded, a.ckpt) {
        (Some((model, params)), _) => Predictor::Model { model, params },
        (None, "gt") => Predictor::GroundTruth,
        _ => Predictor::Oracle,
    };
    let cfg = RenderConfig {
        samples: a.samples,
        workers: workers(a.serial),
        ..RenderConfig::default()
    };
    let maps_dir = a.maps.then(|| {
        let mut p = a.out.as_os_str().to_owned();
        p.push(".maps");
        PathBuf::from(p)
    });
    print_config(
        "eval",
        json!({
            "ckpt": a.ckpt, "data": a.data, "split": a.split, "out": a.out,
            "maps": maps_dir, "render": cfg,
        }),
    );
    let scores = evaluate_split(&dataset, a.split, &predictor, &cfg, maps_dir.as_deref())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_scores(a.out, &scores)?;
    let (p, s, f) = mean_scores(&scores);
    println!(
        "{} frames: mean psnr {p:.2} ssim {s:.4} f_dist {f:.4}; wrote {}",
        scores.len(),
        a.out.display()
    );
    Ok(())
}

fn run_freq(image: &Path, reference: &Path, out: &Path) -> anyhow::Result<()> {
    let a = read_image(image)?;
    let b = read_image(reference)?;
    if !a.same_size(&b) {
        bail!(Failure(Kind::Schema, "image and reference differ in size".into()));
    }
    print_config(
        "freq",
        json!({ "image": image, "ref": reference, "out": out, "max_std": HISTOGRAM_MAX_STD }),
    );
    fs::create_dir_all(out)?;
    let (ma, mb) = (frequency_map(&a), frequency_map(&b));
    for (name, m) in [("freq_image.png", &ma), ("freq_ref.png", &mb)] {
        write_gray_png(out.join(name), m.width, m.height, &m.values, HISTOGRAM_MAX_STD)?;
    }
    error_map(&a, &b, 0.5)?.write_png(out.join("error.png"))?;
    let (ha, hb) = (FrequencyHistogram::standard(&ma), FrequencyHistogram::standard(&mb));
    let mut w = csv::Writer::from_path(out.join("histogram.csv"))?;
    w.write_record(["bin_lo", "bin_hi", "image", "ref"])?;
    let edges = ha.bin_edges();
    for k in 0..ha.mass.len() {
        w.write_record([
            edges[k].to_string(),
            edges[k + 1].to_string(),
            ha.mass[k].to_string(),
            hb.mass[k].to_string(),
        ])?;
    }
    w.flush()?;
    let d = f_dist(&ha, &hb)?;
    fs::write(out.join("f_dist.txt"), format!("{d}\n"))?;
    println!("f_dist {d:.6}; wrote maps and histogram to {}", out.display());
    Ok(())
}

fn run_gradcheck(module: Option<&str>, seed: u64) -> anyhow::Result<()> {
    print_config(
        "gradcheck",
        json!({ "module": module, "seed": seed, "step": verify::STEP, "tolerance": verify::TOLERANCE }),
    );
    let results = verify::run_suite(module, seed)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<28} max_rel_err {:.3e}  coords {:>5}  {status}",
            r.name, r.report.max_rel_error, r.report.coords_checked
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if !failed.is_empty() {
        bail!(Failure(
            Kind::CheckFailed,
            format!("gradient mismatch above {} in {}", verify::TOLERANCE, failed.join(", "))
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let serial = cli.serial;
    match cli.command {
        Command::Generate { scene, out, seed, config } => generate(&scene, &out, seed, config.as_deref(), serial),
        Command::Train { data, config, out, iterations, seed, mode, cull } => run_train(TrainArgs {
            data: &data,
            config: config.as_deref(),
            out: &out,
            iterations,
            seed,
            mode,
            cull,
            serial,
        }),
        Command::Render { ckpt, camera, view, pose, frame, out, mode, samples } => run_render(RenderArgs {
            ckpt: &ckpt,
            camera: &camera,
            view,
            pose: &pose,
            frame,
            out: &out,
            mode,
            samples,
            serial,
        }),
        Command::Eval { ckpt, data, split, out, maps, samples } => run_eval(EvalArgs {
            ckpt: &ckpt,
            data: &data,
            split,
            out: &out,
            maps,
            samples,
            serial,
        }),
        Command::Freq { image, reference, out } => run_freq(&image, &reference, &out),
        Command::Gradcheck { module, seed } => run_gradcheck(module.as_deref(), seed),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    avatar_field::tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let kind = Kind::Usage;
            eprintln!("error code={} kind={} message=\"{}\"", kind.code(), kind.name(), one_line(&e.to_string()));
            return ExitCode::from(kind.code());
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = classify(&e);
            eprintln!("error code={} kind={} message=\"{}\"", kind.code(), kind.name(), one_line(&format!("{e:#}")));
            ExitCode::from(kind.code())
        }
    }
}
