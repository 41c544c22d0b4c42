use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use scene_insert::backends::{BackendRegistry, BackendSelection, Backends};
use scene_insert::conditioning::StageKind;
use scene_insert::dataset::{prepare_dataset, Dataset, DatasetConfig, Split};
use scene_insert::eval::{evaluate, load_method_outputs, Region, COMPOSITE_FILE};
use scene_insert::imaging::{mask_from_silhouette, BinaryMask, DepthMap, ImageRGB, Normalization};
use scene_insert::pipelines::{
    infer_direct, infer_two_stage, load_checkpoint, save_checkpoint, train, Checkpoint, InferenceInputs, RunConfig,
};
use scene_insert::render::{build_pose_inputs, BodyMesh, CameraSpec};
use scene_insert::synthetic::{write_videos, SyntheticSpec};

/// Path of a TOML file holding a `BackendSelection`; overrides the config's.
const BACKENDS_ENV: &str = "SCENE_INSERT_BACKENDS";

#[derive(Debug, Parser)]
#[command(
    name = "scene-insert",
    version,
    about = "Insert a reference person into a scene image"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a training dataset from a directory of person videos.
    PrepareData(PrepareArgs),
    /// Train one of the stage models.
    Train(TrainArgs),
    /// Insert a person into a scene, or into every record of a dataset split.
    Infer(InferArgs),
    /// Score method outputs against a dataset split.
    Evaluate(EvaluateArgs),
    /// Write procedural person videos usable by prepare-data.
    SynthVideos(SynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML file with optional [run] and [data] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct PrepareArgs {
    #[arg(long)]
    videos: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_stage)]
    stage: StageKind,
    #[arg(long)]
    data: PathBuf,
    /// Best-validation checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Method {
    Direct,
    TwoStage,
}

impl Method {
    fn as_str(self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::TwoStage => "two-stage",
        }
    }
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long, value_enum)]
    method: Method,
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    scene: Option<PathBuf>,
    /// Segmented person on a constant fill color.
    #[arg(long = "ref", required_unless_present = "data")]
    reference: Option<PathBuf>,
    /// 16-bit pose depth in [-1, 1], background at -1.
    #[arg(long, required_unless_present_any = ["data", "mesh"], conflicts_with = "mesh")]
    pose_depth: Option<PathBuf>,
    /// Posed body mesh in the text mesh format; rendered with a centered camera.
    #[arg(long)]
    mesh: Option<PathBuf>,
    /// Insertion mask (0 inside the insertion box); derived from the pose when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Reference fill color as r,g,b in [0, 1]; defaults to the data config's.
    #[arg(long, value_parser = parse_color)]
    fill: Option<[f64; 3]>,
    /// Run on every record of a dataset split instead of a single scene.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    save_intermediate_depth: bool,
    #[arg(long, default_value = "checkpoints/direct.json")]
    checkpoint: PathBuf,
    #[arg(long, default_value = "checkpoints/stage1.json")]
    stage1_checkpoint: PathBuf,
    #[arg(long, default_value = "checkpoints/stage2.json")]
    stage2_checkpoint: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Directory laid out as <method>/<record_id>/composite.png.
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Text report path; the CSV is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_region, default_value = "full")]
    region: Region,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    split: Split,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_stage(s: &str) -> Result<StageKind, String> {
    s.parse().map_err(|e: scene_insert::Error| e.to_string())
}

fn parse_region(s: &str) -> Result<Region, String> {
    s.parse().map_err(|e: scene_insert::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn parse_color(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [r, g, b] if parts.iter().all(|c| (0.0..=1.0).contains(c)) => Ok([*r, *g, *b]),
        _ => Err("expected three comma-separated values in [0, 1]".into()),
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CliConfig {
    run: RunConfig,
    data: DatasetConfig,
}

impl CliConfig {
    fn load(common: &Common) -> scene_insert::Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| scene_insert::Error::io(path, e))?;
                toml::from_str(&text).map_err(|e| scene_insert::Error::Config(format!("{}: {e}", path.display())))?
            }
            None => CliConfig::default(),
        };
        match common.seed {
            Some(seed) => cfg.run.seed = seed,
            None => log::info!("seed={} (from config or default)", cfg.run.seed),
        }
        if let Ok(path) = std::env::var(BACKENDS_ENV) {
            let text = std::fs::read_to_string(&path).map_err(|e| scene_insert::Error::io(&path, e))?;
            let sel: BackendSelection =
                toml::from_str(&text).map_err(|e| scene_insert::Error::Config(format!("{path}: {e}")))?;
            log::info!("backend selection from {BACKENDS_ENV}={path}");
            cfg.run.backends = sel.clone();
            cfg.data.backends = sel;
        }
        cfg.run.validate()?;
        cfg.data.validate()?;
        if cfg.run.resolution != cfg.data.resolution {
            return Err(scene_insert::Error::Config(format!(
                "run resolution {} differs from data resolution {}",
                cfg.run.resolution, cfg.data.resolution
            )));
        }
        Ok(cfg)
    }

    fn backends(&self, selection: &BackendSelection) -> scene_insert::Result<Backends> {
        BackendRegistry::with_doubles(&self.run.double_params())?.resolve(selection)
    }
}

/// Builds `target` in a sibling temporary directory and renames it into place.
fn write_dir_atomically(target: &Path, fill: impl FnOnce(&Path) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let parent = target
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = parent.join(format!(".tmp-{name}-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    if let Err(e) = fill(&tmp) {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        std::fs::remove_dir_all(target).with_context(|| format!("replacing {}", target.display()))?;
    }
    std::fs::rename(&tmp, target).with_context(|| format!("moving output into {}", target.display()))?;
    Ok(())
}

fn cmd_prepare(args: PrepareArgs) -> anyhow::Result<()> {
    let cfg = CliConfig::load(&args.common)?;
    let backends = cfg.backends(&cfg.data.backends)?;
    log::info!(
        "stage=prepare-data config_hash={} seed={}",
        cfg.data.hash(),
        cfg.run.seed
    );
    let summary = prepare_dataset(&args.videos, &args.out, &cfg.data, cfg.run.seed, &backends)?;
    for (id, reason) in &summary.skipped {
        log::info!("stage=prepare-data skipped id={id} reason={}", reason.as_str());
    }
    log::info!(
        "stage=prepare-data written={} skipped={} train={} val={} test={}",
        summary.written,
        summary.skipped.len(),
        summary.manifest.count(Split::Train),
        summary.manifest.count(Split::Val),
        summary.manifest.count(Split::Test)
    );
    if summary.written == 0 {
        bail!(scene_insert::Error::validation("no usable records were produced"));
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let cfg = CliConfig::load(&args.common)?;
    let backends = cfg.backends(&cfg.run.backends)?;
    let dataset = Dataset::load(&args.data)?;
    log::info!(
        "stage=train model={} config_hash={} model_hash={} dataset_hash={} seed={}",
        args.stage,
        cfg.run.hash(),
        cfg.run.model_hash(),
        dataset.manifest.config_hash,
        cfg.run.seed
    );
    let owned = |s: Split| dataset.split(s).into_iter().cloned().collect::<Vec<_>>();
    let report = train(
        args.stage,
        &owned(Split::Train),
        &owned(Split::Val),
        &cfg.run,
        &backends,
    )?;
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from(format!("checkpoints/{}.json", args.stage)));
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&report.best, &out)?;
    save_checkpoint(&report.last, &out.with_extension("last.json"))?;
    let mut curve = String::from("step\tloss\n");
    for (i, l) in report.losses.iter().enumerate() {
        curve.push_str(&format!("{}\t{l:.9e}\n", i + 1));
    }
    let curve_path = out.with_extension("losses.tsv");
    std::fs::write(&curve_path, curve).with_context(|| format!("writing {}", curve_path.display()))?;
    log::info!(
        "stage=train model={} best_step={} probe_initial={:.6} probe_final={:.6} checkpoint={}",
        args.stage,
        report.best.step,
        report.probe_initial,
        report.probe_final,
        out.display()
    );
    Ok(())
}

struct Models {
    direct: Option<Checkpoint>,
    stages: Option<(Checkpoint, Checkpoint)>,
}

fn load_models(args: &InferArgs) -> anyhow::Result<Models> {
    Ok(match args.method {
        Method::Direct => Models {
            direct: Some(load_checkpoint(&args.checkpoint)?),
            stages: None,
        },
        Method::TwoStage => Models {
            direct: None,
            stages: Some((
                load_checkpoint(&args.stage1_checkpoint)?,
                load_checkpoint(&args.stage2_checkpoint)?,
            )),
        },
    })
}

fn run_models(
    inputs: &InferenceInputs,
    models: &Models,
    cfg: &RunConfig,
    backends: &Backends,
) -> scene_insert::Result<(ImageRGB, Option<DepthMap>)> {
    match (&models.direct, &models.stages) {
        (Some(ckpt), _) => Ok((infer_direct(inputs, ckpt, cfg, backends)?, None)),
        (None, Some((s1, s2))) => {
            let out = infer_two_stage(inputs, s1, s2, cfg, backends)?;
            Ok((out.image, Some(out.depth)))
        }
        (None, None) => unreachable!("load_models always yields a model"),
    }
}

fn write_outputs(dir: &Path, image: &ImageRGB, depth: Option<&DepthMap>, save_depth: bool) -> anyhow::Result<()> {
    image.save_png(&dir.join(COMPOSITE_FILE))?;
    if let (true, Some(d)) = (save_depth, depth) {
        d.save_png16(&dir.join("depth.png"))?;
    }
    Ok(())
}

fn single_inputs(args: &InferArgs, data: &DatasetConfig, resolution: usize) -> anyhow::Result<InferenceInputs> {
    let (scene_path, ref_path) = match (&args.scene, &args.reference) {
        (Some(s), Some(r)) => (s, r),
        _ => bail!(scene_insert::Error::validation(
            "--scene and --ref are required without --data"
        )),
    };
    let scene = ImageRGB::load_png(scene_path)?;
    let reference = ImageRGB::load_png(ref_path)?;
    for (name, img) in [("scene", &scene), ("reference", &reference)] {
        if (img.height(), img.width()) != (resolution, resolution) {
            bail!(scene_insert::Error::validation(format!(
                "{name} is {}×{}, expected {resolution}×{resolution}",
                img.height(),
                img.width()
            )));
        }
    }
    let (pose_depth, silhouette) = if let Some(mesh_path) = &args.mesh {
        let mesh = BodyMesh::load(mesh_path)?;
        let pose = build_pose_inputs(
            &mesh,
            &CameraSpec::centered(resolution, resolution),
            data.dilation_radius,
        )?;
        (pose.pose_depth, pose.silhouette)
    } else {
        let path = args.pose_depth.as_ref().expect("clap requires --pose-depth or --mesh");
        let d = DepthMap::load_png16(path, Normalization::MinMax)?;
        let sil = BinaryMask::from_fn(d.height(), d.width(), |y, x| d.data()[[y, x]] > -1.0);
        (d, sil)
    };
    let mask = match &args.mask {
        Some(p) => BinaryMask::load_png(p)?,
        None => mask_from_silhouette(&silhouette, data.dilation_radius)?,
    };
    Ok(InferenceInputs {
        scene,
        reference,
        fill: args.fill.unwrap_or(data.fill_color),
        pose_depth,
        mask,
    })
}

fn cmd_infer(args: InferArgs) -> anyhow::Result<()> {
    let cfg = CliConfig::load(&args.common)?;
    let backends = cfg.backends(&cfg.run.backends)?;
    let models = load_models(&args)?;
    log::info!(
        "stage=infer method={} config_hash={} model_hash={} seed={} guidance={} steps={}",
        args.method.as_str(),
        cfg.run.hash(),
        cfg.run.model_hash(),
        cfg.run.seed,
        cfg.run.guidance.scale,
        cfg.run.guidance.steps
    );
    match &args.data {
        None => {
            let inputs = single_inputs(&args, &cfg.data, cfg.run.resolution)?;
            let (image, depth) = run_models(&inputs, &models, &cfg.run, &backends)?;
            write_dir_atomically(&args.out, |tmp| {
                write_outputs(tmp, &image, depth.as_ref(), args.save_intermediate_depth)
            })?;
            log::info!("stage=infer method={} out={}", args.method.as_str(), args.out.display());
        }
        Some(data) => {
            let dataset = Dataset::load(data)?;
            let target = args.out.join(args.method.as_str());
            write_dir_atomically(&target, |tmp| {
                for record in dataset.split(args.split) {
                    let (image, depth) =
                        run_models(&InferenceInputs::from_record(record), &models, &cfg.run, &backends)?;
                    let dir = tmp.join(&record.id);
                    std::fs::create_dir_all(&dir)?;
                    write_outputs(&dir, &image, depth.as_ref(), args.save_intermediate_depth)?;
                    log::info!("stage=infer method={} record={}", args.method.as_str(), record.id);
                }
                Ok(())
            })?;
        }
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = CliConfig::load(&args.common)?;
    let backends = cfg.backends(&cfg.run.backends)?;
    let dataset = Dataset::load(&args.data)?;
    let records = dataset.split(args.split);
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let outputs = load_method_outputs(&args.pred, &ids)?;
    if outputs.is_empty() {
        bail!(scene_insert::Error::validation(format!(
            "no method directories under {}",
            args.pred.display()
        )));
    }
    let hash = dataset.manifest.config_hash.clone();
    log::info!(
        "stage=evaluate config_hash={hash} records={} methods={}",
        records.len(),
        outputs.len()
    );
    let report = evaluate(
        &records,
        &outputs,
        &backends,
        args.region,
        &args.data.display().to_string(),
        &hash,
    )?;
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    report.write(&args.out)?;
    for row in &report.rows {
        log::info!(
            "stage=evaluate method={} evaluated={} missing={} ssim={:?} mse={:?} sim={:?}",
            row.method,
            row.evaluated,
            row.missing,
            row.ssim,
            row.mse,
            row.sim
        );
    }
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticSpec {
        height: args.size,
        width: args.size,
        frames: args.frames,
        ..SyntheticSpec::default()
    };
    log::info!("stage=synth-videos count={} seed={}", args.count, args.seed);
    std::fs::create_dir_all(&args.out)?;
    write_videos(&args.out, args.count, spec, args.seed)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<scene_insert::Error>() {
        Some(e) if e.is_validation() => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PrepareData(a) => cmd_prepare(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::SynthVideos(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
