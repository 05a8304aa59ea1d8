use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use editground::attention::BlockSelection;
use editground::config::{MapKind, UpsamplePath};
use editground::harness::{
    eval_text, run_eval, run_separability, run_sweep, write_eval_report, write_separability_report,
    write_sweep_report,
};
use editground::localization::{attention_map, segment};
use editground::par;
use editground::synth::{write_plants, SuiteSpec};
use editground::tensor_io::{
    load_bundle, load_sample_bundle, read_manifest, read_mask_pgm_file, write_gray_pgm,
    write_mask_pgm_file, DumpBundle, Manifest, SampleManifest,
};
use editground::RunConfig;

#[derive(Parser)]
#[command(
    name = "editground",
    version,
    about = "Referring segmentation from editing-model attention dumps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write coarse attention heatmaps as PGM images.
    Cam(MapArgs),
    /// Write refined attention heatmaps as PGM images.
    Ram(MapArgs),
    /// Write predicted masks as PGM images.
    Segment(SegmentArgs),
    /// Score foreground/background separability of every feature dump.
    Separability(SeparabilityArgs),
    /// Evaluate segmentation and separability over a grid of feature cells.
    Sweep(SweepArgs),
    /// Evaluate segmentation against ground truth.
    Eval(EvalArgs),
    /// Generate a planted suite with known ground truth.
    Synth(SynthArgs),
    /// Check bundles and ground-truth masks without running the pipeline.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct Inputs {
    /// JSON-lines manifest.
    #[arg(long, required_unless_present = "bundle")]
    manifest: Option<PathBuf>,
    /// Bundle directory; may be repeated.
    #[arg(long, conflicts_with = "manifest")]
    bundle: Vec<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Upsample {
    Similarity,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum Map {
    Ram,
    Cam,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// all, shallow, deep or a comma-separated index list.
    #[arg(long, value_parser = parse_blocks)]
    blocks: Option<BlockSelection>,
    #[arg(long)]
    feature_block: Option<usize>,
    #[arg(long)]
    feature_timestep: Option<u32>,
    #[arg(long)]
    attention_timestep: Option<u32>,
    /// Threshold the upsampled attention map instead of classifying features.
    #[arg(long)]
    binarize_only: bool,
    /// Attention map used for proposals and binarize-only masks.
    #[arg(long, value_enum)]
    map: Option<Map>,
    #[arg(long, value_enum)]
    upsample: Option<Upsample>,
    #[arg(long)]
    eps: Option<f64>,
    /// Worker threads; 0 uses every available core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

fn parse_blocks(s: &str) -> Result<BlockSelection, editground::Error> {
    s.parse()
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(tau) = self.tau {
            config.tau = tau;
        }
        if let Some(blocks) = &self.blocks {
            config.attention_blocks = blocks.clone();
        }
        if self.feature_block.is_some() {
            config.feature_block = self.feature_block;
        }
        if let Some(t) = self.feature_timestep {
            config.feature_timestep = t;
        }
        if let Some(t) = self.attention_timestep {
            config.attention_timestep = t;
        }
        if self.binarize_only {
            config.binarize_only = true;
        }
        if let Some(map) = self.map {
            config.attention_map = match map {
                Map::Ram => MapKind::Ram,
                Map::Cam => MapKind::Cam,
            };
        }
        if let Some(path) = self.upsample {
            config.upsample_path = match path {
                Upsample::Similarity => UpsamplePath::Similarity,
                Upsample::Full => UpsamplePath::Full,
            };
        }
        if let Some(eps) = self.eps {
            config.eps = eps;
        }
        config.workers = self.workers;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SegmentArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SeparabilityArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Feature timesteps, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    timesteps: Vec<u32>,
    /// Feature blocks, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    feature_blocks: Vec<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Builtin suite name (ablation, recovery-full, recovery-partial) or a suite JSON file.
    #[arg(long, default_value = "ablation")]
    suite: String,
    #[arg(long)]
    out: PathBuf,
    /// Base seed; sample i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
    /// Sample id prefix.
    #[arg(long, default_value = "plant")]
    prefix: String,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    inputs: Inputs,
}

enum Status {
    Ok,
    Partial,
}

fn status(failures: usize) -> Status {
    if failures == 0 {
        Status::Ok
    } else {
        Status::Partial
    }
}

struct Sample {
    id: String,
    entry: Option<SampleManifest>,
    dir: PathBuf,
}

impl Sample {
    fn load(&self) -> editground::Result<DumpBundle> {
        match &self.entry {
            Some(entry) => load_sample_bundle(entry),
            None => load_bundle(&self.dir),
        }
    }
}

fn open_manifest(path: &Path) -> anyhow::Result<Manifest> {
    read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn samples(inputs: &Inputs) -> anyhow::Result<Vec<Sample>> {
    if let Some(path) = &inputs.manifest {
        let manifest = open_manifest(path)?;
        return Ok(manifest
            .resolved()
            .into_iter()
            .map(|e| Sample {
                id: e.sample_id.clone(),
                dir: e.bundle_path.clone(),
                entry: Some(e),
            })
            .collect());
    }
    inputs
        .bundle
        .iter()
        .map(|dir| {
            let id = dir
                .file_name()
                .and_then(|n| n.to_str())
                .with_context(|| format!("cannot name bundle {}", dir.display()))?;
            Ok(Sample {
                id: id.to_owned(),
                entry: None,
                dir: dir.clone(),
            })
        })
        .collect()
}

/// Runs `job` on every sample and reports failures on stderr.
fn per_sample(
    samples: &[Sample],
    workers: usize,
    job: impl Fn(&Sample) -> editground::Result<()> + Sync,
) -> usize {
    let results = par::with_workers(workers, || par::map_ordered(samples, |s| job(s)));
    let mut failures = 0;
    for (sample, result) in samples.iter().zip(results) {
        if let Err(e) = result {
            eprintln!("{}: {e}", sample.id);
            failures += 1;
        }
    }
    failures
}

fn create_out(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn pgm_sink(path: &Path) -> editground::Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| editground::Error::file(path, e))
}

fn heatmaps(args: &MapArgs, kind: MapKind) -> anyhow::Result<Status> {
    let config = RunConfig {
        attention_map: kind,
        ..args.config.resolve()?
    };
    let samples = samples(&args.inputs)?;
    create_out(&args.out)?;
    let failures = per_sample(&samples, config.workers, |s| {
        let map = attention_map(&s.load()?, &config)?;
        let path = args.out.join(format!("{}.pgm", s.id));
        write_gray_pgm(map.grid(), &map.to_gray(), pgm_sink(&path)?)
    });
    Ok(status(failures))
}

fn segment_masks(args: &SegmentArgs) -> anyhow::Result<Status> {
    let config = args.config.resolve()?;
    let samples = samples(&args.inputs)?;
    create_out(&args.out)?;
    let failures = per_sample(&samples, config.workers, |s| {
        let seg = segment(&s.load()?, &config)?;
        write_mask_pgm_file(&seg.mask, args.out.join(format!("{}.pgm", s.id)))
    });
    Ok(status(failures))
}

fn eval(args: &EvalArgs) -> anyhow::Result<Status> {
    let config = args.config.resolve()?;
    let manifest = open_manifest(&args.manifest)?;
    let report = run_eval(&manifest, &config)?;
    write_eval_report(&report, &args.out)?;
    print!("{}", eval_text(&report));
    for s in report.samples.iter().filter(|s| s.error.is_some()) {
        eprintln!(
            "{}: {}",
            s.sample_id,
            s.error.as_deref().unwrap_or_default()
        );
    }
    Ok(status(report.summary.failed))
}

fn separability(args: &SeparabilityArgs) -> anyhow::Result<Status> {
    let manifest = open_manifest(&args.manifest)?;
    let report = run_separability(&manifest, args.workers)?;
    write_separability_report(&report, &args.out)?;
    for (id, e) in &report.failures {
        eprintln!("{id}: {e}");
    }
    println!(
        "{} records over {} cells written to {}",
        report.records.len(),
        report.summary.len(),
        args.out.display()
    );
    Ok(status(report.failures.len()))
}

fn sweep(args: &SweepArgs) -> anyhow::Result<Status> {
    let config = args.config.resolve()?;
    let manifest = open_manifest(&args.manifest)?;
    let report = run_sweep(&manifest, &args.timesteps, &args.feature_blocks, &config)?;
    write_sweep_report(&report, &args.out)?;
    for (id, e) in &report.load_failures {
        eprintln!("{id}: {e}");
    }
    for cell in &report.cells {
        let scores = match &cell.aggregate {
            Some(a) => format!("oIoU {:.4}  mIoU {:.4}", a.oiou, a.miou),
            None => "no scored samples".to_owned(),
        };
        println!(
            "t={:<4} l={:<4} {scores}  absent {}  failed {}",
            cell.timestep, cell.block, cell.absent, cell.failed
        );
    }
    let failed: usize = report.cells.iter().map(|c| c.failed).sum();
    Ok(status(report.load_failures.len() + failed))
}

fn synth(args: &SynthArgs) -> anyhow::Result<Status> {
    let mut suite = if Path::new(&args.suite).is_file() {
        SuiteSpec::load(&args.suite)?
    } else {
        SuiteSpec::builtin(&args.suite)?
    };
    if let Some(seed) = args.seed {
        suite.base_seed = seed;
    }
    if let Some(count) = args.count {
        suite.count = count;
    }
    let entries = write_plants(&suite.plants()?, &args.out, &args.prefix)?;
    println!(
        "wrote {} samples to {}",
        entries.len(),
        args.out.join("manifest.jsonl").display()
    );
    Ok(Status::Ok)
}

fn validate(args: &ValidateArgs) -> anyhow::Result<Status> {
    let samples = samples(&args.inputs)?;
    let failures = per_sample(&samples, 0, |s| {
        let bundle = s.load()?;
        bundle.validate()?;
        if let Some(gt) = s.entry.as_ref().and_then(|e| e.gt_mask_path.as_ref()) {
            read_mask_pgm_file(gt, Some(bundle.image_size))?;
        }
        Ok(())
    });
    println!(
        "{} of {} bundles valid",
        samples.len() - failures,
        samples.len()
    );
    Ok(status(failures))
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    match &cli.command {
        Command::Cam(args) => heatmaps(args, MapKind::Cam),
        Command::Ram(args) => heatmaps(args, MapKind::Ram),
        Command::Segment(args) => segment_masks(args),
        Command::Separability(args) => separability(args),
        Command::Sweep(args) => sweep(args),
        Command::Eval(args) => eval(args),
        Command::Synth(args) => synth(args),
        Command::Validate(args) => validate(args),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
