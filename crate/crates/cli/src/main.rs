use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use segvoc::artifacts::{self, PredictionsDump, SpectrumDump, ARTIFACT_SCHEMA_VERSION};
use segvoc::config::PipelineConfig;
use segvoc::data::{self, CanonicalDataset};
use segvoc::latent::Mode;
use segvoc::pipeline::{load_rgb, object_records, Pipeline, Variant};
use segvoc::recognize::SvdFit;
use segvoc::segment::Linkage;
use segvoc::text::{PromptTemplate, Vocabulary};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Parser, Debug)]
#[command(name = "segvoc", version, about = "Training-free open-vocabulary segmentation and recognition")]
struct Cli {
    /// TOML configuration file; flags given here override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory holding the exported models (default: $SEGVOC_MODEL_DIR).
    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    mode: Option<Mode>,
    #[arg(long, global = true)]
    template: Option<PromptTemplate>,
    /// Project embeddings onto a shared SVD basis before matching. With
    /// both `--svd` and `--no-svd`, `evaluate` reports each setting.
    #[arg(long, global = true)]
    svd: bool,
    #[arg(long, global = true)]
    no_svd: bool,
    #[arg(long, global = true)]
    svd_fit: Option<SvdFit>,
    /// Rejection threshold on the top probability.
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Absolute floor on object area in pixels.
    #[arg(long, global = true)]
    min_area: Option<usize>,
    /// Fixed cluster count instead of the spectrum rule.
    #[arg(long, global = true)]
    clusters: Option<usize>,
    #[arg(long, global = true)]
    linkage: Option<Linkage>,
    /// Worker threads (0 = all CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Debug logging and full probability arrays in outputs.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Segment images into clusters; writes label PNG, masks and spectrum.
    Segment {
        /// Image files or directories of images.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Segment, localize and label objects against a vocabulary.
    Recognize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Vocabulary file (JSON or one `name[,super]` per line).
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Score segmentation and recognition on a dataset.
    Evaluate {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// One report per prompt template.
        #[arg(long)]
        ablate_template: bool,
        /// One report without and one with SVD projection.
        #[arg(long)]
        ablate_svd: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compute and cache prompt embeddings for a vocabulary.
    EmbedText {
        #[arg(long)]
        vocab: PathBuf,
        /// Embed with every template instead of the configured one.
        #[arg(long)]
        all_templates: bool,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Rewrite a COCO, VOC or canonical dataset in canonical form.
    ConvertDataset {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DatasetFormat {
    Coco,
    Voc,
    Canonical,
}

#[derive(Args, Debug)]
struct DatasetArgs {
    #[arg(long, value_enum)]
    format: DatasetFormat,
    /// Canonical dataset root.
    #[arg(long)]
    root: Option<PathBuf>,
    /// COCO instances JSON.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Image directory (COCO, VOC).
    #[arg(long)]
    images: Option<PathBuf>,
    /// VOC SegmentationClass directory.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// Union COCO instances of the same class into one ground-truth mask.
    #[arg(long)]
    merge_per_class: bool,
    #[arg(long)]
    limit: Option<usize>,
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str, format: &str) -> anyhow::Result<&'a Path> {
    v.as_deref()
        .with_context(|| format!("--{flag} is required for --format {format}"))
}

fn load_dataset(a: &DatasetArgs) -> anyhow::Result<CanonicalDataset> {
    let ds = match a.format {
        DatasetFormat::Coco => data::load_coco(
            required(&a.annotations, "annotations", "coco")?,
            required(&a.images, "images", "coco")?,
            a.limit,
            a.merge_per_class,
        )?,
        DatasetFormat::Voc => data::load_voc(
            required(&a.images, "images", "voc")?,
            required(&a.masks, "masks", "voc")?,
            a.limit,
        )?,
        DatasetFormat::Canonical => {
            let mut ds = data::load_canonical(required(&a.root, "root", "canonical")?)?;
            ds.truncate(a.limit);
            ds
        }
    };
    Ok(ds)
}

fn build_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let o = &cli.overrides;
    if let Some(d) = &cli.model_dir {
        cfg.models.dir = Some(d.clone());
    }
    if let Some(m) = o.mode {
        cfg.mode = m;
    }
    if let Some(t) = o.template {
        cfg.template = t;
    }
    match (o.svd, o.no_svd) {
        (true, false) => cfg.use_svd = true,
        (false, true) => cfg.use_svd = false,
        (true, true) if !matches!(cli.command, Command::Evaluate { .. }) => {
            bail!("--svd and --no-svd together are only meaningful for evaluate")
        }
        _ => {}
    }
    if let Some(f) = o.svd_fit {
        cfg.svd_fit = f;
    }
    if let Some(t) = o.theta {
        cfg.theta = t;
    }
    if let Some(a) = o.min_area {
        cfg.morph.min_area_px = a;
    }
    if o.clusters.is_some() {
        cfg.clusters = o.clusters;
    }
    if let Some(l) = o.linkage {
        cfg.linkage = l;
    }
    if let Some(w) = o.workers {
        cfg.workers = w;
    }
    if let Some(d) = &o.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    cfg.verbose |= o.verbose;
    cfg.validate()?;
    Ok(cfg)
}

/// Files as given, directories expanded to their images in name order.
fn collect_images(inputs: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            bail!("input {} does not exist", input.display());
        }
    }
    let mut stems = BTreeSet::new();
    for p in &out {
        if !stems.insert(stem(p)) {
            bail!("two inputs share the name `{}`", stem(p));
        }
    }
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

fn report_failures(results: Vec<(PathBuf, anyhow::Result<()>)>) -> ExitCode {
    let mut failed = 0;
    for (path, r) in &results {
        if let Err(e) = r {
            failed += 1;
            eprintln!("error: {}: {e:#}", path.display());
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} images failed", results.len());
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_segment(cfg: PipelineConfig, inputs: &[PathBuf], out: &Path) -> anyhow::Result<ExitCode> {
    let images = collect_images(inputs)?;
    let pipeline = Pipeline::load(cfg, false)?;
    let hash = pipeline.config_hash();
    let results = pipeline.map_parallel(&images, |w, path| {
        let mut run = || -> anyhow::Result<()> {
            let start = std::time::Instant::now();
            let image = load_rgb(path)?;
            let result = pipeline.segment_image(&mut w.backbone, &image)?;
            let (gh, gw) = result.latent.grid_shape;
            let dump = SpectrumDump {
                schema_version: ARTIFACT_SCHEMA_VERSION,
                config_hash: hash.clone(),
                image: stem(path),
                mode: pipeline.config().mode,
                grid: [gh, gw],
                spectrum: result.latent.spectrum.clone(),
            };
            artifacts::write_segmentation(out, &stem(path), &result.seg, &dump)?;
            log::info!(
                "{}: k = {}, grid {gh}x{gw}, {:.2}s",
                path.display(),
                result.seg.k,
                start.elapsed().as_secs_f64()
            );
            Ok(())
        };
        (path.clone(), run())
    })?;
    Ok(report_failures(results))
}

fn cmd_recognize(cfg: PipelineConfig, inputs: &[PathBuf], vocab: &Path, out: &Path) -> anyhow::Result<ExitCode> {
    let images = collect_images(inputs)?;
    let vocab = Vocabulary::from_file(vocab)?;
    let pipeline = Pipeline::load(cfg, true)?;
    let hash = pipeline.config_hash();
    let mcfg = pipeline.match_config();
    let text = pipeline.text_embeddings(&vocab, mcfg.template)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let results = pipeline.map_parallel(&images, |w, path| {
        let mut run = || -> anyhow::Result<()> {
            let start = std::time::Instant::now();
            let image = load_rgb(path)?;
            let seg = pipeline.segment_image(&mut w.backbone, &image)?.seg;
            let encoder = w.image_encoder.as_mut().context("image encoder not loaded")?;
            let rec = pipeline.recognize(encoder, &image, &seg, &text, &mcfg)?;
            let objects = object_records(&rec.objects, &rec.predictions, pipeline.config().verbose);
            let name = stem(path);
            let dump = PredictionsDump {
                schema_version: ARTIFACT_SCHEMA_VERSION,
                config_hash: hash.clone(),
                image: name.clone(),
                template: mcfg.template,
                use_svd: mcfg.use_svd,
                svd_fit: mcfg.svd_fit,
                theta: mcfg.theta,
                classes: text.names.clone(),
                objects,
            };
            artifacts::write_json(&out.join(format!("{name}.json")), &dump)?;
            artifacts::render_overlay(&image, &dump.objects)
                .save(out.join(format!("{name}.overlay.png")))
                .context("writing overlay")?;
            log::info!(
                "{}: {} objects, {:.2}s",
                path.display(),
                dump.objects.len(),
                start.elapsed().as_secs_f64()
            );
            Ok(())
        };
        (path.clone(), run())
    })?;
    Ok(report_failures(results))
}

fn report_name(v: &Variant) -> String {
    format!("report_{}_{}", v.template, if v.use_svd { "svd" } else { "nosvd" })
}

fn cmd_evaluate(
    cfg: PipelineConfig,
    dataset: &DatasetArgs,
    ablate_template: bool,
    ablate_svd: bool,
    out: &Path,
) -> anyhow::Result<ExitCode> {
    let ds = load_dataset(dataset)?;
    if ds.is_empty() {
        bail!("dataset has no images");
    }
    let templates = if ablate_template {
        PromptTemplate::ALL.to_vec()
    } else {
        vec![cfg.template]
    };
    let svds = if ablate_svd { vec![false, true] } else { vec![cfg.use_svd] };
    let variants: Vec<Variant> = templates
        .iter()
        .flat_map(|&template| svds.iter().map(move |&use_svd| Variant { template, use_svd }))
        .collect();
    let pipeline = Pipeline::load(cfg, true)?;
    log::info!("evaluating {} images, {} variant(s)", ds.len(), variants.len());
    let reports = pipeline.evaluate(&ds, &variants)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut all_failed = true;
    for (v, report) in variants.iter().zip(&reports) {
        let base = out.join(report_name(v));
        std::fs::write(base.with_extension("json"), report.to_json())?;
        std::fs::write(base.with_extension("csv"), report.mean_csv())?;
        println!(
            "{}: hiou {:.4}  P {:.4}  R {:.4}  F1 {:.4}  AP {:.4}  failed {}/{}",
            base.with_extension("json").display(),
            report.mean.hiou,
            report.mean.precision,
            report.mean.recall,
            report.mean.f1,
            report.mean.ap,
            report.mean.failed,
            report.mean.images
        );
        all_failed &= report.mean.failed == report.mean.images;
    }
    Ok(if all_failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn cmd_embed_text(mut cfg: PipelineConfig, vocab: &Path, all_templates: bool, out: &Path) -> anyhow::Result<ExitCode> {
    let vocab = Vocabulary::from_file(vocab)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    cfg.cache_dir = Some(out.to_path_buf());
    let templates = if all_templates {
        PromptTemplate::ALL.to_vec()
    } else {
        vec![cfg.template]
    };
    let pipeline = Pipeline::load(cfg, true)?;
    for t in templates {
        let m = pipeline.text_embeddings(&vocab, t)?;
        let path = pipeline.embedding_cache_path(&vocab, t)?.expect("cache dir is set");
        println!("{}  {}x{}", path.display(), m.rows.nrows(), m.rows.ncols());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_convert(dataset: &DatasetArgs, out: &Path) -> anyhow::Result<ExitCode> {
    let ds = load_dataset(dataset)?;
    let manifest = data::write_canonical(&ds, out)?;
    println!("{} ({} images)", manifest.display(), ds.len());
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = build_config(&cli)?;
    match &cli.command {
        Command::Segment { inputs, out } => cmd_segment(cfg, inputs, out),
        Command::Recognize { inputs, vocab, out } => cmd_recognize(cfg, inputs, vocab, out),
        Command::Evaluate {
            dataset,
            ablate_template,
            ablate_svd,
            out,
        } => {
            let both = cli.overrides.svd && cli.overrides.no_svd;
            cmd_evaluate(cfg, dataset, *ablate_template, *ablate_svd || both, out)
        }
        Command::EmbedText {
            vocab,
            all_templates,
            out,
        } => cmd_embed_text(cfg, vocab, *all_templates, out),
        Command::ConvertDataset { dataset, out } => cmd_convert(dataset, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.overrides.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
