//! Command-line surface. Every subcommand is a function over its argument
//! record, so tests can drive the pipeline without spawning a process.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::descriptor::{finalize_descriptor, fit_whitening, pool_region, Descriptor, DescriptorStore, WhitenModel};
use crate::error::{Error, Result};
use crate::graph::{mean_activation_map, NetworkGraph};
use crate::ingest::{self, PreprocessSpec, Preprocessed, DEFAULT_LONG_SIDE};
use crate::linalg::l2_normalize;
use crate::model_io::{self, templates, ExportManifest, WeightContainer};
use crate::region::{detect_regions, BBox, DetectorConfig, DetectorMode, EllipseParams};
use crate::retrieval::{self, GroundTruth, InstanceIndex, RankedList};
use crate::vlad::{self, VladModel, DEFAULT_CODEBOOK_SIZE, DEFAULT_SEED};

const WHITEN_PREFIX: &str = "whiten";

#[derive(Debug, Parser)]
#[command(name = "dasr", version, about = "Salient instance regions, instance search and VLAD image search")]
pub struct Cli {
    /// Log per-image detection diagnostics, including dropped probability mass per layer.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Detect regions on every image of a directory and store raw descriptors.
    Extract(ExtractArgs),
    /// Detect regions on one image and print region records.
    Detect(DetectArgs),
    /// Fit a whitening model on a raw descriptor store.
    TrainWhiten(TrainWhitenArgs),
    /// Finalize a raw store into a searchable instance index.
    Index(IndexArgs),
    /// Instance search with a query image and box.
    Search(SearchArgs),
    /// Train a VLAD codebook (and rotation) on an index.
    TrainVlad(TrainVladArgs),
    /// Aggregate an index into one VLAD vector per image.
    Encode(EncodeArgs),
    /// Rank images by VLAD similarity.
    SearchImages(SearchImagesArgs),
    /// Score result files against ground truth.
    Eval(EvalArgs),
    /// Write a graph template with random weights, for trying the pipeline.
    ToyNet(ToyNetArgs),
    /// Print a built-in graph description.
    GraphTemplate(GraphTemplateArgs),
    /// List the tensors of a weight container.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Args)]
pub struct NetworkArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// Descriptor tap layer; defaults to the graph's `tap`.
    #[arg(long)]
    pub tap: Option<String>,
    #[arg(long, default_value_t = DEFAULT_LONG_SIDE)]
    pub long_side: usize,
}

#[derive(Debug, Clone, Args)]
pub struct DetectorArgs {
    #[arg(long, default_value_t = 0.1)]
    pub tau: f32,
    #[arg(long, default_value_t = 0.3)]
    pub beta: f32,
    /// `dasr` (local maxima) or `dasr-star` (above-mean seeds plus NMS).
    #[arg(long, default_value = "dasr-star")]
    pub mode: DetectorMode,
}

impl DetectorArgs {
    pub fn config(&self) -> Result<DetectorConfig> {
        let c = DetectorConfig {
            tau: self.tau,
            beta: self.beta,
            mode: self.mode,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// Directory of PNG and JPEG images; ids are file stems.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub overlay_dir: Option<PathBuf>,
    #[arg(long)]
    pub heatmap_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub network: NetworkArgs,
    #[command(flatten)]
    pub detector: DetectorArgs,
    #[arg(long)]
    pub image: PathBuf,
    /// Region records; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overlay: Option<PathBuf>,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainWhitenArgs {
    /// Raw descriptor store.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output dimension; defaults to the input dimension.
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct IndexArgs {
    /// Raw descriptor store.
    #[arg(long)]
    pub store: PathBuf,
    /// Whitening model; plain l2 normalization when absent.
    #[arg(long)]
    pub whiten: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub network: NetworkArgs,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub whiten: Option<PathBuf>,
    #[arg(long, conflicts_with = "queries")]
    pub query_image: Option<PathBuf>,
    /// Query box `top,left,bottom,right` in original pixels; whole image when absent.
    #[arg(long, requires = "query_image")]
    pub query_bbox: Option<BBox>,
    #[arg(long, requires = "query_image")]
    pub query_id: Option<String>,
    /// Lines of `query-id image-path [top,left,bottom,right]`; paths are
    /// relative to the file.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Result file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainVladArgs {
    /// Finalized instance index.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CODEBOOK_SIZE)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Skip the PCA rotation of the accumulators.
    #[arg(long)]
    pub no_rotation: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EncodeArgs {
    /// Finalized instance index.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub vlad: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SearchImagesArgs {
    /// VLAD vectors written by `encode`.
    #[arg(long)]
    pub vectors: PathBuf,
    /// Query image id; repeatable.
    #[arg(long, required_unless_present = "all")]
    pub query: Vec<String>,
    /// Use every image as a query.
    #[arg(long)]
    pub all: bool,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// `map`, `map@k` (with `--k`), `map@N` or `recall-iou`.
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub gt: PathBuf,
    /// Result file; for `recall-iou` it may be replaced by `--store`.
    #[arg(long, required_unless_present = "store")]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Descriptor store whose detected boxes are scored by `recall-iou`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ToyNetArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// `toy`, `vgg16` or `resnet50`.
    #[arg(long, default_value = "toy")]
    pub template: String,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GraphTemplateArgs {
    /// `resnet50`, `vgg16` or `toy`.
    pub name: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Shape manifest to verify the container against.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Graph file to build against the container.
    #[arg(long)]
    pub graph: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract(a) => run_extract(&a).map(|_| ()),
        Command::Detect(a) => run_detect(&a),
        Command::TrainWhiten(a) => run_train_whiten(&a),
        Command::Index(a) => run_index(&a),
        Command::Search(a) => run_search(&a).map(|_| ()),
        Command::TrainVlad(a) => run_train_vlad(&a),
        Command::Encode(a) => run_encode(&a),
        Command::SearchImages(a) => run_search_images(&a).map(|_| ()),
        Command::Eval(a) => run_eval(&a).map(|_| ()),
        Command::ToyNet(a) => run_toy_net(&a),
        Command::GraphTemplate(a) => run_graph_template(&a),
        Command::Inspect(a) => run_inspect(&a),
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

struct Network {
    graph: NetworkGraph,
    weights_sha256: String,
    graph_sha256: String,
    preprocess: PreprocessSpec,
}

fn load_network(a: &NetworkArgs) -> Result<Network> {
    if a.long_side == 0 {
        return Err(Error::Config("--long-side must be positive".into()));
    }
    let weights = model_io::load_container(&a.weights)?;
    let text = std::fs::read_to_string(&a.graph).map_err(|e| Error::io(&a.graph, e))?;
    let mut graph = NetworkGraph::build(model_io::parse_graph(&text)?, &weights)?;
    if let Some(tap) = &a.tap {
        graph = graph.with_descriptor_tap(tap)?;
    }
    if graph.spec().input.channels != 3 {
        return Err(Error::Config(format!(
            "graph expects {} input channels, images are RGB",
            graph.spec().input.channels
        )));
    }
    Ok(Network {
        graph,
        weights_sha256: weights.checksum(),
        graph_sha256: sha256_hex(text.as_bytes()),
        preprocess: PreprocessSpec { long_side: a.long_side },
    })
}

impl Network {
    fn tap_dim(&self) -> Result<usize> {
        Ok(self.graph.channels(self.graph.layer_index(self.graph.descriptor_tap())?))
    }

    fn prepare(&self, path: &Path) -> Result<(image::RgbImage, Preprocessed)> {
        let img = ingest::load_rgb(path)?;
        let pre = ingest::preprocess_image(&img, &self.preprocess, &self.graph.spec().preprocessing).map_err(|e| match e {
            Error::Data(message) => Error::Image {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })?;
        Ok((img, pre))
    }
}

/// One detected region in original-image coordinates.
#[derive(Debug, Clone)]
pub struct RegionRecord {
    pub descriptor: Descriptor,
    pub ellipse: EllipseParams,
    pub probability_mass: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageSummary {
    pub id: String,
    pub original: (usize, usize),
    pub network: (usize, usize),
    pub seeds: usize,
    pub empty: usize,
    pub suppressed: usize,
    pub regions: usize,
    pub dropped_mass: f64,
}

struct ImageResult {
    summary: ImageSummary,
    regions: Vec<RegionRecord>,
}

fn render_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn process_image(
    net: &Network,
    config: &DetectorConfig,
    id: &str,
    path: &Path,
    overlay: Option<&Path>,
    heatmap: Option<&Path>,
) -> Result<ImageResult> {
    let (img, pre) = net.prepare(path)?;
    let graph = &net.graph;
    let cache = graph.forward(&pre.tensor)?;
    let det = detect_regions(graph, &cache, config)?;
    if log::log_enabled!(log::Level::Info) {
        let layers: Vec<String> = det
            .dropped_by_layer
            .iter()
            .filter(|(_, d)| *d > 0.0)
            .map(|(n, d)| format!("{n}={d:.6}"))
            .collect();
        log::info!(
            "{id}: {} seeds, {} regions, dropped mass {:.6} [{}]",
            det.seeds,
            det.regions.len(),
            det.dropped_mass,
            layers.join(" ")
        );
    }

    let tap = graph.descriptor_tap();
    let mut regions = Vec::with_capacity(det.regions.len());
    for (i, r) in det.regions.iter().enumerate() {
        let vector = pool_region(graph, &cache, tap, &r.bbox)?;
        regions.push(RegionRecord {
            descriptor: Descriptor {
                image_id: id.to_string(),
                region_id: i as u32,
                bbox: pre.to_original(&r.bbox),
                score: r.score,
                vector,
                normalized: false,
            },
            ellipse: pre.ellipse_to_original(&r.ellipse),
            probability_mass: r.probability_mass,
        });
    }

    let (h, w) = pre.original;
    if let Some(p) = overlay {
        let mut canvas = img.clone();
        for r in &regions {
            ingest::draw_ellipse(&mut canvas, &r.ellipse, ingest::ELLIPSE_COLOR);
            ingest::draw_bbox(&mut canvas, &r.descriptor.bbox, ingest::BOX_COLOR);
        }
        ingest::save_png(&canvas, p)?;
    }
    if let Some(p) = heatmap {
        let mean = mean_activation_map(&cache, graph.backprop_start())?;
        ingest::save_png(&ingest::render_heatmap(&mean, h, w)?, p)?;
    }

    Ok(ImageResult {
        summary: ImageSummary {
            id: id.to_string(),
            original: pre.original,
            network: pre.network,
            seeds: det.seeds,
            empty: det.empty,
            suppressed: det.suppressed,
            regions: regions.len(),
            dropped_mass: det.dropped_mass,
        },
        regions,
    })
}

pub const REGION_HEADER: &str = "# image region score top left bottom right cy cx major minor orientation mass\n";

pub fn format_regions(records: &[RegionRecord]) -> String {
    let mut s = String::from(REGION_HEADER);
    for r in records {
        let (d, e) = (&r.descriptor, &r.ellipse);
        writeln!(
            s,
            "{} {} {} {} {} {} {} {} {} {} {} {} {}",
            d.image_id,
            d.region_id,
            d.score,
            d.bbox.top,
            d.bbox.left,
            d.bbox.bottom,
            d.bbox.right,
            e.cy,
            e.cx,
            e.major,
            e.minor,
            e.orientation,
            r.probability_mass
        )
        .unwrap();
    }
    s
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// PNG and JPEG files of `dir` as `(id, path)`, sorted by id.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || !is_image(&path) {
            continue;
        }
        let id = render_id(&path);
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("{}: image ids must be non-empty without whitespace", path.display())));
        }
        if let Some(prev) = found.insert(id.clone(), path.clone()) {
            return Err(Error::Data(format!(
                "{} and {} share the image id `{id}`",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(found.into_iter().collect())
}

#[derive(Debug, Serialize)]
struct StoreManifest<'a> {
    kind: &'a str,
    dim: usize,
    normalized: bool,
    records: usize,
    weights_sha256: &'a str,
    graph_sha256: &'a str,
    tap: &'a str,
    backprop_start: &'a str,
    detector: DetectorConfig,
    long_side: usize,
    images: &'a [ImageSummary],
}

/// Runs detection over a directory. Images are processed in parallel; the
/// store, manifest and region records are written afterwards in id order.
pub fn run_extract(a: &ExtractArgs) -> Result<Vec<ImageSummary>> {
    let config = a.detector.config()?;
    let net = load_network(&a.network)?;
    let images = list_images(&a.images)?;
    for d in [&a.overlay_dir, &a.heatmap_dir].into_iter().flatten() {
        create_dir(d)?;
    }
    if a.workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("--workers: {e}")))?;

    let results: Vec<Result<ImageResult>> = pool.install(|| {
        images
            .par_iter()
            .map(|(id, path)| {
                let overlay = a.overlay_dir.as_ref().map(|d| d.join(format!("{id}.overlay.png")));
                let heatmap = a.heatmap_dir.as_ref().map(|d| d.join(format!("{id}.heatmap.png")));
                process_image(&net, &config, id, path, overlay.as_deref(), heatmap.as_deref())
            })
            .collect()
    });

    let mut store = DescriptorStore::new(net.tap_dim()?, false);
    let mut summaries = Vec::with_capacity(results.len());
    let mut records = Vec::new();
    for r in results {
        let r = r?;
        for reg in &r.regions {
            store.push(reg.descriptor.clone())?;
        }
        records.extend(r.regions);
        summaries.push(r.summary);
    }
    store.write(&a.out)?;
    write_text(&sidecar(&a.out, ".regions.txt"), &format_regions(&records))?;
    write_json(
        &sidecar(&a.out, ".manifest.json"),
        &StoreManifest {
            kind: "raw-descriptors",
            dim: store.dim,
            normalized: false,
            records: store.records.len(),
            weights_sha256: &net.weights_sha256,
            graph_sha256: &net.graph_sha256,
            tap: net.graph.descriptor_tap(),
            backprop_start: net.graph.backprop_start(),
            detector: config,
            long_side: net.preprocess.long_side,
            images: &summaries,
        },
    )?;
    log::info!("{} images, {} regions", summaries.len(), store.records.len());
    Ok(summaries)
}

pub fn run_detect(a: &DetectArgs) -> Result<()> {
    let config = a.detector.config()?;
    let net = load_network(&a.network)?;
    let id = render_id(&a.image);
    let r = process_image(&net, &config, &id, &a.image, a.overlay.as_deref(), a.heatmap.as_deref())?;
    emit(a.out.as_deref(), &format_regions(&r.regions))
}

#[derive(Debug, Serialize)]
struct WhitenManifest {
    kind: &'static str,
    source_sha256: String,
    samples: usize,
    dim: usize,
    output_dim: usize,
}

pub fn run_train_whiten(a: &TrainWhitenArgs) -> Result<()> {
    let bytes = read_bytes(&a.store)?;
    let store = DescriptorStore::from_bytes(&bytes)?;
    if store.normalized {
        log::warn!("{}: store is already finalized", a.store.display());
    }
    let samples: Vec<Vec<f32>> = store
        .records
        .iter()
        .filter_map(|r| {
            let mut v = r.vector.clone();
            l2_normalize(&mut v).then_some(v)
        })
        .collect();
    let model = fit_whitening(&samples, a.dim)?;
    model_io::write_container(&a.out, &model.to_container(WHITEN_PREFIX)?)?;
    write_json(
        &sidecar(&a.out, ".manifest.json"),
        &WhitenManifest {
            kind: "whitening",
            source_sha256: sha256_hex(&bytes),
            samples: samples.len(),
            dim: model.dim(),
            output_dim: model.output_dim(),
        },
    )
}

fn load_whiten(path: Option<&Path>, dim: usize) -> Result<(WhitenModel, Option<String>)> {
    match path {
        Some(p) => {
            let c = model_io::load_container(p)?;
            let m = WhitenModel::from_container(&c, WHITEN_PREFIX)?;
            if m.dim() != dim {
                return Err(Error::Data(format!(
                    "{}: whitening expects {}-d descriptors, store has {dim}",
                    p.display(),
                    m.dim()
                )));
            }
            Ok((m, Some(c.checksum())))
        }
        None => Ok((WhitenModel::identity(dim), None)),
    }
}

#[derive(Debug, Serialize)]
struct IndexManifest {
    kind: &'static str,
    source_sha256: String,
    whiten_sha256: Option<String>,
    dim: usize,
    records: usize,
    invalid_dropped: usize,
    images: Vec<String>,
}

pub fn run_index(a: &IndexArgs) -> Result<()> {
    let bytes = read_bytes(&a.store)?;
    let raw = DescriptorStore::from_bytes(&bytes)?;
    if raw.normalized {
        return Err(Error::Data(format!("{}: store is already finalized", a.store.display())));
    }
    let (model, whiten_sha256) = load_whiten(a.whiten.as_deref(), raw.dim)?;
    let mut out = DescriptorStore::new(model.output_dim(), true);
    let mut invalid = 0;
    for r in &raw.records {
        let d = finalize_descriptor(r, &model)?;
        if d.is_valid() {
            out.push(d)?;
        } else {
            invalid += 1;
        }
    }
    if invalid > 0 {
        log::warn!("{invalid} descriptors collapsed to zero and were left out");
    }
    out.write(&a.out)?;
    let images: BTreeSet<String> = out.records.iter().map(|r| r.image_id.clone()).collect();
    write_json(
        &sidecar(&a.out, ".manifest.json"),
        &IndexManifest {
            kind: "instance-index",
            source_sha256: sha256_hex(&bytes),
            whiten_sha256,
            dim: out.dim,
            records: out.records.len(),
            invalid_dropped: invalid,
            images: images.into_iter().collect(),
        },
    )
}

/// Query record: id, image path, box in original pixels (whole image when absent).
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub id: String,
    pub image: PathBuf,
    pub bbox: Option<BBox>,
}

pub fn parse_queries(text: &str, base: &Path) -> Result<Vec<QuerySpec>> {
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let bbox = match toks.len() {
            2 => None,
            3 => Some(toks[2].parse::<BBox>()?),
            6 => Some(toks[2..].join(",").parse::<BBox>()?),
            _ => {
                return Err(Error::Data(format!(
                    "query line {}: expected `query-id image-path [top,left,bottom,right]`",
                    ln + 1
                )))
            }
        };
        out.push(QuerySpec {
            id: toks[0].to_string(),
            image: base.join(toks[1]),
            bbox,
        });
    }
    Ok(out)
}

fn query_descriptor(net: &Network, model: &WhitenModel, q: &QuerySpec) -> Result<Vec<f32>> {
    let (_, pre) = net.prepare(&q.image)?;
    let (h, w) = pre.original;
    let bbox = q.bbox.unwrap_or(BBox::new(0, 0, h as i32, w as i32));
    let clipped = bbox.clip(h, w);
    if !clipped.is_valid() {
        return Err(Error::Data(format!("query `{}`: box {bbox} lies outside the image", q.id)));
    }
    let cache = net.graph.forward(&pre.tensor)?;
    let raw = pool_region(&net.graph, &cache, net.graph.descriptor_tap(), &pre.to_network(&clipped))?;
    let (v, ok) = crate::descriptor::finalize(&raw, model)?;
    if !ok {
        log::warn!("query `{}` has an all-zero descriptor", q.id);
    }
    Ok(v)
}

#[derive(Debug, Serialize)]
struct ResultsManifest {
    kind: &'static str,
    index_sha256: String,
    queries: Vec<String>,
    topk: Option<usize>,
}

pub fn run_search(a: &SearchArgs) -> Result<Vec<RankedList>> {
    let queries = match (&a.queries, &a.query_image) {
        (Some(file), None) => {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            parse_queries(&text, file.parent().unwrap_or(Path::new(".")))?
        }
        (None, Some(img)) => vec![QuerySpec {
            id: a.query_id.clone().unwrap_or_else(|| render_id(img)),
            image: img.clone(),
            bbox: a.query_bbox,
        }],
        _ => return Err(Error::Config("give either --query-image or --queries".into())),
    };
    let bytes = read_bytes(&a.index)?;
    let store = DescriptorStore::from_bytes(&bytes)?;
    if !store.normalized {
        return Err(Error::Data(format!("{}: not a finalized index (run `index`)", a.index.display())));
    }
    let index = InstanceIndex::from_store(store)?;
    let net = load_network(&a.network)?;
    let (model, _) = load_whiten(a.whiten.as_deref(), net.tap_dim()?)?;
    if model.output_dim() != index.dim() && !index.is_empty() {
        return Err(Error::Data(format!(
            "query descriptors are {}-d, index is {}-d",
            model.output_dim(),
            index.dim()
        )));
    }
    let lists: Vec<RankedList> = queries
        .par_iter()
        .map(|q| retrieval::search(&q.id, &query_descriptor(&net, &model, q)?, &index))
        .collect::<Result<_>>()?;
    let text = retrieval::format_results(&lists, a.topk);
    emit(a.out.as_deref(), &text)?;
    if let Some(out) = &a.out {
        write_json(
            &sidecar(out, ".manifest.json"),
            &ResultsManifest {
                kind: "instance-search",
                index_sha256: sha256_hex(&bytes),
                queries: queries.iter().map(|q| q.id.clone()).collect(),
                topk: a.topk,
            },
        )?;
    }
    Ok(lists)
}

fn read_index(path: &Path) -> Result<(DescriptorStore, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    let store = DescriptorStore::from_bytes(&bytes)?;
    if !store.normalized {
        return Err(Error::Data(format!("{}: not a finalized index (run `index`)", path.display())));
    }
    Ok((store, bytes))
}

fn group_by_image(store: &DescriptorStore) -> BTreeMap<&str, Vec<Vec<f32>>> {
    let mut bags: BTreeMap<&str, Vec<Vec<f32>>> = BTreeMap::new();
    for r in &store.records {
        bags.entry(&r.image_id).or_default().push(r.vector.clone());
    }
    bags
}

#[derive(Debug, Serialize)]
struct VladManifest {
    kind: &'static str,
    source_sha256: String,
    k: usize,
    dim: usize,
    seed: u64,
    iterations: usize,
    inertia: f64,
    rotation: bool,
    samples: usize,
    images: usize,
}

pub fn run_train_vlad(a: &TrainVladArgs) -> Result<()> {
    let (store, bytes) = read_index(&a.store)?;
    let samples: Vec<Vec<f32>> = store.records.iter().map(|r| r.vector.clone()).collect();
    let codebook = vlad::train_codebook(&samples, a.k, a.seed)?;
    let bags = group_by_image(&store);
    let rotation = if a.no_rotation {
        None
    } else if bags.len() < 2 {
        log::warn!("rotation needs at least two images, skipped");
        None
    } else {
        let accs: Vec<Vec<f32>> = bags
            .values()
            .map(|bag| Ok(vlad::residual_accumulator(bag, &codebook)?.into_iter().map(|v| v as f32).collect()))
            .collect::<Result<_>>()?;
        Some(vlad::train_rotation(&accs)?)
    };
    let manifest = VladManifest {
        kind: "vlad",
        source_sha256: sha256_hex(&bytes),
        k: codebook.k(),
        dim: codebook.dim(),
        seed: codebook.seed,
        iterations: codebook.iterations,
        inertia: codebook.inertia,
        rotation: rotation.is_some(),
        samples: samples.len(),
        images: bags.len(),
    };
    let model = VladModel { codebook, rotation };
    model_io::write_container(&a.out, &model.to_container()?)?;
    write_json(&sidecar(&a.out, ".manifest.json"), &manifest)
}

#[derive(Debug, Serialize)]
struct EncodeManifest {
    kind: &'static str,
    source_sha256: String,
    vlad_sha256: String,
    dim: usize,
    images: usize,
    invalid: Vec<String>,
}

/// Writes one record per image (region id 0, empty box) in a descriptor store.
pub fn run_encode(a: &EncodeArgs) -> Result<()> {
    let (store, bytes) = read_index(&a.store)?;
    let container = model_io::load_container(&a.vlad)?;
    let model = VladModel::from_container(&container)?;
    if store.dim != model.codebook.dim() {
        return Err(Error::Data(format!(
            "{}: codebook is {}-d, index is {}-d",
            a.vlad.display(),
            model.codebook.dim(),
            store.dim
        )));
    }
    let mut out = DescriptorStore::new(model.output_dim(), true);
    let mut invalid = Vec::new();
    for (id, bag) in group_by_image(&store) {
        let v = vlad::encode(&bag, &model)?;
        if !v.valid {
            invalid.push(id.to_string());
        }
        out.push(Descriptor {
            image_id: id.to_string(),
            region_id: 0,
            bbox: BBox::new(0, 0, 0, 0),
            score: 0.0,
            vector: v.values,
            normalized: true,
        })?;
    }
    out.write(&a.out)?;
    write_json(
        &sidecar(&a.out, ".manifest.json"),
        &EncodeManifest {
            kind: "vlad-vectors",
            source_sha256: sha256_hex(&bytes),
            vlad_sha256: container.checksum(),
            dim: out.dim,
            images: out.records.len(),
            invalid,
        },
    )
}

pub fn run_search_images(a: &SearchImagesArgs) -> Result<Vec<RankedList>> {
    let store = DescriptorStore::read(&a.vectors)?;
    let images: Vec<(String, Vec<f32>)> = store.records.into_iter().map(|r| (r.image_id, r.vector)).collect();
    let queries: Vec<String> = if a.all {
        images.iter().map(|(id, _)| id.clone()).collect()
    } else {
        a.query.clone()
    };
    let lists: Vec<RankedList> = queries
        .iter()
        .map(|q| {
            let (_, v) = images
                .iter()
                .find(|(id, _)| id == q)
                .ok_or_else(|| Error::Data(format!("--query: no vector for image `{q}`")))?;
            retrieval::search_images(q, v, &images)
        })
        .collect::<Result<_>>()?;
    emit(a.out.as_deref(), &retrieval::format_results(&lists, a.topk))?;
    Ok(lists)
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvalReport {
    Map { k: Option<usize>, report: retrieval::MapReport },
    RecallIou(Vec<(f64, f64)>),
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        match self {
            EvalReport::Map { k, report } => {
                let name = k.map_or("map".to_string(), |k| format!("map@{k}"));
                writeln!(s, "{name} {}", report.map).unwrap();
                for (q, ap) in &report.per_query {
                    writeln!(s, "# query {q} {ap}").unwrap();
                }
                for q in &report.skipped {
                    writeln!(s, "# skipped {q}").unwrap();
                }
            }
            EvalReport::RecallIou(curve) => {
                for (t, r) in curve {
                    writeln!(s, "recall@iou{t} {r}").unwrap();
                }
            }
        }
        s
    }
}

enum Metric {
    Map(Option<usize>),
    RecallIou,
}

fn parse_metric(m: &str, k: Option<usize>) -> Result<Metric> {
    let bad = |msg: String| Error::Config(format!("--metric: {msg}"));
    match m {
        "map" => Ok(Metric::Map(k)),
        "map@k" => k.map(|k| Metric::Map(Some(k))).ok_or_else(|| bad("`map@k` needs --k".into())),
        "recall-iou" => Ok(Metric::RecallIou),
        other => match other.strip_prefix("map@").map(str::parse::<usize>) {
            Some(Ok(n)) if n > 0 => Ok(Metric::Map(Some(n))),
            _ => Err(bad(format!("unknown metric `{other}` (map, map@k, map@N, recall-iou)"))),
        },
    }
}

fn read_results(path: &Path) -> Result<Vec<RankedList>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    retrieval::parse_results(&text)
}

pub fn run_eval(a: &EvalArgs) -> Result<EvalReport> {
    let metric = parse_metric(&a.metric, a.k)?;
    if a.k == Some(0) {
        return Err(Error::Config("--k must be positive".into()));
    }
    let gt = GroundTruth::read(&a.gt)?;
    let report = match metric {
        Metric::Map(k) => {
            let path = a
                .results
                .as_ref()
                .ok_or_else(|| Error::Config("--results is required for mAP".into()))?;
            EvalReport::Map {
                k,
                report: retrieval::map_at_k(&read_results(path)?, &gt, k),
            }
        }
        Metric::RecallIou => {
            let cases = match (&a.store, &a.results) {
                (Some(store), _) => retrieval::cases_from_detections(&DescriptorStore::read(store)?.records, &gt),
                (None, Some(results)) => retrieval::cases_from_results(&read_results(results)?, &gt),
                (None, None) => return Err(Error::Config("recall-iou needs --results or --store".into())),
            };
            if cases.is_empty() {
                return Err(Error::Data(format!("{}: no annotated boxes", a.gt.display())));
            }
            EvalReport::RecallIou(retrieval::recall_iou_curve(&cases, &retrieval::default_iou_grid()))
        }
    };
    emit(a.out.as_deref(), &report.render())?;
    Ok(report)
}

/// Uniform bounds for random template weights and biases.
const TOY_WEIGHT_BOUND: f32 = 0.25;
const TOY_BIAS_BOUND: f32 = 0.05;

pub fn run_toy_net(a: &ToyNetArgs) -> Result<()> {
    let t = templates::by_name(&a.template)?;
    create_dir(&a.out_dir)?;
    let weights = t.random_weights(a.seed, TOY_WEIGHT_BOUND, TOY_BIAS_BOUND);
    let name = &a.template;
    model_io::write_container(a.out_dir.join(format!("{name}.dasr")), &weights)?;
    write_text(&a.out_dir.join(format!("{name}.graph")), &model_io::serialize_graph(&t.spec))?;
    let manifest = ExportManifest::describe(
        &format!("{name}-random-seed{}", a.seed),
        &weights,
        Some(t.spec.preprocessing.clone()),
    );
    write_json(&a.out_dir.join(format!("{name}.manifest.json")), &manifest)
}

pub fn run_graph_template(a: &GraphTemplateArgs) -> Result<()> {
    let t = templates::by_name(&a.name)?;
    emit(a.out.as_deref(), &model_io::serialize_graph(&t.spec))
}

pub fn run_inspect(a: &InspectArgs) -> Result<()> {
    let c = model_io::load_container(&a.weights)?;
    let mut s = String::new();
    for (name, t) in c.iter() {
        let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
        writeln!(s, "{name} {} {}", dims.join("x"), model_io::tensor_checksum(t)).unwrap();
    }
    writeln!(s, "# {} tensors, checksum {}", c.len(), c.checksum()).unwrap();
    if let Some(m) = &a.manifest {
        let text = std::fs::read_to_string(m).map_err(|e| Error::io(m, e))?;
        let manifest: ExportManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", m.display())))?;
        manifest.verify(&c)?;
        writeln!(s, "# manifest ok ({})", manifest.source).unwrap();
    }
    if let Some(g) = &a.graph {
        let graph = model_io::load_graph(g, &c)?;
        writeln!(
            s,
            "# graph ok: {} layers, {} convolutions, tap {}, backprop {}",
            graph.layers().len(),
            graph.conv_count(),
            graph.descriptor_tap(),
            graph.backprop_start()
        )
        .unwrap();
    }
    print!("{s}");
    Ok(())
}

/// Weight container plus graph of a template, for tests and demos.
pub fn template_network(name: &str, seed: u64) -> Result<(WeightContainer, NetworkGraph)> {
    let t = templates::by_name(name)?;
    let weights = t.random_weights(seed, TOY_WEIGHT_BOUND, TOY_BIAS_BOUND);
    let graph = NetworkGraph::build(t.spec, &weights)?;
    Ok((weights, graph))
}
