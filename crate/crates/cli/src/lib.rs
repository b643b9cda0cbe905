//! `propkit` command-line frontend.
//!
//! Exit codes: 0 on success, 1 for data errors, 2 for usage and schema errors.

pub mod config;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use propkit::eval::{average_recall, cluster_purity, coco_iou_thresholds, pseudo_label_accuracy, ranked_boxes, recall_per_image, EvalReport, DEFAULT_AR_K};
use propkit::global_cluster::{kmeans_assign, kmeans_fit_traced, read_model, write_model, KMeansParams, DEFAULT_MAX_ITER, DEFAULT_TOL};
use propkit::local_cluster::cluster_multi;
use propkit::match_loss::{assignment_cost, brute_force_match, gt_objects, hungarian_match, pair_terms, BRUTE_FORCE_MAX};
use propkit::region_ops::{filter_proposals, region_to_proposal, regions_of};
use propkit::scalar::normalize_in_place;
use propkit::self_train::build_next_training_set;
use propkit::tensor_store::{
    attach_results, read_document, read_feature_stack, read_header, write_annotations, AnnotatedImage, CocoDocument,
    DetectionResult, FeatureStack,
};
use propkit::{Features, ImageProposals, Prediction, Proposal, PseudoLabelModel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{ExtractSettings, LossOpts, PipelineConfig, ProposalOpts, SelfTrainOpts};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
        }
    }
}

impl From<propkit::Error> for CliError {
    fn from(e: propkit::Error) -> Self {
        match &e {
            propkit::Error::Io(io) if io.kind() == io::ErrorKind::NotFound => CliError::Usage(e.to_string()),
            _ if e.is_format_error() => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn at(path: &Path) -> impl FnOnce(propkit::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
    }
}

#[derive(Parser, Debug)]
#[command(name = "propkit", version, about = "Unsupervised object proposals and pseudo-labels from backbone feature maps")]
pub struct Cli {
    /// Worker threads (0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Print the summary as JSON on stdout
    #[arg(long, global = true)]
    pub json: bool,
    /// JSON file with option overrides; flags take precedence
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the pseudo-labeled training set from a directory of .fms files
    Extract(ExtractArgs),
    /// Filter detector predictions into the next self-training set
    SelftrainFilter(SelfTrainArgs),
    /// Class-agnostic average recall of proposals against ground truth
    Eval(EvalArgs),
    /// Matched detection loss of predictions against ground truth
    Loss(LossArgs),
    /// Standalone K-Means on pixel features
    #[command(subcommand)]
    Kmeans(KmeansCommand),
    /// Print the header of .fms files
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    /// Directory of .fms files, optionally with a manifest.json of image sizes
    #[arg(long)]
    pub features: PathBuf,
    /// Output annotation JSON
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the fitted pseudo-label model
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[command(flatten)]
    pub opts: ProposalOpts,
}

#[derive(Args, Debug)]
pub struct SelfTrainArgs {
    /// Scored annotation JSON, or a detection results array with --images
    #[arg(long)]
    pub predictions: PathBuf,
    /// Reference annotation JSON listing the images of a results array
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: SelfTrainOpts,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Annotation JSON or detection results array
    #[arg(long)]
    pub proposals: PathBuf,
    /// Proposal budgets, comma separated
    #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_AR_K])]
    pub k: Vec<usize>,
    /// Majority-class purity of proposal labels over proposals matched to ground truth at IoU 0.5
    #[arg(long)]
    pub purity: bool,
    /// Label agreement with --gt read as a pseudo-labeled set with identical boxes
    #[arg(long)]
    pub accuracy: bool,
    /// Write the full report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Detection results array; per-image order is the query order
    #[arg(long)]
    pub predictions: PathBuf,
    /// Directory holding <image_id>.fms logits with one level of C+1 channels, Q rows, 1 column
    #[arg(long)]
    pub logits: PathBuf,
    /// Check every matching against exhaustive search
    #[arg(long)]
    pub oracle: bool,
    #[command(flatten)]
    pub opts: LossOpts,
}

#[derive(Subcommand, Debug)]
pub enum KmeansCommand {
    /// Fit centroids on the pixel vectors of one level of each file
    Fit(KmeansFitArgs),
    /// Label pixel vectors with a fitted model
    Assign(KmeansAssignArgs),
}

#[derive(Args, Debug)]
pub struct KmeansFitArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    /// Level index to read (default: deepest)
    #[arg(long)]
    pub level: Option<u32>,
    #[arg(long)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 1)]
    pub n_init: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct KmeansAssignArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub features: Vec<PathBuf>,
    #[arg(long)]
    pub level: Option<u32>,
    /// JSON map from image id to labels (default: stdout)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(required = true)]
    pub paths: Vec<PathBuf>,
}

/// Human-readable lines plus the machine-readable equivalent.
pub struct Outcome {
    pub lines: Vec<String>,
    pub json: Value,
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let file = PipelineConfig::load(cli.config.as_deref())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Extract(a) => {
            let settings = a.opts.clone().over(&file.proposal).resolve()?;
            extract(&a.features, &a.out, a.model_out.as_deref(), &settings)
        }
        Command::SelftrainFilter(a) => {
            let (top_k, iou_max) = a.opts.clone().over(&file.self_train).resolve()?;
            selftrain_filter(&a.predictions, a.images.as_deref(), &a.out, top_k, iou_max)
        }
        Command::Eval(a) => eval(&a),
        Command::Loss(a) => {
            let weights = a.opts.clone().over(&file.loss).resolve()?;
            loss(&a.gt, &a.predictions, &a.logits, &weights, a.oracle)
        }
        Command::Kmeans(KmeansCommand::Fit(a)) => kmeans_fit_cmd(&a),
        Command::Kmeans(KmeansCommand::Assign(a)) => kmeans_assign_cmd(&a),
        Command::Inspect(a) => inspect(&a.paths),
    })
}

/// Parses `args`, runs the command, prints its summary and returns the exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(out) => {
            if json {
                println!("{}", serde_json::to_string_pretty(&out.json).expect("summary serializes"));
            } else {
                for l in out.lines {
                    println!("{l}");
                }
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Deserialize)]
struct Manifest {
    images: Vec<ManifestImage>,
}

#[derive(Deserialize)]
struct ManifestImage {
    image_id: String,
    width: u32,
    height: u32,
}

fn read_manifest(dir: &Path) -> Result<HashMap<String, (u32, u32)>, CliError> {
    let path = dir.join("manifest.json");
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(CliError::Data(format!("{}: {e}", path.display()))),
    };
    let m: Manifest =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(m.images.into_iter().map(|i| (i.image_id, (i.width, i.height))).collect())
}

/// `.fms` files of a directory, sorted by file name.
pub fn list_feature_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| {
        let msg = format!("{}: {e}", dir.display());
        if e.kind() == io::ErrorKind::NotFound { CliError::Usage(msg) } else { CliError::Data(msg) }
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "fms") {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Raw region count and filtered proposals of one image.
pub fn image_proposals(stack: &FeatureStack, s: &ExtractSettings) -> propkit::Result<(usize, Vec<Proposal>)> {
    let masks = cluster_multi(stack, &s.local)?;
    let regions = regions_of(&masks);
    let last = stack.last();
    let mut props = Vec::with_capacity(regions.len());
    for r in &regions {
        if let Some(p) = region_to_proposal::<f64>(r, last)? {
            props.push(p);
        }
    }
    Ok((regions.len(), filter_proposals(props, &s.filter)))
}

#[derive(Serialize)]
struct ExtractSummary {
    images: usize,
    raw_regions: usize,
    proposals: usize,
    mean_proposals_per_image: f64,
    annotations: usize,
    classes: usize,
    inertia: f64,
}

pub fn extract(
    dir: &Path,
    out: &Path,
    model_out: Option<&Path>,
    s: &ExtractSettings,
) -> Result<Outcome, CliError> {
    use rayon::prelude::*;

    let files = list_feature_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no feature stacks found", dir.display())));
    }
    let sizes = read_manifest(dir)?;
    eprintln!("extract: {} feature stacks", files.len());

    let results: Vec<Result<(ImageProposals, usize), String>> = files
        .par_iter()
        .map(|path| {
            let stack = read_feature_stack(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let (raw, proposals) = image_proposals(&stack, s).map_err(|e| format!("{}: {e}", path.display()))?;
            let (width, height) = sizes.get(&stack.image_id).copied().unwrap_or(s.image_size);
            Ok((ImageProposals { image_id: stack.image_id, width, height, proposals }, raw))
        })
        .collect();

    let mut images = Vec::with_capacity(results.len());
    let mut raw_regions = 0;
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok((img, raw)) => {
                raw_regions += raw;
                images.push(img);
            }
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            eprintln!("extract: {f}");
        }
        return Err(CliError::Data(format!("{} of {} feature stacks failed", failures.len(), files.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = images.iter().find(|i| !seen.insert(i.image_id.as_str())) {
        return Err(CliError::Data(format!("duplicate image id {:?}", dup.image_id)));
    }

    for img in &mut images {
        for p in &mut img.proposals {
            normalize_in_place(&mut p.descriptor);
        }
    }
    let descriptors: Vec<&[f64]> = images.iter().flat_map(|i| i.proposals.iter().map(|p| p.descriptor.as_slice())).collect();
    let n = descriptors.len();
    eprintln!("extract: {raw_regions} raw regions, {n} proposals after filtering");
    if n < s.classes {
        return Err(CliError::Data(format!("{n} proposals cannot form {} clusters", s.classes)));
    }
    let features = Features::from_rows(&descriptors)?;
    let params = KMeansParams { max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL, n_init: 1 };
    let model: PseudoLabelModel = kmeans_fit_traced(&features, s.classes, s.seed, &params)?.model;
    eprintln!("extract: clustered into {} pseudo-classes, inertia {:.6}", s.classes, model.inertia);

    let set = propkit::global_cluster::build_training_set(&images, &model)?;
    write_annotations(&set, s.classes, out).map_err(at(out))?;
    if let Some(path) = model_out {
        write_model(&model, path).map_err(at(path))?;
    }

    let summary = ExtractSummary {
        images: images.len(),
        raw_regions,
        proposals: n,
        mean_proposals_per_image: n as f64 / images.len() as f64,
        annotations: set.iter().map(|i| i.boxes.len()).sum(),
        classes: s.classes,
        inertia: model.inertia,
    };
    Ok(Outcome {
        lines: vec![
            format!("images: {}", summary.images),
            format!("raw regions: {}", summary.raw_regions),
            format!("filtered proposals: {}", summary.proposals),
            format!("mean proposals per image: {:.2}", summary.mean_proposals_per_image),
            format!("annotations written: {} -> {}", summary.annotations, out.display()),
        ],
        json: serde_json::to_value(summary).expect("summary serializes"),
    })
}

fn is_json_array(path: &Path) -> Result<bool, CliError> {
    let bytes = fs::read(path).map_err(|e| at(path)(e.into()))?;
    Ok(bytes.iter().find(|b| !b.is_ascii_whitespace()) == Some(&b'['))
}

/// Reads an annotation document, or a results array grouped onto `reference`.
pub fn load_annotated(path: &Path, reference: Option<&CocoDocument>) -> Result<(Vec<AnnotatedImage>, usize), CliError> {
    if is_json_array(path)? {
        let reference = reference.ok_or_else(|| {
            CliError::Usage(format!("{}: a results array needs a reference image list", path.display()))
        })?;
        let results: Vec<DetectionResult> = propkit::tensor_store::read_results(path).map_err(at(path))?;
        let images = attach_results(reference, &results).map_err(at(path))?;
        Ok((images, reference.categories.len()))
    } else {
        read_document(path).and_then(CocoDocument::into_images).map_err(at(path))
    }
}

pub fn selftrain_filter(
    predictions: &Path,
    images: Option<&Path>,
    out: &Path,
    top_k: usize,
    iou_max: f64,
) -> Result<Outcome, CliError> {
    let reference = images.map(|p| read_document(p).map_err(at(p))).transpose()?;
    let (preds, classes) = load_annotated(predictions, reference.as_ref())?;
    let kept = build_next_training_set(&preds, top_k, iou_max)?;
    write_annotations(&kept, classes, out).map_err(at(out))?;
    let before: usize = preds.iter().map(|i| i.boxes.len()).sum();
    let after: usize = kept.iter().map(|i| i.boxes.len()).sum();
    Ok(Outcome {
        lines: vec![
            format!("images: {}", kept.len()),
            format!("predictions: {before}"),
            format!("kept: {after} -> {}", out.display()),
        ],
        json: json!({ "images": kept.len(), "predictions": before, "kept": after }),
    })
}

/// Majority-class purity over proposals matched to ground truth.
///
/// Each ground-truth box takes its highest-IoU proposal, lowest rank on ties,
/// when that IoU is at least 0.5.
pub fn matched_purity(gt: &[AnnotatedImage], props: &[AnnotatedImage]) -> Result<f64, CliError> {
    let index: HashMap<&str, &AnnotatedImage> = props.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let mut labels = Vec::new();
    let mut classes = Vec::new();
    for g in gt {
        let Some(p) = index.get(g.image_id.as_str()) else { continue };
        for (gb, &gl) in g.boxes.iter().zip(&g.labels) {
            let mut best: Option<(f64, usize)> = None;
            for (i, pb) in p.boxes.iter().enumerate() {
                let v = pb.iou(gb);
                if v >= 0.5 && best.is_none_or(|(b, _)| v > b) {
                    best = Some((v, i));
                }
            }
            if let Some((_, i)) = best {
                labels.push(p.labels[i]);
                classes.push(gl);
            }
        }
    }
    if labels.is_empty() {
        return Err(CliError::Data("no proposal matches any ground-truth box".into()));
    }
    Ok(cluster_purity(&labels, &classes)?)
}

pub fn eval(a: &EvalArgs) -> Result<Outcome, CliError> {
    let gt_doc = read_document(&a.gt).map_err(at(&a.gt))?;
    let (props, _) = load_annotated(&a.proposals, Some(&gt_doc))?;
    let (gt, _) = gt_doc.into_images().map_err(at(&a.gt))?;
    if a.k.is_empty() || a.k.contains(&0) {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let thresholds = coco_iou_thresholds();
    let mut report = EvalReport::default();
    let mut lines = Vec::new();
    for &k in &a.k {
        let ar = average_recall(&gt, &props, k, &thresholds)?;
        report.ar_at_k.insert(k, ar);
        lines.push(format!("AR@{k}: {ar:.4}"));
    }
    let k_max = *a.k.iter().max().expect("non-empty");
    report.per_image_recall = recall_per_image(&gt, &props, k_max, &thresholds)?;
    if a.purity {
        let ranked: Vec<AnnotatedImage> = props.iter().map(|p| truncate_ranked(p, k_max)).collect();
        let purity = matched_purity(&gt, &ranked)?;
        report.purity = Some(purity);
        lines.push(format!("purity: {purity:.4}"));
    }
    if a.accuracy {
        let acc = pseudo_label_accuracy(&props, &gt)?;
        report.acc = Some(acc);
        lines.push(format!("accuracy: {acc:.4}"));
    }
    if let Some(path) = &a.report {
        let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(Outcome { lines, json: serde_json::to_value(&report).expect("report serializes") })
}

/// Top `k` annotations in evaluation rank order, labels carried along.
fn truncate_ranked(img: &AnnotatedImage, k: usize) -> AnnotatedImage {
    let mut order: Vec<usize> = (0..img.boxes.len()).collect();
    if let Some(s) = &img.scores {
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    }
    order.truncate(k);
    debug_assert_eq!(ranked_boxes(img).len(), img.boxes.len());
    AnnotatedImage {
        image_id: img.image_id.clone(),
        width: img.width,
        height: img.height,
        boxes: order.iter().map(|&i| img.boxes[i]).collect(),
        labels: order.iter().map(|&i| img.labels[i]).collect(),
        scores: None,
    }
}

/// Query predictions of one image, read from its logits sidecar.
pub fn load_predictions(img: &AnnotatedImage, logits_dir: &Path, classes: usize) -> Result<Vec<Prediction>, CliError> {
    let q = img.boxes.len();
    let path = logits_dir.join(format!("{}.fms", img.image_id));
    let stack = read_feature_stack(&path).map_err(at(&path))?;
    let usage = |m: String| CliError::Usage(format!("{}: {m}", path.display()));
    if stack.image_id != img.image_id {
        return Err(usage(format!("image id {:?} where {:?} was expected", stack.image_id, img.image_id)));
    }
    if stack.levels.len() != 1 {
        return Err(usage(format!("expected one level, found {}", stack.levels.len())));
    }
    let m = &stack.levels[0];
    if m.channels != classes + 1 {
        return Err(usage(format!("{} logit channels but {classes} classes plus no-object", m.channels)));
    }
    if m.height != q || m.width != 1 {
        return Err(usage(format!("logit grid {}x{} does not match {q} predictions", m.height, m.width)));
    }
    let (sx, sy) = (1.0 / img.width as f64, 1.0 / img.height as f64);
    Ok((0..q)
        .map(|i| Prediction {
            bbox: img.boxes[i].scale(sx, sy),
            logits: (0..=classes).map(|c| m.get(c, i, 0) as f64).collect(),
        })
        .collect())
}

#[derive(Serialize)]
struct ImageLoss {
    image_id: String,
    queries: usize,
    objects: usize,
    assignment: Vec<usize>,
    total: f64,
    class: f64,
    l1: f64,
    giou: f64,
}

pub fn loss(
    gt_path: &Path,
    pred_path: &Path,
    logits_dir: &Path,
    weights: &propkit::LossWeights,
    oracle: bool,
) -> Result<Outcome, CliError> {
    let gt_doc = read_document(gt_path).map_err(at(gt_path))?;
    let results = propkit::tensor_store::read_results(pred_path).map_err(at(pred_path))?;
    let preds = attach_results(&gt_doc, &results).map_err(at(pred_path))?;
    let (gt, classes) = gt_doc.into_images().map_err(at(gt_path))?;

    let mut per_image = Vec::new();
    let (mut checked, mut skipped, mut mismatches) = (0usize, 0usize, Vec::new());
    for (g, p) in gt.iter().zip(&preds) {
        if p.boxes.is_empty() && g.boxes.is_empty() {
            continue;
        }
        if p.boxes.len() < g.boxes.len() {
            return Err(CliError::Data(format!(
                "image {}: {} predictions for {} objects",
                g.image_id,
                p.boxes.len(),
                g.boxes.len()
            )));
        }
        let queries = load_predictions(p, logits_dir, classes)?;
        let objects = gt_objects::<f64>(g);
        let terms = pair_terms(&objects, &queries, classes, weights)?;
        let cost = terms.matching_cost(weights.class_term);
        let assignment = hungarian_match(&cost)?;
        if oracle {
            if queries.len() <= BRUTE_FORCE_MAX {
                let found = assignment_cost(&cost, &assignment);
                let (_, best) = brute_force_match(&cost)?;
                checked += 1;
                if (found - best).abs() > 1e-9 * best.abs().max(1.0) {
                    mismatches.push(format!("image {}: matching cost {found} vs optimum {best}", g.image_id));
                }
            } else {
                skipped += 1;
            }
        }
        let r = terms.evaluate(&assignment);
        per_image.push(ImageLoss {
            image_id: g.image_id.clone(),
            queries: queries.len(),
            objects: objects.len(),
            assignment: r.assignment,
            total: r.total_loss,
            class: r.class_loss,
            l1: r.box_l1,
            giou: r.box_giou,
        });
    }
    let n = per_image.len().max(1) as f64;
    let mean = |f: fn(&ImageLoss) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let (total, class, l1, giou) = (mean(|r| r.total), mean(|r| r.class), mean(|r| r.l1), mean(|r| r.giou));
    for m in &mismatches {
        eprintln!("loss: oracle mismatch: {m}");
    }
    if !mismatches.is_empty() {
        return Err(CliError::Data(format!("{} matchings are not optimal", mismatches.len())));
    }
    let mut lines = vec![
        format!("images: {}", per_image.len()),
        format!("mean loss: {total:.6}"),
        format!("  class: {class:.6}"),
        format!("  l1: {l1:.6}"),
        format!("  giou: {giou:.6}"),
    ];
    if oracle {
        lines.push(format!("oracle: {checked} matchings optimal, {skipped} too large to check"));
    }
    Ok(Outcome {
        lines,
        json: json!({
            "images": per_image.len(),
            "mean": { "total": total, "class": class, "l1": l1, "giou": giou },
            "oracle": oracle.then(|| json!({ "checked": checked, "skipped": skipped })),
            "per_image": per_image,
        }),
    })
}

fn level_rows(path: &Path, level: Option<u32>) -> Result<(String, Vec<Vec<f64>>), CliError> {
    let stack = read_feature_stack(path).map_err(at(path))?;
    let map = match level {
        Some(l) => stack
            .level(l)
            .ok_or_else(|| CliError::Usage(format!("{}: no level {l}", path.display())))?,
        None => stack.last(),
    };
    let rows = map.pixel_vectors().into_iter().map(|v| v.into_iter().map(f64::from).collect()).collect();
    Ok((stack.image_id, rows))
}

pub fn kmeans_fit_cmd(a: &KmeansFitArgs) -> Result<Outcome, CliError> {
    let mut rows = Vec::new();
    for p in &a.features {
        rows.extend(level_rows(p, a.level)?.1);
    }
    if rows.len() < a.classes || a.classes == 0 {
        return Err(CliError::Data(format!("{} rows cannot form {} clusters", rows.len(), a.classes)));
    }
    let features = Features::from_rows(&rows)?;
    let params = KMeansParams { max_iter: a.max_iter, tol: a.tol, n_init: a.n_init };
    let fit = kmeans_fit_traced(&features, a.classes, a.seed, &params)?;
    write_model(&fit.model, &a.out).map_err(at(&a.out))?;
    Ok(Outcome {
        lines: vec![
            format!("rows: {}", rows.len()),
            format!("iterations: {}", fit.iterations),
            format!("inertia: {:.6}", fit.model.inertia),
        ],
        json: json!({ "rows": rows.len(), "iterations": fit.iterations, "inertia": fit.model.inertia }),
    })
}

pub fn kmeans_assign_cmd(a: &KmeansAssignArgs) -> Result<Outcome, CliError> {
    let model: PseudoLabelModel = read_model(&a.model).map_err(at(&a.model))?;
    let mut out = BTreeMap::new();
    for p in &a.features {
        let (id, rows) = level_rows(p, a.level)?;
        let labels = kmeans_assign(&model, &Features::from_rows(&rows)?).map_err(at(p))?;
        out.insert(id, labels);
    }
    let value = serde_json::to_value(&out).expect("labels serialize");
    let text = serde_json::to_string(&value).expect("labels serialize");
    match &a.out {
        Some(path) => {
            fs::write(path, format!("{text}\n")).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            Ok(Outcome { lines: vec![format!("labeled {} images -> {}", out.len(), path.display())], json: value })
        }
        None => Ok(Outcome { lines: vec![text], json: value }),
    }
}

pub fn inspect(paths: &[PathBuf]) -> Result<Outcome, CliError> {
    let mut lines = Vec::new();
    let mut files = Vec::new();
    for p in paths {
        let (id, levels) = read_header(p).map_err(at(p))?;
        lines.push(format!("{}: image {id:?}, {} levels", p.display(), levels.len()));
        for l in &levels {
            lines.push(format!("  level {}: {} x {} x {}", l.level, l.channels, l.height, l.width));
        }
        files.push(json!({
            "path": p.display().to_string(),
            "image_id": id,
            "levels": levels.iter().map(|l| json!({
                "level": l.level, "channels": l.channels, "height": l.height, "width": l.width,
            })).collect::<Vec<_>>(),
        }));
    }
    Ok(Outcome { lines, json: Value::Array(files) })
}
