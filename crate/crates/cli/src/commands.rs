//! The six subcommand bodies. Everything here is file plumbing around the
//! library: the numerics live in omnipose-core.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde_json::json;

use omnipose_core::codec::{self, HeatmapMeta, PoseAnnotation, Refinement};
use omnipose_core::io::{
    self, AnnotationKind, Category, ImageInfo, KeypointFile, RunConfig,
};
use omnipose_core::metrics::{match_and_ap, pckh, EvalReport, OksConfig, COCO_FALLOFF};
use omnipose_core::model::{count_cost, CostReport, Model, ModelConfig};
use omnipose_core::selfcheck;
use omnipose_core::tensor::Tensor;
use omnipose_core::Error;

#[derive(Args)]
pub struct InferArgs {
    /// Image tensor file, or a directory of .ten files
    pub input: PathBuf,
    /// Run configuration; individual flags below override its fields
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Model config path
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of weight tensors, one .ten per parameter
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Initialization seed, overriding the model config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak refinement during decoding
    #[arg(long, value_parser = ["none", "quarter_offset", "taylor"])]
    pub refine: Option<String>,
    /// Instance score rule over per-joint confidences
    #[arg(long, default_value = "mean", value_parser = ["mean", "max"])]
    pub score: String,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EncodeArgs {
    /// Ground-truth keypoint file
    pub gt: PathBuf,
    /// Output directory for a{annotation}_i{image}.ten heatmap files
    #[arg(long)]
    pub out: PathBuf,
    /// Gaussian width in heatmap pixels
    #[arg(long, default_value_t = 3.0)]
    pub sigma: f64,
    /// Image-to-heatmap downscale factor
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
}

#[derive(Args)]
pub struct DecodeArgs {
    /// Heatmap tensor file, or a directory of .ten files
    pub input: PathBuf,
    /// Where to write the prediction keypoint file
    #[arg(long)]
    pub out: PathBuf,
    /// Image-to-heatmap downscale factor
    #[arg(long, default_value_t = 4)]
    pub stride: usize,
    /// Peak refinement
    #[arg(long, default_value = "taylor", value_parser = ["none", "quarter_offset", "taylor"])]
    pub refine: String,
    /// Keypoint file whose images and joint names the output should mirror
    #[arg(long)]
    pub like: Option<PathBuf>,
    /// Instance score rule over per-joint confidences
    #[arg(long, default_value = "mean", value_parser = ["mean", "max"])]
    pub score: String,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Prediction keypoint file
    pub pred: PathBuf,
    /// Ground-truth keypoint file
    pub gt: PathBuf,
    /// Which metric family to compute
    #[arg(long, value_parser = ["pckh", "oks-ap"])]
    pub metric: String,
    /// PCKh distance threshold as a fraction of head size
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Similarity settings (per-joint falloffs, thresholds, area ranges)
    #[arg(long)]
    pub oks_config: Option<PathBuf>,
    /// Also write the report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct CountArgs {
    /// Model config path
    pub config: PathBuf,
    /// Also write the cost report as JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_refinement(s: &str) -> Refinement {
    // The clap value_parser restricts the string to the valid names.
    s.parse().expect("value_parser admitted an unknown refinement")
}

fn instance_score(rule: &str, confidences: &[f64]) -> f64 {
    match rule {
        "max" => confidences.iter().copied().fold(0.0, f64::max),
        _ => confidences.iter().sum::<f64>() / confidences.len().max(1) as f64,
    }
}

/// A single .ten file, or every .ten inside a directory in name order.
fn list_tensor_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("input {} is neither a file nor a directory", input.display());
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "ten"))
        .collect();
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Last `<tag><digits>` group in a file stem, so `a12_i7` carries
/// annotation 12 for image 7. Returns None when the stem has no such group.
fn tagged_number(stem: &str, tag: u8) -> Option<i64> {
    let bytes = stem.as_bytes();
    let mut found = None;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == tag && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit() {
            let start = i + 1;
            let mut end = start;
            while end < bytes.len() && bytes[end].is_ascii_digit() {
                end += 1;
            }
            if let Ok(v) = stem[start..end].parse() {
                found = Some(v);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    found
}

/// Accepts [C, H, W] or [1, C, H, W] and returns the batched form.
fn batched(t: Tensor, what: &str) -> Result<Tensor> {
    match *t.shape() {
        [_, _, _] => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            Ok(Tensor::new(shape, t.into_data())?)
        }
        [1, _, _, _] => Ok(t),
        ref s => bail!("{what} must be [C, H, W] or [1, C, H, W], got {s:?}"),
    }
}

fn squeezed(t: Tensor) -> Result<Tensor> {
    let shape = t.shape()[1..].to_vec();
    Ok(Tensor::new(shape, t.into_data())?)
}

pub fn infer(args: InferArgs) -> Result<ExitCode> {
    let run = args.run.as_deref().map(RunConfig::load).transpose()?;
    let run_ref = run.as_ref();
    let config_path = args
        .config
        .or_else(|| run_ref.map(|r| r.model_config.clone()))
        .context("no model config: pass --config or --run")?;
    let out_dir = args
        .out
        .or_else(|| run_ref.map(|r| r.output_dir.clone()))
        .context("no output directory: pass --out or --run")?;
    let weights_dir = args.weights.or_else(|| run_ref.and_then(|r| r.weights_dir.clone()));
    let seed = args.seed.or(run_ref.and_then(|r| r.seed));
    let refinement = match &args.refine {
        Some(s) => parse_refinement(s),
        None => run_ref.map_or(Refinement::Taylor, |r| r.refinement),
    };

    let mut cfg = io::load_model_config(&config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let (img_h, img_w) = cfg.input_size;
    let mut model = Model::new(cfg)?;
    if let Some(dir) = &weights_dir {
        io::load_weights_dir(dir, model.weights.named_parameters_mut())?;
    }

    let inputs = list_tensor_files(&args.input)?;
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let meta = HeatmapMeta {
        stride: model.cfg.heatmap_stride,
        offset: (0.0, 0.0),
        sigma: codec::DEFAULT_SIGMA,
    };

    for (index, input) in inputs.iter().enumerate() {
        let image = batched(io::read_tensor(input)?, "input image")?;
        let (_, c, h, w) = image.dims4("input image")?;
        if c != 3 || (h, w) != (img_h, img_w) {
            return Err(Error::Shape(format!(
                "{}: image is {c}x{h}x{w} but the model expects 3x{img_h}x{img_w}",
                input.display()
            ))
            .into());
        }

        let heatmaps = squeezed(model.forward(&image)?)?;
        let decoded = codec::decode(&heatmaps, &meta, refinement)?;

        let stem = file_stem(input);
        let heatmap_path = out_dir.join(format!("{stem}.heatmaps.ten"));
        io::write_tensor(&heatmap_path, &heatmaps, io::Dtype::F64)?;

        let image_id = tagged_number(&stem, b'i').unwrap_or(index as i64);
        let confidences: Vec<f64> = decoded.iter().map(|(_, c)| *c).collect();
        let file = KeypointFile {
            category: Category {
                keypoints: KeypointFile::default_names(model.cfg.num_joints()),
                k_i: None,
            },
            images: vec![ImageInfo { id: image_id, width: img_w as u64, height: img_h as u64 }],
            annotations: vec![PoseAnnotation {
                image_id,
                id: 1,
                keypoints: decoded.into_iter().map(|(kp, _)| kp).collect(),
                area: (img_w * img_h) as f64,
                head_size: None,
                score: Some(instance_score(&args.score, &confidences)),
            }],
        };
        let keypoint_path = out_dir.join(format!("{stem}.keypoints.json"));
        file.save(&keypoint_path)?;
        println!(
            "{} -> {}, {}",
            input.display(),
            heatmap_path.display(),
            keypoint_path.display()
        );
    }
    println!("processed {} input(s)", inputs.len());
    Ok(ExitCode::SUCCESS)
}

pub fn encode(args: EncodeArgs) -> Result<ExitCode> {
    let meta = HeatmapMeta { stride: args.stride, offset: (0.0, 0.0), sigma: args.sigma };
    meta.validate()?;
    let gt = KeypointFile::load(&args.gt, AnnotationKind::GroundTruth)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    for ann in &gt.annotations {
        let image = gt
            .images
            .iter()
            .find(|im| im.id == ann.image_id)
            .expect("annotation image ids are checked at load time");
        let h = (image.height as usize).div_ceil(args.stride);
        let w = (image.width as usize).div_ceil(args.stride);
        let stack = codec::encode(ann, &meta, h, w)?;
        let path = args.out.join(format!("a{}_i{}.ten", ann.id, ann.image_id));
        io::write_tensor(&path, &stack.planes, io::Dtype::F64)?;
    }
    println!("encoded {} annotation(s) into {}", gt.annotations.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn decode(args: DecodeArgs) -> Result<ExitCode> {
    let refinement = parse_refinement(&args.refine);
    let like = args
        .like
        .as_deref()
        .map(|p| KeypointFile::load(p, AnnotationKind::GroundTruth))
        .transpose()?;
    let inputs = list_tensor_files(&args.input)?;

    let mut category: Option<Category> = like.as_ref().map(|f| Category {
        keypoints: f.category.keypoints.clone(),
        k_i: f.category.k_i.clone(),
    });
    let mut images: Vec<ImageInfo> = like.as_ref().map_or_else(Vec::new, |f| f.images.clone());
    let mut annotations = Vec::new();

    for (index, input) in inputs.iter().enumerate() {
        let planes = io::read_tensor(input)?;
        let planes = if planes.rank() == 4 { squeezed(planes)? } else { planes };
        let (k, h, w) = match *planes.shape() {
            [k, h, w] => (k, h, w),
            ref s => bail!("{}: heatmaps must be [K, H, W], got {s:?}", input.display()),
        };
        match &category {
            Some(c) if c.keypoints.len() != k => {
                return Err(Error::Schema {
                    path: "categories[0].keypoints".into(),
                    message: format!(
                        "{} holds {k} joint planes but the category names {} joints",
                        input.display(),
                        c.keypoints.len()
                    ),
                }
                .into());
            }
            Some(_) => {}
            None => category = Some(Category { keypoints: KeypointFile::default_names(k), k_i: None }),
        }

        let stem = file_stem(input);
        let image_id = tagged_number(&stem, b'i').unwrap_or(index as i64);
        let ann_id = tagged_number(&stem, b'a').unwrap_or(index as i64 + 1);
        let image = match images.iter().find(|im| im.id == image_id) {
            Some(im) => *im,
            None if like.is_some() => {
                bail!("{}: image id {image_id} is not in the --like file", input.display())
            }
            None => {
                let im = ImageInfo {
                    id: image_id,
                    width: (w * args.stride) as u64,
                    height: (h * args.stride) as u64,
                };
                images.push(im);
                im
            }
        };

        let meta =
            HeatmapMeta { stride: args.stride, offset: (0.0, 0.0), sigma: codec::DEFAULT_SIGMA };
        let decoded = codec::decode(&planes, &meta, refinement)?;
        let confidences: Vec<f64> = decoded.iter().map(|(_, c)| *c).collect();
        annotations.push(PoseAnnotation {
            image_id,
            id: ann_id,
            keypoints: decoded.into_iter().map(|(kp, _)| kp).collect(),
            area: (image.width * image.height) as f64,
            head_size: None,
            score: Some(instance_score(&args.score, &confidences)),
        });
    }

    let Some(category) = category else {
        bail!("no heatmap tensors under {}", args.input.display());
    };
    let file = KeypointFile { category, images, annotations };
    file.save(&args.out)?;
    println!("decoded {} tensor(s) into {}", inputs.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn eval(args: EvalArgs) -> Result<ExitCode> {
    let pred = KeypointFile::load(&args.pred, AnnotationKind::Prediction)?;
    let gt = KeypointFile::load(&args.gt, AnnotationKind::GroundTruth)?;
    if pred.num_joints() != gt.num_joints() {
        return Err(Error::Schema {
            path: "categories[0].keypoints".into(),
            message: format!(
                "prediction file names {} joints but ground truth names {}",
                pred.num_joints(),
                gt.num_joints()
            ),
        }
        .into());
    }

    let mut report = EvalReport::default();
    match args.metric.as_str() {
        "pckh" => {
            let r = pckh(&pred.annotations, &gt.annotations, args.alpha)?;
            println!("{}", r.table(Some(&gt.category.keypoints)));
            report.pckh = Some(r);
        }
        _ => {
            let cfg = resolve_oks_config(args.oks_config.as_deref(), &gt)?;
            let r = match_and_ap(&pred.annotations, &gt.annotations, &cfg)?;
            println!("{}", r.table());
            report.oks_ap = Some(r);
        }
    }
    if let Some(out) = &args.out {
        io::write_json(out, &report)?;
        println!("report written to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

/// Falloff constants come from the first source that has them: an explicit
/// settings file, the ground truth's category, or the built-in 17-joint
/// table.
fn resolve_oks_config(flag: Option<&Path>, gt: &KeypointFile) -> Result<OksConfig> {
    if let Some(path) = flag {
        return Ok(io::load_oks_config(path)?);
    }
    if let Some(k_i) = &gt.category.k_i {
        let cfg = OksConfig::for_falloff(k_i.clone());
        cfg.validate()?;
        return Ok(cfg);
    }
    if gt.num_joints() == COCO_FALLOFF.len() {
        return Ok(OksConfig::default());
    }
    Err(Error::Data(format!(
        "no per-joint falloff constants for {} joints: add k_i to the ground-truth \
         categories or pass --oks-config",
        gt.num_joints()
    ))
    .into())
}

pub fn count(args: CountArgs) -> Result<ExitCode> {
    let cfg = io::parse_model_config(&args.config)?;
    // A config with no branches describes no network at all; report zeros
    // rather than rejecting it, since there is nothing to validate.
    if cfg.backbone.branches.is_empty() {
        let empty = CostReport { params: 0, flops: 0, layers: Vec::new() };
        print_cost_table(&empty);
        if let Some(out) = &args.out {
            io::write_json(out, &json!({ "report": empty }))?;
        }
        return Ok(ExitCode::SUCCESS);
    }
    cfg.validate()?;

    let input_size = cfg.input_size;
    let report = count_cost(&Model::new(cfg.clone())?, input_size)?;
    print_cost_table(&report);

    let standard = cost_with_lite(&cfg, false)?;
    let lite = cost_with_lite(&cfg, true)?;
    let param_cut = reduction_pct(standard.params, lite.params);
    let flop_cut = reduction_pct(standard.flops, lite.flops);
    println!("separable vs standard convolutions on this topology:");
    println!("  params: {} -> {} ({param_cut:.1}% fewer)", standard.params, lite.params);
    println!("  flops:  {} -> {} ({flop_cut:.1}% fewer)", standard.flops, lite.flops);

    if let Some(out) = &args.out {
        io::write_json(
            out,
            &json!({
                "report": report,
                "standard": { "params": standard.params, "flops": standard.flops },
                "lite": { "params": lite.params, "flops": lite.flops },
                "param_reduction_pct": param_cut,
                "flop_reduction_pct": flop_cut,
            }),
        )?;
        println!("report written to {}", out.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cost_with_lite(cfg: &ModelConfig, lite: bool) -> Result<CostReport> {
    let mut cfg = cfg.clone();
    cfg.backbone.lite = lite;
    cfg.wasp.separable = lite;
    Ok(count_cost(&Model::new(cfg.clone())?, cfg.input_size)?)
}

fn reduction_pct(standard: u64, lite: u64) -> f64 {
    if standard == 0 {
        return 0.0;
    }
    100.0 * (1.0 - lite as f64 / standard as f64)
}

fn print_cost_table(report: &CostReport) {
    println!("{:<28} {:>14} {:>16}", "layer", "params", "flops");
    for layer in &report.layers {
        println!("{:<28} {:>14} {:>16}", layer.name, layer.params, layer.flops);
    }
    println!("{:<28} {:>14} {:>16}", "total", report.params, report.flops);
}

pub fn selftest() -> Result<ExitCode> {
    let report = selfcheck::run_all();
    print!("{}", report.render());
    if report.all_passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::FAILURE)
    }
}
