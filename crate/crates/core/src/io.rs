//! On-disk formats: a binary tensor container, COCO-style keypoint JSON,
//! weights directories, and the JSON configuration loaders.
//!
//! The tensor container is deliberately minimal: an 8-byte magic, a
//! little-endian u32 header length, a JSON header carrying dtype and
//! shape, then raw little-endian row-major values. Reads validate every
//! region and report the byte offset of the first inconsistency, so a
//! truncated copy or a foreign file fails loudly instead of decoding into
//! garbage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::codec::{Keypoint, PoseAnnotation, Refinement};
use crate::error::{Error, Result};
use crate::metrics::OksConfig;
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Leading bytes of every tensor file.
pub const TENSOR_MAGIC: &[u8; 8] = b"OMNITEN\0";

/// Element encoding of a tensor file payload. Values are f64 in memory
/// either way; writing f32 halves the file at the cost of rounding each
/// element to the nearest f32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    dtype: Dtype,
    shape: Vec<usize>,
}

/// Writes `t` to `path` in the tensor container format.
pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let header = serde_json::to_vec(&TensorHeader { dtype, shape: t.shape().to_vec() })
        .expect("tensor header serialization cannot fail");
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Data(format!("tensor header of {} bytes is too large", header.len())))?;
    let mut bytes =
        Vec::with_capacity(12 + header.len() + t.numel() * dtype.size());
    bytes.extend_from_slice(TENSOR_MAGIC);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    match dtype {
        Dtype::F64 => {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a tensor file back. f32 payloads are widened to f64.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let fail = |offset: usize, message: String| Error::Format { offset: offset as u64, message };
    if bytes.len() < 8 {
        return Err(fail(bytes.len(), format!("file ends inside the 8-byte magic ({} bytes total)", bytes.len())));
    }
    if &bytes[..8] != TENSOR_MAGIC {
        let at = bytes[..8].iter().zip(TENSOR_MAGIC).position(|(a, b)| a != b).unwrap_or(0);
        return Err(fail(at, format!("bad magic {:?}, expected {TENSOR_MAGIC:?}", &bytes[..8])));
    }
    if bytes.len() < 12 {
        return Err(fail(bytes.len(), "file ends inside the header length field".into()));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(fail(
            bytes.len(),
            format!("file ends inside the {header_len}-byte JSON header"),
        ));
    }
    let header: TensorHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| fail(12, format!("header is not valid JSON ({e})")))?;
    let mut numel = 1usize;
    for &d in &header.shape {
        if d == 0 {
            return Err(fail(12, format!("shape {:?} has a zero dimension", header.shape)));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| fail(12, format!("shape {:?} overflows", header.shape)))?;
    }
    if header.shape.is_empty() {
        return Err(fail(12, "shape is empty".into()));
    }
    let expected = numel * header.dtype.size();
    let payload = &bytes[payload_start..];
    if payload.len() != expected {
        return Err(fail(
            payload_start,
            format!(
                "payload is {} bytes, expected {expected} for shape {:?} ({:?})",
                payload.len(),
                header.shape,
                header.dtype
            ),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    Tensor::new(header.shape, data)
}

/// The single keypoint category a file describes: joint names and,
/// optionally, per-joint falloff constants for similarity scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct Category {
    pub keypoints: Vec<String>,
    pub k_i: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageInfo {
    pub id: i64,
    pub width: u64,
    pub height: u64,
}

/// Whether a keypoint file holds ground truth or predictions. The only
/// schema difference: predictions must carry a score, ground truth must
/// not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationKind {
    GroundTruth,
    Prediction,
}

/// A COCO-style keypoint document: one category, the images it refers to,
/// and per-instance annotations with flattened [x, y, v] keypoint triples.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFile {
    pub category: Category,
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<PoseAnnotation>,
}

impl KeypointFile {
    pub fn num_joints(&self) -> usize {
        self.category.keypoints.len()
    }

    /// Default joint names when nothing better is known.
    pub fn default_names(k: usize) -> Vec<String> {
        (0..k).map(|j| format!("j{j}")).collect()
    }

    pub fn load(path: &Path, kind: AnnotationKind) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: not valid JSON: {e}", path.display())))?;
        Self::from_value(&value, kind)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut cat = Map::new();
        cat.insert("keypoints".into(), json!(self.category.keypoints));
        if let Some(k_i) = &self.category.k_i {
            cat.insert("k_i".into(), json!(k_i));
        }
        let images: Vec<Value> = self
            .images
            .iter()
            .map(|im| json!({"id": im.id, "width": im.width, "height": im.height}))
            .collect();
        let annotations: Vec<Value> = self
            .annotations
            .iter()
            .map(|a| {
                let mut flat = Vec::with_capacity(3 * a.keypoints.len());
                for kp in &a.keypoints {
                    flat.push(json!(kp.x));
                    flat.push(json!(kp.y));
                    flat.push(json!(kp.v));
                }
                let mut m = Map::new();
                m.insert("image_id".into(), json!(a.image_id));
                m.insert("id".into(), json!(a.id));
                m.insert("keypoints".into(), Value::Array(flat));
                m.insert("area".into(), json!(a.area));
                if let Some(h) = a.head_size {
                    m.insert("head_size".into(), json!(h));
                }
                if let Some(s) = a.score {
                    m.insert("score".into(), json!(s));
                }
                Value::Object(m)
            })
            .collect();
        let doc = json!({
            "categories": [Value::Object(cat)],
            "images": images,
            "annotations": annotations,
        });
        let mut bytes = serde_json::to_vec_pretty(&doc).expect("document serialization cannot fail");
        bytes.push(b'\n');
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn from_value(value: &Value, kind: AnnotationKind) -> Result<Self> {
        let root = as_object(value, "(root)")?;
        let cats = as_array(required(root, "categories", "")?, "categories")?;
        if cats.len() != 1 {
            return Err(schema("categories", format!("expected exactly one category, got {}", cats.len())));
        }
        let cat_obj = as_object(&cats[0], "categories[0]")?;
        let names_v = as_array(required(cat_obj, "keypoints", "categories[0]")?, "categories[0].keypoints")?;
        if names_v.is_empty() {
            return Err(schema("categories[0].keypoints", "joint name list is empty"));
        }
        let mut keypoints = Vec::with_capacity(names_v.len());
        for (i, n) in names_v.iter().enumerate() {
            let path = format!("categories[0].keypoints[{i}]");
            keypoints.push(
                n.as_str().ok_or_else(|| schema(&path, "expected a string"))?.to_string(),
            );
        }
        let k = keypoints.len();
        let k_i = match cat_obj.get("k_i") {
            None | Some(Value::Null) => None,
            Some(v) => {
                let arr = as_array(v, "categories[0].k_i")?;
                if arr.len() != k {
                    return Err(schema(
                        "categories[0].k_i",
                        format!("{} falloff constants for {k} joints", arr.len()),
                    ));
                }
                let mut out = Vec::with_capacity(k);
                for (i, x) in arr.iter().enumerate() {
                    let path = format!("categories[0].k_i[{i}]");
                    let val = as_number(x, &path)?;
                    if !(val > 0.0) {
                        return Err(schema(&path, format!("falloff constant must be positive, got {val}")));
                    }
                    out.push(val);
                }
                Some(out)
            }
        };

        let images_v = as_array(required(root, "images", "")?, "images")?;
        let mut images = Vec::with_capacity(images_v.len());
        let mut image_ids = BTreeSet::new();
        for (i, im) in images_v.iter().enumerate() {
            let base = format!("images[{i}]");
            let obj = as_object(im, &base)?;
            let id = as_integer(required(obj, "id", &base)?, &format!("{base}.id"))?;
            if !image_ids.insert(id) {
                return Err(schema(&format!("{base}.id"), format!("duplicate image id {id}")));
            }
            let width = as_positive_int(required(obj, "width", &base)?, &format!("{base}.width"))?;
            let height = as_positive_int(required(obj, "height", &base)?, &format!("{base}.height"))?;
            images.push(ImageInfo { id, width, height });
        }

        let anns_v = as_array(required(root, "annotations", "")?, "annotations")?;
        let mut annotations = Vec::with_capacity(anns_v.len());
        let mut ann_keys = BTreeSet::new();
        for (i, av) in anns_v.iter().enumerate() {
            let base = format!("annotations[{i}]");
            let obj = as_object(av, &base)?;
            let image_id = as_integer(required(obj, "image_id", &base)?, &format!("{base}.image_id"))?;
            if !image_ids.contains(&image_id) {
                return Err(schema(
                    &format!("{base}.image_id"),
                    format!("references image {image_id}, which is not in images"),
                ));
            }
            let id = as_integer(required(obj, "id", &base)?, &format!("{base}.id"))?;
            if !ann_keys.insert((image_id, id)) {
                return Err(schema(
                    &format!("{base}.id"),
                    format!("duplicate annotation {id} for image {image_id}"),
                ));
            }
            let flat = as_array(required(obj, "keypoints", &base)?, &format!("{base}.keypoints"))?;
            if flat.len() != 3 * k {
                return Err(schema(
                    &format!("{base}.keypoints"),
                    format!("{} values for {k} joints, expected {}", flat.len(), 3 * k),
                ));
            }
            let mut kps = Vec::with_capacity(k);
            for j in 0..k {
                let x = as_number(&flat[3 * j], &format!("{base}.keypoints[{}]", 3 * j))?;
                let y = as_number(&flat[3 * j + 1], &format!("{base}.keypoints[{}]", 3 * j + 1))?;
                let vpath = format!("{base}.keypoints[{}]", 3 * j + 2);
                let v = as_integer(&flat[3 * j + 2], &vpath)?;
                if !(0..=2).contains(&v) {
                    return Err(schema(&vpath, format!("visibility must be 0, 1, or 2, got {v}")));
                }
                kps.push(Keypoint::new(x, y, v as u8));
            }
            let area = as_number(required(obj, "area", &base)?, &format!("{base}.area"))?;
            if !(area > 0.0) {
                return Err(schema(&format!("{base}.area"), format!("area must be positive, got {area}")));
            }
            let head_size = match obj.get("head_size") {
                None | Some(Value::Null) => None,
                Some(v) => {
                    let path = format!("{base}.head_size");
                    let h = as_number(v, &path)?;
                    if !(h > 0.0) {
                        return Err(schema(&path, format!("head size must be positive, got {h}")));
                    }
                    Some(h)
                }
            };
            let score = match (kind, obj.get("score")) {
                (AnnotationKind::Prediction, Some(v)) => {
                    Some(as_number(v, &format!("{base}.score"))?)
                }
                (AnnotationKind::Prediction, None) => {
                    return Err(schema(
                        &format!("{base}.score"),
                        format!("prediction {id} must carry a score"),
                    ))
                }
                (AnnotationKind::GroundTruth, Some(_)) => {
                    return Err(schema(
                        &format!("{base}.score"),
                        format!("ground-truth annotation {id} must not carry a score"),
                    ))
                }
                (AnnotationKind::GroundTruth, None) => None,
            };
            annotations.push(PoseAnnotation { image_id, id, keypoints: kps, area, head_size, score });
        }
        Ok(Self { category: Category { keypoints, k_i }, images, annotations })
    }
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema { path: path.to_string(), message: message.into() }
}

fn as_object<'a>(v: &'a Value, path: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| schema(path, "expected a JSON object".to_string()))
}

fn as_array<'a>(v: &'a Value, path: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(path, "expected a JSON array".to_string()))
}

fn required<'a>(m: &'a Map<String, Value>, key: &str, base: &str) -> Result<&'a Value> {
    let joined = if base.is_empty() { key.to_string() } else { format!("{base}.{key}") };
    m.get(key).ok_or_else(|| schema(&joined, "missing required field".to_string()))
}

fn as_number(v: &Value, path: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| schema(path, format!("expected a number, got {v}")))
}

fn as_integer(v: &Value, path: &str) -> Result<i64> {
    v.as_i64().ok_or_else(|| schema(path, format!("expected an integer, got {v}")))
}

fn as_positive_int(v: &Value, path: &str) -> Result<u64> {
    match v.as_u64() {
        Some(x) if x > 0 => Ok(x),
        _ => Err(schema(path, format!("expected a positive integer, got {v}"))),
    }
}

/// Loads and validates a model configuration.
pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let cfg = parse_model_config(path)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses a model config without validating it, for consumers that only
/// inspect the topology (the cost counter accepts an empty one).
pub fn parse_model_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads and validates similarity-evaluation settings.
pub fn load_oks_config(path: &Path) -> Result<OksConfig> {
    let text = fs::read_to_string(path)?;
    let cfg: OksConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One run's file layout: which model to build, where its weights live,
/// and where outputs go. Relative paths are resolved against the config
/// file's directory, so a run directory stays relocatable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_config: PathBuf,
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
    /// Overrides the model config's initialization seed when present.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_refinement")]
    pub refinement: Refinement,
    #[serde(default)]
    pub oks_config: Option<PathBuf>,
    pub output_dir: PathBuf,
}

fn default_refinement() -> Refinement {
    Refinement::Taylor
}

impl RunConfig {
    /// Loads a run configuration and checks that every referenced input
    /// path exists. The output directory is not required to exist yet.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &PathBuf| if p.is_relative() { dir.join(p) } else { p.clone() };
        cfg.model_config = resolve(&cfg.model_config);
        cfg.weights_dir = cfg.weights_dir.as_ref().map(&resolve);
        cfg.oks_config = cfg.oks_config.as_ref().map(&resolve);
        cfg.output_dir = resolve(&cfg.output_dir);
        for (name, p, must_exist) in [
            ("model_config", Some(&cfg.model_config), true),
            ("weights_dir", cfg.weights_dir.as_ref(), true),
            ("oks_config", cfg.oks_config.as_ref(), true),
        ] {
            if let Some(p) = p {
                if must_exist && !p.exists() {
                    return Err(Error::Data(format!(
                        "{name} path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(cfg)
    }
}

/// Writes one `<name>.ten` file per parameter into `dir`, creating it if
/// needed. Parameter names contain only dots and underscores, so they are
/// usable as file stems directly.
pub fn save_weights_dir(dir: &Path, params: &[(String, &Tensor)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, t) in params {
        write_tensor(&dir.join(format!("{name}.ten")), t, Dtype::F64)?;
    }
    Ok(())
}

/// Fills `params` from a weights directory written by `save_weights_dir`.
/// Every parameter must have a file of matching shape, and every tensor
/// file in the directory must correspond to a parameter; both directions
/// catch renamed or mismatched topologies early.
pub fn load_weights_dir(dir: &Path, params: Vec<(String, &mut Tensor)>) -> Result<()> {
    let mut expected: BTreeMap<String, &mut Tensor> = BTreeMap::new();
    for (name, slot) in params {
        expected.insert(name, slot);
    }
    let mut seen = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ten") {
            continue;
        }
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) => s.to_string(),
            None => continue,
        };
        if !expected.contains_key(&stem) {
            return Err(Error::Data(format!(
                "weights directory has no matching parameter for {}",
                path.display()
            )));
        }
        seen.insert(stem);
    }
    for (name, slot) in expected {
        if !seen.contains(&name) {
            return Err(Error::Data(format!(
                "weights directory {} lacks a file for parameter {name}",
                dir.display()
            )));
        }
        let t = read_tensor(&dir.join(format!("{name}.ten")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?} on disk but {:?} in the model",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok(())
}

/// Serializes `value` as pretty JSON with a trailing newline. Field order
/// follows the struct declaration, so output bytes are reproducible.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}
