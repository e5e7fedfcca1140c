//! The end-to-end pose network: a small multi-resolution backbone feeding
//! the waterfall head, plus the loss, a gradient-descent step, the
//! learning-rate schedule and a parameter/FLOP cost model.
//!
//! The backbone keeps several feature maps alive in parallel, one per
//! resolution branch, and repeatedly exchanges information between
//! adjacent branches: down-transitions are strided convolutions,
//! up-transitions are transposed convolutions optionally sharpened by
//! Gaussian modulation, and each branch sums what it receives before a
//! ReLU. A two-convolution stem (stride 2 each) brings the image to a
//! quarter of its resolution, which is where the highest-resolution
//! branch and the final heatmaps live.
//!
//! Forward passes are recorded on a `Tape`, so the gradient path is the
//! value path; the tensor-returning wrappers just discard the recording.

use crate::conv::{ConvGeom, ConvLayer};
use crate::error::{Error, Result};
use crate::gdm::GdmConfig;
use crate::tape::{ConvVars, Tape, Var};
use crate::tensor::Tensor;
use crate::wasp::{self, WaspConfig, WaspVars, WaspWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Images are RGB; the stem consumes exactly this many channels.
pub const IMAGE_CHANNELS: usize = 3;

/// One backbone branch: its channel width and the power-of-two factor by
/// which its resolution is below the input image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub channels: usize,
    pub divisor: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Parallel branches, highest resolution first. The first branch must
    /// sit at divisor 4 because the two stride-2 stem convolutions fix
    /// that scale.
    pub branches: Vec<BranchSpec>,
    pub num_exchange_blocks: usize,
    /// Build every backbone convolution as a separable one. Transposed
    /// convolutions in up-transitions are unaffected.
    pub lite: bool,
    /// Blur-and-rescale settings for modulated up-transitions, including
    /// the transposed-convolution geometry.
    pub gdm: GdmConfig,
    /// Per adjacent branch pair, whether the up-transition from pair p+1
    /// to p applies Gaussian modulation after its transposed convolution.
    /// None modulates all of them.
    pub modulated_ups: Option<Vec<bool>>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            branches: vec![
                BranchSpec { channels: 48, divisor: 4 },
                BranchSpec { channels: 96, divisor: 8 },
            ],
            num_exchange_blocks: 2,
            lite: false,
            gdm: GdmConfig::default(),
            modulated_ups: None,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("the backbone needs at least one branch".into()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            if b.channels == 0 {
                return Err(Error::Config(format!("branch {i} has zero channels")));
            }
            if !b.divisor.is_power_of_two() {
                return Err(Error::Config(format!(
                    "branch {i} divisor {} is not a power of two",
                    b.divisor
                )));
            }
        }
        if self.branches[0].divisor != 4 {
            return Err(Error::Config(format!(
                "the first branch must sit at divisor 4 (the stem downsamples twice), got {}",
                self.branches[0].divisor
            )));
        }
        for pair in self.branches.windows(2) {
            if pair[1].divisor <= pair[0].divisor {
                return Err(Error::Config(
                    "branch divisors must be strictly increasing".into(),
                ));
            }
        }
        if self.num_exchange_blocks == 0 {
            return Err(Error::Config("num_exchange_blocks must be positive".into()));
        }
        if let Some(m) = &self.modulated_ups {
            if m.len() != self.branches.len().saturating_sub(1) {
                return Err(Error::Config(format!(
                    "modulated_ups has {} entries but there are {} adjacent branch pairs",
                    m.len(),
                    self.branches.len().saturating_sub(1)
                )));
            }
        }
        self.gdm.validate()?;
        let up = &self.gdm.upsample;
        // Every up stage must double the spatial size exactly, for any
        // input extent: (h-1)*s - 2p + k + op = 2h forces the relation
        // below.
        if up.stride != 2 || up.kernel + up.output_padding != 2 * up.padding + 2 {
            return Err(Error::Config(format!(
                "up-transition geometry (kernel {}, stride {}, padding {}, output_padding {}) does not double the spatial size",
                up.kernel, up.stride, up.padding, up.output_padding
            )));
        }
        Ok(())
    }

    fn modulated(&self, pair: usize) -> bool {
        self.modulated_ups.as_ref().map_or(true, |m| m[pair])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub wasp: WaspConfig,
    /// Expected image size as (height, width).
    pub input_size: (usize, usize),
    /// Image-to-heatmap downscale; must equal the first branch divisor.
    pub heatmap_stride: usize,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            wasp: WaspConfig::default(),
            input_size: (256, 256),
            heatmap_stride: 4,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.wasp.validate()?;
        let coarsest = self.backbone.branches.last().unwrap().divisor;
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % coarsest != 0 || w % coarsest != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by the coarsest branch divisor {coarsest}"
            )));
        }
        if self.heatmap_stride != self.backbone.branches[0].divisor {
            return Err(Error::Config(format!(
                "heatmap_stride {} must equal the first branch divisor {}",
                self.heatmap_stride, self.backbone.branches[0].divisor
            )));
        }
        if self.wasp.branch_channels != self.backbone.branches[0].channels {
            return Err(Error::Config(format!(
                "the head is {} channels wide but the first branch produces {}",
                self.wasp.branch_channels, self.backbone.branches[0].channels
            )));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.wasp.num_joints
    }

    /// Heatmap size produced for this input size.
    pub fn heatmap_size(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.heatmap_stride,
            self.input_size.1 / self.heatmap_stride,
        )
    }
}

/// Per-channel affine applied after a convolution, the artifact's stand-in
/// for a normalization layer: no batch statistics, so training and
/// evaluation behave identically.
#[derive(Debug, Clone)]
pub struct AffineNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl AffineNorm {
    fn identity(channels: usize) -> Self {
        Self {
            scale: Tensor::filled(vec![channels], 1.0),
            shift: Tensor::zeros(vec![channels]),
        }
    }
}

/// Convolution, affine norm, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ConvLayer,
    pub norm: AffineNorm,
    pub relu: bool,
}

impl ConvBlock {
    fn new(
        cin: usize,
        cout: usize,
        stride: usize,
        separable: bool,
        relu: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let geom = ConvGeom::square(stride, 1, 1).unwrap();
        let conv = if separable {
            ConvLayer::random_separable(cin, cout, (3, 3), geom, rng)
        } else {
            ConvLayer::random_standard(cin, cout, (3, 3), geom, rng)
        };
        Self { conv, norm: AffineNorm::identity(cout), relu }
    }

    fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = self.conv.named_tensors();
        out.push(("scale", &self.norm.scale));
        out.push(("shift", &self.norm.shift));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out = self.conv.named_tensors_mut();
        out.push(("scale", &mut self.norm.scale));
        out.push(("shift", &mut self.norm.shift));
        out
    }
}

/// Chain of 2x upsampling stages from a coarser branch to a finer one.
/// Each stage is a transposed convolution, optionally followed by
/// Gaussian modulation.
#[derive(Debug, Clone)]
pub struct UpTransition {
    pub stages: Vec<ConvLayer>,
    pub modulated: bool,
}

/// One exchange block: a 3x3 convolution per branch, then fusion between
/// adjacent branches (down via strided convolution, up via `UpTransition`)
/// summed into each branch and passed through ReLU.
#[derive(Debug, Clone)]
pub struct ExchangeBlock {
    pub branch_convs: Vec<ConvBlock>,
    /// downs[p]: chain taking branch p to branch p+1's scale.
    pub downs: Vec<Vec<ConvBlock>>,
    /// ups[p]: chain taking branch p+1 to branch p's scale.
    pub ups: Vec<UpTransition>,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub stem: [ConvBlock; 2],
    /// entries[j] creates branch j+1 from the stem output by repeated
    /// stride-2 convolutions.
    pub entries: Vec<Vec<ConvBlock>>,
    pub blocks: Vec<ExchangeBlock>,
    pub wasp: WaspWeights,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub weights: ModelWeights,
}

/// Number of 2x steps between two power-of-two divisors.
fn halvings(from: usize, to: usize) -> usize {
    (to / from).trailing_zeros() as usize
}

impl Model {
    /// Builds a model with freshly initialized weights, deterministic in
    /// `cfg.seed`. The initialization order is part of the reproducibility
    /// contract: stem, entry chains, exchange blocks, head.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let bb = &cfg.backbone;
        let lite = bb.lite;
        let c0 = bb.branches[0].channels;

        let stem = [
            ConvBlock::new(IMAGE_CHANNELS, c0, 2, lite, true, &mut rng),
            ConvBlock::new(c0, c0, 2, lite, true, &mut rng),
        ];

        let mut entries = Vec::new();
        for spec in &bb.branches[1..] {
            let mut chain = Vec::new();
            let mut cin = c0;
            for _ in 0..halvings(4, spec.divisor) {
                chain.push(ConvBlock::new(cin, spec.channels, 2, lite, true, &mut rng));
                cin = spec.channels;
            }
            entries.push(chain);
        }

        let up_geom = &bb.gdm.upsample;
        let mut blocks = Vec::new();
        for _ in 0..bb.num_exchange_blocks {
            let branch_convs = bb
                .branches
                .iter()
                .map(|s| ConvBlock::new(s.channels, s.channels, 1, lite, true, &mut rng))
                .collect();
            let mut downs = Vec::new();
            let mut ups = Vec::new();
            for pair in bb.branches.windows(2) {
                let (fine, coarse) = (pair[0], pair[1]);
                let steps = halvings(fine.divisor, coarse.divisor);
                let mut down = Vec::new();
                let mut cin = fine.channels;
                for _ in 0..steps {
                    down.push(ConvBlock::new(cin, coarse.channels, 2, lite, false, &mut rng));
                    cin = coarse.channels;
                }
                downs.push(down);
                let mut up = Vec::new();
                let mut cin = coarse.channels;
                for _ in 0..steps {
                    up.push(ConvLayer::random_transposed(
                        cin,
                        fine.channels,
                        (up_geom.kernel, up_geom.kernel),
                        ConvGeom::square(up_geom.stride, 1, up_geom.padding)?,
                        &mut rng,
                    ));
                    cin = fine.channels;
                }
                ups.push(UpTransition { stages: up, modulated: true });
            }
            for (p, up) in ups.iter_mut().enumerate() {
                up.modulated = bb.modulated(p);
            }
            blocks.push(ExchangeBlock { branch_convs, downs, ups });
        }

        let wasp = WaspWeights::init(&cfg.wasp, c0, &mut rng)?;
        Ok(Self {
            cfg,
            weights: ModelWeights { stem, entries, blocks, wasp },
        })
    }

    /// Heatmaps for a batch of images, shape [N, K, H/stride, W/stride].
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let vars = ModelVars::bind(&mut tape, &self.weights);
        let out = vars.forward_on(&mut tape, &self.cfg, x)?;
        Ok(tape.take_value(out))
    }

    /// Loss and the gradient of every parameter, aligned with
    /// `named_parameters` order. Parameters the loss does not reach (for
    /// example when every joint is masked) get zero gradients.
    pub fn gradients(
        &self,
        image: &Tensor,
        target: &Tensor,
        joint_mask: &[bool],
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let vars = ModelVars::bind(&mut tape, &self.weights);
        let out = vars.forward_on(&mut tape, &self.cfg, x)?;
        let loss = loss_on(&mut tape, out, target, joint_mask)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let params = self.weights.named_parameters();
        let vars = vars.param_vars();
        debug_assert_eq!(params.len(), vars.len());
        let out = params
            .iter()
            .zip(&vars)
            .map(|((_, p), &v)| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
            })
            .collect();
        Ok((value, out))
    }

    /// One plain gradient-descent step: w <- w - lr * g, with `grads` in
    /// `named_parameters` order as produced by `gradients`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        let mut params = self.weights.named_parameters_mut();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter_mut().zip(grads) {
            p.axpy(-lr, g).map_err(|_| {
                Error::Shape(format!("gradient shape mismatch for parameter {name}"))
            })?;
        }
        Ok(())
    }
}

impl ModelWeights {
    /// Every learned tensor with a unique stable name, in the traversal
    /// order that `ModelVars::param_vars` mirrors. Checkpoints store one
    /// file per entry.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        fn push<'a>(
            prefix: String,
            tensors: Vec<(&'static str, &'a Tensor)>,
            out: &mut Vec<(String, &'a Tensor)>,
        ) {
            for (suffix, t) in tensors {
                out.push((format!("{prefix}.{suffix}"), t));
            }
        }
        for (i, block) in self.stem.iter().enumerate() {
            push(format!("stem{i}"), block.named_tensors(), &mut out);
        }
        for (j, chain) in self.entries.iter().enumerate() {
            for (s, block) in chain.iter().enumerate() {
                push(format!("entry{}_{s}", j + 1), block.named_tensors(), &mut out);
            }
        }
        for (b, block) in self.blocks.iter().enumerate() {
            for (i, conv) in block.branch_convs.iter().enumerate() {
                push(format!("block{b}_branch{i}"), conv.named_tensors(), &mut out);
            }
            for (p, chain) in block.downs.iter().enumerate() {
                for (s, step) in chain.iter().enumerate() {
                    push(format!("block{b}_down{p}_{s}"), step.named_tensors(), &mut out);
                }
            }
            for (p, up) in block.ups.iter().enumerate() {
                for (s, stage) in up.stages.iter().enumerate() {
                    push(format!("block{b}_up{p}_{s}"), stage.named_tensors(), &mut out);
                }
            }
        }
        for (name, layer) in self.wasp.named_layers() {
            push(format!("wasp_{name}"), layer.named_tensors(), &mut out);
        }
        out
    }

    /// Mutable variant of `named_parameters`, same names and order.
    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        fn push<'a>(
            prefix: String,
            tensors: Vec<(&'static str, &'a mut Tensor)>,
            out: &mut Vec<(String, &'a mut Tensor)>,
        ) {
            for (suffix, t) in tensors {
                out.push((format!("{prefix}.{suffix}"), t));
            }
        }
        for (i, block) in self.stem.iter_mut().enumerate() {
            push(format!("stem{i}"), block.named_tensors_mut(), &mut out);
        }
        for (j, chain) in self.entries.iter_mut().enumerate() {
            for (s, block) in chain.iter_mut().enumerate() {
                push(format!("entry{}_{s}", j + 1), block.named_tensors_mut(), &mut out);
            }
        }
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (i, conv) in block.branch_convs.iter_mut().enumerate() {
                push(format!("block{b}_branch{i}"), conv.named_tensors_mut(), &mut out);
            }
            for (p, chain) in block.downs.iter_mut().enumerate() {
                for (s, step) in chain.iter_mut().enumerate() {
                    push(format!("block{b}_down{p}_{s}"), step.named_tensors_mut(), &mut out);
                }
            }
            for (p, up) in block.ups.iter_mut().enumerate() {
                for (s, stage) in up.stages.iter_mut().enumerate() {
                    push(format!("block{b}_up{p}_{s}"), stage.named_tensors_mut(), &mut out);
                }
            }
        }
        for (name, layer) in self.wasp.named_layers_mut() {
            push(format!("wasp_{name}"), layer.named_tensors_mut(), &mut out);
        }
        out
    }
}

struct ConvBlockVars {
    conv: ConvVars,
    scale: Var,
    shift: Var,
    relu: bool,
}

impl ConvBlockVars {
    fn bind(tape: &mut Tape, block: &ConvBlock) -> Self {
        Self {
            conv: ConvVars::bind(tape, &block.conv),
            scale: tape.leaf(block.norm.scale.clone()),
            shift: tape.leaf(block.norm.shift.clone()),
            relu: block.relu,
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let x = self.conv.apply(tape, x)?;
        let x = tape.channel_affine(x, self.scale, self.shift)?;
        Ok(if self.relu { tape.relu(x) } else { x })
    }

    fn param_vars(&self) -> Vec<Var> {
        let mut vars = self.conv.param_vars();
        vars.push(self.scale);
        vars.push(self.shift);
        vars
    }
}

struct UpVars {
    stages: Vec<ConvVars>,
    modulated: bool,
}

struct ExchangeBlockVars {
    branch_convs: Vec<ConvBlockVars>,
    downs: Vec<Vec<ConvBlockVars>>,
    ups: Vec<UpVars>,
}

/// The whole model bound to a tape.
pub struct ModelVars {
    stem: [ConvBlockVars; 2],
    entries: Vec<Vec<ConvBlockVars>>,
    blocks: Vec<ExchangeBlockVars>,
    wasp: WaspVars,
}

impl ModelVars {
    pub fn bind(tape: &mut Tape, w: &ModelWeights) -> Self {
        Self {
            stem: [
                ConvBlockVars::bind(tape, &w.stem[0]),
                ConvBlockVars::bind(tape, &w.stem[1]),
            ],
            entries: w
                .entries
                .iter()
                .map(|chain| chain.iter().map(|b| ConvBlockVars::bind(tape, b)).collect())
                .collect(),
            blocks: w
                .blocks
                .iter()
                .map(|block| ExchangeBlockVars {
                    branch_convs: block
                        .branch_convs
                        .iter()
                        .map(|b| ConvBlockVars::bind(tape, b))
                        .collect(),
                    downs: block
                        .downs
                        .iter()
                        .map(|chain| chain.iter().map(|b| ConvBlockVars::bind(tape, b)).collect())
                        .collect(),
                    ups: block
                        .ups
                        .iter()
                        .map(|up| UpVars {
                            stages: up.stages.iter().map(|s| ConvVars::bind(tape, s)).collect(),
                            modulated: up.modulated,
                        })
                        .collect(),
                })
                .collect(),
            wasp: WaspVars::bind(tape, &w.wasp),
        }
    }

    /// Parameter vars in `ModelWeights::named_parameters` order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for block in &self.stem {
            out.extend(block.param_vars());
        }
        for chain in &self.entries {
            for block in chain {
                out.extend(block.param_vars());
            }
        }
        for block in &self.blocks {
            for conv in &block.branch_convs {
                out.extend(conv.param_vars());
            }
            for chain in &block.downs {
                for step in chain {
                    out.extend(step.param_vars());
                }
            }
            for up in &block.ups {
                for stage in &up.stages {
                    out.extend(stage.param_vars());
                }
            }
        }
        for layer in self.wasp.layers() {
            out.extend(layer.param_vars());
        }
        out
    }

    /// Records the full forward pass on `tape` and returns the heatmap var.
    pub fn forward_on(&self, tape: &mut Tape, cfg: &ModelConfig, image: Var) -> Result<Var> {
        let (_, c, h, w) = tape.value(image).dims4("input image")?;
        if c != IMAGE_CHANNELS {
            return Err(Error::Shape(format!(
                "input image has {c} channels, expected {IMAGE_CHANNELS}"
            )));
        }
        if (h, w) != cfg.input_size {
            return Err(Error::Shape(format!(
                "input image is {h}x{w} but the model was configured for {}x{}",
                cfg.input_size.0, cfg.input_size.1
            )));
        }
        let gdm = &cfg.backbone.gdm;
        let outpad = gdm.upsample.output_padding;

        let s = self.stem[0].apply(tape, image)?;
        let f_llf = self.stem[1].apply(tape, s)?;

        let mut branches = vec![f_llf];
        for chain in &self.entries {
            let mut x = f_llf;
            for block in chain {
                x = block.apply(tape, x)?;
            }
            branches.push(x);
        }

        for block in &self.blocks {
            let transformed: Vec<Var> = block
                .branch_convs
                .iter()
                .zip(&branches)
                .map(|(conv, &x)| conv.apply(tape, x))
                .collect::<Result<_>>()?;
            let n = transformed.len();
            let mut fused = Vec::with_capacity(n);
            for i in 0..n {
                let mut acc = transformed[i];
                if i > 0 {
                    let mut x = transformed[i - 1];
                    for step in &block.downs[i - 1] {
                        x = step.apply(tape, x)?;
                    }
                    acc = tape.add(acc, x)?;
                }
                if i + 1 < n {
                    let up = &block.ups[i];
                    let mut x = transformed[i + 1];
                    for stage in &up.stages {
                        x = stage.apply_transposed(tape, x, (outpad, outpad))?;
                        if up.modulated {
                            x = tape.modulate(x, gdm.clone())?;
                        }
                    }
                    acc = tape.add(acc, x)?;
                }
                fused.push(tape.relu(acc));
            }
            branches = fused;
        }

        wasp::waspv2_on(tape, &cfg.wasp, &self.wasp, branches[0], f_llf)
    }
}

/// Mean squared difference between predicted and target heatmaps over the
/// joints whose mask entry is true, with the gradient w.r.t. the
/// prediction. Joints with a false mask entry contribute nothing to
/// either. All joints masked yields loss 0 with zero gradients.
pub fn mse_heatmap_loss(
    pred: &Tensor,
    target: &Tensor,
    joint_mask: &[bool],
) -> Result<(f64, Tensor)> {
    let (n, k, h, w) = pred.dims4("predicted heatmaps")?;
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "predicted heatmaps are {:?} but targets are {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if joint_mask.len() != k {
        return Err(Error::Shape(format!(
            "{} mask entries for {k} joints",
            joint_mask.len()
        )));
    }
    let mut grad = Tensor::zeros(pred.shape().to_vec());
    let live = joint_mask.iter().filter(|&&m| m).count();
    if live == 0 {
        return Ok((0.0, grad));
    }
    let denom = (n * live * h * w) as f64;
    let plane = h * w;
    let mut sum = 0.0;
    let (p, t, g) = (pred.data(), target.data(), grad.data_mut());
    for img in 0..n {
        for (j, &keep) in joint_mask.iter().enumerate() {
            if !keep {
                continue;
            }
            let base = (img * k + j) * plane;
            for off in base..base + plane {
                let d = p[off] - t[off];
                sum += d * d;
                g[off] = 2.0 * d / denom;
            }
        }
    }
    Ok((sum / denom, grad))
}

/// Records `mse_heatmap_loss` against fixed targets as a scalar tape node.
pub fn loss_on(tape: &mut Tape, pred: Var, target: &Tensor, joint_mask: &[bool]) -> Result<Var> {
    let (value, grad) = mse_heatmap_loss(tape.value(pred), target, joint_mask)?;
    Ok(tape.custom(
        Tensor::scalar(value),
        &[pred],
        Box::new(move |up, _| {
            let mut g = grad.clone();
            let s = up.data()[0];
            for v in g.data_mut() {
                *v *= s;
            }
            Ok(vec![g])
        }),
    ))
}

/// Step learning-rate schedule: 1e-3 until epoch 170, 1e-4 until epoch
/// 200, 1e-5 from then on.
pub fn lr_schedule(epoch: usize) -> f64 {
    if epoch < 170 {
        1e-3
    } else if epoch < 200 {
        1e-4
    } else {
        1e-5
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Parameter and FLOP totals with a per-layer breakdown. FLOPs count two
/// per multiply-accumulate plus one per bias add; activations, the affine
/// norms' elementwise work aside, and Gaussian modulation (which has no
/// learned parameters) are not counted.
#[derive(Debug, Clone, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub layers: Vec<LayerCost>,
}

/// Parameter count of a convolution layer, biases included.
pub fn conv_params(layer: &ConvLayer) -> u64 {
    layer
        .named_tensors()
        .iter()
        .map(|(_, t)| t.numel() as u64)
        .sum()
}

/// FLOPs of a gather-style convolution producing an `out_hw` map: two per
/// multiply-accumulate plus one bias add per output element. Separable
/// layers count both stages at the same output size (the stride lives in
/// the depthwise stage and the pointwise stage preserves it).
pub fn conv_flops(layer: &ConvLayer, out_hw: (usize, usize)) -> u64 {
    let area = (out_hw.0 * out_hw.1) as u64;
    let mut flops = 2 * layer.weights.numel() as u64 * area;
    if let Some(b) = &layer.bias {
        flops += b.numel() as u64 * area;
    }
    if let Some(p) = &layer.pointwise {
        flops += 2 * p.numel() as u64 * area;
    }
    if let Some(b) = &layer.pointwise_bias {
        flops += b.numel() as u64 * area;
    }
    flops
}

/// FLOPs of a transposed convolution: every input element scatters
/// through the whole kernel, so the multiply-accumulates are counted at
/// the input size.
pub fn transposed_flops(layer: &ConvLayer, in_hw: (usize, usize)) -> u64 {
    2 * layer.weights.numel() as u64 * (in_hw.0 * in_hw.1) as u64
}

fn affine_cost(name: String, channels: usize, hw: (usize, usize)) -> LayerCost {
    LayerCost {
        name,
        params: 2 * channels as u64,
        // One multiply and one add per element.
        flops: 2 * (channels * hw.0 * hw.1) as u64,
    }
}

fn block_cost(name: &str, block: &ConvBlock, out_hw: (usize, usize), rows: &mut Vec<LayerCost>) {
    rows.push(LayerCost {
        name: name.to_string(),
        params: conv_params(&block.conv),
        flops: conv_flops(&block.conv, out_hw),
    });
    rows.push(affine_cost(
        format!("{name}.norm"),
        block.norm.scale.numel(),
        out_hw,
    ));
}

/// Cost of one forward pass at `input_size`, per layer and in total.
/// The breakdown names match `named_parameters` prefixes.
pub fn count_cost(model: &Model, input_size: (usize, usize)) -> Result<CostReport> {
    let cfg = &model.cfg;
    let (h, w) = input_size;
    let coarsest = cfg.backbone.branches.last().unwrap().divisor;
    if h == 0 || w == 0 || h % coarsest != 0 || w % coarsest != 0 {
        return Err(Error::Config(format!(
            "cost input size {h}x{w} must be divisible by the coarsest branch divisor {coarsest}"
        )));
    }
    let weights = &model.weights;
    let at = |d: usize| (h / d, w / d);
    let mut rows = Vec::new();

    block_cost("stem0", &weights.stem[0], at(2), &mut rows);
    block_cost("stem1", &weights.stem[1], at(4), &mut rows);

    for (j, chain) in weights.entries.iter().enumerate() {
        let mut d = 4;
        for (s, block) in chain.iter().enumerate() {
            d *= 2;
            block_cost(&format!("entry{}_{s}", j + 1), block, at(d), &mut rows);
        }
    }

    let divisors: Vec<usize> = cfg.backbone.branches.iter().map(|b| b.divisor).collect();
    for (b, block) in weights.blocks.iter().enumerate() {
        for (i, conv) in block.branch_convs.iter().enumerate() {
            block_cost(&format!("block{b}_branch{i}"), conv, at(divisors[i]), &mut rows);
        }
        for (p, chain) in block.downs.iter().enumerate() {
            let mut d = divisors[p];
            for (s, step) in chain.iter().enumerate() {
                d *= 2;
                block_cost(&format!("block{b}_down{p}_{s}"), step, at(d), &mut rows);
            }
        }
        for (p, up) in block.ups.iter().enumerate() {
            let mut d = divisors[p + 1];
            for (s, stage) in up.stages.iter().enumerate() {
                rows.push(LayerCost {
                    name: format!("block{b}_up{p}_{s}"),
                    params: conv_params(stage),
                    flops: transposed_flops(stage, at(d)),
                });
                d /= 2;
            }
        }
    }

    let head_hw = at(divisors[0]);
    for (name, layer) in weights.wasp.named_layers() {
        rows.push(LayerCost {
            name: format!("wasp_{name}"),
            params: conv_params(layer),
            flops: conv_flops(layer, head_hw),
        });
    }

    Ok(CostReport {
        params: rows.iter().map(|r| r.params).sum(),
        flops: rows.iter().map(|r| r.flops).sum(),
        layers: rows,
    })
}
