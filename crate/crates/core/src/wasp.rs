//! Waterfall atrous pyramid head.
//!
//! A cascade of dilated 3x3 convolutions where each stage consumes the
//! previous stage's output, so the receptive field compounds through the
//! chain instead of restarting from the input as it would in a parallel
//! pyramid. Every stage output is summed together with a broadcast
//! global average of the input, squeezed through a 1x1 convolution, then
//! optionally fused with a low-level feature map and reduced by a chain
//! of 1x1 convolutions to one heatmap channel per joint.
//!
//! Each branch uses padding equal to its dilation, which for a 3x3
//! kernel at stride 1 preserves spatial size, so the whole head maps
//! [N, C, H, W] to [N, K, H, W].

use crate::conv::{ConvGeom, ConvLayer, ConvMode};
use crate::error::{Error, Result};
use crate::tape::{ConvVars, Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// How the low-level path joins the waterfall output: stacked along the
/// channel axis (low-level channels first) or summed elementwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Concat,
    Add,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct WaspConfig {
    /// Dilation of each cascade stage, strictly increasing.
    pub dilations: Vec<usize>,
    /// Channel width of the cascade. The head input must match it, since
    /// stage outputs and the pooled input are summed elementwise.
    pub branch_channels: usize,
    /// Width of the low-level path after its 1x1 convolution. Zero
    /// disables the path entirely.
    pub llf_channels: usize,
    /// Output heatmap channels.
    pub num_joints: usize,
    pub fusion: Fusion,
    /// Build the cascade from separable convolutions instead of standard
    /// ones. Output shapes are identical either way.
    pub separable: bool,
    /// Insert ReLU between the 1x1 convolutions after fusion. Off by
    /// default, which keeps the head linear past the cascade.
    pub relu_between_pointwise: bool,
}

impl Default for WaspConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 6, 12, 18],
            branch_channels: 48,
            llf_channels: 48,
            num_joints: 17,
            fusion: Fusion::Concat,
            separable: false,
            relu_between_pointwise: false,
        }
    }
}

impl WaspConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilations.is_empty() {
            return Err(Error::Config("the cascade needs at least one dilation".into()));
        }
        if self.dilations[0] == 0 {
            return Err(Error::Config("dilations must be positive".into()));
        }
        for pair in self.dilations.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Config(format!(
                    "dilations must be strictly increasing, got {} after {}",
                    pair[1], pair[0]
                )));
            }
        }
        if self.branch_channels == 0 {
            return Err(Error::Config("branch_channels must be positive".into()));
        }
        if self.num_joints == 0 {
            return Err(Error::Config("num_joints must be positive".into()));
        }
        if self.fusion == Fusion::Add
            && self.llf_channels != 0
            && self.llf_channels != self.branch_channels
        {
            return Err(Error::Config(format!(
                "add fusion sums the two paths elementwise, so llf_channels ({}) must equal branch_channels ({})",
                self.llf_channels, self.branch_channels
            )));
        }
        Ok(())
    }

    /// Channel count entering the first fusion convolution.
    fn fused_channels(&self) -> usize {
        match self.fusion {
            Fusion::Concat => self.branch_channels + self.llf_channels,
            Fusion::Add => self.branch_channels,
        }
    }
}

/// Receptive field of each cascade stage, one entry per dilation. A 3x3
/// kernel at dilation d spans 2d+1 pixels, and because stage i convolves
/// the previous stage's output the spans accumulate: rf_i = rf_{i-1} + 2*d_i
/// starting from rf_0 = 1.
pub fn receptive_fields(dilations: &[usize]) -> Vec<usize> {
    let mut rf = 1usize;
    dilations
        .iter()
        .map(|&d| {
            rf += 2 * d;
            rf
        })
        .collect()
}

/// All learned tensors of the head. `named_layers` fixes the order used
/// for checkpoints and gradient extraction.
#[derive(Debug, Clone)]
pub struct WaspWeights {
    /// One 3x3 convolution per dilation, each mapping branch_channels to
    /// branch_channels at padding = dilation.
    pub branches: Vec<ConvLayer>,
    /// 1x1 convolution over the aggregated cascade.
    pub post_sum: ConvLayer,
    /// 1x1 convolution over the low-level features; absent when the path
    /// is disabled.
    pub llf: Option<ConvLayer>,
    /// Two 1x1 convolutions applied after fusion.
    pub fusion: [ConvLayer; 2],
    /// Final 1x1 convolution down to num_joints channels.
    pub final_map: ConvLayer,
}

impl WaspWeights {
    /// Random initialization. `llf_in_channels` is the width of the raw
    /// low-level feature map before its 1x1 convolution; it is ignored
    /// when `cfg.llf_channels` is zero.
    pub fn init(cfg: &WaspConfig, llf_in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.branch_channels;
        let branches = cfg
            .dilations
            .iter()
            .map(|&d| {
                let geom = ConvGeom::square(1, d, d)?;
                Ok(if cfg.separable {
                    ConvLayer::random_separable(c, c, (3, 3), geom, rng)
                } else {
                    ConvLayer::random_standard(c, c, (3, 3), geom, rng)
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let llf = if cfg.llf_channels > 0 {
            if llf_in_channels == 0 {
                return Err(Error::Config(
                    "low-level input width must be positive when llf_channels > 0".into(),
                ));
            }
            Some(ConvLayer::random_pointwise(llf_in_channels, cfg.llf_channels, rng))
        } else {
            None
        };
        Ok(Self {
            branches,
            post_sum: ConvLayer::random_pointwise(c, c, rng),
            llf,
            fusion: [
                ConvLayer::random_pointwise(cfg.fused_channels(), c, rng),
                ConvLayer::random_pointwise(c, c, rng),
            ],
            final_map: ConvLayer::random_pointwise(c, cfg.num_joints, rng),
        })
    }

    /// Checks that the layer shapes chain consistently for `cfg`. Used
    /// after loading weights from disk.
    pub fn validate(&self, cfg: &WaspConfig) -> Result<()> {
        cfg.validate()?;
        let c = cfg.branch_channels;
        if self.branches.len() != cfg.dilations.len() {
            return Err(Error::Shape(format!(
                "{} cascade branches but {} dilations configured",
                self.branches.len(),
                cfg.dilations.len()
            )));
        }
        for (i, (layer, &d)) in self.branches.iter().zip(&cfg.dilations).enumerate() {
            let what = format!("cascade branch {i}");
            if layer.in_channels() != c || layer.out_channels() != c {
                return Err(Error::Shape(format!(
                    "{what} maps {} -> {} channels, expected {c} -> {c}",
                    layer.in_channels(),
                    layer.out_channels()
                )));
            }
            if layer.kernel() != (3, 3) {
                return Err(Error::Shape(format!("{what} must have a 3x3 kernel")));
            }
            let want = ConvGeom::square(1, d, d)?;
            if layer.geom != want {
                return Err(Error::Shape(format!(
                    "{what} must use stride 1, dilation {d} and padding {d}"
                )));
            }
            if (layer.mode == ConvMode::Separable) != cfg.separable {
                return Err(Error::Shape(format!(
                    "{what} mode does not match the separable flag"
                )));
            }
        }
        expect_pointwise(&self.post_sum, c, c, "post-sum convolution")?;
        match (&self.llf, cfg.llf_channels) {
            (None, 0) => {}
            (Some(_), 0) => {
                return Err(Error::Shape(
                    "low-level convolution present but llf_channels is 0".into(),
                ));
            }
            (None, want) => {
                return Err(Error::Shape(format!(
                    "low-level convolution missing but llf_channels is {want}"
                )));
            }
            (Some(layer), want) => {
                if layer.mode != ConvMode::Pointwise || layer.out_channels() != want {
                    return Err(Error::Shape(format!(
                        "low-level convolution must be 1x1 producing {want} channels"
                    )));
                }
            }
        }
        expect_pointwise(&self.fusion[0], cfg.fused_channels(), c, "first fusion convolution")?;
        expect_pointwise(&self.fusion[1], c, c, "second fusion convolution")?;
        expect_pointwise(&self.final_map, c, cfg.num_joints, "final joint convolution")?;
        Ok(())
    }

    pub fn named_layers(&self) -> Vec<(String, &ConvLayer)> {
        let mut out: Vec<(String, &ConvLayer)> = self
            .branches
            .iter()
            .enumerate()
            .map(|(i, l)| (format!("branch{i}"), l))
            .collect();
        out.push(("post_sum".into(), &self.post_sum));
        if let Some(l) = &self.llf {
            out.push(("llf".into(), l));
        }
        out.push(("fusion0".into(), &self.fusion[0]));
        out.push(("fusion1".into(), &self.fusion[1]));
        out.push(("final_map".into(), &self.final_map));
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut ConvLayer)> {
        let mut out: Vec<(String, &mut ConvLayer)> = self
            .branches
            .iter_mut()
            .enumerate()
            .map(|(i, l)| (format!("branch{i}"), l))
            .collect();
        out.push(("post_sum".into(), &mut self.post_sum));
        if let Some(l) = &mut self.llf {
            out.push(("llf".into(), l));
        }
        let [f0, f1] = &mut self.fusion;
        out.push(("fusion0".into(), f0));
        out.push(("fusion1".into(), f1));
        out.push(("final_map".into(), &mut self.final_map));
        out
    }
}

fn expect_pointwise(layer: &ConvLayer, cin: usize, cout: usize, what: &str) -> Result<()> {
    if layer.mode != ConvMode::Pointwise
        || layer.in_channels() != cin
        || layer.out_channels() != cout
    {
        return Err(Error::Shape(format!(
            "{what} must be a 1x1 convolution mapping {cin} -> {cout} channels, got a {}x{} one mapping {} -> {}",
            layer.kernel().0,
            layer.kernel().1,
            layer.in_channels(),
            layer.out_channels()
        )));
    }
    Ok(())
}

/// The head's weights bound to a tape, in `named_layers` order.
pub struct WaspVars {
    pub branches: Vec<ConvVars>,
    pub post_sum: ConvVars,
    pub llf: Option<ConvVars>,
    pub fusion: [ConvVars; 2],
    pub final_map: ConvVars,
}

impl WaspVars {
    pub fn bind(tape: &mut Tape, weights: &WaspWeights) -> Self {
        Self {
            branches: weights
                .branches
                .iter()
                .map(|l| ConvVars::bind(tape, l))
                .collect(),
            post_sum: ConvVars::bind(tape, &weights.post_sum),
            llf: weights.llf.as_ref().map(|l| ConvVars::bind(tape, l)),
            fusion: [
                ConvVars::bind(tape, &weights.fusion[0]),
                ConvVars::bind(tape, &weights.fusion[1]),
            ],
            final_map: ConvVars::bind(tape, &weights.final_map),
        }
    }

    /// The bound layers in the same order as `WaspWeights::named_layers`.
    pub fn layers(&self) -> Vec<&ConvVars> {
        let mut out: Vec<&ConvVars> = self.branches.iter().collect();
        out.push(&self.post_sum);
        if let Some(l) = &self.llf {
            out.push(l);
        }
        out.push(&self.fusion[0]);
        out.push(&self.fusion[1]);
        out.push(&self.final_map);
        out
    }
}

/// Cascade, pooled-context sum and post-sum squeeze, recorded on `tape`.
///
/// Stage i convolves stage i-1's output (stage 0 being the input), all
/// stage outputs are summed, the broadcast global average of the input
/// is added, and a 1x1 convolution mixes the result.
pub fn waterfall_on(tape: &mut Tape, cfg: &WaspConfig, vars: &WaspVars, f0: Var) -> Result<Var> {
    let (_, c, h, w) = tape.value(f0).dims4("waterfall input")?;
    if c != cfg.branch_channels {
        return Err(Error::Shape(format!(
            "waterfall input has {c} channels but the cascade is {} channels wide",
            cfg.branch_channels
        )));
    }
    if vars.branches.is_empty() {
        return Err(Error::Config("the cascade needs at least one branch".into()));
    }
    let mut stage = f0;
    let mut sum: Option<Var> = None;
    for branch in &vars.branches {
        stage = branch.apply(tape, stage)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, stage)?,
            None => stage,
        });
    }
    let pooled = tape.avg_pool_global(f0)?;
    let context = tape.broadcast_hw(pooled, h, w)?;
    let aggregate = tape.add(sum.expect("at least one branch"), context)?;
    vars.post_sum.apply(tape, aggregate)
}

/// Full head on `tape`: waterfall over `f0`, fusion with the low-level
/// path, then the 1x1 chain down to joint channels.
pub fn waspv2_on(
    tape: &mut Tape,
    cfg: &WaspConfig,
    vars: &WaspVars,
    f0: Var,
    f_llf: Var,
) -> Result<Var> {
    let (n0, _, h0, w0) = tape.value(f0).dims4("waterfall input")?;
    let (n1, _, h1, w1) = tape.value(f_llf).dims4("low-level features")?;
    if n0 != n1 || h0 != h1 || w0 != w1 {
        return Err(Error::Shape(format!(
            "low-level features have batch {n1} and spatial size {h1}x{w1} but the waterfall input has batch {n0} and {h0}x{w0}; the head does no resizing"
        )));
    }
    let cascade = waterfall_on(tape, cfg, vars, f0)?;
    let fused = match &vars.llf {
        None => cascade,
        Some(llf) => {
            let p = llf.apply(tape, f_llf)?;
            match cfg.fusion {
                Fusion::Concat => tape.concat_channels(&[p, cascade])?,
                Fusion::Add => tape.add(p, cascade)?,
            }
        }
    };
    let mut x = vars.fusion[0].apply(tape, fused)?;
    if cfg.relu_between_pointwise {
        x = tape.relu(x);
    }
    x = vars.fusion[1].apply(tape, x)?;
    if cfg.relu_between_pointwise {
        x = tape.relu(x);
    }
    vars.final_map.apply(tape, x)
}

/// Waterfall sub-expression as a pure function of tensors.
pub fn waterfall(f0: &Tensor, cfg: &WaspConfig, weights: &WaspWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(f0.clone());
    let vars = WaspVars::bind(&mut tape, weights);
    let out = waterfall_on(&mut tape, cfg, &vars, x)?;
    Ok(tape.take_value(out))
}

/// Full head as a pure function of tensors: [N, C, H, W] low/high inputs
/// in, [N, num_joints, H, W] heatmaps out.
pub fn waspv2_forward(
    f0: &Tensor,
    f_llf: &Tensor,
    cfg: &WaspConfig,
    weights: &WaspWeights,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(f0.clone());
    let l = tape.leaf(f_llf.clone());
    let vars = WaspVars::bind(&mut tape, weights);
    let out = waspv2_on(&mut tape, cfg, &vars, x, l)?;
    Ok(tape.take_value(out))
}
