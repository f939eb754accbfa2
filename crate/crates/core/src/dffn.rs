//! Dual feature fusion network: two stripe-based extractors with identical
//! structure and separate weights, one for reconstructed HR images and one
//! for reconstructed LR images, plus the per-sub-feature identity heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor, ResolutionTag, CHANNELS};
use crate::nn::{BatchNorm, Conv, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::rrn::ReconstructionPair;
use crate::tensor::Tensor;

pub const STRIPES: usize = 4;
pub const LOCAL_DIM: usize = 256;
pub const GLOBAL_DIM: usize = 512;
pub const SUB_FEATURES: usize = STRIPES + 1;
/// Dimension `d` of one branch's feature.
pub const FEATURE_DIM: usize = STRIPES * LOCAL_DIM + GLOBAL_DIM;
pub const JOINT_DIM: usize = 2 * FEATURE_DIM;
pub const HEAD_INIT_STD: f64 = 0.001;
/// Per-channel statistics the backbone input is standardized with.
pub const PIXEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PIXEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

const GROUP: ParamGroup = ParamGroup::Reid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Branch {
    Hr,
    Lr,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Hr, Branch::Lr];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Hr => "hr",
            Self::Lr => "lr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    /// Plain conv + ReLU stack.
    Stub {
        widths: Vec<usize>,
        strides: Vec<usize>,
        kernel: usize,
    },
    /// Bottleneck residual network; `blocks = [3, 4, 6, 3]` with base width
    /// 64 is ResNet-50. The last stage keeps stride 1.
    ResNet { blocks: [usize; 4], base_width: usize },
}

impl BackboneConfig {
    pub fn stub() -> Self {
        Self::Stub {
            widths: vec![8, 16, 32, 32],
            strides: vec![2, 2, 2, 1],
            kernel: 3,
        }
    }

    pub fn resnet50() -> Self {
        Self::ResNet {
            blocks: [3, 4, 6, 3],
            base_width: 64,
        }
    }

    /// Output `(channels, height, width)` for an input of the given size.
    pub fn output_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let conv = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p).checked_sub(k).map(|v| v / s + 1);
        let shrink = |(h, w): (usize, usize), k, s, p| -> Result<(usize, usize)> {
            match (conv(h, k, s, p), conv(w, k, s, p)) {
                (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
                _ => Err(Error::Config(format!("backbone collapses a {height}x{width} input"))),
            }
        };
        match self {
            Self::Stub { widths, strides, kernel } => {
                if widths.is_empty() || widths.len() != strides.len() || kernel % 2 == 0 || strides.contains(&0) {
                    return Err(Error::Config("stub backbone needs equal-length widths/strides and an odd kernel".into()));
                }
                let mut hw = (height, width);
                for &s in strides {
                    hw = shrink(hw, *kernel, s, kernel / 2)?;
                }
                Ok((*widths.last().expect("non-empty"), hw.0, hw.1))
            }
            Self::ResNet { blocks, base_width } => {
                if *base_width == 0 || blocks.contains(&0) {
                    return Err(Error::Config("resnet needs a positive width and block counts".into()));
                }
                let mut hw = shrink((height, width), 7, 2, 3)?;
                hw = shrink(hw, 3, 2, 1)?;
                // stages 2 and 3 halve, the last stage keeps stride 1
                hw = shrink(hw, 3, 2, 1)?;
                hw = shrink(hw, 3, 2, 1)?;
                Ok((base_width * 8 * 4, hw.0, hw.1))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DffnConfig {
    pub backbone: BackboneConfig,
}

impl DffnConfig {
    /// Checks that the backbone output height splits into equal stripes.
    pub fn validate(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.backbone.output_shape(height, width)?;
        if h % STRIPES != 0 {
            return Err(Error::Config(format!(
                "backbone output height {h} is not divisible into {STRIPES} stripes"
            )));
        }
        Ok((c, h, w))
    }
}

impl Default for DffnConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::resnet50(),
        }
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: (Conv, BatchNorm),
    spatial: (Conv, BatchNorm),
    expand: (Conv, BatchNorm),
    shortcut: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let conv_bn = |g: &mut Graph, (c, bn): &(Conv, BatchNorm), x| -> Result<Var> {
            let y = c.forward(g, x, Activation::Identity)?;
            bn.forward(g, y)
        };
        let h = conv_bn(g, &self.reduce, x)?;
        let h = g.relu(h);
        let h = conv_bn(g, &self.spatial, h)?;
        let h = g.relu(h);
        let h = conv_bn(g, &self.expand, h)?;
        let s = match &self.shortcut {
            Some(sc) => conv_bn(g, sc, x)?,
            None => x,
        };
        let y = g.add(h, s)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    Stub(Vec<Conv>),
    ResNet {
        stem: (Conv, BatchNorm),
        blocks: Vec<Bottleneck>,
    },
}

impl Backbone {
    fn new<R: Rng>(cfg: &BackboneConfig, prefix: &str, store: &mut ParamStore, rng: &mut R) -> Self {
        match cfg {
            BackboneConfig::Stub { widths, strides, kernel } => {
                let mut inp = CHANNELS;
                let convs = widths
                    .iter()
                    .zip(strides)
                    .enumerate()
                    .map(|(i, (&w, &s))| {
                        let c = Conv::new(store, &format!("{prefix}.conv{i}"), GROUP, inp, w, *kernel, s, true, rng);
                        inp = w;
                        c
                    })
                    .collect();
                Self::Stub(convs)
            }
            BackboneConfig::ResNet { blocks, base_width } => {
                let conv_bn = |store: &mut ParamStore, name: String, inp, out, k, s, rng: &mut R| {
                    (
                        Conv::new(store, &format!("{name}.conv"), GROUP, inp, out, k, s, false, rng),
                        BatchNorm::new(store, &format!("{name}.bn"), GROUP, out),
                    )
                };
                let stem = conv_bn(store, format!("{prefix}.stem"), CHANNELS, *base_width, 7, 2, rng);
                let mut inp = *base_width;
                let mut out_blocks = Vec::new();
                for (stage, &count) in blocks.iter().enumerate() {
                    let mid = base_width << stage;
                    let out = mid * 4;
                    let stride = if stage == 1 || stage == 2 { 2 } else { 1 };
                    for b in 0..count {
                        let name = format!("{prefix}.layer{}.{b}", stage + 1);
                        let s = if b == 0 { stride } else { 1 };
                        let block = Bottleneck {
                            reduce: conv_bn(store, format!("{name}.reduce"), inp, mid, 1, 1, rng),
                            spatial: conv_bn(store, format!("{name}.spatial"), mid, mid, 3, s, rng),
                            expand: conv_bn(store, format!("{name}.expand"), mid, out, 1, 1, rng),
                            shortcut: (b == 0).then(|| conv_bn(store, format!("{name}.shortcut"), inp, out, 1, s, rng)),
                        };
                        out_blocks.push(block);
                        inp = out;
                    }
                }
                Self::ResNet {
                    stem,
                    blocks: out_blocks,
                }
            }
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Self::Stub(convs) => convs.iter().try_fold(x, |h, c| c.forward(g, h, Activation::Relu)),
            Self::ResNet { stem, blocks } => {
                let h = stem.0.forward(g, x, Activation::Identity)?;
                let h = stem.1.forward(g, h)?;
                let h = g.relu(h);
                let h = g.max_pool2d(h, 3, 2, 1)?;
                blocks.iter().try_fold(h, |h, b| b.forward(g, h))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Projection {
    linear: Linear,
    bn: BatchNorm,
}

impl Projection {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let std = (2.0 / inp as f64).sqrt();
        Self {
            linear: Linear::new(store, &format!("{name}.proj"), GROUP, inp, out, std, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), GROUP, out),
        }
    }

    fn forward(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let h = self.linear.forward(g, pooled)?;
        let h = self.bn.forward(g, h)?;
        Ok(g.relu(h))
    }
}

/// One stripe-based feature extractor.
#[derive(Debug, Clone)]
pub struct DffnBranch {
    branch: Branch,
    backbone: Backbone,
    locals: Vec<Projection>,
    global: Projection,
    activation_shape: (usize, usize, usize),
}

/// Graph handles of the five sub-features, each `[N, dim]`; stripes first,
/// global last.
#[derive(Debug, Clone, Copy)]
pub struct SubFeatureVars(pub [Var; SUB_FEATURES]);

impl DffnBranch {
    pub fn new<R: Rng>(
        cfg: &DffnConfig,
        branch: Branch,
        height: usize,
        width: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        let activation_shape = cfg.validate(height, width)?;
        let prefix = format!("dffn.{}", branch.as_str());
        let backbone = Backbone::new(&cfg.backbone, &format!("{prefix}.backbone"), store, rng);
        let c = activation_shape.0;
        let locals = (0..STRIPES)
            .map(|j| Projection::new(store, &format!("{prefix}.local{j}"), c, LOCAL_DIM, rng))
            .collect();
        let global = Projection::new(store, &format!("{prefix}.global"), c, GLOBAL_DIM, rng);
        Ok(Self {
            branch,
            backbone,
            locals,
            global,
            activation_shape,
        })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    /// `(channels, height, width)` of the backbone activation.
    pub fn activation_shape(&self) -> (usize, usize, usize) {
        self.activation_shape
    }

    /// Backbone activation of a `[N, 3, H, W]` batch in `[0, 1]` pixel space.
    pub fn backbone_vars(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut w = vec![0.0; CHANNELS * CHANNELS];
        for c in 0..CHANNELS {
            w[c * CHANNELS + c] = 1.0 / PIXEL_STD[c];
        }
        let w = g.input(Tensor::new(vec![CHANNELS, CHANNELS, 1, 1], w)?);
        let b = g.input(Tensor::new(vec![CHANNELS], (0..CHANNELS).map(|c| -PIXEL_MEAN[c] / PIXEL_STD[c]).collect())?);
        let x = g.conv2d(x, w, Some(b), 1, 0, Activation::Identity)?;
        self.backbone.forward(g, x)
    }

    /// Stripe and global pooling plus projections applied to a backbone
    /// activation `[N, C, H, W]`.
    pub fn head_vars(&self, g: &mut Graph, activation: Var) -> Result<SubFeatureVars> {
        let h = g.value(activation).dim(2);
        let stripe = h / STRIPES;
        let mut out = Vec::with_capacity(SUB_FEATURES);
        for (j, proj) in self.locals.iter().enumerate() {
            let pooled = g.avg_pool_rows(activation, j * stripe, (j + 1) * stripe)?;
            out.push(proj.forward(g, pooled)?);
        }
        let pooled = g.global_avg_pool(activation)?;
        out.push(self.global.forward(g, pooled)?);
        Ok(SubFeatureVars(out.try_into().expect("five sub-features")))
    }

    pub fn forward_vars(&self, g: &mut Graph, x: Var) -> Result<SubFeatureVars> {
        let act = self.backbone_vars(g, x)?;
        self.head_vars(g, act)
    }

    /// Feature of one image in inference mode.
    pub fn extract(&self, store: &ParamStore, img: &ImageTensor) -> Result<FeatureRepresentation> {
        let mut g = Graph::new(store, false);
        let x = g.input(image_batch(img)?);
        let subs = self.forward_vars(&mut g, x)?;
        let parts: Vec<&Tensor> = subs.0.iter().map(|&v| g.value(v)).collect();
        FeatureRepresentation::new(self.branch, Tensor::concat_cols(&parts)?.into_data())
    }

    /// Channel-summed backbone activation, min-max normalized and resized to
    /// the input size. A constant activation maps to zeros.
    pub fn feature_response_map(&self, store: &ParamStore, img: &ImageTensor) -> Result<ImageTensor> {
        let mut g = Graph::new(store, false);
        let x = g.input(image_batch(img)?);
        let act = self.backbone_vars(&mut g, x)?;
        let a = g.value(act);
        let (c, h, w) = (a.dim(1), a.dim(2), a.dim(3));
        let plane = h * w;
        let mut sum = vec![0.0; plane];
        for ch in 0..c {
            sum.iter_mut()
                .zip(&a.data()[ch * plane..(ch + 1) * plane])
                .for_each(|(s, v)| *s += v);
        }
        let lo = sum.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: Vec<f64> = if hi > lo {
            sum.iter().map(|v| (v - lo) / (hi - lo)).collect()
        } else {
            vec![0.0; plane]
        };
        let gray = Tensor::new(vec![CHANNELS, h, w], norm.repeat(CHANNELS))?;
        let small = ImageTensor::new(gray, ResolutionTag::Unknown)?;
        imaging::resize_bilinear(&small, img.height(), img.width())
    }
}

pub(crate) fn image_batch(img: &ImageTensor) -> Result<Tensor> {
    let t = img.tensor();
    t.clone().reshape(&[1, t.dim(0), t.dim(1), t.dim(2)])
}

/// One branch's `d`-dimensional feature: four stripe features followed by
/// the global feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRepresentation {
    branch: Branch,
    data: Vec<f64>,
}

impl FeatureRepresentation {
    pub fn new(branch: Branch, data: Vec<f64>) -> Result<Self> {
        if data.len() != FEATURE_DIM {
            return Err(Error::Shape {
                op: "feature representation",
                expected: vec![FEATURE_DIM],
                got: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFault {
                stage: format!("{} feature", branch.as_str()),
                layer: 0,
            });
        }
        Ok(Self { branch, data })
    }

    pub fn branch(&self) -> Branch {
        self.branch
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn local(&self, j: usize) -> &[f64] {
        &self.data[j * LOCAL_DIM..(j + 1) * LOCAL_DIM]
    }

    pub fn global(&self) -> &[f64] {
        &self.data[STRIPES * LOCAL_DIM..]
    }

    /// Sub-feature `i` in `0..5`, the global one last.
    pub fn sub_feature(&self, i: usize) -> &[f64] {
        if i < STRIPES {
            self.local(i)
        } else {
            self.global()
        }
    }
}

/// `[f_hr, f_lr]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature(Vec<f64>);

impl JointFeature {
    pub fn new(hr: &FeatureRepresentation, lr: &FeatureRepresentation) -> Result<Self> {
        if hr.branch != Branch::Hr || lr.branch != Branch::Lr {
            return Err(Error::Argument("joint feature needs an HR then an LR feature".into()));
        }
        Ok(Self([hr.as_slice(), lr.as_slice()].concat()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn hr(&self) -> &[f64] {
        &self.0[..FEATURE_DIM]
    }

    pub fn lr(&self) -> &[f64] {
        &self.0[FEATURE_DIM..]
    }
}

/// Both extractors.
#[derive(Debug, Clone)]
pub struct Dffn {
    pub hr: DffnBranch,
    pub lr: DffnBranch,
}

impl Dffn {
    pub fn new<R: Rng>(cfg: &DffnConfig, height: usize, width: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Ok(Self {
            hr: DffnBranch::new(cfg, Branch::Hr, height, width, store, rng)?,
            lr: DffnBranch::new(cfg, Branch::Lr, height, width, store, rng)?,
        })
    }

    pub fn branch(&self, b: Branch) -> &DffnBranch {
        match b {
            Branch::Hr => &self.hr,
            Branch::Lr => &self.lr,
        }
    }

    /// Joint feature of a reconstruction pair: the HR reconstruction through
    /// the HR branch, the LR reconstruction through the LR branch.
    pub fn extract_joint(&self, store: &ParamStore, pair: &ReconstructionPair) -> Result<JointFeature> {
        JointFeature::new(&self.hr.extract(store, &pair.hr)?, &self.lr.extract(store, &pair.lr)?)
    }
}

/// Ten independent identity classifiers, five per branch.
#[derive(Debug, Clone)]
pub struct ClassifierHeads {
    num_classes: usize,
    hr: Vec<Linear>,
    lr: Vec<Linear>,
}

impl ClassifierHeads {
    pub fn new<R: Rng>(num_classes: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("classifier heads need at least one identity".into()));
        }
        let mut make = |b: Branch| -> Vec<Linear> {
            (0..SUB_FEATURES)
                .map(|i| {
                    let dim = if i < STRIPES { LOCAL_DIM } else { GLOBAL_DIM };
                    let name = format!("heads.{}.{i}", b.as_str());
                    Linear::new(store, &name, GROUP, dim, num_classes, HEAD_INIT_STD, rng)
                })
                .collect()
        };
        let hr = make(Branch::Hr);
        let lr = make(Branch::Lr);
        Ok(Self { num_classes, hr, lr })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn heads(&self, b: Branch) -> &[Linear] {
        match b {
            Branch::Hr => &self.hr,
            Branch::Lr => &self.lr,
        }
    }

    pub fn logits_vars(&self, g: &mut Graph, b: Branch, subs: &SubFeatureVars) -> Result<Vec<Var>> {
        self.heads(b).iter().zip(subs.0).map(|(h, v)| h.forward(g, v)).collect()
    }

    /// Five logit vectors for one branch's feature.
    pub fn classify(&self, store: &ParamStore, feat: &FeatureRepresentation) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store, false);
        (0..SUB_FEATURES)
            .map(|i| {
                let sub = feat.sub_feature(i);
                let x = g.input(Tensor::new(vec![1, sub.len()], sub.to_vec())?);
                let y = self.heads(feat.branch)[i].forward(&mut g, x)?;
                Ok(g.value(y).data().to_vec())
            })
            .collect()
    }

    /// Fails when the heads were built for a different identity count.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if num_classes != self.num_classes {
            return Err(Error::Config(format!(
                "heads predict {} identities but the train split has {num_classes}",
                self.num_classes
            )));
        }
        Ok(())
    }
}
