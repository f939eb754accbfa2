//! Resolution reconstruction network: a multi-kernel encoder whose
//! perception branches are fused by softmax attention weights, followed by
//! two structurally identical decoders that reconstruct an HR and an LR
//! version of any input.
//!
//! Encoder layer `i` of every branch has `widths[i]` output channels and
//! stride `strides[i]`; exactly two layers must have stride 2 so the two
//! stride-2 deconvolutions of each decoder restore the input size. Encoder
//! activations at `skip_taps` are fused with the same attention weights and
//! added to the decoder stage of matching resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::{BatchNorm, Conv, Deconv};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const GROUP: ParamGroup = ParamGroup::Mse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel_sizes: Vec<usize>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    /// Zero-based encoder layer indices whose outputs feed the decoders.
    pub skip_taps: Vec<usize>,
    /// Hidden widths of the attention branch; its last layer always emits
    /// one logit map per perception branch.
    pub attention_widths: Vec<usize>,
    pub attention: bool,
}

impl EncoderConfig {
    pub fn multi_kernel() -> Self {
        Self {
            kernel_sizes: vec![1, 3, 5],
            widths: vec![32, 32, 64, 64, 128, 128, 128, 128],
            strides: vec![1, 2, 1, 1, 2, 1, 1, 1],
            skip_taps: vec![0, 3],
            attention_widths: vec![16, 16],
            attention: true,
        }
    }

    /// Four-layer variant with uniform width, for tests and desk-scale runs.
    pub fn compact(width: usize) -> Self {
        Self {
            kernel_sizes: vec![1, 3, 5],
            widths: vec![width; 4],
            strides: vec![1, 2, 1, 2],
            skip_taps: vec![0, 2],
            attention_widths: vec![width, width],
            attention: true,
        }
    }

    /// The same encoder with one 3×3 perception branch and no attention.
    pub fn into_single_branch(self) -> Self {
        Self {
            kernel_sizes: vec![3],
            attention: false,
            ..self
        }
    }

    /// One 3×3 perception branch without attention.
    pub fn single_branch() -> Self {
        Self {
            kernel_sizes: vec![3],
            attention: false,
            ..Self::multi_kernel()
        }
    }

    /// Resolution level (number of halvings) after each layer.
    fn levels(&self) -> Vec<usize> {
        self.strides
            .iter()
            .scan(0, |lvl, &s| {
                *lvl += usize::from(s == 2);
                Some(*lvl)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd, got {:?}", self.kernel_sizes));
        }
        if self.attention && self.kernel_sizes.len() < 2 {
            return bad("attention needs at least two perception branches".into());
        }
        if !self.attention && self.kernel_sizes.len() != 1 {
            return bad("without attention the encoder has exactly one branch".into());
        }
        if self.attention && self.attention_widths.len() != 2 {
            return bad("attention branch has 3 conv layers (2 hidden widths)".into());
        }
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad("encoder widths and strides must be non-empty and equally long".into());
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) || self.strides.iter().filter(|&&s| s == 2).count() != 2 {
            return bad(format!("encoder needs exactly two stride-2 layers, got {:?}", self.strides));
        }
        let levels = self.levels();
        let mut used = [false; 2];
        for &t in &self.skip_taps {
            let Some(&lvl) = levels.get(t) else {
                return bad(format!("skip tap {t} beyond {} layers", levels.len()));
            };
            if lvl > 1 || std::mem::replace(&mut used[lvl], true) {
                return bad(format!("skip tap {t} has no free decoder stage at its resolution"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output channels of the two deconvolution layers.
    pub deconv_channels: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrnConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl RrnConfig {
    /// Decoder widths matched to the encoder's skip taps.
    pub fn from_encoder(encoder: EncoderConfig) -> Self {
        let levels = encoder.levels();
        let width_at = |lvl: usize| {
            encoder
                .skip_taps
                .iter()
                .find(|&&t| levels[t] == lvl)
                .map(|&t| encoder.widths[t])
                .unwrap_or_else(|| encoder.widths[levels.iter().position(|&l| l == lvl).unwrap_or(0)])
        };
        let decoder = DecoderConfig {
            deconv_channels: [width_at(1), width_at(0)],
        };
        Self { encoder, decoder }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        self.encoder.validate()?;
        if height % 4 != 0 || width % 4 != 0 {
            return Err(Error::Config(format!("image size {height}x{width} must be divisible by 4")));
        }
        let levels = self.encoder.levels();
        for &t in &self.encoder.skip_taps {
            let stage = 1 - levels[t];
            if self.decoder.deconv_channels[stage] != self.encoder.widths[t] {
                return Err(Error::Config(format!(
                    "skip tap {t} has {} channels but decoder stage {stage} has {}",
                    self.encoder.widths[t], self.decoder.deconv_channels[stage]
                )));
            }
        }
        Ok(())
    }
}

impl Default for RrnConfig {
    fn default() -> Self {
        Self::from_encoder(EncoderConfig::multi_kernel())
    }
}

#[derive(Debug, Clone)]
struct Attention {
    convs: [Conv; 3],
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct Decoder {
    deconvs: [Deconv; 2],
    out: Conv,
}

/// Graph handles of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub fused: Var,
    /// `(resolution level, fused tap)` pairs.
    pub skips: Vec<(usize, Var)>,
    /// `[N, branches]` attention weights, absent for single-branch encoders.
    pub weights: Option<Var>,
    pub branch_outputs: Vec<Var>,
}

/// Tensor-level encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub fused: Tensor,
    pub skips: Vec<(usize, Tensor)>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionPair {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct Rrn {
    cfg: RrnConfig,
    levels: Vec<usize>,
    branches: Vec<Vec<Conv>>,
    attention: Option<Attention>,
    hr_decoder: Decoder,
    lr_decoder: Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Hr,
    Lr,
}

impl Rrn {
    pub fn new<R: Rng>(cfg: RrnConfig, height: usize, width: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate(height, width)?;
        let enc = &cfg.encoder;
        let branches = enc
            .kernel_sizes
            .iter()
            .enumerate()
            .map(|(b, &k)| {
                let mut inp = 3;
                enc.widths
                    .iter()
                    .zip(&enc.strides)
                    .enumerate()
                    .map(|(i, (&w, &s))| {
                        let name = format!("rrn.encoder.branch{b}.conv{i}");
                        let c = Conv::new(store, &name, GROUP, inp, w, k, s, true, rng);
                        inp = w;
                        c
                    })
                    .collect()
            })
            .collect();
        let attention = enc.attention.then(|| {
            let [a1, a2] = [enc.attention_widths[0], enc.attention_widths[1]];
            let kk = enc.kernel_sizes.len();
            let name = "rrn.encoder.attention";
            Attention {
                convs: [
                    Conv::new(store, &format!("{name}.conv0"), GROUP, 3, a1, 3, 2, true, rng),
                    Conv::new(store, &format!("{name}.conv1"), GROUP, a1, a2, 3, 2, true, rng),
                    Conv::with_std(store, &format!("{name}.conv2"), GROUP, a2, kk, 3, 1, true, 0.01, rng),
                ],
                bn: BatchNorm::new(store, &format!("{name}.bn"), GROUP, kk),
            }
        });
        let bottom = *enc.widths.last().expect("validated widths");
        let mut decoder = |name: &str| {
            let [c1, c2] = cfg.decoder.deconv_channels;
            let out_std = (1.0 / (c2 * 9) as f64).sqrt();
            Decoder {
                deconvs: [
                    Deconv::new(store, &format!("rrn.{name}.deconv0"), GROUP, bottom, c1, rng),
                    Deconv::new(store, &format!("rrn.{name}.deconv1"), GROUP, c1, c2, rng),
                ],
                out: Conv::with_std(store, &format!("rrn.{name}.out"), GROUP, c2, 3, 3, 1, true, out_std, rng),
            }
        };
        let hr_decoder = decoder("hr_decoder");
        let lr_decoder = decoder("lr_decoder");
        Ok(Self {
            levels: cfg.encoder.levels(),
            cfg,
            branches,
            attention,
            hr_decoder,
            lr_decoder,
        })
    }

    pub fn config(&self) -> &RrnConfig {
        &self.cfg
    }

    pub fn is_single_branch(&self) -> bool {
        self.attention.is_none()
    }

    /// Encodes a `[N, 3, H, W]` batch. Fails with a numeric fault naming
    /// the first encoder layer that produced a non-finite activation.
    pub fn encode_vars(&self, g: &mut Graph, x: Var) -> Result<EncodedVars> {
        let mut outputs = Vec::with_capacity(self.branches.len());
        let mut taps: Vec<Vec<(usize, Var)>> = Vec::with_capacity(self.branches.len());
        for (b, layers) in self.branches.iter().enumerate() {
            let mut h = x;
            let mut branch_taps = Vec::new();
            for (i, conv) in layers.iter().enumerate() {
                h = conv.forward(g, h, Activation::Relu)?;
                if !g.value(h).all_finite() {
                    return Err(Error::NumericFault {
                        stage: format!("encoder branch {b}"),
                        layer: i,
                    });
                }
                if self.cfg.encoder.skip_taps.contains(&i) {
                    branch_taps.push((self.levels[i], h));
                }
            }
            outputs.push(h);
            taps.push(branch_taps);
        }
        let Some(att) = &self.attention else {
            return Ok(EncodedVars {
                fused: outputs[0],
                skips: taps.swap_remove(0),
                weights: None,
                branch_outputs: outputs,
            });
        };
        let mut a = x;
        for (i, conv) in att.convs.iter().enumerate() {
            let act = if i < 2 { Activation::Relu } else { Activation::Identity };
            a = conv.forward(g, a, act)?;
        }
        let a = att.bn.forward(g, a)?;
        let logits = g.global_avg_pool(a)?;
        if !g.value(logits).all_finite() {
            return Err(Error::NumericFault {
                stage: "encoder attention".into(),
                layer: 3,
            });
        }
        let weights = g.softmax_rows(logits)?;
        let fused = g.mix(weights, &outputs)?;
        let mut skips = Vec::with_capacity(taps[0].len());
        for t in 0..taps[0].len() {
            let per_branch: Vec<Var> = taps.iter().map(|bt| bt[t].1).collect();
            skips.push((taps[0][t].0, g.mix(weights, &per_branch)?));
        }
        Ok(EncodedVars {
            fused,
            skips,
            weights: Some(weights),
            branch_outputs: outputs,
        })
    }

    pub fn decode_vars(&self, g: &mut Graph, enc: &EncodedVars, kind: DecoderKind) -> Result<Var> {
        self.decode_parts(g, enc.fused, &enc.skips, kind)
    }

    fn decode_parts(&self, g: &mut Graph, fused: Var, skips: &[(usize, Var)], kind: DecoderKind) -> Result<Var> {
        let dec = match kind {
            DecoderKind::Hr => &self.hr_decoder,
            DecoderKind::Lr => &self.lr_decoder,
        };
        let mut h = fused;
        for (stage, deconv) in dec.deconvs.iter().enumerate() {
            h = deconv.forward(g, h, Activation::Relu)?;
            let level = 1 - stage;
            if let Some(&(_, s)) = skips.iter().find(|(l, _)| *l == level) {
                if g.value(s).shape() != g.value(h).shape() {
                    return Err(Error::Config(format!(
                        "skip tensor {:?} does not match decoder stage {stage} output {:?}",
                        g.value(s).shape(),
                        g.value(h).shape()
                    )));
                }
                h = g.add(h, s)?;
            }
        }
        let out = dec.out.forward(g, h, Activation::Identity)?;
        Ok(g.sigmoid(out))
    }

    /// Both reconstructions of a `[N, 3, H, W]` batch.
    pub fn forward_vars(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let enc = self.encode_vars(g, x)?;
        let hr = self.decode_vars(g, &enc, DecoderKind::Hr)?;
        let lr = self.decode_vars(g, &enc, DecoderKind::Lr)?;
        Ok((hr, lr))
    }

    fn image_batch(img: &ImageTensor) -> Result<Tensor> {
        let t = img.tensor();
        t.clone().reshape(&[1, t.dim(0), t.dim(1), t.dim(2)])
    }

    /// Encodes one image; the resolution tag is ignored.
    pub fn encode(&self, store: &ParamStore, img: &ImageTensor) -> Result<EncoderOutput> {
        let mut g = Graph::new(store, false);
        let x = g.input(Self::image_batch(img)?);
        let enc = self.encode_vars(&mut g, x)?;
        let strip = |t: &Tensor| {
            let s = t.shape()[1..].to_vec();
            t.clone().reshape(&s)
        };
        Ok(EncoderOutput {
            fused: strip(g.value(enc.fused))?,
            skips: enc
                .skips
                .iter()
                .map(|&(l, v)| Ok((l, strip(g.value(v))?)))
                .collect::<Result<_>>()?,
            weights: enc.weights.map(|w| g.value(w).data().to_vec()),
        })
    }

    /// Encoder of the single-branch ablation; fails on a multi-kernel model.
    pub fn single_branch_encode(&self, store: &ParamStore, img: &ImageTensor) -> Result<EncoderOutput> {
        if !self.is_single_branch() {
            return Err(Error::Config("model uses the multi-kernel encoder".into()));
        }
        self.encode(store, img)
    }

    fn decode(&self, store: &ParamStore, enc: &EncoderOutput, kind: DecoderKind) -> Result<ImageTensor> {
        let mut g = Graph::new(store, false);
        let lift = |t: &Tensor| {
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        };
        let fused = g.input(lift(&enc.fused)?);
        let skips = enc
            .skips
            .iter()
            .map(|(l, t)| Ok((*l, g.input(lift(t)?))))
            .collect::<Result<Vec<_>>>()?;
        let out = self.decode_parts(&mut g, fused, &skips, kind)?;
        let t = g.value(out);
        let img = t.clone().reshape(&t.shape()[1..])?;
        ImageTensor::new(img, crate::imaging::ResolutionTag::Unknown)
    }

    pub fn decode_hr(&self, store: &ParamStore, enc: &EncoderOutput) -> Result<ImageTensor> {
        self.decode(store, enc, DecoderKind::Hr)
    }

    pub fn decode_lr(&self, store: &ParamStore, enc: &EncoderOutput) -> Result<ImageTensor> {
        self.decode(store, enc, DecoderKind::Lr)
    }

    /// HR and LR reconstructions of one image; identical code path for any
    /// resolution tag.
    pub fn reconstruct(&self, store: &ParamStore, img: &ImageTensor) -> Result<ReconstructionPair> {
        let mut g = Graph::new(store, false);
        let x = g.input(Self::image_batch(img)?);
        let (hr, lr) = self.forward_vars(&mut g, x)?;
        let to_img = |v: Var| -> Result<ImageTensor> {
            let t = g.value(v);
            ImageTensor::new(t.clone().reshape(&t.shape()[1..])?, crate::imaging::ResolutionTag::Unknown)
        };
        Ok(ReconstructionPair {
            hr: to_img(hr)?,
            lr: to_img(lr)?,
        })
    }
}

#[cfg(test)]
mod tests;
