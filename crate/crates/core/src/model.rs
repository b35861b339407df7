//! The learnable function: a convolutional backbone producing an embedding
//! `z`, three auxiliary heads (gaze, head pose, eye side), and optional
//! downstream probe heads (3-D gaze, gaze zone).

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, FeatureMap, Linear, Mlp, Param};
use crate::patch::Patch;
use crate::rng::{self, stream, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    /// Four 3x3 stride-2 conv blocks (16/32/64/d channels) and global pooling.
    TinyConv,
    /// Stem plus four bottleneck residual blocks (64/128/256/512 filters, 4x expansion).
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    /// Embedding width `d`. Tiny-conv uses it as its last block's channel
    /// count; the residual backbone requires `4 * 512 = 2048`.
    pub embedding_dim: usize,
    pub probe_widths: Vec<usize>,
    pub zones: usize,
    pub input_width: usize,
    pub input_height: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneKind::TinyConv,
            embedding_dim: 128,
            probe_widths: vec![512, 256],
            zones: 9,
            input_width: 64,
            input_height: 48,
            seed: 0,
        }
    }
}

const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const RESNET_EXPANSION: usize = 4;

impl ModelConfig {
    pub fn resnet50() -> Self {
        ModelConfig {
            backbone: BackboneKind::Resnet50,
            embedding_dim: 2048,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if self.probe_widths.contains(&0) {
            return Err(Error::Config("probe widths must be positive".into()));
        }
        if self.zones < 2 {
            return Err(Error::Config("zones must be at least 2".into()));
        }
        if self.input_width < 8 || self.input_height < 8 {
            return Err(Error::Config("input patch must be at least 8x8".into()));
        }
        if self.backbone == BackboneKind::Resnet50 && self.embedding_dim != RESNET_WIDTHS[3] * RESNET_EXPANSION {
            return Err(Error::Config(format!(
                "resnet50 embedding_dim is fixed at {}, got {}",
                RESNET_WIDTHS[3] * RESNET_EXPANSION,
                self.embedding_dim
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 over the architecture fields. The seed is excluded so
    /// checkpoints from different seeds are interchangeable.
    pub fn config_hash(&self) -> String {
        let arch = ModelConfig { seed: 0, ..self.clone() };
        let json = serde_json::to_string(&arch).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Downstream heads attachable after pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Gaze3d,
    Zone,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gaze3d => "gaze3d",
            HeadKind::Zone => "zone",
        }
    }

    pub fn parse(s: &str) -> Option<HeadKind> {
        match s {
            "gaze3d" | "gaze" => Some(HeadKind::Gaze3d),
            "zone" => Some(HeadKind::Zone),
            _ => None,
        }
    }
}

/// Stacks patches into a centered single-channel input batch.
pub fn images_to_input(patches: &[&Patch], width: usize, height: usize) -> Result<FeatureMap> {
    let mut data = Array2::<f32>::zeros((patches.len() * width * height, 1));
    let dst = data.as_slice_mut().expect("standard layout");
    for (b, p) in patches.iter().enumerate() {
        if p.width() != width || p.height() != height {
            return Err(Error::Shape(format!(
                "patch {b} is {}x{}, model expects {width}x{height}",
                p.width(),
                p.height()
            )));
        }
        let off = b * width * height;
        for (d, &v) in dst[off..off + width * height].iter_mut().zip(p.data()) {
            *d = v - 0.5;
        }
    }
    Ok(FeatureMap {
        n: patches.len(),
        h: height,
        w: width,
        data,
    })
}

#[derive(Debug, Clone)]
struct ConvRelu {
    conv: Conv2d,
    out: Option<Array2<f32>>,
}

impl ConvRelu {
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward(x);
        nn::relu_inplace(&mut y.data);
        y
    }

    fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        let mut y = self.conv.forward_train(x);
        nn::relu_inplace(&mut y.data);
        self.out = Some(y.data.clone());
        y
    }

    fn backward(&mut self, mut dy: Array2<f32>) -> FeatureMap {
        let out = self.out.take().expect("backward without a training forward pass");
        nn::relu_backward(&mut dy, &out);
        self.conv.backward(&dy)
    }
}

/// 1x1 reduce, 3x3 (strided), 1x1 expand, plus a 1x1 projection shortcut.
#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: ConvRelu,
    spatial: ConvRelu,
    expand: Conv2d,
    shortcut: Conv2d,
    out: Option<Array2<f32>>,
}

impl Bottleneck {
    fn new(cin: usize, mid: usize, stride: usize, rng: &mut Rng) -> Self {
        let cout = mid * RESNET_EXPANSION;
        Bottleneck {
            reduce: ConvRelu {
                conv: Conv2d::new(cin, mid, 1, 1, 0, rng),
                out: None,
            },
            spatial: ConvRelu {
                conv: Conv2d::new(mid, mid, 3, stride, 1, rng),
                out: None,
            },
            expand: Conv2d::new(mid, cout, 1, 1, 0, rng),
            shortcut: Conv2d::new(cin, cout, 1, stride, 0, rng),
            out: None,
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let y = self.expand.forward(&self.spatial.forward(&self.reduce.forward(x)));
        let mut out = self.shortcut.forward(x);
        out.data += &y.data;
        nn::relu_inplace(&mut out.data);
        out
    }

    fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        let a = self.reduce.forward_train(x);
        let b = self.spatial.forward_train(&a);
        let y = self.expand.forward_train(&b);
        let mut out = self.shortcut.forward_train(x);
        out.data += &y.data;
        nn::relu_inplace(&mut out.data);
        self.out = Some(out.data.clone());
        out
    }

    fn backward(&mut self, mut dy: Array2<f32>) -> FeatureMap {
        let out = self.out.take().expect("backward without a training forward pass");
        nn::relu_backward(&mut dy, &out);
        let db = self.expand.backward(&dy);
        let da = self.spatial.backward(db.data);
        let mut dx = self.reduce.backward(da.data);
        dx.data += &self.shortcut.backward(&dy).data;
        dx
    }

    fn convs_mut(&mut self) -> [(&'static str, &mut Conv2d); 4] {
        [
            ("reduce", &mut self.reduce.conv),
            ("spatial", &mut self.spatial.conv),
            ("expand", &mut self.expand),
            ("shortcut", &mut self.shortcut),
        ]
    }

    fn convs(&self) -> [(&'static str, &Conv2d); 4] {
        [
            ("reduce", &self.reduce.conv),
            ("spatial", &self.spatial.conv),
            ("expand", &self.expand),
            ("shortcut", &self.shortcut),
        ]
    }
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
enum Backbone {
    Tiny(Vec<ConvRelu>),
    Resnet { stem: ConvRelu, blocks: Vec<Bottleneck> },
}

impl Backbone {
    fn new(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        match cfg.backbone {
            BackboneKind::TinyConv => {
                let widths = [1, 16, 32, 64, cfg.embedding_dim];
                Backbone::Tiny(
                    widths
                        .windows(2)
                        .map(|w| ConvRelu {
                            conv: Conv2d::new(w[0], w[1], 3, 2, 1, rng),
                            out: None,
                        })
                        .collect(),
                )
            }
            BackboneKind::Resnet50 => {
                let stem = ConvRelu {
                    conv: Conv2d::new(1, RESNET_WIDTHS[0], 3, 2, 1, rng),
                    out: None,
                };
                let mut cin = RESNET_WIDTHS[0];
                let blocks = RESNET_WIDTHS
                    .iter()
                    .enumerate()
                    .map(|(i, &mid)| {
                        let b = Bottleneck::new(cin, mid, if i == 0 { 1 } else { 2 }, rng);
                        cin = mid * RESNET_EXPANSION;
                        b
                    })
                    .collect();
                Backbone::Resnet { stem, blocks }
            }
        }
    }

    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            Backbone::Tiny(layers) => layers.iter().fold(x.clone(), |h, l| l.forward(&h)),
            Backbone::Resnet { stem, blocks } => blocks.iter().fold(stem.forward(x), |h, b| b.forward(&h)),
        }
    }

    fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        match self {
            Backbone::Tiny(layers) => layers.iter_mut().fold(x.clone(), |h, l| l.forward_train(&h)),
            Backbone::Resnet { stem, blocks } => {
                let h = stem.forward_train(x);
                blocks.iter_mut().fold(h, |h, b| b.forward_train(&h))
            }
        }
    }

    fn backward(&mut self, dy: Array2<f32>) {
        match self {
            Backbone::Tiny(layers) => {
                layers.iter_mut().rev().fold(dy, |g, l| l.backward(g).data);
            }
            Backbone::Resnet { stem, blocks } => {
                let g = blocks.iter_mut().rev().fold(dy, |g, b| b.backward(g).data);
                stem.backward(g);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        match self {
            Backbone::Tiny(layers) => {
                for (i, l) in layers.iter_mut().enumerate() {
                    for (n, p) in l.conv.params_mut() {
                        f(&format!("backbone.{i}.{n}"), p);
                    }
                }
            }
            Backbone::Resnet { stem, blocks } => {
                for (n, p) in stem.conv.params_mut() {
                    f(&format!("backbone.stem.{n}"), p);
                }
                for (i, b) in blocks.iter_mut().enumerate() {
                    for (cn, c) in b.convs_mut() {
                        for (n, p) in c.params_mut() {
                            f(&format!("backbone.block{i}.{cn}.{n}"), p);
                        }
                    }
                }
            }
        }
    }

    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        match self {
            Backbone::Tiny(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    for (n, p) in l.conv.params() {
                        f(&format!("backbone.{i}.{n}"), p);
                    }
                }
            }
            Backbone::Resnet { stem, blocks } => {
                for (n, p) in stem.conv.params() {
                    f(&format!("backbone.stem.{n}"), p);
                }
                for (i, b) in blocks.iter().enumerate() {
                    for (cn, c) in b.convs() {
                        for (n, p) in c.params() {
                            f(&format!("backbone.block{i}.{cn}.{n}"), p);
                        }
                    }
                }
            }
        }
    }
}

/// Auxiliary head outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxOutputs {
    pub z: Array2<f32>,
    /// Raw gaze head output `g'`, unnormalized.
    pub gaze: Array2<f32>,
    pub pose: Array2<f32>,
    /// Two class logits, column 0 = left eye.
    pub side: Array2<f32>,
}

/// Gradients of the training objective w.r.t. the auxiliary outputs.
#[derive(Debug, Clone)]
pub struct AuxGrads {
    pub gaze: Array2<f32>,
    pub pose: Array2<f32>,
    pub side: Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct GazeModel {
    config: ModelConfig,
    backbone: Backbone,
    gaze_head: Linear,
    pose_head: Linear,
    side_head: Linear,
    gaze3d: Option<Mlp>,
    zone: Option<Mlp>,
    pooled_hw: Option<(usize, usize)>,
}

impl GazeModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng_for(config.seed, stream::MODEL_INIT, 0);
        let backbone = Backbone::new(&config, &mut rng);
        let d = config.embedding_dim;
        let gaze_head = Linear::new(nn::lecun_uniform(&mut rng, d, 3));
        let pose_head = Linear::new(nn::lecun_uniform(&mut rng, d, 6));
        let side_head = Linear::new(nn::lecun_uniform(&mut rng, d, 2));
        Ok(GazeModel {
            config,
            backbone,
            gaze_head,
            pose_head,
            side_head,
            gaze3d: None,
            zone: None,
            pooled_hw: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn head_out_dim(&self, kind: HeadKind) -> usize {
        match kind {
            HeadKind::Gaze3d => 3,
            HeadKind::Zone => self.config.zones,
        }
    }

    /// Attaches (or re-initializes) a downstream probe head, `d -> widths.. -> out`.
    pub fn attach_head(&mut self, kind: HeadKind, seed: u64) {
        let mut rng = rng::rng_for(seed, stream::PROBE_INIT, kind as u64);
        let mut dims = vec![self.config.embedding_dim];
        dims.extend_from_slice(&self.config.probe_widths);
        dims.push(self.head_out_dim(kind));
        let mlp = Mlp::new(&dims, &mut rng);
        match kind {
            HeadKind::Gaze3d => self.gaze3d = Some(mlp),
            HeadKind::Zone => self.zone = Some(mlp),
        }
    }

    pub fn attached_heads(&self) -> Vec<HeadKind> {
        let mut v = Vec::new();
        if self.gaze3d.is_some() {
            v.push(HeadKind::Gaze3d);
        }
        if self.zone.is_some() {
            v.push(HeadKind::Zone);
        }
        v
    }

    pub fn probe(&self, kind: HeadKind) -> Result<&Mlp> {
        match kind {
            HeadKind::Gaze3d => self.gaze3d.as_ref(),
            HeadKind::Zone => self.zone.as_ref(),
        }
        .ok_or(Error::HeadNotAttached(kind.name()))
    }

    pub fn probe_mut(&mut self, kind: HeadKind) -> Result<&mut Mlp> {
        match kind {
            HeadKind::Gaze3d => self.gaze3d.as_mut(),
            HeadKind::Zone => self.zone.as_mut(),
        }
        .ok_or(Error::HeadNotAttached(kind.name()))
    }

    /// Sets every auxiliary head parameter to zero.
    pub fn zero_aux_heads(&mut self) {
        for h in [&mut self.gaze_head, &mut self.pose_head, &mut self.side_head] {
            h.weight.value.fill(0.0);
            h.bias.value.fill(0.0);
        }
    }

    pub fn input(&self, patches: &[&Patch]) -> Result<FeatureMap> {
        images_to_input(patches, self.config.input_width, self.config.input_height)
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.h != self.config.input_height || x.w != self.config.input_width || x.channels() != 1 {
            return Err(Error::Shape(format!(
                "input {}x{}x{}, model expects {}x{}x1",
                x.w,
                x.h,
                x.channels(),
                self.config.input_width,
                self.config.input_height
            )));
        }
        if x.n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    /// Backbone embedding `z = F_phi(x)`, shape `(B, d)`.
    pub fn embed(&self, x: &FeatureMap) -> Result<Array2<f32>> {
        self.check_input(x)?;
        Ok(nn::global_avg_pool(&self.backbone.forward(x)))
    }

    pub fn embed_train(&mut self, x: &FeatureMap) -> Result<Array2<f32>> {
        self.check_input(x)?;
        let y = self.backbone.forward_train(x);
        self.pooled_hw = Some((y.h, y.w));
        Ok(nn::global_avg_pool(&y))
    }

    /// Propagates an embedding gradient through the backbone.
    pub fn backward_embedding(&mut self, dz: &Array2<f32>) {
        let (h, w) = self.pooled_hw.take().expect("backward without a training forward pass");
        self.backbone.backward(nn::global_avg_pool_backward(dz, h, w).data);
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<AuxOutputs> {
        let z = self.embed(x)?;
        Ok(AuxOutputs {
            gaze: self.gaze_head.forward(&z),
            pose: self.pose_head.forward(&z),
            side: self.side_head.forward(&z),
            z,
        })
    }

    pub fn forward_train(&mut self, x: &FeatureMap) -> Result<AuxOutputs> {
        let z = self.embed_train(x)?;
        Ok(AuxOutputs {
            gaze: self.gaze_head.forward_train(&z),
            pose: self.pose_head.forward_train(&z),
            side: self.side_head.forward_train(&z),
            z,
        })
    }

    /// Backward pass for [`GazeModel::forward_train`]; accumulates into `grad`.
    pub fn backward(&mut self, grads: &AuxGrads) {
        let mut dz = self.gaze_head.backward(&grads.gaze);
        dz += &self.pose_head.backward(&grads.pose);
        dz += &self.side_head.backward(&grads.side);
        self.backward_embedding(&dz);
    }

    /// Downstream prediction `F_theta(F_phi(x))`.
    pub fn forward_downstream(&self, x: &FeatureMap, kind: HeadKind) -> Result<Array2<f32>> {
        let head = self.probe(kind)?;
        Ok(head.forward(&self.embed(x)?))
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.backbone.visit_mut(f);
        for (name, head) in [("gaze", &mut self.gaze_head), ("pose", &mut self.pose_head), ("side", &mut self.side_head)] {
            for (n, p) in head.params_mut() {
                f(&format!("head.{name}.{n}"), p);
            }
        }
        if let Some(m) = &mut self.gaze3d {
            m.visit_mut("probe.gaze3d", f);
        }
        if let Some(m) = &mut self.zone {
            m.visit_mut("probe.zone", f);
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        self.backbone.visit(f);
        for (name, head) in [("gaze", &self.gaze_head), ("pose", &self.pose_head), ("side", &self.side_head)] {
            for (n, p) in head.params() {
                f(&format!("head.{name}.{n}"), p);
            }
        }
        if let Some(m) = &self.gaze3d {
            m.visit("probe.gaze3d", f);
        }
        if let Some(m) = &self.zone {
            m.visit("probe.zone", f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        let mut n = 0;
        self.visit_params(&mut |name, p| {
            if name.starts_with(prefix) {
                n += p.len();
            }
        });
        n
    }

    /// SHA-256 over names and raw bits of every parameter under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |name, p| {
            if name.starts_with(prefix) {
                h.update(name.as_bytes());
                for v in p.value.iter() {
                    h.update(v.to_le_bytes());
                }
            }
        });
        hex(&h.finalize())
    }

    pub fn backbone_digest(&self) -> String {
        self.digest("backbone.")
    }
}
