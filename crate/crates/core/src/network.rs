//! The landmark network: feature extractor (full VGG-16 pattern or a small
//! "toy" stand-in), the GLE stack at the 1/8-resolution feature, a
//! transposed-conv decoder back to input resolution, and a linear 1x1
//! heatmap head.

use std::fs;
use std::path::Path;

use crate::autodiff::{GradTape, NodeId, ParamId, ParamStore};
use crate::binio::{put_str, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::gle::GleStack;
use crate::layers::{BatchNorm2dLayer, Conv2dLayer, ConvBnRelu, ConvTranspose2dLayer};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NUM_LANDMARKS: usize = 8;
const WEIGHTS_VERSION: u32 = 1;

/// Which feature extractor to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// VGG-16 layer pattern through conv4_3 (10 convs, 3 max-pools), widths
    /// scaled by the multiplier. Plain conv+ReLU, as in VGG.
    Vgg16,
    /// 3 conv-BN-ReLU + pool stages reaching the same 1/8 resolution.
    Toy,
}

impl BackboneKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BackboneKind::Vgg16 => "vgg16",
            BackboneKind::Toy => "toy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vgg16" => Ok(BackboneKind::Vgg16),
            "toy" => Ok(BackboneKind::Toy),
            other => Err(Error::InvalidConfig(format!(
                "unknown backbone '{other}' (expected vgg16 or toy)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// Square input resolution; the heatmaps come back at the same size.
    pub input_size: usize,
    pub backbone: BackboneKind,
    /// Scales every channel width; 1.0 is the full-size network.
    pub width_multiplier: f64,
    /// Number of stacked GLE modules.
    pub k: usize,
    pub num_landmarks: usize,
    pub decoder_stages: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            backbone: BackboneKind::Vgg16,
            width_multiplier: 1.0,
            k: 2,
            num_landmarks: NUM_LANDMARKS,
            decoder_stages: 3,
        }
    }
}

/// Round a scaled width to the nearest positive even integer (GLE blocks halve
/// their channel count, so widths must stay even).
fn scaled_width(base: usize, multiplier: f64) -> usize {
    let w = (base as f64 * multiplier / 2.0).round() as usize * 2;
    w.max(2)
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let down = 1usize << self.decoder_stages;
        if self.decoder_stages != 3 {
            return Err(Error::InvalidConfig(format!(
                "decoder_stages must be 3 (the backbone downsamples by 8, and \
                 {} transposed-conv stages would restore x{down}, not x8)",
                self.decoder_stages
            )));
        }
        if self.input_size == 0 || self.input_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 8 (three 2x \
                 downsampling stages)",
                self.input_size
            )));
        }
        let feat = self.input_size / 8;
        if feat * feat > crate::gle::NONLOCAL_POSITION_CAP {
            return Err(Error::InvalidConfig(format!(
                "input_size {} gives a {feat}x{feat} feature map, whose {} \
                 positions exceed the non-local cap of {}",
                self.input_size,
                feat * feat,
                crate::gle::NONLOCAL_POSITION_CAP
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.num_landmarks != NUM_LANDMARKS {
            return Err(Error::InvalidConfig(format!(
                "num_landmarks must be {NUM_LANDMARKS} (the canonical landmark set), got {}",
                self.num_landmarks
            )));
        }
        if !(self.width_multiplier > 0.0) || !self.width_multiplier.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "width_multiplier must be a positive finite number, got {}",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    /// Channel count of the conv4_3-equivalent feature the GLE stack sees.
    pub fn feature_channels(&self) -> usize {
        match self.backbone {
            BackboneKind::Vgg16 => scaled_width(512, self.width_multiplier),
            BackboneKind::Toy => scaled_width(256, self.width_multiplier),
        }
    }
}

enum Backbone {
    /// (convs of the block, pool after?) — VGG blocks 1-4, pool after 1-3.
    Vgg16(Vec<(Vec<Conv2dLayer>, bool)>),
    /// conv-BN-ReLU then pool, three times.
    Toy(Vec<ConvBnRelu>),
}

/// The assembled detector. Layer definitions live here; the tensors live in
/// the [`ParamStore`] created alongside by [`build_network`].
pub struct LandmarkNet {
    pub config: NetworkConfig,
    backbone: Backbone,
    pub gle: GleStack,
    pub decoder: Vec<(ConvTranspose2dLayer, BatchNorm2dLayer)>,
    head: Conv2dLayer,
}

/// Build the network and its parameter store. All parameters are drawn
/// deterministically from the seed in registration order: He-uniform conv
/// weights, zero biases, ones/zeros for BN gamma/beta, zeroed non-local w.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<(LandmarkNet, ParamStore)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = Rng::seed(seed);
    let m = config.width_multiplier;

    let backbone = match config.backbone {
        BackboneKind::Vgg16 => {
            // VGG-16 through conv4_3: 2-2-3-3 convs, pools after blocks 1-3.
            let widths = [
                scaled_width(64, m),
                scaled_width(128, m),
                scaled_width(256, m),
                scaled_width(512, m),
            ];
            let counts = [2usize, 2, 3, 3];
            let mut blocks = Vec::new();
            let mut cin = 3;
            for (b, (&width, &count)) in widths.iter().zip(counts.iter()).enumerate() {
                let mut convs = Vec::new();
                for i in 0..count {
                    convs.push(Conv2dLayer::new(
                        &mut store,
                        &mut rng,
                        &format!("backbone.{}.{}", b, i),
                        cin,
                        width,
                        3,
                        1,
                        1,
                    )?);
                    cin = width;
                }
                blocks.push((convs, b < 3));
            }
            Backbone::Vgg16(blocks)
        }
        BackboneKind::Toy => {
            let widths = [
                scaled_width(64, m),
                scaled_width(128, m),
                scaled_width(256, m),
            ];
            let mut stages = Vec::new();
            let mut cin = 3;
            for (i, &width) in widths.iter().enumerate() {
                stages.push(ConvBnRelu::new(
                    &mut store,
                    &mut rng,
                    &format!("backbone.{i}"),
                    cin,
                    width,
                )?);
                cin = width;
            }
            Backbone::Toy(stages)
        }
    };

    let c = config.feature_channels();
    let gle = GleStack::new(&mut store, &mut rng, "gle", config.k, c)?;

    // transposed-conv decoder, widths halving but never below the head width
    let mut decoder = Vec::new();
    let mut cin = c;
    for i in 0..config.decoder_stages {
        let cout = (cin / 2).max(NUM_LANDMARKS.min(cin));
        let up = ConvTranspose2dLayer::new_no_bias(
            &mut store,
            &mut rng,
            &format!("decoder.{i}.up"),
            cin,
            cout,
            4,
            2,
            1,
        )?;
        let bn = BatchNorm2dLayer::new(&mut store, &format!("decoder.{i}.bn"), cout)?;
        decoder.push((up, bn));
        cin = cout;
    }

    let head = Conv2dLayer::new(
        &mut store,
        &mut rng,
        "head",
        cin,
        config.num_landmarks,
        1,
        1,
        0,
    )?;

    let net = LandmarkNet {
        config: config.clone(),
        backbone,
        gle,
        decoder,
        head,
    };
    net.assert_resolution_algebra()?;
    Ok((net, store))
}

impl LandmarkNet {
    /// Confirms the S -> S/8 -> S size arithmetic: each pool needs an even size, each
    /// decoder stage exactly doubles (kernel 4, stride 2, padding 1).
    fn assert_resolution_algebra(&self) -> Result<()> {
        let s = self.config.input_size;
        let mut r = s;
        for _ in 0..3 {
            if r % 2 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "resolution {r} not divisible by 2 at a pooling stage"
                )));
            }
            r /= 2;
        }
        let mut up = r;
        for _ in 0..self.config.decoder_stages {
            up = (up - 1) * 2 + 4 - 2; // conv_transpose2d with k=4, s=2, p=1
        }
        if up != s {
            return Err(Error::InvalidConfig(format!(
                "decoder restores {up}, input is {s}"
            )));
        }
        Ok(())
    }

    /// Full forward pass: images [N,3,S,S] -> heatmaps [N,num_landmarks,S,S].
    /// Train mode uses batch statistics (and updates running stats); eval
    /// mode is a pure function of parameters and buffers.
    pub fn forward(
        &self,
        tape: &mut GradTape,
        store: &mut ParamStore,
        images: NodeId,
        training: bool,
    ) -> Result<NodeId> {
        let shape = tape.value(images).shape().to_vec();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                op: "network_forward",
                detail: format!("expected [N,3,{s},{s}] images, got {shape:?}"),
            });
        }

        let mut h = images;
        match &self.backbone {
            Backbone::Vgg16(blocks) => {
                for (convs, pool) in blocks {
                    for conv in convs {
                        h = conv.forward(tape, store, h)?;
                        h = tape.relu(h)?;
                    }
                    if *pool {
                        h = tape.maxpool2(h)?;
                    }
                }
            }
            Backbone::Toy(stages) => {
                for stage in stages {
                    h = stage.forward(tape, store, h, training)?;
                    h = tape.maxpool2(h)?;
                }
            }
        }

        h = self.gle.forward(tape, store, h, training)?;

        for (up, bn) in &self.decoder {
            h = up.forward(tape, store, h)?;
            h = bn.forward(tape, store, h, training)?;
            h = tape.relu(h)?;
        }

        self.head.forward(tape, store, h)
    }

    /// All parameter ids in registration order.
    pub fn param_ids(&self, store: &ParamStore) -> Vec<ParamId> {
        let mut ids = Vec::new();
        match &self.backbone {
            Backbone::Vgg16(blocks) => {
                for (convs, _) in blocks {
                    for conv in convs {
                        ids.extend(conv.param_ids());
                    }
                }
            }
            Backbone::Toy(stages) => {
                for stage in stages {
                    ids.extend(stage.param_ids());
                }
            }
        }
        ids.extend(self.gle.param_ids(store));
        for (up, bn) in &self.decoder {
            ids.extend(up.param_ids());
            ids.push(bn.gamma);
            ids.push(bn.beta);
        }
        ids.extend(self.head.param_ids());
        ids
    }
}

/// Serialize all parameters and buffers as a flat name -> shape -> f64 table
/// with a leading format version.
pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    put_u32(&mut buf, WEIGHTS_VERSION);
    let total = store.iter().count() + store.iter_buffers().count();
    put_u64(&mut buf, total as u64);
    let entries = store
        .iter()
        .map(|(_, p)| (p.name.as_str(), &p.value))
        .chain(store.iter_buffers().map(|(_, b)| (b.name.as_str(), &b.value)));
    for (name, value) in entries {
        put_str(&mut buf, name);
        put_u32(&mut buf, value.shape().len() as u32);
        for &d in value.shape() {
            put_u64(&mut buf, d as u64);
        }
        for &v in value.data() {
            crate::binio::put_f64(&mut buf, v);
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a weight table saved by [`save_weights`] into an existing store.
/// Every name in the file must resolve to a parameter or buffer of identical
/// shape; unknown names are an error.
pub fn load_weights(store: &mut ParamStore, path: &Path) -> Result<()> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader::new(&data, "weights");
    let version = r.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let count = r.u64()?;
    for _ in 0..count {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let values = r.f64_vec(numel)?;
        let tensor = Tensor::from_vec(shape.clone(), values)?;
        if let Some(id) = store.id_by_name(&name) {
            if store.param(id).value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load_weights",
                    detail: format!(
                        "parameter '{name}' has shape {:?} in the store but {shape:?} in the file",
                        store.param(id).value.shape()
                    ),
                });
            }
            store.param_mut(id).value = tensor;
        } else if let Some(id) = store.buffer_id_by_name(&name) {
            if store.buffer(id).value.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "load_weights",
                    detail: format!(
                        "buffer '{name}' has shape {:?} in the store but {shape:?} in the file",
                        store.buffer(id).value.shape()
                    ),
                });
            }
            store.buffer_mut(id).value = tensor;
        } else {
            return Err(Error::UnknownParameter(name));
        }
    }
    r.expect_end()
}
