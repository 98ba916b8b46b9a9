//! Fusion generator: lightness encoder, optional global-embedding fusion,
//! and an upsampling decoder that predicts the two chroma channels.
//!
//! ```text
//! L (N×1×H×W)
//!  └ encoder: 5 × [ (conv5×5 p2 → BN → ReLU) × 2 → avgpool2 ]   → N×C×H/32×W/32
//!  └ fusion:  [tile(embedding) ‖ encoding] → conv1×1 → BN → ReLU  → N×C×H/32×W/32
//!  └ decoder: 4 × [ up2 → convT3×3 → BN → LeakyReLU(0.2) ],
//!             up2 → convT3×3 → tanh                                → N×2×H×W
//! ```

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{self, RgbImage};
use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::extractor::{embed_lightness, EmbeddingExtractor, EMBED_DIM};
use crate::graph::{Graph, Var};
use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, INIT_STD};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Whether the generator fuses the global embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Encoder/decoder only; no extractor is ever called.
    #[serde(rename = "vit-gan")]
    VitGan,
    /// Encoder output fused with the global embedding.
    #[serde(rename = "vit-i-gan")]
    VitIGan,
}

impl Variant {
    pub fn uses_extractor(self) -> bool {
        matches!(self, Variant::VitIGan)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::VitGan => "vit-gan",
            Variant::VitIGan => "vit-i-gan",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit-gan" => Ok(Variant::VitGan),
            "vit-i-gan" => Ok(Variant::VitIGan),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected vit-gan or vit-i-gan)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Output channels of each encoder stage; each stage halves H and W.
    pub encoder_channels: Vec<usize>,
    pub convs_per_stage: usize,
    /// Output channels of every decoder stage except the final 2-channel one.
    pub decoder_channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![64, 128, 256, 512, 512],
            convs_per_stage: 2,
            decoder_channels: vec![256, 128, 64, 32],
            embed_dim: EMBED_DIM,
        }
    }
}

impl GeneratorConfig {
    /// Every width divided by `factor` (at least 1).
    pub fn scaled_down(factor: usize) -> Self {
        let d = Self::default();
        let f = |v: &Vec<usize>| v.iter().map(|c| (c / factor).max(1)).collect();
        Self {
            encoder_channels: f(&d.encoder_channels),
            decoder_channels: f(&d.decoder_channels),
            ..d
        }
    }

    /// Total downsampling factor of the encoder.
    pub fn reduction(&self) -> usize {
        1 << self.encoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.decoder_channels.len() + 1 != self.encoder_channels.len() {
            return Err(Error::Config(format!(
                "decoder needs {} hidden stages to undo {} encoder stages",
                self.encoder_channels.len() - 1,
                self.encoder_channels.len()
            )));
        }
        if self.decoder_channels.contains(&0) || self.convs_per_stage == 0 || self.embed_dim == 0 {
            return Err(Error::Config("generator widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct ConvBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone)]
struct UpBlock {
    convt: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
}

/// Generator weights and layer wiring.
pub struct Generator<T: Scalar = f32> {
    pub config: GeneratorConfig,
    pub variant: Variant,
    pub params: ParamStore<T>,
    encoder: Vec<Vec<ConvBlock>>,
    fusion: ConvBlock,
    decoder: Vec<UpBlock>,
}

impl<T: Scalar> Generator<T> {
    /// Fresh weights: convs `N(0, 0.02)`, BN gains `N(1, 0.02)`, biases 0.
    pub fn new<R: Rng + ?Sized>(config: GeneratorConfig, variant: Variant, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let mut encoder = Vec::new();
        let mut in_c = 1;
        for (s, &out_c) in config.encoder_channels.iter().enumerate() {
            let mut stage = Vec::new();
            for c in 0..config.convs_per_stage {
                let name = format!("encoder.stage{}.conv{}", s + 1, c + 1);
                let conv = Conv2d::new(&mut p, &name, in_c, out_c, 5, 1, 2, false, INIT_STD, rng)?;
                let bn = BatchNorm2d::new(&mut p, &format!("encoder.stage{}.bn{}", s + 1, c + 1), out_c, rng)?;
                stage.push(ConvBlock { conv, bn });
                in_c = out_c;
            }
            encoder.push(stage);
        }
        let enc_c = in_c;
        let fusion_in = if variant.uses_extractor() { enc_c + config.embed_dim } else { enc_c };
        let fusion = ConvBlock {
            conv: Conv2d::new(&mut p, "fusion.conv", fusion_in, enc_c, 1, 1, 0, false, INIT_STD, rng)?,
            bn: BatchNorm2d::new(&mut p, "fusion.bn", enc_c, rng)?,
        };
        let mut decoder = Vec::new();
        let mut in_c = enc_c;
        let stages = config.decoder_channels.len() + 1;
        for s in 0..stages {
            let last = s + 1 == stages;
            let out_c = if last { 2 } else { config.decoder_channels[s] };
            let name = format!("decoder.stage{}.convt", s + 1);
            let convt = ConvTranspose2d::new(&mut p, &name, in_c, out_c, 3, 1, 1, last, rng)?;
            let bn = if last {
                None
            } else {
                Some(BatchNorm2d::new(&mut p, &format!("decoder.stage{}.bn", s + 1), out_c, rng)?)
            };
            decoder.push(UpBlock { convt, bn });
            in_c = out_c;
        }
        Ok(Self {
            config,
            variant,
            params: p,
            encoder,
            fusion,
            decoder,
        })
    }

    /// Same network with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            variant: self.variant,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            fusion: self.fusion.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn encoder_conv_count(&self) -> usize {
        self.encoder.iter().map(Vec::len).sum()
    }

    pub fn decoder_convt_count(&self) -> usize {
        self.decoder.len()
    }

    fn check_input(&self, g: &Graph<T>, l: Var) -> Result<()> {
        let s = g.value(l).shape();
        let r = self.config.reduction();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("generator", format!("expected N×1×H×W lightness, got {s:?}")));
        }
        if s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::shape(
                "encode",
                format!("spatial extent {}x{} is not divisible by {r}", s[2], s[3]),
            ));
        }
        Ok(())
    }

    /// `N×1×H×W` → `N×C×H/32×W/32`.
    pub fn encode(&mut self, g: &mut Graph<T>, l: Var, training: bool) -> Result<Var> {
        self.check_input(g, l)?;
        let mut h = l;
        for stage in &self.encoder {
            for block in stage {
                h = block.conv.forward(g, &self.params, h)?;
                h = block.bn.forward(g, &mut self.params, h, training)?;
                h = g.relu(h);
            }
            h = g.avg_pool2(h)?;
        }
        Ok(h)
    }

    /// Tile the embedding over the encoding grid, concatenate along
    /// channels and project back with a 1×1 conv → BN → ReLU. Without an
    /// embedding (the `vit-gan` variant) the projection reads the encoding
    /// alone.
    pub fn fuse(&mut self, g: &mut Graph<T>, enc: Var, embedding: Option<Var>, training: bool) -> Result<Var> {
        let es = g.value(enc).shape().to_vec();
        let input = match (self.variant, embedding) {
            (Variant::VitIGan, Some(emb)) => {
                let em = g.value(emb).shape();
                if em.len() != 2 || em[1] != self.config.embed_dim {
                    return Err(Error::shape(
                        "fuse",
                        format!("embedding axis 1 is {:?}, expected {}", em.get(1), self.config.embed_dim),
                    ));
                }
                if em[0] != es[0] {
                    return Err(Error::shape("fuse", format!("batch axis 0: embedding {} vs encoding {}", em[0], es[0])));
                }
                let tiled = g.tile_spatial(emb, es[2], es[3])?;
                g.concat(&[tiled, enc])?
            }
            (Variant::VitIGan, None) => {
                return Err(Error::Config("vit-i-gan generator needs an embedding".into()));
            }
            (Variant::VitGan, _) => enc,
        };
        let h = self.fusion.conv.forward(g, &self.params, input)?;
        let h = self.fusion.bn.forward(g, &mut self.params, h, training)?;
        Ok(g.relu(h))
    }

    /// `N×C×h×w` → `N×2×32h×32w` with values in `[−1, 1]`.
    pub fn decode(&mut self, g: &mut Graph<T>, fused: Var, training: bool) -> Result<Var> {
        let mut h = fused;
        for block in &self.decoder {
            h = g.upsample_nearest2(h)?;
            h = block.convt.forward(g, &self.params, h)?;
            h = match &block.bn {
                Some(bn) => {
                    let n = bn.forward(g, &mut self.params, h, training)?;
                    g.leaky_relu(n, LEAKY_SLOPE)
                }
                None => g.tanh(h),
            };
        }
        Ok(h)
    }

    /// Full forward pass with a precomputed embedding node.
    pub fn forward(&mut self, g: &mut Graph<T>, l: Var, embedding: Option<Var>, training: bool) -> Result<Var> {
        let enc = self.encode(g, l, training)?;
        let fused = self.fuse(g, enc, embedding, training)?;
        self.decode(g, fused, training)
    }

    /// Forward pass that queries `extractor` for the embedding when the
    /// variant needs one. The embedding enters the graph as a constant.
    pub fn forward_with_extractor(
        &mut self,
        g: &mut Graph<T>,
        l: Var,
        extractor: Option<&dyn EmbeddingExtractor>,
        training: bool,
    ) -> Result<Var> {
        let embedding = if self.variant.uses_extractor() {
            let ex = extractor.ok_or_else(|| Error::Config("vit-i-gan generator needs an extractor".into()))?;
            let emb = embed_lightness(ex, g.value(l))?;
            Some(g.constant(emb))
        } else {
            None
        };
        self.forward(g, l, embedding, training)
    }

    /// Eval-mode prediction of normalized chroma for a lightness batch.
    pub fn predict(&mut self, l: &Tensor<T>, extractor: Option<&dyn EmbeddingExtractor>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let lv = g.constant(l.clone());
        let out = self.forward_with_extractor(&mut g, lv, extractor, false)?;
        Ok(g.value(out).clone())
    }
}

impl Parameterized for Generator<f64> {
    fn param_stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.params]
    }
}

impl Generator<f32> {
    /// Colourise one image at the generator's working resolution.
    ///
    /// The input is resized to `size×size`; its lightness is kept, its
    /// chroma discarded and replaced by the prediction.
    pub fn colorize(&mut self, img: &RgbImage, size: usize, extractor: Option<&dyn EmbeddingExtractor>) -> Result<RgbImage> {
        let resized = crate::dataset::resize_rgb(img, size, size);
        let lab = colorspace::srgb_to_lab(&resized);
        let (l, _) = colorspace::normalize_for_generator(&lab);
        let batch = l.reshape(&[1, 1, size, size])?;
        let ab = self.predict(&batch, extractor)?;
        let out_lab = colorspace::lab_from_normalized(size, size, l.data(), &ab.reshape(&[2, size, size])?)?;
        Ok(colorspace::lab_to_srgb(&out_lab))
    }
}
