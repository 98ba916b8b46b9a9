//! Vision-transformer discriminator over full (L, a, b) images.
//!
//! patchify → linear projection → [cls] prepend → + positional embedding →
//! dropout → `depth` pre-norm blocks → LayerNorm → head on the cls token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::graph::{Graph, Var};
use crate::nn::{LayerNorm, Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub emb_dropout: f64,
    pub token_dim: usize,
    pub in_channels: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            patch_size: 32,
            depth: 6,
            heads: 16,
            mlp_dim: 2048,
            dropout: 0.1,
            emb_dropout: 0.1,
            token_dim: 1024,
            in_channels: 3,
        }
    }
}

impl VitConfig {
    /// Small configuration for 64×64 inputs.
    pub fn reduced() -> Self {
        Self {
            image_size: 64,
            patch_size: 32,
            depth: 2,
            heads: 4,
            mlp_dim: 64,
            token_dim: 32,
            ..Self::default()
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Sequence length including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    /// Trainable scalar count, as a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        let d = self.token_dim;
        let linear = |i: usize, o: usize| i * o + o;
        let block = 2 * (2 * d) + 4 * linear(d, d) + linear(d, self.mlp_dim) + linear(self.mlp_dim, d);
        linear(self.patch_dim(), d) + d + self.num_tokens() * d + self.depth * block + 2 * d + linear(d, 1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.patch_size,
            self.depth,
            self.heads,
            self.mlp_dim,
            self.token_dim,
            self.in_channels,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.token_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        for (name, rate) in [("dropout", self.dropout), ("emb_dropout", self.emb_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {rate}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Discriminator weights and layer wiring.
pub struct Discriminator<T: Scalar = f32> {
    pub config: VitConfig,
    pub params: ParamStore<T>,
    patch_embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head: Linear,
}

/// Logits plus the attention nodes of every block, for inspection.
pub struct VitTrace {
    pub logits: Var,
    pub attention: Vec<Var>,
}

impl<T: Scalar> Discriminator<T> {
    /// Linear weights, class token and positional embeddings from
    /// `N(0, 0.02)`; biases 0; LayerNorm gain 1, shift 0.
    pub fn new<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.token_dim;
        let mut p = ParamStore::new();
        let patch_embed = Linear::new(&mut p, "patch_embed", config.patch_dim(), d, INIT_STD, rng)?;
        let cls_token = p.add_normal("cls_token", &[d], 0.0, INIT_STD, rng)?;
        let pos_embed = p.add_normal("pos_embed", &[config.num_tokens(), d], 0.0, INIT_STD, rng)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let n = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(Block {
                ln1: LayerNorm::new(&mut p, &n("ln1"), d)?,
                q: Linear::new(&mut p, &n("attn.q"), d, d, INIT_STD, rng)?,
                k: Linear::new(&mut p, &n("attn.k"), d, d, INIT_STD, rng)?,
                v: Linear::new(&mut p, &n("attn.v"), d, d, INIT_STD, rng)?,
                proj: Linear::new(&mut p, &n("attn.proj"), d, d, INIT_STD, rng)?,
                ln2: LayerNorm::new(&mut p, &n("ln2"), d)?,
                fc1: Linear::new(&mut p, &n("mlp.fc1"), d, config.mlp_dim, INIT_STD, rng)?,
                fc2: Linear::new(&mut p, &n("mlp.fc2"), config.mlp_dim, d, INIT_STD, rng)?,
            });
        }
        let norm = LayerNorm::new(&mut p, "norm", d)?;
        let head = Linear::new(&mut p, "head", d, 1, INIT_STD, rng)?;
        Ok(Self {
            config,
            params: p,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
            head,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            patch_embed: self.patch_embed.clone(),
            cls_token: self.cls_token,
            pos_embed: self.pos_embed,
            blocks: self.blocks.clone(),
            norm: self.norm.clone(),
            head: self.head.clone(),
        }
    }

    /// Self-attention sublayer before the residual add. Returns the raw
    /// attention node and its output projection.
    fn attend(&self, g: &mut Graph<T>, b: &Block, x: Var) -> Result<(Var, Var)> {
        let q = b.q.forward(g, &self.params, x)?;
        let k = b.k.forward(g, &self.params, x)?;
        let v = b.v.forward(g, &self.params, x)?;
        let a = g.attention(q, k, v, self.config.heads)?;
        Ok((a, b.proj.forward(g, &self.params, a)?))
    }

    /// Multi-head self-attention of block `index` applied to `N×T×D` tokens.
    pub fn multi_head_attention(&self, g: &mut Graph<T>, index: usize, tokens: Var) -> Result<Var> {
        let b = self
            .blocks
            .get(index)
            .ok_or_else(|| Error::Config(format!("no transformer block {index}")))?;
        Ok(self.attend(g, b, tokens)?.1)
    }

    /// `N×C×S×S` image → `N×1` logits, recording attention nodes.
    pub fn vit_forward_traced<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        img: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<VitTrace> {
        let c = &self.config;
        let s = g.value(img).shape();
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "vit_forward",
                format!(
                    "expected N×{}×{}×{}, got {s:?}",
                    c.in_channels, c.image_size, c.image_size
                ),
            ));
        }
        let patches = g.patchify(img, c.patch_size)?;
        let tokens = self.patch_embed.forward(g, &self.params, patches)?;
        let cls = g.param(&self.params, self.cls_token);
        let seq = g.prepend_token(tokens, cls)?;
        let pos = g.param(&self.params, self.pos_embed);
        let seq = g.add_broadcast(seq, pos)?;
        let mut x = g.dropout(seq, c.emb_dropout, training, rng)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = b.ln1.forward(g, &self.params, x)?;
            let (raw, a) = self.attend(g, b, h)?;
            attention.push(raw);
            let a = g.dropout(a, c.dropout, training, rng)?;
            x = g.add(x, a)?;

            let h = b.ln2.forward(g, &self.params, x)?;
            let h = b.fc1.forward(g, &self.params, h)?;
            let h = g.gelu(h);
            let h = g.dropout(h, c.dropout, training, rng)?;
            let h = b.fc2.forward(g, &self.params, h)?;
            let h = g.dropout(h, c.dropout, training, rng)?;
            x = g.add(x, h)?;
        }
        let x = self.norm.forward(g, &self.params, x)?;
        let cls = g.select_token(x, 0)?;
        let logits = self.head.forward(g, &self.params, cls)?;
        Ok(VitTrace { logits, attention })
    }

    pub fn vit_forward<R: Rng + ?Sized>(&self, g: &mut Graph<T>, img: Var, training: bool, rng: &mut R) -> Result<Var> {
        Ok(self.vit_forward_traced(g, img, training, rng)?.logits)
    }

    /// Concatenate `L` (`N×1×H×W`) and `ab` (`N×2×H×W`) and score the result.
    pub fn discriminate<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        l: Var,
        ab: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let img = assemble_lab(g, l, ab)?;
        self.vit_forward(g, img, training, rng)
    }

    /// Same as [`Self::discriminate`] but with every parameter entering the
    /// graph frozen, so gradients reach the inputs and not the weights.
    pub fn discriminate_frozen<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        l: Var,
        ab: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        g.with_frozen(&self.params, |g| self.discriminate(g, l, ab, training, rng))
    }

    /// Eval-mode logits for an assembled batch.
    pub fn score(&self, l: &Tensor<T>, ab: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let lv = g.constant(l.clone());
        let abv = g.constant(ab.clone());
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.discriminate(&mut g, lv, abv, false, &mut unused)?;
        Ok(g.value(out).clone())
    }
}

/// Channel-wise concatenation in (L, a, b) order.
pub fn assemble_lab<T: Scalar>(g: &mut Graph<T>, l: Var, ab: Var) -> Result<Var> {
    let (ls, abs) = (g.value(l).shape(), g.value(ab).shape());
    if ls.len() != 4 || ls[1] != 1 || abs.len() != 4 || abs[1] != 2 {
        return Err(Error::shape("discriminate", format!("L {ls:?} and ab {abs:?}")));
    }
    g.concat(&[l, ab])
}

impl Parameterized for Discriminator<f64> {
    fn param_stores(&mut self) -> Vec<&mut ParamStore<f64>> {
        vec![&mut self.params]
    }
}
