//! Image encoder: two stride-2 conv blocks, then a transformer encoder over
//! the flattened quarter-resolution grid.

use vlamd_tensor::Tensor;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub c_model: usize,
    pub n_enc_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub input_hw: (usize, usize),
}

impl BackboneConfig {
    pub fn from_config(cfg: &Config) -> BackboneConfig {
        BackboneConfig {
            c_model: cfg.model.c_model,
            n_enc_layers: cfg.model.enc_layers,
            n_heads: cfg.model.heads,
            ff_dim: cfg.model.ff_dim,
            input_hw: (cfg.data.height, cfg.data.width),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.input_hw.0 / 4, self.input_hw.1 / 4)
    }
}

/// Encoded image features, stored sequence-major.
///
/// `f` and `f_prime` are `[B, H'*W', C]`; position `i` is grid cell
/// `(i / W', i % W')`. [`FeatureMap::to_chw`] gives the `C x H' x W'` view.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub f: Tensor,
    pub f_prime: Tensor,
    pub spatial: (usize, usize),
}

impl FeatureMap {
    pub fn batch(&self) -> usize {
        self.f.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.f.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.f.shape()[2]
    }

    /// `C x H' x W'` view of sample `b`.
    pub fn to_chw(&self, b: usize) -> Result<Tensor> {
        let (h, w) = self.spatial;
        Ok(self
            .f
            .narrow(0, b, 1)?
            .reshape(&[h, w, self.channels()])?
            .permute(&[2, 0, 1])?)
    }

    /// Single-sample slice, for per-image decoding.
    pub fn select(&self, b: usize) -> Result<FeatureMap> {
        Ok(FeatureMap {
            f: self.f.narrow(0, b, 1)?,
            f_prime: self.f_prime.narrow(0, b, 1)?,
            spatial: self.spatial,
        })
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(init: &mut Init<'_>, d: usize, heads: usize, ff_dim: usize) -> Result<EncoderLayer> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(init, "ln1", d)?,
            attn: MultiHeadAttention::new(init, "attn", d, heads)?,
            ln2: LayerNorm::new(init, "ln2", d)?,
            ff: FeedForward::new(init, "ff", d, ff_dim)?,
        })
    }

    /// Pre-norm self-attention and feed-forward with residuals. Also returns
    /// the attention weights `[B*heads, T, T]`.
    pub fn forward_with_weights(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.ln1.forward(store, x)?;
        let (a, w) = self.attn.forward(store, &h, &h, None)?;
        let x = x.add(&a)?;
        let x = x.add(&self.ff.forward(store, &self.ln2.forward(store, &x)?)?)?;
        Ok((x, w))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_weights(store, x)?.0)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    ln: LayerNorm,
}

impl ConvBlock {
    fn new(init: &mut Init<'_>, name: &str, c_in: usize, c_out: usize) -> Result<ConvBlock> {
        let mut s = init.scope(name);
        let fan_in = c_in * 9;
        let fan_out = c_out * 9;
        Ok(ConvBlock {
            w: s.xavier("weight", &[c_out, c_in, 3, 3], fan_in, fan_out)?,
            b: s.constant("bias", &[c_out], 0.0)?,
            ln: LayerNorm::new(&mut s, "ln", c_out)?,
        })
    }

    /// conv -> channel layer-norm -> relu, returned channel-last `[B, H', W', C]`.
    fn forward_nhwc(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d_stride2(store.get(self.w), store.get(self.b))?;
        let y = y.permute(&[0, 2, 3, 1])?;
        Ok(self.ln.forward(store, &y)?.relu())
    }
}

#[derive(Debug, Clone)]
pub struct TextBackbone {
    cfg: BackboneConfig,
    conv1: ConvBlock,
    conv2: ConvBlock,
    pos_enc: ParamId,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
    pos_key: ParamId,
    key_proj: Linear,
}

impl TextBackbone {
    pub fn new(init: &mut Init<'_>, cfg: BackboneConfig) -> Result<TextBackbone> {
        let c = cfg.c_model;
        if !c.is_multiple_of(cfg.n_heads) {
            return Err(Error::config("model.heads", "must divide model.c_model"));
        }
        let (h, w) = cfg.grid();
        let n = h * w;
        let mut s = init.scope("backbone");
        let conv1 = ConvBlock::new(&mut s, "conv1", 3, c / 2)?;
        let conv2 = ConvBlock::new(&mut s, "conv2", c / 2, c)?;
        let pos_enc = s.uniform("pos_enc", &[n, c], 0.1)?;
        let mut layers = Vec::with_capacity(cfg.n_enc_layers);
        for i in 0..cfg.n_enc_layers {
            let mut ls = s.scope(&format!("enc{i}"));
            layers.push(EncoderLayer::new(&mut ls, c, cfg.n_heads, cfg.ff_dim)?);
        }
        let final_ln = LayerNorm::new(&mut s, "final_ln", c)?;
        let pos_key = s.uniform("pos_key", &[n, c], 0.1)?;
        let key_proj = Linear::new(&mut s, "key_proj", c, c, true)?;
        Ok(TextBackbone {
            cfg,
            conv1,
            conv2,
            pos_enc,
            layers,
            final_ln,
            pos_key,
            key_proj,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn pos_enc(&self) -> ParamId {
        self.pos_enc
    }

    /// Runs the conv stem and returns the flattened `[B, N, C]` sequence with
    /// encoder position embeddings added.
    pub fn stem(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let x = match image.rank() {
            3 => image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?,
            4 => image.clone(),
            _ => return Err(Error::Input(format!("expected 3xHxW image(s), got {:?}", image.shape()))),
        };
        let (c_in, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        if c_in != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {c_in}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Input(format!("image {h}x{w} is not divisible by 4")));
        }
        if (h, w) != self.cfg.input_hw {
            return Err(Error::Input(format!(
                "image {h}x{w} does not match configured {}x{}",
                self.cfg.input_hw.0, self.cfg.input_hw.1
            )));
        }
        let b = x.shape()[0];
        let y = self.conv1.forward_nhwc(store, &x)?.permute(&[0, 3, 1, 2])?;
        let y = self.conv2.forward_nhwc(store, &y)?;
        let (gh, gw) = self.cfg.grid();
        let seq = y.reshape(&[b, gh * gw, self.cfg.c_model])?;
        Ok(seq.add(store.get(self.pos_enc))?)
    }

    pub fn encode(&self, store: &ParamStore, image: &Tensor) -> Result<FeatureMap> {
        let mut x = self.stem(store, image)?;
        for layer in &self.layers {
            x = layer.forward(store, &x)?;
        }
        let f = self.final_ln.forward(store, &x)?;
        let f_prime = self.key_proj.forward(store, &f.add(store.get(self.pos_key))?)?;
        Ok(FeatureMap {
            f,
            f_prime,
            spatial: self.cfg.grid(),
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn build(c: usize, hw: (usize, usize)) -> (ParamStore, TextBackbone) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BackboneConfig {
            c_model: c,
            n_enc_layers: 2,
            n_heads: 4,
            ff_dim: 4 * c,
            input_hw: hw,
        };
        let bb = TextBackbone::new(&mut Init::new(&mut store, &mut rng), cfg).unwrap();
        (store, bb)
    }

    #[test]
    fn output_is_quarter_resolution() {
        for (hw, grid) in [((32, 100), (8, 25)), ((16, 16), (4, 4))] {
            let (store, bb) = build(16, hw);
            let img = Tensor::full(&[3, hw.0, hw.1], 0.5);
            let fm = bb.encode(&store, &img).unwrap();
            assert_eq!(fm.to_chw(0).unwrap().shape(), &[16, grid.0, grid.1]);
            assert_eq!(fm.f_prime.shape(), fm.f.shape());
            assert_eq!(fm.positions(), grid.0 * grid.1);
        }
    }

    #[test]
    fn rejects_indivisible_and_mismatched_sizes() {
        let (store, bb) = build(8, (16, 16));
        assert!(bb.encode(&store, &Tensor::zeros(&[3, 18, 16])).is_err());
        assert!(bb.encode(&store, &Tensor::zeros(&[3, 16, 20])).is_err());
        assert!(bb.encode(&store, &Tensor::zeros(&[1, 16, 16])).is_err());
    }
}
