//! Dense-prediction heads: UperNet over four backbone taps, a from-scratch
//! UNet baseline, and the [`Segmenter`] wrapper the training loop drives.

use demmae_tensor::{ConvParams, Tensor, TensorError};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, ParamBuilder, ParamSet};
use crate::rng;
use crate::vit::VitEncoder;

const SAME3: ConvParams = ConvParams::new(1, 1);
const POINT: ConvParams = ConvParams::new(1, 0);
const UP2: ConvParams = ConvParams::new(2, 0);

/// Pooled output sizes of the pyramid pooling module.
pub const PPM_SCALES: [usize; 4] = [1, 2, 3, 6];

/// `[B×N×D]` tokens to a `[B×D×r×c]` map; `map[d, i, j] = tokens[i·c + j, d]`.
pub fn tokens_to_map(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (r, c) = grid;
    match *tokens.shape() {
        [b, n, d] if n == r * c => Ok(tokens.transpose(1, 2)?.reshape(&[b, d, r, c])?),
        _ => Err(TensorError::Dimension {
            op: "tokens_to_map",
            msg: format!("tokens {:?} do not fill a {r}x{c} grid", tokens.shape()),
        }
        .into()),
    }
}

/// Trainable resampling of the four taps to strides 4, 8, 16 and 32
/// (for patch 16): two stride-2 transposed convs, one transposed conv,
/// identity, 2× max-pool.
#[derive(Clone, Copy, Debug)]
pub struct PyramidNeck {
    pub up4_a: ConvTranspose2d,
    pub up4_b: ConvTranspose2d,
    pub up2: ConvTranspose2d,
}

impl PyramidNeck {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        let mut s = b.scope("neck");
        Ok(PyramidNeck {
            up4_a: ConvTranspose2d::new(&mut s, "up4_a", dim, dim, 2, UP2)?,
            up4_b: ConvTranspose2d::new(&mut s, "up4_b", dim, dim, 2, UP2)?,
            up2: ConvTranspose2d::new(&mut s, "up2", dim, dim, 2, UP2)?,
        })
    }
}

/// Reshapes each tap to a map and rescales it by 4×, 2×, 1× and ½×.
pub fn taps_to_pyramid(p: &ParamSet, neck: &PyramidNeck, taps: &[Tensor], grid: (usize, usize)) -> Result<Vec<Tensor>> {
    if taps.len() != 4 {
        return Err(Error::Contract(format!("pyramid needs 4 taps, got {}", taps.len())));
    }
    let maps = taps
        .iter()
        .map(|t| tokens_to_map(t, grid))
        .collect::<Result<Vec<_>>>()?;
    let l0 = neck.up4_b.forward(p, &neck.up4_a.forward(p, &maps[0])?.gelu())?;
    let l1 = neck.up2.forward(p, &maps[1])?;
    let l3 = maps[3].max_pool2d(2, 2)?;
    Ok(vec![l0, l1, maps[2].clone(), l3])
}

/// Pyramid pooling on the coarsest level.
#[derive(Clone, Debug)]
pub struct Ppm {
    pub branches: Vec<Conv2d>,
    pub bottleneck: Conv2d,
}

impl Ppm {
    pub fn new(b: &mut ParamBuilder, inp: usize, ch: usize) -> Result<Self> {
        let mut s = b.scope("ppm");
        let branches = PPM_SCALES
            .iter()
            .map(|k| Conv2d::new(&mut s, &format!("pool{k}"), inp, ch, 1, POINT))
            .collect::<Result<_>>()?;
        let bottleneck = Conv2d::new(&mut s, "bottleneck", inp + PPM_SCALES.len() * ch, ch, 3, SAME3)?;
        Ok(Ppm { branches, bottleneck })
    }

    /// Adaptive-pool to 1, 2, 3, 6 cells, 1×1 conv + ReLU per branch,
    /// bilinear back to the input size, concat with the input, 3×3 conv.
    pub fn forward(&self, p: &ParamSet, top: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = *top.shape() else {
            return Err(Error::Contract(format!("ppm expects a 4-d map, got {:?}", top.shape())));
        };
        let mut parts = vec![top.clone()];
        for (conv, &k) in self.branches.iter().zip(&PPM_SCALES) {
            let pooled = top.adaptive_avg_pool2d(k, k)?;
            parts.push(conv.forward(p, &pooled)?.relu().bilinear_resize(h, w)?);
        }
        Ok(self.bottleneck.forward(p, &Tensor::concat(&parts, 1)?)?.relu())
    }
}

/// UperNet decoder: neck, PPM, lateral 1×1 convs, top-down fusion, 3×3
/// smoothing, multi-level concat, fusion conv and a 1×1 classifier.
#[derive(Clone)]
pub struct UperNetHead {
    pub params: ParamSet,
    pub neck: PyramidNeck,
    pub ppm: Ppm,
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
    pub fuse: Conv2d,
    pub classifier: Conv2d,
    pub image_size: (usize, usize),
}

impl UperNetHead {
    pub fn new(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, ch) = (config.embed_dim, config.head_channels);
        let mut params = ParamSet::default();
        let mut b = ParamBuilder::new(&mut params, rng);
        let mut s = b.scope("head");
        let neck = PyramidNeck::new(&mut s, d)?;
        let ppm = Ppm::new(&mut s, d, ch)?;
        let laterals = (0..3)
            .map(|i| Conv2d::new(&mut s, &format!("lateral{i}"), d, ch, 1, POINT))
            .collect::<Result<_>>()?;
        let smooth = (0..3)
            .map(|i| Conv2d::new(&mut s, &format!("smooth{i}"), ch, ch, 3, SAME3))
            .collect::<Result<_>>()?;
        let fuse = Conv2d::new(&mut s, "fuse", 4 * ch, ch, 3, SAME3)?;
        let classifier = Conv2d::new(&mut s, "classifier", ch, config.n_classes, 1, POINT)?;
        Ok(UperNetHead {
            params,
            neck,
            ppm,
            laterals,
            smooth,
            fuse,
            classifier,
            image_size: (config.image_size, config.image_size),
        })
    }

    /// Top-down fusion of a pyramid into one map at the finest level.
    pub fn fpn_fuse(&self, pyramid: &[Tensor]) -> Result<Tensor> {
        let p = &self.params;
        let top = self.ppm.forward(p, &pyramid[3])?;
        let mut lat: Vec<Tensor> = self
            .laterals
            .iter()
            .zip(pyramid)
            .map(|(conv, x)| Ok(conv.forward(p, x)?.relu()))
            .collect::<Result<_>>()?;
        lat.push(top);
        for i in (0..3).rev() {
            let [_, _, h, w] = *lat[i].shape() else { unreachable!() };
            let up = lat[i + 1].bilinear_resize(h, w)?;
            lat[i] = lat[i].add(&up)?;
        }
        let [_, _, h0, w0] = *lat[0].shape() else { unreachable!() };
        let mut outs = Vec::with_capacity(4);
        for (i, l) in lat.iter().enumerate() {
            let o = match self.smooth.get(i) {
                Some(conv) => conv.forward(p, l)?.relu(),
                None => l.clone(),
            };
            outs.push(o.bilinear_resize(h0, w0)?);
        }
        Ok(self.fuse.forward(p, &Tensor::concat(&outs, 1)?)?.relu())
    }

    /// 1×1 classifier then bilinear resize to the input resolution.
    pub fn seg_logits(&self, fused: &Tensor) -> Result<Tensor> {
        let (h, w) = self.image_size;
        Ok(self.classifier.forward(&self.params, fused)?.bilinear_resize(h, w)?)
    }

    pub fn forward(&self, taps: &[Tensor], grid: (usize, usize)) -> Result<Tensor> {
        let pyramid = taps_to_pyramid(&self.params, &self.neck, taps, grid)?;
        self.seg_logits(&self.fpn_fuse(&pyramid)?)
    }
}

/// Two 3×3 convs with ReLU.
#[derive(Clone, Copy, Debug)]
pub struct DoubleConv {
    pub a: Conv2d,
    pub b: Conv2d,
}

impl DoubleConv {
    fn new(s: &mut ParamBuilder, name: &str, inp: usize, out: usize) -> Result<Self> {
        let mut s = s.scope(name);
        Ok(DoubleConv {
            a: Conv2d::new(&mut s, "conv1", inp, out, 3, SAME3)?,
            b: Conv2d::new(&mut s, "conv2", out, out, 3, SAME3)?,
        })
    }

    fn forward(&self, p: &ParamSet, x: &Tensor) -> Result<Tensor> {
        Ok(self.b.forward(p, &self.a.forward(p, x)?.relu())?.relu())
    }
}

pub const UNET_DEPTH: usize = 4;

#[derive(Clone)]
pub struct UNet {
    pub params: ParamSet,
    pub down: Vec<DoubleConv>,
    pub bottleneck: DoubleConv,
    pub up: Vec<(ConvTranspose2d, DoubleConv)>,
    pub classifier: Conv2d,
    /// Scales every skip tensor; 1 in normal use.
    pub skip_scale: f64,
}

impl UNet {
    pub fn new(in_channels: usize, base: usize, n_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut params = ParamSet::default();
        let mut b = ParamBuilder::new(&mut params, rng);
        let mut s = b.scope("unet");
        let widths: Vec<usize> = (0..=UNET_DEPTH).map(|i| base << i).collect();
        let mut down = Vec::new();
        let mut inp = in_channels;
        for (i, &w) in widths[..UNET_DEPTH].iter().enumerate() {
            down.push(DoubleConv::new(&mut s, &format!("down{i}"), inp, w)?);
            inp = w;
        }
        let bottleneck = DoubleConv::new(&mut s, "bottleneck", inp, widths[UNET_DEPTH])?;
        let mut up = Vec::new();
        for i in (0..UNET_DEPTH).rev() {
            let t = ConvTranspose2d::new(&mut s, &format!("up{i}.upconv"), widths[i + 1], widths[i], 2, UP2)?;
            let c = DoubleConv::new(&mut s, &format!("up{i}"), 2 * widths[i], widths[i])?;
            up.push((t, c));
        }
        let classifier = Conv2d::new(&mut s, "classifier", base, n_classes, 1, POINT)?;
        Ok(UNet {
            params,
            down,
            bottleneck,
            up,
            classifier,
            skip_scale: 1.0,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let p = &self.params;
        let [_, _, h, w] = *image.shape() else {
            return Err(Error::Contract(format!("unet expects [B, C, H, W], got {:?}", image.shape())));
        };
        let div = 1 << UNET_DEPTH;
        if h % div != 0 || w % div != 0 {
            return Err(TensorError::Dimension {
                op: "unet_forward",
                msg: format!("{h}x{w} not divisible by {div}"),
            }
            .into());
        }
        let mut skips = Vec::with_capacity(UNET_DEPTH);
        let mut x = image.clone();
        for level in &self.down {
            let y = level.forward(p, &x)?;
            x = y.max_pool2d(2, 2)?;
            skips.push(y);
        }
        x = self.bottleneck.forward(p, &x)?;
        for (upconv, conv) in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let skip = if self.skip_scale == 1.0 {
                skip
            } else {
                skip.mul_scalar(self.skip_scale)
            };
            let u = upconv.forward(p, &x)?;
            x = conv.forward(p, &Tensor::concat(&[skip, u], 1)?)?;
        }
        self.classifier.forward(p, &x)
    }
}

/// Which decoder a [`Segmenter`] uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    UperNet,
    UNet,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "upernet" => Ok(HeadKind::UperNet),
            "unet" => Ok(HeadKind::UNet),
            other => Err(Error::Config(format!("unknown head {other:?} (expected upernet or unet)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::UperNet => "upernet",
            HeadKind::UNet => "unet",
        }
    }
}

/// A complete image-to-logits model.
#[derive(Clone)]
pub enum Segmenter {
    UperNet { backbone: VitEncoder, head: UperNetHead },
    UNet { config: ModelConfig, net: UNet },
}

impl Segmenter {
    /// Fresh model; the UperNet variant gets a randomly initialized backbone
    /// that callers usually replace with pre-trained weights.
    pub fn new(kind: HeadKind, config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        match kind {
            HeadKind::UperNet => {
                let backbone = VitEncoder::new(config, &mut rng::stream(seed, &[0x004d_4145]))?;
                let head = UperNetHead::new(config, &mut rng::stream(seed, &[0x4845_4144]))?;
                Ok(Segmenter::UperNet { backbone, head })
            }
            HeadKind::UNet => {
                let mut r = rng::stream(seed, &[0x554e_4554]);
                let net = UNet::new(config.in_channels, config.unet_base_channels, config.n_classes, &mut r)?;
                Ok(Segmenter::UNet {
                    config: config.clone(),
                    net,
                })
            }
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Segmenter::UperNet { .. } => HeadKind::UperNet,
            Segmenter::UNet { .. } => HeadKind::UNet,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Segmenter::UperNet { backbone, .. } => &backbone.config,
            Segmenter::UNet { config, .. } => config,
        }
    }

    pub fn backbone(&self) -> Option<&VitEncoder> {
        match self {
            Segmenter::UperNet { backbone, .. } => Some(backbone),
            Segmenter::UNet { .. } => None,
        }
    }

    pub fn backbone_mut(&mut self) -> Option<&mut VitEncoder> {
        match self {
            Segmenter::UperNet { backbone, .. } => Some(backbone),
            Segmenter::UNet { .. } => None,
        }
    }

    /// Every parameter table, backbone first.
    pub fn param_sets(&self) -> Vec<&ParamSet> {
        match self {
            Segmenter::UperNet { backbone, head } => vec![&backbone.params, &head.params],
            Segmenter::UNet { net, .. } => vec![&net.params],
        }
    }

    pub fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        match self {
            Segmenter::UperNet { backbone, head } => vec![&mut backbone.params, &mut head.params],
            Segmenter::UNet { net, .. } => vec![&mut net.params],
        }
    }

    /// Freezes or unfreezes the backbone; no-op for the UNet.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        if let Some(b) = self.backbone_mut() {
            b.params.set_trainable(trainable);
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.backbone()
            .map(|b| b.params.iter().all(|(_, t)| !t.requires_grad()))
            .unwrap_or(false)
    }

    /// Backbone taps of `images`, or `None` for models without a backbone.
    pub fn features(&self, images: &Tensor) -> Result<Option<Vec<Tensor>>> {
        match self {
            Segmenter::UperNet { backbone, .. } => Ok(Some(backbone.encode(images, None)?.taps)),
            Segmenter::UNet { .. } => Ok(None),
        }
    }

    /// Logits from precomputed taps (UperNet) or from the image (UNet).
    pub fn logits_from(&self, images: &Tensor, taps: Option<&[Tensor]>) -> Result<Tensor> {
        match (self, taps) {
            (Segmenter::UperNet { backbone, head }, Some(taps)) => {
                let g = backbone.config.grid();
                head.forward(taps, (g, g))
            }
            (Segmenter::UperNet { .. }, None) => self.logits(images),
            (Segmenter::UNet { net, .. }, _) => net.forward(images),
        }
    }

    /// `[B×K×H×W]` class logits.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            Segmenter::UperNet { backbone, head } => {
                let enc = backbone.encode(images, None)?;
                head.forward(&enc.taps, enc.grid)
            }
            Segmenter::UNet { net, .. } => net.forward(images),
        }
    }
}

/// Per-pixel argmax over the class axis of `[B×K×H×W]` logits; ties go to
/// the lower class index.
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<u8>> {
    let [b, k, h, w] = *logits.shape() else {
        return Err(Error::Contract(format!("logits must be [B, K, H, W], got {:?}", logits.shape())));
    };
    let x = logits.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * plane);
    for i in 0..b {
        for px in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if x[(i * k + c) * plane + px] > x[(i * k + best) * plane + px] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn token_map_layout() {
        let t = Tensor::new((0..2 * 6 * 3).map(|v| v as f64).collect(), &[2, 6, 3]).unwrap();
        let m = tokens_to_map(&t, (2, 3)).unwrap();
        assert_eq!(m.shape(), &[2, 3, 2, 3]);
        let (r, c) = (1, 2);
        for b in 0..2 {
            for d in 0..3 {
                let map = m.data()[((b * 3 + d) * 2 + r) * 3 + c];
                let tok = t.data()[(b * 6 + r * 3 + c) * 3 + d];
                assert_eq!(map, tok);
            }
        }
        assert!(tokens_to_map(&t, (2, 2)).is_err());
    }

    #[test]
    fn pyramid_sizes_tiny() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = UperNetHead::new(&cfg, &mut rng).unwrap();
        let taps = vec![Tensor::zeros(&[1, 64, cfg.embed_dim]); 4];
        let pyr = taps_to_pyramid(&head.params, &head.neck, &taps, (8, 8)).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
    }

    #[test]
    fn pyramid_sizes_full_scale_grid() {
        let mut cfg = ModelConfig::tiny();
        cfg.image_size = 56;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = UperNetHead::new(&cfg, &mut rng).unwrap();
        let taps = vec![Tensor::zeros(&[1, 196, cfg.embed_dim]); 4];
        let pyr = taps_to_pyramid(&head.params, &head.neck, &taps, (14, 14)).unwrap();
        let sizes: Vec<usize> = pyr.iter().map(|l| l.shape()[2]).collect();
        assert_eq!(sizes, vec![56, 28, 14, 7]);
    }

    #[test]
    fn argmax_ties_pick_lower_class() {
        let l = Tensor::new(vec![1.0, 2.0, 1.0, 0.0], &[1, 2, 1, 2]).unwrap();
        assert_eq!(argmax_classes(&l).unwrap(), vec![0, 0]);
    }

    #[test]
    fn unet_rejects_indivisible_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(1, 2, 2, &mut rng).unwrap();
        assert!(net.forward(&Tensor::zeros(&[1, 1, 24, 24])).is_err());
        assert_eq!(net.forward(&Tensor::zeros(&[1, 1, 16, 16])).unwrap().shape(), &[1, 2, 16, 16]);
    }
}
