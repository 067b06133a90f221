//! The end-to-end network: dual encoder, transformer layer, decoder,
//! compositing and the refinement U-Net.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionKind, TransformerLayer};
use crate::error::{dim_err, Error, Result};
use crate::mask::ShadowMask;
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `C` of both encoders and the transformer.
    pub base_channels: usize,
    /// Spatial reduction of the encoders; two stride-2 stages.
    pub downsample_factor: usize,
    /// Number of stacked alignment blocks `N`.
    pub num_blocks: usize,
    pub mlp_ratio: usize,
    /// Residual blocks at the end of the shadow encoder.
    pub residual_blocks: usize,
    /// Stride-2 stages in the refinement U-Net.
    pub refine_levels: usize,
    /// Refinement width relative to `base_channels`.
    pub refine_channel_scale: f64,
    pub attention: AttentionKind,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 32,
            downsample_factor: 4,
            num_blocks: 2,
            mlp_ratio: 2,
            residual_blocks: 4,
            refine_levels: 3,
            refine_channel_scale: 0.5,
            attention: AttentionKind::default(),
            init_std: 0.02,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "base_channels must be a positive multiple of 4, got {c}"
            )));
        }
        if self.downsample_factor != 4 {
            return Err(Error::Config(format!(
                "downsample_factor is fixed at 4 (two stride-2 stages), got {}",
                self.downsample_factor
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.mlp_ratio == 0 || self.refine_levels == 0 {
            return Err(Error::Config("mlp_ratio and refine_levels must be positive".into()));
        }
        if !(self.refine_channel_scale > 0.0) || !(self.init_std >= 0.0) {
            return Err(Error::Config("refine_channel_scale and init_std must be positive".into()));
        }
        Ok(())
    }

    /// Input height and width must be multiples of this.
    pub fn divisibility(&self) -> usize {
        self.downsample_factor.max(1 << self.refine_levels)
    }

    pub fn refine_base_channels(&self) -> usize {
        ((self.base_channels as f64 * self.refine_channel_scale).round() as usize).max(4)
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.divisibility();
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(dim_err!("input {height}×{width} is not divisible by {d}"));
        }
        Ok(())
    }
}

/// Clamp used when mapping the composite into logit space.
const REFINE_LOGIT_EPS: f64 = 1e-3;

/// Square-kernel convolution with bias, "same" padding.
#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Conv {
            weight: store.add(format!("{name}.weight"), init.normal(&[cout, cin, kernel, kernel])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![cout])),
            stride,
            padding: kernel / 2,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), self.stride, self.padding)
    }

    fn forward_relu(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let y = self.forward(g, store, x)?;
        Ok(g.relu(y))
    }
}

/// Shallow context path: two fixed 3×3 average pools, then a 1×1 conv.
#[derive(Clone, Debug)]
struct NonShadowEncoder {
    adjust: Conv,
}

/// Deep query path over image and mask.
#[derive(Clone, Debug)]
struct ShadowEncoder {
    stem: Conv,
    down: [Conv; 2],
    residual: Vec<(Conv, Conv)>,
}

#[derive(Clone, Debug)]
struct Decoder {
    up: [Conv; 2],
    head: Conv,
}

#[derive(Clone, Debug)]
struct RefineNet {
    stem: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    head: Conv,
}

/// Outputs of one forward pass, all `3×H×W`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub deshadowed: Var,
    pub composite: Var,
    pub refined: Var,
}

/// Plain-tensor results of [`CrFormer::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub deshadowed: Tensor,
    pub composite: Tensor,
    pub refined: Tensor,
}

#[derive(Clone, Debug)]
pub struct CrFormer {
    config: ModelConfig,
    params: ParamStore,
    nonshadow: NonShadowEncoder,
    shadow: ShadowEncoder,
    transformer: TransformerLayer,
    decoder: Decoder,
    refine: RefineNet,
}

fn check_image(g: &Graph, image: Var) -> Result<(usize, usize)> {
    match *g.shape(image) {
        [3, h, w] => Ok((h, w)),
        ref s => Err(dim_err!("expected a 3×H×W image, got {:?}", s)),
    }
}

fn mask_var(g: &mut Graph, mask: &ShadowMask) -> Var {
    let t = Tensor::new(vec![1, mask.height(), mask.width()], mask.to_f64())
        .expect("mask dimensions are consistent");
    g.constant(t)
}

impl CrFormer {
    /// Builds a freshly initialized model; weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, config.init_std);
        let s = &mut store;
        let i = &mut init;

        let nonshadow = NonShadowEncoder {
            adjust: Conv::new(s, i, "nonshadow_encoder.adjust", 3, c, 1, 1),
        };
        let shadow = ShadowEncoder {
            stem: Conv::new(s, i, "shadow_encoder.stem", 4, c, 3, 1),
            down: [
                Conv::new(s, i, "shadow_encoder.down0", c, c, 3, 2),
                Conv::new(s, i, "shadow_encoder.down1", c, c, 3, 2),
            ],
            residual: (0..config.residual_blocks)
                .map(|r| {
                    (
                        Conv::new(s, i, &format!("shadow_encoder.res{r}.conv0"), c, c, 3, 1),
                        Conv::new(s, i, &format!("shadow_encoder.res{r}.conv1"), c, c, 3, 1),
                    )
                })
                .collect(),
        };
        let transformer = TransformerLayer::new(
            s,
            i,
            c,
            config.num_blocks,
            config.mlp_ratio,
            config.attention,
            config.layer_norm_eps,
        )?;
        let decoder = Decoder {
            up: [
                Conv::new(s, i, "decoder.up0", c, c, 3, 1),
                Conv::new(s, i, "decoder.up1", c, c, 3, 1),
            ],
            head: Conv::new(s, i, "decoder.head", c, 3, 3, 1),
        };
        let rc = config.refine_base_channels();
        let width = |level: usize| rc << level;
        let levels = config.refine_levels;
        let refine = RefineNet {
            stem: Conv::new(s, i, "refine.stem", 4, width(0), 3, 1),
            down: (1..=levels)
                .map(|l| Conv::new(s, i, &format!("refine.down{l}"), width(l - 1), width(l), 3, 2))
                .collect(),
            up: (1..=levels)
                .map(|l| {
                    Conv::new(
                        s,
                        i,
                        &format!("refine.up{l}"),
                        width(l) + width(l - 1),
                        width(l - 1),
                        3,
                        1,
                    )
                })
                .collect(),
            head: Conv::new(s, i, "refine.head", width(0) + 4, 3, 3, 1),
        };
        Ok(CrFormer {
            config,
            params: store,
            nonshadow,
            shadow,
            transformer,
            decoder,
            refine,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn transformer(&self) -> &TransformerLayer {
        &self.transformer
    }

    /// Non-shadow path: `3×H×W → C×H/4×W/4`. Never sees the mask.
    pub fn encode_nonshadow(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let (h, w) = check_image(g, image)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err!("encoder input {h}×{w} is not divisible by 4"));
        }
        let x = g.avg_pool(image, 3, 2, 1)?;
        let x = g.avg_pool(x, 3, 2, 1)?;
        self.nonshadow.adjust.forward_relu(g, &self.params, x)
    }

    /// Shadow path over the 4-channel image+mask stack: `→ C×H/4×W/4`.
    pub fn encode_shadow(&self, g: &mut Graph, image: Var, mask: &ShadowMask) -> Result<Var> {
        let (h, w) = check_image(g, image)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(dim_err!("encoder input {h}×{w} is not divisible by 4"));
        }
        if (mask.height(), mask.width()) != (h, w) {
            return Err(dim_err!(
                "mask {}×{} does not match image {h}×{w}",
                mask.height(),
                mask.width()
            ));
        }
        let m = mask_var(g, mask);
        let stacked = g.concat_channels(&[image, m])?;
        let p = &self.params;
        let mut x = self.shadow.stem.forward_relu(g, p, stacked)?;
        for conv in &self.shadow.down {
            x = conv.forward_relu(g, p, x)?;
        }
        for (a, b) in &self.shadow.residual {
            let y = a.forward_relu(g, p, x)?;
            let y = b.forward(g, p, y)?;
            x = g.add(x, y)?;
        }
        Ok(x)
    }

    /// Two (upsample, 3×3 conv, ReLU) stages, then a 3×3 conv to RGB and a sigmoid.
    pub fn decode(&self, g: &mut Graph, features: Var) -> Result<Var> {
        match *g.shape(features) {
            [c, _, _] if c == self.config.base_channels => {}
            ref s => return Err(dim_err!("decoder expects {} channels, got {:?}", self.config.base_channels, s)),
        }
        let mut x = features;
        for conv in &self.decoder.up {
            x = g.upsample2x(x)?;
            x = conv.forward_relu(g, &self.params, x)?;
        }
        let y = self.decoder.head.forward(g, &self.params, x)?;
        Ok(g.sigmoid(y))
    }

    /// U-shaped refinement of the composite image, conditioned on the mask.
    ///
    /// The head predicts a correction in logit space on top of the composite,
    /// `I^r = σ(logit(I^c) + head(…))`, so a near-zero head passes `I^c`
    /// through almost unchanged.
    pub fn refine(&self, g: &mut Graph, composite: Var, mask: &ShadowMask) -> Result<Var> {
        let (h, w) = check_image(g, composite)?;
        let d = 1 << self.config.refine_levels;
        if h % d != 0 || w % d != 0 {
            return Err(dim_err!("refinement input {h}×{w} is not divisible by {d}"));
        }
        if (mask.height(), mask.width()) != (h, w) {
            return Err(dim_err!("mask does not match refinement input"));
        }
        let p = &self.params;
        let m = mask_var(g, mask);
        let input = g.concat_channels(&[composite, m])?;
        let mut skips = vec![self.refine.stem.forward_relu(g, p, input)?];
        for conv in &self.refine.down {
            let x = conv.forward_relu(g, p, *skips.last().expect("non-empty"))?;
            skips.push(x);
        }
        let mut x = skips.pop().expect("deepest level");
        for conv in self.refine.up.iter().rev() {
            let up = g.upsample2x(x)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = g.concat_channels(&[up, skip])?;
            x = conv.forward_relu(g, p, cat)?;
        }
        let cat = g.concat_channels(&[x, input])?;
        let y = self.refine.head.forward(g, p, cat)?;
        let base = g.logit(composite, REFINE_LOGIT_EPS);
        let z = g.add(base, y)?;
        Ok(g.sigmoid(z))
    }

    /// Full pipeline on a `3×H×W` image and its full-resolution mask.
    pub fn forward(&self, g: &mut Graph, image: Var, mask: &ShadowMask) -> Result<ForwardOutput> {
        let (h, w) = check_image(g, image)?;
        self.config.check_input(h, w)?;
        let fkv = self.encode_nonshadow(g, image)?;
        let fq = self.encode_shadow(g, image, mask)?;
        let small = mask.downsample(self.config.downsample_factor)?;
        let (c, fh, fw) = (self.config.base_channels, h / 4, w / 4);
        let q = to_tokens(g, fq)?;
        let kv = to_tokens(g, fkv)?;
        let t = self.transformer.forward(g, &self.params, q, kv, &small)?;
        let features = from_tokens(g, t, c, fh, fw)?;
        let deshadowed = self.decode(g, features)?;
        let composite = g.composite(deshadowed, image, &mask.to_f64())?;
        let refined = self.refine(g, composite, mask)?;
        Ok(ForwardOutput {
            deshadowed,
            composite,
            refined,
        })
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, image: &Tensor, mask: &ShadowMask) -> Result<Prediction> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, x, mask)?;
        Ok(Prediction {
            deshadowed: g.tensor(out.deshadowed),
            composite: g.tensor(out.composite),
            refined: g.tensor(out.refined),
        })
    }
}

/// `C×H×W` feature map to `[HW × C]` tokens.
pub fn to_tokens(g: &mut Graph, features: Var) -> Result<Var> {
    let (c, h, w) = match *g.shape(features) {
        [c, h, w] => (c, h, w),
        ref s => return Err(dim_err!("expected C×H×W features, got {:?}", s)),
    };
    let flat = g.reshape(features, &[c, h * w])?;
    g.transpose(flat)
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(g: &mut Graph, tokens: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let t = g.transpose(tokens)?;
    g.reshape(t, &[c, h, w])
}

/// `M ∘ pred + (1 − M) ∘ input`, mask broadcast across channels.
pub fn composite(pred: &Tensor, input: &Tensor, mask: &ShadowMask) -> Result<Tensor> {
    if pred.shape() != input.shape() {
        return Err(dim_err!(
            "composite: {:?} vs {:?}",
            pred.shape(),
            input.shape()
        ));
    }
    match *pred.shape() {
        [_, h, w] if (h, w) == (mask.height(), mask.width()) => {}
        ref s => {
            return Err(dim_err!(
                "composite: image {:?} vs mask {}×{}",
                s,
                mask.height(),
                mask.width()
            ))
        }
    }
    let mut g = Graph::new();
    let (p, s) = (g.constant(pred.clone()), g.constant(input.clone()));
    let out = g.composite(p, s, &mask.to_f64())?;
    Ok(g.tensor(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_grad, relative_error};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            base_channels: 8,
            residual_blocks: 1,
            refine_levels: 2,
            init_std: 0.2,
            ..ModelConfig::default()
        }
    }

    fn test_image(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(vec![3, h, w], |i| 0.5 + 0.4 * ((i as f64) * 0.173).sin())
    }

    fn blob_mask(h: usize, w: usize) -> ShadowMask {
        let mut m = ShadowMask::filled(h, w, false);
        for y in h / 4..h / 2 {
            for x in w / 4..3 * w / 4 {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            base_channels: 6,
            ..ModelConfig::default()
        };
        assert!(matches!(CrFormer::new(bad, 0), Err(Error::Config(_))));
        let bad = ModelConfig {
            num_blocks: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(ModelConfig::default().divisibility(), 8);
    }

    #[test]
    fn encoder_shapes_and_mask_dependence() {
        let model = CrFormer::new(
            ModelConfig {
                base_channels: 8,
                residual_blocks: 1,
                ..ModelConfig::default()
            },
            3,
        )
        .unwrap();
        let img = test_image(64, 64);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let kv = model.encode_nonshadow(&mut g, x).unwrap();
        assert_eq!(g.shape(kv), &[8, 16, 16]);
        let m1 = blob_mask(64, 64);
        let q1 = model.encode_shadow(&mut g, x, &m1).unwrap();
        assert_eq!(g.shape(q1), &[8, 16, 16]);
        let q0 = model.encode_shadow(&mut g, x, &ShadowMask::filled(64, 64, false)).unwrap();
        assert_ne!(g.value(q0), g.value(q1));

        let odd = g.constant(test_image(30, 32));
        assert!(matches!(model.encode_nonshadow(&mut g, odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn nonshadow_features_are_constant_inside() {
        let model = CrFormer::new(tiny_config(), 1).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 32, 32], 0.6));
        let f = model.encode_nonshadow(&mut g, x).unwrap();
        let v = g.value(f);
        // Rows/cols ≥ 1 of the 8×8 map only see the interior of both pools.
        for c in 0..8 {
            let base = v[c * 64 + 9];
            for y in 1..8 {
                for xx in 1..8 {
                    assert!((v[c * 64 + y * 8 + xx] - base).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decoder_range_and_shape() {
        let model = CrFormer::new(tiny_config(), 2).unwrap();
        let mut g = Graph::new();
        let f = g.constant(Tensor::from_fn(vec![8, 4, 4], |i| 50.0 * ((i as f64) * 1.3).sin()));
        let out = model.decode(&mut g, f).unwrap();
        assert_eq!(g.shape(out), &[3, 16, 16]);
        assert!(g.value(out).iter().all(|v| (0.0..=1.0).contains(v)));
        let again = model.decode(&mut g, f).unwrap();
        assert_eq!(g.value(out), g.value(again));
    }

    #[test]
    fn composite_examples() {
        let pred = Tensor::from_fn(vec![3, 2, 2], |i| i as f64 / 12.0);
        let input = Tensor::from_fn(vec![3, 2, 2], |i| 1.0 - i as f64 / 24.0);
        assert_eq!(composite(&pred, &input, &ShadowMask::filled(2, 2, true)).unwrap(), pred);
        assert_eq!(composite(&pred, &input, &ShadowMask::filled(2, 2, false)).unwrap(), input);
        let mut m = ShadowMask::filled(2, 2, false);
        m.set(1, 0, true);
        let c = composite(&pred, &input, &m).unwrap();
        for i in 0..12 {
            if i % 4 == 2 {
                assert_eq!(c.data()[i], pred.data()[i]);
            } else {
                assert_eq!(c.data()[i], input.data()[i]);
            }
        }
        assert!(composite(&pred, &input, &ShadowMask::filled(3, 2, false)).is_err());
    }

    #[test]
    fn forward_shapes_and_empty_mask_identity() {
        let model = CrFormer::new(tiny_config(), 5).unwrap();
        let img = test_image(16, 16);
        let p = model.predict(&img, &blob_mask(16, 16)).unwrap();
        assert_eq!(p.deshadowed.shape(), &[3, 16, 16]);
        assert_eq!(p.refined.shape(), &[3, 16, 16]);
        assert!(p.refined.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let p0 = model.predict(&img, &ShadowMask::filled(16, 16, false)).unwrap();
        assert_eq!(p0.composite, img);
        assert!(model.predict(&test_image(18, 16), &ShadowMask::filled(18, 16, false)).is_err());
    }

    #[test]
    fn parameter_count_grows_by_one_block() {
        let count = |n| {
            CrFormer::new(
                ModelConfig {
                    num_blocks: n,
                    ..tiny_config()
                },
                0,
            )
            .unwrap()
        };
        let (m1, m2, m3) = (count(1), count(2), count(3));
        assert!(m1.num_parameters() < m2.num_parameters());
        let block = m3.transformer().blocks[2].num_scalars(m3.params());
        assert_eq!(m3.num_parameters() - m2.num_parameters(), block);
    }

    #[test]
    fn shadow_encoder_gradcheck() {
        let model = CrFormer::new(tiny_config(), 9).unwrap();
        let mask = blob_mask(8, 8);
        let img = test_image(8, 8);
        let eval = |m: &CrFormer, x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let f = m.encode_shadow(&mut g, xv, &mask).unwrap();
            let w = g.constant(Tensor::from_fn(g.shape(f).to_vec(), |i| ((i as f64) * 0.7).cos()));
            let p = g.mul(f, w).unwrap();
            let loss = g.sum(p);
            (g, xv, loss)
        };
        let (g, xv, loss) = eval(&model, &img.clone().with_requires_grad(true));
        let grads = g.backward(loss).unwrap();
        let analytic = grads.wrt(xv).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let (g, _, loss) = eval(&model, probe);
                g.value(loss)[0]
            },
            &img,
            1e-6,
        );
        let err = relative_error(&analytic, numeric.data());
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn refine_gradcheck() {
        let model = CrFormer::new(tiny_config(), 11).unwrap();
        let mask = blob_mask(16, 16);
        let img = test_image(16, 16);
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.leaf(x);
            let r = model.refine(&mut g, xv, &mask).unwrap();
            let w = g.constant(Tensor::from_fn(vec![3, 16, 16], |i| ((i as f64) * 0.3).sin()));
            let p = g.mul(r, w).unwrap();
            let loss = g.sum(p);
            (g, xv, loss)
        };
        let (g, xv, loss) = eval(&img.clone().with_requires_grad(true));
        let analytic = g.backward(loss).unwrap().wrt(xv).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let (g, _, loss) = eval(probe);
                g.value(loss)[0]
            },
            &img,
            1e-6,
        );
        let err = relative_error(&analytic, numeric.data());
        assert!(err < 1e-5, "{err}");
    }
}
