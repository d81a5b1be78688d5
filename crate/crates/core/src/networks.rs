//! Architecture presets and the four networks: encoder, decoder, latent
//! generator, and the discriminator whose trunk also feeds the code-posterior
//! heads.
//!
//! Layer rows use the compact table notation `c4-o16-s2-r` (conv, kernel 4,
//! 16 outputs, stride 2, relu), `u2-c3-o64-p1-bn64-r` (bilinear ×2 upsample,
//! then conv, batch-norm, relu) and `fc-o1000-r`.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codes::CodeSpec;
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::nn::{conv_out_len, sigmoid, Activation, BatchNorm2d, Conv2d, Layer, Linear, Mode, Param, Sequential, Upsample};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetName {
    Mnist,
    Chair3d,
    Celeba,
    /// Small network used by the gradient checks.
    Tiny,
}

impl PresetName {
    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Mnist => "mnist",
            PresetName::Chair3d => "chair3d",
            PresetName::Celeba => "celeba",
            PresetName::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(PresetName::Mnist),
            "chair3d" => Ok(PresetName::Chair3d),
            "celeba" => Ok(PresetName::Celeba),
            "tiny" => Ok(PresetName::Tiny),
            _ => Err(Error::Argument(format!("unknown preset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowKind {
    Conv,
    Fc,
}

/// One row of an architecture table.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub kind: RowKind,
    pub out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Bilinear upsampling factor applied before the layer; 1 for none.
    pub upsample: usize,
    pub pre_relu: bool,
    pub batch_norm: bool,
    pub activation: Option<Activation>,
}

impl LayerRow {
    pub fn conv(out: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: RowKind::Conv,
            out,
            kernel,
            stride,
            padding,
            upsample: 1,
            pre_relu: false,
            batch_norm: false,
            activation: Some(Activation::Relu),
        }
    }

    pub fn fc(out: usize, activation: Option<Activation>) -> Self {
        Self {
            kind: RowKind::Fc,
            out,
            kernel: 0,
            stride: 0,
            padding: 0,
            upsample: 1,
            pre_relu: false,
            batch_norm: false,
            activation,
        }
    }

    /// `u{factor}-c3-o{out}-p1`, optionally followed by batch-norm.
    pub fn up_conv(factor: usize, out: usize, batch_norm: bool, activation: Activation) -> Self {
        Self {
            kind: RowKind::Conv,
            out,
            kernel: 3,
            stride: 1,
            padding: 1,
            upsample: factor,
            pre_relu: false,
            batch_norm,
            activation: Some(activation),
        }
    }

    fn with_pre_relu(mut self) -> Self {
        self.pre_relu = true;
        self
    }
}

impl fmt::Display for LayerRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.pre_relu {
            parts.push("r".to_string());
        }
        if self.upsample > 1 {
            parts.push(format!("u{}", self.upsample));
        }
        match self.kind {
            RowKind::Conv => {
                parts.push(format!("c{}", self.kernel));
                parts.push(format!("o{}", self.out));
                if self.stride != 1 {
                    parts.push(format!("s{}", self.stride));
                }
                if self.padding != 0 && self.upsample > 1 {
                    parts.push(format!("p{}", self.padding));
                }
            }
            RowKind::Fc => {
                parts.push("fc".into());
                parts.push(format!("o{}", self.out));
            }
        }
        if self.batch_norm {
            parts.push(format!("bn{}", self.out));
        }
        match self.activation {
            Some(Activation::Relu) => parts.push("r".into()),
            Some(Activation::Tanh) => parts.push("tanh".into()),
            Some(Activation::Sigmoid) => parts.push("sig".into()),
            None => {}
        }
        write!(f, "{}", parts.join("-"))
    }
}

/// Complete architecture description for one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchPreset {
    pub name: PresetName,
    /// `(channels, height, width)`.
    pub image_shape: (usize, usize, usize),
    pub latent_dim: usize,
    pub code_spec: CodeSpec,
    pub encoder: Vec<LayerRow>,
    pub decoder: Vec<LayerRow>,
    pub generator: Vec<LayerRow>,
    /// Shared trunk; the D head and the Q heads follow it.
    pub dq_trunk: Vec<LayerRow>,
}

fn stride2_convs(channels: &[usize]) -> Vec<LayerRow> {
    channels.iter().map(|&c| LayerRow::conv(c, 4, 2, 1)).collect()
}

fn fc_relu(widths: &[usize]) -> Vec<LayerRow> {
    widths.iter().map(|&w| LayerRow::fc(w, Some(Activation::Relu))).collect()
}

fn decoder_rows(first: usize, middle: &[usize], out_channels: usize) -> Vec<LayerRow> {
    let mut rows = vec![LayerRow::up_conv(4, first, true, Activation::Relu).with_pre_relu()];
    rows.extend(middle.iter().map(|&c| LayerRow::up_conv(2, c, true, Activation::Relu)));
    rows.push(LayerRow::up_conv(2, out_channels, false, Activation::Tanh));
    rows
}

impl ArchPreset {
    pub fn get(name: PresetName) -> Self {
        match name {
            PresetName::Mnist => Self::mnist(),
            PresetName::Chair3d => Self::chair3d(),
            PresetName::Celeba => Self::celeba(),
            PresetName::Tiny => Self::tiny(),
        }
    }

    /// 1×32×32 images, 64-d latent, noise 64 + Cat(10) + 2 uniform codes.
    pub fn mnist() -> Self {
        let latent = 64;
        let mut encoder = stride2_convs(&[16, 32, 64, 128, 128]);
        encoder.push(LayerRow::fc(latent, None));
        let mut generator = fc_relu(&[1000, 1000, 1000]);
        generator.push(LayerRow::fc(latent, None));
        Self {
            name: PresetName::Mnist,
            image_shape: (1, 32, 32),
            latent_dim: latent,
            code_spec: CodeSpec {
                noise_dim: 64,
                categoricals: vec![10],
                continuous: vec![(-1.0, 1.0); 2],
                traversal_range: (-1.5, 1.5),
            },
            encoder,
            decoder: decoder_rows(128, &[64, 32], 1),
            generator,
            dq_trunk: fc_relu(&[1000, 1000, 512]),
        }
    }

    /// 1×64×64 images, 128-d latent, noise 128 + 3×Cat(20) + 2 uniform codes.
    pub fn chair3d() -> Self {
        let latent = 128;
        let mut encoder = stride2_convs(&[64, 128, 256, 512, 1024, 128]);
        encoder.push(LayerRow::fc(latent, None));
        let mut generator = fc_relu(&[3000, 3000, 3000, 3000]);
        generator.push(LayerRow::fc(latent, None));
        Self {
            name: PresetName::Chair3d,
            image_shape: (1, 64, 64),
            latent_dim: latent,
            code_spec: CodeSpec {
                noise_dim: 128,
                categoricals: vec![20; 3],
                continuous: vec![(-1.0, 1.0); 2],
                traversal_range: (-1.0, 1.0),
            },
            encoder,
            decoder: decoder_rows(512, &[256, 128, 64], 1),
            generator,
            dq_trunk: fc_relu(&[3000, 3000, 3000, 512]),
        }
    }

    /// 3×32×32 images, 128-d latent, noise 128 + 10×Cat(10).
    pub fn celeba() -> Self {
        let latent = 128;
        let mut encoder = stride2_convs(&[64, 128, 256, 512, 128]);
        encoder.push(LayerRow::fc(latent, None));
        let mut generator = fc_relu(&[3000, 3000, 3000, 3000]);
        generator.push(LayerRow::fc(latent, None));
        Self {
            name: PresetName::Celeba,
            image_shape: (3, 32, 32),
            latent_dim: latent,
            code_spec: CodeSpec {
                noise_dim: 128,
                categoricals: vec![10; 10],
                continuous: vec![],
                traversal_range: (-1.5, 1.5),
            },
            encoder,
            decoder: decoder_rows(512, &[256, 128], 3),
            generator,
            dq_trunk: fc_relu(&[3000, 3000, 3000, 512]),
        }
    }

    /// 1×4×4 images, 8-d latent, two convolutions per side.
    pub fn tiny() -> Self {
        let latent = 8;
        Self {
            name: PresetName::Tiny,
            image_shape: (1, 4, 4),
            latent_dim: latent,
            code_spec: CodeSpec {
                noise_dim: 4,
                categoricals: vec![3],
                continuous: vec![(-1.0, 1.0)],
                traversal_range: (-1.5, 1.5),
            },
            encoder: vec![LayerRow::conv(4, 4, 2, 1), LayerRow::conv(8, 4, 2, 1), LayerRow::fc(latent, None)],
            decoder: vec![
                LayerRow::up_conv(2, 4, true, Activation::Relu).with_pre_relu(),
                LayerRow::up_conv(2, 1, false, Activation::Tanh),
            ],
            generator: vec![LayerRow::fc(16, Some(Activation::Relu)), LayerRow::fc(latent, None)],
            dq_trunk: fc_relu(&[16]),
        }
    }
}

fn construction(net: &str, i: usize, row: &LayerRow, reason: impl Into<String>) -> Error {
    Error::Construction {
        layer: format!("{net} row {i} ({row})"),
        reason: reason.into(),
    }
}

fn push_activation<T: Real>(layers: &mut Vec<Layer<T>>, act: Option<Activation>) {
    if let Some(a) = act {
        layers.push(Layer::activation(a));
    }
}

/// Conv chain ending in 1×1, flattened into fully connected rows.
fn build_encoder<T: Real>(preset: &ArchPreset, rng: &mut ChaCha8Rng) -> Result<Sequential<T>> {
    let (mut c, mut h, mut w) = preset.image_shape;
    let mut layers = Vec::new();
    let mut flat: Option<usize> = None;
    for (i, row) in preset.encoder.iter().enumerate() {
        match row.kind {
            RowKind::Conv => {
                if flat.is_some() {
                    return Err(construction("enc", i, row, "convolution after projection"));
                }
                let (ho, wo) = match (
                    conv_out_len(h, row.kernel, row.stride, row.padding),
                    conv_out_len(w, row.kernel, row.stride, row.padding),
                ) {
                    (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
                    _ => return Err(construction("enc", i, row, format!("input {h}×{w} too small"))),
                };
                layers.push(Layer::Conv2d(Conv2d::new(c, row.out, row.kernel, row.stride, row.padding, rng)));
                push_activation(&mut layers, row.activation);
                (c, h, w) = (row.out, ho, wo);
            }
            RowKind::Fc => {
                let fin = match flat {
                    Some(f) => f,
                    None => {
                        if (h, w) != (1, 1) {
                            return Err(construction(
                                "enc",
                                i,
                                row,
                                format!("feature map is {h}×{w}, expected 1×1 before projection"),
                            ));
                        }
                        layers.push(Layer::Flatten(None));
                        c
                    }
                };
                layers.push(Layer::Linear(Linear::new(fin, row.out, rng)));
                push_activation(&mut layers, row.activation);
                flat = Some(row.out);
            }
        }
    }
    if flat != Some(preset.latent_dim) {
        return Err(Error::Construction {
            layer: "enc".into(),
            reason: format!("output width {flat:?}, expected {}", preset.latent_dim),
        });
    }
    Ok(Sequential::new(layers))
}

/// Latent viewed as `latent_dim × 1 × 1`, then upsample/conv stages.
fn build_decoder<T: Real>(preset: &ArchPreset, rng: &mut ChaCha8Rng) -> Result<Sequential<T>> {
    let (ic, ih, iw) = preset.image_shape;
    let (mut c, mut h, mut w) = (preset.latent_dim, 1usize, 1usize);
    let mut layers = vec![Layer::ToMap];
    for (i, row) in preset.decoder.iter().enumerate() {
        if row.kind != RowKind::Conv {
            return Err(construction("dec", i, row, "decoder rows must be convolutions"));
        }
        if row.pre_relu {
            layers.push(Layer::relu());
        }
        if row.upsample > 1 {
            layers.push(Layer::Upsample(Upsample::new(row.upsample)));
            h *= row.upsample;
            w *= row.upsample;
        }
        let (ho, wo) = match (
            conv_out_len(h, row.kernel, row.stride, row.padding),
            conv_out_len(w, row.kernel, row.stride, row.padding),
        ) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(construction("dec", i, row, format!("input {h}×{w} too small"))),
        };
        layers.push(Layer::Conv2d(Conv2d::new(c, row.out, row.kernel, row.stride, row.padding, rng)));
        if row.batch_norm {
            layers.push(Layer::BatchNorm(BatchNorm2d::new(row.out)));
        }
        push_activation(&mut layers, row.activation);
        (c, h, w) = (row.out, ho, wo);
        if h > ih || w > iw {
            return Err(construction("dec", i, row, format!("{h}×{w} overshoots target {ih}×{iw}")));
        }
    }
    if (c, h, w) != (ic, ih, iw) {
        return Err(Error::Construction {
            layer: "dec".into(),
            reason: format!("output {c}×{h}×{w}, expected {ic}×{ih}×{iw}"),
        });
    }
    Ok(Sequential::new(layers))
}

fn build_mlp<T: Real>(net: &str, rows: &[LayerRow], input: usize, rng: &mut ChaCha8Rng) -> Result<(Sequential<T>, usize)> {
    let mut layers = Vec::new();
    let mut width = input;
    for (i, row) in rows.iter().enumerate() {
        if row.kind != RowKind::Fc {
            return Err(construction(net, i, row, "expected a fully connected row"));
        }
        layers.push(Layer::Linear(Linear::new(width, row.out, rng)));
        push_activation(&mut layers, row.activation);
        width = row.out;
    }
    Ok((Sequential::new(layers), width))
}

/// Code-posterior head outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CodePosterior<T> {
    /// One `N × K_i` logit tensor per categorical code.
    pub cat_logits: Vec<Tensor<T>>,
    /// `N × |continuous|` Gaussian means (unit variance).
    pub cont_means: Tensor<T>,
}

/// Discriminator trunk shared by the real/fake head and the code heads.
#[derive(Clone, Debug)]
pub struct DqNet<T> {
    pub trunk: Sequential<T>,
    pub d_head: Linear<T>,
    pub cont_head: Option<Linear<T>>,
    pub cat_heads: Vec<Linear<T>>,
}

/// Raw discriminator outputs: the real/fake logit and the code posterior.
#[derive(Clone, Debug)]
pub struct DqOutput<T> {
    /// `N × 1` logits; the real probability is their sigmoid.
    pub d_logits: Tensor<T>,
    pub posterior: CodePosterior<T>,
}

impl<T: Real> DqOutput<T> {
    pub fn real_prob(&self) -> Vec<T> {
        self.d_logits.data().iter().map(|&l| sigmoid(l)).collect()
    }
}

impl<T: Real> DqNet<T> {
    fn heads(&self, h: &Tensor<T>) -> DqOutput<T> {
        let n = h.rows();
        DqOutput {
            d_logits: self.d_head.infer(h),
            posterior: CodePosterior {
                cat_logits: self.cat_heads.iter().map(|q| q.infer(h)).collect(),
                cont_means: self.cont_head.as_ref().map_or_else(|| Tensor::zeros(&[n, 0]), |q| q.infer(h)),
            },
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> DqOutput<T> {
        self.heads(&self.trunk.infer(x))
    }

    /// Trunk features only.
    pub fn features(&self, x: &Tensor<T>) -> Tensor<T> {
        self.trunk.infer(x)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> DqOutput<T> {
        let h = self.trunk.forward(x, Mode::Train);
        let n = h.rows();
        DqOutput {
            d_logits: self.d_head.forward(&h),
            posterior: CodePosterior {
                cat_logits: self.cat_heads.iter_mut().map(|q| q.forward(&h)).collect(),
                cont_means: match self.cont_head.as_mut() {
                    Some(q) => q.forward(&h),
                    None => Tensor::zeros(&[n, 0]),
                },
            },
        }
    }

    /// Backpropagates head gradients through the trunk, returning the input
    /// gradient. Absent heads contribute nothing and their parameters are untouched.
    pub fn backward(&mut self, d_grad: Option<&Tensor<T>>, q_grad: Option<(&[Tensor<T>], &Tensor<T>)>) -> Tensor<T> {
        let mut dh: Option<Tensor<T>> = None;
        let mut add = |g: Tensor<T>| match dh.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => dh = Some(g),
        };
        if let Some(g) = d_grad {
            add(self.d_head.backward(g));
        }
        if let Some((cat, cont)) = q_grad {
            for (head, g) in self.cat_heads.iter_mut().zip(cat) {
                add(head.backward(g));
            }
            if let Some(head) = self.cont_head.as_mut() {
                add(head.backward(cont));
            }
        }
        let dh = dh.expect("discriminator backward needs at least one head gradient");
        self.trunk.backward(&dh)
    }

    pub fn visit_trunk_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.trunk.visit_params_mut("dq", f);
    }

    pub fn visit_d_head_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f("d_head.0.weight", &mut self.d_head.weight);
        f("d_head.0.bias", &mut self.d_head.bias);
    }

    pub fn visit_q_heads_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(h) = self.cont_head.as_mut() {
            f("q_cont.0.weight", &mut h.weight);
            f("q_cont.0.bias", &mut h.bias);
        }
        for (i, h) in self.cat_heads.iter_mut().enumerate() {
            f(&format!("q_cat{i}.0.weight"), &mut h.weight);
            f(&format!("q_cat{i}.0.bias"), &mut h.bias);
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.trunk.visit_params("dq", f);
        f("d_head.0.weight", &self.d_head.weight);
        f("d_head.0.bias", &self.d_head.bias);
        if let Some(h) = self.cont_head.as_ref() {
            f("q_cont.0.weight", &h.weight);
            f("q_cont.0.bias", &h.bias);
        }
        for (i, h) in self.cat_heads.iter().enumerate() {
            f(&format!("q_cat{i}.0.weight"), &h.weight);
            f(&format!("q_cat{i}.0.bias"), &h.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.visit_trunk_mut(f);
        self.visit_d_head_mut(f);
        self.visit_q_heads_mut(f);
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }
}

/// Generator plus discriminator/posterior network over latent vectors.
#[derive(Clone, Debug)]
pub struct LatentGan<T> {
    pub code_spec: CodeSpec,
    pub latent_dim: usize,
    pub gen: Sequential<T>,
    pub dq: DqNet<T>,
}

impl<T: Real> LatentGan<T> {
    pub fn new(
        code_spec: &CodeSpec,
        latent_dim: usize,
        generator: &[LayerRow],
        dq_trunk: &[LayerRow],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        code_spec.validate()?;
        let (gen, gout) = build_mlp("gen", generator, code_spec.input_dim(), rng)?;
        if gout != latent_dim {
            return Err(Error::Construction {
                layer: "gen".into(),
                reason: format!("output width {gout}, expected latent dim {latent_dim}"),
            });
        }
        let (trunk, width) = build_mlp("dq", dq_trunk, latent_dim, rng)?;
        let d_head = Linear::new(width, 1, rng);
        let cont_head = (!code_spec.continuous.is_empty()).then(|| Linear::new(width, code_spec.continuous.len(), rng));
        let cat_heads = code_spec.categoricals.iter().map(|&k| Linear::new(width, k, rng)).collect();
        Ok(Self {
            code_spec: code_spec.clone(),
            latent_dim,
            gen,
            dq: DqNet {
                trunk,
                d_head,
                cont_head,
                cat_heads,
            },
        })
    }

    pub fn generate(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        check_width("generator input", inputs, self.code_spec.input_dim())?;
        Ok(self.gen.infer(inputs))
    }

    /// Real probability per sample and the code posterior, from one trunk pass.
    pub fn discriminate(&self, latents: &Tensor<T>) -> Result<(Vec<T>, CodePosterior<T>)> {
        check_width("latent", latents, self.latent_dim)?;
        let out = self.dq.infer(latents);
        Ok((out.real_prob(), out.posterior))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.gen.visit_params("gen", f);
        self.dq.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.gen.visit_params_mut("gen", f);
        self.dq.visit_params_mut(f);
    }

    pub fn zero_grad(&mut self) {
        self.gen.zero_grad();
        self.dq.zero_grad();
    }
}

fn check_width<T: Real>(what: &str, x: &Tensor<T>, width: usize) -> Result<()> {
    if x.shape().len() != 2 || x.row_len() != width {
        return Err(Error::Argument(format!(
            "{what} batch has shape {:?}, expected N×{width}",
            x.shape()
        )));
    }
    Ok(())
}

/// All trainable networks for one preset.
#[derive(Clone, Debug)]
pub struct NetworkBundle<T> {
    pub preset: ArchPreset,
    pub enc: Sequential<T>,
    pub dec: Sequential<T>,
    pub gan: LatentGan<T>,
}

impl<T: Real> NetworkBundle<T> {
    /// Builds every network with fan-in uniform initialisation (no N(0, 0.02)
    /// re-initialisation). Construction order is enc, dec, gen, dq.
    pub fn build(preset: &ArchPreset, init_seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let enc = build_encoder(preset, &mut rng)?;
        let dec = build_decoder(preset, &mut rng)?;
        let gan = LatentGan::new(&preset.code_spec, preset.latent_dim, &preset.generator, &preset.dq_trunk, &mut rng)?;
        Ok(Self {
            preset: preset.clone(),
            enc,
            dec,
            gan,
        })
    }

    fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.preset.image_shape;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [c, h, w] {
            return Err(Error::Argument(format!(
                "image batch has shape {s:?}, preset {} expects N×{c}×{h}×{w}",
                self.preset.name.as_str()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, images: &ImageBatch<T>) -> Result<Tensor<T>> {
        self.check_images(images.tensor())?;
        Ok(self.enc.infer(images.tensor()))
    }

    /// Decodes with batch-norm running statistics.
    pub fn decode(&self, latents: &Tensor<T>) -> Result<ImageBatch<T>> {
        check_width("latent", latents, self.preset.latent_dim)?;
        ImageBatch::new(self.dec.infer(latents))
    }

    pub fn generate(&self, inputs: &Tensor<T>) -> Result<Tensor<T>> {
        self.gan.generate(inputs)
    }

    pub fn discriminate(&self, latents: &Tensor<T>) -> Result<(Vec<T>, CodePosterior<T>)> {
        self.gan.discriminate(latents)
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.enc.visit_params("enc", f);
        self.dec.visit_params("dec", f);
        self.gan.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.enc.visit_params_mut("enc", f);
        self.dec.visit_params_mut("dec", f);
        self.gan.visit_params_mut(f);
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.dec.visit_buffers("dec", f);
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.dec.visit_buffers_mut("dec", f);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |_, p| ok &= p.value.all_finite());
        ok
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }
}
