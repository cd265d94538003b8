use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetError;

/// Kernel widths of the three parallel temporal convolutions.
pub const KERNEL_SCALES: [usize; 3] = [3, 7, 13];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kernel_scales: [usize; 3],
    pub conv_channels_per_scale: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub attention_reduction: usize,
    pub dropout: f64,
    pub num_features: usize,
    /// Squeeze-excitation gating on the conv branch. Disabling it forces every
    /// gate to 1.
    pub channel_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kernel_scales: KERNEL_SCALES,
            conv_channels_per_scale: 16,
            d_model: 48,
            n_heads: 2,
            n_layers: 2,
            ffn_dim: 96,
            attention_reduction: 4,
            dropout: 0.1,
            num_features: 3,
            channel_attention: true,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.kernel_scales != KERNEL_SCALES {
            return bad(format!("kernel scales must be {KERNEL_SCALES:?}"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model % 2 != 0 {
            return bad(format!("d_model {} must be even for positional encoding", self.d_model));
        }
        if self.attention_reduction == 0 || self.conv_channels() / self.attention_reduction == 0 {
            return bad("attention reduction leaves no hidden units".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.conv_channels_per_scale == 0 || self.ffn_dim == 0 || self.num_features == 0 {
            return bad("zero-sized layer".into());
        }
        Ok(())
    }

    /// Width of the concatenated conv branch.
    pub fn conv_channels(&self) -> usize {
        self.conv_channels_per_scale * self.kernel_scales.len()
    }

    pub fn se_hidden(&self) -> usize {
        self.conv_channels() / self.attention_reduction
    }

    pub fn head_in(&self) -> usize {
        self.conv_channels() + self.d_model
    }

    pub fn head_hidden(&self) -> usize {
        self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Dense layer `y = x·W + b` with `W` stored row-major as `n_in × n_out`.
/// An empty `b` means the layer has no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
        }
    }

    /// Uniform fan-in initialization with variance 1/fan_in (ReLU layers get the
    /// factor 2); biases stay zero.
    fn init(n_in: usize, n_out: usize, relu: bool, rng: &mut ChaCha8Rng) -> Self {
        let gain = if relu { 2.0 } else { 1.0 };
        let bound = (3.0 * gain / n_in as f64).sqrt();
        let mut l = Self::zeros(n_in, n_out);
        for w in &mut l.w {
            *w = rng.gen_range(-bound..bound);
        }
        l
    }

    fn without_bias(mut self) -> Self {
        self.b.clear();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Norm {
    fn new(d: usize, gain: f64) -> Self {
        Self {
            gain: vec![gain; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: Norm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

/// All trainable weights. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One filter bank per kernel scale, laid out as `(k·num_features) × channels`
    /// so a convolution is an im2col matmul.
    pub conv: Vec<Linear>,
    pub se_reduce: Linear,
    pub se_expand: Linear,
    pub in_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

impl ModelParams {
    pub fn init(config: &ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self::build(config, 1.0, |n_in, n_out, relu| {
            Linear::init(n_in, n_out, relu, &mut rng)
        }))
    }

    pub fn zeros_like(config: &ModelConfig) -> Self {
        Self::build(config, 0.0, |n_in, n_out, _| Linear::zeros(n_in, n_out))
    }

    fn build(
        config: &ModelConfig,
        norm_gain: f64,
        mut linear: impl FnMut(usize, usize, bool) -> Linear,
    ) -> Self {
        let c = config.conv_channels();
        let d = config.d_model;
        let conv = config
            .kernel_scales
            .iter()
            .map(|&k| linear(k * config.num_features, config.conv_channels_per_scale, true))
            .collect();
        let se_reduce = linear(c, config.se_hidden(), true);
        let se_expand = linear(config.se_hidden(), c, false);
        let in_proj = linear(config.num_features, d, false);
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                ln1: Norm::new(d, norm_gain),
                q: linear(d, d, false),
                // A key bias shifts every score in a row equally, which softmax cancels.
                k: linear(d, d, false).without_bias(),
                v: linear(d, d, false),
                o: linear(d, d, false),
                ln2: Norm::new(d, norm_gain),
                ffn1: linear(d, config.ffn_dim, true),
                ffn2: linear(config.ffn_dim, d, false),
            })
            .collect();
        let head_hidden = linear(config.head_in(), config.head_hidden(), true);
        let head_out = linear(config.head_hidden(), 1, false);
        Self {
            conv,
            se_reduce,
            se_expand,
            in_proj,
            layers,
            head_hidden,
            head_out,
        }
    }

    /// Named views of every tensor in a fixed order, with shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &Vec<f64>)> {
        fn lin<'a>(out: &mut Vec<(String, Vec<usize>, &'a Vec<f64>)>, name: String, l: &'a Linear) {
            out.push((format!("{name}.w"), vec![l.n_in, l.n_out], &l.w));
            if !l.b.is_empty() {
                out.push((format!("{name}.b"), vec![l.n_out], &l.b));
            }
        }
        let mut out = Vec::new();
        for (i, l) in self.conv.iter().enumerate() {
            lin(&mut out, format!("conv{i}"), l);
        }
        lin(&mut out, "se_reduce".into(), &self.se_reduce);
        lin(&mut out, "se_expand".into(), &self.se_expand);
        lin(&mut out, "in_proj".into(), &self.in_proj);
        for (i, layer) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            out.push((format!("{p}.ln1.gain"), vec![layer.ln1.gain.len()], &layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), vec![layer.ln1.bias.len()], &layer.ln1.bias));
            lin(&mut out, format!("{p}.q"), &layer.q);
            lin(&mut out, format!("{p}.k"), &layer.k);
            lin(&mut out, format!("{p}.v"), &layer.v);
            lin(&mut out, format!("{p}.o"), &layer.o);
            out.push((format!("{p}.ln2.gain"), vec![layer.ln2.gain.len()], &layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), vec![layer.ln2.bias.len()], &layer.ln2.bias));
            lin(&mut out, format!("{p}.ffn1"), &layer.ffn1);
            lin(&mut out, format!("{p}.ffn2"), &layer.ffn2);
        }
        lin(&mut out, "head_hidden".into(), &self.head_hidden);
        lin(&mut out, "head_out".into(), &self.head_out);
        out
    }

    /// Mutable views in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for l in &mut self.conv {
            out.push(&mut l.w);
            if !l.b.is_empty() {
                out.push(&mut l.b);
            }
        }
        for l in [&mut self.se_reduce, &mut self.se_expand, &mut self.in_proj] {
            out.push(&mut l.w);
            if !l.b.is_empty() {
                out.push(&mut l.b);
            }
        }
        for layer in &mut self.layers {
            out.push(&mut layer.ln1.gain);
            out.push(&mut layer.ln1.bias);
            for l in [&mut layer.q, &mut layer.k, &mut layer.v, &mut layer.o] {
                out.push(&mut l.w);
                if !l.b.is_empty() {
                    out.push(&mut l.b);
                }
            }
            out.push(&mut layer.ln2.gain);
            out.push(&mut layer.ln2.bias);
            for l in [&mut layer.ffn1, &mut layer.ffn2] {
                out.push(&mut l.w);
                if !l.b.is_empty() {
                    out.push(&mut l.b);
                }
            }
        }
        for l in [&mut self.head_hidden, &mut self.head_out] {
            out.push(&mut l.w);
            if !l.b.is_empty() {
                out.push(&mut l.b);
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, _, t) in self.tensors() {
            out.extend_from_slice(t);
        }
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        let total = self.num_params();
        if flat.len() != total {
            return Err(NetError::Shape(format!(
                "flat parameter vector has {} values, model needs {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Shape check against a config, used when loading checkpoints.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let reference = Self::zeros_like(config);
        let a = self.tensors();
        let b = reference.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1)
    }
}
