//! U-Net generator and patch discriminator built on the autodiff graph.
//!
//! Parameters live in [`NetworkParams`], an ordered list of named tensors.
//! A forward pass first binds the parameters into a [`Graph`] (as trainable
//! leaves or constants) and then consumes them in build order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensor;
use crate::data::ImageBuffer;
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub const KERNEL: usize = 4;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPSILON: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const INIT_SCHEME: &str = "normal(0, 0.02)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    /// Applied on the two innermost decoder stages in train mode.
    pub dropout_rate: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 3,
            out_channels: 1,
            base_filters: 16,
            depth: 4,
            dropout_rate: 0.5,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("nets", "build_generator", d));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_filters == 0 {
            return bad(format!("channel counts must be positive: {self:?}"));
        }
        if !(2..=12).contains(&self.depth) {
            return bad(format!("depth {} outside 2..=12", self.depth));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    /// Encoder stage widths, doubling from `base_filters` and capped at 8x.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| (self.base_filters << i.min(3)).min(8 * self.base_filters))
            .collect()
    }

    pub fn required_multiple(&self) -> usize {
        1 << self.depth
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Condition channels plus label channels.
    pub in_channels: usize,
    pub base_filters: usize,
    pub num_layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            in_channels: 4,
            base_filters: 16,
            num_layers: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::invalid(
                "nets",
                "build_discriminator",
                format!("channel counts must be positive: {self:?}"),
            ));
        }
        if !(2..=8).contains(&self.num_layers) {
            return Err(Error::invalid(
                "nets",
                "build_discriminator",
                format!("num_layers {} outside 2..=8", self.num_layers),
            ));
        }
        Ok(())
    }

    /// Widths of the strided stack followed by the stride-1 penultimate layer.
    pub fn layer_channels(&self) -> Vec<usize> {
        let cap = 8 * self.base_filters;
        (0..=self.num_layers)
            .map(|i| (self.base_filters << i.min(3)).min(cap))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Named parameter tensors in a fixed order.
///
/// Equality compares names and values only; the init metadata is not
/// stored in checkpoints.
#[derive(Debug, Clone)]
pub struct NetworkParams<T = f32> {
    pub init_scheme: String,
    pub seed: u64,
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> NetworkParams<T> {
    fn empty(seed: u64) -> Self {
        NetworkParams {
            init_scheme: INIT_SCHEME.to_string(),
            seed,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor<T>) {
        debug_assert!(self.entries.iter().all(|(n, _)| *n != name));
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn convert<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            init_scheme: self.init_scheme.clone(),
            seed: self.seed,
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.convert())).collect(),
        }
    }

    /// Add every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Bound {
        Bound(self.tensors().map(|t| g.leaf(t.clone(), requires_grad)).collect())
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.entries
            .iter()
            .map(|(n, t)| (format!("{prefix}{n}"), t.convert::<f32>()))
            .collect()
    }

    /// Replace values from checkpoint tensors carrying `prefix`. Names and
    /// shapes must match this layout exactly.
    pub fn load_named(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
        for (name, t) in &mut self.entries {
            let full = format!("{prefix}{name}");
            let Some((_, src)) = tensors.iter().find(|(n, _)| *n == full) else {
                return Err(CheckpointError::Missing(full));
            };
            if src.shape() != t.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *t = src.convert();
        }
        if let Some((n, _)) = tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .find(|(n, _)| self.get(&n[prefix.len()..]).is_none())
        {
            return Err(CheckpointError::Unexpected(n.clone()));
        }
        Ok(())
    }
}

impl<T: PartialEq> PartialEq for NetworkParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
    }
}

/// Graph nodes of a bound [`NetworkParams`], in build order.
#[derive(Debug, Clone)]
pub struct Bound(pub Vec<NodeId>);

struct Cursor<'a> {
    ids: &'a [NodeId],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self, op: &'static str) -> Result<NodeId> {
        let id = self
            .ids
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::invalid("nets", op, "bound parameter list is shorter than the network"))?;
        self.pos += 1;
        Ok(id)
    }

    fn finish(&self, op: &'static str) -> Result<()> {
        if self.pos != self.ids.len() {
            return Err(Error::invalid(
                "nets",
                op,
                format!("{} bound parameters, network used {}", self.ids.len(), self.pos),
            ));
        }
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn conv<T: Real>(&mut self, p: &mut NetworkParams<T>, name: &str, shape: [usize; 4], bias_len: usize) {
        let w = Tensor::from_fn(shape.to_vec(), |_| T::lit(self.normal.sample(&mut self.rng)));
        p.push(format!("{name}.weight"), w);
        p.push(format!("{name}.bias"), Tensor::zeros(vec![bias_len]));
    }

    fn norm<T: Real>(&mut self, p: &mut NetworkParams<T>, name: &str, channels: usize) {
        p.push(format!("{name}.gain"), Tensor::full(vec![channels], T::one()));
        p.push(format!("{name}.bias"), Tensor::zeros(vec![channels]));
    }
}

fn encoder_has_norm(cfg: &UNetConfig, stage: usize) -> bool {
    stage > 0 && stage + 1 < cfg.depth
}

fn decoder_dropout(stage: usize) -> bool {
    stage < 2
}

/// Decoder stage `j` as (input channels, output channels).
fn decoder_dims(cfg: &UNetConfig, j: usize) -> (usize, usize) {
    let enc = cfg.encoder_channels();
    let d = cfg.depth;
    let input = if j == 0 {
        enc[d - 1]
    } else {
        decoder_dims(cfg, j - 1).1 + enc[d - 1 - j]
    };
    let output = if j + 1 < d { enc[d - 2 - j] } else { cfg.base_filters };
    (input, output)
}

pub fn build_generator<T: Real>(cfg: &UNetConfig, seed: u64) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut p = NetworkParams::empty(seed);
    let mut init = Init::new(seed);
    let enc = cfg.encoder_channels();
    let mut c_in = cfg.in_channels;
    for (i, &c) in enc.iter().enumerate() {
        init.conv(&mut p, &format!("enc{i}.conv"), [c, c_in, KERNEL, KERNEL], c);
        if encoder_has_norm(cfg, i) {
            init.norm(&mut p, &format!("enc{i}.norm"), c);
        }
        c_in = c;
    }
    for j in 0..cfg.depth {
        let (ci, co) = decoder_dims(cfg, j);
        init.conv(&mut p, &format!("dec{j}.deconv"), [ci, co, KERNEL, KERNEL], co);
        init.norm(&mut p, &format!("dec{j}.norm"), co);
    }
    init.conv(&mut p, "out.conv", [cfg.out_channels, cfg.base_filters, 1, 1], cfg.out_channels);
    Ok(p)
}

fn dropout_seed(seed: u64, stage: usize) -> u64 {
    seed ^ (stage as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn generator_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &UNetConfig,
    params: &Bound,
    condition: NodeId,
    mode: Mode,
    seed: u64,
) -> Result<NodeId> {
    const OP: &str = "generator_forward";
    let (_, c, h, w) = g.value(condition).dims4(OP)?;
    if c != cfg.in_channels {
        return Err(Error::shape(
            "nets",
            OP,
            format!("condition has {c} channels, generator expects {}", cfg.in_channels),
        ));
    }
    let m = cfg.required_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(Error::shape(
            "nets",
            OP,
            format!("input {h}x{w} must be a multiple of {m} in both dimensions for depth {}", cfg.depth),
        ));
    }
    let mut cur = Cursor { ids: &params.0, pos: 0 };
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = condition;
    for i in 0..cfg.depth {
        let (k, b) = (cur.next(OP)?, cur.next(OP)?);
        x = g.conv2d(x, k, b, 2, 1)?;
        if encoder_has_norm(cfg, i) {
            let (gain, bias) = (cur.next(OP)?, cur.next(OP)?);
            x = g.instance_norm(x, gain, bias, NORM_EPSILON)?;
        }
        x = g.leaky_relu(x, LEAKY_SLOPE)?;
        skips.push(x);
    }
    let mut y = skips[cfg.depth - 1];
    for j in 0..cfg.depth {
        if j > 0 {
            y = g.concat_channels(y, skips[cfg.depth - 1 - j])?;
        }
        let (k, b) = (cur.next(OP)?, cur.next(OP)?);
        y = g.conv_transpose2d(y, k, b, 2, 1)?;
        let (gain, bias) = (cur.next(OP)?, cur.next(OP)?);
        y = g.instance_norm(y, gain, bias, NORM_EPSILON)?;
        if decoder_dropout(j) && cfg.dropout_rate > 0.0 {
            y = g.dropout(y, cfg.dropout_rate, dropout_seed(seed, j), mode == Mode::Train)?;
        }
        y = g.relu(y)?;
    }
    let (k, b) = (cur.next(OP)?, cur.next(OP)?);
    let out = g.conv2d(y, k, b, 1, 0)?;
    cur.finish(OP)?;
    g.sigmoid(out)
}

pub fn build_discriminator<T: Real>(cfg: &DiscriminatorConfig, seed: u64) -> Result<NetworkParams<T>> {
    cfg.validate()?;
    let mut p = NetworkParams::empty(seed);
    let mut init = Init::new(seed);
    let widths = cfg.layer_channels();
    let mut c_in = cfg.in_channels;
    for (i, &c) in widths.iter().enumerate() {
        init.conv(&mut p, &format!("layer{i}.conv"), [c, c_in, KERNEL, KERNEL], c);
        if i > 0 {
            init.norm(&mut p, &format!("layer{i}.norm"), c);
        }
        c_in = c;
    }
    init.conv(&mut p, "out.conv", [1, c_in, KERNEL, KERNEL], 1);
    Ok(p)
}

pub fn discriminator_forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &DiscriminatorConfig,
    params: &Bound,
    condition: NodeId,
    candidate: NodeId,
) -> Result<NodeId> {
    const OP: &str = "discriminator_forward";
    let (nc, cc, hc, wc) = g.value(condition).dims4(OP)?;
    let (nl, cl, hl, wl) = g.value(candidate).dims4(OP)?;
    if (nc, hc, wc) != (nl, hl, wl) {
        return Err(Error::shape(
            "nets",
            OP,
            format!("condition (N, H, W) = ({nc}, {hc}, {wc}) but candidate is ({nl}, {hl}, {wl})"),
        ));
    }
    if cc + cl != cfg.in_channels {
        return Err(Error::shape(
            "nets",
            OP,
            format!("{cc} + {cl} input channels, discriminator expects {}", cfg.in_channels),
        ));
    }
    let mut cur = Cursor { ids: &params.0, pos: 0 };
    let mut x = g.concat_channels(condition, candidate)?;
    for i in 0..=cfg.num_layers {
        let stride = if i < cfg.num_layers { 2 } else { 1 };
        let (k, b) = (cur.next(OP)?, cur.next(OP)?);
        x = g.conv2d(x, k, b, stride, 1)?;
        if i > 0 {
            let (gain, bias) = (cur.next(OP)?, cur.next(OP)?);
            x = g.instance_norm(x, gain, bias, NORM_EPSILON)?;
        }
        x = g.leaky_relu(x, LEAKY_SLOPE)?;
    }
    let (k, b) = (cur.next(OP)?, cur.next(OP)?);
    let out = g.conv2d(x, k, b, 1, 1)?;
    cur.finish(OP)?;
    g.sigmoid(out)
}

/// Generator output for plain tensors, in a throwaway graph.
pub fn generate<T: Real>(
    cfg: &UNetConfig,
    params: &NetworkParams<T>,
    condition: &Tensor<T>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(condition.clone());
    let y = generator_forward(&mut g, cfg, &bound, x, mode, seed)?;
    Ok(g.value(y).clone())
}

pub fn discriminate<T: Real>(
    cfg: &DiscriminatorConfig,
    params: &NetworkParams<T>,
    condition: &Tensor<T>,
    candidate: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let c = g.constant(condition.clone());
    let l = g.constant(candidate.clone());
    let y = discriminator_forward(&mut g, cfg, &bound, c, l)?;
    Ok(g.value(y).clone())
}

/// Stack same-sized images into an (N, C, H, W) tensor scaled to [0, 1].
pub fn images_to_tensor<T: Real>(images: &[&ImageBuffer]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("nets", "images_to_tensor", "empty batch"))?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    let mut data = Vec::with_capacity(images.len() * w * h * c);
    let scale = T::lit(1.0 / 255.0);
    for img in images {
        if !img.same_dims(first) {
            return Err(Error::shape(
                "nets",
                "images_to_tensor",
                format!(
                    "{}x{}x{} vs {w}x{h}x{c}",
                    img.width(),
                    img.height(),
                    img.channels()
                ),
            ));
        }
        let s = img.samples();
        for ch in 0..c {
            data.extend((0..w * h).map(|p| T::from_u8(s[p * c + ch]).unwrap() * scale));
        }
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Inverse of [`images_to_tensor`]: clamp to [0, 1] and round to 8 bits.
pub fn tensor_to_images<T: Real>(t: &Tensor<T>) -> Result<Vec<ImageBuffer>> {
    let (n, c, h, w) = t.dims4("tensor_to_images")?;
    if c != 1 && c != 3 {
        return Err(Error::shape(
            "nets",
            "tensor_to_images",
            format!("{c} channels, expected 1 or 3"),
        ));
    }
    let plane = h * w;
    t.data()
        .chunks(c * plane)
        .take(n)
        .map(|chunk| {
            let mut s = vec![0u8; c * plane];
            for ch in 0..c {
                for p in 0..plane {
                    let v = chunk[ch * plane + p].to_f64().unwrap().clamp(0.0, 1.0);
                    s[p * c + ch] = (v * 255.0).round() as u8;
                }
            }
            ImageBuffer::new(w, h, c, s)
        })
        .collect()
}
