//! Block-structured CNN with style hooks, attention head and classifier.
//!
//! Layout for the default 3×32×32 input:
//!
//! ```text
//! stem   3→16  4×4 s2   32→16
//! block1 16→16 3×3 s1   16→16   shift, explore[0], mix
//! block2 16→16 4×4 s2   16→8    explore[1], mix
//! block3 16→32 3×3 s1    8→8    explore[2], mix
//! block4 32→32 4×4 s2    8→4    → z
//! logits = W · concat(gap(z), A(z)) + b
//! ```
//!
//! Every conv is followed by a normalization with a per-channel gain and
//! shift (batch norm by default; a plain bias when normalization is off) and
//! a leaky ReLU. Style hooks read the post-activation block output.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::style::{self, ExplorationParams, StyleInfo};
use crate::tensor::{read_f32_le, write_f32_le, Tensor};

const CHECKPOINT_MAGIC: &str = "FDG-CHECKPOINT v1";

/// Rows per chunk when running inference over a whole dataset.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub block_channels: [usize; 4],
    pub block_downsample: [bool; 4],
    pub num_classes: usize,
    /// Query/key embedding size; `None` builds the model without the attention head.
    pub attention_dim: Option<usize>,
    pub leaky_slope: f32,
    #[serde(default)]
    pub norm: Norm,
}

/// Normalization after each conv.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    /// Conv bias only.
    None,
    /// Per sample over `C,H,W`.
    Layer,
    /// Per channel over `B,H,W`, with running statistics for eval mode.
    #[default]
    Batch,
}

/// Normalization variance floor.
const NORM_EPS: f32 = 1e-5;

/// Weight of the newest batch in the running statistics.
pub const RUNNING_MOMENTUM: f32 = 0.1;

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            in_channels: 3,
            image_size: 32,
            stem_channels: 16,
            stem_stride: 2,
            block_channels: [16, 16, 32, 32],
            block_downsample: [false, true, false, true],
            num_classes: 5,
            attention_dim: Some(30),
            leaky_slope: 0.01,
            norm: Norm::Batch,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub downsample: bool,
}

impl BlockSpec {
    /// Kernel size, stride, padding. Strided convs use an even kernel so the
    /// output size divides exactly.
    pub fn geometry(&self) -> (usize, usize, usize) {
        if self.downsample {
            (4, 2, 1)
        } else {
            (3, 1, 1)
        }
    }
}

/// Style hooks attach to blocks 1–3 only.
pub fn validate_hook_block(index: usize) -> Result<()> {
    if (1..=3).contains(&index) {
        Ok(())
    } else {
        Err(Error::InvalidHookBlock(index))
    }
}

impl ArchConfig {
    pub fn blocks(&self) -> [BlockSpec; 4] {
        let mut prev = self.stem_channels;
        std::array::from_fn(|i| {
            let spec = BlockSpec {
                index: i + 1,
                in_channels: prev,
                out_channels: self.block_channels[i],
                downsample: self.block_downsample[i],
            };
            prev = spec.out_channels;
            spec
        })
    }

    fn stem_geometry(&self) -> (usize, usize, usize) {
        if self.stem_stride == 1 {
            (3, 1, 1)
        } else {
            (2 * self.stem_stride, self.stem_stride, self.stem_stride / 2)
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.block_channels[3]
    }

    /// Channel count at the style-sharing layer.
    pub fn style_channels(&self) -> usize {
        self.block_channels[0]
    }

    pub fn classifier_width(&self) -> usize {
        match self.attention_dim {
            Some(_) => 2 * self.feature_channels(),
            None => self.feature_channels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut size = self.image_size;
        let mut check = |what: String, (k, s, p): (usize, usize, usize)| -> Result<()> {
            if size + 2 * p < k || !(size + 2 * p - k).is_multiple_of(s) {
                return Err(Error::Config(format!("{what}: {k}×{k} stride {s} does not tile {size}")));
            }
            size = (size + 2 * p - k) / s + 1;
            Ok(())
        };
        check("stem".into(), self.stem_geometry())?;
        for b in self.blocks() {
            check(format!("block{}", b.index), b.geometry())?;
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.attention_dim == Some(0) {
            return Err(Error::Config("attention_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Hook decisions for one mini-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardPlan {
    pub share_shift_active: bool,
    pub explore_active: [bool; 3],
    /// Mixing follows every active exploration.
    pub mix_active: bool,
    pub mode: Mode,
}

impl ForwardPlan {
    pub fn inactive(mode: Mode) -> Self {
        ForwardPlan {
            share_shift_active: false,
            explore_active: [false; 3],
            mix_active: false,
            mode,
        }
    }

    pub fn eval() -> Self {
        Self::inactive(Mode::Eval)
    }

    pub fn any_style_hook(&self) -> bool {
        self.share_shift_active || self.explore_active.iter().any(|&e| e)
    }
}

/// Independent Bernoulli(p) draws for shift and the three exploration hooks.
pub fn sample_plan<R: Rng + ?Sized>(rng: &mut R, p: f64) -> ForwardPlan {
    debug_assert!((0.0..=1.0).contains(&p));
    let share_shift_active = rng.random_bool(p);
    let explore_active = [rng.random_bool(p), rng.random_bool(p), rng.random_bool(p)];
    ForwardPlan {
        share_shift_active,
        explore_active,
        mix_active: explore_active.iter().any(|&e| e),
        mode: Mode::Train,
    }
}

/// Inputs the style hooks need during training.
#[derive(Clone, Debug)]
pub struct StyleContext {
    pub received: Option<StyleInfo>,
    pub exploration: ExplorationParams,
    pub eps_stab: f32,
}

/// Named parameter tensors in a fixed order, plus the non-trainable
/// running normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchConfig,
    entries: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: &ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let entries = layout(arch)
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("bias") || name.ends_with(".running_mean") {
                    Tensor::zeros(&shape)
                } else if name.ends_with(".norm_gain") || name.ends_with(".running_var") {
                    Tensor::full(&shape, 1.0)
                } else if name.starts_with("attention.") {
                    attention::init_projection(shape[0], shape[1], rng)
                } else if name == "classifier.weight" {
                    let bound = 1.0 / (shape[1] as f32).sqrt();
                    Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound))
                } else {
                    let fan_in = shape[1..].iter().product();
                    he_uniform(&shape, fan_in, rng)
                };
                (name, t)
            })
            .collect();
        let buffers = buffer_layout(arch)
            .into_iter()
            .map(|(name, shape)| {
                let fill = if name.ends_with(".running_var") { 1.0 } else { 0.0 };
                (name, Tensor::full(&shape, fill))
            })
            .collect();
        let params = ModelParams { arch: arch.clone(), entries, buffers };
        if arch.attention_dim.is_some() {
            let attn: usize = params
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with("attention."))
                .map(|(_, t)| t.numel())
                .sum();
            log::info!(
                "attention head: {attn} of {} parameters ({:.2}%)",
                params.num_parameters(),
                100.0 * attn as f64 / params.num_parameters() as f64
            );
        }
        Ok(params)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Running normalization statistics (empty unless batch norm is used).
    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    /// Replace the running statistics, keeping names. Shapes must match.
    pub fn with_buffers(&self, tensors: Vec<Tensor>) -> Result<Self> {
        Ok(ModelParams {
            buffers: replace_tensors(&self.buffers, tensors)?,
            ..self.clone()
        })
    }

    /// Fold the batch moments recorded during a train-mode forward into the
    /// running statistics (unbiased variance, momentum [`RUNNING_MOMENTUM`]).
    pub fn update_running_stats(&mut self, tape: &Tape, out: &ForwardOutput) {
        for &(layer, node) in &out.norm_nodes {
            let Some((mean, var)) = tape.batch_moments(node) else {
                continue;
            };
            let shape = tape.value(node).shape();
            let n = (shape[0] * shape[2] * shape[3]) as f32;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = RUNNING_MOMENTUM;
            let (rm, rv) = self.buffers.split_at_mut(2 * layer + 1);
            let rm = &mut rm[2 * layer].1;
            let rv = &mut rv[0].1;
            for (r, &v) in rm.data_mut().iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * v;
            }
            for (r, &v) in rv.data_mut().iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * v * unbias;
            }
        }
    }

    /// Running mean and variance of conv layer `layer` (0 = stem).
    fn running(&self, layer: usize) -> (&[f32], &[f32]) {
        (self.buffers[2 * layer].1.data(), self.buffers[2 * layer + 1].1.data())
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Same names and shapes in the same order.
    pub fn same_manifest(&self, other: &ModelParams) -> bool {
        let same = |x: &[(String, Tensor)], y: &[(String, Tensor)]| {
            x.len() == y.len() && x.iter().zip(y).all(|((a, s), (b, t))| a == b && s.shape() == t.shape())
        };
        self.arch == other.arch && same(&self.entries, &other.entries) && same(&self.buffers, &other.buffers)
    }

    /// Replace all trainable tensors, keeping names. Shapes must match.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self> {
        Ok(ModelParams {
            entries: replace_tensors(&self.entries, tensors)?,
            ..self.clone()
        })
    }

    /// Put every parameter on the tape as a trainable leaf (or constants).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        let find = |name: String| {
            let i = self.entries.iter().position(|(n, _)| *n == name);
            vars[i.unwrap_or_else(|| panic!("layout has no {name}"))]
        };
        let normed = self.arch.norm != Norm::None;
        let conv = |layer: &str, index: usize| ConvVars {
            index,
            weight: find(format!("{layer}.weight")),
            gain: normed.then(|| find(format!("{layer}.norm_gain"))),
            shift: find(if normed {
                format!("{layer}.norm_bias")
            } else {
                format!("{layer}.bias")
            }),
        };
        Bound {
            stem: conv("stem", 0),
            blocks: std::array::from_fn(|i| conv(&format!("block{}", i + 1), i + 1)),
            theta: self.arch.attention_dim.map(|_| {
                (find("attention.theta_q".into()), find("attention.theta_k".into()))
            }),
            classifier: (find("classifier.weight".into()), find("classifier.bias".into())),
            vars,
        }
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let list = |items: &[(String, Tensor)]| {
            items
                .iter()
                .map(|(n, t)| ManifestEntry { name: n.clone(), shape: t.shape().to_vec() })
                .collect()
        };
        let manifest = CheckpointManifest {
            arch: self.arch.clone(),
            params: list(&self.entries),
            buffers: list(&self.buffers),
        };
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        serde_json::to_writer(&mut out, &manifest)?;
        out.write_all(b"\n")?;
        for (_, t) in self.entries.iter().chain(&self.buffers) {
            write_f32_le(&mut out, t.data())?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut input: R) -> Result<Self> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint (header {:?})", line.trim_end())));
        }
        line.clear();
        input.read_line(&mut line)?;
        let manifest: CheckpointManifest = serde_json::from_str(line.trim_end())?;
        manifest.arch.validate()?;
        let mut read = |list: Vec<ManifestEntry>| -> Result<Vec<(String, Tensor)>> {
            let mut out = Vec::with_capacity(list.len());
            for e in list {
                let n = e.shape.iter().product();
                let data = read_f32_le(&mut input, n)?;
                out.push((e.name, Tensor::new(e.shape, data)?));
            }
            Ok(out)
        };
        let entries = read(manifest.params)?;
        let buffers = read(manifest.buffers)?;
        let params = ModelParams { arch: manifest.arch, entries, buffers };
        let matches = |expected: Vec<(String, Vec<usize>)>, got: &[(String, Tensor)]| {
            expected.len() == got.len()
                && expected
                    .iter()
                    .zip(got)
                    .all(|((n, s), (name, t))| n == name && s.as_slice() == t.shape())
        };
        if !matches(layout(&params.arch), &params.entries) || !matches(buffer_layout(&params.arch), &params.buffers) {
            return Err(Error::ManifestMismatch(
                "checkpoint parameters do not match its architecture".into(),
            ));
        }
        Ok(params)
    }

    /// Eval-mode logits for a `[N,3,H,W]` image tensor, computed in chunks.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.infer(images)?.0)
    }

    /// Eval-mode logits and attention scores (`[N,HW]`, absent without attention head).
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let (n, _, _, _) = images.dims4("predict")?;
        let mut logits = Vec::new();
        let mut scores = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let chunk = slice_rows(images, start, end)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(chunk);
            let out = forward(&mut tape, self, &bound, x, &[], &ForwardPlan::eval(), None, &mut NoDraws)?;
            logits.extend_from_slice(tape.value(out.logits).data());
            if let Some(s) = out.scores {
                scores.extend_from_slice(tape.value(s).data());
            }
            start = end;
        }
        let logits = Tensor::new(vec![n, self.arch.num_classes], logits)?;
        let scores = if scores.is_empty() {
            None
        } else {
            let hw = scores.len() / n.max(1);
            Some(Tensor::new(vec![n, hw], scores)?)
        };
        Ok((logits, scores))
    }

    /// Post-activation block-1 outputs (eval mode, no hooks), computed in chunks.
    pub fn block1_features(&self, images: &Tensor) -> Result<Tensor> {
        let (n, _, _, _) = images.dims4("block1_features")?;
        let mut data = Vec::new();
        let mut shape = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(slice_rows(images, start, end)?);
            let mut pass = NormPass { params: self, train: false, nodes: Vec::new() };
            let f = block1(&mut tape, &bound, x, &mut pass)?;
            shape = tape.value(f).shape().to_vec();
            data.extend_from_slice(tape.value(f).data());
            start = end;
        }
        if shape.is_empty() {
            return Err(Error::EmptyDataset("block-1 features of an empty batch"));
        }
        shape[0] = n;
        Tensor::new(shape, data)
    }
}

/// Parameter names and shapes in storage order.
fn layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut conv = |layer: String, co: usize, ci: usize, k: usize| {
        out.push((format!("{layer}.weight"), vec![co, ci, k, k]));
        if arch.norm != Norm::None {
            out.push((format!("{layer}.norm_gain"), vec![co]));
            out.push((format!("{layer}.norm_bias"), vec![co]));
        } else {
            out.push((format!("{layer}.bias"), vec![co]));
        }
    };
    conv("stem".into(), arch.stem_channels, arch.in_channels, arch.stem_geometry().0);
    for b in arch.blocks() {
        conv(format!("block{}", b.index), b.out_channels, b.in_channels, b.geometry().0);
    }
    if let Some(d) = arch.attention_dim {
        let c4 = arch.feature_channels();
        out.push(("attention.theta_q".to_string(), vec![d, c4]));
        out.push(("attention.theta_k".to_string(), vec![d, c4]));
    }
    out.push(("classifier.weight".to_string(), vec![arch.num_classes, arch.classifier_width()]));
    out.push(("classifier.bias".to_string(), vec![arch.num_classes]));
    out
}

/// Running-statistics names and shapes in storage order.
fn buffer_layout(arch: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    if arch.norm != Norm::Batch {
        return Vec::new();
    }
    let mut layers = vec![("stem".to_string(), arch.stem_channels)];
    layers.extend(arch.blocks().iter().map(|b| (format!("block{}", b.index), b.out_channels)));
    layers
        .into_iter()
        .flat_map(|(l, c)| [(format!("{l}.running_mean"), vec![c]), (format!("{l}.running_var"), vec![c])])
        .collect()
}

/// RNG for eval-mode forwards, which never draw.
struct NoDraws;

impl rand::RngCore for NoDraws {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval forward drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval forward drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval forward drew a random number")
    }
}

/// Rows `start..end` of a tensor.
pub fn slice_rows(t: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let n = t.row_len();
    let mut shape = t.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, t.data()[start * n..end * n].to_vec())
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    arch: ArchConfig,
    params: Vec<ManifestEntry>,
    buffers: Vec<ManifestEntry>,
}

fn replace_tensors(old: &[(String, Tensor)], tensors: Vec<Tensor>) -> Result<Vec<(String, Tensor)>> {
    if tensors.len() != old.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} tensors for {} slots",
            tensors.len(),
            old.len()
        )));
    }
    let mut out = Vec::with_capacity(tensors.len());
    for ((name, prev), t) in old.iter().zip(tensors) {
        if prev.shape() != t.shape() {
            return Err(Error::ManifestMismatch(format!(
                "{name}: {:?} vs {:?}",
                prev.shape(),
                t.shape()
            )));
        }
        out.push((name.clone(), t));
    }
    Ok(out)
}

/// Handles of one conv layer: weight, optional norm gain, and the
/// per-channel shift (norm bias or conv bias).
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    /// 0 for the stem, `i` for block `i`.
    pub index: usize,
    pub weight: Var,
    pub gain: Option<Var>,
    pub shift: Var,
}

/// Parameter handles on one tape, in [`ModelParams`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub stem: ConvVars,
    pub blocks: [ConvVars; 4],
    pub theta: Option<(Var, Var)>,
    pub classifier: (Var, Var),
    pub vars: Vec<Var>,
}

impl Bound {
    /// Gradients after `backward`; parameters not reached get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
            .collect()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Feature-extractor output `z`.
    pub features: Var,
    /// Labels of the (possibly oversampled) output rows.
    pub labels: Vec<usize>,
    /// Input row each output row came from.
    pub source_rows: Vec<usize>,
    /// Softmax attention scores `[rows, HW]`.
    pub scores: Option<Var>,
    /// Batch-statistics norm nodes by conv layer, for
    /// [`ModelParams::update_running_stats`].
    pub norm_nodes: Vec<(usize, Var)>,
}

/// Normalization state threaded through one forward.
struct NormPass<'a> {
    params: &'a ModelParams,
    train: bool,
    nodes: Vec<(usize, Var)>,
}

fn conv_act(tape: &mut Tape, x: Var, layer: ConvVars, geom: (usize, usize, usize), pass: &mut NormPass) -> Result<Var> {
    let (_, stride, pad) = geom;
    let arch = &pass.params.arch;
    let y = match (arch.norm, layer.gain) {
        (Norm::Layer, Some(gain)) => {
            let y = tape.conv2d(x, layer.weight, None, stride, pad)?;
            tape.layer_norm(y, gain, layer.shift, NORM_EPS)?
        }
        (Norm::Batch, Some(gain)) => {
            let y = tape.conv2d(x, layer.weight, None, stride, pad)?;
            let fixed = (!pass.train).then(|| pass.params.running(layer.index));
            let y = tape.batch_norm(y, gain, layer.shift, NORM_EPS, fixed)?;
            if pass.train {
                pass.nodes.push((layer.index, y));
            }
            y
        }
        _ => tape.conv2d(x, layer.weight, Some(layer.shift), stride, pad)?,
    };
    Ok(tape.leaky_relu(y, arch.leaky_slope))
}

fn block1(tape: &mut Tape, bound: &Bound, x: Var, pass: &mut NormPass) -> Result<Var> {
    let arch = &pass.params.arch;
    let (stem_geom, geom) = (arch.stem_geometry(), arch.blocks()[0].geometry());
    let s = conv_act(tape, x, bound.stem, stem_geom, pass)?;
    conv_act(tape, s, bound.blocks[0], geom, pass)
}

struct HookState {
    labels: Vec<usize>,
    source_rows: Vec<usize>,
    /// Number of original rows; rows past it are oversampled copies.
    base_rows: usize,
}

/// One forward pass.
///
/// Random draws happen in this order: block-1 keeper selection and shift
/// noise; then for each active exploration hook (blocks 1–3) the
/// class-balanced oversampling (first active hook only) and the mixing plan;
/// finally the attention pairing.
#[allow(clippy::too_many_arguments)]
pub fn forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &ModelParams,
    bound: &Bound,
    input: Var,
    labels: &[usize],
    plan: &ForwardPlan,
    ctx: Option<&StyleContext>,
    rng: &mut R,
) -> Result<ForwardOutput> {
    let arch = &params.arch;
    let (b, _, _, _) = tape.value(input).dims4("forward")?;
    let train = plan.mode == Mode::Train;
    if train && labels.len() != b {
        return Err(Error::shape("forward", "labels", format!("{} labels for batch {b}", labels.len())));
    }
    if train && plan.any_style_hook() && ctx.is_none() {
        return Err(Error::MissingStyleContext);
    }
    let mut state = HookState {
        labels: if train { labels.to_vec() } else { Vec::new() },
        source_rows: (0..b).collect(),
        base_rows: b,
    };
    let specs = arch.blocks();
    let mut pass = NormPass { params, train, nodes: Vec::new() };
    let mut x = block1(tape, bound, input, &mut pass)?;

    if train && plan.share_shift_active {
        let ctx = ctx.ok_or(Error::MissingStyleContext)?;
        let target = ctx.received.as_ref().ok_or(Error::MissingStyleContext)?;
        x = shift_hook(tape, x, target, ctx.eps_stab, rng)?;
    }
    for (i, spec) in specs.iter().enumerate() {
        if i > 0 {
            x = conv_act(tape, x, bound.blocks[i], spec.geometry(), &mut pass)?;
        }
        if i < 3 && train && plan.explore_active[i] {
            let ctx = ctx.ok_or(Error::MissingStyleContext)?;
            x = explore_hook(tape, x, &mut state, ctx, plan.mix_active, rng)?;
        }
    }
    let z = x;
    let pooled = tape.global_avg_pool(z)?;
    let (embedding, scores) = match bound.theta {
        Some((tq, tk)) => {
            let pairing = if train {
                Some(attention::sample_pairing(&state.labels, rng)?)
            } else {
                None
            };
            let (attn, scores) = attention::highlight(tape, z, tq, tk, pairing.as_deref())?;
            (tape.concat_cols(pooled, attn)?, Some(scores))
        }
        None => (pooled, None),
    };
    let logits = tape.linear(embedding, bound.classifier.0, bound.classifier.1)?;
    Ok(ForwardOutput {
        logits,
        features: z,
        labels: state.labels,
        source_rows: state.source_rows,
        scores,
        norm_nodes: pass.nodes,
    })
}

fn shift_hook<R: Rng + ?Sized>(tape: &mut Tape, x: Var, target: &StyleInfo, eps: f32, rng: &mut R) -> Result<Var> {
    let stats = style::batch_style_stats(tape.value(x))?;
    let b = stats.len();
    if b < 2 {
        return Ok(x);
    }
    let kept = style::select_keepers_kmeanspp(&stats, rng)?;
    let mut keep = vec![false; b];
    for &k in &kept {
        keep[k] = true;
    }
    let shifted: Vec<usize> = (0..b).filter(|&i| !keep[i]).collect();
    let targets = style::draw_shift_targets(target, shifted.len(), rng);
    style::shift_rows(tape, x, &shifted, &targets, eps)
}

fn explore_hook<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    state: &mut HookState,
    ctx: &StyleContext,
    mix: bool,
    rng: &mut R,
) -> Result<Var> {
    let params = &ctx.exploration;
    let mut x = x;
    if state.labels.len() == state.base_rows && params.oversample_size > 0 {
        let picked = style::oversample_indices(&state.labels, params.oversample_size, rng);
        let copies = tape.gather_rows(x, &picked)?;
        x = tape.concat_rows(&[x, copies])?;
        for &i in &picked {
            state.labels.push(state.labels[i]);
            state.source_rows.push(state.source_rows[i]);
        }
    }
    if state.labels.len() > state.base_rows {
        x = style::explore_tail(tape, x, state.base_rows, params.alpha, params.explore_ref, ctx.eps_stab)?;
    }
    if mix && state.labels.len() >= 2 {
        let plan = style::sample_mix_plan(state.labels.len(), params.mix_beta, rng)?;
        x = style::mix_rows(tape, x, &plan, ctx.eps_stab)?;
    }
    Ok(x)
}
