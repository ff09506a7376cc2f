//! Policy networks: a small strided-convolution encoder over the stacked
//! rasters, fully connected speed and angle encoders, a fusion stage and
//! per-branch action heads.
//!
//! All parameters live in one flat `Vec<f64>` described by a table of named
//! blocks, so the optimizer and the checkpoint code treat them uniformly.

pub mod checkpoint;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{discretize_branch, Command};
use crate::sim::sensor::{ChannelMode, ObservationStack};
use crate::sim::Action;
use crate::training::{loss_and_grad, LossParts};
use layers::{ConvShape, DenseShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Angle as input feature and as head selector.
    AngleBranched,
    /// Angle as input feature, single head.
    AngleInput,
    /// Discrete command selects one of three fusion+head stacks; no angle input.
    DiscreteBranched,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::AngleBranched,
        Architecture::AngleInput,
        Architecture::DiscreteBranched,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Architecture::AngleBranched => "angle-branched",
            Architecture::AngleInput => "angle-input",
            Architecture::DiscreteBranched => "discrete-branched",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Architecture::AngleBranched => 0,
            Architecture::AngleInput => 1,
            Architecture::DiscreteBranched => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Architecture::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| Error::Format(format!("unknown architecture code {c}")))
    }

    fn fusion_stages(self) -> usize {
        match self {
            Architecture::DiscreteBranched => 3,
            _ => 1,
        }
    }

    fn heads(self) -> usize {
        match self {
            Architecture::AngleInput => 1,
            _ => 3,
        }
    }

    fn uses_angle(self) -> bool {
        self != Architecture::DiscreteBranched
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture `{s}`")))
    }
}

/// Layer widths. Defaults are the desk-scale sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Output channels of each stride-2 convolution.
    pub conv_channels: Vec<usize>,
    /// Width of the image, speed and angle feature vectors.
    pub feature: usize,
    /// Hidden width of the speed and angle encoders.
    pub meas_hidden: usize,
    pub fusion: usize,
    pub head_hidden: usize,
    /// Speed is divided by this before entering the network.
    pub speed_scale: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            feature: 64,
            meas_hidden: 12,
            fusion: 32,
            head_hidden: 16,
            speed_scale: 5.0,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty()
            || self.conv_channels.contains(&0)
            || [self.feature, self.meas_hidden, self.fusion, self.head_hidden].contains(&0)
        {
            return Err(Error::Config(format!("invalid model dims {self:?}")));
        }
        if !(self.speed_scale > 0.0 && self.speed_scale.is_finite()) {
            return Err(Error::Config("speed_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Shape of the stacked raster input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub k: usize,
    pub mode: ChannelMode,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl InputShape {
    pub fn channels(&self) -> usize {
        self.k * self.mode.channels()
    }

    pub fn len(&self) -> usize {
        self.channels() * self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Dense array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    s: DenseShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    s: ConvShape,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Graph {
    convs: Vec<Conv>,
    enc: [Dense; 2],
    speed: [Dense; 2],
    angle: Option<[Dense; 2]>,
    fusion: Vec<Dense>,
    heads: Vec<[Dense; 2]>,
}

struct TableBuilder {
    blocks: Vec<ParamBlock>,
    total: usize,
    /// (weight block, fan_in, fan_out) for Xavier init.
    fans: Vec<(usize, usize, usize)>,
}

impl TableBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        let offset = self.total;
        let b = ParamBlock {
            name,
            shape,
            offset,
        };
        self.total += b.len();
        self.blocks.push(b);
        offset
    }

    fn dense(&mut self, name: &str, inp: usize, out: usize) -> Dense {
        let w = self.push(format!("{name}.w"), vec![out, inp]);
        self.fans.push((self.blocks.len() - 1, inp, out));
        let b = self.push(format!("{name}.b"), vec![out]);
        Dense {
            s: DenseShape { inp, out },
            w,
            b,
        }
    }

    fn conv(&mut self, name: &str, s: ConvShape) -> Conv {
        let k2 = layers::KERNEL * layers::KERNEL;
        let w = self.push(
            format!("{name}.w"),
            vec![s.out_c, s.in_c, layers::KERNEL, layers::KERNEL],
        );
        self.fans
            .push((self.blocks.len() - 1, s.in_c * k2, s.out_c * k2));
        let b = self.push(format!("{name}.b"), vec![s.out_c]);
        Conv { s, w, b }
    }
}

fn build_graph(arch: Architecture, dims: &ModelDims, input: &InputShape) -> (Graph, TableBuilder) {
    let mut t = TableBuilder {
        blocks: Vec::new(),
        total: 0,
        fans: Vec::new(),
    };
    let mut convs = Vec::new();
    let (mut c, mut h, mut w) = (input.channels(), input.grid_h, input.grid_w);
    for (i, &out_c) in dims.conv_channels.iter().enumerate() {
        let s = ConvShape {
            in_c: c,
            out_c,
            in_h: h,
            in_w: w,
            stride: 2,
        };
        convs.push(t.conv(&format!("conv{}", i + 1), s));
        (c, h, w) = (out_c, s.out_h(), s.out_w());
    }
    let e = dims.feature;
    let enc = [t.dense("enc_fc1", c, e), t.dense("enc_fc2", e, e)];
    let speed = [
        t.dense("speed_fc1", 1, dims.meas_hidden),
        t.dense("speed_fc2", dims.meas_hidden, e),
    ];
    let angle = arch.uses_angle().then(|| {
        [
            t.dense("angle_fc1", 1, dims.meas_hidden),
            t.dense("angle_fc2", dims.meas_hidden, e),
        ]
    });
    let fused_in = if arch.uses_angle() { 3 * e } else { 2 * e };
    let fusion = (0..arch.fusion_stages())
        .map(|i| t.dense(&format!("fusion{i}"), fused_in, dims.fusion))
        .collect();
    let heads = (0..arch.heads())
        .map(|i| {
            [
                t.dense(&format!("head{i}_fc1"), dims.fusion, dims.head_hidden),
                t.dense(&format!("head{i}_out"), dims.head_hidden, 3),
            ]
        })
        .collect();
    (
        Graph {
            convs,
            enc,
            speed,
            angle,
            fusion,
            heads,
        },
        t,
    )
}

#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub arch: Architecture,
    pub input: InputShape,
    pub dims: ModelDims,
    pub seed: u64,
    pub blocks: Vec<ParamBlock>,
    pub values: Vec<f64>,
    graph: Graph,
}

impl PartialEq for ModelParameters {
    fn eq(&self, o: &Self) -> bool {
        self.arch == o.arch
            && self.input == o.input
            && self.dims == o.dims
            && self.seed == o.seed
            && self.blocks == o.blocks
            && self.values == o.values
    }
}

/// Builds a network with Xavier-uniform weights drawn from `seed` and zero biases.
pub fn build_model(
    arch: Architecture,
    input: InputShape,
    dims: &ModelDims,
    seed: u64,
) -> Result<ModelParameters> {
    dims.validate()?;
    if input.k == 0 || input.grid_h == 0 || input.grid_w == 0 {
        return Err(Error::Config(format!("invalid input shape {input:?}")));
    }
    let (graph, table) = build_graph(arch, dims, &input);
    let mut values = vec![0.0; table.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &(bi, fan_in, fan_out) in &table.fans {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut values[table.blocks[bi].range()] {
            *v = rng.gen_range(-a..a);
        }
    }
    Ok(ModelParameters {
        arch,
        input,
        dims: dims.clone(),
        seed,
        blocks: table.blocks,
        values,
        graph,
    })
}

impl ModelParameters {
    pub fn n_params(&self) -> usize {
        self.values.len()
    }

    /// Size of the raw parameter payload in megabytes.
    pub fn size_mb(&self) -> f64 {
        (self.values.len() * 8) as f64 / 1e6
    }

    pub fn mode(&self) -> ChannelMode {
        self.input.mode
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.block(name).map(|b| Tensor {
            shape: b.shape.clone(),
            values: self.values[b.range()].to_vec(),
        })
    }

    pub fn fusion_stages(&self) -> usize {
        self.graph.fusion.len()
    }

    pub fn heads(&self) -> usize {
        self.graph.heads.len()
    }

    /// Index of the head (and, for the discrete baseline, fusion stage)
    /// serving `command`.
    pub fn head_for(&self, command: impl Into<Command>) -> usize {
        let command = command.into();
        match self.arch {
            Architecture::AngleInput => 0,
            Architecture::AngleBranched => discretize_branch(command.angle).index(),
            Architecture::DiscreteBranched => command.route.index(),
        }
    }

    /// Names of the parameter blocks belonging to head `i`.
    pub fn head_blocks(&self, i: usize) -> Vec<&ParamBlock> {
        let prefix = format!("head{i}_");
        self.blocks
            .iter()
            .filter(|b| b.name.starts_with(&prefix))
            .collect()
    }

    fn rebuild_graph(&mut self) {
        self.graph = build_graph(self.arch, &self.dims, &self.input).0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkOutput {
    /// `tanh` of the raw steer unit, in (-1, 1).
    pub steer: f64,
    /// (stop, go) logits.
    pub throttle_logits: [f64; 2],
    /// Head that produced the output.
    pub head: usize,
}

impl NetworkOutput {
    pub fn throttle(&self) -> bool {
        self.throttle_logits[1] > self.throttle_logits[0]
    }

    pub fn action(&self) -> Action {
        Action::new(self.steer, self.throttle())
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    cols: Vec<Vec<f64>>,
    conv_out: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    enc: [Vec<f64>; 2],
    speed_in: [f64; 1],
    speed: [Vec<f64>; 2],
    angle_in: [f64; 1],
    angle: Option<[Vec<f64>; 2]>,
    fused: Vec<f64>,
    fusion_out: Vec<f64>,
    head_h: Vec<f64>,
    raw: [f64; 3],
    fusion_idx: usize,
    head_idx: usize,
}

fn dense_relu(d: Dense, p: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d.s.out];
    layers::dense_forward(d.s, &p[d.w..d.w + d.s.inp * d.s.out], &p[d.b..d.b + d.s.out], x, &mut y);
    layers::relu(&mut y);
    y
}

fn check_input(params: &ModelParameters, input: &[f64], speed: f64) -> Result<()> {
    if input.len() != params.input.len() {
        return Err(Error::Shape(format!(
            "model expects {} input values ({} channels), got {}",
            params.input.len(),
            params.input.channels(),
            input.len()
        )));
    }
    if !(speed >= 0.0 && speed.is_finite()) {
        return Err(Error::Shape(format!("speed must be finite and >= 0, got {speed}")));
    }
    Ok(())
}

fn trace(params: &ModelParameters, input: &[f64], speed: f64, command: Command) -> Trace {
    let g = &params.graph;
    let p = &params.values;
    let mut cols = Vec::with_capacity(g.convs.len());
    let mut conv_out: Vec<Vec<f64>> = Vec::with_capacity(g.convs.len());
    for c in &g.convs {
        let x = conv_out.last().map_or(input, |v| v.as_slice());
        let mut col = vec![0.0; c.s.patch() * c.s.positions()];
        layers::im2col(c.s, x, &mut col);
        let mut y = vec![0.0; c.s.out_c * c.s.positions()];
        layers::conv_forward(
            c.s,
            &p[c.w..c.w + c.s.weights()],
            &p[c.b..c.b + c.s.out_c],
            &col,
            &mut y,
        );
        layers::relu(&mut y);
        cols.push(col);
        conv_out.push(y);
    }
    let last = g.convs.last().expect("at least one convolution");
    let positions = last.s.positions();
    let pooled: Vec<f64> = conv_out
        .last()
        .unwrap()
        .chunks(positions)
        .map(|ch| ch.iter().sum::<f64>() / positions as f64)
        .collect();
    let e1 = dense_relu(g.enc[0], p, &pooled);
    let e2 = dense_relu(g.enc[1], p, &e1);
    let speed_in = [speed / params.dims.speed_scale];
    let s1 = dense_relu(g.speed[0], p, &speed_in);
    let s2 = dense_relu(g.speed[1], p, &s1);
    let angle_in = [command.angle.degrees() / 180.0];
    let angle = g.angle.map(|a| {
        let a1 = dense_relu(a[0], p, &angle_in);
        let a2 = dense_relu(a[1], p, &a1);
        [a1, a2]
    });
    let mut fused = Vec::with_capacity(3 * params.dims.feature);
    fused.extend_from_slice(&e2);
    fused.extend_from_slice(&s2);
    if let Some(a) = &angle {
        fused.extend_from_slice(&a[1]);
    }
    let branch = params.head_for(command);
    let fusion_idx = if g.fusion.len() == 1 { 0 } else { branch };
    let head_idx = if g.heads.len() == 1 { 0 } else { branch };
    let fusion_out = dense_relu(g.fusion[fusion_idx], p, &fused);
    let head = g.heads[head_idx];
    let head_h = dense_relu(head[0], p, &fusion_out);
    let mut raw = [0.0; 3];
    layers::dense_forward(
        head[1].s,
        &p[head[1].w..head[1].w + head[1].s.inp * 3],
        &p[head[1].b..head[1].b + 3],
        &head_h,
        &mut raw,
    );
    Trace {
        cols,
        conv_out,
        pooled,
        enc: [e1, e2],
        speed_in,
        speed: [s1, s2],
        angle_in,
        angle,
        fused,
        fusion_out,
        head_h,
        raw,
        fusion_idx,
        head_idx,
    }
}

fn output_of(t: &Trace) -> NetworkOutput {
    NetworkOutput {
        steer: t.raw[0].tanh(),
        throttle_logits: [t.raw[1], t.raw[2]],
        head: t.head_idx,
    }
}

/// Runs the network on a flat stacked input (channel-major, oldest frame first).
pub fn forward_input(
    params: &ModelParameters,
    input: &[f64],
    speed: f64,
    command: impl Into<Command>,
) -> Result<NetworkOutput> {
    check_input(params, input, speed)?;
    Ok(output_of(&trace(params, input, speed, command.into())))
}

pub fn forward(
    params: &ModelParameters,
    observation: &ObservationStack,
    speed: f64,
    command: impl Into<Command>,
) -> Result<NetworkOutput> {
    if observation.k() != params.input.k || observation.mode() != params.input.mode {
        return Err(Error::Shape(format!(
            "model expects k={} {} frames, got k={} {}",
            params.input.k,
            params.input.mode.tag(),
            observation.k(),
            observation.mode().tag()
        )));
    }
    forward_input(params, &observation.to_input(), speed, command)
}

/// Backpropagates `draw` (gradient w.r.t. the three raw head outputs),
/// accumulating into `grad`.
fn backprop(params: &ModelParameters, input_len: usize, t: &Trace, draw: [f64; 3], grad: &mut [f64]) {
    let g = &params.graph;
    let p = &params.values;

    fn dense_back(d: Dense, p: &[f64], x: &[f64], dy: &[f64], grad: &mut [f64], want_dx: bool) -> Vec<f64> {
        let (dw_end, b_end) = (d.w + d.s.inp * d.s.out, d.b + d.s.out);
        let mut dx = vec![0.0; if want_dx { d.s.inp } else { 0 }];
        // weight and bias blocks are adjacent: w then b
        let (gw, gb) = grad[d.w..b_end].split_at_mut(dw_end - d.w);
        layers::dense_backward(
            d.s,
            &p[d.w..dw_end],
            x,
            dy,
            gw,
            gb,
            want_dx.then_some(dx.as_mut_slice()),
        );
        dx
    }

    let head = g.heads[t.head_idx];
    let mut d_hh = dense_back(head[1], p, &t.head_h, &draw, grad, true);
    layers::relu_backward(&t.head_h, &mut d_hh);
    let mut d_fo = dense_back(head[0], p, &t.fusion_out, &d_hh, grad, true);
    layers::relu_backward(&t.fusion_out, &mut d_fo);
    let d_fused = dense_back(g.fusion[t.fusion_idx], p, &t.fused, &d_fo, grad, true);
    let e = params.dims.feature;

    let mut d_e2 = d_fused[..e].to_vec();
    let mut d_s2 = d_fused[e..2 * e].to_vec();
    layers::relu_backward(&t.speed[1], &mut d_s2);
    let mut d_s1 = dense_back(g.speed[1], p, &t.speed[0], &d_s2, grad, true);
    layers::relu_backward(&t.speed[0], &mut d_s1);
    dense_back(g.speed[0], p, &t.speed_in, &d_s1, grad, false);
    if let (Some(a), Some(acts)) = (g.angle, &t.angle) {
        let mut d_a2 = d_fused[2 * e..3 * e].to_vec();
        layers::relu_backward(&acts[1], &mut d_a2);
        let mut d_a1 = dense_back(a[1], p, &acts[0], &d_a2, grad, true);
        layers::relu_backward(&acts[0], &mut d_a1);
        dense_back(a[0], p, &t.angle_in, &d_a1, grad, false);
    }

    layers::relu_backward(&t.enc[1], &mut d_e2);
    let mut d_e1 = dense_back(g.enc[1], p, &t.enc[0], &d_e2, grad, true);
    layers::relu_backward(&t.enc[0], &mut d_e1);
    let d_pool = dense_back(g.enc[0], p, &t.pooled, &d_e1, grad, true);

    let last = g.convs.last().unwrap();
    let positions = last.s.positions();
    let mut dy: Vec<f64> = d_pool
        .iter()
        .flat_map(|&v| std::iter::repeat(v / positions as f64).take(positions))
        .collect();
    for (i, c) in g.convs.iter().enumerate().rev() {
        layers::relu_backward(&t.conv_out[i], &mut dy);
        let (gw, gb) = grad[c.w..c.b + c.s.out_c].split_at_mut(c.b - c.w);
        let want = i > 0;
        let mut dcols = vec![0.0; if want { c.s.patch() * c.s.positions() } else { 0 }];
        layers::conv_backward(
            c.s,
            &p[c.w..c.w + c.s.weights()],
            &t.cols[i],
            &dy,
            gw,
            gb,
            want.then_some(dcols.as_mut_slice()),
        );
        if want {
            let mut dx = vec![0.0; c.s.in_c * c.s.in_h * c.s.in_w];
            layers::col2im(c.s, &dcols, &mut dx);
            dy = dx;
        }
    }
    debug_assert_eq!(g.convs[0].s.in_c * g.convs[0].s.in_h * g.convs[0].s.in_w, input_len);
}

/// One supervised example in network-input form.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub input: Vec<f64>,
    pub speed: f64,
    pub command: Command,
    pub label: Action,
    pub weight: f64,
}

/// Mean loss of a batch and the gradient of that mean w.r.t. every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub grad: Vec<f64>,
    pub loss: LossParts,
}

/// Exact reverse-mode gradient of the mean batch loss. Samples are processed
/// in order and their gradients summed in that order.
pub fn backward(params: &ModelParameters, batch: &[BatchItem], lambda: f64) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut grad = vec![0.0; params.values.len()];
    let mut sum = LossParts::default();
    let scale = 1.0 / batch.len() as f64;
    for (i, item) in batch.iter().enumerate() {
        check_input(params, &item.input, item.speed)?;
        let t = trace(params, &item.input, item.speed, item.command);
        let (parts, dout) = loss_and_grad(&output_of(&t), t.raw[0], item.label, lambda, item.weight);
        if !parts.total.is_finite() {
            return Err(Error::NonFiniteLoss { index: i });
        }
        sum.total += parts.total;
        sum.steer += parts.steer;
        sum.throttle += parts.throttle;
        backprop(
            params,
            item.input.len(),
            &t,
            [dout[0] * scale, dout[1] * scale, dout[2] * scale],
            &mut grad,
        );
    }
    Ok(BatchGradient {
        grad,
        loss: LossParts {
            total: sum.total * scale,
            steer: sum.steer * scale,
            throttle: sum.throttle * scale,
        },
    })
}

/// Mean batch loss without gradients.
pub fn batch_loss(params: &ModelParameters, batch: &[BatchItem], lambda: f64) -> Result<LossParts> {
    let mut sum = LossParts::default();
    for item in batch {
        let out = forward_input(params, &item.input, item.speed, item.command)?;
        let p = crate::training::loss(&out, item.label, lambda, item.weight);
        sum.total += p.total;
        sum.steer += p.steer;
        sum.throttle += p.throttle;
    }
    let n = batch.len().max(1) as f64;
    Ok(LossParts {
        total: sum.total / n,
        steer: sum.steer / n,
        throttle: sum.throttle / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Branch, SubgoalAngle};

    fn shape(mode: ChannelMode) -> InputShape {
        InputShape {
            k: 2,
            mode,
            grid_h: 8,
            grid_w: 8,
        }
    }

    fn small() -> ModelDims {
        ModelDims {
            conv_channels: vec![4, 6],
            feature: 8,
            meas_hidden: 3,
            fusion: 6,
            head_hidden: 5,
            speed_scale: 5.0,
        }
    }

    #[test]
    fn stage_counts_per_architecture() {
        let s = shape(ChannelMode::As);
        let ab = build_model(Architecture::AngleBranched, s, &small(), 1).unwrap();
        let ai = build_model(Architecture::AngleInput, s, &small(), 1).unwrap();
        let db = build_model(Architecture::DiscreteBranched, s, &small(), 1).unwrap();
        assert_eq!((ab.fusion_stages(), ab.heads()), (1, 3));
        assert_eq!((ai.fusion_stages(), ai.heads()), (1, 1));
        assert_eq!((db.fusion_stages(), db.heads()), (3, 3));
        assert!(db.block("angle_fc1.w").is_none());
        assert!(ab.block("angle_fc1.w").is_some());
    }

    #[test]
    fn default_dims_stay_small() {
        let s = InputShape {
            k: 4,
            mode: ChannelMode::Asd,
            grid_h: 32,
            grid_w: 32,
        };
        for arch in Architecture::ALL {
            let m = build_model(arch, s, &ModelDims::default(), 0).unwrap();
            assert!(m.n_params() <= 200_000, "{arch}: {}", m.n_params());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let s = shape(ChannelMode::Asd);
        let a = build_model(Architecture::AngleBranched, s, &small(), 7).unwrap();
        let b = build_model(Architecture::AngleBranched, s, &small(), 7).unwrap();
        let c = build_model(Architecture::AngleBranched, s, &small(), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert!(a.values[a.block("conv1.b").unwrap().range()].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_network_outputs_zero_steer_and_equal_logits() {
        let s = shape(ChannelMode::As);
        let mut m = build_model(Architecture::AngleInput, s, &small(), 1).unwrap();
        m.values.iter_mut().for_each(|v| *v = 0.0);
        let out = forward_input(&m, &vec![1.0; s.len()], 3.0, SubgoalAngle::wrapped(30.0)).unwrap();
        assert_eq!(out.steer, 0.0);
        assert_eq!(out.throttle_logits[0], out.throttle_logits[1]);
    }

    #[test]
    fn wrong_input_length_is_shape_error() {
        let s = shape(ChannelMode::Asd);
        let m = build_model(Architecture::AngleInput, s, &small(), 1).unwrap();
        let short = vec![0.0; shape(ChannelMode::As).len()];
        assert!(matches!(
            forward_input(&m, &short, 0.0, SubgoalAngle::wrapped(0.0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn same_branch_commands_share_a_head() {
        let s = shape(ChannelMode::As);
        let m = build_model(Architecture::AngleBranched, s, &small(), 3).unwrap();
        let x = vec![0.5; s.len()];
        let a = forward_input(&m, &x, 1.0, SubgoalAngle::wrapped(-45.0)).unwrap();
        let b = forward_input(&m, &x, 1.0, SubgoalAngle::wrapped(-90.0)).unwrap();
        let c = forward_input(&m, &x, 1.0, SubgoalAngle::wrapped(45.0)).unwrap();
        assert_eq!(a.head, b.head);
        assert_ne!(a.head, c.head);
    }

    #[test]
    fn discrete_baseline_follows_the_route_command_not_the_angle() {
        let s = shape(ChannelMode::As);
        let m = build_model(Architecture::DiscreteBranched, s, &small(), 3).unwrap();
        let x = vec![0.5; s.len()];
        let right = SubgoalAngle::wrapped(45.0);
        for route in Branch::ALL {
            let out = forward_input(&m, &x, 1.0, Command::new(right, route)).unwrap();
            assert_eq!(out.head, route.index());
        }
        // without an angle encoder the angle value itself has no effect
        let a = forward_input(&m, &x, 1.0, Command::new(right, Branch::Left)).unwrap();
        let b = forward_input(&m, &x, 1.0, Command::new(SubgoalAngle::wrapped(-3.0), Branch::Left)).unwrap();
        assert_eq!(a, b);
        let ab = build_model(Architecture::AngleBranched, s, &small(), 3).unwrap();
        let out = forward_input(&ab, &x, 1.0, Command::new(right, Branch::Left)).unwrap();
        assert_eq!(out.head, Branch::Right.index());
    }

    #[test]
    fn tensor_shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn arch_tags_round_trip() {
        for a in Architecture::ALL {
            assert_eq!(a.tag().parse::<Architecture>().unwrap(), a);
            assert_eq!(Architecture::from_code(a.code()).unwrap(), a);
        }
    }
}
