//! Architecture builders and the layer graph they produce.
//!
//! A [`Model`] is an ordered list of [`LayerNode`]s; each node names the
//! values it reads, where value 0 is the model input and value `i + 1` is the
//! output of node `i`. Sequential models read the previous value; the U-Net
//! decoder additionally reads encoder values through concatenation.

pub(crate) mod io;
mod spec;

pub use io::{model_from_bytes, model_to_bytes, read_model, write_model};
pub use spec::{ConvBlock, ModelKind, ModelSpec, OutputKind};

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerGrads, LayerKind, LayerNode, Mode};
use crate::tensor::{Rng, Tensor};

/// Images per chunk in [`Model::predict`].
pub const PREDICT_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub layer: LayerNode,
    pub inputs: Vec<usize>,
}

/// Parameter gradients (aligned with [`Model::params_mut`]) and the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub input: Tensor,
    pub params: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    nodes: Vec<GraphNode>,
    /// Encoder values fed to decoder concatenations.
    skips: Vec<usize>,
    /// Index of the last node reading each value.
    last_use: Vec<usize>,
}

struct Builder {
    nodes: Vec<GraphNode>,
    shapes: Vec<Vec<usize>>,
    rng: Rng,
}

impl Builder {
    fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            shapes: vec![input_shape.to_vec()],
            rng: Rng::new(seed),
        }
    }

    fn last(&self) -> usize {
        self.shapes.len() - 1
    }

    fn shape(&self, v: usize) -> &[usize] {
        &self.shapes[v]
    }

    fn push(&mut self, kind: LayerKind, inputs: Vec<usize>) -> Result<usize> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shapes[v].as_slice()).collect();
        let layer = LayerNode::new(kind, &shapes, &mut self.rng)?;
        self.shapes.push(layer.output_shape().to_vec());
        self.nodes.push(GraphNode { layer, inputs });
        Ok(self.last())
    }

    fn then(&mut self, kind: LayerKind) -> Result<usize> {
        let prev = self.last();
        self.push(kind, vec![prev])
    }

    /// Convolution followed by batchnorm and activation, or a fused conv when
    /// batchnorm is off.
    fn conv_unit(&mut self, input: usize, kernel: usize, filters: usize, act: Activation, bn: bool) -> Result<usize> {
        let in_channels = *self.shape(input).last().unwrap();
        let conv_act = if bn { Activation::Linear } else { act };
        let v = self.push(
            LayerKind::Conv2d {
                kernel,
                in_channels,
                filters,
                activation: conv_act,
            },
            vec![input],
        )?;
        if !bn {
            return Ok(v);
        }
        self.then(LayerKind::BatchNorm { features: filters })?;
        self.then(LayerKind::Activation { activation: act })
    }

    fn dense_unit(&mut self, units: usize, act: Activation, bn: bool, dropout: f64) -> Result<usize> {
        let inputs = self.shape(self.last())[0];
        let dense_act = if bn { Activation::Linear } else { act };
        self.then(LayerKind::Dense {
            inputs,
            units,
            activation: dense_act,
        })?;
        if bn {
            self.then(LayerKind::BatchNorm { features: units })?;
            self.then(LayerKind::Activation { activation: act })?;
        }
        if dropout > 0.0 {
            self.then(LayerKind::Dropout { rate: dropout })?;
        }
        Ok(self.last())
    }

    fn dense_head(&mut self, spec: &ModelSpec) -> Result<usize> {
        if self.shape(self.last()).len() > 1 {
            self.then(LayerKind::Flatten)?;
        }
        for &h in &spec.hidden_layers {
            self.dense_unit(h, spec.activation, spec.use_batchnorm, spec.dropout_rate)?;
        }
        let inputs = self.shape(self.last())[0];
        self.then(LayerKind::Dense {
            inputs,
            units: 1,
            activation: spec.output.activation(),
        })
    }
}

impl Model {
    /// Instantiates the layer graph for `spec` with He-uniform weights drawn from `spec.seed`.
    pub fn build(spec: &ModelSpec) -> Result<Model> {
        spec.validate()?;
        let mut b = Builder::new(&spec.input_shape, spec.seed);
        let mut skips = Vec::new();
        match spec.kind {
            ModelKind::Perceptron => {
                b.then(LayerKind::Dense {
                    inputs: spec.input_shape[0],
                    units: 1,
                    activation: spec.output.activation(),
                })?;
            }
            ModelKind::Mlp => {
                b.dense_head(spec)?;
            }
            ModelKind::Cnn => {
                for block in &spec.conv_blocks {
                    for _ in 0..block.convs {
                        let prev = b.last();
                        b.conv_unit(prev, spec.kernel, block.filters, spec.activation, spec.use_batchnorm)?;
                    }
                    b.then(LayerKind::Pool { mode: spec.pool })?;
                }
                b.dense_head(spec)?;
            }
            ModelKind::Unet => {
                let filters = |l: usize| spec.base_filters << l;
                for l in 0..spec.depth {
                    let prev = b.last();
                    let v = b.conv_unit(prev, spec.kernel, filters(l), spec.activation, spec.use_batchnorm)?;
                    skips.push(v);
                    b.then(LayerKind::Pool { mode: spec.pool })?;
                }
                let prev = b.last();
                b.conv_unit(prev, spec.kernel, filters(spec.depth), spec.activation, spec.use_batchnorm)?;
                if spec.dropout_rate > 0.0 {
                    b.then(LayerKind::Dropout {
                        rate: spec.dropout_rate,
                    })?;
                }
                for l in (0..spec.depth).rev() {
                    let up = b.then(LayerKind::Upsample)?;
                    let cat = b.push(LayerKind::Concat, vec![up, skips[l]])?;
                    b.conv_unit(cat, spec.kernel, filters(l), spec.activation, spec.use_batchnorm)?;
                }
                let prev = b.last();
                let c = *b.shape(prev).last().unwrap();
                b.push(
                    LayerKind::Conv2d {
                        kernel: 1,
                        in_channels: c,
                        filters: 1,
                        activation: spec.output.activation(),
                    },
                    vec![prev],
                )?;
            }
        }
        Ok(Model::from_nodes(spec.clone(), b.nodes, skips))
    }

    fn from_nodes(spec: ModelSpec, nodes: Vec<GraphNode>, skips: Vec<usize>) -> Model {
        let mut last_use = vec![0; nodes.len() + 1];
        for (i, n) in nodes.iter().enumerate() {
            for &v in &n.inputs {
                last_use[v] = i;
            }
        }
        Model {
            spec,
            nodes,
            skips,
            last_use,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [GraphNode] {
        &mut self.nodes
    }

    /// Per-sample output shape: `[1]` for scalar models, `[H, W, 1]` for maps.
    pub fn output_shape(&self) -> &[usize] {
        self.nodes.last().map(|n| n.layer.output_shape()).unwrap_or(&[])
    }

    pub fn parameter_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.parameter_count()).sum()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.layer.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params.iter_mut()).collect()
    }

    pub fn buffers(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.layer.buffers.iter()).collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.spec.input_shape.len() + 1 || x.shape()[1..] != self.spec.input_shape[..] {
            let mut expected = vec![x.batch_size()];
            expected.extend_from_slice(&self.spec.input_shape);
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: expected,
                context: "model input",
            });
        }
        Ok(())
    }

    fn run(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng, zero_skips: bool, keep_all: bool) -> Result<Vec<Option<Tensor>>> {
        self.check_input(x)?;
        let mut values: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len() + 1);
        values.push(Some(x.clone()));
        for i in 0..self.nodes.len() {
            let node = &mut self.nodes[i];
            let zeroed: Vec<Option<Tensor>> = node
                .inputs
                .iter()
                .map(|v| {
                    (zero_skips && matches!(node.layer.kind, LayerKind::Concat) && self.skips.contains(v))
                        .then(|| Tensor::zeros(values[*v].as_ref().unwrap().shape()))
                })
                .collect();
            let inputs: Vec<&Tensor> = node
                .inputs
                .iter()
                .zip(&zeroed)
                .map(|(&v, z)| z.as_ref().unwrap_or_else(|| values[v].as_ref().unwrap()))
                .collect();
            let out = node.layer.forward(&inputs, mode, rng)?;
            values.push(Some(out));
            if !keep_all {
                for &v in &self.nodes[i].inputs {
                    if self.last_use[v] == i {
                        values[v] = None;
                    }
                }
            }
        }
        Ok(values)
    }

    /// Runs the graph on a batch `[B, ...input_shape]`. `rng` drives dropout in train mode.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        let mut values = self.run(x, mode, rng, false, false)?;
        Ok(values.pop().flatten().expect("graph has an output"))
    }

    /// Backpropagates `grad_out` through the graph from the last forward pass.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len() + 1];
        grads[self.nodes.len()] = Some(grad_out.clone());
        let mut per_node: Vec<Vec<Tensor>> = vec![Vec::new(); self.nodes.len()];
        for i in (0..self.nodes.len()).rev() {
            let g = grads[i + 1]
                .take()
                .ok_or_else(|| Error::invalid(format!("node {i} output received no gradient")))?;
            let LayerGrads { inputs, params } = self.nodes[i].layer.backward(&g)?;
            for (&v, gi) in self.nodes[i].inputs.iter().zip(inputs) {
                match &mut grads[v] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot => *slot = Some(gi),
                }
            }
            per_node[i] = params;
        }
        Ok(Gradients {
            input: grads[0].take().expect("input gradient"),
            params: per_node.into_iter().flatten().collect(),
        })
    }

    /// Inference-mode outputs, evaluated in chunks of [`PREDICT_CHUNK`].
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut work = self.clone();
        let mut rng = Rng::new(0);
        let n = x.batch_size();
        let mut outputs = Vec::with_capacity(n * self.output_shape().iter().product::<usize>());
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let out = work.forward(&x.gather(&idx)?, Mode::Inference, &mut rng)?;
            outputs.extend_from_slice(out.data());
            start = end;
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.output_shape());
        Tensor::new(shape, outputs)
    }

    /// Inference outputs and the gradient of each sample's summed output w.r.t. its input.
    pub fn input_gradient(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut work = self.clone();
        let out = work.forward(x, Mode::Inference, &mut Rng::new(0))?;
        let g = work.backward(&Tensor::ones(out.shape()))?;
        Ok((out, g.input))
    }

    /// Every intermediate value in inference mode; index 0 is the input.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut work = self.clone();
        let values = work.run(x, Mode::Inference, &mut Rng::new(0), false, true)?;
        Ok(values.into_iter().map(|v| v.expect("kept")).collect())
    }

    /// U-Net inference with every skip connection replaced by zeros.
    pub fn predict_without_skips(&self, x: &Tensor) -> Result<Tensor> {
        if self.skips.is_empty() {
            return Err(Error::invalid("model has no skip connections"));
        }
        let mut work = self.clone();
        let mut values = work.run(x, Mode::Inference, &mut Rng::new(0), true, false)?;
        Ok(values.pop().flatten().expect("graph has an output"))
    }

    /// Copy of the model accepting `extra` additional trailing input channels
    /// whose first-layer weights are fixed at zero, so they cannot affect the output.
    pub fn with_ignored_input_channels(&self, extra: usize) -> Result<Model> {
        let mut spec = self.spec.clone();
        let (h, w, c) = spec.image_input()?;
        spec.input_shape = vec![h, w, c + extra];
        let mut nodes = self.nodes.clone();
        let first = &mut nodes[0].layer;
        match &mut first.kind {
            LayerKind::Conv2d {
                kernel, in_channels, filters, ..
            } => {
                let (k, co) = (*kernel, *filters);
                let old = &first.params[0];
                let mut wt = Tensor::zeros(&[k, k, c + extra, co]);
                for tap in 0..k * k {
                    for ci in 0..c {
                        let src = (tap * c + ci) * co;
                        let dst = (tap * (c + extra) + ci) * co;
                        wt.data_mut()[dst..dst + co].copy_from_slice(&old.data()[src..src + co]);
                    }
                }
                *in_channels = c + extra;
                first.params[0] = wt;
            }
            LayerKind::Flatten => {
                let dense = &mut nodes[1].layer;
                let LayerKind::Dense { inputs, units, .. } = &mut dense.kind else {
                    return Err(Error::invalid("flatten is not followed by a dense layer"));
                };
                let m = *units;
                let old = &dense.params[0];
                let mut wt = Tensor::zeros(&[h * w * (c + extra), m]);
                for p in 0..h * w {
                    for ci in 0..c {
                        let src = (p * c + ci) * m;
                        let dst = (p * (c + extra) + ci) * m;
                        wt.data_mut()[dst..dst + m].copy_from_slice(&old.data()[src..src + m]);
                    }
                }
                *inputs = h * w * (c + extra);
                dense.params[0] = wt;
            }
            _ => return Err(Error::invalid("first layer cannot take extra channels")),
        }
        // rebuild cached shapes through the graph
        let mut shapes: Vec<Vec<usize>> = vec![spec.input_shape.clone()];
        let mut rebuilt = Vec::with_capacity(nodes.len());
        for n in nodes {
            let ins: Vec<&[usize]> = n.inputs.iter().map(|&v| shapes[v].as_slice()).collect();
            let mut fresh = LayerNode::new(n.layer.kind.clone(), &ins, &mut Rng::new(0))?;
            fresh.params = n.layer.params;
            fresh.buffers = n.layer.buffers;
            shapes.push(fresh.output_shape().to_vec());
            rebuilt.push(GraphNode {
                layer: fresh,
                inputs: n.inputs,
            });
        }
        Ok(Model::from_nodes(spec, rebuilt, self.skips.clone()))
    }
}
