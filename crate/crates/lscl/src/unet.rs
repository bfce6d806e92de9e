//! Tiny U-Net: encoder-decoder with skip concatenations, built from the
//! tape primitives. Decoder upsampling is nearest-neighbor followed by a
//! convolution.

use crate::error::{LsclError, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 4,
            base_channels: 8,
            depth: 2,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(LsclError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.base_channels == 0 {
            return Err(LsclError::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// (name, shape) for every parameter, in sorted name order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push_conv = |name: &str, cin: usize, cout: usize| {
            specs.push((format!("{name}.w"), vec![cout, cin, 3, 3]));
            specs.push((format!("{name}.b"), vec![cout]));
        };
        for d in 0..self.depth {
            let cin = if d == 0 {
                self.in_channels
            } else {
                self.channels_at(d - 1)
            };
            let c = self.channels_at(d);
            push_conv(&format!("enc{d}.conv1"), cin, c);
            push_conv(&format!("enc{d}.conv2"), c, c);
        }
        let cb = self.channels_at(self.depth);
        push_conv("bottleneck.conv1", self.channels_at(self.depth - 1), cb);
        push_conv("bottleneck.conv2", cb, cb);
        for d in (0..self.depth).rev() {
            let c = self.channels_at(d);
            let c_above = self.channels_at(d + 1);
            push_conv(&format!("dec{d}.conv1"), c_above + c, c);
            push_conv(&format!("dec{d}.conv2"), c, c);
        }
        push_conv("head", self.base_channels, self.num_classes);
        specs.sort_by(|a, b| a.0.cmp(&b.0));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// U-Net parameters, stored sorted by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: UNetConfig,
    pub params: Vec<(String, Tensor)>,
}

impl Model {
    pub fn param(&self, name: &str) -> &Tensor {
        let idx = self
            .params
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .unwrap_or_else(|_| panic!("unknown parameter {name}"));
        &self.params[idx].1
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        let idx = self
            .params
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .unwrap_or_else(|_| panic!("unknown parameter {name}"));
        &mut self.params[idx].1
    }
}

/// He-style initialization: kernels gaussian with std sqrt(2 / fan_in),
/// biases zero. Deterministic per seed.
pub fn init_unet(config: UNetConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let params = config
        .param_specs()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                let fan_in = shape[1] * shape[2] * shape[3];
                let std = (2.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                Tensor::new(shape, (0..n).map(|_| std * rng.gauss()).collect())
            };
            (name, t)
        })
        .collect();
    Ok(Model { config, params })
}

/// Forward pass recorded on `tape`. Returns the logits node plus the node
/// ids of every parameter (sorted like `model.params`) for gradient lookup.
pub struct ForwardNodes {
    pub logits: NodeId,
    pub param_nodes: Vec<(String, NodeId)>,
}

pub fn forward(model: &Model, batch: NodeId, tape: &mut Tape) -> Result<ForwardNodes> {
    let cfg = &model.config;
    let shape = tape.value(batch).shape.clone();
    let (h, w) = match shape.as_slice() {
        [_, c, h, w] if *c == cfg.in_channels => (*h, *w),
        other => {
            return Err(LsclError::shape(
                "unet-forward",
                format!("expected [b, {}, h, w], got {other:?}", cfg.in_channels),
            ))
        }
    };
    let div = 1usize << cfg.depth;
    if h % div != 0 || w % div != 0 {
        return Err(LsclError::shape(
            "unet-forward",
            format!("spatial size {h}x{w} not divisible by 2^depth = {div}"),
        ));
    }

    let mut param_nodes = Vec::with_capacity(model.params.len());
    for (name, t) in &model.params {
        param_nodes.push((name.clone(), tape.input(t.clone())?));
    }
    let node_of = |name: &str| -> NodeId {
        param_nodes
            .binary_search_by(|(n, _)| n.as_str().cmp(name))
            .map(|i| param_nodes[i].1)
            .unwrap_or_else(|_| panic!("unknown parameter {name}"))
    };

    let conv_relu = |tape: &mut Tape, x: NodeId, name: &str| -> Result<NodeId> {
        let c = tape.conv2d(x, node_of(&format!("{name}.w")), node_of(&format!("{name}.b")))?;
        tape.relu(c)
    };

    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = batch;
    for d in 0..cfg.depth {
        x = conv_relu(tape, x, &format!("enc{d}.conv1"))?;
        x = conv_relu(tape, x, &format!("enc{d}.conv2"))?;
        skips.push(x);
        x = tape.maxpool2(x)?;
    }
    x = conv_relu(tape, x, "bottleneck.conv1")?;
    x = conv_relu(tape, x, "bottleneck.conv2")?;
    for d in (0..cfg.depth).rev() {
        x = tape.upsample2(x)?;
        x = tape.concat_channels(x, skips[d])?;
        x = conv_relu(tape, x, &format!("dec{d}.conv1"))?;
        x = conv_relu(tape, x, &format!("dec{d}.conv2"))?;
    }
    let logits = tape.conv2d(x, node_of("head.w"), node_of("head.b"))?;
    Ok(ForwardNodes { logits, param_nodes })
}

/// Inference-only forward: fresh tape, returns logits by value.
pub fn forward_logits(model: &Model, batch: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let b = tape.input(batch.clone())?;
    let nodes = forward(model, b, &mut tape)?;
    Ok(tape.value(nodes.logits).clone())
}
