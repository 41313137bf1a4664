//! Executable networks instantiated from a [`NetworkSpec`].

use rand::Rng;

use crate::arch::{LayerKind, NetworkSpec};
use crate::autodiff::{Tape, Var};
use crate::blocks::{BasicBlockParams, Block, BottleneckParams};
use crate::error::{Error, Result};
use crate::nn::{join, BnConfig, BnParams, ConvParams, Entry, EntryMut, LinearParams, Mode, Module};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum NetLayer<T: Element> {
    Conv(ConvParams<T>),
    Bn(BnParams<T>),
    Relu,
    MaxPool { k: usize, stride: usize, pad: usize },
    Gap,
    Linear(LinearParams<T>),
    Block(Block<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T: Element> {
    pub spec: NetworkSpec,
    pub layers: Vec<(String, NetLayer<T>)>,
}

/// Result of one recorded forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// Output of every top-level layer, in order, keyed by layer name.
    pub outputs: Vec<(String, Var)>,
    /// Post-BN, pre-nonlinearity output of every 3x3 convolution, in order.
    pub responses: Vec<Var>,
}

impl<T: Element> Network<T> {
    /// Instantiate with He-initialized convolutions and linear weights, BN
    /// gamma = 1 / beta = 0, drawing weights in layer order from `rng`.
    pub fn new<R: Rng + ?Sized>(spec: &NetworkSpec, bn: BnConfig, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let layer = match l.kind {
                LayerKind::Conv {
                    in_channels,
                    out_channels,
                    k,
                    stride,
                } => NetLayer::Conv(ConvParams::new(in_channels, out_channels, k, stride, rng)?),
                LayerKind::Bn { channels } => NetLayer::Bn(BnParams::new(channels, bn)?),
                LayerKind::Relu => NetLayer::Relu,
                LayerKind::Maxpool { k, stride, pad } => NetLayer::MaxPool { k, stride, pad },
                LayerKind::Gap => NetLayer::Gap,
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => NetLayer::Linear(LinearParams::new(in_features, out_features, rng)?),
                LayerKind::BlockBasic {
                    in_channels,
                    out_channels,
                    stride,
                    shortcut,
                } => NetLayer::Block(Block::Basic(BasicBlockParams::new(
                    in_channels,
                    out_channels,
                    stride,
                    shortcut,
                    bn,
                    rng,
                )?)),
                LayerKind::BlockBottleneck {
                    in_channels,
                    width,
                    stride,
                    shortcut,
                } => NetLayer::Block(Block::Bottleneck(BottleneckParams::new(
                    in_channels,
                    width,
                    stride,
                    shortcut,
                    bn,
                    rng,
                )?)),
                LayerKind::Add => {
                    return Err(Error::InvalidArgument(format!(
                        "top-level add layer {} has no shortcut source",
                        l.name
                    )))
                }
            };
            layers.push((l.name.clone(), layer));
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Forward> {
        let expected = self.spec.input;
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != expected[0] {
            return Err(Error::ShapeMismatch {
                op: "network input",
                lhs: shape.to_vec(),
                rhs: vec![0, expected[0], expected[1], expected[2]],
            });
        }
        let mut h = x;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut responses = Vec::new();
        let mut last_conv_k = 0;
        for (name, layer) in &mut self.layers {
            h = match layer {
                NetLayer::Conv(c) => {
                    last_conv_k = c.kernel();
                    c.forward(tape, h)?
                }
                NetLayer::Bn(bn) => {
                    let y = bn.forward(tape, h, mode)?;
                    if last_conv_k == 3 {
                        responses.push(y);
                    }
                    last_conv_k = 0;
                    y
                }
                NetLayer::Relu => tape.relu(h)?,
                NetLayer::MaxPool { k, stride, pad } => tape.maxpool(h, *k, *stride, *pad)?,
                NetLayer::Gap => tape.global_avg_pool(h)?,
                NetLayer::Linear(l) => l.forward(tape, h)?,
                NetLayer::Block(b) => b.forward(tape, h, mode, &mut responses)?,
            };
            outputs.push((name.clone(), h));
        }
        Ok(Forward {
            logits: h,
            outputs,
            responses,
        })
    }

    /// Logits for a batch, without keeping the graph.
    pub fn logits(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.input(x.clone(), false);
        let fwd = self.forward(&mut tape, v, mode)?;
        Ok(tape.value(fwd.logits).clone())
    }

    /// Zero every convolution weight inside residual branches, leaving stem,
    /// head and projection shortcuts untouched.
    pub fn zero_residual_branches(&mut self) {
        for (_, layer) in &mut self.layers {
            if let NetLayer::Block(b) = layer {
                b.zero_residual();
            }
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.layers.iter().filter_map(|(_, l)| match l {
            NetLayer::Block(b) => Some(b),
            _ => None,
        })
    }

    /// Visit every BN layer (stem, blocks, projections).
    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BnParams<T>)) {
        fn shortcut_bn<T: Element>(s: &mut Option<crate::blocks::Shortcut<T>>, f: &mut dyn FnMut(&mut BnParams<T>)) {
            if let Some((_, bn)) = s.as_mut().and_then(|s| s.proj.as_mut()) {
                f(bn);
            }
        }
        for (_, layer) in &mut self.layers {
            match layer {
                NetLayer::Bn(bn) => f(bn),
                NetLayer::Block(Block::Basic(b)) => {
                    f(&mut b.bn1);
                    f(&mut b.bn2);
                    shortcut_bn(&mut b.shortcut, f);
                }
                NetLayer::Block(Block::Bottleneck(b)) => {
                    f(&mut b.bn1);
                    f(&mut b.bn2);
                    f(&mut b.bn3);
                    shortcut_bn(&mut b.shortcut, f);
                }
                _ => {}
            }
        }
    }
}

impl<T: Element> Module<T> for Network<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        for (name, layer) in &self.layers {
            let p = join(prefix, name);
            match layer {
                NetLayer::Conv(c) => c.visit(&p, f),
                NetLayer::Bn(b) => b.visit(&p, f),
                NetLayer::Linear(l) => l.visit(&p, f),
                NetLayer::Block(b) => b.visit(&p, f),
                NetLayer::Relu | NetLayer::MaxPool { .. } | NetLayer::Gap => {}
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        for (name, layer) in &mut self.layers {
            let p = join(prefix, name);
            match layer {
                NetLayer::Conv(c) => c.visit_mut(&p, f),
                NetLayer::Bn(b) => b.visit_mut(&p, f),
                NetLayer::Linear(l) => l.visit_mut(&p, f),
                NetLayer::Block(b) => b.visit_mut(&p, f),
                NetLayer::Relu | NetLayer::MaxPool { .. } | NetLayer::Gap => {}
            }
        }
    }
}
