//! Symbolic network descriptions and their static audit.
//!
//! A [`NetworkSpec`] is an ordered list of [`LayerSpec`]s. Blocks are kept as
//! single entries and expanded to primitives deterministically when audited.
//! Counting conventions: convolutions carry no bias, BN contributes gamma and
//! beta, the linear head contributes weight and bias. Multiply-adds count
//! convolution and linear layers only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::{ShortcutKind, BOTTLENECK_EXPANSION};
use crate::error::{Error, Result};
use crate::tensor::out_extent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    CifarPlain,
    CifarResnet,
    ImagenetPlain,
    ImagenetResnet,
}

/// Network-level shortcut policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ShortcutOption {
    /// Identity, zero-padding where dimensions grow.
    #[default]
    A,
    /// Identity, projection where dimensions grow.
    B,
    /// Projection everywhere.
    C,
}

impl ShortcutOption {
    pub fn kind_for(self, in_channels: usize, out_channels: usize, stride: usize) -> ShortcutKind {
        let same = in_channels == out_channels && stride == 1;
        match (self, same) {
            (ShortcutOption::C, _) => ShortcutKind::ProjectionB,
            (_, true) => ShortcutKind::IdentitySame,
            (ShortcutOption::A, false) => ShortcutKind::ZeroPadA,
            (ShortcutOption::B, false) => ShortcutKind::ProjectionB,
        }
    }
}

impl std::str::FromStr for ShortcutOption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(ShortcutOption::A),
            "B" | "b" => Ok(ShortcutOption::B),
            "C" | "c" => Ok(ShortcutOption::C),
            _ => Err(Error::InvalidArgument(format!("unknown shortcut option {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
    },
    Bn {
        channels: usize,
    },
    Relu,
    Maxpool {
        k: usize,
        stride: usize,
        pad: usize,
    },
    Gap,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    BlockBasic {
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        shortcut: Option<ShortcutKind>,
    },
    BlockBottleneck {
        in_channels: usize,
        width: usize,
        stride: usize,
        shortcut: Option<ShortcutKind>,
    },
    Add,
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Bn { .. } => "bn",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool { .. } => "maxpool",
            LayerKind::Gap => "gap",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BlockBasic { .. } => "block-basic",
            LayerKind::BlockBottleneck { .. } => "block-bottleneck",
            LayerKind::Add => "add",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec { name: name.into(), kind }
    }

    /// Primitive layers of this entry, in execution order. Shortcut layers
    /// come after the residual branch and before the addition.
    pub fn expand(&self) -> Vec<LayerSpec> {
        let n = |s: &str| format!("{}.{}", self.name, s);
        let conv = |in_channels, out_channels, k, stride| LayerKind::Conv {
            in_channels,
            out_channels,
            k,
            stride,
        };
        let (mut out, in_c, out_c, stride, shortcut) = match self.kind {
            LayerKind::BlockBasic {
                in_channels,
                out_channels,
                stride,
                shortcut,
            } => (
                vec![
                    LayerSpec::new(n("conv1"), conv(in_channels, out_channels, 3, stride)),
                    LayerSpec::new(n("bn1"), LayerKind::Bn { channels: out_channels }),
                    LayerSpec::new(n("relu1"), LayerKind::Relu),
                    LayerSpec::new(n("conv2"), conv(out_channels, out_channels, 3, 1)),
                    LayerSpec::new(n("bn2"), LayerKind::Bn { channels: out_channels }),
                ],
                in_channels,
                out_channels,
                stride,
                shortcut,
            ),
            LayerKind::BlockBottleneck {
                in_channels,
                width,
                stride,
                shortcut,
            } => {
                let out_channels = width * BOTTLENECK_EXPANSION;
                (
                    vec![
                        LayerSpec::new(n("conv1"), conv(in_channels, width, 1, stride)),
                        LayerSpec::new(n("bn1"), LayerKind::Bn { channels: width }),
                        LayerSpec::new(n("relu1"), LayerKind::Relu),
                        LayerSpec::new(n("conv2"), conv(width, width, 3, 1)),
                        LayerSpec::new(n("bn2"), LayerKind::Bn { channels: width }),
                        LayerSpec::new(n("relu2"), LayerKind::Relu),
                        LayerSpec::new(n("conv3"), conv(width, out_channels, 1, 1)),
                        LayerSpec::new(n("bn3"), LayerKind::Bn { channels: out_channels }),
                    ],
                    in_channels,
                    out_channels,
                    stride,
                    shortcut,
                )
            }
            _ => return vec![self.clone()],
        };
        if let Some(kind) = shortcut {
            if kind == ShortcutKind::ProjectionB {
                out.push(LayerSpec::new(n("shortcut.conv"), conv(in_c, out_c, 1, stride)));
                out.push(LayerSpec::new(n("shortcut.bn"), LayerKind::Bn { channels: out_c }));
            }
            out.push(LayerSpec::new(n("add"), LayerKind::Add));
        }
        out.push(LayerSpec::new(n("relu"), LayerKind::Relu));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    /// `[C, H, W]` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Stable 64-bit identity of the architecture (SHA-256 of its JSON form).
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("spec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn is_residual(&self) -> bool {
        matches!(self.family, Family::CifarResnet | Family::ImagenetResnet)
    }

    /// Weighted layers on the main path: convolutions outside shortcuts plus
    /// the linear head.
    pub fn weighted_layers(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.expand())
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Linear { .. }) && !l.name.contains(".shortcut."))
            .count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::BlockBasic { .. } | LayerKind::BlockBottleneck { .. }))
    }
}

/// CIFAR 6n+2 network with option-A shortcuts when `residual`.
pub fn build_cifar(n: usize, residual: bool, widths: [usize; 3]) -> Result<NetworkSpec> {
    build_cifar_with(n, residual, widths, ShortcutOption::A)
}

pub fn build_cifar_with(n: usize, residual: bool, widths: [usize; 3], option: ShortcutOption) -> Result<NetworkSpec> {
    if n < 1 {
        return Err(Error::InvalidArgument("CIFAR networks need n >= 1".into()));
    }
    if widths.contains(&0) {
        return Err(Error::InvalidArgument(format!("widths must be positive, got {widths:?}")));
    }
    let mut layers = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv {
                in_channels: 3,
                out_channels: widths[0],
                k: 3,
                stride: 1,
            },
        ),
        LayerSpec::new("bn1", LayerKind::Bn { channels: widths[0] }),
        LayerSpec::new("relu1", LayerKind::Relu),
    ];
    let mut in_c = widths[0];
    for (stage, &w) in widths.iter().enumerate() {
        for i in 0..n {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let shortcut = residual.then(|| option.kind_for(in_c, w, stride));
            layers.push(LayerSpec::new(
                format!("conv{}_{}", stage + 2, i + 1),
                LayerKind::BlockBasic {
                    in_channels: in_c,
                    out_channels: w,
                    stride,
                    shortcut,
                },
            ));
            in_c = w;
        }
    }
    layers.push(LayerSpec::new("gap", LayerKind::Gap));
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Linear {
            in_features: in_c,
            out_features: 10,
        },
    ));
    Ok(NetworkSpec {
        family: if residual { Family::CifarResnet } else { Family::CifarPlain },
        input: [3, 32, 32],
        classes: 10,
        layers,
    })
}

/// Blocks per stage and whether they are bottlenecks, for each ImageNet depth.
pub fn imagenet_stages(depth: usize) -> Result<([usize; 4], bool)> {
    match depth {
        18 => Ok(([2, 2, 2, 2], false)),
        34 => Ok(([3, 4, 6, 3], false)),
        50 => Ok(([3, 4, 6, 3], true)),
        101 => Ok(([3, 4, 23, 3], true)),
        152 => Ok(([3, 8, 36, 3], true)),
        _ => Err(Error::InvalidArgument(format!(
            "unsupported ImageNet depth {depth}; expected 18, 34, 50, 101 or 152"
        ))),
    }
}

pub fn build_imagenet(depth: usize, residual: bool, option: ShortcutOption) -> Result<NetworkSpec> {
    let (counts, bottleneck) = imagenet_stages(depth)?;
    let mut layers = vec![
        LayerSpec::new(
            "conv1",
            LayerKind::Conv {
                in_channels: 3,
                out_channels: 64,
                k: 7,
                stride: 2,
            },
        ),
        LayerSpec::new("bn1", LayerKind::Bn { channels: 64 }),
        LayerSpec::new("relu1", LayerKind::Relu),
        LayerSpec::new("maxpool", LayerKind::Maxpool { k: 3, stride: 2, pad: 1 }),
    ];
    let mut in_c = 64;
    for (stage, (&count, width)) in counts.iter().zip([64usize, 128, 256, 512]).enumerate() {
        let out_c = if bottleneck { width * BOTTLENECK_EXPANSION } else { width };
        for i in 0..count {
            let stride = if stage > 0 && i == 0 { 2 } else { 1 };
            let shortcut = residual.then(|| option.kind_for(in_c, out_c, stride));
            let kind = if bottleneck {
                LayerKind::BlockBottleneck {
                    in_channels: in_c,
                    width,
                    stride,
                    shortcut,
                }
            } else {
                LayerKind::BlockBasic {
                    in_channels: in_c,
                    out_channels: out_c,
                    stride,
                    shortcut,
                }
            };
            layers.push(LayerSpec::new(format!("conv{}_{}", stage + 2, i + 1), kind));
            in_c = out_c;
        }
    }
    layers.push(LayerSpec::new("gap", LayerKind::Gap));
    layers.push(LayerSpec::new(
        "fc",
        LayerKind::Linear {
            in_features: in_c,
            out_features: 1000,
        },
    ));
    Ok(NetworkSpec {
        family: if residual {
            Family::ImagenetResnet
        } else {
            Family::ImagenetPlain
        },
        input: [3, 224, 224],
        classes: 1000,
        layers,
    })
}

/// Trainable scalars of one primitive layer.
fn primitive_params(kind: &LayerKind) -> usize {
    match *kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            k,
            ..
        } => in_channels * out_channels * k * k,
        LayerKind::Bn { channels } => 2 * channels,
        LayerKind::Linear {
            in_features,
            out_features,
        } => in_features * out_features + out_features,
        _ => 0,
    }
}

pub fn count_params(spec: &NetworkSpec) -> usize {
    spec.layers
        .iter()
        .flat_map(|l| l.expand())
        .map(|l| primitive_params(&l.kind))
        .sum()
}

pub fn count_flops(spec: &NetworkSpec, input: [usize; 3]) -> Result<u64> {
    Ok(shape_audit(spec, [1, input[0], input[1], input[2]])?.total_madds)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRow {
    pub name: String,
    pub kind: &'static str,
    pub out_shape: Vec<usize>,
    pub params: usize,
    pub madds: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Audit {
    pub rows: Vec<AuditRow>,
    pub total_params: usize,
    pub total_madds: u64,
}

impl Audit {
    /// `name,kind,out_shape,params,madds` with a trailing TOTAL row; shapes are
    /// written as `AxBxC`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,kind,out_shape,params,madds\n");
        for r in &self.rows {
            let shape: Vec<String> = r.out_shape.iter().map(|d| d.to_string()).collect();
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.kind, shape.join("x"), r.params, r.madds);
        }
        let last = self.rows.last().map(|r| r.out_shape.clone()).unwrap_or_default();
        let shape: Vec<String> = last.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "TOTAL,,{},{},{}", shape.join("x"), self.total_params, self.total_madds);
        s
    }

    pub fn find(&self, name: &str) -> Option<&AuditRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn incompatible(name: &str, expected: usize, shape: &[usize]) -> Error {
    Error::InvalidArgument(format!(
        "layer {name} expects {expected} input channels, got shape {shape:?}"
    ))
}

/// Propagate `[N, C, H, W]` through every primitive layer.
///
/// Rows named `*.shortcut.*` describe the projection path, which starts from
/// the block input. The global-average-pool row reports `[N, C, 1, 1]`.
pub fn shape_audit(spec: &NetworkSpec, input: [usize; 4]) -> Result<Audit> {
    let mut rows = Vec::new();
    let mut main = input.to_vec();
    let mut names = std::collections::HashSet::new();
    for entry in &spec.layers {
        if !names.insert(entry.name.clone()) {
            return Err(Error::InvalidArgument(format!("duplicate layer name {}", entry.name)));
        }
        let block_input = main.clone();
        let mut skip: Option<Vec<usize>> = None;
        for layer in entry.expand() {
            let on_skip = layer.name.contains(".shortcut.");
            let current = if on_skip {
                skip.clone().unwrap_or_else(|| block_input.clone())
            } else {
                main.clone()
            };
            let (next, madds) = match layer.kind {
                LayerKind::Add => {
                    let expected = match &skip {
                        Some(s) => s.clone(),
                        None => shortcut_shape(&entry.kind, &block_input)?,
                    };
                    if expected != current {
                        return Err(Error::ShapeMismatch {
                            op: "add",
                            lhs: current,
                            rhs: expected,
                        });
                    }
                    (current, 0)
                }
                _ => propagate(&layer, &current)?,
            };
            if on_skip {
                skip = Some(next.clone());
            } else {
                main = next.clone();
            }
            rows.push(AuditRow {
                params: primitive_params(&layer.kind),
                kind: layer.kind.tag(),
                name: layer.name,
                out_shape: next,
                madds,
            });
        }
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_madds = rows.iter().map(|r| r.madds).sum();
    Ok(Audit {
        rows,
        total_params,
        total_madds,
    })
}

/// Output shape and multiply-adds of one primitive layer.
fn propagate(layer: &LayerSpec, shape: &[usize]) -> Result<(Vec<usize>, u64)> {
    let rank4 = |expected: usize| {
        if shape.len() != 4 {
            Err(incompatible(&layer.name, expected, shape))
        } else {
            Ok(())
        }
    };
    Ok(match layer.kind {
        LayerKind::Conv {
            in_channels,
            out_channels,
            k,
            stride,
        } => {
            rank4(in_channels)?;
            if shape[1] != in_channels {
                return Err(incompatible(&layer.name, in_channels, shape));
            }
            let pad = (k - 1) / 2;
            let (h, w) = (out_extent(shape[2], k, stride, pad)?, out_extent(shape[3], k, stride, pad)?);
            let madds = (h * w * out_channels * in_channels * k * k) as u64 * shape[0] as u64;
            (vec![shape[0], out_channels, h, w], madds)
        }
        LayerKind::Bn { channels } => {
            rank4(channels)?;
            if shape[1] != channels {
                return Err(incompatible(&layer.name, channels, shape));
            }
            (shape.to_vec(), 0)
        }
        LayerKind::Relu => (shape.to_vec(), 0),
        LayerKind::Maxpool { k, stride, pad } => {
            rank4(shape.get(1).copied().unwrap_or(0))?;
            (
                vec![
                    shape[0],
                    shape[1],
                    out_extent(shape[2], k, stride, pad)?,
                    out_extent(shape[3], k, stride, pad)?,
                ],
                0,
            )
        }
        LayerKind::Gap => {
            rank4(shape.get(1).copied().unwrap_or(0))?;
            (vec![shape[0], shape[1], 1, 1], 0)
        }
        LayerKind::Linear {
            in_features,
            out_features,
        } => {
            let features: usize = shape[1..].iter().product();
            if features != in_features {
                return Err(incompatible(&layer.name, in_features, shape));
            }
            (vec![shape[0], out_features], (in_features * out_features) as u64 * shape[0] as u64)
        }
        LayerKind::Add | LayerKind::BlockBasic { .. } | LayerKind::BlockBottleneck { .. } => {
            unreachable!("handled by the caller")
        }
    })
}

fn shortcut_shape(kind: &LayerKind, input: &[usize]) -> Result<Vec<usize>> {
    let (out_c, stride) = match *kind {
        LayerKind::BlockBasic {
            out_channels, stride, ..
        } => (out_channels, stride),
        LayerKind::BlockBottleneck { width, stride, .. } => (width * BOTTLENECK_EXPANSION, stride),
        _ => return Err(Error::InvalidArgument("add outside a block".into())),
    };
    // 1x1 stride-s convolution and stride-s subsampling give the same extent.
    Ok(vec![input[0], out_c, (input[2] - 1) / stride + 1, (input[3] - 1) / stride + 1])
}

/// Build a network from a name such as `resnet-imagenet-50`, `plain-imagenet-34`,
/// `resnet-cifar-110` or `plain-cifar-20`. CIFAR names use widths 16/32/64.
pub fn parse_arch(name: &str, option: ShortcutOption) -> Result<NetworkSpec> {
    let bad = || Error::InvalidArgument(format!("unknown architecture {name:?}; expected e.g. resnet-imagenet-50 or plain-cifar-20"));
    let mut parts = name.split('-');
    let (Some(kind), Some(family), Some(depth), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
        return Err(bad());
    };
    let residual = match kind {
        "resnet" => true,
        "plain" => false,
        _ => return Err(bad()),
    };
    let depth: usize = depth.parse().map_err(|_| bad())?;
    match family {
        "imagenet" => build_imagenet(depth, residual, option),
        "cifar" if depth >= 8 && (depth - 2).is_multiple_of(6) => build_cifar_with((depth - 2) / 6, residual, [16, 32, 64], option),
        _ => Err(bad()),
    }
}
