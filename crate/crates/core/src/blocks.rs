//! Residual building blocks: the two-layer basic block, the three-layer
//! bottleneck, and the shortcut variants that join a block's input to its
//! residual branch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{functional, join, BnConfig, BnParams, ConvParams, Entry, EntryMut, Mode, Module};
use crate::tensor::{Element, Tensor};

/// How a block's input reaches the addition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShortcutKind {
    /// `x` unchanged; requires equal channels and stride 1.
    IdentitySame,
    /// Subsample by the stride, then append zero channels (option A).
    ZeroPadA,
    /// 1x1 convolution with the block stride, followed by BN (options B and C).
    ProjectionB,
}

impl ShortcutKind {
    pub fn validate(self, in_channels: usize, out_channels: usize, stride: usize) -> Result<()> {
        let same = in_channels == out_channels && stride == 1;
        let ok = match self {
            ShortcutKind::IdentitySame => same,
            ShortcutKind::ZeroPadA => !same && out_channels >= in_channels,
            ShortcutKind::ProjectionB => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "{self:?} shortcut cannot map {in_channels} -> {out_channels} channels at stride {stride}"
            )))
        }
    }
}

/// Parameter-free shortcuts on plain tensors. Projection shortcuts carry
/// weights and go through [`Shortcut::forward`] instead.
pub fn shortcut_apply<T: Element>(x: &Tensor<T>, kind: ShortcutKind, out_channels: usize, stride: usize) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4("shortcut")?;
    kind.validate(c, out_channels, stride)?;
    match kind {
        ShortcutKind::IdentitySame => Ok(x.clone()),
        ShortcutKind::ZeroPadA => functional::shortcut_pad(x, out_channels, stride),
        ShortcutKind::ProjectionB => Err(Error::InvalidArgument(
            "projection shortcuts need parameters; use Shortcut::forward".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shortcut<T: Element> {
    pub kind: ShortcutKind,
    pub out_channels: usize,
    pub stride: usize,
    /// Present exactly when `kind` is `ProjectionB`.
    pub proj: Option<(ConvParams<T>, BnParams<T>)>,
}

impl<T: Element> Shortcut<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: ShortcutKind,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        kind.validate(in_channels, out_channels, stride)?;
        let proj = match kind {
            ShortcutKind::ProjectionB => Some((
                ConvParams::new(in_channels, out_channels, 1, stride, rng)?,
                BnParams::new(out_channels, bn)?,
            )),
            _ => None,
        };
        Ok(Shortcut {
            kind,
            out_channels,
            stride,
            proj,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        match self.kind {
            ShortcutKind::IdentitySame => Ok(x),
            ShortcutKind::ZeroPadA => tape.shortcut_pad(x, self.out_channels, self.stride),
            ShortcutKind::ProjectionB => {
                let (conv, bn) = self.proj.as_mut().expect("projection parameters");
                let h = conv.forward(tape, x)?;
                bn.forward(tape, h, mode)
            }
        }
    }
}

impl<T: Element> Module<T> for Shortcut<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        if let Some((conv, bn)) = &self.proj {
            conv.visit(&join(prefix, "conv"), f);
            bn.visit(&join(prefix, "bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        if let Some((conv, bn)) = &mut self.proj {
            conv.visit_mut(&join(prefix, "conv"), f);
            bn.visit_mut(&join(prefix, "bn"), f);
        }
    }
}

/// Two 3x3 conv+BN layers; the stride sits on the first.
/// `shortcut == None` gives the plain (non-residual) counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlockParams<T: Element> {
    pub conv1: ConvParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BnParams<T>,
    pub shortcut: Option<Shortcut<T>>,
}

impl<T: Element> BasicBlockParams<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        shortcut: Option<ShortcutKind>,
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = ConvParams::new(in_channels, out_channels, 3, stride, rng)?;
        let bn1 = BnParams::new(out_channels, bn)?;
        let conv2 = ConvParams::new(out_channels, out_channels, 3, 1, rng)?;
        let bn2 = BnParams::new(out_channels, bn)?;
        let shortcut = shortcut
            .map(|k| Shortcut::new(k, in_channels, out_channels, stride, bn, rng))
            .transpose()?;
        Ok(BasicBlockParams {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    /// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`. The BN outputs
    /// of both 3x3 layers are pushed onto `responses`.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, responses: &mut Vec<Var>) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        responses.push(h);
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?;
        responses.push(h);
        let h = match &mut self.shortcut {
            Some(s) => {
                let skip = s.forward(tape, x, mode)?;
                tape.add(h, skip)?
            }
            None => h,
        };
        tape.relu(h)
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    /// Zero the residual-branch convolution weights.
    pub fn zero_residual(&mut self) {
        for c in [&mut self.conv1, &mut self.conv2] {
            c.weight.value.data_mut().fill(T::zero());
        }
    }
}

impl<T: Element> Module<T> for BasicBlockParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// 1x1 reduce, 3x3, 1x1 restore to `4 * width` channels. The stride sits on
/// the first 1x1 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct BottleneckParams<T: Element> {
    pub conv1: ConvParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BnParams<T>,
    pub conv3: ConvParams<T>,
    pub bn3: BnParams<T>,
    pub shortcut: Option<Shortcut<T>>,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

impl<T: Element> BottleneckParams<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        width: usize,
        stride: usize,
        shortcut: Option<ShortcutKind>,
        bn: BnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let out_channels = width * BOTTLENECK_EXPANSION;
        Ok(BottleneckParams {
            conv1: ConvParams::new(in_channels, width, 1, stride, rng)?,
            bn1: BnParams::new(width, bn)?,
            conv2: ConvParams::new(width, width, 3, 1, rng)?,
            bn2: BnParams::new(width, bn)?,
            conv3: ConvParams::new(width, out_channels, 1, 1, rng)?,
            bn3: BnParams::new(out_channels, bn)?,
            shortcut: shortcut
                .map(|k| Shortcut::new(k, in_channels, out_channels, stride, bn, rng))
                .transpose()?,
        })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, responses: &mut Vec<Var>) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?;
        responses.push(h);
        let h = tape.relu(h)?;
        let h = self.conv3.forward(tape, h)?;
        let h = self.bn3.forward(tape, h, mode)?;
        let h = match &mut self.shortcut {
            Some(s) => {
                let skip = s.forward(tape, x, mode)?;
                tape.add(h, skip)?
            }
            None => h,
        };
        tape.relu(h)
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn zero_residual(&mut self) {
        for c in [&mut self.conv1, &mut self.conv2, &mut self.conv3] {
            c.weight.value.data_mut().fill(T::zero());
        }
    }
}

impl<T: Element> Module<T> for BottleneckParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some(s) = &self.shortcut {
            s.visit(&join(prefix, "shortcut"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_mut(&join(prefix, "shortcut"), f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Block<T: Element> {
    Basic(BasicBlockParams<T>),
    Bottleneck(BottleneckParams<T>),
}

impl<T: Element> Block<T> {
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, responses: &mut Vec<Var>) -> Result<Var> {
        match self {
            Block::Basic(b) => b.forward(tape, x, mode, responses),
            Block::Bottleneck(b) => b.forward(tape, x, mode, responses),
        }
    }

    /// Forward on a plain tensor, without keeping the graph.
    pub fn apply(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = tape.input(x.clone(), false);
        let y = self.forward(&mut tape, v, mode, &mut Vec::new())?;
        Ok(tape.value(y).clone())
    }

    pub fn shortcut(&self) -> Option<&Shortcut<T>> {
        match self {
            Block::Basic(b) => b.shortcut.as_ref(),
            Block::Bottleneck(b) => b.shortcut.as_ref(),
        }
    }

    pub fn zero_residual(&mut self) {
        match self {
            Block::Basic(b) => b.zero_residual(),
            Block::Bottleneck(b) => b.zero_residual(),
        }
    }
}

impl<T: Element> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Entry<'_, T>)) {
        match self {
            Block::Basic(b) => b.visit(prefix, f),
            Block::Bottleneck(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, EntryMut<'_, T>)) {
        match self {
            Block::Basic(b) => b.visit_mut(prefix, f),
            Block::Bottleneck(b) => b.visit_mut(prefix, f),
        }
    }
}
