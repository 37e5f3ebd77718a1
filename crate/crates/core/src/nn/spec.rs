use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{conv_out_extent, deconv_out_extent};

/// Positive rational applied to channel counts and input resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };
    /// 32x32 inputs with a quarter of the channels.
    pub const DESK: Scale = Scale { num: 1, den: 4 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Spec(format!("scale {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn num(self) -> u32 {
        self.num
    }

    pub fn den(self) -> u32 {
        self.den
    }

    pub fn as_f64(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Scaled channel count: rounded up to a multiple of 4, at least 8.
    /// Identity at scale one.
    pub fn channels(self, base: usize) -> usize {
        if self == Self::ONE {
            return base;
        }
        let scaled = (base as u64 * self.num as u64).div_ceil(self.den as u64) as usize;
        scaled.div_ceil(4).max(2) * 4
    }

    /// Scaled spatial extent; must come out integral.
    pub fn resolution(self, base: usize) -> Result<usize> {
        let prod = base as u64 * self.num as u64;
        if prod % self.den as u64 != 0 {
            return Err(Error::Spec(format!("resolution {base} is not divisible at scale {self}")));
        }
        let r = (prod / self.den as u64) as usize;
        if r == 0 {
            return Err(Error::Spec(format!("scale {self} collapses resolution {base}")));
        }
        Ok(r)
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Spec(format!("cannot parse scale {s:?}; expected N or N/D"));
        match s.trim().split_once('/') {
            Some((n, d)) => Scale::new(
                n.trim().parse().map_err(|_| bad())?,
                d.trim().parse().map_err(|_| bad())?,
            ),
            None => Scale::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        channels: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
    },
    Deconv {
        channels: usize,
        kernel: usize,
        pad: usize,
        stride: usize,
        out_pad: usize,
    },
    Dense {
        units: usize,
    },
    /// Two 3x3 convs (optionally normalized) with an additive skip.
    ResidualBlock {
        channels: usize,
        norm: bool,
    },
    Activation(Activation),
    /// Per-sample, per-channel normalization with a learned affine map.
    Norm,
    Flatten,
    GlobalAvgPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Exposes this layer's output as a named feature map.
    pub tap: Option<String>,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self { kind, tap: None }
    }

    pub fn tapped(kind: LayerKind, tap: &str) -> Self {
        Self {
            kind,
            tap: Some(tap.to_string()),
        }
    }

    fn describe(&self) -> String {
        match &self.kind {
            LayerKind::Conv {
                channels,
                kernel,
                pad,
                stride,
            } => format!("{kernel}x{kernel}x{channels} conv, pad {pad}, stride {stride}"),
            LayerKind::Deconv {
                channels,
                kernel,
                pad,
                stride,
                out_pad,
            } => format!("{kernel}x{kernel}x{channels} deconv, pad {pad}, stride {stride}, out_pad {out_pad}"),
            LayerKind::Dense { units } => format!("fully connected, {units} units"),
            LayerKind::ResidualBlock { channels, norm } => {
                format!("residual block, {channels} filters{}", if *norm { ", norm" } else { "" })
            }
            LayerKind::Activation(Activation::Relu) => "relu".into(),
            LayerKind::Activation(Activation::LeakyRelu(s)) => format!("leaky_relu {s}"),
            LayerKind::Activation(Activation::Sigmoid) => "sigmoid".into(),
            LayerKind::Norm => "norm".into(),
            LayerKind::Flatten => "flatten".into(),
            LayerKind::GlobalAvgPool => "global average pool".into(),
        }
    }

    fn is_geometric(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv { .. }
                | LayerKind::Deconv { .. }
                | LayerKind::Dense { .. }
                | LayerKind::ResidualBlock { .. }
        )
    }
}

/// Declarative layer list plus the input shape it expects (`[C, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub scale: Scale,
}

/// One row of a printed architecture table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub layer: String,
    pub activation: Vec<usize>,
}

impl NetworkSpec {
    /// Output shape of every layer, without the batch axis.
    pub fn infer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.to_vec();
        if cur.contains(&0) {
            return Err(Error::Spec(format!("input shape {cur:?} has a zero extent")));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |why: String| Error::Spec(format!("layer {i} ({}): {why}", layer.describe()));
            cur = match (&layer.kind, cur.as_slice()) {
                (
                    &LayerKind::Conv {
                        channels,
                        kernel,
                        pad,
                        stride,
                    },
                    &[_, h, w],
                ) => {
                    if channels == 0 {
                        return Err(fail("zero channels".into()));
                    }
                    let oh = conv_out_extent(h, kernel, pad, stride);
                    let ow = conv_out_extent(w, kernel, pad, stride);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![channels, oh, ow],
                        _ => return Err(fail(format!("kernel does not fit {h}x{w}"))),
                    }
                }
                (
                    &LayerKind::Deconv {
                        channels,
                        kernel,
                        pad,
                        stride,
                        out_pad,
                    },
                    &[_, h, w],
                ) => {
                    if channels == 0 {
                        return Err(fail("zero channels".into()));
                    }
                    let oh = deconv_out_extent(h, kernel, pad, stride, out_pad);
                    let ow = deconv_out_extent(w, kernel, pad, stride, out_pad);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) => vec![channels, oh, ow],
                        _ => return Err(fail("invalid transposed geometry".into())),
                    }
                }
                (&LayerKind::Dense { units }, &[_]) if units > 0 => vec![units],
                (&LayerKind::ResidualBlock { channels, .. }, &[c, h, w]) => {
                    if c != channels {
                        return Err(fail(format!("block of {channels} filters fed {c} channels")));
                    }
                    vec![c, h, w]
                }
                (LayerKind::Activation(_), _) => cur,
                (LayerKind::Norm, &[_, _, _]) => cur,
                (LayerKind::Flatten, _) => vec![cur.iter().product()],
                (LayerKind::GlobalAvgPool, &[c, _, _]) => vec![c],
                (_, shape) => return Err(fail(format!("cannot apply to shape {shape:?}"))),
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.infer_shapes()?.pop().unwrap_or_else(|| self.input.to_vec()))
    }

    /// Input row followed by one row per conv, deconv, dense or residual layer.
    pub fn table_rows(&self) -> Result<Vec<TableRow>> {
        let shapes = self.infer_shapes()?;
        let mut rows = vec![TableRow {
            layer: "input".into(),
            activation: self.input.to_vec(),
        }];
        for (layer, shape) in self.layers.iter().zip(shapes) {
            if layer.is_geometric() {
                rows.push(TableRow {
                    layer: layer.describe(),
                    activation: shape,
                });
            }
        }
        Ok(rows)
    }

    /// Shape of the named tap.
    pub fn tap_shape(&self, tap: &str) -> Result<Vec<usize>> {
        let shapes = self.infer_shapes()?;
        self.layers
            .iter()
            .zip(shapes)
            .find(|(l, _)| l.tap.as_deref() == Some(tap))
            .map(|(_, s)| s)
            .ok_or_else(|| Error::Spec(format!("no tap named {tap:?}")))
    }

    pub fn tap_names(&self) -> Vec<&str> {
        self.layers.iter().filter_map(|l| l.tap.as_deref()).collect()
    }

    /// Canonical text form; the basis of [`NetworkSpec::hash`].
    pub fn canonical(&self) -> String {
        let mut s = format!("input={:?};scale={}", self.input, self.scale);
        for l in &self.layers {
            s.push(';');
            s.push_str(&l.describe());
            if let Some(t) = &l.tap {
                s.push_str(" @");
                s.push_str(t);
            }
        }
        s
    }

    /// SHA-256 of the canonical form.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
