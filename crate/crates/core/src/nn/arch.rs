//! Layer kinds and the line-oriented architecture description.
//!
//! ```text
//! input 1 28 28
//! conv2d 1 8 5 5 stride=2 pad=2
//! relu
//! flatten
//! dense 1568 10
//! ```
//!
//! Lines may also be separated by `;`. `add <k>` sums the current activation
//! with the output of layer `k` (zero-based, counting only layer lines).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    Flatten,
    /// Elementwise sum with the output of an earlier layer.
    Add {
        from: usize,
    },
}

impl LayerKind {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerKind::Dense { .. } | LayerKind::Conv2d { .. })
    }

    /// `(rows, cols)` of the weight matrix, bias column included.
    pub fn weight_dims(&self) -> Option<(usize, usize)> {
        match *self {
            LayerKind::Dense { inputs, outputs } => Some((outputs, inputs + 1)),
            LayerKind::Conv2d {
                in_ch, out_ch, kh, kw, ..
            } => Some((out_ch, in_ch * kh * kw + 1)),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Dense { inputs, outputs } => write!(f, "dense {inputs} {outputs}"),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kh,
                kw,
                stride,
                pad,
            } => write!(f, "conv2d {in_ch} {out_ch} {kh} {kw} stride={stride} pad={pad}"),
            LayerKind::Relu => write!(f, "relu"),
            LayerKind::Flatten => write!(f, "flatten"),
            LayerKind::Add { from } => write!(f, "add {from}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerKind>,
}

impl Architecture {
    pub fn parse(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.split(['\n', ';']).enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::Architecture(format!("entry {}: {msg}: `{line}`", lineno + 1));
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let mut positional = Vec::new();
            let mut stride = 1;
            let mut pad = 0;
            for tok in tokens {
                if let Some((k, v)) = tok.split_once('=') {
                    let v: usize = v.parse().map_err(|_| bad("bad option value"))?;
                    match k {
                        "stride" => stride = v,
                        "pad" => pad = v,
                        _ => return Err(bad("unknown option")),
                    }
                } else {
                    positional.push(tok.parse::<usize>().map_err(|_| bad("expected an integer"))?);
                }
            }
            let want = |n: usize| {
                if positional.len() == n {
                    Ok(())
                } else {
                    Err(bad(&format!("expected {n} integers")))
                }
            };
            match head {
                "input" => {
                    if positional.is_empty() {
                        return Err(bad("input needs at least one extent"));
                    }
                    if input_shape.is_some() {
                        return Err(bad("duplicate input line"));
                    }
                    input_shape = Some(positional);
                }
                "dense" => {
                    want(2)?;
                    layers.push(LayerKind::Dense {
                        inputs: positional[0],
                        outputs: positional[1],
                    });
                }
                "conv2d" => {
                    want(4)?;
                    if stride == 0 {
                        return Err(bad("stride must be positive"));
                    }
                    layers.push(LayerKind::Conv2d {
                        in_ch: positional[0],
                        out_ch: positional[1],
                        kh: positional[2],
                        kw: positional[3],
                        stride,
                        pad,
                    });
                }
                "relu" => {
                    want(0)?;
                    layers.push(LayerKind::Relu);
                }
                "flatten" => {
                    want(0)?;
                    layers.push(LayerKind::Flatten);
                }
                "add" => {
                    want(1)?;
                    layers.push(LayerKind::Add { from: positional[0] });
                }
                _ => return Err(bad("unknown layer kind")),
            }
        }
        let input_shape = input_shape.ok_or_else(|| Error::Architecture("missing `input` line".into()))?;
        Ok(Self { input_shape, layers })
    }

    /// Named architectures used by the experiments.
    pub fn preset(name: &str) -> Option<Self> {
        let text = match name {
            "lenet-300-100" => "input 784; dense 784 300; relu; dense 300 100; relu; dense 100 10",
            // Downsampling through strided convolutions; there is no pooling layer.
            "lenet5" => {
                "input 1 28 28; conv2d 1 8 5 5 stride=2 pad=2; relu; \
                 conv2d 8 16 5 5 stride=2; relu; flatten; \
                 dense 400 200; relu; dense 200 100; relu; dense 100 10"
            }
            "mlp-4-8-3" => "input 4; dense 4 8; relu; dense 8 3",
            _ => return None,
        };
        Some(Self::parse(text).expect("preset architectures parse"))
    }

    /// A preset name or an inline description.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::preset(spec) {
            Some(a) => Ok(a),
            None => Self::parse(spec),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input")?;
        for d in &self.input_shape {
            write!(f, " {d}")?;
        }
        for layer in &self.layers {
            write!(f, "\n{layer}")?;
        }
        Ok(())
    }
}
