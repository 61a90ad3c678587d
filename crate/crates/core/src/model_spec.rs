//! Plain-text model topology files.
//!
//! One layer per line; `#` starts a comment; blank lines are ignored. The
//! first layer line must be `input`.
//!
//! ```text
//! input <features>                  # flat input vector
//! input <height> <width> <channels> # image input, HWC layout
//! fc <out_features>
//! conv <w1> <w2> <out_features> [stride <s1> <s2>]
//! relu
//! softmax                           # softmax + cross-entropy loss, last line only
//! ```
//!
//! Convolutions pad so that the output extent is exactly `input / stride`,
//! which requires the stride to divide the input extent.

use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("model has no input line")]
    MissingInput,
    #[error("model has no layers after input")]
    NoLayers,
    #[error("layer {layer}: {msg}")]
    Geometry { layer: usize, msg: String },
    #[error("reading model file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerDecl {
    FullyConnected { out: usize },
    Convolution {
        window: (usize, usize),
        out: usize,
        stride: (usize, usize),
    },
    Relu,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Per-sample input extents: `[features]` or `[height, width, channels]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerDecl>,
}

/// Per-sample activation extents flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Flat(usize),
    Image { h: usize, w: usize, c: usize },
}

impl ActShape {
    pub fn features(&self) -> usize {
        match *self {
            ActShape::Flat(n) => n,
            ActShape::Image { h, w, c } => h * w * c,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            ActShape::Flat(n) => vec![n],
            ActShape::Image { h, w, c } => vec![h, w, c],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Option<Self> {
        match *dims {
            [n] => Some(ActShape::Flat(n)),
            [h, w, c] => Some(ActShape::Image { h, w, c }),
            _ => None,
        }
    }
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut input = None;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut words = body.split_whitespace();
            let kind = words.next().unwrap_or_default().to_ascii_lowercase();
            let rest: Vec<&str> = words.collect();
            let syntax = |msg: &str| SpecError::Syntax {
                line,
                msg: msg.to_string(),
            };
            if input.is_none() && kind != "input" {
                return Err(syntax("first layer line must be `input`"));
            }
            match kind.as_str() {
                "input" => {
                    if input.is_some() {
                        return Err(syntax("duplicate `input` line"));
                    }
                    let dims = parse_ints(&rest, line)?;
                    if dims.len() != 1 && dims.len() != 3 {
                        return Err(syntax("`input` takes 1 or 3 extents"));
                    }
                    input = Some(dims);
                }
                "fc" => {
                    let v = parse_ints(&rest, line)?;
                    if v.len() != 1 {
                        return Err(syntax("`fc` takes one output extent"));
                    }
                    layers.push(LayerDecl::FullyConnected { out: v[0] });
                }
                "conv" => {
                    let (dims, stride) = match rest.iter().position(|w| *w == "stride") {
                        Some(p) => (&rest[..p], Some(&rest[p + 1..])),
                        None => (&rest[..], None),
                    };
                    let d = parse_ints(dims, line)?;
                    if d.len() != 3 {
                        return Err(syntax("`conv` takes <w1> <w2> <out>"));
                    }
                    let s = match stride {
                        Some(s) => {
                            let s = parse_ints(s, line)?;
                            if s.len() != 2 {
                                return Err(syntax("`stride` takes <s1> <s2>"));
                            }
                            (s[0], s[1])
                        }
                        None => (1, 1),
                    };
                    layers.push(LayerDecl::Convolution {
                        window: (d[0], d[1]),
                        out: d[2],
                        stride: s,
                    });
                }
                "relu" | "softmax" => {
                    if !rest.is_empty() {
                        return Err(syntax("activation layers take no arguments"));
                    }
                    layers.push(if kind == "relu" {
                        LayerDecl::Relu
                    } else {
                        LayerDecl::Softmax
                    });
                }
                other => return Err(syntax(&format!("unknown layer kind `{other}`"))),
            }
        }
        let spec = ModelSpec {
            input: input.ok_or(SpecError::MissingInput)?,
            layers,
        };
        spec.shapes()?;
        Ok(spec)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SpecError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn input_shape(&self) -> ActShape {
        ActShape::from_dims(&self.input).expect("validated at parse")
    }

    /// Activation extents entering each layer, followed by the final output.
    pub fn shapes(&self) -> Result<Vec<ActShape>, SpecError> {
        if self.layers.is_empty() {
            return Err(SpecError::NoLayers);
        }
        let mut cur = ActShape::from_dims(&self.input).ok_or(SpecError::MissingInput)?;
        if cur.dims().contains(&0) {
            return Err(SpecError::Geometry {
                layer: 0,
                msg: "input extents must be positive".into(),
            });
        }
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let geom = |msg: String| SpecError::Geometry { layer: i, msg };
            cur = match *layer {
                LayerDecl::FullyConnected { out } => {
                    if out == 0 {
                        return Err(geom("fc output extent must be positive".into()));
                    }
                    ActShape::Flat(out)
                }
                LayerDecl::Convolution { window, out, stride } => {
                    let ActShape::Image { h, w, .. } = cur else {
                        return Err(geom("conv needs an image-shaped input".into()));
                    };
                    if out == 0 || window.0 == 0 || window.1 == 0 {
                        return Err(geom("conv extents must be positive".into()));
                    }
                    if stride.0 == 0 || stride.1 == 0 {
                        return Err(geom("strides must be >= 1".into()));
                    }
                    if window.0 > h || window.1 > w {
                        return Err(geom(format!(
                            "window {}x{} exceeds input {h}x{w}",
                            window.0, window.1
                        )));
                    }
                    if h % stride.0 != 0 || w % stride.1 != 0 {
                        return Err(geom(format!(
                            "stride {}x{} does not divide input {h}x{w}",
                            stride.0, stride.1
                        )));
                    }
                    ActShape::Image {
                        h: h / stride.0,
                        w: w / stride.1,
                        c: out,
                    }
                }
                LayerDecl::Relu => cur,
                LayerDecl::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(geom("softmax must be the last layer".into()));
                    }
                    ActShape::Flat(cur.features())
                }
            };
            out.push(cur);
        }
        Ok(out)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input")?;
        for d in &self.input {
            write!(f, " {d}")?;
        }
        writeln!(f)?;
        for l in &self.layers {
            match *l {
                LayerDecl::FullyConnected { out } => writeln!(f, "fc {out}")?,
                LayerDecl::Convolution { window, out, stride } => writeln!(
                    f,
                    "conv {} {} {out} stride {} {}",
                    window.0, window.1, stride.0, stride.1
                )?,
                LayerDecl::Relu => writeln!(f, "relu")?,
                LayerDecl::Softmax => writeln!(f, "softmax")?,
            }
        }
        Ok(())
    }
}

fn parse_ints(words: &[&str], line: usize) -> Result<Vec<usize>, SpecError> {
    words
        .iter()
        .map(|w| {
            w.parse::<usize>().map_err(|_| SpecError::Syntax {
                line,
                msg: format!("expected a positive integer, found `{w}`"),
            })
        })
        .collect()
}
