//! Architecture description language.
//!
//! ```text
//! spec  := layer (">" layer)*
//! layer := name ["(" arg ("," arg)* ")"] ["x" int]
//! arg   := int | "C"
//! ```
//!
//! Names are `relu`, `tanh`, `linear`, `rnn`, `lstm`, `lstm_ip`, `lstm_op`
//! and `softmax`. Whitespace is ignored. `C` stands for the class count
//! supplied by the caller, and `softmax` may omit its argument. The same
//! tree is accepted as JSON:
//!
//! ```json
//! {"layers": [{"name": "relu", "args": [64], "repeat": 3},
//!             {"name": "lstm", "args": [32]},
//!             {"name": "softmax"}]}
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { units: usize, act: Activation },
    Rnn { units: usize },
    Lstm { cells: usize },
    /// `depth` hidden projection layers of `proj_units` before the cell input.
    LstmIp { cells: usize, proj_units: usize, depth: usize },
    /// Linear projection of the block outputs to `proj_units`.
    LstmOp { cells: usize, proj_units: usize },
    Softmax { classes: usize },
}

impl LayerSpec {
    pub fn output_dim(&self) -> usize {
        match *self {
            LayerSpec::Dense { units, .. } | LayerSpec::Rnn { units } => units,
            LayerSpec::Lstm { cells } | LayerSpec::LstmIp { cells, .. } => cells,
            LayerSpec::LstmOp { proj_units, .. } => proj_units,
            LayerSpec::Softmax { classes } => classes,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        !matches!(self, LayerSpec::Dense { .. } | LayerSpec::Softmax { .. })
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { units, act } => write!(f, "{act}({units})"),
            LayerSpec::Rnn { units } => write!(f, "rnn({units})"),
            LayerSpec::Lstm { cells } => write!(f, "lstm({cells})"),
            LayerSpec::LstmIp {
                cells,
                proj_units,
                depth: 1,
            } => write!(f, "lstm_ip({cells},{proj_units})"),
            LayerSpec::LstmIp {
                cells,
                proj_units,
                depth,
            } => write!(f, "lstm_ip({cells},{proj_units},{depth})"),
            LayerSpec::LstmOp { cells, proj_units } => write!(f, "lstm_op({cells},{proj_units})"),
            LayerSpec::Softmax { classes } => write!(f, "softmax({classes})"),
        }
    }
}

/// A validated layer stack with inferred shapes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = NetworkSpec { input_dim, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().map_or(0, LayerSpec::output_dim)
    }

    /// Input width of every layer, in order.
    pub fn input_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.layers.len());
        let mut d = self.input_dim;
        for l in &self.layers {
            dims.push(d);
            d = l.output_dim();
        }
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Architecture("input dimension must be positive".into()));
        }
        let Some((last, body)) = self.layers.split_last() else {
            return Err(Error::Architecture("empty architecture".into()));
        };
        if !matches!(last, LayerSpec::Softmax { .. }) {
            return Err(Error::Architecture("the last layer must be softmax".into()));
        }
        for (k, l) in body.iter().enumerate() {
            if matches!(l, LayerSpec::Softmax { .. }) {
                return Err(Error::Architecture(format!(
                    "softmax at position {k} is not the last layer"
                )));
            }
        }
        for l in &self.layers {
            let positive = match *l {
                LayerSpec::Dense { units, act } => {
                    if !matches!(act, Activation::Relu | Activation::Tanh | Activation::Linear) {
                        return Err(Error::Architecture(format!("{act} is not a hidden-layer activation")));
                    }
                    units > 0
                }
                LayerSpec::Rnn { units } => units > 0,
                LayerSpec::Lstm { cells } => cells > 0,
                LayerSpec::LstmIp { cells, proj_units, depth } => cells > 0 && (proj_units > 0 || depth == 0),
                LayerSpec::LstmOp { cells, proj_units } => cells > 0 && proj_units > 0,
                LayerSpec::Softmax { classes } => classes > 0,
            };
            if !positive {
                return Err(Error::Architecture(format!("{l}: sizes must be positive")));
            }
        }
        Ok(())
    }

    /// Canonical text form; consecutive identical layers are folded with `xK`.
    pub fn to_dsl(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut k = 0;
        while k < self.layers.len() {
            let mut run = 1;
            while k + run < self.layers.len() && self.layers[k + run] == self.layers[k] {
                run += 1;
            }
            if run > 1 {
                parts.push(format!("{}x{run}", self.layers[k]));
            } else {
                parts.push(self.layers[k].to_string());
            }
            k += run;
        }
        parts.join(" > ")
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_dsl())
    }
}

/// One layer as written, before expansion and validation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLayer {
    pub name: String,
    #[serde(default)]
    pub args: Vec<Arg>,
    #[serde(default = "one")]
    pub repeat: usize,
    #[serde(skip)]
    pub pos: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Arg {
    Int(usize),
    /// The caller-supplied class count, written `C`.
    Classes(ClassesMarker),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassesMarker {
    C,
}

#[derive(Deserialize)]
struct JsonSpec {
    layers: Vec<RawLayer>,
}

/// Parses the text form against the given input width and class count.
pub fn parse_spec(text: &str, input_dim: usize, n_classes: usize) -> Result<NetworkSpec> {
    let raw = Lexer::new(text).parse()?;
    lower(&raw, input_dim, n_classes)
}

/// Parses the JSON mirror of the text form.
pub fn parse_spec_json(json: &str, input_dim: usize, n_classes: usize) -> Result<NetworkSpec> {
    let spec: JsonSpec = serde_json::from_str(json)?;
    lower(&spec.layers, input_dim, n_classes)
}

/// Accepts either form, deciding by the first non-blank character.
pub fn parse_any(text: &str, input_dim: usize, n_classes: usize) -> Result<NetworkSpec> {
    if text.trim_start().starts_with('{') {
        parse_spec_json(text, input_dim, n_classes)
    } else {
        parse_spec(text, input_dim, n_classes)
    }
}

fn lower(raw: &[RawLayer], input_dim: usize, n_classes: usize) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    for r in raw {
        let at = |msg: String| Error::Syntax { pos: r.pos, msg };
        let args: Vec<usize> = r
            .args
            .iter()
            .map(|a| match a {
                Arg::Int(v) => *v,
                Arg::Classes(_) => n_classes,
            })
            .collect();
        let arity = |lo: usize, hi: usize| -> Result<()> {
            if args.len() < lo || args.len() > hi {
                Err(at(format!(
                    "{} takes {lo}..={hi} arguments, got {}",
                    r.name,
                    args.len()
                )))
            } else {
                Ok(())
            }
        };
        let layer = match r.name.as_str() {
            "relu" | "tanh" | "linear" => {
                arity(1, 1)?;
                let act = match r.name.as_str() {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => Activation::Linear,
                };
                LayerSpec::Dense { units: args[0], act }
            }
            "rnn" => {
                arity(1, 1)?;
                LayerSpec::Rnn { units: args[0] }
            }
            "lstm" => {
                arity(1, 1)?;
                LayerSpec::Lstm { cells: args[0] }
            }
            "lstm_ip" => {
                arity(2, 3)?;
                LayerSpec::LstmIp {
                    cells: args[0],
                    proj_units: args[1],
                    depth: args.get(2).copied().unwrap_or(1),
                }
            }
            "lstm_op" => {
                arity(2, 2)?;
                LayerSpec::LstmOp {
                    cells: args[0],
                    proj_units: args[1],
                }
            }
            "softmax" => {
                arity(0, 1)?;
                let classes = args.first().copied().unwrap_or(n_classes);
                if classes != n_classes {
                    return Err(Error::Architecture(format!(
                        "softmax({classes}) does not match {n_classes} classes"
                    )));
                }
                if r.repeat != 1 {
                    return Err(at("softmax cannot be repeated".into()));
                }
                LayerSpec::Softmax { classes }
            }
            other => return Err(at(format!("unknown layer {other:?}"))),
        };
        if r.repeat == 0 {
            return Err(at("repetition count must be at least 1".into()));
        }
        layers.extend(std::iter::repeat_n(layer, r.repeat));
    }
    NetworkSpec::new(input_dim, layers)
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            src: text.as_bytes(),
            pos: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Syntax {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected a layer name"));
        }
        Ok(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
    }

    fn int(&mut self) -> Result<usize> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected an integer"));
        }
        std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Syntax {
                pos: start,
                msg: "integer out of range".into(),
            })
    }

    fn arg(&mut self) -> Result<Arg> {
        if self.peek() == Some(b'C') {
            self.pos += 1;
            Ok(Arg::Classes(ClassesMarker::C))
        } else {
            self.int().map(Arg::Int)
        }
    }

    fn layer(&mut self) -> Result<RawLayer> {
        self.skip_ws();
        let pos = self.pos;
        let name = self.ident()?;
        let mut args = Vec::new();
        if self.eat(b'(') {
            if !self.eat(b')') {
                loop {
                    args.push(self.arg()?);
                    if self.eat(b')') {
                        break;
                    }
                    if !self.eat(b',') {
                        return Err(self.err("expected ',' or ')'"));
                    }
                }
            }
        }
        let mut repeat = 1;
        if self.peek() == Some(b'x') {
            self.pos += 1;
            repeat = self.int()?;
        }
        Ok(RawLayer {
            name,
            args,
            repeat,
            pos,
        })
    }

    fn parse(mut self) -> Result<Vec<RawLayer>> {
        let mut layers = vec![self.layer()?];
        while self.eat(b'>') {
            layers.push(self.layer()?);
        }
        if self.peek().is_some() {
            return Err(self.err("expected '>' or end of input"));
        }
        Ok(layers)
    }
}
