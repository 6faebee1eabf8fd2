//! Checkpoint format: a text header terminated by `end\n`, then every
//! parameter as little-endian `f64` in [`Network::parameters`] order.
//!
//! ```text
//! gradalign-checkpoint 1
//! activation softplus 3
//! classes 10
//! input 3 32 32
//! seed 7
//! layer conv2d 3 32 3 1 bias
//! layer maxpool2d 2
//! layer flatten
//! layer dense 4096 10 bias
//! params 123456
//! end
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Activation, Layer, LayerSpec, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "gradalign-checkpoint";
const VERSION: u32 = 1;

fn bias_word(b: bool) -> &'static str {
    if b {
        "bias"
    } else {
        "nobias"
    }
}

pub fn write_checkpoint<W: Write>(net: &Network, mut w: W) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC} {VERSION}")?;
    match net.activation() {
        Activation::Relu => writeln!(w, "activation relu")?,
        Activation::Identity => writeln!(w, "activation identity")?,
        // `{:?}` on f64 prints the shortest string that parses back exactly
        Activation::Softplus { beta } => writeln!(w, "activation softplus {beta:?}")?,
    }
    writeln!(w, "classes {}", net.class_count())?;
    let dims: Vec<String> = net.input_shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "input {}", dims.join(" "))?;
    writeln!(w, "seed {}", net.seed())?;
    for l in net.layers() {
        match l.spec {
            LayerSpec::Dense { inputs, outputs, bias } => {
                writeln!(w, "layer dense {inputs} {outputs} {}", bias_word(bias))?
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, pad, bias } => {
                writeln!(w, "layer conv2d {in_ch} {out_ch} {kernel} {pad} {}", bias_word(bias))?
            }
            LayerSpec::MaxPool2d { size } => writeln!(w, "layer maxpool2d {size}")?,
            LayerSpec::Flatten => writeln!(w, "layer flatten")?,
        }
    }
    writeln!(w, "params {}", net.parameter_count())?;
    writeln!(w, "end")?;
    for t in net.parameters() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn parse_num<T: std::str::FromStr>(s: Option<&str>, what: &str) -> Result<T> {
    s.ok_or_else(|| fmt_err(format!("missing {what}")))?
        .parse()
        .map_err(|_| fmt_err(format!("bad {what}")))
}

fn parse_bias(s: Option<&str>) -> Result<bool> {
    match s {
        Some("bias") => Ok(true),
        Some("nobias") => Ok(false),
        other => Err(fmt_err(format!("bad bias flag {other:?}"))),
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Network> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt_err("unexpected end of header"));
        }
        Ok(line.trim_end().to_string())
    };

    let magic = next_line(&mut r)?;
    let mut it = magic.split_whitespace();
    if it.next() != Some(CHECKPOINT_MAGIC) {
        return Err(fmt_err("not a checkpoint file"));
    }
    let version: u32 = parse_num(it.next(), "version")?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }

    let mut activation = None;
    let mut classes: Option<usize> = None;
    let mut input = None;
    let mut seed = None;
    let mut specs = Vec::new();
    let mut params: Option<usize> = None;
    loop {
        let l = next_line(&mut r)?;
        let mut f = l.split_whitespace();
        match f.next() {
            Some("end") => break,
            Some("activation") => {
                activation = Some(match f.next() {
                    Some("relu") => Activation::Relu,
                    Some("identity") => Activation::Identity,
                    Some("softplus") => Activation::Softplus { beta: parse_num(f.next(), "beta")? },
                    other => return Err(fmt_err(format!("unknown activation {other:?}"))),
                })
            }
            Some("classes") => classes = Some(parse_num(f.next(), "classes")?),
            Some("input") => input = Some(f.map(|s| parse_num(Some(s), "input dim")).collect::<Result<Vec<usize>>>()?),
            Some("seed") => seed = Some(parse_num(f.next(), "seed")?),
            Some("params") => params = Some(parse_num(f.next(), "params")?),
            Some("layer") => specs.push(match f.next() {
                Some("dense") => LayerSpec::Dense {
                    inputs: parse_num(f.next(), "dense inputs")?,
                    outputs: parse_num(f.next(), "dense outputs")?,
                    bias: parse_bias(f.next())?,
                },
                Some("conv2d") => LayerSpec::Conv2d {
                    in_ch: parse_num(f.next(), "conv in_ch")?,
                    out_ch: parse_num(f.next(), "conv out_ch")?,
                    kernel: parse_num(f.next(), "conv kernel")?,
                    pad: parse_num(f.next(), "conv pad")?,
                    bias: parse_bias(f.next())?,
                },
                Some("maxpool2d") => LayerSpec::MaxPool2d { size: parse_num(f.next(), "pool size")? },
                Some("flatten") => LayerSpec::Flatten,
                other => return Err(fmt_err(format!("unknown layer kind {other:?}"))),
            }),
            other => return Err(fmt_err(format!("unknown header key {other:?}"))),
        }
    }
    let activation = activation.ok_or_else(|| fmt_err("missing activation"))?;
    let input = input.ok_or_else(|| fmt_err("missing input shape"))?;
    let seed = seed.ok_or_else(|| fmt_err("missing seed"))?;
    let params = params.ok_or_else(|| fmt_err("missing params"))?;

    let mut layers = Vec::with_capacity(specs.len());
    let mut read = 0usize;
    let mut take = |r: &mut BufReader<R>, shape: Vec<usize>| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        read += n;
        if read > params {
            return Err(fmt_err("parameter block shorter than layer specs require"));
        }
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(|_| fmt_err("truncated parameter block"))?;
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data)
    };
    for spec in specs {
        let weight = match spec.weight_shape() {
            Some(s) => Some(take(&mut r, s)?),
            None => None,
        };
        let bias = match spec.bias_len() {
            Some(n) => Some(take(&mut r, vec![n])?),
            None => None,
        };
        layers.push(Layer { spec, weight, bias });
    }
    if read != params {
        return Err(fmt_err(format!("header declares {params} parameters, layers hold {read}")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after parameter block"));
    }
    let net = Network::from_layers(layers, activation, input, seed)?;
    if let Some(c) = classes {
        if c != net.class_count() {
            return Err(fmt_err(format!("header says {c} classes, layers produce {}", net.class_count())));
        }
    }
    Ok(net)
}

impl Network {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(self, BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_checkpoint(File::open(path)?)
    }

    /// Checkpoint bytes, handy for bit-exact comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_checkpoint(self, &mut out).expect("writing to a Vec cannot fail");
        out
    }
}
