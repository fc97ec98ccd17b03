//! Binary checkpoint format.
//!
//! ```text
//! HALLUMON-CHECKPOINT\n
//! version=1\n
//! key=value\n ...        (ModelConfig)
//! \n
//! records: u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Tensor names start with
//! `base.`, `lora.` or `head.`.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{BaseWeights, LoraAdapters, Model, ModelConfig};
use crate::detector::DetectionHead;
use crate::error::{Error, Result};
use crate::params::Params;

pub const MAGIC: &str = "HALLUMON-CHECKPOINT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub head: Option<DetectionHead<f32>>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

fn write_group<W: Write>(w: &mut W, p: &dyn Params<f32>) -> Result<()> {
    let mut res = Ok(());
    p.visit(&mut |name, shape, data| {
        if res.is_err() {
            return;
        }
        res = (|| -> std::io::Result<()> {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(data.len() * 4);
            for x in data {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)
        })();
    });
    Ok(res?)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "version={VERSION}")?;
        for (k, v) in self.model.config.to_pairs() {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w)?;
        write_group(&mut w, &self.model.base)?;
        if let Some(l) = &self.model.lora {
            write_group(&mut w, l)?;
        }
        if let Some(h) = &self.head {
            write_group(&mut w, h)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut r: R) -> Result<Checkpoint> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(bad("missing magic line"));
        }
        let mut config = ModelConfig::micro(0);
        let mut seen_version = false;
        loop {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(bad("truncated header"));
            }
            let l = line.trim_end_matches('\n');
            if l.is_empty() {
                break;
            }
            let (k, v) = l.split_once('=').ok_or_else(|| bad(format!("bad header line `{l}`")))?;
            if k == "version" {
                if v != VERSION.to_string() {
                    return Err(bad(format!("unsupported version {v}")));
                }
                seen_version = true;
            } else if !config.set(k, v)? {
                return Err(bad(format!("unknown header key `{k}`")));
            }
        }
        if !seen_version {
            return Err(bad("missing version"));
        }
        config.validate()?;

        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        loop {
            let mut len = [0u8; 4];
            match r.read_exact(&mut len) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            }
            let name_len = u32::from_le_bytes(len) as usize;
            if name_len > 4096 {
                return Err(bad("implausible tensor name length"));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(|_| bad("truncated tensor name"))?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(bad(format!("{name}: implausible rank {ndim}")));
            }
            let shape = (0..ndim).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw).map_err(|_| bad(format!("{name}: truncated data")))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            if tensors.insert(name.clone(), (shape, data)).is_some() {
                return Err(bad(format!("duplicate tensor {name}")));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut base = BaseWeights::<f32>::init(&config, &mut rng);
        fill(&mut base, &mut tensors)?;
        let has = |prefix: &str, t: &BTreeMap<String, _>| t.keys().any(|k: &String| k.starts_with(prefix));
        let lora = if has("lora.", &tensors) {
            let mut l = LoraAdapters::init(&config, &mut rng);
            fill(&mut l, &mut tensors)?;
            Some(l)
        } else {
            None
        };
        let head = if has("head.", &tensors) {
            let mut h = DetectionHead::zeros(config.d_model, config.head_hidden);
            fill(&mut h, &mut tensors)?;
            Some(h)
        } else {
            None
        };
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint { model: Model::new(config, base, lora)?, head })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Checkpoint> {
        let f = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(f))
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated record header"))?;
    Ok(u32::from_le_bytes(b))
}

fn fill(p: &mut dyn Params<f32>, tensors: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
    let mut res = Ok(());
    p.visit_mut(&mut |name, shape, data| {
        if res.is_err() {
            return;
        }
        res = match tensors.remove(name) {
            None => Err(bad(format!("missing tensor {name}"))),
            Some((s, _)) if s != shape => Err(bad(format!("{name}: shape {s:?}, expected {shape:?}"))),
            Some((_, d)) => {
                data.copy_from_slice(&d);
                Ok(())
            }
        };
    });
    res
}
