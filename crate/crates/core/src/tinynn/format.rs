//! Binary model file.
//!
//! ```text
//! "PMNN" | version u16 | kind u8 | layers u8
//! per layer:  in u32 | out u32 | activation u8 | alpha f32
//! per layer:  weights f32[out*in] row-major | biases f32[out]
//! scaler count u32 | per entry: mean f64 | std f64
//! crc32 u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. The scaler block holds one
//! entry per input feature; regressors may append one entry per output,
//! used to de-scale predictions.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{Activation, Dense, LayerSpec, Mlp, ModelKind, Scaler};

pub const MAGIC: &[u8; 4] = b"PMNN";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("model file error at byte {offset}: {msg}")]
    Malformed { offset: usize, msg: String },
    #[error("model file io: {0}")]
    Io(#[from] std::io::Error),
}

impl FormatError {
    pub fn offset(&self) -> Option<usize> {
        match self {
            FormatError::Malformed { offset, .. } => Some(*offset),
            FormatError::Io(_) => None,
        }
    }
}

fn bad<T>(offset: usize, msg: impl Into<String>) -> Result<T, FormatError> {
    Err(FormatError::Malformed {
        offset,
        msg: msg.into(),
    })
}

fn activation_code(a: Activation) -> (u8, f32) {
    match a {
        Activation::Linear => (0, 0.0),
        Activation::Relu => (1, 0.0),
        Activation::LeakyRelu { alpha } => (2, alpha),
        Activation::Softmax => (3, 0.0),
    }
}

impl Mlp {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.param_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            ModelKind::Classifier => 0,
            ModelKind::Regressor => 1,
        });
        out.push(self.layers.len() as u8);
        for l in &self.layers {
            let (code, alpha) = activation_code(l.spec.activation);
            out.extend_from_slice(&(l.spec.in_dim as u32).to_le_bytes());
            out.extend_from_slice(&(l.spec.out_dim as u32).to_le_bytes());
            out.push(code);
            out.extend_from_slice(&alpha.to_le_bytes());
        }
        for l in &self.layers {
            for v in l.weights.iter().chain(&l.biases) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let scalers: Vec<&Scaler> = self
            .input_scaler
            .iter()
            .chain(&self.output_scaler)
            .collect();
        out.extend_from_slice(&(scalers.len() as u32).to_le_bytes());
        for s in scalers {
            out.extend_from_slice(&s.mean.to_le_bytes());
            out.extend_from_slice(&s.std.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Mlp, FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return bad(0, "bad magic, expected PMNN");
        }
        let at = r.pos;
        let version = u16::from_le_bytes(r.array("version")?);
        if version != VERSION {
            return bad(at, format!("unsupported version {version}"));
        }
        let at = r.pos;
        let kind = match r.u8("model kind")? {
            0 => ModelKind::Classifier,
            1 => ModelKind::Regressor,
            k => return bad(at, format!("unknown model kind {k}")),
        };
        let n_layers = r.u8("layer count")? as usize;
        if n_layers == 0 {
            return bad(r.pos - 1, "model has no layers");
        }
        let mut specs = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let in_dim = r.u32("layer in_dim")? as usize;
            let out_dim = r.u32("layer out_dim")? as usize;
            let at = r.pos;
            let code = r.u8("activation")?;
            let alpha = f32::from_le_bytes(r.array("alpha")?);
            let activation = match code {
                0 => Activation::Linear,
                1 => Activation::Relu,
                2 => Activation::LeakyRelu { alpha },
                3 => Activation::Softmax,
                c => return bad(at, format!("unknown activation {c}")),
            };
            specs.push(LayerSpec::new(in_dim, out_dim, activation));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for spec in specs {
            let weights = r.f32_block(spec.in_dim.saturating_mul(spec.out_dim), "weights")?;
            let biases = r.f32_block(spec.out_dim, "biases")?;
            layers.push(Dense {
                spec,
                weights,
                biases,
            });
        }
        let at = r.pos;
        let n_scalers = r.u32("scaler count")? as usize;
        let in_dim = layers[0].spec.in_dim;
        let out_dim = layers.last().map_or(0, |l| l.spec.out_dim);
        let has_output = match (n_scalers, kind) {
            (n, _) if n == in_dim => false,
            (n, ModelKind::Regressor) if n == in_dim + out_dim => true,
            (n, _) => return bad(at, format!("scaler count {n} does not fit model dims")),
        };
        let mut scalers = Vec::with_capacity(n_scalers);
        for _ in 0..n_scalers {
            let mean = f64::from_le_bytes(r.array("scaler mean")?);
            let std = f64::from_le_bytes(r.array("scaler std")?);
            scalers.push(Scaler { mean, std });
        }
        let body_end = r.pos;
        let stored = u32::from_le_bytes(r.array("crc32")?);
        if r.pos != bytes.len() {
            return bad(r.pos, "trailing bytes after crc");
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return bad(
                body_end,
                format!("crc mismatch: stored {stored:08x}, computed {actual:08x}"),
            );
        }
        let output_scaler = if has_output {
            scalers.split_off(in_dim)
        } else {
            Vec::new()
        };
        let model = Mlp {
            kind,
            layers,
            input_scaler: scalers,
            output_scaler,
        };
        model
            .validate()
            .or_else(|e| bad(0, format!("invalid model: {e}")))?;
        Ok(model)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => bad(self.pos, format!("truncated while reading {what}")),
        }
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], FormatError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array(what)?))
    }

    fn f32_block(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.saturating_mul(4), what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

pub fn save(model: &Mlp, path: impl AsRef<Path>) -> Result<(), FormatError> {
    fs::write(path, model.to_bytes())?;
    Ok(())
}

pub fn restore(path: impl AsRef<Path>) -> Result<Mlp, FormatError> {
    Mlp::from_bytes(&fs::read(path)?)
}
