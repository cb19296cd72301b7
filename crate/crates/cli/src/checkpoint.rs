//! Denoiser weight checkpoints.
//!
//! Layout: one JSON header line (UTF-8, terminated by `\n`), then the
//! network weights as consecutive little-endian f32 values. The header
//! records the architecture (width, hidden layer count, head channel split),
//! the trained coupling parameters rho/lambda, the unrolling depths ns/nt,
//! and the internal tensor scale the weights assume. Weight order matches
//! `DnCnn::flatten`: hidden layers first then the three heads, each layer's
//! kernel before its bias.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dodti_core::denoiser::{DnCnn, HEAD_CHANNELS, HIDDEN_LAYERS};
use dodti_core::train::ModelParams;
use dodti_core::unroll::TENSOR_SCALE;

use crate::errors::CliError;

pub const CKPT_FORMAT: &str = "dodti-dncnn";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    width: usize,
    hidden_layers: usize,
    head_channels: [usize; 3],
    /// Number of f32 weights following the header line.
    count: usize,
    rho: f64,
    lambda: f64,
    ns: usize,
    nt: usize,
    tensor_scale: f64,
}

#[derive(Debug)]
pub enum CkptError {
    Io(String),
    MissingHeader,
    BadHeader(String),
    WrongFormat(String),
    WrongVersion(u32),
    ArchMismatch(&'static str),
    BadValue(&'static str),
    PayloadLength { need: usize, have: usize },
}

impl std::fmt::Display for CkptError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CkptError::Io(m) => write!(f, "{m}"),
            CkptError::MissingHeader => write!(f, "checkpoint has no header line"),
            CkptError::BadHeader(m) => write!(f, "bad checkpoint header: {m}"),
            CkptError::WrongFormat(g) => {
                write!(f, "not a {CKPT_FORMAT} checkpoint (format {g:?})")
            }
            CkptError::WrongVersion(v) => write!(f, "unsupported checkpoint version {v}"),
            CkptError::ArchMismatch(what) => {
                write!(f, "checkpoint architecture mismatch: {what}")
            }
            CkptError::BadValue(what) => write!(f, "checkpoint field out of range: {what}"),
            CkptError::PayloadLength { need, have } => {
                write!(f, "checkpoint payload: need {need} bytes, have {have}")
            }
        }
    }
}

impl std::error::Error for CkptError {}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// The full trained state needed to run the unrolled solver.
pub struct Checkpoint {
    pub model: ModelParams,
    pub ns: usize,
    pub nt: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelParams,
    ns: usize,
    nt: usize,
) -> Result<(), CkptError> {
    let weights = model.net.flatten();
    let header = CheckpointHeader {
        format: CKPT_FORMAT.to_string(),
        version: CKPT_VERSION,
        width: model.net.width,
        hidden_layers: HIDDEN_LAYERS,
        head_channels: HEAD_CHANNELS,
        count: weights.len(),
        rho: model.rho(),
        lambda: model.lambda(),
        ns,
        nt,
        tensor_scale: TENSOR_SCALE,
    };
    let mut bytes = serde_json::to_vec(&header).map_err(|e| CkptError::BadHeader(e.to_string()))?;
    bytes.push(b'\n');
    bytes.reserve(4 * weights.len());
    for w in weights {
        bytes.extend_from_slice(&(w as f32).to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| CkptError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CkptError> {
    let bytes =
        std::fs::read(path).map_err(|e| CkptError::Io(format!("{}: {e}", path.display())))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(CkptError::MissingHeader)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| CkptError::BadHeader(e.to_string()))?;

    if header.format != CKPT_FORMAT {
        return Err(CkptError::WrongFormat(header.format));
    }
    if header.version != CKPT_VERSION {
        return Err(CkptError::WrongVersion(header.version));
    }
    if header.hidden_layers != HIDDEN_LAYERS {
        return Err(CkptError::ArchMismatch("hidden_layers"));
    }
    if header.head_channels != HEAD_CHANNELS {
        return Err(CkptError::ArchMismatch("head_channels"));
    }
    if header.tensor_scale != TENSOR_SCALE {
        return Err(CkptError::ArchMismatch("tensor_scale"));
    }
    if header.width == 0 || header.width > 4096 {
        return Err(CkptError::BadValue("width"));
    }
    if !(header.rho.is_finite() && header.rho > 0.0) {
        return Err(CkptError::BadValue("rho"));
    }
    if !(header.lambda.is_finite() && header.lambda > 0.0) {
        return Err(CkptError::BadValue("lambda"));
    }
    if header.ns == 0 || header.nt == 0 {
        return Err(CkptError::BadValue("ns/nt"));
    }

    let expected = DnCnn::init(header.width, 0).n_params();
    if header.count != expected {
        return Err(CkptError::ArchMismatch("count"));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != 4 * header.count {
        return Err(CkptError::PayloadLength {
            need: 4 * header.count,
            have: payload.len(),
        });
    }

    let mut model = ModelParams::init(header.width, 0, header.rho, header.lambda);
    let flat: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    model.net.set_from_flat(&flat);
    Ok(Checkpoint {
        model,
        ns: header.ns,
        nt: header.nt,
    })
}
