//! Binary persistence for trajectories and denoiser checkpoints.
//!
//! Layout (little-endian): magic "MCDITRAJ", version u32, task_id u64,
//! layer count u32, layer sizes u32[], activation u8, M u64, D u64, then
//! (M+1)·D float64 weights, then final_loss float64. Round-trips are
//! bitwise-lossless. A denoiser checkpoint is the same layout with M = 0
//! and the denoiser's own spec in the header.
//!
//! The activation byte carries the full head information so the spec
//! round-trips: low nibble activation (0 tanh, 1 relu), high nibble output
//! head (0 linear, 1 softmax cross-entropy, 2 mean squared error).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::DenoiserState;
use crate::error::{Error, Result};
use crate::nn::{Activation, NetworkSpec, OutputHead};
use crate::vector::WeightVector;
use crate::weightprep::Trajectory;

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"MCDITRAJ";
pub const FORMAT_VERSION: u32 = 1;

fn activation_byte(spec: &NetworkSpec) -> u8 {
    let act = match spec.activation {
        Activation::Tanh => 0u8,
        Activation::Relu => 1u8,
    };
    let head = match spec.output_head {
        OutputHead::Linear => 0u8,
        OutputHead::SoftmaxCrossEntropy => 1u8,
        OutputHead::MeanSquaredError => 2u8,
    };
    act | (head << 4)
}

fn decode_activation_byte(byte: u8, offset: u64) -> Result<(Activation, OutputHead)> {
    let act = match byte & 0x0F {
        0 => Activation::Tanh,
        1 => Activation::Relu,
        other => {
            return Err(Error::MalformedFile {
                offset,
                message: format!("unknown activation code {other}"),
            })
        }
    };
    let head = match byte >> 4 {
        0 => OutputHead::Linear,
        1 => OutputHead::SoftmaxCrossEntropy,
        2 => OutputHead::MeanSquaredError,
        other => {
            return Err(Error::MalformedFile {
                offset,
                message: format!("unknown output head code {other}"),
            })
        }
    };
    Ok((act, head))
}

struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn bytes(&mut self, buf: &mut [u8], field: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|_| Error::MalformedFile {
            offset: at,
            message: format!("truncated while reading {field}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.bytes(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, field)?;
        Ok(u64::from_le_bytes(b))
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.bytes(&mut b, field)?;
        Ok(f64::from_le_bytes(b))
    }
}

fn write_header<W: Write>(
    out: &mut W,
    task_id: u64,
    spec: &NetworkSpec,
    m: u64,
    d: u64,
) -> Result<()> {
    out.write_all(TRAJECTORY_MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&task_id.to_le_bytes())?;
    out.write_all(&(spec.layer_sizes.len() as u32).to_le_bytes())?;
    for &size in &spec.layer_sizes {
        out.write_all(&(size as u32).to_le_bytes())?;
    }
    out.write_all(&[activation_byte(spec)])?;
    out.write_all(&m.to_le_bytes())?;
    out.write_all(&d.to_le_bytes())?;
    Ok(())
}

struct Header {
    task_id: u64,
    spec: NetworkSpec,
    m: u64,
    d: u64,
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<Header> {
    let mut magic = [0u8; 8];
    r.bytes(&mut magic, "magic")?;
    if &magic != TRAJECTORY_MAGIC {
        return Err(Error::MalformedFile {
            offset: 0,
            message: "bad magic, not a trajectory file".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::MalformedFile {
            offset: 8,
            message: format!("unsupported format version {version}"),
        });
    }
    let task_id = r.u64("task_id")?;
    let layer_count = r.u32("layer count")? as usize;
    if layer_count < 2 || layer_count > 64 {
        return Err(Error::MalformedFile {
            offset: r.offset - 4,
            message: format!("implausible layer count {layer_count}"),
        });
    }
    let mut layer_sizes = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let size = r.u32(&format!("layer size {i}"))? as usize;
        if size == 0 {
            return Err(Error::MalformedFile {
                offset: r.offset - 4,
                message: format!("layer {i} has size 0"),
            });
        }
        layer_sizes.push(size);
    }
    let mut act = [0u8; 1];
    r.bytes(&mut act, "activation byte")?;
    let (activation, head) = decode_activation_byte(act[0], r.offset - 1)?;
    let spec = NetworkSpec::new(layer_sizes, activation, head)
        .map_err(|e| Error::MalformedFile {
            offset: r.offset,
            message: format!("invalid spec in header: {e}"),
        })?;
    let m = r.u64("M")?;
    let d = r.u64("D")?;
    if d != spec.parameter_count() as u64 {
        return Err(Error::MalformedFile {
            offset: r.offset - 8,
            message: format!(
                "header D={d} does not match spec parameter count {}",
                spec.parameter_count()
            ),
        });
    }
    Ok(Header {
        task_id,
        spec,
        m,
        d,
    })
}

fn read_vectors<R: Read>(r: &mut Reader<R>, count: usize, dim: usize) -> Result<Vec<WeightVector>> {
    let mut out = Vec::with_capacity(count);
    for v in 0..count {
        let mut values = Vec::with_capacity(dim);
        for c in 0..dim {
            values.push(r.f64(&format!("weight vector {v} coord {c}"))?);
        }
        let at = r.offset;
        out.push(WeightVector::new(values).map_err(|e| Error::MalformedFile {
            offset: at,
            message: format!("weight vector {v}: {e}"),
        })?);
    }
    Ok(out)
}

pub fn save_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let d = traj.weight_dim() as u64;
    write_header(&mut out, traj.task_id, &traj.spec, traj.m() as u64, d)?;
    for theta in &traj.thetas {
        for value in theta.iter() {
            out.write_all(&value.to_le_bytes())?;
        }
    }
    out.write_all(&traj.final_loss.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let header = read_header(&mut r)?;
    let m = header.m as usize;
    if m == 0 {
        return Err(Error::MalformedFile {
            offset: r.offset,
            message: "trajectory must contain at least one epoch".into(),
        });
    }
    let thetas = read_vectors(&mut r, m + 1, header.d as usize)?;
    let final_loss = r.f64("final_loss")?;
    // Tolerate trailing-garbage detection: one extra read must hit EOF.
    let mut probe = [0u8; 1];
    if r.inner.read(&mut probe)? != 0 {
        return Err(Error::MalformedFile {
            offset: r.offset,
            message: "trailing bytes after final_loss".into(),
        });
    }
    Ok(Trajectory {
        task_id: header.task_id,
        spec: header.spec,
        thetas,
        final_loss,
    })
}

/// Saves a denoiser checkpoint: trajectory layout with M = 0 and one
/// weight vector φ. `final_loss` records the last training loss.
pub fn save_denoiser(den: &DenoiserState, final_loss: f64, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_header(&mut out, 0, &den.spec, 0, den.phi.len() as u64)?;
    for value in den.phi.iter() {
        out.write_all(&value.to_le_bytes())?;
    }
    out.write_all(&final_loss.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

/// Loads a denoiser checkpoint; the caller supplies the dimensional split
/// of the input (weight dim is the spec's output width).
pub fn load_denoiser(
    path: &Path,
    t_embed_dim: usize,
    emb_dim: usize,
) -> Result<(DenoiserState, f64)> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let header = read_header(&mut r)?;
    if header.m != 0 {
        return Err(Error::MalformedFile {
            offset: r.offset,
            message: format!("checkpoint must have M=0, found {}", header.m),
        });
    }
    let phi = read_vectors(&mut r, 1, header.d as usize)?.pop().unwrap();
    let final_loss = r.f64("final_loss")?;
    let weight_dim = header.spec.output_dim();
    let den = DenoiserState::from_parts(weight_dim, t_embed_dim, emb_dim, header.spec, phi)?;
    Ok((den, final_loss))
}
