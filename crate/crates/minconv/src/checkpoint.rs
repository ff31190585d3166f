//! Versioned binary checkpoint container.
//!
//! Layout: the magic string `MINCONV1`, a little-endian length-prefixed
//! metadata block (format version, architecture digest, network name, epoch,
//! conv mode flags, per-layer statistics, tensor counts, optimizer step),
//! then every parameter tensor in declaration order as little-endian 32-bit
//! floats with an explicit shape header, then optimizer state tensors in the
//! same framing.
//!
//! The digest covers the architecture with conv modes excluded, so an exact
//! checkpoint loads into the identically shaped approximate network: that
//! mode flexibility is what enables transfer learning.

use crate::approx::{AbsMeanStats, ConvMode};
use crate::error::{Error, Result};
use crate::nn::{Network, NetworkSpec};
use crate::tensor::Scalar;
use crate::train::Optimizer;
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 8] = b"MINCONV1";
const FORMAT_VERSION: u32 = 1;

/// SHA-256 of the canonical architecture string (conv modes excluded).
pub fn arch_digest(spec: &NetworkSpec) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(spec.arch_string().as_bytes());
    hasher.finalize().into()
}

/// Parsed checkpoint contents. Tensors are stored as f32 regardless of the
/// network's scalar type.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub arch_digest: [u8; 32],
    pub name: String,
    pub epoch: u32,
    pub modes: Vec<ConvMode>,
    /// Per conv layer: (running mean of |x|, gamma, per-filter mean |w|).
    pub stats: Vec<(f32, f32, Vec<f32>)>,
    pub params: Vec<(Vec<usize>, Vec<f32>)>,
    pub opt_step: u64,
    pub opt_state: Vec<(Vec<usize>, Vec<f32>)>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let out = self
            .buf
            .get(self.at..self.at + n)
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        self.at += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn write_tensor(w: &mut Writer, shape: &[usize], data: impl Iterator<Item = f32>) {
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    for v in data {
        w.f32(v);
    }
}

fn read_tensor(r: &mut Reader) -> Result<(Vec<usize>, Vec<f32>)> {
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32()? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f32()?);
    }
    Ok((shape, data))
}

/// Serializes the network (and, when given, optimizer state) to `path`.
pub fn save<T: Scalar>(
    path: &Path,
    net: &Network<T>,
    epoch: usize,
    optimizer: Option<&Optimizer<T>>,
) -> Result<()> {
    let params = net.param_tensors();
    let stats = net.conv_stats();
    let modes = net.spec.conv_modes();
    let (opt_step, opt_tensors) = match optimizer {
        Some(opt) => opt.state_tensors(),
        None => (0, Vec::new()),
    };

    let mut meta = Writer { buf: Vec::new() };
    meta.u32(FORMAT_VERSION);
    meta.bytes(&arch_digest(&net.spec));
    meta.u32(epoch as u32);
    meta.u8(modes.len() as u8);
    for m in &modes {
        meta.u8(match m {
            ConvMode::Exact => 0,
            ConvMode::MinApprox => 1,
        });
    }
    let name = net.spec.name.as_bytes();
    meta.u32(name.len() as u32);
    meta.bytes(name);
    meta.u32(stats.len() as u32);
    for s in &stats {
        meta.f32(s.mu_x_running.as_f64() as f32);
        meta.f32(s.gamma.as_f64() as f32);
        meta.u32(s.mu_w.len() as u32);
        for m in &s.mu_w {
            meta.f32(m.as_f64() as f32);
        }
    }
    meta.u32(params.len() as u32);
    meta.u32(opt_tensors.len() as u32);
    meta.u64(opt_step);

    let mut out = Writer { buf: Vec::new() };
    out.bytes(MAGIC);
    out.u32(meta.buf.len() as u32);
    out.bytes(&meta.buf);
    for (shape, data) in &params {
        write_tensor(&mut out, shape, data.iter().map(|v| v.as_f64() as f32));
    }
    for t in &opt_tensors {
        write_tensor(&mut out, &[t.len()], t.iter().map(|v| v.as_f64() as f32));
    }
    fs::write(path, &out.buf)?;
    Ok(())
}

/// Reads and parses a checkpoint file.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format(format!("{}: not a MINCONV1 checkpoint", path.display())));
    }
    let meta_len = r.u32()? as usize;
    let meta_end = r.at + meta_len;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(r.take(32)?);
    let epoch = r.u32()?;
    let n_modes = r.u8()? as usize;
    let mut modes = Vec::with_capacity(n_modes);
    for _ in 0..n_modes {
        modes.push(match r.u8()? {
            0 => ConvMode::Exact,
            1 => ConvMode::MinApprox,
            other => return Err(Error::Format(format!("unknown conv mode byte {other}"))),
        });
    }
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Format("checkpoint name is not utf-8".into()))?;
    let n_stats = r.u32()? as usize;
    let mut stats = Vec::with_capacity(n_stats);
    for _ in 0..n_stats {
        let mu_x = r.f32()?;
        let gamma = r.f32()?;
        let n = r.u32()? as usize;
        let mut mu_w = Vec::with_capacity(n);
        for _ in 0..n {
            mu_w.push(r.f32()?);
        }
        stats.push((mu_x, gamma, mu_w));
    }
    let n_params = r.u32()? as usize;
    let n_opt = r.u32()? as usize;
    let opt_step = r.u64()?;
    if r.at != meta_end {
        return Err(Error::Format("metadata block length mismatch".into()));
    }
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        params.push(read_tensor(&mut r)?);
    }
    let mut opt_state = Vec::with_capacity(n_opt);
    for _ in 0..n_opt {
        opt_state.push(read_tensor(&mut r)?);
    }
    if r.at != buf.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint { version, arch_digest: digest, name, epoch, modes, stats, params, opt_step, opt_state })
}

impl Checkpoint {
    /// Copies parameters (and statistics unless `skip_stats`) into a network
    /// whose architecture digest matches. Conv modes may differ; the
    /// network keeps its own.
    pub fn install_into<T: Scalar>(&self, net: &mut Network<T>, skip_stats: bool) -> Result<()> {
        let want = arch_digest(&net.spec);
        if want != self.arch_digest {
            return Err(Error::IncompatibleCheckpoint(format!(
                "architecture digest mismatch: checkpoint {} vs network {} ({})",
                hex_prefix(&self.arch_digest),
                hex_prefix(&want),
                net.spec.arch_string()
            )));
        }
        let params: Vec<(Vec<usize>, Vec<T>)> = self
            .params
            .iter()
            .map(|(s, d)| (s.clone(), d.iter().map(|&v| T::from_f64(v as f64)).collect()))
            .collect();
        net.load_param_tensors(&params)?;
        if !skip_stats {
            let stats: Vec<AbsMeanStats<T>> = self
                .stats
                .iter()
                .map(|(mu_x, gamma, mu_w)| AbsMeanStats {
                    mu_x_running: T::from_f64(*mu_x as f64),
                    gamma: T::from_f64(*gamma as f64),
                    mu_w: mu_w.iter().map(|&v| T::from_f64(v as f64)).collect(),
                })
                .collect();
            net.set_conv_stats(&stats)?;
        }
        Ok(())
    }

    /// Restores optimizer state saved alongside the parameters.
    pub fn install_optimizer<T: Scalar>(&self, optimizer: &mut Optimizer<T>) -> Result<()> {
        let tensors: Vec<Vec<T>> = self
            .opt_state
            .iter()
            .map(|(_, d)| d.iter().map(|&v| T::from_f64(v as f64)).collect())
            .collect();
        optimizer.load_state(self.opt_step, tensors)
    }
}

fn hex_prefix(digest: &[u8; 32]) -> String {
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
