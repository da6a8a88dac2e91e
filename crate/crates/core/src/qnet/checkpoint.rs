//! Versioned binary checkpoints.
//!
//! ```text
//! magic        8 bytes  "ASQNCKPT"
//! version      u32
//! architecture 5 x u64  state_dim, action_dim, embed, hidden[0], hidden[1]
//! params       u64 count, then f64 values in layer declaration order
//! optimizer    u8 kind (0 adam, 1 sgd), f64 lr, f64 beta1, f64 beta2, f64 eps,
//!              u64 step, u64 moment count, f64 m[..], f64 v[..]
//! checksum     u64 FNV-1a over every preceding byte
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{Architecture, Optimizer, OptimizerKind, QNetwork};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ASQNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: QNetwork,
    pub optimizer: Optimizer,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn save_checkpoint(net: &QNetwork, opt: &Optimizer, path: &Path) -> Result<()> {
    let a = net.architecture();
    let mut buf = Vec::with_capacity(64 + 8 * (net.params().len() + opt.m.len() * 2));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for d in [a.state_dim, a.action_dim, a.embed, a.hidden[0], a.hidden[1]] {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    put_floats(&mut buf, net.params());
    let (tag, b1, b2, eps) = match opt.kind {
        OptimizerKind::Adam { beta1, beta2, eps } => (0u8, beta1, beta2, eps),
        OptimizerKind::Sgd => (1u8, 0.0, 0.0, 0.0),
    };
    buf.push(tag);
    for f in [opt.lr, b1, b2, eps] {
        buf.extend_from_slice(&f.to_le_bytes());
    }
    buf.extend_from_slice(&opt.step.to_le_bytes());
    put_floats(&mut buf, &opt.m);
    buf.extend(opt.v.iter().flat_map(|f| f.to_le_bytes()));
    let sum = fnv1a(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

fn put_floats(buf: &mut Vec<u8>, xs: &[f64]) {
    buf.extend_from_slice(&(xs.len() as u64).to_le_bytes());
    buf.extend(xs.iter().flat_map(|f| f.to_le_bytes()));
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn decode(bytes: &[u8], expected: Option<&Architecture>) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err("file too short".into());
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("bad magic bytes".into());
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        ));
    }
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if stored != fnv1a(body) {
        return Err("checksum mismatch (truncated or corrupted)".into());
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u64()? as usize;
    }
    let arch = Architecture::new(dims[0], dims[1], dims[2], [dims[3], dims[4]])
        .map_err(|e| e.to_string())?;
    if let Some(want) = expected {
        if *want != arch {
            return Err(format!(
                "architecture mismatch: file has {arch:?}, expected {want:?}"
            ));
        }
    }
    let n = r.u64()? as usize;
    if n != arch.param_count() {
        return Err(format!(
            "parameter count {n} does not match architecture ({})",
            arch.param_count()
        ));
    }
    let params = r.floats(n)?;
    let tag = r.take(1)?[0];
    let (lr, b1, b2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let kind = match tag {
        0 => OptimizerKind::Adam {
            beta1: b1,
            beta2: b2,
            eps,
        },
        1 => OptimizerKind::Sgd,
        t => return Err(format!("unknown optimizer tag {t}")),
    };
    let step = r.u64()?;
    let moments = r.u64()? as usize;
    let m = r.floats(moments)?;
    let v = r.floats(moments)?;
    if r.pos != body.len() {
        return Err("trailing bytes after optimizer state".into());
    }
    let network = QNetwork::from_params(arch, params).map_err(|e| e.to_string())?;
    Ok(Checkpoint {
        network,
        optimizer: Optimizer {
            kind,
            lr,
            step,
            m,
            v,
        },
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes, None).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

/// Loads a checkpoint, rejecting it unless it was written for `arch`.
pub fn load_checkpoint_expecting(path: &Path, arch: &Architecture) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode(&bytes, Some(arch)).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (QNetwork, Optimizer, tempfile::TempDir) {
        let arch = Architecture::new(6, 6, 4, [5, 3]).unwrap();
        let mut net = QNetwork::new(arch, 9);
        let mut opt = Optimizer::new(OptimizerKind::default(), 1e-4, arch.param_count());
        let g: Vec<f64> = (0..arch.param_count()).map(|i| (i as f64).sin()).collect();
        opt.apply_update(&mut net, &g).unwrap();
        (net, opt, tempfile::tempdir().unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (net, opt, dir) = sample();
        let path = dir.path().join("a.ckpt");
        save_checkpoint(&net, &opt, &path).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.network, net);
        assert_eq!(ck.optimizer, opt);
        let s = [0.2, 0.4, 0.1, 0.9, 0.5, 0.5];
        assert_eq!(
            ck.network.forward(&s, &s).to_bits(),
            net.forward(&s, &s).to_bits()
        );
    }

    #[test]
    fn truncated_file_rejected() {
        let (net, opt, dir) = sample();
        let path = dir.path().join("t.ckpt");
        save_checkpoint(&net, &opt, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
        let mut flipped = bytes.clone();
        flipped[60] ^= 0x40;
        fs::write(&path, flipped).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn wrong_architecture_rejected() {
        let (net, opt, dir) = sample();
        let path = dir.path().join("w.ckpt");
        save_checkpoint(&net, &opt, &path).unwrap();
        let other = Architecture::new(6, 6, 8, [5, 3]).unwrap();
        let err = load_checkpoint_expecting(&path, &other).unwrap_err();
        assert!(err.to_string().contains("architecture mismatch"), "{err}");
    }

    #[test]
    fn wrong_version_rejected() {
        let (net, opt, dir) = sample();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&net, &opt, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 9;
        let n = bytes.len();
        let sum = fnv1a(&bytes[..n - 8]);
        bytes[n - 8..].copy_from_slice(&sum.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
