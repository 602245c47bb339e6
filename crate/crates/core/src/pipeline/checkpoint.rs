//! Little-endian binary checkpoints.
//!
//! Layout: magic, version (u32), config text (u64 length + UTF-8), step and
//! epoch (u64), optimizer header, then named records of
//! `(name length u32, name, dtype u8, rank u32, dims u64 * rank, f64 payload)`.
//! Parameters are stored as `param/<name>`, Adam moments as
//! `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::head::Detector;
use crate::numerics::{seeded, ParamStore, Tensor};
use crate::pipeline::config::RunConfig;
use crate::pipeline::optim::Adam;

pub const MAGIC: &[u8; 8] = b"DCAPSCKP";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} does not fit in memory")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(DTYPE_F64);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = self.config.render();
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        match &self.optimizer {
            Some(adam) => {
                out.push(1);
                for v in [adam.beta1, adam.beta2, adam.epsilon] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&adam.step.to_le_bytes());
            }
            None => out.push(0),
        }
        let moments = if self.optimizer.is_some() { 3 } else { 1 };
        out.extend_from_slice(&((self.params.len() * moments) as u32).to_le_bytes());
        for p in self.params.iter() {
            put_record(&mut out, &format!("param/{}", p.name), p.value.shape(), p.value.data());
        }
        if let Some(adam) = &self.optimizer {
            for (p, (m, v)) in self.params.iter().zip(adam.m.iter().zip(&adam.v)) {
                put_record(&mut out, &format!("adam.m/{}", p.name), p.value.shape(), m);
                put_record(&mut out, &format!("adam.v/{}", p.name), p.value.shape(), v);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let n = r.len()?;
        let config = RunConfig::parse(&r.string(n)?)?;
        let step = r.u64()?;
        let epoch = r.u64()?;
        let mut optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?);
                Some(Adam {
                    beta1,
                    beta2,
                    epsilon,
                    step: r.u64()?,
                    m: Vec::new(),
                    v: Vec::new(),
                })
            }
            t => return Err(Error::Checkpoint(format!("bad optimizer tag {t}"))),
        };
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            if let Some(pname) = name.strip_prefix("param/") {
                params.add(pname, Tensor::new(&shape, data)?)?;
            } else if let Some(pname) = name.strip_prefix("adam.m/").or_else(|| name.strip_prefix("adam.v/")) {
                let adam = optimizer
                    .as_mut()
                    .ok_or_else(|| Error::Checkpoint(format!("{name} present without optimizer state")))?;
                let expected = params.id(pname).map(|id| params.get(id).value.len());
                if expected != Some(len) {
                    return Err(Error::Checkpoint(format!("{name} does not match a stored parameter")));
                }
                if name.starts_with("adam.m/") {
                    adam.m.push(data);
                } else {
                    adam.v.push(data);
                }
            } else {
                return Err(Error::Checkpoint(format!("unknown record {name:?}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if let Some(adam) = &optimizer {
            if adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
            }
        }
        Ok(Checkpoint {
            config,
            step,
            epoch,
            params,
            optimizer,
        })
    }

    /// Writes to a sibling temporary file and renames it into place, so an
    /// interrupted save never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// A detector built from the stored configuration and parameters.
    pub fn detector(&self) -> Result<Detector> {
        let mut det = Detector::new(self.config.effective_head(), &mut seeded(0))?;
        det.load_params(&self.params)?;
        Ok(det)
    }
}
