//! Checkpoint container.
//!
//! ```text
//! defattn-checkpoint
//! version = 1
//! [spec]
//! <NetworkSpec key = value lines>
//! [meta]
//! <free-form key = value lines>
//! params = <count>
//! extra = <count>
//! end
//! ```
//!
//! followed by `params + extra` records, each: `u32` name length, UTF-8
//! name, `u32` rank, `u64` extents, then the `f64` values, all little
//! endian. Parameters come first in store order, then extra tensors
//! (optimizer state).

use std::collections::BTreeMap;
use std::path::Path;

use super::network::Network;
use super::params::ParamStore;
use super::spec::NetworkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "defattn-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub meta: BTreeMap<String, String>,
    pub extra: ParamStore,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Checkpoint {
            network,
            meta: BTreeMap::new(),
            extra: ParamStore::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\nversion = {VERSION}\n[spec]\n");
        head += &self.network.spec.to_kv();
        head += "[meta]\n";
        for (k, v) in &self.meta {
            head += &format!("{k} = {}\n", v.replace('\n', " "));
        }
        head += &format!(
            "params = {}\nextra = {}\nend\n",
            self.network.params.len(),
            self.extra.len()
        );
        let mut out = head.into_bytes();
        for (name, t) in self.network.params.iter().chain(self.extra.iter()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.line()?;
        if magic != MAGIC {
            return Err(r.err(0, format!("bad magic `{magic}`")));
        }
        let version = r.line()?;
        if version != format!("version = {VERSION}") {
            return Err(r.err(r.pos, format!("unsupported `{version}`")));
        }
        if r.line()? != "[spec]" {
            return Err(r.err(r.pos, "expected [spec]"));
        }
        let mut spec_text = String::new();
        loop {
            let l = r.line()?;
            if l == "[meta]" {
                break;
            }
            spec_text += &l;
            spec_text.push('\n');
        }
        let spec = NetworkSpec::from_kv(&spec_text)?;
        let mut meta = BTreeMap::new();
        let (mut n_params, mut n_extra) = (None, None);
        loop {
            let at = r.pos;
            let l = r.line()?;
            if l == "end" {
                break;
            }
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| r.err(at, format!("malformed header line `{l}`")))?;
            let count = || {
                v.parse::<usize>().map_err(|_| Error::Parse {
                    offset: at,
                    msg: format!("bad count `{v}`"),
                })
            };
            match k {
                "params" => n_params = Some(count()?),
                "extra" => n_extra = Some(count()?),
                _ => {
                    meta.insert(k.to_string(), v.to_string());
                }
            }
        }
        let (n_params, n_extra) = match (n_params, n_extra) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(r.err(r.pos, "header lacks params/extra counts")),
        };
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let (name, t) = r.tensor()?;
            params.insert(name, t)?;
        }
        let mut extra = ParamStore::new();
        for _ in 0..n_extra {
            let (name, t) = r.tensor()?;
            extra.insert(name, t)?;
        }
        if r.pos != bytes.len() {
            return Err(r.err(r.pos, "trailing bytes after last tensor"));
        }
        // parameter names and shapes must be those the network spec would create
        let reference = Network::init(spec.clone(), 0)?;
        if reference.params.names() != params.names()
            || reference
                .params
                .tensors()
                .iter()
                .zip(params.tensors())
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("parameters do not match spec `{}`", spec.name),
            });
        }
        Ok(Checkpoint {
            network: Network { spec, params },
            meta,
            extra,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    fn line(&mut self) -> Result<String> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| self.err(self.pos, "unterminated header line"))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| self.err(self.pos, "header is not UTF-8"))?;
        self.pos += end + 1;
        Ok(s.to_string())
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(self.pos, format!("truncated: wanted {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let len = self.u32()? as usize;
        let raw = self.take(len)?.to_vec();
        let name = String::from_utf8(raw).map_err(|_| self.err(at, "tensor name is not UTF-8"))?;
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.err(at, format!("tensor `{name}` has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| self.err(self.pos, format!("truncated data for `{name}`")))?;
        let data = self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| self.err(at, e.to_string()))?;
        Ok((name, t))
    }
}
