//! Binary checkpoint container.
//!
//! Layout, all little-endian: magic `PKDC`, u32 version (1), then a fixed
//! header block of seven u32 fields — role tag (0 student, 1 teacher,
//! 2 anticipation baseline), layers, past extent, k (teacher future taps, or
//! the anticipation horizon), channels, input dim, class count — then a u32
//! tensor count followed by each tensor as u16 name length, UTF-8 name, u8
//! rank, u32 dims, and f32 values. Tensors are written in sorted name order
//! and values quantized to f32, so save → load → save is byte-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, ParamSet, Role};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PKDC";
pub const VERSION: u32 = 1;

pub const ROLE_TAG_STUDENT: u32 = 0;
pub const ROLE_TAG_TEACHER: u32 = 1;
pub const ROLE_TAG_ANTICIPATION: u32 = 2;

/// Header + tensors exactly as stored on disk.
pub struct RawCheckpoint {
    pub role_tag: u32,
    pub layers: u32,
    pub past_extent: u32,
    pub k: u32,
    pub channels: u32,
    pub input_dim: u32,
    pub num_classes: u32,
    pub tensors: Vec<(String, Tensor)>,
}

impl RawCheckpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [
            self.role_tag,
            self.layers,
            self.past_extent,
            self.k,
            self.channels,
            self.input_dim,
            self.num_classes,
            self.tensors.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<RawCheckpoint> {
        let mut r = Reader::new(bytes, "PKDC");
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(fmt_err("header", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err("header", &format!("unsupported version {version}")));
        }
        let role_tag = r.u32()?;
        let layers = r.u32()?;
        let past_extent = r.u32()?;
        let k = r.u32()?;
        let channels = r.u32()?;
        let input_dim = r.u32()?;
        let num_classes = r.u32()?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| fmt_err("tensor name", "invalid UTF-8"))?;
            let rank = r.u8()? as usize;
            if rank == 0 || rank > 3 {
                return Err(fmt_err(&name, &format!("invalid rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(f64::from(r.f32()?));
            }
            tensors.push((name, Tensor::from_vec(&dims, data)?));
        }
        if !r.done() {
            return Err(fmt_err("trailer", "unexpected trailing bytes"));
        }
        Ok(RawCheckpoint {
            role_tag,
            layers,
            past_extent,
            k,
            channels,
            input_dim,
            num_classes,
            tensors,
        })
    }
}

fn fmt_err(what: &str, msg: &str) -> Error {
    Error::Format {
        format: "PKDC",
        what: what.to_string(),
        msg: msg.to_string(),
    }
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], format: &'static str) -> Reader<'a> {
        Reader { bytes, pos: 0, format }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                format: self.format,
                what: format!("offset {}", self.pos),
                msg: "truncated".to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// A student or teacher model ready to run. The anticipation baseline has
/// its own wrapper in [`crate::anticipate`] sharing the same container.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, mut params: ParamSet) -> Checkpoint {
        // Checkpoints always hold f32-representable values, whether or not
        // they have touched disk yet.
        params.quantize_f32();
        Checkpoint { spec, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (role_tag, k) = match self.spec.role {
            Role::Student => (ROLE_TAG_STUDENT, 0),
            Role::Teacher(k) => (ROLE_TAG_TEACHER, k),
        };
        RawCheckpoint {
            role_tag,
            layers: self.spec.layers as u32,
            past_extent: self.spec.past_extent as u32,
            k,
            channels: self.spec.channels as u32,
            input_dim: self.spec.input_dim as u32,
            num_classes: self.spec.num_classes as u32,
            tensors: self
                .params
                .iter()
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
        .to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let raw = RawCheckpoint::from_bytes(bytes)?;
        Checkpoint::from_raw(raw)
    }

    pub fn from_raw(raw: RawCheckpoint) -> Result<Checkpoint> {
        let role = match raw.role_tag {
            ROLE_TAG_STUDENT => Role::Student,
            ROLE_TAG_TEACHER => Role::Teacher(raw.k),
            other => {
                return Err(Error::Role {
                    expected: "student or teacher checkpoint".into(),
                    got: format!("role tag {other}"),
                })
            }
        };
        let mut params = ParamSet::new();
        for (name, t) in raw.tensors {
            params.insert(&name, t);
        }
        // Auxiliary width is recoverable from the stored shapes.
        let aux_channels = params
            .get("layer1.aux.weight")
            .map(|t| t.dims()[0])
            .unwrap_or(raw.channels as usize);
        let spec = ModelSpec {
            role,
            layers: raw.layers as usize,
            past_extent: raw.past_extent as usize,
            channels: raw.channels as usize,
            aux_channels,
            input_dim: raw.input_dim as usize,
            num_classes: raw.num_classes as usize,
        };
        spec.validate()?;
        Ok(Checkpoint { spec, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    #[test]
    fn roundtrip_is_bit_exact() {
        let spec = ModelSpec::student(8, 3);
        let ckpt = Checkpoint::new(spec, init_params(&spec, 42).unwrap());
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.spec, spec);
        assert_eq!(loaded.params.digest(), ckpt.params.digest());
    }

    #[test]
    fn teacher_roundtrip_keeps_role() {
        let spec = ModelSpec::teacher(3, 8, 4);
        let ckpt = Checkpoint::new(spec, init_params(&spec, 1).unwrap());
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(loaded.spec.role, Role::Teacher(3));
        assert_eq!(loaded.spec.future_extent(), 6);
    }

    #[test]
    fn truncated_and_corrupt_inputs_are_rejected() {
        let spec = ModelSpec::student(4, 2);
        let ckpt = Checkpoint::new(spec, init_params(&spec, 7).unwrap());
        let bytes = ckpt.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn aux_width_recovered_from_shapes() {
        let spec = ModelSpec {
            aux_channels: 8,
            ..ModelSpec::student(6, 3)
        };
        let ckpt = Checkpoint::new(spec, init_params(&spec, 9).unwrap());
        let loaded = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(loaded.spec.aux_channels, 8);
    }
}
