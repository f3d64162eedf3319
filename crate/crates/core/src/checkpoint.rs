//! Binary archive of named f32 tensors plus string metadata, written
//! atomically.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use di3cl_tensor::nn::ParamSet;
use di3cl_tensor::Tensor;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DI3CLCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    meta: BTreeMap<String, String>,
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl Archive {
    pub fn new(kind: &str) -> Self {
        let mut a = Self::default();
        a.set("kind", kind);
        a
    }

    pub fn kind(&self) -> &str {
        self.meta.get("kind").map_or("", String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(format!("missing entry {key}")))
    }

    pub fn parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| Error::Checkpoint(format!("entry {key} has unreadable value {raw:?}")))
    }

    pub fn put(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors.get(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Stores params and buffers under `prefix/param/` and `prefix/buffer/`,
    /// optionally only those whose name passes `keep`.
    pub fn put_params(&mut self, prefix: &str, ps: &ParamSet<f32>, keep: impl Fn(&str) -> bool) {
        for p in ps.params().iter().filter(|p| keep(&p.name)) {
            self.put(format!("{prefix}/param/{}", p.name), p.value.clone());
        }
        for b in ps.buffers().iter().filter(|b| keep(&b.name)) {
            self.put(format!("{prefix}/buffer/{}", b.name), b.value.clone());
        }
    }

    /// Overwrites every param and buffer of `ps` that passes `keep` from the
    /// archive. Returns how many tensors were copied.
    pub fn load_params(&self, prefix: &str, ps: &mut ParamSet<f32>, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        let mut copy = |kind: &str, name: &str, dst: &mut Tensor<f32>| -> Result<()> {
            let src = self.tensor(&format!("{prefix}/{kind}/{name}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
            n += 1;
            Ok(())
        };
        for p in ps.params_mut().iter_mut().filter(|p| keep(&p.name)) {
            copy("param", &p.name, &mut p.value)?;
        }
        for b in ps.buffers_mut().iter_mut().filter(|b| keep(&b.name)) {
            copy("buffer", &b.name, &mut b.value)?;
        }
        Ok(n)
    }

    /// Records what is needed to rebuild the encoder architecture.
    pub fn set_encoder(&mut self, cfg: &EncoderConfig) {
        self.set("encoder.preset", cfg.preset);
        self.set("encoder.cc_tap", cfg.cc_tap);
        self.set("encoder.head_hidden", cfg.head_hidden);
        self.set("encoder.head_out", cfg.head_out);
    }

    pub fn encoder(&self) -> Result<EncoderConfig> {
        let preset = self.get("encoder.preset")?.parse().map_err(|e| Error::Checkpoint(format!("{e}")))?;
        let cfg = EncoderConfig {
            preset,
            cc_tap: self.parse("encoder.cc_tap")?,
            head_hidden: self.parse("encoder.head_hidden")?,
            head_out: self.parse("encoder.head_out")?,
        };
        cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| self.encode(w))
    }

    fn encode(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.meta.len() as u64)?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_u64::<LittleEndian>(self.tensors.len() as u64)?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        Self::decode(&mut r).map_err(|e| match e.kind() {
            std::io::ErrorKind::InvalidData => bad(e.to_string()),
            _ => Error::io(path, e),
        })
    }

    fn decode(r: &mut impl Read) -> std::io::Result<Self> {
        let mut a = Self::default();
        for _ in 0..r.read_u64::<LittleEndian>()? {
            let k = read_str(r)?;
            a.meta.insert(k, read_str(r)?);
        }
        for _ in 0..r.read_u64::<LittleEndian>()? {
            let name = read_str(r)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            let t = Tensor::new(&shape, data).map_err(|e| invalid(e.to_string()))?;
            a.tensors.insert(name, t);
        }
        Ok(a)
    }
}

fn invalid(msg: String) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg)
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 24 {
        return Err(invalid(format!("string of {len} bytes")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| invalid(e.to_string()))
}

/// Writes through a sibling temp file and renames it into place.
pub(crate) fn write_atomic(
    path: &Path,
    body: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let run = || -> std::io::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, path)
    };
    run().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new("test");
        a.set("step", 42u64);
        a.put("w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, f32::MIN_POSITIVE, 0.0, 7.25]).unwrap());
        a.put("s", Tensor::scalar(0.5));
        a
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let a = sample();
        a.write(&path).unwrap();
        let b = Archive::read(&path).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.parse::<u64>("step").unwrap(), 42);
        assert_eq!(b.kind(), "test");
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn missing_entries_are_reported() {
        let a = sample();
        assert!(matches!(a.get("nope"), Err(Error::Checkpoint(_))));
        assert!(matches!(a.tensor("nope"), Err(Error::Checkpoint(_))));
        assert!(matches!(a.parse::<u64>("kind"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn foreign_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(matches!(Archive::read(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn params_round_trip_with_filter() {
        let mut ps = ParamSet::<f32>::new();
        ps.add_param("backbone.w", Tensor::full(&[2], 1.0));
        ps.add_param("head.w", Tensor::full(&[3], 2.0));
        ps.add_buffer("backbone.mean", Tensor::full(&[2], 3.0));
        let mut a = Archive::new("m");
        a.put_params("net", &ps, |n| n.starts_with("backbone."));
        assert_eq!(a.tensor_names().count(), 2);
        let mut other = ParamSet::<f32>::new();
        other.add_param("backbone.w", Tensor::zeros(&[2]));
        other.add_param("head.w", Tensor::zeros(&[3]));
        other.add_buffer("backbone.mean", Tensor::zeros(&[2]));
        assert_eq!(a.load_params("net", &mut other, |n| n.starts_with("backbone.")).unwrap(), 2);
        assert_eq!(other.params()[0].value.data(), &[1.0, 1.0]);
        assert_eq!(other.params()[1].value.data(), &[0.0; 3]);
        assert!(a.load_params("net", &mut other, |_| true).is_err());
    }

    #[test]
    fn encoder_meta_round_trip() {
        let mut a = Archive::new("m");
        let cfg = EncoderConfig { cc_tap: 2, ..EncoderConfig::new(crate::encoder::Preset::Micro) };
        a.set_encoder(&cfg);
        assert_eq!(a.encoder().unwrap(), cfg);
        a.set("encoder.preset", "vgg");
        assert!(matches!(a.encoder(), Err(Error::Checkpoint(_))));
    }
}
