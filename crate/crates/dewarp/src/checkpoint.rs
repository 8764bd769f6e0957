//! Checkpoint container: a text header carrying the format version, a
//! config echo, free-form metadata, and a tensor directory, followed by a
//! raw payload of 32-bit little-endian row-major tensors. Serialization
//! is fully deterministic, so save -> load -> save reproduces the bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamMap;
use crate::tensor::Tensor;

const MAGIC: &str = "DEWARPCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub meta: BTreeMap<String, String>,
    pub tensors: ParamMap<f32>,
}

fn check_field(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace() || c == '\n') {
        return Err(Error::Checkpoint(format!(
            "{kind} {s:?} must be non-empty and free of whitespace"
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        config: BTreeMap<String, String>,
        meta: BTreeMap<String, String>,
        tensors: ParamMap<f32>,
    ) -> Self {
        Checkpoint { config, meta, tensors }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = format!("{MAGIC} {VERSION}\n");
        for (k, v) in &self.config {
            check_field("config key", k)?;
            check_field("config value", v)?;
            header.push_str(&format!("config {k}={v}\n"));
        }
        for (k, v) in &self.meta {
            check_field("meta key", k)?;
            check_field("meta value", v)?;
            header.push_str(&format!("meta {k}={v}\n"));
        }
        let mut payload: Vec<u8> = Vec::new();
        for (name, t) in self.tensors.iter() {
            check_field("tensor name", name)?;
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} holds non-finite values"
                )));
            }
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!(
                "tensor {name} {} {} {}\n",
                t.shape().len(),
                dims.join(" "),
                payload.len()
            ));
            for &v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        header.push_str("end\n");
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(header.as_bytes()).map_err(|e| Error::io(path, e))?;
        f.write_all(&payload).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        // the header is pure ASCII terminated by an "end" line
        let mut pos = 0usize;
        let mut next_line = |bytes: &[u8]| -> Result<(String, usize)> {
            let start = pos;
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            if pos == bytes.len() {
                return Err(Error::format(path, "header not terminated"));
            }
            let line = std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| Error::format(path, "non-utf8 header"))?
                .to_string();
            pos += 1;
            Ok((line, pos))
        };
        let (first, _) = next_line(&bytes)?;
        let mut parts = first.split(' ');
        if parts.next() != Some(MAGIC) {
            return Err(Error::format(path, format!("bad magic line {first:?}")));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, "missing version"))?;
        if version != VERSION {
            return Err(Error::format(path, format!("version {version}, expected {VERSION}")));
        }
        let mut config = BTreeMap::new();
        let mut meta = BTreeMap::new();
        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
        }
        let mut dir: Vec<Entry> = Vec::new();
        let payload_start;
        loop {
            let (line, after) = next_line(&bytes)?;
            if line == "end" {
                payload_start = after;
                break;
            }
            let Some((kind, rest)) = line.split_once(' ') else {
                return Err(Error::format(path, format!("bad header line {line:?}")));
            };
            match kind {
                "config" | "meta" => {
                    let Some((k, v)) = rest.split_once('=') else {
                        return Err(Error::format(path, format!("bad {kind} line {line:?}")));
                    };
                    let target = if kind == "config" { &mut config } else { &mut meta };
                    if target.insert(k.to_string(), v.to_string()).is_some() {
                        return Err(Error::format(path, format!("duplicate {kind} key {k}")));
                    }
                }
                "tensor" => {
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() < 3 {
                        return Err(Error::format(path, format!("bad tensor line {line:?}")));
                    }
                    let name = fields[0].to_string();
                    let ndim: usize = fields[1]
                        .parse()
                        .map_err(|_| Error::format(path, "bad tensor rank"))?;
                    if fields.len() != 3 + ndim {
                        return Err(Error::format(path, format!("bad tensor line {line:?}")));
                    }
                    let shape: Vec<usize> = fields[2..2 + ndim]
                        .iter()
                        .map(|d| d.parse().map_err(|_| Error::format(path, "bad tensor dim")))
                        .collect::<Result<_>>()?;
                    let offset: usize = fields[2 + ndim]
                        .parse()
                        .map_err(|_| Error::format(path, "bad tensor offset"))?;
                    dir.push(Entry { name, shape, offset });
                }
                other => {
                    return Err(Error::format(path, format!("unknown header entry {other:?}")));
                }
            }
        }
        let payload = &bytes[payload_start..];
        // the directory must tile the payload without gaps or overlap
        let mut expected_offset = 0usize;
        let mut tensors = ParamMap::new();
        for e in &dir {
            if e.offset != expected_offset {
                return Err(Error::format(
                    path,
                    format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset),
                ));
            }
            let count: usize = e.shape.iter().product();
            let nbytes = count * 4;
            if e.offset + nbytes > payload.len() {
                return Err(Error::format(
                    path,
                    format!("tensor {} overruns the payload", e.name),
                ));
            }
            let data: Vec<f32> = payload[e.offset..e.offset + nbytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
            expected_offset += nbytes;
        }
        if expected_offset != payload.len() {
            return Err(Error::format(
                path,
                format!("payload holds {} bytes, directory covers {expected_offset}", payload.len()),
            ));
        }
        Ok(Checkpoint { config, meta, tensors })
    }
}

const OPT_STEP_KEY: &str = "opt_step";

/// Packs model parameters and (optionally) optimizer state into one
/// checkpoint. Model tensors keep their names; moments get `opt.m.` and
/// `opt.v.` prefixes; the step count rides in the metadata.
pub fn pack_state(
    config: BTreeMap<String, String>,
    params: &ParamMap<f32>,
    opt: Option<&Adam<f32>>,
) -> Result<Checkpoint> {
    let mut tensors = ParamMap::new();
    for (name, t) in params.iter() {
        tensors.insert(name.clone(), t.clone())?;
    }
    let mut meta = BTreeMap::new();
    if let Some(adam) = opt {
        let (m, v) = adam.moments();
        for (name, t) in m {
            tensors.insert(format!("opt.m.{name}"), t.clone())?;
        }
        for (name, t) in v {
            tensors.insert(format!("opt.v.{name}"), t.clone())?;
        }
        meta.insert(OPT_STEP_KEY.into(), adam.step_count().to_string());
    }
    Ok(Checkpoint::new(config, meta, tensors))
}

/// The model parameters stored in a checkpoint (everything outside the
/// `opt.` namespace).
pub fn unpack_params(ckpt: &Checkpoint) -> Result<ParamMap<f32>> {
    let mut params = ParamMap::new();
    for (name, t) in ckpt.tensors.iter() {
        if !name.starts_with("opt.") {
            params.insert(name.clone(), t.clone())?;
        }
    }
    if params.is_empty() {
        return Err(Error::Checkpoint("checkpoint holds no model tensors".into()));
    }
    Ok(params)
}

/// Rebuilds the optimizer recorded in a checkpoint, or None when the
/// checkpoint was saved without one.
pub fn unpack_optimizer(ckpt: &Checkpoint) -> Result<Option<Adam<f32>>> {
    let Some(step) = ckpt.meta.get(OPT_STEP_KEY) else {
        return Ok(None);
    };
    let step: u64 = step
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad {OPT_STEP_KEY} value")))?;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for (name, t) in ckpt.tensors.iter() {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.insert(rest.to_string(), t.clone());
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.insert(rest.to_string(), t.clone());
        }
    }
    Ok(Some(Adam::restore(step, m, v)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dewarp-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn sample_params() -> ParamMap<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamMap::new();
        p.insert("b.w", Tensor::trunc_normal(&[4, 3], 0.5, &mut rng)).unwrap();
        p.insert("a.bias", Tensor::trunc_normal(&[7], 0.5, &mut rng)).unwrap();
        p.insert("z", Tensor::scalar(2.5)).unwrap();
        p
    }

    #[test]
    fn save_load_save_is_byte_idempotent() {
        let mut config = BTreeMap::new();
        config.insert("dim".to_string(), "128".to_string());
        let ckpt = Checkpoint::new(config, BTreeMap::new(), sample_params());
        let p = tmp("idem.ckpt");
        ckpt.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        loaded.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
        assert_eq!(loaded.config.get("dim").unwrap(), "128");
        for (name, t) in sample_params().iter() {
            let back = loaded.tensors.get(name).unwrap();
            assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let params = sample_params();
        let mut opt: Adam<f32> = Adam::new();
        let grads: BTreeMap<String, Tensor<f32>> = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::full(t.shape(), 0.1f32)))
            .collect();
        let mut moving = params.clone();
        opt.step(&mut moving, &grads, 1e-2).unwrap();
        opt.step(&mut moving, &grads, 1e-2).unwrap();
        let ckpt = pack_state(BTreeMap::new(), &moving, Some(&opt)).unwrap();
        let p = tmp("opt.ckpt");
        ckpt.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        let restored = unpack_optimizer(&loaded).unwrap().unwrap();
        assert_eq!(restored.step_count(), 2);
        let back = unpack_params(&loaded).unwrap();
        assert_eq!(back.len(), moving.len());
        // a further identical step on both optimizers stays identical
        let mut a = moving.clone();
        let mut b = back.clone();
        let mut opt2 = restored;
        opt.step(&mut a, &grads, 1e-2).unwrap();
        opt2.step(&mut b, &grads, 1e-2).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{name}");
        }
    }

    #[test]
    fn checkpoint_without_optimizer_unpacks_none() {
        let ckpt = pack_state(BTreeMap::new(), &sample_params(), None).unwrap();
        let p = tmp("noopt.ckpt");
        ckpt.save(&p).unwrap();
        let loaded = Checkpoint::load(&p).unwrap();
        assert!(unpack_optimizer(&loaded).unwrap().is_none());
    }

    #[test]
    fn corrupted_directories_are_rejected() {
        let ckpt = Checkpoint::new(BTreeMap::new(), BTreeMap::new(), sample_params());
        let p = tmp("corrupt.ckpt");
        ckpt.save(&p).unwrap();
        let good = std::fs::read(&p).unwrap();
        // truncate payload
        std::fs::write(&p, &good[..good.len() - 2]).unwrap();
        assert!(Checkpoint::load(&p).is_err());
        // wrong magic
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(Checkpoint::load(&p).is_err());
        // tamper an offset in the directory
        let text_end = good.windows(4).position(|w| w == b"end\n").unwrap();
        let header = String::from_utf8_lossy(&good[..text_end]).to_string();
        let tampered = header.replacen("tensor b.w 2 4 3 28", "tensor b.w 2 4 3 32", 1);
        if tampered != header {
            let mut bytes = tampered.into_bytes();
            bytes.extend_from_slice(&good[text_end..]);
            std::fs::write(&p, bytes).unwrap();
            assert!(Checkpoint::load(&p).is_err());
        }
    }

    #[test]
    fn non_finite_tensors_refuse_to_save() {
        let mut params = ParamMap::new();
        params.insert("bad", Tensor::full(&[2], f32::NAN)).unwrap();
        let ckpt = Checkpoint::new(BTreeMap::new(), BTreeMap::new(), params);
        assert!(ckpt.save(&tmp("nan.ckpt")).is_err());
    }
}
