//! Little-endian binary container shared by checkpoints and dataset files.
//!
//! ```text
//! magic        8 bytes  "METACON\0"
//! version      u32      FORMAT_VERSION
//! kind         u32      1 = checkpoint, 2 = dataset
//! n_meta       u32
//!   key        str      (u32 byte length + UTF-8)
//!   value      str
//! n_arrays     u32
//!   name       str
//!   dtype      u8       0 = f64, 1 = u64
//!   flags      u8       bit 0: trainable
//!   ndim       u32
//!   dims       u64 x ndim
//!   values     8 bytes x product(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamSet;
use crate::config::TrainConfig;
use crate::data::{DomainDataset, GeneratorSpec};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"METACON\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainerKind {
    Checkpoint = 1,
    Dataset = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: ContainerKind,
    pub meta: Vec<(String, String)>,
    pub arrays: Vec<NamedArray>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
    }
}

impl Container {
    pub fn new(kind: ContainerKind) -> Self {
        Container {
            kind,
            meta: Vec::new(),
            arrays: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Format(format!("missing metadata key {key:?}")))
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array {name:?}")))
    }

    pub fn push_tensor<F: Scalar>(&mut self, name: &str, t: &Tensor<F>, trainable: bool) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            trainable,
            data: ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        });
    }

    pub fn push_ids(&mut self, name: &str, ids: &[usize]) {
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: vec![ids.len()],
            trainable: false,
            data: ArrayData::U64(ids.iter().map(|&i| i as u64).collect()),
        });
    }

    pub fn tensor<F: Scalar>(&self, name: &str) -> Result<Tensor<F>> {
        let a = self.array(name)?;
        match &a.data {
            ArrayData::F64(v) => Tensor::new(a.shape.clone(), v.iter().map(|&x| F::of(x)).collect()),
            ArrayData::U64(_) => Err(Error::Format(format!("array {name:?} is not f64"))),
        }
    }

    pub fn ids(&self, name: &str) -> Result<Vec<usize>> {
        match &self.array(name)?.data {
            ArrayData::U64(v) => Ok(v.iter().map(|&x| x as usize).collect()),
            ArrayData::F64(_) => Err(Error::Format(format!("array {name:?} is not u64"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend((self.kind as u32).to_le_bytes());
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            put_str(&mut out, &a.name);
            out.push(match a.data {
                ArrayData::F64(_) => 0,
                ArrayData::U64(_) => 1,
            });
            out.push(u8::from(a.trainable));
            out.extend((a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend((d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
                ArrayData::U64(v) => v.iter().for_each(|x| out.extend(x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let kind = match r.u32()? {
            1 => ContainerKind::Checkpoint,
            2 => ContainerKind::Dataset,
            k => return Err(Error::Format(format!("unknown container kind {k}"))),
        };
        let mut c = Container::new(kind);
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            c.meta.push((k, v));
        }
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let dtype = r.u8()?;
            let flags = r.u8()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?)?;
            let words = raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()));
            let data = match dtype {
                0 => ArrayData::F64(words.map(f64::from_bits).collect()),
                1 => ArrayData::U64(words.collect()),
                d => return Err(Error::Format(format!("unknown dtype {d} for {name:?}"))),
            };
            c.arrays.push(NamedArray {
                name,
                shape,
                trainable: flags & 1 == 1,
                data,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

const PARAM_PREFIX: &str = "param/";
const ADAM_M_PREFIX: &str = "adam.m/";
const ADAM_V_PREFIX: &str = "adam.v/";

/// Saved training state: parameters, outer-optimizer state and the config
/// that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub format_version: u32,
    pub config_hash: String,
    /// Number of completed iterations.
    pub iteration: usize,
    pub config_toml: String,
    pub params: ParamSet<F>,
    pub optimizer: Optimizer<F>,
}

impl<F: Scalar> Checkpoint<F> {
    pub fn new(config: &TrainConfig, iteration: usize, params: ParamSet<F>, optimizer: Optimizer<F>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash: config.hash(),
            iteration,
            config_toml: config.to_toml(),
            params,
            optimizer,
        }
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::from_toml(&self.config_toml)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContainerKind::Checkpoint);
        c.meta = vec![
            ("config_hash".into(), self.config_hash.clone()),
            ("iteration".into(), self.iteration.to_string()),
            ("optimizer_steps".into(), self.optimizer.steps.to_string()),
            ("config".into(), self.config_toml.clone()),
        ];
        for e in self.params.iter() {
            c.push_tensor(&format!("{PARAM_PREFIX}{}", e.name), &e.value, e.trainable);
        }
        for (prefix, moment) in [
            (ADAM_M_PREFIX, &self.optimizer.first_moment),
            (ADAM_V_PREFIX, &self.optimizer.second_moment),
        ] {
            if let Some(m) = moment {
                for e in m.iter() {
                    c.push_tensor(&format!("{prefix}{}", e.name), &e.value, e.trainable);
                }
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::Checkpoint {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let parse = |k: &str| -> Result<u64> {
            c.meta(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer in {k:?}")))
        };
        let config_toml = c.meta("config")?.to_string();
        let config = TrainConfig::from_toml(&config_toml)?;
        let collect = |prefix: &str| -> Result<ParamSet<F>> {
            let mut p = ParamSet::new();
            for a in c.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
                p.insert(&a.name[prefix.len()..], c.tensor(&a.name)?, a.trainable)?;
            }
            Ok(p)
        };
        let params = collect(PARAM_PREFIX)?;
        let m = collect(ADAM_M_PREFIX)?;
        let v = collect(ADAM_V_PREFIX)?;
        let mut optimizer = Optimizer::new(config.meta.outer);
        optimizer.steps = parse("optimizer_steps")?;
        if !m.is_empty() {
            m.check_congruent(&params)?;
            v.check_congruent(&params)?;
            optimizer.first_moment = Some(m);
            optimizer.second_moment = Some(v);
        }
        Ok(Checkpoint {
            format_version: FORMAT_VERSION,
            config_hash: c.meta("config_hash")?.to_string(),
            iteration: parse("iteration")? as usize,
            config_toml,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Fails unless the checkpoint was produced by a config with the same
    /// hash. `force` downgrades the mismatch to a warning.
    pub fn check_config(&self, config: &TrainConfig, force: bool) -> Result<()> {
        let expected = config.hash();
        if self.config_hash == expected {
            return Ok(());
        }
        if force {
            log::warn!("checkpoint config hash {} != {expected}; continuing", self.config_hash);
            Ok(())
        } else {
            Err(Error::Config(format!(
                "checkpoint was written with config hash {} but the current config hashes to {expected}",
                self.config_hash
            )))
        }
    }
}

pub fn dataset_to_container<F: Scalar>(ds: &DomainDataset<F>) -> Container {
    let mut c = Container::new(ContainerKind::Dataset);
    let spec = toml::to_string(&ds.spec).expect("generator spec is representable as TOML");
    c.meta.push(("generator".into(), spec));
    c.push_tensor("x", &ds.x, false);
    c.push_tensor("t", &ds.t, false);
    c.push_tensor("latents", &ds.latents, false);
    c.push_ids("domain_ids", &ds.domain_ids);
    c.push_ids("concept_ids", &ds.concept_ids);
    c
}

pub fn dataset_from_container<F: Scalar>(c: &Container) -> Result<DomainDataset<F>> {
    if c.kind != ContainerKind::Dataset {
        return Err(Error::Format("not a dataset file".into()));
    }
    let spec: GeneratorSpec = toml::from_str(c.meta("generator")?).map_err(|e| Error::Format(e.to_string()))?;
    let ds = DomainDataset {
        spec,
        x: c.tensor("x")?,
        t: c.tensor("t")?,
        latents: c.tensor("latents")?,
        domain_ids: c.ids("domain_ids")?,
        concept_ids: c.ids("concept_ids")?,
    };
    let n = ds.domain_ids.len();
    if ds.x.dims2().0 != n || ds.t.dims2().0 != n || ds.latents.dims2().0 != n || ds.concept_ids.len() != n {
        return Err(Error::Format("dataset arrays disagree on the row count".into()));
    }
    Ok(ds)
}

pub fn save_dataset<F: Scalar>(ds: &DomainDataset<F>, path: &Path) -> Result<()> {
    dataset_to_container(ds).save(path)
}

pub fn load_dataset<F: Scalar>(path: &Path) -> Result<DomainDataset<F>> {
    dataset_from_container(&Container::load(path)?)
}
