//! Checkpoint container: a text manifest plus one raw little-endian `f32` file per
//! tensor. Manifest lines read `name<TAB>f32<TAB>d0,d1,..<TAB>filename`; optimizer
//! moments follow an `[optimizer]` line together with the step counter.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::diffcore::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::optim::Adam;

pub const MANIFEST: &str = "manifest.tsv";
pub const CONFIG: &str = "config.txt";
const OPTIMIZER_SECTION: &str = "[optimizer]";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Tensor<f32>>,
    pub optimizer: Option<OptimizerState>,
    /// `key = value` text of the run configuration.
    pub config: Option<String>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint(format!("{}: {}", path.display(), reason.into()))
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("{safe}.f32")
}

fn tensor_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn manifest_line(out: &mut String, name: &str, t: &Tensor<f32>) -> String {
    let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
    let file = file_name(name);
    let _ = writeln!(out, "{name}\tf32\t{}\t{file}", dims.join(","));
    file
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, optimizer: Option<&Adam>, config: Option<String>) -> Self {
        Self {
            params: store.iter().map(|(n, p)| (n.to_string(), p.value.clone())).collect(),
            optimizer: optimizer.map(|o| OptimizerState {
                step: o.step,
                m: o.m.clone(),
                v: o.v.clone(),
            }),
            config,
        }
    }

    /// Writes into `dir`, replacing any previous checkpoint there.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("partial");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut manifest = String::new();
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for (name, t) in &self.params {
            let f = manifest_line(&mut manifest, name, t);
            files.push((f, tensor_bytes(t)));
        }
        if let Some(opt) = &self.optimizer {
            let _ = writeln!(manifest, "{OPTIMIZER_SECTION}");
            let _ = writeln!(manifest, "step\t{}", opt.step);
            for (prefix, moments) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
                for (name, t) in moments {
                    let full = format!("{prefix}{name}");
                    let f = manifest_line(&mut manifest, &full, t);
                    files.push((f, tensor_bytes(t)));
                }
            }
        }
        files.push((MANIFEST.to_string(), manifest.into_bytes()));
        if let Some(cfg) = &self.config {
            files.push((CONFIG.to_string(), cfg.clone().into_bytes()));
        }
        for (name, bytes) in files {
            let p = tmp.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut ck = Checkpoint::default();
        let mut in_opt = false;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            if line == OPTIMIZER_SECTION {
                in_opt = true;
                ck.optimizer = Some(OptimizerState::default());
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if in_opt && parts.len() == 2 && parts[0] == "step" {
                let step = parts[1].parse().map_err(|_| ck_err(&mpath, format!("line {}: bad step", i + 1)))?;
                ck.optimizer.as_mut().expect("section opened").step = step;
                continue;
            }
            if parts.len() != 4 || parts[1] != "f32" {
                return Err(ck_err(&mpath, format!("line {}: expected name<TAB>f32<TAB>dims<TAB>file", i + 1)));
            }
            let dims = parts[2]
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| ck_err(&mpath, format!("line {}: bad dims {:?}", i + 1, parts[2])))?;
            let fpath: PathBuf = dir.join(parts[3]);
            let bytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
            if bytes.len() % 4 != 0 {
                return Err(ck_err(&fpath, "length is not a multiple of 4"));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::from_vec(&dims, data).map_err(|e| ck_err(&fpath, e.to_string()))?;
            let name = parts[0].to_string();
            if in_opt {
                let opt = ck.optimizer.as_mut().expect("section opened");
                if let Some(n) = name.strip_prefix("adam.m.") {
                    opt.m.insert(n.to_string(), t);
                } else if let Some(n) = name.strip_prefix("adam.v.") {
                    opt.v.insert(n.to_string(), t);
                } else {
                    return Err(ck_err(&mpath, format!("unknown optimizer entry {name}")));
                }
            } else if ck.params.insert(name.clone(), t).is_some() {
                return Err(ck_err(&mpath, format!("duplicate parameter {name}")));
            }
        }
        let cpath = dir.join(CONFIG);
        if cpath.exists() {
            ck.config = Some(fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?);
        }
        Ok(ck)
    }

    /// Copies every stored tensor into `store`, which must contain exactly the same names
    /// and shapes.
    pub fn restore_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for name in self.params.keys() {
            if !store.contains(name) {
                return Err(Error::Checkpoint(format!("checkpoint has unknown parameter '{name}'")));
            }
        }
        let missing: Vec<&str> = store.names().filter(|n| !self.params.contains_key(*n)).collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint lacks {} parameters (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        for (name, t) in &self.params {
            store.set(name, t.clone())?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut Adam, store: &ParamStore<f32>) -> Result<()> {
        let Some(state) = &self.optimizer else {
            return Ok(());
        };
        for name in state.m.keys().chain(state.v.keys()) {
            if !store.is_trainable(name) {
                return Err(Error::Checkpoint(format!("optimizer state for unknown or frozen parameter '{name}'")));
            }
        }
        opt.step = state.step;
        opt.m = state.m.clone();
        opt.v = state.v.clone();
        Ok(())
    }
}
