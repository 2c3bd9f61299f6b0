//! Binary checkpoints.
//!
//! Layout: magic `IAUNETCK`, `u32` version, `u64` header length, a JSON
//! header (model config, training step, entry names and shapes), then every
//! entry's values as little-endian `f64` in header order. Batch-norm running
//! statistics are stored as `<name>.running.mean` and `<name>.running.var`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Iaunet, ModelConfig};
use crate::tensor::RunningStats;

const MAGIC: &[u8; 8] = b"IAUNETCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub step: usize,
    pub entries: Vec<Entry>,
}

/// A decoded checkpoint: header plus one value vector per entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub values: Vec<Vec<f64>>,
}

const MEAN: &str = ".running.mean";
const VAR: &str = ".running.var";

impl Checkpoint {
    pub fn capture(model: &Iaunet, step: usize) -> Self {
        let mut entries = Vec::new();
        let mut values = Vec::new();
        for p in model.store.params() {
            entries.push(Entry { name: p.name.clone(), shape: p.shape() });
            values.push(p.tensor().data().to_vec());
        }
        for (name, s) in model.store.running_stats() {
            for (suffix, v) in [(MEAN, &s.mean), (VAR, &s.var)] {
                entries.push(Entry { name: format!("{name}{suffix}"), shape: vec![v.len()] });
                values.push(v.clone());
            }
        }
        Checkpoint { header: Header { config: model.cfg.clone(), step, entries }, values }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.values.iter().map(Vec::len).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.values.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("bad header: {e}")))?;
        let mut rest = &bytes[20 + hlen..];
        let mut values = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            let n: usize = e.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad(format!("truncated data at entry {}", e.name)));
            }
            let (chunk, tail) = rest.split_at(8 * n);
            values.push(chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect());
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        Ok(Checkpoint { header, values })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies every entry into `model`. All missing, unexpected and
    /// shape-mismatched entries are reported together.
    pub fn restore(&self, model: &Iaunet) -> Result<()> {
        let store = &model.store;
        let mut problems = Vec::new();
        let mut expected: Vec<Entry> = store.params().iter().map(|p| Entry { name: p.name.clone(), shape: p.shape() }).collect();
        for (name, s) in store.running_stats() {
            expected.push(Entry { name: format!("{name}{MEAN}"), shape: vec![s.mean.len()] });
            expected.push(Entry { name: format!("{name}{VAR}"), shape: vec![s.var.len()] });
        }
        for want in &expected {
            match self.header.entries.iter().find(|e| e.name == want.name) {
                None => problems.push(format!("{}: missing from checkpoint", want.name)),
                Some(e) if e.shape != want.shape => {
                    problems.push(format!("{}: checkpoint shape {:?}, model expects {:?}", want.name, e.shape, want.shape))
                }
                Some(_) => {}
            }
        }
        for e in &self.header.entries {
            if !expected.iter().any(|w| w.name == e.name) {
                problems.push(format!("{}: not a parameter of this model", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!("incompatible checkpoint:\n  {}", problems.join("\n  "))));
        }
        let value = |name: &str| -> Vec<f64> {
            let i = self.header.entries.iter().position(|e| e.name == name).expect("checked above");
            self.values[i].clone()
        };
        for id in store.ids() {
            store.set(id, value(store.name(id)))?;
        }
        let names: Vec<String> = store.running_stats().map(|(n, _)| n.to_owned()).collect();
        for name in names {
            let id = store.find_stats(&name).expect("listed stats");
            store.set_stats(id, RunningStats { mean: value(&format!("{name}{MEAN}")), var: value(&format!("{name}{VAR}")) });
        }
        Ok(())
    }

    /// Builds the model described by the header and loads the weights.
    pub fn into_model(&self) -> Result<Iaunet> {
        let model = Iaunet::new(self.header.config.clone(), 0)?;
        self.restore(&model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_everything() {
        let a = Iaunet::new(ModelConfig::tiny(), 1).unwrap();
        let id = a.store.find_stats(a.store.running_stats().next().unwrap().0).unwrap();
        a.store.set_stats(id, RunningStats { mean: vec![0.25; 8], var: vec![2.0; 8] });
        let ck = Checkpoint::capture(&a, 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let b = back.into_model().unwrap();
        assert_eq!(Checkpoint::capture(&b, 17), ck);
    }

    #[test]
    fn corrupt_bytes_rejected() {
        let ck = Checkpoint::capture(&Iaunet::new(ModelConfig::tiny(), 1).unwrap(), 0).to_bytes();
        assert!(Checkpoint::from_bytes(&ck[..ck.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPTxxxxxxxxxxxxxxxx").is_err());
        let mut extra = ck.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn mismatch_names_each_field() {
        let ck = Checkpoint::capture(&Iaunet::new(ModelConfig::tiny(), 1).unwrap(), 0);
        let other = Iaunet::new(ModelConfig { num_queries: 5, use_se: false, ..ModelConfig::tiny() }, 1).unwrap();
        let Err(Error::Checkpoint(msg)) = ck.restore(&other) else { panic!("expected mismatch") };
        assert!(msg.contains("queries.q: checkpoint shape [4, 16], model expects [5, 16]"), "{msg}");
        assert!(msg.contains("pixel_decoder.level1.se.reduce.weight: not a parameter"), "{msg}");
    }
}
