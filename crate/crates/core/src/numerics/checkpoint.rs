//! Single-file checkpoint: a UTF-8 manifest followed by one little-endian f32
//! blob.
//!
//! ```text
//! reroof-checkpoint
//! format_version 1
//! meta <key> <value…>                      (zero or more)
//! adam_step <u64>
//! tensor <role> <name> <d0,d1,…> <byte_offset> <byte_length>   (in order)
//! blob_bytes <total>
//! end
//! <blob: exactly `total` bytes>
//! ```
//!
//! `role` is `value`, `adam_m` or `adam_v`. Every parameter contributes its
//! three tensors in that order, parameters in store order. Offsets are
//! relative to the first blob byte and entries are contiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::params::{Param, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "reroof-checkpoint";
const ROLES: [&str; 3] = ["value", "adam_m", "adam_v"];

/// A parameter store together with free-form manifest metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(store: ParamStore) -> Self {
        Checkpoint {
            meta: BTreeMap::new(),
            store,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::CheckpointFormat(format!("missing meta field `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut manifest = format!("{MAGIC}\nformat_version {FORMAT_VERSION}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::CheckpointFormat(format!("unencodable meta field `{k}`")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        manifest.push_str(&format!("adam_step {}\n", self.store.step()));
        let mut blob = Vec::with_capacity(self.store.num_values() * 12);
        for (name, p) in self.store.iter() {
            for (role, t) in ROLES.iter().zip([&p.value, &p.first_moment, &p.second_moment]) {
                let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
                let dims = if dims.is_empty() { "-".to_string() } else { dims.join(",") };
                let offset = blob.len();
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
                manifest.push_str(&format!(
                    "tensor {role} {name} {dims} {offset} {}\n",
                    blob.len() - offset
                ));
            }
        }
        manifest.push_str(&format!("blob_bytes {}\nend\n", blob.len()));
        let mut out = manifest.into_bytes();
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::CheckpointFormat(msg);
        let mut pos = 0;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("manifest ends before `end`".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("manifest is not UTF-8".into()))
        };

        if next_line()? != MAGIC {
            return Err(bad("missing checkpoint header".into()));
        }
        let version = next_line()?
            .strip_prefix("format_version ")
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad("missing format_version".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }

        let mut meta = BTreeMap::new();
        let mut step = None;
        let mut entries: Vec<(String, String, Vec<usize>, usize, usize)> = Vec::new();
        let blob_bytes = loop {
            let line = next_line()?;
            let mut parts = line.splitn(2, ' ');
            let (key, rest) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            match key {
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    meta.insert(k.to_string(), v.to_string());
                }
                "adam_step" => {
                    step = Some(rest.parse::<u64>().map_err(|_| bad(format!("bad adam_step `{rest}`")))?)
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let [role, name, dims, offset, len] = f[..] else {
                        return Err(bad(format!("bad tensor entry `{line}`")));
                    };
                    let shape = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|_| bad(format!("bad shape in `{line}`")))?
                    };
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in `{line}`")));
                    entries.push((role.into(), name.into(), shape, parse(offset)?, parse(len)?));
                }
                "blob_bytes" => {
                    let n = rest.parse::<usize>().map_err(|_| bad(format!("bad blob_bytes `{rest}`")))?;
                    if next_line()? != "end" {
                        return Err(bad("expected `end` after blob_bytes".into()));
                    }
                    break n;
                }
                other => return Err(bad(format!("unknown manifest line `{other}`"))),
            }
        };
        let blob = &bytes[pos..];
        if blob.len() < blob_bytes {
            return Err(Error::CheckpointTruncated {
                expected: blob_bytes,
                found: blob.len(),
            });
        }
        if blob.len() > blob_bytes {
            return Err(bad(format!(
                "{} trailing bytes after the declared blob",
                blob.len() - blob_bytes
            )));
        }

        let mut expected_offset = 0;
        let mut tensors = Vec::with_capacity(entries.len());
        for (i, (role, name, shape, offset, len)) in entries.into_iter().enumerate() {
            if role != ROLES[i % 3] {
                return Err(bad(format!("entry {i} for `{name}` has role `{role}`, expected `{}`", ROLES[i % 3])));
            }
            let numel: usize = shape.iter().product();
            if offset != expected_offset || len != numel * 4 {
                return Err(bad(format!(
                    "entry `{role} {name}` at {offset}+{len} disagrees with shape {shape:?} at offset {expected_offset}"
                )));
            }
            expected_offset += len;
            if expected_offset > blob_bytes {
                return Err(bad(format!("entry `{role} {name}` runs past the blob")));
            }
            let data = blob[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if expected_offset != blob_bytes {
            return Err(bad(format!(
                "manifest covers {expected_offset} bytes but blob_bytes is {blob_bytes}"
            )));
        }

        let mut store = ParamStore::new();
        let mut it = tensors.into_iter();
        while let (Some((name, value)), Some((n_m, m)), Some((n_v, v))) = (it.next(), it.next(), it.next()) {
            if n_m != name || n_v != name {
                return Err(bad(format!("optimizer state for `{name}` is not contiguous")));
            }
            store.insert_with_state(
                &name,
                Param {
                    value,
                    grad: None,
                    first_moment: m,
                    second_moment: v,
                },
            )?;
        }
        store.set_step(step.ok_or_else(|| bad("missing adam_step".into()))?);
        Ok(Checkpoint { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes `store` (values and optimizer state) with no extra metadata.
pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    Checkpoint::new(store.clone()).save(path)
}

pub fn load_params(path: &Path) -> Result<ParamStore> {
    Checkpoint::load(path).map(|c| c.store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_round_trips() {
        let c = Checkpoint::new(ParamStore::new());
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn two_by_two_tensor_has_sixteen_payload_bytes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2, 2], vec![1.0, -0.0, 2.5, 3.0]).unwrap())
            .unwrap();
        let text = String::from_utf8_lossy(&Checkpoint::new(s).to_bytes().unwrap()).into_owned();
        assert!(text.contains("tensor value w 2,2 0 16\n"), "{text}");
        assert!(text.contains("blob_bytes 48\n"));
    }

    #[test]
    fn negative_zero_survives() {
        let mut s = ParamStore::new();
        s.insert("z", Tensor::new(vec![2], vec![-0.0, 0.0]).unwrap()).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::new(s).to_bytes().unwrap()).unwrap();
        let bits: Vec<u32> = back.store.value("z").unwrap().data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, vec![(-0.0f32).to_bits(), 0]);
    }

    fn edit_manifest(bytes: &[u8], from: &str, to: &str) -> Vec<u8> {
        let end = bytes.windows(4).position(|w| w == b"end\n").unwrap() + 4;
        let header = std::str::from_utf8(&bytes[..end]).unwrap().replace(from, to);
        [header.as_bytes(), &bytes[end..]].concat()
    }

    fn sample_bytes() -> Vec<u8> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(&[3], 1.0)).unwrap();
        Checkpoint::new(s).with_meta("model_kind", "vae").to_bytes().unwrap()
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = edit_manifest(&sample_bytes(), "format_version 1", "format_version 2");
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncated_blob_is_reported() {
        let bytes = sample_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::CheckpointTruncated { expected: 36, found: 33 })
        ));
    }

    #[test]
    fn manifest_blob_disagreement_is_reported() {
        let bytes = edit_manifest(&sample_bytes(), "tensor value a 3 0 12", "tensor value a 3 0 8");
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn meta_is_preserved() {
        let c = Checkpoint::from_bytes(&sample_bytes()).unwrap();
        assert_eq!(c.meta("model_kind").unwrap(), "vae");
        assert!(c.meta("missing").is_err());
    }
}
