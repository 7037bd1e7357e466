//! Named-tensor checkpoints: a tab-separated manifest and a binary blob.
//!
//! Manifest lines are `name<TAB>dtype<TAB>dim0,dim1,...<TAB>offset<TAB>length`
//! with byte offsets into the blob; the blob holds little-endian scalars in
//! row-major order. A trained model also carries its configuration in a
//! TOML file next to the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::models::{ModelConfig, ViViT};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
    pub blob: Vec<u8>,
}

/// The blob and model-config files belonging to a manifest path.
pub fn companion_paths(manifest: &Path) -> (PathBuf, PathBuf) {
    (manifest.with_extension("bin"), manifest.with_extension("toml"))
}

fn bad(entry: &str, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        entry: entry.to_string(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Pack tensors back to back in the given order.
    pub fn from_tensors<'a, T: Scalar>(tensors: impl IntoIterator<Item = (&'a String, &'a Tensor<T>)>) -> Self {
        let mut ckpt = Checkpoint::default();
        for (name, t) in tensors {
            let offset = ckpt.blob.len();
            for &x in t.data() {
                x.write_le(&mut ckpt.blob);
            }
            ckpt.entries.push(Entry {
                name: name.clone(),
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                offset,
                length: ckpt.blob.len() - offset,
            });
        }
        ckpt
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.name,
                e.dtype,
                dims.join(","),
                e.offset,
                e.length
            ));
        }
        out
    }

    pub fn parse_manifest(text: &str) -> Result<Vec<Entry>> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let label = fields.first().copied().unwrap_or("");
            if fields.len() != 5 {
                return Err(bad(
                    label,
                    format!("manifest line {} has {} fields, expected 5", i + 1, fields.len()),
                ));
            }
            let dtype: DType = fields[1]
                .parse()
                .map_err(|_| bad(label, format!("unknown dtype `{}`", fields[1])))?;
            let shape = fields[2]
                .split(',')
                .map(|d| d.parse::<usize>().ok().filter(|&d| d > 0))
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| bad(label, format!("bad dimensions `{}`", fields[2])))?;
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| bad(label, format!("bad {what} `{s}`")))
            };
            entries.push(Entry {
                name: fields[0].to_string(),
                dtype,
                shape,
                offset: num(fields[3], "offset")?,
                length: num(fields[4], "length")?,
            });
        }
        Ok(entries)
    }

    /// Names unique, lengths consistent with shapes, ranges in bounds and
    /// pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.name.is_empty() || e.name.contains(['\t', '\n']) {
                return Err(bad(&e.name, "invalid tensor name"));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(bad(&e.name, "duplicate name"));
            }
            let want = e.shape.iter().product::<usize>() * e.dtype.width();
            if e.shape.is_empty() || want != e.length {
                return Err(bad(
                    &e.name,
                    format!("shape {:?} of {} needs {want} bytes, manifest says {}", e.shape, e.dtype, e.length),
                ));
            }
            if e.offset.checked_add(e.length).map_or(true, |end| end > self.blob.len()) {
                return Err(bad(
                    &e.name,
                    format!(
                        "bytes {}..{} lie outside the {}-byte blob",
                        e.offset,
                        e.offset.saturating_add(e.length),
                        self.blob.len()
                    ),
                ));
            }
        }
        let mut spans: Vec<&Entry> = self.entries.iter().collect();
        spans.sort_by_key(|e| e.offset);
        for pair in spans.windows(2) {
            if pair[0].offset + pair[0].length > pair[1].offset {
                return Err(bad(&pair[1].name, format!("overlaps `{}`", pair[0].name)));
            }
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Decode one tensor, converting from the stored dtype if needed.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entry(name).ok_or_else(|| bad(name, "not in checkpoint"))?;
        let bytes = &self.blob[e.offset..e.offset + e.length];
        let data = match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Tensor::new(e.shape.clone(), data)
    }

    pub fn tensors<T: Scalar>(&self) -> Result<IndexMap<String, Tensor<T>>> {
        self.entries
            .iter()
            .map(|e| Ok((e.name.clone(), self.tensor(&e.name)?)))
            .collect()
    }

    /// Write `manifest` and its `.bin` blob.
    pub fn write(&self, manifest: &Path) -> Result<()> {
        let (blob, _) = companion_paths(manifest);
        if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(manifest, self.manifest()).map_err(|e| Error::io(manifest, e))?;
        fs::write(&blob, &self.blob).map_err(|e| Error::io(&blob, e))
    }

    pub fn read(manifest: &Path) -> Result<Self> {
        let (blob_path, _) = companion_paths(manifest);
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let ckpt = Checkpoint {
            entries: Self::parse_manifest(&text)?,
            blob,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

/// Save parameters plus the model configuration.
pub fn save_model<T: Scalar>(model: &ViViT<T>, manifest: &Path) -> Result<()> {
    Checkpoint::from_tensors(model.params()).write(manifest)?;
    let (_, config) = companion_paths(manifest);
    let text = toml::to_string(model.config())
        .map_err(|e| Error::Config(format!("cannot serialise model config: {e}")))?;
    fs::write(&config, text).map_err(|e| Error::io(&config, e))
}

pub fn load_model<T: Scalar>(manifest: &Path) -> Result<ViViT<T>> {
    let (_, config) = companion_paths(manifest);
    let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
    let cfg: ModelConfig = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
    ViViT::new(cfg, Checkpoint::read(manifest)?.tensors()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut m = IndexMap::new();
        m.insert("a".to_string(), Tensor::<f32>::from_fn([2, 3], |i| i as f32 - 1.5));
        m.insert("b.c".to_string(), Tensor::<f32>::from_fn([4], |i| (i as f32).exp()));
        Checkpoint::from_tensors(&m)
    }

    #[test]
    fn manifest_format_is_exact() {
        assert_eq!(sample().manifest(), "a\tf32\t2,3\t0\t24\nb.c\tf32\t4\t24\t16\n");
    }

    #[test]
    fn manifest_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::parse_manifest(&c.manifest()).unwrap(), c.entries);
        c.validate().unwrap();
        let t: Tensor<f32> = c.tensor("b.c").unwrap();
        assert_eq!(t.data()[2], 2f32.exp());
    }

    #[test]
    fn corrupt_manifests_are_rejected() {
        let mut c = sample();
        c.blob.truncate(30);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("`b.c`"), "{err}");

        let mut c = sample();
        c.entries[1].offset = 20;
        assert!(c.validate().unwrap_err().to_string().contains("overlaps"));

        let mut c = sample();
        c.entries[0].length = 20;
        assert!(c.validate().is_err());

        let mut c = sample();
        c.entries[1].name = "a".into();
        assert!(c.validate().unwrap_err().to_string().contains("duplicate"));

        assert!(Checkpoint::parse_manifest("x\tf32\t2,0\t0\t0\n").is_err());
        assert!(Checkpoint::parse_manifest("x\tf16\t2\t0\t4\n").is_err());
        assert!(Checkpoint::parse_manifest("x\tf32\t2\t0\n").is_err());
    }
}
