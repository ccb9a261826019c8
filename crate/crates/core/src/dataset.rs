//! On-disk datasets: PGM pairs plus a `dataset.json` manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pgm;
use crate::synth::{generate, GenSpec, Sample};

pub const MANIFEST: &str = "dataset.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Contract(format!("unknown split '{s}' (expected train or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub image_sha256: String,
    pub mask_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: GenSpec,
    pub seed: u64,
    pub count: usize,
    pub train_fraction: f64,
    pub splits: BTreeMap<Split, Vec<usize>>,
    pub samples: Vec<SampleEntry>,
    /// SHA-256 over every file digest in sample order.
    pub checksum: String,
}

/// Samples as stored on disk (8-bit quantised) with their manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

pub fn image_file(index: usize) -> String {
    format!("sample_{index}_img.pgm")
}

pub fn mask_file(index: usize) -> String {
    format!("sample_{index}_mask.pgm")
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Number of training samples: the first `floor(fraction·count)` indices.
pub fn train_count(count: usize, fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Contract(format!("train fraction must lie in [0,1], got {fraction}")));
    }
    Ok((fraction * count as f64).floor() as usize)
}

struct Encoded {
    samples: Vec<Sample>,
    files: Vec<(Vec<u8>, Vec<u8>)>,
    manifest: Manifest,
}

fn encode_all(spec: &GenSpec, train_fraction: f64) -> Result<Encoded> {
    let n_train = train_count(spec.count, train_fraction)?;
    let raw = generate(spec)?;
    let mut samples = Vec::with_capacity(raw.len());
    let mut files = Vec::with_capacity(raw.len());
    let mut entries = Vec::with_capacity(raw.len());
    let mut all = Sha256::new();
    for (index, s) in raw.iter().enumerate() {
        let img = pgm::encode(&s.image)?;
        let mask = pgm::encode_mask(&s.mask)?;
        // keep in-memory samples identical to what a reload would see
        let size = s.size();
        let image = pgm::decode(&img)?.reshape(&[1, size, size])?;
        samples.push(Sample::new(image, pgm::decode(&mask)?)?);
        let entry = SampleEntry {
            index,
            image: image_file(index),
            mask: mask_file(index),
            image_sha256: hex_digest(&img),
            mask_sha256: hex_digest(&mask),
        };
        all.update(entry.image_sha256.as_bytes());
        all.update(entry.mask_sha256.as_bytes());
        entries.push(entry);
        files.push((img, mask));
    }
    let mut splits = BTreeMap::new();
    splits.insert(Split::Train, (0..n_train).collect());
    splits.insert(Split::Test, (n_train..spec.count).collect());
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        seed: spec.seed,
        count: spec.count,
        train_fraction,
        splits,
        samples: entries,
        checksum: all.finalize().iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok(Encoded { samples, files, manifest })
}

impl Dataset {
    /// Generates in memory exactly what [`Dataset::write`] would store.
    pub fn generate(spec: &GenSpec, train_fraction: f64) -> Result<Self> {
        let e = encode_all(spec, train_fraction)?;
        Ok(Self { manifest: e.manifest, samples: e.samples })
    }

    /// Generates and writes a dataset. A non-empty `dir` is refused unless
    /// `force` is set.
    pub fn write(dir: &Path, spec: &GenSpec, train_fraction: f64, force: bool) -> Result<Self> {
        if dir.exists() {
            let non_empty = fs::read_dir(dir)?.next().is_some();
            if non_empty && !force {
                return Err(Error::Data(format!(
                    "{} exists and is not empty (use --force to overwrite)",
                    dir.display()
                )));
            }
        }
        let e = encode_all(spec, train_fraction)?;
        fs::create_dir_all(dir)?;
        for (entry, (img, mask)) in e.manifest.samples.iter().zip(&e.files) {
            fs::write(dir.join(&entry.image), img)?;
            fs::write(dir.join(&entry.mask), mask)?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&e.manifest)? + "\n")?;
        Ok(Self { manifest: e.manifest, samples: e.samples })
    }

    /// Loads a dataset, verifying every file checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("invalid manifest {}: {e}", path.display())))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.samples.len() != manifest.count {
            return Err(Error::Data("manifest sample list does not match its count".into()));
        }
        let mut all = Sha256::new();
        let mut samples = Vec::with_capacity(manifest.count);
        for (i, entry) in manifest.samples.iter().enumerate() {
            if entry.index != i {
                return Err(Error::Data(format!("manifest entry {i} has index {}", entry.index)));
            }
            let img_bytes = fs::read(dir.join(&entry.image))?;
            let mask_bytes = fs::read(dir.join(&entry.mask))?;
            for (bytes, want, name) in
                [(&img_bytes, &entry.image_sha256, &entry.image), (&mask_bytes, &entry.mask_sha256, &entry.mask)]
            {
                if &hex_digest(bytes) != want {
                    return Err(Error::Data(format!("checksum mismatch for {name}")));
                }
            }
            all.update(entry.image_sha256.as_bytes());
            all.update(entry.mask_sha256.as_bytes());
            let image = pgm::decode(&img_bytes)?;
            let (h, w) = image.hw()?;
            let mask = pgm::decode(&mask_bytes)?;
            if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data(format!("{} is not a binary mask", entry.mask)));
            }
            samples.push(Sample::new(image.reshape(&[1, h, w])?, mask)?);
        }
        let checksum: String = all.finalize().iter().map(|b| format!("{b:02x}")).collect();
        if checksum != manifest.checksum {
            return Err(Error::Data("dataset checksum mismatch".into()));
        }
        for idx in manifest.splits.values().flatten() {
            if *idx >= manifest.count {
                return Err(Error::Data(format!("split index {idx} out of range")));
            }
        }
        Ok(Self { manifest, samples })
    }

    pub fn checksum(&self) -> &str {
        &self.manifest.checksum
    }

    /// Samples of a split; an absent split is a data error.
    pub fn split(&self, split: Split) -> Result<Vec<Sample>> {
        let idx = self
            .manifest
            .splits
            .get(&split)
            .ok_or_else(|| Error::Data(format!("dataset has no '{split}' split")))?;
        Ok(idx.iter().map(|&i| self.samples[i].clone()).collect())
    }

    pub fn split_indices(&self, split: Split) -> Result<&[usize]> {
        self.manifest
            .splits
            .get(&split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("dataset has no '{split}' split")))
    }
}
