//! Deterministic synthetic token-sequence task with on-disk storage.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    pub template_frames: usize,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            vocab_size: 8,
            template_frames: 12,
            feature_dim: 80,
            noise_std: 0.3,
            min_tokens: 3,
            max_tokens: 10,
            train_size: 2000,
            dev_size: 200,
            test_size: 200,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.template_frames == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "vocab, template frames and feature dim must be positive".into(),
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::Config(format!(
                "bad token-count range [{}, {}]",
                self.min_tokens, self.max_tokens
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown split '{s}' (expected train, dev or test)"))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub tokens: Vec<usize>,
    /// `[L, feature_dim]`
    pub features: Array<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

/// One `[template_frames, feature_dim]` pattern per token id `1..=V`
/// (index 0 unused).
pub fn templates(spec: &SyntheticTaskSpec) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(0);
    let n = spec.template_frames * spec.feature_dim;
    let mut out = vec![Vec::new()];
    for _ in 0..spec.vocab_size {
        out.push(
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect(),
        );
    }
    out
}

fn generate_split(
    spec: &SyntheticTaskSpec,
    temps: &[Vec<f32>],
    split: Split,
    size: usize,
) -> Vec<Utterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(split.stream());
    (0..size)
        .map(|i| {
            let m = rng.random_range(spec.min_tokens..=spec.max_tokens);
            let tokens: Vec<usize> = (0..m)
                .map(|_| rng.random_range(1..=spec.vocab_size))
                .collect();
            let mut data = Vec::with_capacity(m * temps[1].len());
            for &t in &tokens {
                data.extend(temps[t].iter().map(|&v| {
                    let noise: f64 = rng.sample(StandardNormal);
                    v + (spec.noise_std * noise) as f32
                }));
            }
            Utterance {
                id: format!("{}-{i:05}", split.name()),
                features: Array::new(&[m * spec.template_frames, spec.feature_dim], data)
                    .expect("features"),
                tokens,
            }
        })
        .collect()
}

pub fn generate(spec: &SyntheticTaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let temps = templates(spec);
    Ok(Dataset {
        spec: spec.clone(),
        train: generate_split(spec, &temps, Split::Train, spec.train_size),
        dev: generate_split(spec, &temps, Split::Dev, spec.dev_size),
        test: generate_split(spec, &temps, Split::Test, spec.test_size),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: usize,
    /// Element offset into the split's feature file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub features: String,
    pub transcripts: String,
    pub utterances: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticTaskSpec,
    pub splits: Vec<SplitManifest>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json`, `<split>.f32` (raw little-endian features) and
/// `<split>.txt` (one `id tok tok ..` line per utterance). An existing
/// manifest is only replaced with `force`.
pub fn write_dataset(ds: &Dataset, dir: &Path, force: bool) -> Result<()> {
    if dir.join(MANIFEST_FILE).exists() && !force {
        return Err(Error::Input(format!(
            "{} already holds a dataset (use --force to overwrite)",
            dir.display()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let utts = ds.split(split);
        let features = format!("{}.f32", split.name());
        let transcripts = format!("{}.txt", split.name());
        let mut bytes = Vec::new();
        let mut text = String::new();
        let mut entries = Vec::with_capacity(utts.len());
        let mut offset = 0;
        for u in utts {
            for v in u.features.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let toks: Vec<String> = u.tokens.iter().map(usize::to_string).collect();
            text.push_str(&format!("{} {}\n", u.id, toks.join(" ")));
            entries.push(ManifestEntry {
                id: u.id.clone(),
                frames: u.features.shape()[0],
                offset,
            });
            offset += u.features.len();
        }
        fs::write(dir.join(&features), bytes)?;
        fs::write(dir.join(&transcripts), text)?;
        splits.push(SplitManifest {
            split,
            features,
            transcripts,
            utterances: entries,
        });
    }
    let manifest = Manifest {
        spec: ds.spec.clone(),
        splits,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_split(dir: &Path, split: Split) -> Result<(SyntheticTaskSpec, Vec<Utterance>)> {
    let manifest = read_manifest(dir)?;
    let sm = manifest
        .splits
        .iter()
        .find(|s| s.split == split)
        .ok_or_else(|| Error::Format(format!("manifest has no {} split", split.name())))?;
    let dim = manifest.spec.feature_dim;
    let raw = fs::read(dir.join(&sm.features))?;
    if raw.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{} is not a whole number of f32 values",
            sm.features
        )));
    }
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let text = fs::read_to_string(dir.join(&sm.transcripts))?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != sm.utterances.len() {
        return Err(Error::Format(format!(
            "{} lists {} transcripts for {} utterances",
            sm.transcripts,
            lines.len(),
            sm.utterances.len()
        )));
    }
    let mut utts = Vec::with_capacity(lines.len());
    for (entry, line) in sm.utterances.iter().zip(lines) {
        let mut parts = line.split_whitespace();
        if parts.next() != Some(entry.id.as_str()) {
            return Err(Error::Format(format!(
                "transcript order differs at {}",
                entry.id
            )));
        }
        let tokens = parts
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad token '{t}' in {}", entry.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let n = entry.frames * dim;
        let data = values
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| Error::Format(format!("features of {} out of range", entry.id)))?;
        utts.push(Utterance {
            id: entry.id.clone(),
            tokens,
            features: Array::new(&[entry.frames, dim], data.to_vec())?,
        });
    }
    Ok((manifest.spec, utts))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let (spec, train) = read_split(dir, Split::Train)?;
    let (_, dev) = read_split(dir, Split::Dev)?;
    let (_, test) = read_split(dir, Split::Test)?;
    Ok(Dataset {
        spec,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            train_size: 6,
            dev_size: 3,
            test_size: 2,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn lengths_follow_token_counts() {
        let ds = generate(&small()).unwrap();
        for u in &ds.train {
            assert!((3..=10).contains(&u.tokens.len()));
            assert_eq!(u.features.shape(), [u.tokens.len() * 12, 80]);
            assert!(u.tokens.iter().all(|&t| (1..=8).contains(&t)));
        }
    }

    #[test]
    fn noiseless_features_are_templates() {
        let spec = SyntheticTaskSpec {
            noise_std: 0.0,
            ..small()
        };
        let ds = generate(&spec).unwrap();
        let temps = templates(&spec);
        let u = &ds.dev[0];
        let expected: Vec<f32> = u.tokens.iter().flat_map(|&t| temps[t].clone()).collect();
        assert_eq!(u.features.data(), &expected[..]);
    }

    #[test]
    fn splits_use_separate_streams() {
        let ds = generate(&small()).unwrap();
        assert_ne!(ds.train[0].features, ds.dev[0].features);
        let bigger = generate(&SyntheticTaskSpec {
            train_size: 20,
            ..small()
        })
        .unwrap();
        assert_eq!(bigger.dev, ds.dev);
    }

    #[test]
    fn disk_round_trip_and_overwrite_guard() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        write_dataset(&ds, dir.path(), false).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), ds);
        assert!(write_dataset(&ds, dir.path(), false).is_err());
        write_dataset(&ds, dir.path(), true).unwrap();
    }
}
