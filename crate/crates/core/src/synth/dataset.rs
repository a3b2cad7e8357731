//! On-disk datasets (`ds-v1`).
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/sample_0000.off        mesh
//! <dir>/sample_0000.wss        wss-v1 series
//! <dir>/sample_0000.ecap.csv   vertex,tawss,osi,ecap
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shape::{ShapeDistribution, ShapeParams};
use super::wss::{generate_sample, WssModel};
use super::SynthError;
use crate::hemo::{EcapField, WSS_SCHEMA};
use crate::mesh::{parse_off, write_off, TriMesh};

pub const DATASET_SCHEMA: &str = "ds-v1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub seed: u64,
    pub distribution: ShapeDistribution,
    pub wss: WssModel,
    pub test_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 10,
            seed: 0,
            distribution: ShapeDistribution::default(),
            wss: WssModel::default(),
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checksums {
    pub mesh: String,
    pub wss: String,
    pub ecap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub index: usize,
    pub seed: u64,
    pub n_vertices: usize,
    pub mesh: String,
    pub wss: String,
    pub ecap: String,
    pub sha256: Checksums,
    pub params: ShapeParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Formats {
    pub mesh: String,
    pub wss: String,
    pub ecap: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub spec: DatasetSpec,
    pub formats: Formats,
    pub samples: Vec<SampleEntry>,
    pub split: Split,
}

impl Manifest {
    /// Digest of every sample checksum, in index order.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for s in &self.samples {
            for c in [&s.sha256.mesh, &s.sha256.wss, &s.sha256.ecap] {
                h.update(c.as_bytes());
            }
        }
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-sample seeds drawn from the dataset seed.
pub fn sample_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Seeded split with `round(n·test_fraction)` test samples; both halves sorted.
pub fn train_test_split(n: usize, test_fraction: f64, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut test = idx[..n_test].to_vec();
    let mut train = idx[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Split { train, test }
}

/// Seeded `k`-way partition of `0..n`; fold sizes differ by at most one.
pub fn kfold(n: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in idx.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SynthError> {
    fs::write(path, bytes).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_file(path: &Path) -> Result<Vec<u8>, SynthError> {
    fs::read(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn build_one(dir: &Path, index: usize, seed: u64, spec: &DatasetSpec) -> Result<SampleEntry, SynthError> {
    let params = spec.distribution.sample(seed)?;
    let sample = generate_sample(&params, &spec.wss)?;
    let stem = format!("sample_{index:04}");
    let mesh_bytes = write_off(&sample.mesh).into_bytes();
    let wss_bytes = sample.wss.to_bytes();
    let mut ecap_bytes = Vec::new();
    sample.ecap.write_csv(&mut ecap_bytes)?;
    let entry = SampleEntry {
        index,
        seed,
        n_vertices: sample.mesh.n_vertices(),
        mesh: format!("{stem}.off"),
        wss: format!("{stem}.wss"),
        ecap: format!("{stem}.ecap.csv"),
        sha256: Checksums {
            mesh: sha256_hex(&mesh_bytes),
            wss: sha256_hex(&wss_bytes),
            ecap: sha256_hex(&ecap_bytes),
        },
        params,
    };
    write_file(&dir.join(&entry.mesh), &mesh_bytes)?;
    write_file(&dir.join(&entry.wss), &wss_bytes)?;
    write_file(&dir.join(&entry.ecap), &ecap_bytes)?;
    Ok(entry)
}

/// Generates `spec.n_samples` samples into `dir` using up to `jobs` worker
/// threads and writes the manifest last.
pub fn build_dataset(spec: &DatasetSpec, dir: &Path, jobs: usize) -> Result<Manifest, SynthError> {
    if spec.n_samples < 2 {
        return Err(SynthError::InvalidParams(format!(
            "a dataset needs at least 2 samples, got {}",
            spec.n_samples
        )));
    }
    fs::create_dir_all(dir).map_err(|source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let seeds = sample_seeds(spec.seed, spec.n_samples);
    let jobs = jobs.clamp(1, spec.n_samples);
    let mut results: Vec<Option<Result<SampleEntry, SynthError>>> = (0..spec.n_samples).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|w| {
                let seeds = &seeds;
                scope.spawn(move || {
                    (w..spec.n_samples)
                        .step_by(jobs)
                        .map(|i| (i, build_one(dir, i, seeds[i], spec)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                results[i] = Some(r);
            }
        }
    });
    let samples = results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.expect("every index assigned").map_err(|e| SynthError::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let manifest = Manifest {
        schema: DATASET_SCHEMA.into(),
        spec: spec.clone(),
        formats: Formats {
            mesh: "off".into(),
            wss: WSS_SCHEMA.into(),
            ecap: "csv:vertex,tawss,osi,ecap".into(),
        },
        split: train_test_split(spec.n_samples, spec.test_fraction, spec.seed),
        samples,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// A loaded sample: geometry plus ground-truth indices.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub mesh: TriMesh,
    pub ecap: EcapField,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<LoadedSample>,
}

impl Dataset {
    pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
        let bytes = read_file(&dir.join(MANIFEST))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| SynthError::Manifest(e.to_string()))?;
        if manifest.schema != DATASET_SCHEMA {
            return Err(SynthError::Manifest(format!("unsupported schema `{}`", manifest.schema)));
        }
        Ok(manifest)
    }

    /// Loads meshes and ECAP fields, verifying checksums.
    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let manifest = Self::read_manifest(dir)?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            let wrap = |e: SynthError| SynthError::Sample {
                index: entry.index,
                source: Box::new(e),
            };
            let mesh_bytes = read_file(&dir.join(&entry.mesh)).map_err(wrap)?;
            let ecap_bytes = read_file(&dir.join(&entry.ecap)).map_err(wrap)?;
            if sha256_hex(&mesh_bytes) != entry.sha256.mesh || sha256_hex(&ecap_bytes) != entry.sha256.ecap {
                return Err(wrap(SynthError::Manifest("checksum mismatch".into())));
            }
            let text = String::from_utf8(mesh_bytes)
                .map_err(|_| wrap(SynthError::Manifest("mesh is not UTF-8".into())))?;
            let mesh = parse_off(&text).map_err(|e| wrap(e.into()))?;
            let ecap = EcapField::read_csv(&ecap_bytes[..]).map_err(|e| wrap(e.into()))?;
            if ecap.len() != mesh.n_vertices() {
                return Err(wrap(SynthError::Manifest(format!(
                    "{} ecap rows for {} vertices",
                    ecap.len(),
                    mesh.n_vertices()
                ))));
            }
            samples.push(LoadedSample { mesh, ecap });
        }
        Ok(Self { manifest, samples })
    }
}
