//! On-disk datasets: `images/{i:06}.ppm`, `edges/{i:06}.pgm` and a
//! tab-separated `manifest.txt` of `index, seed, image, edges`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{generate_from_seed, SceneConfig};
use crate::error::{Error, Result};
use crate::io::netpbm;
use crate::maps::BinaryMap;
use crate::tensor::Tensor;
use crate::training::Sample;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    /// Relative to the dataset directory.
    pub image: PathBuf,
    pub edges: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.index, e.seed, e.image.display(), e.edges.display()))
            .collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = || Error::format(path, format!("line {}: expected index, seed, image, edges", n + 1));
            let [index, seed, image, edges] = cols[..] else {
                return Err(bad());
            };
            entries.push(ManifestEntry {
                index: index.parse().map_err(|_| bad())?,
                seed: seed.parse().map_err(|_| bad())?,
                image: PathBuf::from(image),
                edges: PathBuf::from(edges),
            });
        }
        Ok(Self { entries })
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, &path)
    }
}

/// Seed of sample `index`: an independent ChaCha stream per index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng.next_u64()
}

/// Generate `n` scenes and write them under `out_dir`. Samples are generated
/// in parallel; every sample depends only on `(cfg.seed, index)`.
pub fn build_dataset(n: usize, cfg: &SceneConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<ManifestEntry> = (0..n)
        .into_par_iter()
        .map(|index| {
            let seed = sample_seed(cfg.seed, index);
            let scene = generate_from_seed(cfg, seed)?;
            let entry = ManifestEntry {
                index,
                seed,
                image: PathBuf::from(format!("images/{index:06}.ppm")),
                edges: PathBuf::from(format!("edges/{index:06}.pgm")),
            };
            netpbm::write_ppm(&out_dir.join(&entry.image), &scene.image)?;
            netpbm::write_edges(&out_dir.join(&entry.edges), &scene.edges)?;
            Ok(entry)
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { entries };
    let path = out_dir.join(MANIFEST);
    fs::write(&path, manifest.to_tsv()).map_err(|e| Error::io(&path, e))?;
    log::debug!("wrote {n} samples to {}", out_dir.display());
    Ok(manifest)
}

/// Image–edge pairs read back from a dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<Tensor<f32>>,
    pub edges: Vec<BinaryMap>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn samples(&self) -> Result<Vec<Sample<f32>>> {
        self.images
            .iter()
            .zip(&self.edges)
            .map(|(i, e)| Sample::new(i.clone(), e.clone()))
            .collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(dir)?;
    let pairs: Vec<(Tensor<f32>, BinaryMap)> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = netpbm::read_ppm(&dir.join(&e.image))?;
            let edges = netpbm::read_edges(&dir.join(&e.edges))?;
            if image.shape()[1..] != [edges.height(), edges.width()] {
                return Err(Error::format(dir.join(&e.edges), "edge map and image sizes differ"));
            }
            Ok((image, edges))
        })
        .collect::<Result<_>>()?;
    let (images, edges) = pairs.into_iter().unzip();
    Ok(Dataset {
        manifest,
        images,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(0, &SceneConfig::default(), dir.path()).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(fs::read_to_string(dir.path().join(MANIFEST)).unwrap(), "");
        assert!(!dir.path().join("images").exists());
    }

    #[test]
    fn regeneration_from_manifest_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig {
            seed: 42,
            ..Default::default()
        };
        let m = build_dataset(3, &cfg, dir.path()).unwrap();
        let again = tempfile::tempdir().unwrap();
        for e in &Manifest::read(dir.path()).unwrap().entries {
            let scene = generate_from_seed(&cfg, e.seed).unwrap();
            let p = again.path().join(&e.image);
            netpbm::write_ppm(&p, &scene.image).unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join(&e.image)).unwrap());
            let q = again.path().join(&e.edges);
            netpbm::write_edges(&q, &scene.edges).unwrap();
            assert_eq!(fs::read(&q).unwrap(), fs::read(dir.path().join(&e.edges)).unwrap());
        }
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.manifest, m);
        assert_eq!(d.len(), 3);
        assert_eq!(d.edges[1], generate_from_seed(&cfg, m.entries[1].seed).unwrap().edges);
    }

    #[test]
    fn seeds_differ_across_indices() {
        assert_ne!(sample_seed(1, 0), sample_seed(1, 1));
        assert_eq!(sample_seed(1, 5), sample_seed(1, 5));
    }

    #[test]
    fn malformed_manifest_is_reported_with_line() {
        let err = Manifest::parse("0\t1\ta.ppm\n1\tx\tb.ppm\tb.pgm\n", Path::new("m.txt")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }
}
