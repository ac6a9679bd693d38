//! Episode construction: support/query sets over N_c classes, drawn from a
//! synthetic Gaussian generator or from ingested raster datasets, with
//! class-level 90-degree rotation augmentation and disjoint split handling.

use crate::error::{MlnError, Result};
use crate::num::rng::RngStream;
use std::io::{Read, Write};
use std::path::Path;

/// One few-shot task: a labeled support set and a query set. Class slots
/// are always relabeled to 0..way regardless of source class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<(Vec<f64>, usize)>,
    pub queries: Vec<(Vec<f64>, usize)>,
    pub way: usize,
    pub shots: usize,
}

/// Where episodes come from.
#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeSource {
    /// Fresh Gaussian clusters per episode: means uniform in [-1,1]^dim,
    /// items mean + N(0, sigma).
    Gaussian { dim: usize, sigma: f64 },
    /// Fixed per-class item pools (ingested raster data).
    Pools(ClassPools),
}

impl EpisodeSource {
    pub fn input_dim(&self) -> usize {
        match self {
            EpisodeSource::Gaussian { dim, .. } => *dim,
            EpisodeSource::Pools(p) => p.item_dim,
        }
    }

    pub fn sample(
        &self,
        way: usize,
        shots: usize,
        queries_per_class: usize,
        rng: &mut RngStream,
    ) -> Result<Episode> {
        match self {
            EpisodeSource::Gaussian { dim, sigma } => {
                gen_gaussian_episode(way, shots, queries_per_class, *dim, *sigma, rng)
            }
            EpisodeSource::Pools(p) => sample_episode(p, way, shots, queries_per_class, rng),
        }
    }
}

/// Items grouped by class, values in [0,1] for raster data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPools {
    pub classes: Vec<Vec<Vec<f64>>>,
    pub item_dim: usize,
}

impl ClassPools {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// Splits off the first `train` classes, then `val`, then `test`;
    /// the three sides are pairwise disjoint by construction.
    pub fn split(&self, train: usize, val: usize, test: usize) -> Result<(ClassPools, ClassPools, ClassPools)> {
        if train + val + test > self.n_classes() {
            return Err(MlnError::Sampling(format!(
                "split {train}+{val}+{test} exceeds {} classes",
                self.n_classes()
            )));
        }
        let take = |lo: usize, hi: usize| ClassPools {
            classes: self.classes[lo..hi].to_vec(),
            item_dim: self.item_dim,
        };
        Ok((take(0, train), take(train, train + val), take(train + val, train + val + test)))
    }
}

/// Draws `way` fresh class means uniformly in [-1,1]^dim, then samples every
/// support and query item as mean + Gaussian noise. Deterministic per seed.
pub fn gen_gaussian_episode(
    way: usize,
    shots: usize,
    queries_per_class: usize,
    dim: usize,
    sigma: f64,
    rng: &mut RngStream,
) -> Result<Episode> {
    if way < 2 || dim < 1 || shots < 1 {
        return Err(MlnError::Sampling(format!(
            "invalid episode sizes: way={way}, shots={shots}, dim={dim}"
        )));
    }
    let means: Vec<Vec<f64>> = (0..way)
        .map(|_| (0..dim).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let mut draw = |slot: usize| -> (Vec<f64>, usize) {
        let v = means[slot].iter().map(|m| m + rng.normal(0.0, sigma)).collect();
        (v, slot)
    };
    let mut support = Vec::with_capacity(way * shots);
    for slot in 0..way {
        for _ in 0..shots {
            support.push(draw(slot));
        }
    }
    let mut queries = Vec::with_capacity(way * queries_per_class);
    for slot in 0..way {
        for _ in 0..queries_per_class {
            queries.push(draw(slot));
        }
    }
    Ok(Episode { support, queries, way, shots })
}

/// Samples `way` classes without replacement from the pools, then
/// shots+queries items per class without replacement; support and query
/// items are disjoint.
pub fn sample_episode(
    pools: &ClassPools,
    way: usize,
    shots: usize,
    queries_per_class: usize,
    rng: &mut RngStream,
) -> Result<Episode> {
    if pools.n_classes() < way {
        return Err(MlnError::Sampling(format!(
            "{} classes available, episode needs {way}",
            pools.n_classes()
        )));
    }
    let need = shots + queries_per_class;
    let class_ids = rng.sample_without_replacement(pools.n_classes(), way);
    let mut support = Vec::with_capacity(way * shots);
    let mut queries = Vec::with_capacity(way * queries_per_class);
    for (slot, &cid) in class_ids.iter().enumerate() {
        let items = &pools.classes[cid];
        if items.len() < need {
            return Err(MlnError::Sampling(format!(
                "class {cid} has {} items, episode needs {need}",
                items.len()
            )));
        }
        let picks = rng.sample_without_replacement(items.len(), need);
        for &i in &picks[..shots] {
            support.push((items[i].clone(), slot));
        }
        for &i in &picks[shots..] {
            queries.push((items[i].clone(), slot));
        }
    }
    Ok(Episode { support, queries, way, shots })
}

/// Rotates a square h x h raster 90 degrees clockwise (exact pixel
/// permutation: out[i][j] = in[h-1-j][i]).
pub fn rotate90(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for i in 0..side {
        for j in 0..side {
            out[i * side + j] = img[(side - 1 - j) * side + i];
        }
    }
    out
}

/// Class-level rotation augmentation: each base class spawns rotated
/// variants (0, 90, 180, 270 degrees) treated as new classes, quadrupling
/// the pool. Apply after splitting so variants never straddle a split.
pub fn augment_rotations(pools: &ClassPools) -> Result<ClassPools> {
    let side = (pools.item_dim as f64).sqrt() as usize;
    if side * side != pools.item_dim {
        return Err(MlnError::Format(format!(
            "rotation augmentation needs square rasters, got dim {}",
            pools.item_dim
        )));
    }
    let mut classes = Vec::with_capacity(pools.n_classes() * 4);
    for base in &pools.classes {
        let mut variants: Vec<Vec<Vec<f64>>> = vec![base.clone()];
        for r in 0..3 {
            let prev: &Vec<Vec<f64>> = &variants[r];
            variants.push(prev.iter().map(|img| rotate90(img, side)).collect());
        }
        classes.extend(variants);
    }
    Ok(ClassPools { classes, item_dim: pools.item_dim })
}

const DATASET_MAGIC: &[u8; 8] = b"MLNDS1\0\0";

/// Reads the flat-binary dataset format: magic "MLNDS1\0\0", u32 class
/// count, u32 items per class, u32 height, u32 width (little-endian), then
/// class-major u8 grayscale rasters. Pixels are scaled to [0,1].
pub fn load_flat_binary(path: &Path) -> Result<ClassPools> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| MlnError::Format("truncated header".into()))?;
    if &magic != DATASET_MAGIC {
        return Err(MlnError::Format("bad magic: not an MLNDS1 dataset".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |f: &mut std::fs::File| -> Result<u32> {
        f.read_exact(&mut u32buf)
            .map_err(|_| MlnError::Format("truncated header".into()))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let n_classes = read_u32(&mut f)? as usize;
    let per_class = read_u32(&mut f)? as usize;
    let height = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let dim = height
        .checked_mul(width)
        .ok_or_else(|| MlnError::Format("inconsistent dimensions".into()))?;
    if dim == 0 {
        return Err(MlnError::Format("inconsistent dimensions: zero-sized rasters".into()));
    }
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    let expect = n_classes * per_class * dim;
    if raw.len() != expect {
        return Err(MlnError::Format(format!(
            "truncated file: expected {expect} raster bytes, found {}",
            raw.len()
        )));
    }
    let mut classes = Vec::with_capacity(n_classes);
    let mut off = 0;
    for _ in 0..n_classes {
        let mut items = Vec::with_capacity(per_class);
        for _ in 0..per_class {
            items.push(raw[off..off + dim].iter().map(|&b| b as f64 / 255.0).collect());
            off += dim;
        }
        classes.push(items);
    }
    Ok(ClassPools { classes, item_dim: dim })
}

/// Writes pools in the flat-binary format (test/ingest helper; every class
/// must hold the same item count and pixels must already be in [0,1]).
pub fn save_flat_binary(pools: &ClassPools, height: usize, width: usize, path: &Path) -> Result<()> {
    if height * width != pools.item_dim {
        return Err(MlnError::Format("height*width does not match item dim".into()));
    }
    let per_class = pools.classes.first().map_or(0, |c| c.len());
    if pools.classes.iter().any(|c| c.len() != per_class) {
        return Err(MlnError::Format("classes have unequal item counts".into()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(DATASET_MAGIC)?;
    for v in [pools.n_classes() as u32, per_class as u32, height as u32, width as u32] {
        f.write_all(&v.to_le_bytes())?;
    }
    for class in &pools.classes {
        for item in class {
            let bytes: Vec<u8> = item.iter().map(|&x| (x * 255.0).round() as u8).collect();
            f.write_all(&bytes)?;
        }
    }
    Ok(())
}

/// Loads a directory of per-class subdirectories holding raw h x w u8
/// raster files (the flat-binary pixel encoding, one image per file).
/// Subdirectories and files are visited in sorted order for determinism.
pub fn load_class_directory(dir: &Path, height: usize, width: usize) -> Result<ClassPools> {
    let dim = height * width;
    let mut subdirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(MlnError::Format(format!("no class subdirectories in {}", dir.display())));
    }
    let mut classes = Vec::new();
    for sub in subdirs {
        let mut files: Vec<_> = std::fs::read_dir(&sub)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut items = Vec::new();
        for file in files {
            let raw = std::fs::read(&file)?;
            if raw.len() != dim {
                return Err(MlnError::Format(format!(
                    "{} holds {} bytes, expected {dim} for {height}x{width}",
                    file.display(),
                    raw.len()
                )));
            }
            items.push(raw.iter().map(|&b| b as f64 / 255.0).collect());
        }
        classes.push(items);
    }
    Ok(ClassPools { classes, item_dim: dim })
}
