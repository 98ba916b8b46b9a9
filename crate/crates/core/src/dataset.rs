//! Image ingestion: directory scanning, decoding, square resize, Lab
//! conversion and seeded batch assembly.

use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::colorspace::{self, RgbImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File extensions picked up by [`scan`] (compared case-insensitively).
pub const SUPPORTED_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Above this many cached bytes [`Dataset::open`] stops keeping decoded
/// tensors in memory and reloads files per batch instead.
pub const CACHE_LIMIT_BYTES: usize = 512 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    /// `None` until the file has been decoded once.
    pub decoded_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| SUPPORTED_EXTENSIONS.iter().any(|s| e.eq_ignore_ascii_case(s)))
        .unwrap_or(false)
}

/// Recursively list supported images under `root`, ordered by their
/// root-relative path components so the order is platform independent.
pub fn scan(root: &Path, image_size: usize) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).follow_links(true) {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(root).to_path_buf();
            Error::io(&path, e.into())
        })?;
        if entry.file_type().is_file() && is_supported(entry.path()) {
            paths.push(entry.into_path());
        }
    }
    let key = |p: &PathBuf| -> Vec<String> {
        p.strip_prefix(root)
            .unwrap_or(p)
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect()
    };
    paths.sort_by_cached_key(key);
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        image_size,
        entries: paths.into_iter().map(|path| ManifestEntry { path, decoded_ok: None }).collect(),
    })
}

/// Decode any supported raster file to 8-bit sRGB.
pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Decode { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(h as usize, w as usize, img.into_raw())
}

/// Write an sRGB image; the format follows the extension.
pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data().to_vec())
        .expect("RgbImage buffer length is validated on construction");
    buf.save(path).map_err(|source| Error::Encode { path: path.to_path_buf(), source })
}

/// Bilinear (triangle filter) resize without aspect preservation.
pub fn resize_rgb(img: &RgbImage, height: usize, width: usize) -> RgbImage {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let src = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data().to_vec())
        .expect("RgbImage buffer length is validated on construction");
    let out = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
    RgbImage::new(height, width, out.into_raw()).expect("resize output has the requested extent")
}

/// Normalized `(L: 1×S×S, ab: 2×S×S)` for an already decoded image.
pub fn example_from_rgb(img: &RgbImage, image_size: usize) -> (Tensor, Tensor) {
    let resized = resize_rgb(img, image_size, image_size);
    colorspace::normalize_for_generator(&colorspace::srgb_to_lab(&resized))
}

/// Decode → resize → Lab → normalize.
pub fn load_example(path: &Path, image_size: usize) -> Result<(Tensor, Tensor)> {
    Ok(example_from_rgb(&load_rgb(path)?, image_size))
}

/// One training batch. `ids` index the manifest entries.
#[derive(Debug, Clone)]
pub struct Batch {
    pub l: Tensor,
    pub ab: Tensor,
    pub ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Stack per-image examples along a new batch axis.
    pub fn stack(examples: &[(&Tensor, &Tensor)], ids: Vec<usize>) -> Result<Self> {
        let (l0, ab0) = examples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let (s_l, s_ab) = (l0.shape().to_vec(), ab0.shape().to_vec());
        let mut l = Vec::with_capacity(examples.len() * l0.len());
        let mut ab = Vec::with_capacity(examples.len() * ab0.len());
        for (el, eab) in examples {
            if el.shape() != s_l.as_slice() || eab.shape() != s_ab.as_slice() {
                return Err(Error::shape("batch", format!("example {:?}/{:?} vs {s_l:?}/{s_ab:?}", el.shape(), eab.shape())));
            }
            l.extend_from_slice(el.data());
            ab.extend_from_slice(eab.data());
        }
        let n = examples.len();
        Ok(Self {
            l: Tensor::new(&[n, s_l[0], s_l[1], s_l[2]], l)?,
            ab: Tensor::new(&[n, s_ab[0], s_ab[1], s_ab[2]], ab)?,
            ids,
        })
    }
}

/// Permutation of `0..n` determined by `(seed, epoch)` alone.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Stream 0 belongs to the trainer; shuffles use one stream per epoch.
    rng.set_stream(epoch.wrapping_add(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Batches per epoch under drop-last.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if batch_size == 0 {
        0
    } else {
        n / batch_size
    }
}

/// Ordered manifest ids of every batch in an epoch (drop-last).
pub fn batch_ids(usable: &[usize], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > usable.len() {
        return Err(Error::Data(format!(
            "batch size {batch_size} exceeds the {} usable images",
            usable.len()
        )));
    }
    let perm = epoch_permutation(usable.len(), seed, epoch);
    Ok(perm
        .chunks_exact(batch_size)
        .map(|c| c.iter().map(|&i| usable[i]).collect())
        .collect())
}

/// A scanned dataset with every file decoded once up front. Undecodable
/// files are skipped, logged and counted.
pub struct Dataset {
    pub manifest: DatasetManifest,
    usable: Vec<usize>,
    cache: Option<Vec<Option<(Tensor, Tensor)>>>,
    pub skipped: Vec<(PathBuf, String)>,
}

impl Dataset {
    pub fn open(root: &Path, image_size: usize) -> Result<Self> {
        Self::from_manifest(scan(root, image_size)?)
    }

    pub fn from_manifest(mut manifest: DatasetManifest) -> Result<Self> {
        let size = manifest.image_size;
        let per_image = size * size * 3 * std::mem::size_of::<f32>();
        let mut cache = (per_image.saturating_mul(manifest.len()) <= CACHE_LIMIT_BYTES).then(Vec::new);
        let mut usable = Vec::new();
        let mut skipped = Vec::new();
        for (i, entry) in manifest.entries.iter_mut().enumerate() {
            match load_example(&entry.path, size) {
                Ok(ex) => {
                    entry.decoded_ok = Some(true);
                    usable.push(i);
                    if let Some(c) = cache.as_mut() {
                        c.push(Some(ex));
                    }
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", entry.path.display());
                    entry.decoded_ok = Some(false);
                    skipped.push((entry.path.clone(), e.to_string()));
                    if let Some(c) = cache.as_mut() {
                        c.push(None);
                    }
                }
            }
        }
        Ok(Self { manifest, usable, cache, skipped })
    }

    /// Manifest ids of decodable entries, in manifest order.
    pub fn usable(&self) -> &[usize] {
        &self.usable
    }

    pub fn len(&self) -> usize {
        self.usable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.usable.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    pub fn example(&self, id: usize) -> Result<(Tensor, Tensor)> {
        if let Some(Some(ex)) = self.cache.as_ref().and_then(|c| c.get(id)) {
            return Ok(ex.clone());
        }
        let entry = self
            .manifest
            .entries
            .get(id)
            .ok_or_else(|| Error::Data(format!("no manifest entry {id}")))?;
        load_example(&entry.path, self.manifest.image_size)
    }

    pub fn load_batch(&self, ids: &[usize]) -> Result<Batch> {
        let examples = ids.iter().map(|&i| self.example(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<_> = examples.iter().map(|(l, ab)| (l, ab)).collect();
        Batch::stack(&refs, ids.to_vec())
    }

    /// All batches of one epoch, in order, loaded on demand.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        let ids = batch_ids(&self.usable, batch_size, seed, epoch)?;
        Ok(ids.into_iter().map(move |b| self.load_batch(&b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y))).save(path).unwrap();
    }

    #[test]
    fn scan_is_recursive_sorted_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("b.png"), 4, 4, |_, _| [1, 2, 3]);
        write_png(&dir.path().join("a/z.png"), 4, 4, |_, _| [1, 2, 3]);
        write_png(&dir.path().join("a/c.JPG"), 4, 4, |_, _| [1, 2, 3]);
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let m = scan(dir.path(), 8).unwrap();
        let names: Vec<_> = m.entries.iter().map(|e| e.path.strip_prefix(dir.path()).unwrap().to_path_buf()).collect();
        assert_eq!(names, vec![PathBuf::from("a/c.JPG"), PathBuf::from("a/z.png"), PathBuf::from("b.png")]);
        assert_eq!(m, scan(dir.path(), 8).unwrap());
    }

    #[test]
    fn scan_empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan(dir.path(), 8).unwrap().is_empty());
        assert!(scan(&dir.path().join("nope"), 8).is_err());
    }

    #[test]
    fn example_ranges_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&p, 512, 512, |x, y| [(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]);
        let (l, ab) = load_example(&p, 256).unwrap();
        assert_eq!(l.shape(), &[1, 256, 256]);
        assert_eq!(ab.shape(), &[2, 256, 256]);
        assert!(l.data().iter().chain(ab.data()).all(|v| (-1.0..=1.0).contains(v)));

        let g = dir.path().join("g.png");
        write_png(&g, 30, 20, |x, y| [((x * 7 + y) % 256) as u8; 3]);
        let (_, ab) = load_example(&g, 16).unwrap();
        assert!(ab.data().iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn loaded_example_round_trips_to_resized_source() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png(&p, 40, 24, |x, y| [(x * 6) as u8, (y * 9) as u8, 200]);
        let (l, ab) = load_example(&p, 32).unwrap();
        let lab = colorspace::lab_from_normalized(32, 32, l.data(), &ab).unwrap();
        let back = colorspace::lab_to_srgb(&lab);
        let resized = resize_rgb(&load_rgb(&p).unwrap(), 32, 32);
        for (a, b) in back.data().iter().zip(resized.data()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
    }

    #[test]
    fn permutation_depends_on_seed_and_epoch_only() {
        let a = epoch_permutation(100, 7, 0);
        assert_eq!(a, epoch_permutation(100, 7, 0));
        assert_ne!(a, epoch_permutation(100, 7, 1));
        assert_ne!(a, epoch_permutation(100, 8, 0));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_batching() {
        let usable: Vec<usize> = (0..10_000).collect();
        let b = batch_ids(&usable, 16, 3, 0).unwrap();
        assert_eq!(b.len(), 625);
        let perm = epoch_permutation(10_000, 3, 0);
        let flat: Vec<usize> = b.concat();
        assert_eq!(flat, perm[..625 * 16]);

        let b = batch_ids(&(0..10).collect::<Vec<_>>(), 4, 0, 0).unwrap();
        assert_eq!(b.len(), 2);
        assert!(batch_ids(&[0, 1], 3, 0, 0).is_err());
    }

    #[test]
    fn corrupt_files_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_png(&dir.path().join(format!("{i}.png")), 8, 8, |x, _| [(x * 30) as u8, 0, 0]);
        }
        std::fs::write(dir.path().join("1b.png"), b"not an image").unwrap();
        let ds = Dataset::open(dir.path(), 8).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.skipped.len(), 1);
        assert_eq!(ds.manifest.entries[2].decoded_ok, Some(false));
        let batches: Vec<_> = ds.batches(2, 1, 0).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].l.shape(), &[2, 1, 8, 8]);
        assert!(!batches[0].ids.contains(&2));
    }
}
