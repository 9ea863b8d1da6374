//! Indexed image datasets: synthetic oriented-bar sets and the CIFAR-10
//! binary archive.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use md5::{Digest, Md5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use uad_autograd::Tensor;

use crate::error::{Result, UadError};
use crate::model::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Images in `[0, 1]` with labels and stable sample ids.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedDataset {
    /// `(N, C, H, W)`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    pub classes: usize,
    pub split: Split,
}

/// One mini-batch gathered from a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
}

impl IndexedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gather the samples at positions `idx`.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Batch {
            x: Tensor::new(&[idx.len(), c, h, w], data),
            y: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> IndexedDataset {
        let n = n.min(self.len());
        self.select(&(0..n).collect::<Vec<_>>(), self.split)
    }

    /// A new dataset of the samples at `idx`, keeping their ids.
    pub fn select(&self, idx: &[usize], split: Split) -> IndexedDataset {
        let b = self.batch(idx);
        IndexedDataset {
            images: b.x,
            labels: b.y,
            ids: b.ids,
            classes: self.classes,
            split,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    const MAGIC: &'static [u8; 8] = b"UADDATA1";

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u8(match self.split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        })?;
        w.write_u64::<LittleEndian>(self.classes as u64)?;
        for &d in self.images.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for (&y, &id) in self.labels.iter().zip(&self.ids) {
            w.write_u64::<LittleEndian>(y as u64)?;
            w.write_u64::<LittleEndian>(id)?;
        }
        for &v in self.images.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e| UadError::io("reading dataset container", e);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != Self::MAGIC || r.read_u32::<LittleEndian>().map_err(io)? != 1 {
            return Err(UadError::Dataset("not a version-1 dataset container".into()));
        }
        let split = match r.read_u8().map_err(io)? {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            s => return Err(UadError::Dataset(format!("unknown split tag {s}"))),
        };
        let classes = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        }
        let mut labels = Vec::with_capacity(shape[0]);
        let mut ids = Vec::with_capacity(shape[0]);
        for _ in 0..shape[0] {
            labels.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            ids.push(r.read_u64::<LittleEndian>().map_err(io)?);
        }
        let mut data = vec![0.0; shape.iter().product()];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        let ds = Self {
            images: Tensor::new(&shape, data),
            labels,
            ids,
            classes,
            split,
        };
        ds.check()?;
        Ok(ds)
    }

    /// Structural checks: labels in range, pixels in `[0, 1]`, unique ids.
    pub fn check(&self) -> Result<()> {
        if self.images.ndim() != 4 || self.images.shape()[0] != self.labels.len() || self.ids.len() != self.labels.len()
        {
            return Err(UadError::Dataset("images, labels and ids disagree in length".into()));
        }
        if let Some(y) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(UadError::Dataset(format!("label {y} out of range")));
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(UadError::Dataset("pixel outside [0, 1]".into()));
        }
        let mut sorted = self.ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(UadError::Dataset("duplicate sample ids".into()));
        }
        Ok(())
    }
}

/// Deterministic visitation order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0000);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Generation parameters for synthetic splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    /// Std of the additive pixel noise.
    pub noise: f64,
    /// Peak bar intensity above the background.
    pub contrast: f64,
    /// Amplitude of a class-specific high-frequency texture. Perfectly
    /// predictive but erasable by perturbations larger than itself.
    pub texture: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            image_size: 16,
            train_per_class: 500,
            val_per_class: 50,
            test_per_class: 100,
            seed: 0,
            noise: 0.08,
            contrast: 0.35,
            texture: 4.0 / 255.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: IndexedDataset,
    pub val: IndexedDataset,
    pub test: IndexedDataset,
}

fn render(spec: &SyntheticSpec, n_per_class: usize, split: Split, id_offset: u64, stream: u64) -> IndexedDataset {
    let s = spec.image_size;
    let c = spec.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tiles: Vec<[f64; 12]> = (0..c)
        .map(|_| std::array::from_fn(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }))
        .collect();
    rng.set_stream(stream);
    let n = n_per_class * c;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    let width = (s as f64 / 8.0).max(0.75);
    let centre = (s as f64 - 1.0) / 2.0;
    for i in 0..n {
        let y = i % c;
        let angle = std::f64::consts::PI * y as f64 / c as f64 + rng.gen_range(-0.15..0.15);
        let offset = rng.gen_range(-1.0..1.0) * s as f64 / 8.0;
        let (sin, cos) = angle.sin_cos();
        let tint: [f64; 3] = [
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
            rng.gen_range(0.7..1.0),
        ];
        let background = rng.gen_range(0.35..0.55);
        for (ch, t) in tint.into_iter().enumerate() {
            for r in 0..s {
                for q in 0..s {
                    let (u, v) = (q as f64 - centre, r as f64 - centre);
                    let dist = -u * sin + v * cos - offset;
                    let bar = (-(dist * dist) / (2.0 * width * width)).exp();
                    let noise: f64 = rng.sample(StandardNormal);
                    let texture = spec.texture * tiles[y][ch * 4 + (r % 2) * 2 + q % 2];
                    data.push((background + spec.contrast * t * bar + texture + spec.noise * noise).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(y);
    }
    IndexedDataset {
        images: Tensor::new(&[n, 3, s, s], data),
        labels,
        ids: (0..n as u64).map(|i| i + id_offset).collect(),
        classes: c,
        split,
    }
}

fn validate_synthetic(spec: &SyntheticSpec, arch: &ArchConfig) -> Result<()> {
    if spec.classes < 2 {
        return Err(UadError::config("data.classes", "need at least 2 classes"));
    }
    ArchConfig {
        image_size: spec.image_size,
        in_channels: 3,
        num_classes: spec.classes,
        ..arch.clone()
    }
    .validate()
}

/// Balanced oriented-bar images, checked against the default architecture.
pub fn make_synthetic(n_per_class: usize, classes: usize, image_size: usize, seed: u64) -> Result<IndexedDataset> {
    let spec = SyntheticSpec {
        classes,
        image_size,
        train_per_class: n_per_class,
        seed,
        ..SyntheticSpec::default()
    };
    validate_synthetic(&spec, &ArchConfig::default())?;
    Ok(render(&spec, n_per_class, Split::Train, 0, 0))
}

/// Disjoint train/val/test splits, checked against `arch`.
pub fn make_synthetic_splits(spec: &SyntheticSpec, arch: &ArchConfig) -> Result<Splits> {
    validate_synthetic(spec, arch)?;
    let n_train = (spec.train_per_class * spec.classes) as u64;
    let n_val = (spec.val_per_class * spec.classes) as u64;
    Ok(Splits {
        train: render(spec, spec.train_per_class, Split::Train, 0, 0),
        val: render(spec, spec.val_per_class, Split::Val, n_train, 1),
        test: render(spec, spec.test_per_class, Split::Test, n_train + n_val, 2),
    })
}

/// Random `pad`-pixel crop (zero padding) and horizontal flip per image.
pub fn augment_crop_flip(x: &Tensor, pad: usize, rng: &mut impl Rng) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for i in 0..b {
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.gen_bool(0.5);
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for r in 0..h {
                for q in 0..w {
                    let sr = r as isize + dy;
                    let sq0 = q as isize + dx;
                    let sq = if flip { w as isize - 1 - sq0 } else { sq0 };
                    if (0..h as isize).contains(&sr) && (0..w as isize).contains(&sq) {
                        out.data_mut()[base + r * w + q] = x.data()[base + sr as usize * w + sq as usize];
                    }
                }
            }
        }
    }
    out
}

pub const CIFAR10_ARCHIVE: &str = "cifar-10-binary.tar.gz";
pub const CIFAR10_DIR: &str = "cifar-10-batches-bin";
pub const CIFAR10_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";
const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_BATCH_BYTES: usize = 10_000 * CIFAR_RECORD;

fn decode_cifar(bytes: &[u8], split: Split, id_offset: u64) -> Result<IndexedDataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(UadError::Dataset(
            "CIFAR batch length is not a whole number of records".into(),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] >= 10 {
            return Err(UadError::Dataset(format!("CIFAR label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&p| p as f64 / 255.0));
    }
    Ok(IndexedDataset {
        images: Tensor::new(&[n, 3, 32, 32], data),
        labels,
        ids: (0..n as u64).map(|i| i + id_offset).collect(),
        classes: 10,
        split,
    })
}

fn concat(parts: Vec<IndexedDataset>, split: Split) -> IndexedDataset {
    let n: usize = parts.iter().map(IndexedDataset::len).sum();
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend(p.labels);
        ids.extend(p.ids);
    }
    IndexedDataset {
        images: Tensor::new(&[n, 3, 32, 32], data),
        labels,
        ids,
        classes: 10,
        split,
    }
}

fn batch_names() -> Vec<String> {
    (1..=5)
        .map(|k| format!("data_batch_{k}.bin"))
        .chain(std::iter::once("test_batch.bin".to_string()))
        .collect()
}

fn assemble(batches: Vec<Vec<u8>>) -> Result<(IndexedDataset, IndexedDataset)> {
    let mut train = Vec::new();
    for (k, b) in batches[..5].iter().enumerate() {
        train.push(decode_cifar(b, Split::Train, (k * 10_000) as u64)?);
    }
    let test = decode_cifar(&batches[5], Split::Test, 50_000)?;
    Ok((concat(train, Split::Train), test))
}

/// Load a standard dataset as `(train, test)` from `root`.
///
/// Accepts either the original gzipped archive (checksum verified) or its
/// extracted batch directory.
pub fn load_standard(name: &str, root: &Path) -> Result<(IndexedDataset, IndexedDataset)> {
    if name != "cifar10" {
        return Err(UadError::Dataset(format!(
            "unknown dataset `{name}` (supported: cifar10)"
        )));
    }
    let archive = root.join(CIFAR10_ARCHIVE);
    let dir = root.join(CIFAR10_DIR);
    if archive.is_file() {
        let mut bytes = Vec::new();
        File::open(&archive)
            .and_then(|f| BufReader::new(f).read_to_end(&mut bytes))
            .map_err(|e| UadError::io(format!("reading {}", archive.display()), e))?;
        let digest = Md5::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        if hex != CIFAR10_MD5 {
            return Err(UadError::Dataset(format!(
                "checksum mismatch for {}: expected md5 {CIFAR10_MD5}, got {hex}",
                archive.display()
            )));
        }
        let names = batch_names();
        let mut found: Vec<Option<Vec<u8>>> = vec![None; names.len()];
        let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(bytes.as_slice()));
        let entries = tar.entries().map_err(|e| UadError::io("reading CIFAR archive", e))?;
        for entry in entries {
            let mut entry = entry.map_err(|e| UadError::io("reading CIFAR archive", e))?;
            let path = entry
                .path()
                .map_err(|e| UadError::io("reading CIFAR archive", e))?
                .into_owned();
            let Some(file) = path.file_name().and_then(|f| f.to_str()) else {
                continue;
            };
            if let Some(k) = names.iter().position(|n| n == file) {
                let mut buf = Vec::new();
                entry
                    .read_to_end(&mut buf)
                    .map_err(|e| UadError::io("reading CIFAR archive", e))?;
                found[k] = Some(buf);
            }
        }
        let batches = found
            .into_iter()
            .zip(&names)
            .map(|(b, n)| b.ok_or_else(|| UadError::Dataset(format!("archive is missing {n}"))))
            .collect::<Result<Vec<_>>>()?;
        return assemble(batches);
    }
    if dir.is_dir() {
        let mut batches = Vec::new();
        for n in batch_names() {
            let p = dir.join(&n);
            let bytes = std::fs::read(&p).map_err(|e| UadError::io(format!("reading {}", p.display()), e))?;
            if bytes.len() != CIFAR_BATCH_BYTES {
                return Err(UadError::Dataset(format!(
                    "{} has {} bytes, expected {CIFAR_BATCH_BYTES}",
                    p.display(),
                    bytes.len()
                )));
            }
            batches.push(bytes);
        }
        return assemble(batches);
    }
    Err(UadError::Dataset(format!(
        "CIFAR-10 not found under {}: place `{CIFAR10_ARCHIVE}` (md5 {CIFAR10_MD5}) there, \
         or its extracted `{CIFAR10_DIR}/` directory containing data_batch_1..5.bin and test_batch.bin",
        root.display()
    )))
}
