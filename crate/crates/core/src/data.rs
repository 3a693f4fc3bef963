//! MNIST ingestion: the IDX container, datasets, deterministic subsets and
//! minibatches.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// IDX element type code for unsigned bytes, the only type MNIST uses.
const IDX_U8: u8 = 0x08;

/// A parsed IDX file with unsigned-byte payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxTensor {
    pub fn magic(&self) -> u32 {
        ((IDX_U8 as u32) << 8) | self.dims.len() as u32
    }

    /// Serializes back to the uncompressed on-disk layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.starts_with(&[0x1f, 0x8b])
}

/// Parses an IDX byte stream, gunzipping first when it carries a gzip header.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        flate2::read::GzDecoder::new(bytes)
            .read_to_end(&mut raw)
            .map_err(|e| Error::io("<gzip stream>", e))?;
        return parse_idx(&raw);
    }
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let ndims = bytes[3] as usize;
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_U8 || ndims == 0 {
        return Err(Error::BadMagic(magic));
    }
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(Error::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::DimensionOverflow(dims.clone()))?;
    if bytes.len() < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::TrailingData(bytes.len() - payload));
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DatasetNotFound(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_idx(&bytes)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetMeta {
    pub source: String,
    pub split: String,
    pub normalization: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One example per row.
    pub x: Matrix,
    pub y: Vec<u8>,
    pub classes: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<u8>, classes: usize, meta: DatasetMeta) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::CountMismatch {
                images: x.rows(),
                labels: y.len(),
            });
        }
        if let Some(&bad) = y.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Dataset { x, y, classes, meta })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn features(&self) -> usize {
        self.x.cols()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.y {
            h[l as usize] += 1;
        }
        h
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
            meta: self.meta.clone(),
        }
    }
}

/// Builds a dataset from an image tensor `(n, d1, d2, ...)` and a label
/// tensor `(n)`. Each image is flattened row-major and multiplied by `scale`.
pub fn to_dataset(images: &IdxTensor, labels: &IdxTensor, scale: f64, classes: usize) -> Result<Dataset> {
    let n_img = *images.dims.first().unwrap_or(&0) as usize;
    let n_lab = *labels.dims.first().unwrap_or(&0) as usize;
    if n_img != n_lab || labels.dims.len() != 1 {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lab,
        });
    }
    let features: usize = images.dims[1..].iter().map(|&d| d as usize).product();
    let x = images.data.iter().map(|&b| b as f64 * scale).collect();
    Dataset::new(
        Matrix::from_vec(n_img, features, x)?,
        labels.data.clone(),
        classes,
        DatasetMeta {
            source: "idx".into(),
            split: String::new(),
            normalization: format!("scale {scale}"),
        },
    )
}

fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.exists() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.exists() {
        return Ok(gz);
    }
    Err(Error::DatasetNotFound(plain))
}

/// Loads the four standard MNIST files (optionally `.gz`) from `dir` as
/// `(train, test)` with pixels scaled to `[0, 1]`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    if !dir.is_dir() {
        return Err(Error::DatasetNotFound(dir.to_path_buf()));
    }
    let load = |img: &str, lab: &str, split: &str| -> Result<Dataset> {
        let images = read_idx_file(&locate(dir, img)?)?;
        let labels = read_idx_file(&locate(dir, lab)?)?;
        let mut ds = to_dataset(&images, &labels, 1.0 / 255.0, 10)?;
        ds.meta.source = format!("mnist:{}", dir.display());
        ds.meta.split = split.into();
        Ok(ds)
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "train")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "test")?,
    ))
}

/// `n` examples drawn without replacement, order keyed by `seed`.
pub fn subset(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "subset of {n} from {} examples",
            ds.len()
        )));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    Rng::new(seed).shuffle(&mut idx);
    idx.truncate(n);
    Ok(ds.select(&idx))
}

fn epoch_rng(seed: u64, epoch: u64) -> Rng {
    let mut mix = Rng::new(seed ^ 0x6a09_e667_f3bc_c908);
    let mut r = Rng::new(mix.next_u64().wrapping_add(epoch.wrapping_mul(0xd1b5_4a32_d192_ed03)));
    r.next_u64();
    r
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<u8>,
}

/// Shuffled minibatches for one epoch; the final short batch is kept.
pub struct Minibatches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for Minibatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            x: self.ds.x.select_rows(idx),
            y: idx.iter().map(|&i| self.ds.y[i]).collect(),
        })
    }
}

pub fn minibatches(ds: &Dataset, batch: usize, seed: u64, epoch: u64) -> Result<Minibatches<'_>> {
    if batch == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    epoch_rng(seed, epoch).shuffle(&mut order);
    Ok(Minibatches {
        ds,
        order,
        batch,
        pos: 0,
    })
}

/// Per row: subtract the mean, then divide by `max(norm / sqrt(dim), eps)`.
pub fn global_contrast_normalize(x: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps = {eps}")));
    }
    let mut out = x.clone();
    let dim = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().sum::<f64>() / dim;
        row.iter_mut().for_each(|v| *v -= mean);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = (norm / dim.sqrt()).max(eps);
        row.iter_mut().for_each(|v| *v /= denom);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_bytes() -> Vec<u8> {
        vec![0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 1]
    }

    #[test]
    fn parses_label_file() {
        let t = parse_idx(&labels_bytes()).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![7, 2, 1]);
        assert_eq!(t.magic(), 0x0801);
        assert_eq!(t.to_bytes(), labels_bytes());
    }

    #[test]
    fn parses_image_file() {
        let mut bytes = vec![0, 0, 8, 3];
        for d in [1u32, 28, 28] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend((0..784).map(|i| (i % 256) as u8));
        let images = parse_idx(&bytes).unwrap();
        assert_eq!(images.dims, vec![1, 28, 28]);
        let labels = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 1, 5]).unwrap();
        let ds = to_dataset(&images, &labels, 1.0, 10).unwrap();
        assert_eq!(ds.x.shape(), (1, 784));
        assert_eq!(ds.x.get(0, 300), (300 % 256) as f64);
    }

    #[test]
    fn distinct_errors() {
        let mut b = labels_bytes();
        b.pop();
        assert!(matches!(parse_idx(&b), Err(Error::Truncated { expected: 11, found: 10 })));
        assert!(matches!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 0]), Err(Error::BadMagic(0x0901))));
        assert!(matches!(parse_idx(&[1, 0, 8, 1]), Err(Error::BadMagic(_))));
        assert!(matches!(parse_idx(&[0, 0]), Err(Error::Truncated { .. })));
        let mut big = vec![0, 0, 8, 4];
        for _ in 0..4 {
            big.extend_from_slice(&u32::MAX.to_be_bytes());
        }
        assert!(matches!(parse_idx(&big), Err(Error::DimensionOverflow(_))));
        let mut extra = labels_bytes();
        extra.push(9);
        assert!(matches!(parse_idx(&extra), Err(Error::TrailingData(1))));
    }

    #[test]
    fn gzip_is_transparent() {
        use std::io::Write;
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&labels_bytes()).unwrap();
        let gz = enc.finish().unwrap();
        assert_eq!(parse_idx(&gz).unwrap().data, vec![7, 2, 1]);
    }

    #[test]
    fn pixel_scaling() {
        let images = IdxTensor {
            dims: vec![3, 1],
            data: vec![255, 0, 128],
        };
        let labels = IdxTensor {
            dims: vec![3],
            data: vec![0, 1, 2],
        };
        let ds = to_dataset(&images, &labels, 1.0 / 255.0, 10).unwrap();
        assert_eq!(ds.x.as_slice(), &[1.0, 0.0, 128.0 / 255.0]);
        let short = IdxTensor {
            dims: vec![2],
            data: vec![0, 1],
        };
        assert!(matches!(
            to_dataset(&images, &short, 1.0, 10),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    fn toy(n: usize) -> Dataset {
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|i| i as f64).collect()).unwrap();
        let y = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset::new(
            x,
            y,
            10,
            DatasetMeta {
                source: "toy".into(),
                split: "train".into(),
                normalization: "none".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn subset_is_permutation_when_full() {
        let ds = toy(37);
        let s = subset(&ds, 37, 4).unwrap();
        let mut firsts: Vec<i64> = (0..37).map(|r| s.x.get(r, 0) as i64).collect();
        assert_ne!(firsts, (0..37).map(|i| 2 * i).collect::<Vec<_>>());
        firsts.sort_unstable();
        assert_eq!(firsts, (0..37).map(|i| 2 * i).collect::<Vec<_>>());
        assert!(subset(&ds, 38, 4).is_err());
    }

    #[test]
    fn minibatch_determinism_and_tail() {
        let ds = toy(25);
        let a: Vec<Batch> = minibatches(&ds, 10, 1, 3).unwrap().collect();
        let b: Vec<Batch> = minibatches(&ds, 10, 1, 3).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a.iter().map(|b| b.y.len()).collect::<Vec<_>>(), vec![10, 10, 5]);
        let c: Vec<Batch> = minibatches(&ds, 10, 1, 4).unwrap().collect();
        assert_ne!(a, c);

        let whole: Vec<Batch> = minibatches(&ds, 25, 9, 0).unwrap().collect();
        assert_eq!(whole.len(), 1);
        assert_eq!(whole[0].x.rows(), 25);
        assert!(minibatches(&ds, 0, 1, 0).is_err());
    }

    #[test]
    fn gcn_properties() {
        let x = Matrix::from_rows(&[&[3.0, 3.0, 3.0, 3.0], &[1.0, -1.0, 1.0, -1.0], &[0.5, 2.0, -7.0, 0.25]]).unwrap();
        let g = global_contrast_normalize(&x, 1e-8).unwrap();
        assert!(g.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(g.row(1), x.row(1));
        for r in 0..3 {
            let mean: f64 = g.row(r).iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
        }
        assert!(global_contrast_normalize(&x, 0.0).is_err());
    }
}
