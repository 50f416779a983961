//! MNIST in IDX format, plain or gzip-compressed.

use std::io::Read;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};

use crate::{Error, Result};

/// Environment variable naming the dataset root.
pub const DATA_DIR_ENV: &str = "LCC_DATA_DIR";

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One flattened sample per row.
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` records (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, idx: &[usize]) -> (Array2<f64>, Vec<u8>) {
        (
            self.images.select(Axis(0), idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stems(self) -> (&'static str, &'static str) {
        match self {
            Split::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
            Split::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        return Ok(out);
    }
    Ok(raw)
}

fn header(bytes: &[u8], path: &Path, words: usize) -> Result<Vec<u32>> {
    if bytes.len() < 4 * words {
        return Err(Error::format(path, "file shorter than its header"));
    }
    Ok(bytes[..4 * words]
        .chunks(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()))
        .collect())
}

/// Load an image/label IDX pair, keeping at most `limit` records.
/// Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let ib = read_file(images)?;
    let h = header(&ib, images, 4)?;
    if h[0] != IMAGE_MAGIC {
        return Err(Error::format(images, format!("bad magic {:#010x}", h[0])));
    }
    let (n, rows, cols) = (h[1] as usize, h[2] as usize, h[3] as usize);
    let px = rows * cols;
    if ib.len() != 16 + n * px {
        return Err(Error::format(
            images,
            format!("{} bytes, header implies {}", ib.len(), 16 + n * px),
        ));
    }
    let lb = read_file(labels)?;
    let h = header(&lb, labels, 2)?;
    if h[0] != LABEL_MAGIC {
        return Err(Error::format(labels, format!("bad magic {:#010x}", h[0])));
    }
    if h[1] as usize != n || lb.len() != 8 + n {
        return Err(Error::format(labels, format!("{} labels for {n} images", lb.len().saturating_sub(8))));
    }
    if let Some(&bad) = lb[8..].iter().find(|&&l| l > 9) {
        return Err(Error::format(labels, format!("label {bad} out of range")));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    let images = Array2::from_shape_fn((keep, px), |(i, j)| ib[16 + i * px + j] as f64 / 255.0);
    Ok(Dataset {
        images,
        labels: lb[8..8 + keep].to_vec(),
    })
}

fn find(root: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = root.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{stem}[.gz] not found under {}", root.display()),
    )))
}

/// Load a split from a directory holding the standard MNIST file names.
pub fn load_mnist(root: &Path, split: Split, limit: Option<usize>) -> Result<Dataset> {
    let (img, lab) = split.stems();
    load_mnist_idx(&find(root, img)?, &find(root, lab)?, limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn reads_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx(IMAGE_MAGIC, &[3, 2, 2], &[0, 255, 51, 102, 1, 2, 3, 4, 5, 6, 7, 8]);
        let lab = idx(LABEL_MAGIC, &[3], &[7, 0, 9]);
        std::fs::write(dir.path().join("train-images-idx3-ubyte"), &img).unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&lab).unwrap();
        std::fs::write(dir.path().join("train-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();

        let ds = load_mnist(dir.path(), Split::Train, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels, vec![7, 0, 9]);
        assert_eq!(ds.images.row(0).to_vec(), vec![0.0, 1.0, 0.2, 0.4]);
        let two = load_mnist(dir.path(), Split::Train, Some(2)).unwrap();
        assert_eq!(two, ds.take(2));
        assert!(load_mnist(dir.path(), Split::Test, None).is_err());
    }

    #[test]
    fn rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&l, idx(LABEL_MAGIC, &[1], &[1])).unwrap();
        std::fs::write(&i, []).unwrap();
        assert!(matches!(load_mnist_idx(&i, &l, None), Err(Error::Format { .. })));
        std::fs::write(&i, idx(LABEL_MAGIC, &[1, 1, 1], &[0])).unwrap();
        assert!(load_mnist_idx(&i, &l, None).is_err());
        std::fs::write(&i, idx(IMAGE_MAGIC, &[1, 2, 2], &[0, 0, 0])).unwrap();
        assert!(load_mnist_idx(&i, &l, None).is_err());
        std::fs::write(&i, idx(IMAGE_MAGIC, &[2, 1, 1], &[0, 0])).unwrap();
        assert!(load_mnist_idx(&i, &l, None).is_err());
        std::fs::write(&i, idx(IMAGE_MAGIC, &[1, 1, 1], &[0])).unwrap();
        assert!(load_mnist_idx(&i, &l, None).is_ok());
    }
}
