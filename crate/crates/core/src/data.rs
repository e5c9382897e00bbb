//! Image collections and the on-disk dataset container.
//!
//! Container layout (integers little-endian):
//!
//! ```text
//! magic     8 bytes  "CSFTDATA"
//! version   u32      currently 1
//! count     u32      number of images
//! channels  u32
//! height    u32
//! width     u32
//! columns   u32      bit 0 goal labels, bit 1 latents, bit 2 style labels
//! images    f32 × count·channels·height·width   (NCHW)
//! goal      i32 × count                          if bit 0
//! latents   i32 × 2·count  (shape, texture)      if bit 1
//! style     i32 × count                          if bit 2
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSFTDATA";
pub const VERSION: u32 = 1;

const COL_GOAL: u32 = 1;
const COL_LATENT: u32 = 2;
const COL_STYLE: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `N` images stored contiguously as `[N × C × H × W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Images {
    shape: ImageShape,
    data: Vec<f64>,
}

impl Images {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || !data.len().is_multiple_of(shape.len()) {
            return Err(Error::shape("images", format!("{} values for images of {shape:?}", data.len())));
        }
        Ok(Images { shape, data })
    }

    pub fn empty(shape: ImageShape) -> Self {
        Images { shape, data: Vec::new() }
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, image: &[f64]) -> Result<()> {
        if image.len() != self.shape.len() {
            return Err(Error::shape("images.push", format!("{} values, expected {}", image.len(), self.shape.len())));
        }
        self.data.extend_from_slice(image);
        Ok(())
    }

    /// Concatenation of the selected images, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Images {
        Images { shape: self.shape, data: self.gather(indices) }
    }
}

/// Latent generative factors of one sample. Evaluation-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub shape: usize,
    pub texture: usize,
}

/// Images with optional goal labels, latent records, and style labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Images,
    pub goal_labels: Option<Vec<usize>>,
    pub latents: Option<Vec<Latent>>,
    pub style_labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.goal_labels.as_ref().map(Vec::len),
            self.latents.as_ref().map(Vec::len),
            self.style_labels.as_ref().map(Vec::len),
        ];
        if lens.iter().flatten().any(|&l| l != n) {
            return Err(Error::shape("dataset", format!("{n} images but column lengths {lens:?}")));
        }
        Ok(())
    }

    pub fn goal_labels(&self) -> Result<&[usize]> {
        self.goal_labels.as_deref().ok_or_else(|| Error::Contract("dataset has no goal labels".into()))
    }

    pub fn style_labels(&self) -> Result<&[usize]> {
        self.style_labels.as_deref().ok_or_else(|| Error::Contract("dataset has no style labels".into()))
    }

    /// Label-free view for unsupervised consumers.
    pub fn unlabeled(&self) -> &Images {
        &self.images
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let pick = |v: &Vec<usize>| indices.iter().map(|&i| v[i]).collect();
        Dataset {
            images: self.images.subset(indices),
            goal_labels: self.goal_labels.as_ref().map(pick),
            latents: self.latents.as_ref().map(|v| indices.iter().map(|&i| v[i]).collect()),
            style_labels: self.style_labels.as_ref().map(pick),
        }
    }

    /// First `⌊fraction·N⌋` samples and the rest.
    pub fn split(&self, fraction: f64) -> (Dataset, Dataset) {
        let cut = ((self.len() as f64) * fraction).floor() as usize;
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let s = self.images.shape();
        let mut columns = 0;
        if self.goal_labels.is_some() {
            columns |= COL_GOAL;
        }
        if self.latents.is_some() {
            columns |= COL_LATENT;
        }
        if self.style_labels.is_some() {
            columns |= COL_STYLE;
        }
        let mut out = Vec::with_capacity(32 + self.images.as_slice().len() * 4 + self.len() * 16);
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.len() as u32, s.channels as u32, s.height as u32, s.width as u32, columns] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.images.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut ints = |vals: &mut dyn Iterator<Item = usize>| {
            for v in vals {
                out.extend_from_slice(&(v as i32).to_le_bytes());
            }
        };
        if let Some(l) = &self.goal_labels {
            ints(&mut l.iter().copied());
        }
        if let Some(l) = &self.latents {
            ints(&mut l.iter().flat_map(|l| [l.shape, l.texture]));
        }
        if let Some(l) = &self.style_labels {
            ints(&mut l.iter().copied());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Dataset> {
        let header = 8 + 6 * 4;
        if bytes.len() < header || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a dataset container (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
        if word(0) != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", word(0))));
        }
        let count = word(1) as usize;
        let shape = ImageShape { channels: word(2) as usize, height: word(3) as usize, width: word(4) as usize };
        let columns = word(5);
        let n_int = |bit: u32, per: usize| if columns & bit != 0 { count * per } else { 0 };
        let expected = header
            + count * shape.len() * 4
            + 4 * (n_int(COL_GOAL, 1) + n_int(COL_LATENT, 2) + n_int(COL_STYLE, 1));
        if bytes.len() != expected {
            return Err(Error::Format(format!("dataset is {} bytes, header implies {expected}", bytes.len())));
        }
        let mut pos = header;
        let mut take = |n: usize| {
            let s = &bytes[pos..pos + n * 4];
            pos += n * 4;
            s.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"))
        };
        let data: Vec<f64> = take(count * shape.len()).map(|b| f32::from_le_bytes(b) as f64).collect();
        let ints = |it: &mut dyn Iterator<Item = [u8; 4]>| -> Result<Vec<usize>> {
            it.map(|b| {
                let v = i32::from_le_bytes(b);
                usize::try_from(v).map_err(|_| Error::Format(format!("negative label {v}")))
            })
            .collect()
        };
        let goal_labels = if columns & COL_GOAL != 0 { Some(ints(&mut take(count))?) } else { None };
        let latents = if columns & COL_LATENT != 0 {
            let flat = ints(&mut take(2 * count))?;
            Some(flat.chunks_exact(2).map(|c| Latent { shape: c[0], texture: c[1] }).collect())
        } else {
            None
        };
        let style_labels = if columns & COL_STYLE != 0 { Some(ints(&mut take(count))?) } else { None };
        let images = if count == 0 { Images::empty(shape) } else { Images::new(shape, data)? };
        Ok(Dataset { images, goal_labels, latents, style_labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "dataset not found; run `generate` first".into(),
            },
            _ => Error::Io(e),
        })?;
        Dataset::decode(&bytes)
    }
}
