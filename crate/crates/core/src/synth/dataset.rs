//! Labeled image sets and the `DBDS` container.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Cursor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"DBDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfounderKind {
    Categorical,
    Continuous,
}

/// Per-sample confounder values.
#[derive(Clone, Debug, PartialEq)]
pub enum Confounder {
    Categorical { values: Vec<u32>, levels: usize },
    Continuous(Vec<f32>),
}

impl Confounder {
    pub fn len(&self) -> usize {
        match self {
            Confounder::Categorical { values, .. } => values.len(),
            Confounder::Continuous(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ConfounderKind {
        match self {
            Confounder::Categorical { .. } => ConfounderKind::Categorical,
            Confounder::Continuous(_) => ConfounderKind::Continuous,
        }
    }

    pub fn levels(&self) -> Option<usize> {
        match self {
            Confounder::Categorical { levels, .. } => Some(*levels),
            Confounder::Continuous(_) => None,
        }
    }

    pub fn categorical(&self) -> Option<&[u32]> {
        match self {
            Confounder::Categorical { values, .. } => Some(values),
            Confounder::Continuous(_) => None,
        }
    }

    /// Values as reals regardless of kind.
    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Confounder::Categorical { values, .. } => values.iter().map(|&v| v as f64).collect(),
            Confounder::Continuous(v) => v.iter().map(|&v| v as f64).collect(),
        }
    }

    fn subset(&self, idx: &[usize]) -> Self {
        match self {
            Confounder::Categorical { values, levels } => Confounder::Categorical {
                values: idx.iter().map(|&i| values[i]).collect(),
                levels: *levels,
            },
            Confounder::Continuous(v) => Confounder::Continuous(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Images `[N, 3, H, W]` in `[0, 1]` with informative labels, confounder
/// values and treatment-level group ids, all parallel arrays of length N.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub images: Tensor<f32>,
    pub m_labels: Vec<u32>,
    pub s_values: Confounder,
    pub group_ids: Vec<u32>,
    pub n_classes: usize,
    /// Echo of the generating configuration, when synthetic.
    pub generator: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    confounder: ConfounderKind,
    n_classes: usize,
    n_batches: Option<usize>,
    generator: Option<serde_json::Value>,
}

impl LabeledImageSet {
    pub fn len(&self) -> usize {
        self.m_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Malformed(m));
        let n = self.m_labels.len();
        if self.images.ndim() != 4 || self.images.shape()[0] != n {
            return bad(format!("images shape {:?} does not hold {n} samples", self.images.shape()));
        }
        if self.s_values.len() != n || self.group_ids.len() != n {
            return bad("label arrays differ in length".into());
        }
        if self.images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return bad("pixel outside [0, 1]".into());
        }
        if self.m_labels.iter().any(|&m| m as usize >= self.n_classes) {
            return bad("informative label out of range".into());
        }
        if let Confounder::Categorical { values, levels } = &self.s_values {
            if values.iter().any(|&s| s as usize >= *levels) {
                return bad("confounder value out of range".into());
            }
        }
        if let Confounder::Continuous(v) = &self.s_values {
            if v.iter().any(|x| !x.is_finite()) {
                return bad("non-finite confounder value".into());
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(idx)?,
            m_labels: idx.iter().map(|&i| self.m_labels[i]).collect(),
            s_values: self.s_values.subset(idx),
            group_ids: idx.iter().map(|&i| self.group_ids[i]).collect(),
            n_classes: self.n_classes,
            generator: self.generator.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (c, h, w) = self.image_dims();
        let header = Header {
            n: self.len(),
            channels: c,
            height: h,
            width: w,
            confounder: self.s_values.kind(),
            n_classes: self.n_classes,
            n_batches: self.s_values.levels(),
            generator: self.generator.clone(),
        };
        let mut payload = Vec::with_capacity(self.images.len() * 4 + self.len() * 12);
        container::put_f32s(&mut payload, self.images.data());
        container::put_u32s(&mut payload, &self.m_labels);
        match &self.s_values {
            Confounder::Categorical { values, .. } => container::put_u32s(&mut payload, values),
            Confounder::Continuous(v) => container::put_f32s(&mut payload, v),
        }
        container::put_u32s(&mut payload, &self.group_ids);
        let mut out = Vec::new();
        container::write(
            &mut out,
            DATASET_MAGIC,
            DATASET_VERSION,
            &serde_json::to_value(&header)?,
            &payload,
        )?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = container::read(bytes, DATASET_MAGIC, DATASET_VERSION)?;
        let h: Header = serde_json::from_value(header)?;
        let mut cur = Cursor::new(&payload);
        let images = Tensor::new(
            &[h.n, h.channels, h.height, h.width],
            cur.f32s(h.n * h.channels * h.height * h.width)?,
        )?;
        let m_labels = cur.u32s(h.n)?;
        let s_values = match h.confounder {
            ConfounderKind::Categorical => Confounder::Categorical {
                values: cur.u32s(h.n)?,
                levels: h
                    .n_batches
                    .ok_or_else(|| Error::Malformed("categorical set lacks n_batches".into()))?,
            },
            ConfounderKind::Continuous => Confounder::Continuous(cur.f32s(h.n)?),
        };
        let group_ids = cur.u32s(h.n)?;
        if cur.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing payload bytes", cur.remaining())));
        }
        let set = Self { images, m_labels, s_values, group_ids, n_classes: h.n_classes, generator: h.generator };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&bytes)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
