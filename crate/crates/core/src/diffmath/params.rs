use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::Matrix;
use crate::error::{Error, Result};

/// A named, shaped slice of a [`ParameterVector`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Disjoint, contiguous segments covering `0..len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    len: usize,
}

impl Layout {
    pub fn builder() -> LayoutBuilder {
        LayoutBuilder::default()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

#[derive(Default)]
pub struct LayoutBuilder {
    segments: Vec<Segment>,
    len: usize,
}

impl LayoutBuilder {
    pub fn push(mut self, name: impl Into<String>, rows: usize, cols: usize) -> Self {
        let name = name.into();
        assert!(
            self.segments.iter().all(|s| s.name != name),
            "duplicate parameter segment `{name}`"
        );
        self.segments.push(Segment {
            name,
            rows,
            cols,
            offset: self.len,
        });
        self.len += rows * cols;
        self
    }

    pub fn build(self) -> Arc<Layout> {
        Arc::new(Layout {
            segments: self.segments,
            len: self.len,
        })
    }
}

/// Flat vector of trainable scalars with a named segment layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.len()];
        ParameterVector { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::contract(format!(
                "layout holds {} parameters, got {} values",
                layout.len(),
                values.len()
            )));
        }
        Ok(ParameterVector { layout, values })
    }

    pub fn empty() -> Self {
        ParameterVector::zeros(Layout::builder().build())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn find(&self, name: &str) -> Result<&Segment> {
        self.layout
            .segment(name)
            .ok_or_else(|| Error::contract(format!("no parameter segment named `{name}`")))
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        let seg = self.find(name)?;
        Ok(&self.values[seg.range()])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let range = self.find(name)?.range();
        Ok(&mut self.values[range])
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let seg = self.find(name)?;
        Matrix::from_vec(seg.rows, seg.cols, self.values[seg.range()].to_vec())
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?;
        match v {
            [x] => Ok(*x),
            _ => Err(Error::contract(format!("segment `{name}` is not a scalar"))),
        }
    }

    pub fn set(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let dst = self.get_mut(name)?;
        if dst.len() != values.len() {
            return Err(Error::contract(format!(
                "segment `{name}` holds {} values, got {}",
                dst.len(),
                values.len()
            )));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    /// Splits the flat vector into its named segments.
    pub fn unpack(&self) -> BTreeMap<String, Vec<f64>> {
        self.layout
            .segments()
            .iter()
            .map(|s| (s.name.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    /// Inverse of [`unpack`](Self::unpack): every segment must be present
    /// with the right length.
    pub fn pack(layout: Arc<Layout>, parts: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let mut pv = ParameterVector::zeros(layout.clone());
        for seg in layout.segments() {
            let part = parts
                .get(&seg.name)
                .ok_or_else(|| Error::contract(format!("missing segment `{}`", seg.name)))?;
            pv.set(&seg.name, part)?;
        }
        if parts.len() != layout.segments().len() {
            return Err(Error::contract("unknown segments supplied to pack"));
        }
        Ok(pv)
    }

    /// `self += scale * other`; layouts must match.
    pub fn axpy(&mut self, scale: f64, other: &ParameterVector) -> Result<()> {
        if self.layout != other.layout && *self.layout != *other.layout {
            return Err(Error::contract("parameter layouts differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Serialize for ParameterVector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let records: Vec<SegmentRecord> = self
            .layout
            .segments()
            .iter()
            .map(|s| SegmentRecord {
                name: s.name.clone(),
                rows: s.rows,
                cols: s.cols,
                values: self.values[s.range()].to_vec(),
            })
            .collect();
        records.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParameterVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let records = Vec::<SegmentRecord>::deserialize(deserializer)?;
        let mut builder = Layout::builder();
        let mut values = Vec::new();
        for r in &records {
            if r.values.len() != r.rows * r.cols {
                return Err(serde::de::Error::custom(format!(
                    "segment `{}` declares {}x{} but holds {} values",
                    r.name,
                    r.rows,
                    r.cols,
                    r.values.len()
                )));
            }
            if builder.segments.iter().any(|s| s.name == r.name) {
                return Err(serde::de::Error::custom(format!(
                    "duplicate segment `{}`",
                    r.name
                )));
            }
            builder = builder.push(r.name.clone(), r.rows, r.cols);
            values.extend_from_slice(&r.values);
        }
        Ok(ParameterVector {
            layout: builder.build(),
            values,
        })
    }
}
