use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::NnError;

/// One named parameter tensor inside a flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of named segments covering a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Segment {
        let seg = Segment {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += seg.len();
        self.segments.push(seg.clone());
        seg
    }

    pub fn from_shapes<'a>(shapes: impl IntoIterator<Item = (&'a str, Vec<usize>)>) -> Self {
        let mut layout = Self::new();
        for (name, shape) in shapes {
            layout.push(name, &shape);
        }
        layout
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Flat index range spanned by all segments whose name starts with
    /// `prefix`. Such segments must be contiguous.
    pub fn prefix_range(&self, prefix: &str) -> Option<std::ops::Range<usize>> {
        let mut hits = self.segments.iter().filter(|s| s.name.starts_with(prefix));
        let first = hits.next()?;
        let end = hits.fold(first.range().end, |_, s| s.range().end);
        Some(first.offset..end)
    }
}

/// Flattened model parameters with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self, NnError> {
        if values.len() != layout.total() {
            return Err(NnError::Shape {
                context: "ParamVector::from_values".into(),
                expected: layout.total(),
                found: values.len(),
            });
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.values[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    /// Splits into `(name, shape, values)` triples in layout order.
    pub fn to_segments(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        self.layout
            .segments()
            .iter()
            .map(|s| (s.name.clone(), s.shape.clone(), self.values[s.range()].to_vec()))
            .collect()
    }

    pub fn from_segments(segments: Vec<(String, Vec<usize>, Vec<f64>)>) -> Result<Self, NnError> {
        let mut layout = Layout::new();
        let mut values = Vec::new();
        for (name, shape, vals) in segments {
            let seg = layout.push(name, &shape);
            if seg.len() != vals.len() {
                return Err(NnError::Shape {
                    context: format!("segment {}", seg.name),
                    expected: seg.len(),
                    found: vals.len(),
                });
            }
            values.extend(vals);
        }
        Ok(Self {
            layout: Arc::new(layout),
            values,
        })
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<(), NnError> {
        if Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout {
            Ok(())
        } else {
            Err(NnError::LayoutMismatch)
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector, NnError> {
        self.check_layout(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self {
            layout: Arc::clone(&self.layout),
            values,
        })
    }

    pub fn add_assign(&mut self, other: &ParamVector) -> Result<(), NnError> {
        self.check_layout(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
