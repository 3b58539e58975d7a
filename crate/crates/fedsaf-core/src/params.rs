//! Flat parameter vectors, layer schemas, and head/base splitting.
//!
//! Models are represented as one flat `ParamVector` whose layout is fixed
//! by a `LayerSchema`: layers in forward-pass order, each layer holding its
//! weight matrix row-major (rows indexed by output unit) followed by its
//! bias. Splitting a vector at `nhead` separates the last `nhead` layers
//! (the personalized head) from the preceding shared base, which is all a
//! client ever uploads.

use crate::error::{Error, Result};

/// Flat, ordered sequence of model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// True when every entry is a finite number.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self::new(values)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// One schema layer: a weight matrix and its bias stored as a single unit,
/// so `nhead = 1` slices off exactly the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub layer_id: usize,
    /// Shape of the layer's weight matrix as `[out, in]`; the bias of
    /// length `out` is appended after the weights inside the same layer.
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

/// Ordered layer descriptors with contiguous offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSchema {
    layers: Vec<LayerDesc>,
    total_len: usize,
}

impl LayerSchema {
    /// Build a schema from ordered `(shape, length)` pairs; offsets are
    /// assigned contiguously starting at zero.
    pub fn new(layer_shapes: Vec<(Vec<usize>, usize)>) -> Self {
        let mut layers = Vec::with_capacity(layer_shapes.len());
        let mut offset = 0;
        for (layer_id, (shape, length)) in layer_shapes.into_iter().enumerate() {
            layers.push(LayerDesc {
                layer_id,
                shape,
                offset,
                length,
            });
            offset += length;
        }
        Self {
            layers,
            total_len: offset,
        }
    }

    pub fn layers(&self) -> &[LayerDesc] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    /// Length of the shared base segment when the last `nhead` layers are
    /// kept local.
    pub fn base_len(&self, nhead: usize) -> Result<usize> {
        if nhead > self.num_layers() {
            return Err(Error::Config(format!(
                "nhead {} out of range for a schema with {} layers",
                nhead,
                self.num_layers()
            )));
        }
        let head_len: usize = self.layers[self.num_layers() - nhead..]
            .iter()
            .map(|l| l.length)
            .sum();
        Ok(self.total_len - head_len)
    }
}

/// A parameter vector split into personalized head and shared base.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitView {
    pub head: ParamVector,
    pub base: ParamVector,
    pub nhead: usize,
}

/// Split `params` into the last-`nhead`-layers head and the remaining base.
/// Values are copied, not aliased.
pub fn split(params: &ParamVector, schema: &LayerSchema, nhead: usize) -> Result<SplitView> {
    let base_len = schema.base_len(nhead)?;
    if params.len() != schema.total_len() {
        return Err(Error::Integrity(format!(
            "parameter vector length {} does not match schema total {}",
            params.len(),
            schema.total_len()
        )));
    }
    let values = params.as_slice();
    Ok(SplitView {
        head: ParamVector::new(values[base_len..].to_vec()),
        base: ParamVector::new(values[..base_len].to_vec()),
        nhead,
    })
}

/// Inverse of [`split`]: reassemble the full vector.
pub fn merge(view: &SplitView, schema: &LayerSchema) -> Result<ParamVector> {
    let base_len = schema.base_len(view.nhead)?;
    if view.base.len() != base_len || view.base.len() + view.head.len() != schema.total_len() {
        return Err(Error::Integrity(format!(
            "split view lengths (base {}, head {}) inconsistent with schema (total {}, base {})",
            view.base.len(),
            view.head.len(),
            schema.total_len(),
            base_len
        )));
    }
    let mut values = Vec::with_capacity(schema.total_len());
    values.extend_from_slice(view.base.as_slice());
    values.extend_from_slice(view.head.as_slice());
    Ok(ParamVector::new(values))
}

/// Number of scalars a client uploads per round: the size of the base
/// segment under the given `nhead`.
pub fn count_transmitted(schema: &LayerSchema, nhead: usize) -> Result<usize> {
    schema.base_len(nhead)
}

/// Element-wise `sum_j weights[j] * vectors[j]`. No normalization is
/// applied; callers guarantee simplex weights where required.
pub fn linear_combination<V: AsRef<[f64]>>(weights: &[f64], vectors: &[V]) -> Result<ParamVector> {
    if weights.is_empty() || vectors.is_empty() {
        return Err(Error::Empty(
            "linear combination needs at least one weight and vector".into(),
        ));
    }
    if weights.len() != vectors.len() {
        return Err(Error::Integrity(format!(
            "{} weights for {} vectors",
            weights.len(),
            vectors.len()
        )));
    }
    let len = vectors[0].as_ref().len();
    let mut out = vec![0.0; len];
    for (w, v) in weights.iter().zip(vectors) {
        let v = v.as_ref();
        if v.len() != len {
            return Err(Error::Integrity(format!(
                "vector length {} differs from first vector length {}",
                v.len(),
                len
            )));
        }
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(ParamVector::new(out))
}
