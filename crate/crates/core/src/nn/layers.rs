//! Layer primitives operating on row-major batches.
//!
//! Dense layers take `(batch, features)` matrices. Convolution activations
//! are stored channel-last as `(batch * length, channels)`, so the pointwise
//! half of a depthwise-separable block is a dense layer over rows.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::NnError;

fn shape_err(context: &str, expected: usize, found: usize) -> NnError {
    NnError::Shape {
        context: context.to_string(),
        expected,
        found,
    }
}

pub fn check_finite(a: &Array2<f64>, layer: &str) -> Result<(), NnError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite {
            layer: layer.to_string(),
        })
    }
}

/// `weights * x + bias` for a single vector; `weights` is row-major
/// `bias.len() x x.len()`.
pub fn dense_apply(weights: &[f64], bias: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
    let layer = Dense::new(x.len(), bias.len());
    let x = ArrayView2::from_shape((1, x.len()), x).expect("contiguous row");
    Ok(layer.forward(weights, bias, x)?.into_raw_vec_and_offset().0)
}

/// Fully connected layer; weights are stored `(outputs, inputs)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs }
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.outputs, self.inputs]
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    fn weights<'a>(&self, w: &'a [f64]) -> Result<ArrayView2<'a, f64>, NnError> {
        if w.len() != self.outputs * self.inputs {
            return Err(shape_err("dense weights", self.outputs * self.inputs, w.len()));
        }
        ArrayView2::from_shape((self.outputs, self.inputs), w)
            .map_err(|_| shape_err("dense weights", self.outputs * self.inputs, w.len()))
    }

    pub fn forward(&self, w: &[f64], b: &[f64], x: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let wv = self.weights(w)?;
        if b.len() != self.outputs {
            return Err(shape_err("dense bias", self.outputs, b.len()));
        }
        if x.ncols() != self.inputs {
            return Err(shape_err("dense input", self.inputs, x.ncols()));
        }
        let mut y = Array2::zeros((x.nrows(), self.outputs));
        let bv = ArrayView1::from(b);
        for mut row in y.rows_mut() {
            row.assign(&bv);
        }
        general_mat_mul(1.0, &x, &wv.t(), 1.0, &mut y);
        Ok(y)
    }

    /// Accumulates weight/bias gradients into `dw`/`db` and returns the
    /// input gradient when `want_dx` is set.
    pub fn backward(
        &self,
        w: &[f64],
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        dw: &mut [f64],
        db: &mut [f64],
        want_dx: bool,
    ) -> Result<Option<Array2<f64>>, NnError> {
        let wv = self.weights(w)?;
        if dw.len() != self.outputs * self.inputs || db.len() != self.outputs {
            return Err(shape_err("dense gradient", self.param_count(), dw.len() + db.len()));
        }
        let mut dwv = ArrayViewMut2::from_shape((self.outputs, self.inputs), dw).expect("checked");
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut dwv);
        for row in dy.rows() {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
        Ok(want_dx.then(|| dy.dot(&wv)))
    }
}

/// Depthwise-separable 1-D convolution: a per-channel convolution with an
/// odd kernel and zero "same" padding, then a 1x1 pointwise channel mix.
///
/// Parameters: depthwise `(in, kernel)`, depthwise bias `(in)`, pointwise
/// `(out, in)`, pointwise bias `(out)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsConv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub length: usize,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DsConvCache {
    pub depthwise_out: Array2<f64>,
}

impl DsConv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, length: usize) -> Result<Self, NnError> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Invalid(format!("kernel length {kernel} must be odd")));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel,
            length,
        })
    }

    pub fn pointwise(&self) -> Dense {
        Dense::new(self.in_channels, self.out_channels)
    }

    pub fn param_count(&self) -> usize {
        self.in_channels * self.kernel + self.in_channels + self.pointwise().param_count()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<usize, NnError> {
        if x.ncols() != self.in_channels {
            return Err(shape_err("dsconv channels", self.in_channels, x.ncols()));
        }
        if !x.nrows().is_multiple_of(self.length) {
            return Err(shape_err("dsconv rows (multiple of length)", self.length, x.nrows()));
        }
        Ok(x.nrows() / self.length)
    }

    pub fn forward(
        &self,
        depthwise: &[f64],
        depthwise_bias: &[f64],
        pointwise: &[f64],
        pointwise_bias: &[f64],
        x: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, DsConvCache), NnError> {
        let n = self.check_input(&x)?;
        let (c_in, k, len) = (self.in_channels, self.kernel, self.length);
        if depthwise.len() != c_in * k {
            return Err(shape_err("depthwise kernel", c_in * k, depthwise.len()));
        }
        if depthwise_bias.len() != c_in {
            return Err(shape_err("depthwise bias", c_in, depthwise_bias.len()));
        }
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let pad = k / 2;
        let mut d = vec![0.0; n * len * c_in];
        for s in 0..n {
            let base = s * len;
            for t in 0..len {
                let out = &mut d[(base + t) * c_in..(base + t + 1) * c_in];
                out.copy_from_slice(depthwise_bias);
                for j in 0..k {
                    let src = t + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    let row = &xs[(base + src - pad) * c_in..(base + src - pad + 1) * c_in];
                    for c in 0..c_in {
                        out[c] += depthwise[c * k + j] * row[c];
                    }
                }
            }
        }
        let d = Array2::from_shape_vec((n * len, c_in), d).expect("sized above");
        let y = self.pointwise().forward(pointwise, pointwise_bias, d.view())?;
        Ok((y, DsConvCache { depthwise_out: d }))
    }

    /// Gradient slices follow the parameter order of [`DsConv1d`].
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        depthwise: &[f64],
        pointwise: &[f64],
        x: ArrayView2<f64>,
        cache: &DsConvCache,
        dy: ArrayView2<f64>,
        grads: [&mut [f64]; 4],
        want_dx: bool,
    ) -> Result<Option<Array2<f64>>, NnError> {
        let n = self.check_input(&x)?;
        let [d_depth, d_depth_bias, d_point, d_point_bias] = grads;
        let dd = self
            .pointwise()
            .backward(pointwise, cache.depthwise_out.view(), dy, d_point, d_point_bias, true)?
            .expect("requested");
        let (c_in, k, len) = (self.in_channels, self.kernel, self.length);
        let pad = k / 2;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let dds = dd.as_slice().expect("owned");
        let mut dx = if want_dx { vec![0.0; n * len * c_in] } else { Vec::new() };
        for s in 0..n {
            let base = s * len;
            for t in 0..len {
                let g = &dds[(base + t) * c_in..(base + t + 1) * c_in];
                for c in 0..c_in {
                    d_depth_bias[c] += g[c];
                }
                for j in 0..k {
                    let src = t + j;
                    if src < pad || src - pad >= len {
                        continue;
                    }
                    let r = (base + src - pad) * c_in;
                    for c in 0..c_in {
                        d_depth[c * k + j] += g[c] * xs[r + c];
                    }
                    if want_dx {
                        for c in 0..c_in {
                            dx[r + c] += g[c] * depthwise[c * k + j];
                        }
                    }
                }
            }
        }
        Ok(want_dx.then(|| Array2::from_shape_vec((n * len, c_in), dx).expect("sized above")))
    }
}

/// Single-sample convenience form of [`DsConv1d`] with channel-major input
/// `(channels, length)` and output `(out_channels, length)`.
pub fn dsconv1d_apply(
    depthwise: &[f64],
    depthwise_bias: &[f64],
    pointwise: &[f64],
    pointwise_bias: &[f64],
    in_channels: usize,
    x: &[f64],
) -> Result<Vec<f64>, NnError> {
    if in_channels == 0 || !x.len().is_multiple_of(in_channels) {
        return Err(shape_err("dsconv1d_apply input", in_channels, x.len()));
    }
    if !depthwise.len().is_multiple_of(in_channels) {
        return Err(shape_err("dsconv1d_apply kernel", in_channels, depthwise.len()));
    }
    let len = x.len() / in_channels;
    let layer = DsConv1d::new(in_channels, pointwise_bias.len(), depthwise.len() / in_channels, len)?;
    let xv = ArrayView2::from_shape((in_channels, len), x).expect("checked");
    let channel_last = xv.t().as_standard_layout().into_owned();
    let (y, _) = layer.forward(depthwise, depthwise_bias, pointwise, pointwise_bias, channel_last.view())?;
    Ok(y.t().iter().copied().collect())
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Zeroes the upstream gradient wherever the ReLU output was not positive.
pub fn relu_backward(output: &Array2<f64>, grad: &mut Array2<f64>) {
    grad.zip_mut_with(output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` at train time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self, NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::Invalid(format!("dropout rate {rate} not in [0, 1)")));
        }
        Ok(Self { rate })
    }

    /// Applies a fresh mask when an RNG is supplied; returns the mask for
    /// the backward pass. Rate zero (or no RNG) is the identity and draws
    /// nothing.
    pub fn forward<R: Rng>(&self, x: &mut Array2<f64>, rng: Option<&mut R>) -> Option<Array2<f64>> {
        let rng = rng?;
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < keep { scale } else { 0.0 });
        *x *= &mask;
        Some(mask)
    }

    pub fn backward(mask: Option<&Array2<f64>>, grad: &mut Array2<f64>) {
        if let Some(m) = mask {
            *grad *= m;
        }
    }
}

/// Mean over the length axis: `(n * length, c) -> (n, c)`.
pub fn global_avg_pool(x: ArrayView2<f64>, length: usize) -> Array2<f64> {
    let n = x.nrows() / length;
    let mut out = Array2::zeros((n, x.ncols()));
    for (s, mut row) in out.rows_mut().into_iter().enumerate() {
        let block = x.slice(ndarray::s![s * length..(s + 1) * length, ..]);
        row.assign(&block.sum_axis(Axis(0)));
        row /= length as f64;
    }
    out
}

pub fn global_avg_pool_backward(dy: ArrayView2<f64>, length: usize) -> Array2<f64> {
    let (n, c) = dy.dim();
    let mut dx = Array2::zeros((n * length, c));
    let inv = 1.0 / length as f64;
    for s in 0..n {
        for t in 0..length {
            for ch in 0..c {
                dx[[s * length + t, ch]] = dy[[s, ch]] * inv;
            }
        }
    }
    dx
}
