//! Autoencoder + building/floor classifier built from [`crate::nn`] layers.
//!
//! Parameters live in one flat vector laid out as
//! `encoder.* | decoder.* | classifier.*`, so the same [`ParamVector`] is
//! exchanged by clients, compared for similarity and averaged.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Sample, NUM_CLASSES, NUM_WAPS};
use crate::nn::layers::{
    check_finite, global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, DsConvCache,
};
use crate::nn::{
    train_epochs, AdamConfig, AdamState, Dense, Dropout, DsConv1d, Layout, NnError, Objective, ParamVector,
    TrainStepReport,
};
use crate::rng::{self, tag, StreamRng};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const CLASSIFIER_PREFIX: &str = "classifier.";

/// Rows per forward chunk at inference time.
const INFERENCE_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSpec {
    /// Input, hidden and bottleneck widths; the decoder mirrors them.
    pub encoder_dims: Vec<usize>,
    /// Dropout after each hidden (non-bottleneck) encoder layer.
    pub dropout: f64,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            encoder_dims: vec![NUM_WAPS, 256, 128, 64],
            dropout: 0.3,
        }
    }
}

impl AutoencoderSpec {
    pub fn input_dim(&self) -> usize {
        self.encoder_dims[0]
    }

    pub fn code_dim(&self) -> usize {
        *self.encoder_dims.last().expect("validated nonempty")
    }

    pub fn decoder_dims(&self) -> Vec<usize> {
        self.encoder_dims.iter().rev().copied().collect()
    }

    pub fn param_count(&self) -> usize {
        let pairs = |d: &[usize]| d.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
        pairs(&self.encoder_dims) + pairs(&self.decoder_dims())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSpec {
    /// Output channels of each depthwise-separable block; the first block
    /// reads the code as one channel.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        Self {
            channels: vec![32, 64],
            kernel: 3,
            hidden: 128,
            classes: NUM_CLASSES,
            dropout: 0.5,
        }
    }
}

impl ClassifierSpec {
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = 1;
        for &c_out in &self.channels {
            total += c_in * self.kernel + c_in + c_out * c_in + c_out;
            c_in = c_out;
        }
        total + c_in * self.hidden + self.hidden + self.hidden * self.classes + self.classes
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub autoencoder: AutoencoderSpec,
    pub classifier: ClassifierSpec,
}

impl Architecture {
    pub fn validate(&self) -> Result<(), NnError> {
        let ae = &self.autoencoder;
        if ae.encoder_dims.len() < 2 || ae.encoder_dims.contains(&0) {
            return Err(NnError::Invalid(format!("bad encoder dims {:?}", ae.encoder_dims)));
        }
        let cls = &self.classifier;
        if cls.channels.is_empty() || cls.channels.contains(&0) || cls.hidden == 0 || cls.classes == 0 {
            return Err(NnError::Invalid(format!("bad classifier spec {cls:?}")));
        }
        if cls.kernel.is_multiple_of(2) {
            return Err(NnError::Invalid(format!("kernel length {} must be odd", cls.kernel)));
        }
        Dropout::new(ae.dropout)?;
        Dropout::new(cls.dropout)?;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.autoencoder.param_count() + self.classifier.param_count()
    }

    pub fn autoencoder_layout(&self) -> Layout {
        let mut layout = Layout::new();
        push_autoencoder(&mut layout, &self.autoencoder);
        layout
    }

    pub fn classifier_layout(&self) -> Layout {
        let mut layout = Layout::new();
        push_classifier(&mut layout, &self.classifier);
        layout
    }

    pub fn layout(&self) -> Layout {
        let mut layout = Layout::new();
        push_autoencoder(&mut layout, &self.autoencoder);
        push_classifier(&mut layout, &self.classifier);
        layout
    }

    /// Recovers layer widths from a full layout; dropout rates are not
    /// stored in a layout and take their defaults.
    pub fn from_layout(layout: &Layout) -> Result<Self, NnError> {
        let bad = |what: &str| NnError::Invalid(format!("layout is not a model layout: {what}"));
        let shape = |name: &str| layout.get(name).map(|s| s.shape.clone()).ok_or_else(|| bad(name));

        let mut encoder_dims = Vec::new();
        let mut i = 0;
        while let Some(seg) = layout.get(&format!("{ENCODER_PREFIX}{i}.weight")) {
            if i == 0 {
                encoder_dims.push(seg.shape[1]);
            }
            encoder_dims.push(seg.shape[0]);
            i += 1;
        }
        if encoder_dims.is_empty() {
            return Err(bad("no encoder layers"));
        }
        let mut channels = Vec::new();
        let mut kernel = 0;
        let mut b = 0;
        while let Some(seg) = layout.get(&format!("{CLASSIFIER_PREFIX}conv{b}.pointwise")) {
            channels.push(seg.shape[0]);
            kernel = shape(&format!("{CLASSIFIER_PREFIX}conv{b}.depthwise"))?[1];
            b += 1;
        }
        let fc0 = shape(&format!("{CLASSIFIER_PREFIX}fc0.weight"))?;
        let fc1 = shape(&format!("{CLASSIFIER_PREFIX}fc1.weight"))?;
        let arch = Self {
            autoencoder: AutoencoderSpec {
                encoder_dims,
                ..Default::default()
            },
            classifier: ClassifierSpec {
                channels,
                kernel,
                hidden: fc0[0],
                classes: fc1[0],
                ..Default::default()
            },
        };
        arch.validate()?;
        if &arch.layout() != layout {
            return Err(bad("segment order or shapes differ"));
        }
        Ok(arch)
    }
}

fn push_autoencoder(layout: &mut Layout, spec: &AutoencoderSpec) {
    for (i, w) in spec.encoder_dims.windows(2).enumerate() {
        layout.push(format!("{ENCODER_PREFIX}{i}.weight"), &[w[1], w[0]]);
        layout.push(format!("{ENCODER_PREFIX}{i}.bias"), &[w[1]]);
    }
    for (i, w) in spec.decoder_dims().windows(2).enumerate() {
        layout.push(format!("{DECODER_PREFIX}{i}.weight"), &[w[1], w[0]]);
        layout.push(format!("{DECODER_PREFIX}{i}.bias"), &[w[1]]);
    }
}

fn push_classifier(layout: &mut Layout, spec: &ClassifierSpec) {
    let mut c_in = 1;
    for (b, &c_out) in spec.channels.iter().enumerate() {
        layout.push(format!("{CLASSIFIER_PREFIX}conv{b}.depthwise"), &[c_in, spec.kernel]);
        layout.push(format!("{CLASSIFIER_PREFIX}conv{b}.depthwise_bias"), &[c_in]);
        layout.push(format!("{CLASSIFIER_PREFIX}conv{b}.pointwise"), &[c_out, c_in]);
        layout.push(format!("{CLASSIFIER_PREFIX}conv{b}.pointwise_bias"), &[c_out]);
        c_in = c_out;
    }
    layout.push(format!("{CLASSIFIER_PREFIX}fc0.weight"), &[spec.hidden, c_in]);
    layout.push(format!("{CLASSIFIER_PREFIX}fc0.bias"), &[spec.hidden]);
    layout.push(format!("{CLASSIFIER_PREFIX}fc1.weight"), &[spec.classes, spec.hidden]);
    layout.push(format!("{CLASSIFIER_PREFIX}fc1.bias"), &[spec.classes]);
}

/// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
/// weights and biases alike. Fan-in is the second weight dimension
/// (kernel length for depthwise kernels, input channels for pointwise).
fn init_layout(layout: &Layout, rng: &mut StreamRng) -> Vec<f64> {
    let mut values = vec![0.0; layout.total()];
    let mut fan_in = 1usize;
    for seg in layout.segments() {
        if seg.shape.len() == 2 {
            fan_in = seg.shape[1];
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut values[seg.range()] {
            *v = rng.random_range(-bound..bound);
        }
    }
    values
}

pub fn build_autoencoder(spec: &AutoencoderSpec, init_seed: u64) -> ParamVector {
    let layout = Architecture {
        autoencoder: spec.clone(),
        classifier: ClassifierSpec::default(),
    }
    .autoencoder_layout();
    let mut rng = rng::stream(init_seed, &[tag::INIT_AUTOENCODER]);
    let values = init_layout(&layout, &mut rng);
    ParamVector::from_values(Arc::new(layout), values).expect("sized by layout")
}

pub fn build_classifier(spec: &ClassifierSpec, init_seed: u64) -> ParamVector {
    let mut layout = Layout::new();
    push_classifier(&mut layout, spec);
    let mut rng = rng::stream(init_seed, &[tag::INIT_CLASSIFIER]);
    let values = init_layout(&layout, &mut rng);
    ParamVector::from_values(Arc::new(layout), values).expect("sized by layout")
}

#[derive(Debug, Clone)]
struct DenseSlot {
    layer: Dense,
    weight: Range<usize>,
    bias: Range<usize>,
}

#[derive(Debug, Clone)]
struct ConvSlot {
    layer: DsConv1d,
    depthwise: Range<usize>,
    depthwise_bias: Range<usize>,
    pointwise: Range<usize>,
    pointwise_bias: Range<usize>,
}

/// Activations of one dense layer needed for its backward pass.
struct DenseTrace {
    input: Array2<f64>,
    /// Post-activation output before dropout.
    act: Array2<f64>,
    relu: bool,
    mask: Option<Array2<f64>>,
}

struct ConvTrace {
    input: Array2<f64>,
    cache: DsConvCache,
    act: Array2<f64>,
}

struct ClassifierTrace {
    convs: Vec<ConvTrace>,
    head: Vec<DenseTrace>,
}

/// Which loss terms a pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Task {
    Reconstruction,
    Combined { lambda: f64 },
}

/// The assembled model: resolves every layer to its parameter ranges.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    layout: Arc<Layout>,
    encoder: Vec<DenseSlot>,
    decoder: Vec<DenseSlot>,
    convs: Vec<ConvSlot>,
    head: Vec<DenseSlot>,
    encoder_dropout: Dropout,
    classifier_dropout: Dropout,
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self, NnError> {
        arch.validate()?;
        let layout = Arc::new(arch.layout());
        let seg = |name: String| layout.get(&name).expect("layout built from arch").range();
        let dense_slots = |prefix: &str, dims: &[usize]| -> Vec<DenseSlot> {
            dims.windows(2)
                .enumerate()
                .map(|(i, w)| DenseSlot {
                    layer: Dense::new(w[0], w[1]),
                    weight: seg(format!("{prefix}{i}.weight")),
                    bias: seg(format!("{prefix}{i}.bias")),
                })
                .collect()
        };
        let encoder = dense_slots(ENCODER_PREFIX, &arch.autoencoder.encoder_dims);
        let decoder = dense_slots(DECODER_PREFIX, &arch.autoencoder.decoder_dims());
        let cls = &arch.classifier;
        let length = arch.autoencoder.code_dim();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (b, &c_out) in cls.channels.iter().enumerate() {
            let p = format!("{CLASSIFIER_PREFIX}conv{b}");
            convs.push(ConvSlot {
                layer: DsConv1d::new(c_in, c_out, cls.kernel, length)?,
                depthwise: seg(format!("{p}.depthwise")),
                depthwise_bias: seg(format!("{p}.depthwise_bias")),
                pointwise: seg(format!("{p}.pointwise")),
                pointwise_bias: seg(format!("{p}.pointwise_bias")),
            });
            c_in = c_out;
        }
        let head = dense_slots(&format!("{CLASSIFIER_PREFIX}fc"), &[c_in, cls.hidden, cls.classes]);
        Ok(Self {
            encoder_dropout: Dropout::new(arch.autoencoder.dropout)?,
            classifier_dropout: Dropout::new(cls.dropout)?,
            arch,
            layout,
            encoder,
            decoder,
            convs,
            head,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total()
    }

    pub fn input_dim(&self) -> usize {
        self.arch.autoencoder.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.classifier.classes
    }

    /// Flat index range of the classifier parameters.
    pub fn classifier_range(&self) -> Range<usize> {
        self.layout.prefix_range(CLASSIFIER_PREFIX).expect("classifier present")
    }

    pub fn autoencoder_range(&self) -> Range<usize> {
        0..self.classifier_range().start
    }

    /// Fresh parameters; the autoencoder and classifier parts use separate
    /// streams and match [`build_autoencoder`] / [`build_classifier`].
    pub fn init_params(&self, init_seed: u64) -> ParamVector {
        let ae = build_autoencoder(&self.arch.autoencoder, init_seed);
        let cls = build_classifier(&self.arch.classifier, init_seed);
        self.assemble(&ae, &cls).expect("layouts built from the same arch")
    }

    /// Concatenates autoencoder and classifier parameters.
    pub fn assemble(&self, autoencoder: &ParamVector, classifier: &ParamVector) -> Result<ParamVector, NnError> {
        if autoencoder.layout().as_ref() != &self.arch.autoencoder_layout()
            || classifier.layout().as_ref() != &self.arch.classifier_layout()
        {
            return Err(NnError::LayoutMismatch);
        }
        let mut values = autoencoder.values().to_vec();
        values.extend_from_slice(classifier.values());
        ParamVector::from_values(Arc::clone(&self.layout), values)
    }

    pub fn check_params(&self, params: &[f64]) -> Result<(), NnError> {
        if params.len() != self.num_params() {
            return Err(NnError::Shape {
                context: "model parameters".into(),
                expected: self.num_params(),
                found: params.len(),
            });
        }
        Ok(())
    }

    fn batch_matrix<'a>(&self, rows: impl ExactSizeIterator<Item = &'a [f64]>) -> Result<Array2<f64>, NnError> {
        let d = self.input_dim();
        let n = rows.len();
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            if r.len() != d {
                return Err(NnError::Shape {
                    context: "input features".into(),
                    expected: d,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Array2::from_shape_vec((n, d), data).expect("sized above"))
    }

    fn dense_stack_forward(
        &self,
        slots: &[DenseSlot],
        params: &[f64],
        mut x: Array2<f64>,
        relu_last: bool,
        dropout: Option<Dropout>,
        mut rng: Option<&mut StreamRng>,
        name: &str,
    ) -> Result<(Array2<f64>, Vec<DenseTrace>), NnError> {
        let mut traces = Vec::with_capacity(slots.len());
        let last = slots.len() - 1;
        for (i, slot) in slots.iter().enumerate() {
            let mut y = slot
                .layer
                .forward(&params[slot.weight.clone()], &params[slot.bias.clone()], x.view())?;
            let relu = i < last || relu_last;
            if relu {
                relu_inplace(&mut y);
            }
            check_finite(&y, &format!("{name}{i}"))?;
            let mut out = y.clone();
            let mask = match (dropout, i < last) {
                (Some(d), true) => d.forward(&mut out, rng.as_deref_mut()),
                _ => None,
            };
            traces.push(DenseTrace {
                input: x,
                act: y,
                relu,
                mask,
            });
            x = out;
        }
        Ok((x, traces))
    }

    fn dense_stack_backward(
        &self,
        slots: &[DenseSlot],
        params: &[f64],
        traces: &[DenseTrace],
        mut dy: Array2<f64>,
        grad: &mut [f64],
        want_dx: bool,
    ) -> Result<Option<Array2<f64>>, NnError> {
        for i in (0..slots.len()).rev() {
            let (slot, tr) = (&slots[i], &traces[i]);
            Dropout::backward(tr.mask.as_ref(), &mut dy);
            if tr.relu {
                relu_backward(&tr.act, &mut dy);
            }
            let (dw, db) = grad[slot.weight.start..slot.bias.end].split_at_mut(slot.weight.len());
            let dx = slot.layer.backward(
                &params[slot.weight.clone()],
                tr.input.view(),
                dy.view(),
                dw,
                db,
                want_dx || i > 0,
            )?;
            match dx {
                Some(dx) if i > 0 => dy = dx,
                other => return Ok(other),
            }
        }
        unreachable!("stack has at least one layer")
    }

    fn classifier_forward(
        &self,
        params: &[f64],
        code: &Array2<f64>,
        rng: Option<&mut StreamRng>,
    ) -> Result<(Array2<f64>, ClassifierTrace), NnError> {
        let length = self.arch.autoencoder.code_dim();
        let n = code.nrows();
        let mut a = code
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * length, 1))
            .expect("contiguous code");
        let mut convs = Vec::with_capacity(self.convs.len());
        for (b, slot) in self.convs.iter().enumerate() {
            let (mut y, cache) = slot.layer.forward(
                &params[slot.depthwise.clone()],
                &params[slot.depthwise_bias.clone()],
                &params[slot.pointwise.clone()],
                &params[slot.pointwise_bias.clone()],
                a.view(),
            )?;
            relu_inplace(&mut y);
            check_finite(&y, &format!("classifier.conv{b}"))?;
            convs.push(ConvTrace {
                input: a,
                cache,
                act: y.clone(),
            });
            a = y;
        }
        let pooled = global_avg_pool(a.view(), length);
        let (logits, head) = self.dense_stack_forward(
            &self.head,
            params,
            pooled,
            false,
            Some(self.classifier_dropout),
            rng,
            "classifier.fc",
        )?;
        Ok((logits, ClassifierTrace { convs, head }))
    }

    fn classifier_backward(
        &self,
        params: &[f64],
        trace: &ClassifierTrace,
        dlogits: Array2<f64>,
        grad: &mut [f64],
    ) -> Result<Array2<f64>, NnError> {
        let length = self.arch.autoencoder.code_dim();
        let dpooled = self
            .dense_stack_backward(&self.head, params, &trace.head, dlogits, grad, true)?
            .expect("requested");
        let n = dpooled.nrows();
        let mut dy = global_avg_pool_backward(dpooled.view(), length);
        for (slot, tr) in self.convs.iter().zip(&trace.convs).rev() {
            relu_backward(&tr.act, &mut dy);
            let (dw, rest) = grad[slot.depthwise.start..slot.pointwise_bias.end].split_at_mut(slot.depthwise.len());
            let (dwb, rest) = rest.split_at_mut(slot.depthwise_bias.len());
            let (dp, dpb) = rest.split_at_mut(slot.pointwise.len());
            dy = slot
                .layer
                .backward(
                    &params[slot.depthwise.clone()],
                    &params[slot.pointwise.clone()],
                    tr.input.view(),
                    &tr.cache,
                    dy.view(),
                    [dw, dwb, dp, dpb],
                    true,
                )?
                .expect("requested");
        }
        Ok(dy.into_shape_with_order((n, length)).expect("one channel at the input"))
    }

    /// Shared forward (and optional backward) pass. Loss terms are batch
    /// means; the gradient is accumulated into `grad` when given.
    fn pass(
        &self,
        params: &[f64],
        x: Array2<f64>,
        labels: Option<&[usize]>,
        task: Task,
        mut rng: Option<&mut StreamRng>,
        grad: Option<&mut [f64]>,
    ) -> Result<TrainStepReport, NnError> {
        self.check_params(params)?;
        let n = x.nrows();
        if n == 0 {
            return Err(NnError::Invalid("empty batch".into()));
        }
        let (code, enc_trace) = self.dense_stack_forward(
            &self.encoder,
            params,
            x,
            true,
            Some(self.encoder_dropout),
            rng.as_deref_mut(),
            "encoder.",
        )?;
        let input = &enc_trace[0].input;

        let (x_hat, dec_trace) = self.dense_stack_forward(&self.decoder, params, code.clone(), false, None, None, "decoder.")?;
        let diff = &x_hat - input;
        let loss_ae = diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64;

        let (loss_cls, ae_weight, cls_out) = match task {
            Task::Reconstruction => (0.0, 1.0, None),
            Task::Combined { lambda } => {
                let labels = labels.ok_or_else(|| NnError::Invalid("combined loss needs labels".into()))?;
                let (logits, trace) = self.classifier_forward(params, &code, rng)?;
                let mut dlogits = Array2::zeros(logits.raw_dim());
                let mut loss = 0.0;
                for (s, &label) in labels.iter().enumerate() {
                    let row = logits.row(s).to_vec();
                    let (l, g) = crate::nn::softmax_cross_entropy(&row, label)?;
                    loss += l;
                    for (d, v) in dlogits.row_mut(s).iter_mut().zip(g) {
                        *d = v / n as f64;
                    }
                }
                (loss / n as f64, lambda, Some((trace, dlogits)))
            }
        };
        let report = TrainStepReport {
            loss_ae,
            loss_cls,
            loss_total: loss_cls + ae_weight * loss_ae,
            batch_size: n,
        };
        if !report.loss_total.is_finite() {
            return Err(NnError::NonFinite { layer: "loss".into() });
        }

        let Some(grad) = grad else {
            return Ok(report);
        };
        self.check_params(grad)?;
        let mut dcode = Array2::<f64>::zeros(code.raw_dim());
        if ae_weight != 0.0 {
            let scale = 2.0 * ae_weight / diff.len() as f64;
            let dx_hat = diff.mapv(|d| d * scale);
            dcode += &self
                .dense_stack_backward(&self.decoder, params, &dec_trace, dx_hat, grad, true)?
                .expect("requested");
        }
        if let Some((trace, dlogits)) = cls_out {
            dcode += &self.classifier_backward(params, &trace, dlogits, grad)?;
        }
        self.dense_stack_backward(&self.encoder, params, &enc_trace, dcode, grad, false)?;
        Ok(report)
    }

    /// Bottleneck codes for a batch of feature rows (inference mode).
    pub fn encode(&self, params: &[f64], features: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_params(params)?;
        let (code, _) = self.dense_stack_forward(&self.encoder, params, features.to_owned(), true, None, None, "encoder.")?;
        Ok(code)
    }

    /// Class logits for a batch of feature rows (inference mode).
    pub fn logits(&self, params: &[f64], features: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        let code = self.encode(params, features)?;
        Ok(self.classifier_forward(params, &code, None)?.0)
    }

    /// Softmax probabilities for each row, evaluated in fixed-size chunks.
    pub fn predict_proba(&self, params: &[f64], features: &[&[f64]]) -> Result<Array2<f64>, NnError> {
        let mut out = Array2::zeros((features.len(), self.num_classes()));
        for (c, chunk) in features.chunks(INFERENCE_CHUNK).enumerate() {
            let x = self.batch_matrix(chunk.iter().copied())?;
            let logits = self.logits(params, x.view())?;
            for (r, row) in logits.rows().into_iter().enumerate() {
                let p = crate::nn::softmax(row.as_slice().expect("standard layout"));
                out.row_mut(c * INFERENCE_CHUNK + r).assign(&ndarray::ArrayView1::from(&p));
            }
        }
        Ok(out)
    }

    /// Argmax class of each row (inference mode).
    pub fn classify(&self, params: &[f64], features: &[&[f64]]) -> Result<Vec<ClassId>, NnError> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(INFERENCE_CHUNK) {
            let x = self.batch_matrix(chunk.iter().copied())?;
            let logits = self.logits(params, x.view())?;
            out.extend(logits.rows().into_iter().map(|r| argmax_class(r.as_slice().expect("standard layout"))));
        }
        Ok(out)
    }

    /// Argmax class and full distribution for one fingerprint.
    pub fn predict(&self, params: &[f64], features: &[f64]) -> Result<(ClassId, Vec<f64>), NnError> {
        let p = self.predict_proba(params, &[features])?;
        let probs = p.row(0).to_vec();
        Ok((argmax_class(&probs), probs))
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax_class(values: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    ClassId::new(best).expect("model emits at most NUM_CLASSES outputs")
}

/// One supervised training example (true or pseudo label).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub features: Arc<[f64]>,
    pub label: ClassId,
}

impl TrainExample {
    pub fn from_sample(sample: &Sample) -> Option<Self> {
        Some(Self {
            features: Arc::clone(&sample.features),
            label: sample.label?,
        })
    }
}

/// `loss_cls + lambda * loss_ae` over labeled examples.
#[derive(Debug, Clone, Copy)]
pub struct CombinedObjective<'a> {
    pub network: &'a Network,
    pub lambda: f64,
}

impl CombinedObjective<'_> {
    fn inputs(&self, batch: &[&TrainExample]) -> Result<(Array2<f64>, Vec<usize>), NnError> {
        let x = self.network.batch_matrix(batch.iter().map(|e| &e.features[..]))?;
        Ok((x, batch.iter().map(|e| e.label.index()).collect()))
    }
}

impl Objective for CombinedObjective<'_> {
    type Item = TrainExample;

    fn num_params(&self) -> usize {
        self.network.num_params()
    }

    fn forward_backward(
        &self,
        params: &[f64],
        batch: &[&TrainExample],
        dropout: Option<&mut StreamRng>,
        grad: &mut [f64],
    ) -> Result<TrainStepReport, NnError> {
        let (x, labels) = self.inputs(batch)?;
        self.network
            .pass(params, x, Some(&labels), Task::Combined { lambda: self.lambda }, dropout, Some(grad))
    }

    fn evaluate(&self, params: &[f64], batch: &[&TrainExample]) -> Result<TrainStepReport, NnError> {
        let (x, labels) = self.inputs(batch)?;
        self.network
            .pass(params, x, Some(&labels), Task::Combined { lambda: self.lambda }, None, None)
    }
}

/// Reconstruction MSE only; never sees labels.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionObjective<'a> {
    pub network: &'a Network,
}

impl Objective for ReconstructionObjective<'_> {
    type Item = Arc<[f64]>;

    fn num_params(&self) -> usize {
        self.network.num_params()
    }

    fn forward_backward(
        &self,
        params: &[f64],
        batch: &[&Arc<[f64]>],
        dropout: Option<&mut StreamRng>,
        grad: &mut [f64],
    ) -> Result<TrainStepReport, NnError> {
        let x = self.network.batch_matrix(batch.iter().map(|f| &f[..]))?;
        self.network.pass(params, x, None, Task::Reconstruction, dropout, Some(grad))
    }

    fn evaluate(&self, params: &[f64], batch: &[&Arc<[f64]>]) -> Result<TrainStepReport, NnError> {
        let x = self.network.batch_matrix(batch.iter().map(|f| &f[..]))?;
        self.network.pass(params, x, None, Task::Reconstruction, None, None)
    }
}

/// Network plus parameters and the autoencoder loss weight.
#[derive(Debug, Clone)]
pub struct CombinedModel {
    pub network: Arc<Network>,
    pub params: ParamVector,
    pub lambda: f64,
}

impl CombinedModel {
    pub fn new(network: Arc<Network>, params: ParamVector, lambda: f64) -> Result<Self, NnError> {
        network.check_params(params.values())?;
        if !(lambda >= 0.0) {
            return Err(NnError::Invalid(format!("lambda must be non-negative, got {lambda}")));
        }
        Ok(Self {
            network,
            params,
            lambda,
        })
    }

    pub fn predict(&self, features: &[f64]) -> Result<(ClassId, Vec<f64>), NnError> {
        self.network.predict(self.params.values(), features)
    }
}

/// Dropout-free combined loss of a labeled batch.
pub fn combined_forward_loss(model: &CombinedModel, batch: &[Sample]) -> Result<TrainStepReport, NnError> {
    let examples = batch
        .iter()
        .map(|s| TrainExample::from_sample(s).ok_or_else(|| NnError::Invalid("unlabeled sample in a labeled batch".into())))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&TrainExample> = examples.iter().collect();
    CombinedObjective {
        network: &model.network,
        lambda: model.lambda,
    }
    .evaluate(model.params.values(), &refs)
}

/// Mean reconstruction loss over a feature set, dropout off.
pub fn reconstruction_loss(network: &Network, params: &[f64], features: &[Arc<[f64]>]) -> Result<f64, NnError> {
    let objective = ReconstructionObjective { network };
    let mut total = 0.0;
    for chunk in features.chunks(INFERENCE_CHUNK) {
        let refs: Vec<&Arc<[f64]>> = chunk.iter().collect();
        total += objective.evaluate(params, &refs)?.loss_ae * chunk.len() as f64;
    }
    Ok(total / features.len().max(1) as f64)
}

/// MSE-only training of the autoencoder part on unlabeled feature vectors.
/// Classifier parameters receive zero gradient and stay untouched.
pub fn pretrain_autoencoder(
    network: &Network,
    params: &mut ParamVector,
    features: &[Arc<[f64]>],
    epochs: usize,
    batch_size: usize,
    adam: AdamConfig,
    rng: &mut StreamRng,
) -> Result<Vec<TrainStepReport>, NnError> {
    if features.is_empty() {
        return Err(NnError::Invalid("pretraining needs at least one sample".into()));
    }
    adam.validate()?;
    let mut state = AdamState::new(params.len(), adam);
    train_epochs(
        &ReconstructionObjective { network },
        params.values_mut(),
        features,
        epochs,
        batch_size,
        &mut state,
        None,
        rng,
    )
}
