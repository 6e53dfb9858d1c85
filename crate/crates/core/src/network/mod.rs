//! Feature generator `F`, softmax classifier `C_N`, and the cosine prototype
//! classifier `C_P`, with hand-written reverse-mode gradients.
//!
//! `F`: `z -> W2 relu(W1 z + b1) + b2` (input -> hidden -> feature).
//! `C_N`: `f -> V2 relu(V1 f + c1) + c2` (feature -> cls_hidden -> classes).
//! Weight matrices are stored `fan_in x fan_out` so a batch of row vectors
//! multiplies on the left.

mod checkpoint;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, ModelState};
pub use optim::{adam_step, AdamConfig, AdamMoments, OptimizerState};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_FEATURE: usize = 512;
pub const DEFAULT_CLS_HIDDEN: usize = 512;

/// Probabilities below this are clamped inside the log.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkDims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub cls_hidden: usize,
    pub classes: usize,
}

impl NetworkDims {
    pub fn new(input: usize, classes: usize) -> Self {
        Self {
            input,
            hidden: DEFAULT_HIDDEN,
            feature: DEFAULT_FEATURE,
            cls_hidden: DEFAULT_CLS_HIDDEN,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0
            || self.hidden == 0
            || self.feature == 0
            || self.cls_hidden == 0
            || self.classes < 2
        {
            return Err(Error::invalid(format!(
                "inconsistent network dims {self:?}"
            )));
        }
        Ok(())
    }
}

/// Named flat views of parameter blocks, in a fixed order.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<(&'static str, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

macro_rules! two_layer_params {
    ($name:ident, $prefix:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pub w1: Array2<f64>,
            pub b1: Array1<f64>,
            pub w2: Array2<f64>,
            pub b2: Array1<f64>,
        }

        impl $name {
            pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
                Self {
                    w1: Array2::zeros((input, hidden)),
                    b1: Array1::zeros(hidden),
                    w2: Array2::zeros((hidden, output)),
                    b2: Array1::zeros(output),
                }
            }

            pub fn zeros_like(&self) -> Self {
                Self::zeros(self.w1.nrows(), self.w1.ncols(), self.w2.ncols())
            }

            pub fn input_dim(&self) -> usize {
                self.w1.nrows()
            }

            pub fn hidden_dim(&self) -> usize {
                self.w1.ncols()
            }

            pub fn output_dim(&self) -> usize {
                self.w2.ncols()
            }

            /// `self += scale * other`.
            pub fn add_scaled(&mut self, scale: f64, other: &Self) {
                self.w1.scaled_add(scale, &other.w1);
                self.b1.scaled_add(scale, &other.b1);
                self.w2.scaled_add(scale, &other.w2);
                self.b2.scaled_add(scale, &other.b2);
            }

            pub fn is_finite(&self) -> bool {
                self.blocks()
                    .iter()
                    .all(|(_, b)| b.iter().all(|v| v.is_finite()))
            }

            /// One-sample forward pass, written out without batching.
            pub fn forward_one(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
                let act = (x.dot(&self.w1) + &self.b1).mapv(relu);
                act.dot(&self.w2) + &self.b2
            }

            fn forward_trace(&self, x: ArrayView2<'_, f64>) -> LayerTrace {
                let act = (x.dot(&self.w1) + &self.b1).mapv(relu);
                let out = act.dot(&self.w2) + &self.b2;
                LayerTrace { act, out }
            }

            pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
                self.forward_trace(x).out
            }

            /// Gradients with respect to the parameters (if requested) and
            /// the inputs, given `d_out` for a batch traced at `x`.
            fn backward(
                &self,
                x: ArrayView2<'_, f64>,
                trace: &LayerTrace,
                d_out: ArrayView2<'_, f64>,
                want_params: bool,
                want_input: bool,
            ) -> (Option<Self>, Option<Array2<f64>>) {
                let mut d_act = d_out.dot(&self.w2.t());
                Zip::from(&mut d_act).and(&trace.act).for_each(|g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
                let grads = want_params.then(|| Self {
                    w1: x.t().dot(&d_act),
                    b1: d_act.sum_axis(Axis(0)),
                    w2: trace.act.t().dot(&d_out),
                    b2: d_out.sum_axis(Axis(0)),
                });
                let d_in = want_input.then(|| d_act.dot(&self.w1.t()));
                (grads, d_in)
            }
        }

        impl ParamBlocks for $name {
            fn blocks(&self) -> Vec<(&'static str, &[f64])> {
                vec![
                    (
                        concat!($prefix, ".w1"),
                        self.w1.as_slice().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".b1"),
                        self.b1.as_slice().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".w2"),
                        self.w2.as_slice().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".b2"),
                        self.b2.as_slice().expect("standard layout"),
                    ),
                ]
            }

            fn blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
                vec![
                    (
                        concat!($prefix, ".w1"),
                        self.w1.as_slice_mut().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".b1"),
                        self.b1.as_slice_mut().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".w2"),
                        self.w2.as_slice_mut().expect("standard layout"),
                    ),
                    (
                        concat!($prefix, ".b2"),
                        self.b2.as_slice_mut().expect("standard layout"),
                    ),
                ]
            }
        }
    };
}

two_layer_params!(GeneratorParams, "gen");
two_layer_params!(ClassifierParams, "cls");

struct LayerTrace {
    act: Array2<f64>,
    out: Array2<f64>,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Generator activations kept for the backward pass.
pub struct GeneratorTrace {
    inner: LayerTrace,
}

impl GeneratorTrace {
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.inner.out.view()
    }
}

impl GeneratorParams {
    pub fn trace(&self, z: ArrayView2<'_, f64>) -> GeneratorTrace {
        GeneratorTrace {
            inner: self.forward_trace(z),
        }
    }

    pub fn features(&self, z: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_batch(z)
    }

    /// Parameter gradients for `d_features` at a traced batch.
    pub fn backprop(
        &self,
        z: ArrayView2<'_, f64>,
        trace: &GeneratorTrace,
        d_features: ArrayView2<'_, f64>,
    ) -> GeneratorParams {
        self.backward(z, &trace.inner, d_features, true, false)
            .0
            .expect("requested")
    }
}

pub fn forward_generator(params: &GeneratorParams, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    if z.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            found: z.len(),
        });
    }
    let f = params.forward_one(z);
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generator output".into()));
    }
    Ok(f)
}

/// Max-subtracted softmax over each row.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        softmax_inplace(row.as_slice_mut().expect("row of owned array"));
    }
    out
}

fn softmax_inplace(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn softmax(logits: ArrayView1<'_, f64>) -> Array1<f64> {
    let mut v = logits.to_owned();
    softmax_inplace(v.as_slice_mut().expect("owned"));
    v
}

pub fn predict_neural(cls: &ClassifierParams, f: ArrayView1<'_, f64>) -> Array1<f64> {
    softmax(cls.forward_one(f).view())
}

impl ClassifierParams {
    pub fn logits(&self, f: ArrayView2<'_, f64>) -> Array2<f64> {
        self.forward_batch(f)
    }

    pub fn probabilities(&self, f: ArrayView2<'_, f64>) -> Array2<f64> {
        softmax_rows(self.logits(f).view())
    }
}

/// Per-class prototype vectors with the number of contributing samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    pub vectors: Array2<f64>,
    pub counts: Vec<usize>,
    pub amended: bool,
}

impl PrototypeTable {
    pub fn empty(classes: usize, dim: usize) -> Self {
        Self {
            vectors: Array2::zeros((classes, dim)),
            counts: vec![0; classes],
            amended: false,
        }
    }

    /// Class means of `features` grouped by `labels`; rows with `None` are skipped.
    pub fn from_class_means(
        features: ArrayView2<'_, f64>,
        labels: impl IntoIterator<Item = Option<usize>>,
        classes: usize,
    ) -> Self {
        let mut table = Self::empty(classes, features.ncols());
        for (row, label) in features.rows().into_iter().zip(labels) {
            if let Some(c) = label {
                table.vectors.row_mut(c).scaled_add(1.0, &row);
                table.counts[c] += 1;
            }
        }
        for (c, &n) in table.counts.iter().enumerate() {
            if n > 0 {
                table.vectors.row_mut(c).mapv_inplace(|v| v / n as f64);
            }
        }
        table
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_defined(&self, class: usize) -> bool {
        self.counts[class] > 0
    }

    pub fn defined_classes(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.is_defined(c))
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.counts.iter().all(|&n| n > 0)
    }

    /// `softmax(tau * cos(f_i, mu_c))` for every row of `features`.
    pub fn probabilities(&self, features: ArrayView2<'_, f64>, tau: f64) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: features.ncols(),
            });
        }
        let mut unit_protos = self.vectors.clone();
        for (c, mut row) in unit_protos.rows_mut().into_iter().enumerate() {
            if !self.is_defined(c) {
                return Err(Error::UndefinedPrototype(c));
            }
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::ZeroNorm(format!("prototype {c}")));
            }
            row.mapv_inplace(|v| v / n);
        }
        let mut unit_feats = features.to_owned();
        for (i, mut row) in unit_feats.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::ZeroNorm(format!("feature row {i}")));
            }
            row.mapv_inplace(|v| v / n);
        }
        let scores = unit_feats.dot(&unit_protos.t()) * tau;
        Ok(softmax_rows(scores.view()))
    }
}

pub fn predict_prototype(
    prototypes: &PrototypeTable,
    f: ArrayView1<'_, f64>,
    tau: f64,
) -> Result<Array1<f64>> {
    let batch = f.insert_axis(Axis(0));
    Ok(prototypes.probabilities(batch, tau)?.row(0).to_owned())
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `C_N` on labeled features plus its gradients.
pub struct ClassifierLoss {
    pub loss: f64,
    pub d_features: Array2<f64>,
    pub grad_cls: Option<ClassifierParams>,
    pub clamped: usize,
}

/// Cross-entropy with the log clamp. Samples whose probability falls below
/// the clamp contribute a constant and therefore no gradient.
pub fn classifier_loss(
    cls: &ClassifierParams,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
    want_param_grads: bool,
) -> ClassifierLoss {
    let n = labels.len();
    assert_eq!(features.nrows(), n, "one label per feature row");
    let trace = cls.forward_trace(features);
    let mut d_logits = trace.out.clone();
    let mut total = 0.0;
    let mut clamped = 0;
    let log_clamp = LOG_CLAMP.ln();
    let inv_n = 1.0 / n.max(1) as f64;
    for (mut row, &y) in d_logits.rows_mut().into_iter().zip(labels) {
        let r = row.as_slice_mut().expect("owned row");
        let m = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + r.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let logp = r[y] - lse;
        if logp < log_clamp {
            total -= log_clamp;
            clamped += 1;
            r.fill(0.0);
            continue;
        }
        total -= logp;
        for v in r.iter_mut() {
            *v = (*v - lse).exp() * inv_n;
        }
        r[y] -= inv_n;
    }
    let (grad_cls, d_features) =
        cls.backward(features, &trace, d_logits.view(), want_param_grads, true);
    ClassifierLoss {
        loss: total * inv_n,
        d_features: d_features.expect("requested"),
        grad_cls,
        clamped,
    }
}

pub struct SupervisedLoss {
    pub loss: f64,
    pub grad_gen: GeneratorParams,
    pub grad_cls: ClassifierParams,
    pub clamped: usize,
}

/// `M_s` over labeled embeddings, with gradients for both networks.
pub fn supervised_loss(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    gen: &GeneratorParams,
    cls: &ClassifierParams,
) -> Result<SupervisedLoss> {
    if labels.is_empty() {
        return Err(Error::invalid("supervised loss over an empty pool"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= cls.output_dim()) {
        return Err(Error::invalid(format!(
            "label {bad} outside the classifier range"
        )));
    }
    let trace = gen.trace(z);
    let out = classifier_loss(cls, trace.features(), labels, true);
    if !out.loss.is_finite() {
        return Err(Error::NonFinite("supervised loss".into()));
    }
    let grad_gen = gen.backprop(z, &trace, out.d_features.view());
    Ok(SupervisedLoss {
        loss: out.loss,
        grad_gen,
        grad_cls: out.grad_cls.expect("requested"),
        clamped: out.clamped,
    })
}

/// Loss only, no gradients.
pub fn supervised_loss_value(
    z: ArrayView2<'_, f64>,
    labels: &[usize],
    gen: &GeneratorParams,
    cls: &ClassifierParams,
) -> f64 {
    let logits = cls.logits(gen.features(z).view());
    let log_clamp = LOG_CLAMP.ln();
    let total: f64 = logits
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            -(row[y] - lse).max(log_clamp)
        })
        .sum();
    total / labels.len().max(1) as f64
}

fn glorot<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

/// Uniform fan-based weights, zero biases.
pub fn init_params(dims: &NetworkDims, seed: u64) -> Result<(GeneratorParams, ClassifierParams)> {
    dims.validate()?;
    let mut rng = rng::stream(seed, Stream::Init);
    let mut gen = GeneratorParams::zeros(dims.input, dims.hidden, dims.feature);
    let mut cls = ClassifierParams::zeros(dims.feature, dims.cls_hidden, dims.classes);
    gen.w1 = glorot(dims.input, dims.hidden, &mut rng);
    gen.w2 = glorot(dims.hidden, dims.feature, &mut rng);
    cls.w1 = glorot(dims.feature, dims.cls_hidden, &mut rng);
    cls.w2 = glorot(dims.cls_hidden, dims.classes, &mut rng);
    Ok((gen, cls))
}
