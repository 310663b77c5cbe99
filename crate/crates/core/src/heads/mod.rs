//! Trainable aggregation heads.
//!
//! Every head starts with the same time-distributed dense layer: each of the
//! `F` frame feature vectors is mapped to a softmax distribution over the `C`
//! locations, producing an `F x C` matrix `P`. The head then combines the
//! rows of `P` into one distribution:
//!
//! | head      | output                                          |
//! |-----------|-------------------------------------------------|
//! | Product   | `softmax(Σ_k ln P[k])`, i.e. normalised product |
//! | Flatten   | `softmax(vec(P) · W2 + b2)`                     |
//! | Average   | `mean_k P[k]`                                   |
//! | Max       | `normalise(max_k P[k])`                         |
//! | LSTM      | `softmax(h_F)` of an LSTM over the rows of `P`  |
//! | BiLSTM    | `softmax(h_F(fwd) + h_1(bwd))`                  |
//!
//! The LSTM hidden size equals `C`.

pub mod checkpoint;
pub mod lstm;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::Matrix;
use crate::training::PROB_FLOOR;
use lstm::{LstmParams, LstmTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Product,
    Flatten,
    Average,
    Max,
    Lstm,
    BiLstm,
}

impl HeadKind {
    /// All kinds, in report order.
    pub const ALL: [HeadKind; 6] = [
        HeadKind::Product,
        HeadKind::Flatten,
        HeadKind::Average,
        HeadKind::Max,
        HeadKind::Lstm,
        HeadKind::BiLstm,
    ];

    /// Short lowercase name used on the command line and in CSV files.
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Product => "product",
            HeadKind::Flatten => "flatten",
            HeadKind::Average => "average",
            HeadKind::Max => "max",
            HeadKind::Lstm => "lstm",
            HeadKind::BiLstm => "bilstm",
        }
    }

    /// Name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            HeadKind::Product => "Product",
            HeadKind::Flatten => "Flatten",
            HeadKind::Average => "Average",
            HeadKind::Max => "Max",
            HeadKind::Lstm => "LSTM",
            HeadKind::BiLstm => "BidirectionalLSTM",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.get(tag as usize).copied()
    }

    /// Whether the output is invariant to the order of frames.
    pub fn is_order_invariant(self) -> bool {
        matches!(self, HeadKind::Product | HeadKind::Average | HeadKind::Max)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == lower || k.display_name().eq_ignore_ascii_case(&lower))
            .ok_or_else(|| {
                let valid: Vec<_> = HeadKind::ALL.iter().map(|k| k.name()).collect();
                Error::invalid(format!(
                    "unknown head `{s}`, expected one of: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: vec![0.0; output],
        }
    }

    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Matrix::glorot(input, output, rng),
            bias: vec![0.0; output],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        self.weight.accumulate_vec_mul(x, &mut out);
        out
    }
}

/// Parameters specific to each head, after the shared dense layer.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams {
    Product,
    Flatten(Dense),
    Average,
    Max,
    Lstm(LstmParams),
    BiLstm {
        forward: LstmParams,
        backward: LstmParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    frames: usize,
    pub dense: Dense,
    pub head: HeadParams,
}

/// Parameter gradients share the model layout.
pub type Gradients = HeadModel;

impl HeadModel {
    /// Model with every parameter zero.
    pub fn zeros(kind: HeadKind, frames: usize, dim: usize, classes: usize) -> Self {
        let head = match kind {
            HeadKind::Product => HeadParams::Product,
            HeadKind::Flatten => HeadParams::Flatten(Dense::zeros(frames * classes, classes)),
            HeadKind::Average => HeadParams::Average,
            HeadKind::Max => HeadParams::Max,
            HeadKind::Lstm => HeadParams::Lstm(LstmParams::zeros(classes, classes)),
            HeadKind::BiLstm => HeadParams::BiLstm {
                forward: LstmParams::zeros(classes, classes),
                backward: LstmParams::zeros(classes, classes),
            },
        };
        Self {
            frames,
            dense: Dense::zeros(dim, classes),
            head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind(), self.frames, self.dim(), self.classes())
    }

    pub fn kind(&self) -> HeadKind {
        match self.head {
            HeadParams::Product => HeadKind::Product,
            HeadParams::Flatten(_) => HeadKind::Flatten,
            HeadParams::Average => HeadKind::Average,
            HeadParams::Max => HeadKind::Max,
            HeadParams::Lstm(_) => HeadKind::Lstm,
            HeadParams::BiLstm { .. } => HeadKind::BiLstm,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dense.weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.dense.weight.cols()
    }

    /// LSTM hidden size; equal to the class count.
    pub fn hidden(&self) -> usize {
        self.classes()
    }

    /// Parameter blocks in checkpoint order: dense weight, dense bias, then
    /// head-specific blocks (second dense layer; or LSTM input weights,
    /// recurrent weights and biases gate by gate, forward set first).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out = vec![self.dense.weight.as_slice(), self.dense.bias.as_slice()];
        match &self.head {
            HeadParams::Flatten(d) => {
                out.push(d.weight.as_slice());
                out.push(d.bias.as_slice());
            }
            HeadParams::Lstm(p) => out.extend(p.blocks()),
            HeadParams::BiLstm { forward, backward } => {
                out.extend(forward.blocks());
                out.extend(backward.blocks());
            }
            HeadParams::Product | HeadParams::Average | HeadParams::Max => {}
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.dense.weight.as_mut_slice(), self.dense.bias.as_mut_slice()];
        match &mut self.head {
            HeadParams::Flatten(d) => {
                out.push(d.weight.as_mut_slice());
                out.push(d.bias.as_mut_slice());
            }
            HeadParams::Lstm(p) => out.extend(p.blocks_mut()),
            HeadParams::BiLstm { forward, backward } => {
                out.extend(forward.blocks_mut());
                out.extend(backward.blocks_mut());
            }
            HeadParams::Product | HeadParams::Average | HeadParams::Max => {}
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, features: &FeatureMatrix) -> Result<ForwardTrace> {
        head_forward(self, features)
    }

    /// Output distribution for one scene.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        Ok(head_forward(self, features)?.output)
    }
}

/// Seeded Glorot-uniform initialisation; biases zero, LSTM forget bias 1.
pub fn init_params(kind: HeadKind, frames: usize, dim: usize, classes: usize, seed: u64) -> Result<HeadModel> {
    if frames == 0 || dim == 0 || classes == 0 {
        return Err(Error::invalid(format!(
            "model dimensions must be positive, got F={frames} D={dim} C={classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dense = Dense::init(dim, classes, &mut rng);
    let head = match kind {
        HeadKind::Product => HeadParams::Product,
        HeadKind::Flatten => HeadParams::Flatten(Dense::init(frames * classes, classes, &mut rng)),
        HeadKind::Average => HeadParams::Average,
        HeadKind::Max => HeadParams::Max,
        HeadKind::Lstm => HeadParams::Lstm(LstmParams::init(classes, classes, &mut rng)),
        HeadKind::BiLstm => {
            let forward = LstmParams::init(classes, classes, &mut rng);
            let backward = LstmParams::init(classes, classes, &mut rng);
            HeadParams::BiLstm { forward, backward }
        }
    };
    Ok(HeadModel { frames, dense, head })
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `y ⊙ (dy - <dy, y>)`.
fn softmax_backward(y: &[f64], dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)).collect()
}

/// Column sums of `m`, each summed in ascending order so the result does
/// not depend on row order.
fn column_sums_sorted(m: &Matrix) -> Vec<f64> {
    let mut column = vec![0.0; m.rows()];
    (0..m.cols())
        .map(|c| {
            for (r, v) in column.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
            column.sort_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect()
}

fn check_features(model: &HeadModel, features: &FeatureMatrix) -> Result<()> {
    if features.rows() != model.frames || features.cols() != model.dim() {
        return Err(Error::invalid(format!(
            "features are {}x{}, model expects {}x{}",
            features.rows(),
            features.cols(),
            model.frames,
            model.dim()
        )));
    }
    Ok(())
}

/// Per-frame logits and softmax distributions: `P[k] = softmax(x_k · W + b)`.
pub fn dense_timedistributed(features: &FeatureMatrix, dense: &Dense) -> Result<(Matrix, Matrix)> {
    if features.cols() != dense.weight.rows() {
        return Err(Error::invalid(format!(
            "feature width {} does not match dense input {}",
            features.cols(),
            dense.weight.rows()
        )));
    }
    let classes = dense.weight.cols();
    let mut logits = Matrix::zeros(features.rows(), classes);
    let mut probs = Matrix::zeros(features.rows(), classes);
    let mut x = vec![0.0; features.cols()];
    for k in 0..features.rows() {
        x.iter_mut()
            .zip(features.row(k))
            .for_each(|(d, s)| *d = f64::from(*s));
        let z = dense.apply(&x);
        probs.row_mut(k).copy_from_slice(&softmax(&z));
        logits.row_mut(k).copy_from_slice(&z);
    }
    Ok((logits, probs))
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceDetail {
    Product,
    Flatten,
    Average,
    /// Winning frame per class and the pre-normalisation total.
    Max { argmax: Vec<usize>, total: f64 },
    Lstm(LstmTrace),
    BiLstm { forward: LstmTrace, backward: LstmTrace },
}

/// Everything the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub logits: Matrix,
    /// Per-frame distributions, `F x C`.
    pub probs: Matrix,
    pub detail: TraceDetail,
    pub output: Vec<f64>,
}

pub fn head_forward(model: &HeadModel, features: &FeatureMatrix) -> Result<ForwardTrace> {
    check_features(model, features)?;
    let (logits, probs) = dense_timedistributed(features, &model.dense)?;
    let frames = probs.rows();
    let classes = probs.cols();

    let (detail, output) = match &model.head {
        HeadParams::Product => {
            let mut log_probs = Matrix::zeros(frames, classes);
            for k in 0..frames {
                log_probs.row_mut(k).copy_from_slice(&log_softmax(logits.row(k)));
            }
            (TraceDetail::Product, softmax(&column_sums_sorted(&log_probs)))
        }
        HeadParams::Flatten(second) => (TraceDetail::Flatten, softmax(&second.apply(probs.as_slice()))),
        HeadParams::Average => {
            let y = column_sums_sorted(&probs)
                .into_iter()
                .map(|s| s / frames as f64)
                .collect();
            (TraceDetail::Average, y)
        }
        HeadParams::Max => {
            let mut argmax = vec![0; classes];
            let mut maxima = vec![f64::NEG_INFINITY; classes];
            for k in 0..frames {
                for (c, v) in probs.row(k).iter().enumerate() {
                    if *v > maxima[c] {
                        maxima[c] = *v;
                        argmax[c] = k;
                    }
                }
            }
            let total: f64 = maxima.iter().sum();
            let y = maxima.iter().map(|m| m / total).collect();
            (TraceDetail::Max { argmax, total }, y)
        }
        HeadParams::Lstm(params) => {
            let trace = lstm::forward(params, (0..frames).map(|k| probs.row(k)));
            let y = softmax(&trace.final_hidden(classes));
            (TraceDetail::Lstm(trace), y)
        }
        HeadParams::BiLstm { forward, backward } => {
            let fwd = lstm::forward(forward, (0..frames).map(|k| probs.row(k)));
            let bwd = lstm::forward(backward, (0..frames).rev().map(|k| probs.row(k)));
            let combined: Vec<f64> = fwd
                .final_hidden(classes)
                .iter()
                .zip(bwd.final_hidden(classes))
                .map(|(a, b)| a + b)
                .collect();
            (
                TraceDetail::BiLstm {
                    forward: fwd,
                    backward: bwd,
                },
                softmax(&combined),
            )
        }
    };

    Ok(ForwardTrace {
        logits,
        probs,
        detail,
        output,
    })
}

/// Gradient of `-ln max(y[target], 1e-12)` with respect to `y`.
fn loss_grad_wrt_output(y: &[f64], target: usize) -> Vec<f64> {
    let mut dy = vec![0.0; y.len()];
    if y[target] > PROB_FLOOR {
        dy[target] = -1.0 / y[target];
    }
    dy
}

/// Exact gradient of the cross-entropy loss for one scene.
pub fn head_backward(
    model: &HeadModel,
    features: &FeatureMatrix,
    trace: &ForwardTrace,
    target: usize,
) -> Result<Gradients> {
    let mut grads = model.zeros_like();
    accumulate_gradients(model, features, trace, target, &mut grads)?;
    Ok(grads)
}

/// Like [`head_backward`], adding into an existing gradient buffer.
pub fn accumulate_gradients(
    model: &HeadModel,
    features: &FeatureMatrix,
    trace: &ForwardTrace,
    target: usize,
    grads: &mut Gradients,
) -> Result<()> {
    check_features(model, features)?;
    let classes = model.classes();
    if target >= classes {
        return Err(Error::invalid(format!("target {target} >= C = {classes}")));
    }
    let frames = model.frames;
    let probs = &trace.probs;
    let dy = loss_grad_wrt_output(&trace.output, target);

    // Gradient with respect to the per-frame logits, F x C.
    let mut d_logits = Matrix::zeros(frames, classes);
    // Gradient with respect to the per-frame distributions, for heads that
    // consume P directly.
    let mut d_probs = Matrix::zeros(frames, classes);
    let mut via_probs = true;

    match (&model.head, &trace.detail, &mut grads.head) {
        (HeadParams::Product, TraceDetail::Product, _) => {
            let ds = softmax_backward(&trace.output, &dy);
            let ds_sum: f64 = ds.iter().sum();
            for k in 0..frames {
                let p = probs.row(k);
                for (c, d) in d_logits.row_mut(k).iter_mut().enumerate() {
                    *d = ds[c] - p[c] * ds_sum;
                }
            }
            via_probs = false;
        }
        (HeadParams::Flatten(second), TraceDetail::Flatten, HeadParams::Flatten(g2)) => {
            let dz = softmax_backward(&trace.output, &dy);
            g2.weight.accumulate_outer(probs.as_slice(), &dz);
            g2.bias.iter_mut().zip(&dz).for_each(|(b, d)| *b += d);
            second.weight.accumulate_mul_vec(&dz, d_probs.as_mut_slice());
        }
        (HeadParams::Average, TraceDetail::Average, _) => {
            for k in 0..frames {
                for (d, g) in d_probs.row_mut(k).iter_mut().zip(&dy) {
                    *d = g / frames as f64;
                }
            }
        }
        (HeadParams::Max, TraceDetail::Max { argmax, total }, _) => {
            let dot: f64 = trace.output.iter().zip(&dy).map(|(a, b)| a * b).sum();
            for c in 0..classes {
                d_probs[(argmax[c], c)] += (dy[c] - dot) / total;
            }
        }
        (HeadParams::Lstm(params), TraceDetail::Lstm(lt), HeadParams::Lstm(g)) => {
            let dh = softmax_backward(&trace.output, &dy);
            let dxs = lstm::backward(params, lt, &dh, g);
            for (k, dx) in dxs.into_iter().enumerate() {
                d_probs.row_mut(k).copy_from_slice(&dx);
            }
        }
        (
            HeadParams::BiLstm { forward, backward },
            TraceDetail::BiLstm {
                forward: ft,
                backward: bt,
            },
            HeadParams::BiLstm {
                forward: gf,
                backward: gb,
            },
        ) => {
            let dh = softmax_backward(&trace.output, &dy);
            let dx_fwd = lstm::backward(forward, ft, &dh, gf);
            let dx_bwd = lstm::backward(backward, bt, &dh, gb);
            for (k, dx) in dx_fwd.into_iter().enumerate() {
                d_probs.row_mut(k).copy_from_slice(&dx);
            }
            // The backward direction saw frame F-1-t at step t.
            for (t, dx) in dx_bwd.into_iter().enumerate() {
                let k = frames - 1 - t;
                d_probs.row_mut(k).iter_mut().zip(dx).for_each(|(d, v)| *d += v);
            }
        }
        _ => return Err(Error::invalid("trace does not belong to this model")),
    }

    if via_probs {
        for k in 0..frames {
            let dz = softmax_backward(probs.row(k), d_probs.row(k));
            d_logits.row_mut(k).copy_from_slice(&dz);
        }
    }

    let mut x = vec![0.0; features.cols()];
    for k in 0..frames {
        x.iter_mut()
            .zip(features.row(k))
            .for_each(|(d, s)| *d = f64::from(*s));
        let dz = d_logits.row(k);
        grads.dense.weight.accumulate_outer(&x, dz);
        grads.dense.bias.iter_mut().zip(dz).for_each(|(b, d)| *b += d);
    }
    Ok(())
}
