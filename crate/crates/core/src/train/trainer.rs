//! End-to-end gradient-descent training.
//!
//! The casebase is chosen once by per-class k-means and then frozen. Every
//! mini-batch rebuilds the casebase graph from the current parameters, adds
//! the batch's irrelevance attacks, runs the semantics, and takes one
//! clipped AdamW step on the full objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_global_norm, AdamW, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::heads::{BoundModel, DeepArguingModel};
use crate::qbaf::{self, build_casebase_graph, build_newcase_edges, Case, CasebaseGraph, FullCasebase, QbafBatch};
use crate::semantics::{self, final_strengths_on_tape};

use super::config::TrainConfig;
use super::kmeans::kmeans_casebase;
use super::loss::{class_weights, total_loss, LossBreakdown, LossInputs, LossTerms};
use super::metrics::Metrics;

/// Rows per forward pass when predicting.
const PREDICT_CHUNK: usize = 1024;

/// Stacks case characterisations into an `[m×p]` matrix.
pub fn features_of(cases: &[Case]) -> Result<Tensor> {
    Tensor::from_rows(&cases.iter().map(|c| c.x.as_slice()).collect::<Vec<_>>())
}

pub fn labels_of(cases: &[Case]) -> Vec<usize> {
    cases.iter().map(|c| c.label).collect()
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub graph: CasebaseGraph,
    pub a_n: Var,
    pub b_new: Var,
    pub strengths: Var,
    pub logits: Var,
}

/// A model together with the frozen casebase it reasons over.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub model: DeepArguingModel,
    pub casebase: FullCasebase,
    pub config: TrainConfig,
}

/// Predicted labels with the strengths they were read from.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `[B×C]` final strengths of the target arguments.
    pub target_strengths: Tensor,
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        self.casebase.num_classes()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, x: &Tensor) -> Result<Forward> {
        let graph = build_casebase_graph(tape, bound, &self.casebase, self.config.lse_temperature)?;
        self.forward_with_graph(tape, bound, graph, x)
    }

    fn forward_with_graph(&self, tape: &mut Tape, bound: &BoundModel, graph: CasebaseGraph, x: &Tensor) -> Result<Forward> {
        let (a_n, b_new) = build_newcase_edges(tape, bound, &graph, x)?;
        let strengths = final_strengths_on_tape(
            tape,
            graph.a_cb,
            graph.b_cb,
            a_n,
            b_new,
            self.config.iterations,
            self.config.new_case_mode,
        )?;
        let logits = tape.select_cols(strengths, &self.casebase.target_indices())?;
        Ok(Forward { graph, a_n, b_new, strengths, logits })
    }

    /// Records the full objective for a batch of labelled cases.
    pub fn loss_terms(&self, tape: &mut Tape, bound: &BoundModel, batch: &[Case], weights: &[f64]) -> Result<(Forward, LossTerms)> {
        let x = features_of(batch)?;
        let fwd = self.forward(tape, bound, &x)?;
        let labels = labels_of(batch);
        let inputs = LossInputs {
            logits: fwd.logits,
            labels: &labels,
            class_weights: weights,
            a_cb: fwd.graph.a_cb,
            a_n: fwd.a_n,
            x_cb: &self.casebase.case_features(),
            x_delta: &self.casebase.target_features(),
        };
        let terms = total_loss(tape, bound, &inputs, &self.config)?;
        Ok((fwd, terms))
    }

    /// Objective over `data` in one pass, without updating anything.
    pub fn loss(&self, data: &[Case], weights: &[f64]) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let (_, terms) = self.loss_terms(&mut tape, &bound, data, weights)?;
        Ok(terms.values(&tape))
    }

    /// Mines the graph for `x` (`[B×p]`) with the current parameters.
    pub fn mine(&self, x: &Tensor) -> Result<QbafBatch> {
        qbaf::mine(&self.model, &self.casebase, x, self.config.lse_temperature)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        if x.cols() != self.model.input_width() {
            return Err(Error::dim("predict", format!("input width {}, expected {}", x.cols(), self.model.input_width())));
        }
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape)?;
        let graph = build_casebase_graph(&mut tape, &bound, &self.casebase, self.config.lse_temperature)?;
        let c = self.num_classes();
        let mut labels = Vec::with_capacity(x.rows());
        let mut strengths = Vec::with_capacity(x.rows() * c);
        for start in (0..x.rows()).step_by(PREDICT_CHUNK) {
            let end = (start + PREDICT_CHUNK).min(x.rows());
            let chunk = Tensor::matrix(end - start, x.cols(), x.data()[start * x.cols()..end * x.cols()].to_vec())?;
            let fwd = self.forward_with_graph(&mut tape, &bound, graph, &chunk)?;
            let (l, logits) = semantics::predict(tape.value(fwd.strengths), &self.casebase.target_indices())?;
            labels.extend(l);
            strengths.extend_from_slice(logits.data());
        }
        Ok(Prediction { labels, target_strengths: Tensor::matrix(x.rows(), c, strengths)? })
    }

    pub fn evaluate(&self, data: &[Case]) -> Result<Metrics> {
        let pred = self.predict(&features_of(data)?)?;
        Ok(Metrics::from_predictions(&labels_of(data), &pred.labels, self.num_classes()))
    }
}

/// Batch prediction metrics for `data` against a model and its casebase.
pub fn evaluate(model: &DeepArguingModel, casebase: &FullCasebase, config: &TrainConfig, data: &[Case]) -> Result<Metrics> {
    let trained = TrainedModel { model: model.clone(), casebase: casebase.clone(), config: config.clone() };
    trained.evaluate(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Batch-size weighted mean of the per-batch objectives.
    pub train: LossBreakdown,
    pub train_accuracy: f64,
    pub train_macro_f1: f64,
    pub val: Option<LossBreakdown>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub casebase_size: usize,
    pub casebase_ids: Vec<usize>,
    pub initial_train_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub test: Option<Metrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Setup { casebase_size: usize, casebase_ids: Vec<usize>, initial_train_loss: f64 },
    Epoch(EpochRecord),
    Test(Metrics),
}

impl TrainReport {
    /// One JSON object per line: setup, then each epoch, then test metrics.
    pub fn to_jsonl(&self) -> String {
        let mut lines = vec![ReportLine::Setup {
            casebase_size: self.casebase_size,
            casebase_ids: self.casebase_ids.clone(),
            initial_train_loss: self.initial_train_loss,
        }];
        lines.extend(self.epochs.iter().cloned().map(ReportLine::Epoch));
        lines.extend(self.test.clone().map(ReportLine::Test));
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report serialises"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut report = TrainReport { casebase_size: 0, casebase_ids: vec![], initial_train_loss: 0.0, epochs: vec![], test: None };
        let mut saw_setup = false;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parsed: ReportLine =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("report line {}: {e}", i + 1)))?;
            match parsed {
                ReportLine::Setup { casebase_size, casebase_ids, initial_train_loss } => {
                    report.casebase_size = casebase_size;
                    report.casebase_ids = casebase_ids;
                    report.initial_train_loss = initial_train_loss;
                    saw_setup = true;
                }
                ReportLine::Epoch(e) => report.epochs.push(e),
                ReportLine::Test(m) => report.test = Some(m),
            }
        }
        if !saw_setup {
            return Err(Error::Format("report has no setup record".into()));
        }
        Ok(report)
    }

    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn diverged(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op } => Error::Diverged { epoch, batch, detail: format!("non-finite value in {op}") },
        other => other,
    }
}

/// Trains a model on `train_data`, monitoring `val_data`. The returned model
/// is the one after the final epoch.
pub fn train(config: &TrainConfig, train_data: &[Case], val_data: &[Case], num_classes: usize) -> Result<(TrainedModel, TrainReport)> {
    config.validate()?;
    if train_data.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let width = train_data[0].x.len();
    if let Some(c) = train_data.iter().chain(val_data).find(|c| c.x.len() != width) {
        return Err(Error::dim("train", format!("case {} has width {}, expected {width}", c.id, c.x.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cases = kmeans_casebase(train_data, config.clusters_per_class, num_classes, &mut rng)?;
    let casebase = FullCasebase::new(cases, num_classes)?;
    let model = DeepArguingModel::init(&config.architecture(width), config.alpha, &mut rng)?;
    let weights = if config.class_weighting { class_weights(train_data, num_classes)? } else { vec![1.0; num_classes] };

    let mut trained = TrainedModel { model, casebase, config: config.clone() };
    let initial_train_loss = trained.loss(train_data, &weights).map_err(diverged(0, 0))?.total;
    let mut optimizer = AdamW::new(config.lr, config.weight_decay);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut train_terms = LossBreakdown::default();
        let mut truth = Vec::with_capacity(train_data.len());
        let mut predicted = Vec::with_capacity(train_data.len());
        let mut grad_norm: f64 = 0.0;

        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Case> = idx.iter().map(|&i| train_data[i].clone()).collect();
            let mut tape = Tape::new();
            let bound = trained.model.bind(&mut tape)?;
            let (fwd, terms) = trained.loss_terms(&mut tape, &bound, &batch, &weights).map_err(diverged(epoch, b))?;
            let values = terms.values(&tape);
            train_terms.accumulate(&values, batch.len() as f64 / train_data.len() as f64);
            let (labels, _) = semantics::predict(tape.value(fwd.strengths), &trained.casebase.target_indices())?;
            truth.extend(labels_of(&batch));
            predicted.extend(labels);

            let grads = tape.backward(terms.total)?;
            trained.model.store_grads(&bound, &grads);
            let mut params = trained.model.params_mut();
            grad_norm = grad_norm.max(clip_global_norm(&mut params, config.grad_max_norm)?);
            optimizer.step(&mut params)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, batch: b, detail: "non-finite parameters after update".into() });
            }
        }

        let train_metrics = Metrics::from_predictions(&truth, &predicted, num_classes);
        let (val, val_accuracy, val_macro_f1) = if val_data.is_empty() {
            (None, None, None)
        } else {
            let loss = trained.loss(val_data, &weights).map_err(diverged(epoch, usize::MAX))?;
            let m = trained.evaluate(val_data)?;
            (Some(loss), Some(m.accuracy), Some(m.macro_f1))
        };
        epochs.push(EpochRecord {
            epoch,
            train: train_terms,
            train_accuracy: train_metrics.accuracy,
            train_macro_f1: train_metrics.macro_f1,
            val,
            val_accuracy,
            val_macro_f1,
            grad_norm,
        });
    }

    let report = TrainReport {
        casebase_size: trained.casebase.cases().len(),
        casebase_ids: trained.casebase.cases().iter().map(|c| c.id).collect(),
        initial_train_loss,
        epochs,
        test: None,
    };
    Ok((trained, report))
}
