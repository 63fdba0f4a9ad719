//! The collaborative inference loop.
//!
//! For every image the client classifies locally and measures the entropy of
//! its softmax. Below the threshold the client label is final. Otherwise the
//! client scores patches from its own attention, selects a subset, ships it
//! in a patch frame and adopts whatever label the server sends back.

mod flops;
mod server;
mod sweep;

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::attention::{self, AttentionError, AttentionMethod, AttentionProfile};
use crate::dataset::Dataset;
use crate::gate::{gate, GateError, GateSpec};
use crate::protocol::{
    encode_patch_message, CostLedger, CostRecord, FrameError, LedgerError, ResultMessage, Transport, TransportError,
};
use crate::selection::{self, SelectionError, SelectionRule};
use crate::vit::{classify_grid, patchify, ModelWeights, PatchGrid, VitError};

pub use flops::{flops_deit, server_compute_ratio, FlopsError};
pub use server::{Server, ServerError};
pub use sweep::{sweep, write_sweep_csv, SweepConfig, SweepRow};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model: {0}")]
    Model(#[from] VitError),
    #[error("attention: {0}")]
    Attention(#[from] AttentionError),
    #[error("selection: {0}")]
    Selection(#[from] SelectionError),
    #[error("gate: {0}")]
    Gate(#[from] GateError),
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("ledger: {0}")]
    Ledger(#[from] LedgerError),
    #[error("server: {0}")]
    Server(#[from] ServerError),
    #[error("transport error for image {image_id}: {source}")]
    Transport { image_id: u64, source: TransportError },
    #[error("server closed the connection before answering image {0}")]
    NoReply(u64),
    #[error("reply for image {got} while waiting for image {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("client and server disagree on {0}")]
    Incompatible(&'static str),
    #[error("image {image_id} failed: {reason}")]
    ImageFailed { image_id: u64, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything that shapes one run apart from the models and the transport.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub rule: SelectionRule,
    pub gate: GateSpec,
    pub attention: AttentionMethod,
    /// Abort on the first failed image instead of recording and continuing.
    pub fail_fast: bool,
}

/// Where offloaded frames go.
pub trait Offloader {
    fn offload(&mut self, image_id: u64, frame: &[u8]) -> Result<ResultMessage, PipelineError>;
}

/// Offloads through a [`Transport`], one outstanding request at a time.
pub struct RemoteOffloader<T: Transport> {
    transport: T,
}

impl<T: Transport> RemoteOffloader<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }

    pub fn into_inner(self) -> T {
        self.transport
    }
}

impl<T: Transport> Offloader for RemoteOffloader<T> {
    fn offload(&mut self, image_id: u64, frame: &[u8]) -> Result<ResultMessage, PipelineError> {
        let wrap = |source| PipelineError::Transport { image_id, source };
        self.transport.send(frame).map_err(wrap)?;
        let reply = self.transport.recv().map_err(wrap)?.ok_or(PipelineError::NoReply(image_id))?;
        let msg = ResultMessage::decode(&reply)?;
        if msg.image_id != image_id {
            return Err(PipelineError::IdMismatch { expected: image_id, got: msg.image_id });
        }
        Ok(msg)
    }
}

/// Calls a [`Server`] directly, still going through both frame codecs.
pub struct DirectOffloader<'a> {
    server: &'a Server,
}

impl<'a> DirectOffloader<'a> {
    pub fn new(server: &'a Server) -> Self {
        Self { server }
    }
}

impl Offloader for DirectOffloader<'_> {
    fn offload(&mut self, image_id: u64, frame: &[u8]) -> Result<ResultMessage, PipelineError> {
        let reply = self.server.handle_frame(frame)?;
        let msg = ResultMessage::decode(&reply)?;
        if msg.image_id != image_id {
            return Err(PipelineError::IdMismatch { expected: image_id, got: msg.image_id });
        }
        Ok(msg)
    }
}

/// Outcome for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub image_id: u64,
    pub true_label: Option<u32>,
    pub client_label: Option<u32>,
    pub offloaded: bool,
    /// `None` only when the image failed.
    pub final_label: Option<u32>,
    pub entropy_bits: f64,
    pub patches_sent: usize,
    pub server_confidence: Option<f32>,
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        matches!((self.true_label, self.final_label), (Some(t), Some(f)) if t == f)
    }
}

/// Client-side work that does not depend on the thresholds.
#[derive(Debug, Clone)]
pub struct ClientAnalysis {
    pub image_id: u64,
    pub true_label: Option<u32>,
    pub grid: PatchGrid,
    pub label: usize,
    pub probs: Vec<f64>,
    pub profile: AttentionProfile,
}

pub fn analyze(
    image_id: u64,
    img: &crate::vit::ImageTensor,
    true_label: Option<u32>,
    client: &ModelWeights,
    method: AttentionMethod,
) -> Result<ClientAnalysis, PipelineError> {
    let grid = patchify(img, client.dims.patch_size)?;
    let (label, trace) = classify_grid(&grid, client)?;
    let profile = attention::profile(&trace, method)?;
    Ok(ClientAnalysis { image_id, true_label, grid, label, probs: trace.probs, profile })
}

/// Analyses every image in parallel. Image ids are manifest positions.
pub fn analyze_dataset(
    dataset: &Dataset,
    client: &ModelWeights,
    method: AttentionMethod,
) -> Vec<Result<ClientAnalysis, PipelineError>> {
    dataset
        .images
        .par_iter()
        .enumerate()
        .map(|(i, im)| analyze(i as u64, &im.image, im.label, client, method))
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub records: Vec<EvalRecord>,
    pub ledger: CostLedger,
    /// Raw result frames in the order received.
    pub result_frames: Vec<Vec<u8>>,
}

impl PipelineOutput {
    /// Fraction of labelled images whose final label is right.
    pub fn accuracy(&self) -> f64 {
        let labelled = self.records.iter().filter(|r| r.true_label.is_some()).count();
        if labelled == 0 {
            return f64::NAN;
        }
        self.records.iter().filter(|r| r.is_correct()).count() as f64 / labelled as f64
    }

    pub fn write_records_csv<W: Write>(&self, out: W) -> Result<(), PipelineError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "image_id",
            "true_label",
            "client_label",
            "offloaded",
            "final_label",
            "entropy_bits",
            "patches_sent",
            "error",
        ])?;
        let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.image_id.to_string(),
                opt(r.true_label),
                opt(r.client_label),
                r.offloaded.to_string(),
                opt(r.final_label),
                r.entropy_bits.to_string(),
                r.patches_sent.to_string(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Checks that a server can read what this client sends.
pub fn check_compatible(client: &ModelWeights, server: &ModelWeights) -> Result<(), PipelineError> {
    let (c, s) = (&client.dims, &server.dims);
    if c.patch_size != s.patch_size {
        return Err(PipelineError::Incompatible("patch size"));
    }
    if c.channels != s.channels {
        return Err(PipelineError::Incompatible("channels"));
    }
    if c.classes != s.classes {
        return Err(PipelineError::Incompatible("label count"));
    }
    if c.max_patches > s.max_patches {
        return Err(PipelineError::Incompatible("position table size"));
    }
    Ok(())
}

struct Step {
    record: EvalRecord,
    cost: CostRecord,
    frame: Option<Vec<u8>>,
}

fn step(cfg: &PipelineConfig, a: &ClientAnalysis, offloader: &mut dyn Offloader) -> Result<Step, PipelineError> {
    let decision = gate(&a.probs, cfg.gate.measure, cfg.gate.eta)?;
    let n = a.grid.n_patches();
    let mut record = EvalRecord {
        image_id: a.image_id,
        true_label: a.true_label,
        client_label: Some(a.label as u32),
        offloaded: false,
        final_label: Some(a.label as u32),
        entropy_bits: decision.entropy_bits,
        patches_sent: 0,
        server_confidence: None,
        error: None,
    };
    if !decision.offload {
        return Ok(Step { record, cost: CostRecord::local(a.image_id, n), frame: None });
    }
    let mut mask = selection::apply(cfg.rule, &a.profile)?;
    mask.n_total = n;
    let frame = encode_patch_message(&a.grid, &mask, a.image_id)?;
    let reply = offloader.offload(a.image_id, &frame)?;
    record.offloaded = true;
    record.final_label = Some(reply.label);
    record.patches_sent = mask.len();
    record.server_confidence = Some(reply.confidence);
    Ok(Step {
        record,
        cost: CostRecord::offloaded(a.image_id, n, mask.len(), a.grid.patch_len()),
        frame: Some(reply.encode().to_vec()),
    })
}

fn failed(image_id: u64, true_label: Option<u32>, client_label: Option<u32>, err: &PipelineError) -> EvalRecord {
    EvalRecord {
        image_id,
        true_label,
        client_label,
        offloaded: false,
        final_label: None,
        entropy_bits: f64::NAN,
        patches_sent: 0,
        server_confidence: None,
        error: Some(err.to_string()),
    }
}

/// Runs the decision loop over precomputed client analyses.
pub fn evaluate(
    cfg: &PipelineConfig,
    analyses: &[Result<ClientAnalysis, PipelineError>],
    truth: &[Option<u32>],
    offloader: &mut dyn Offloader,
) -> Result<PipelineOutput, PipelineError> {
    let mut records = Vec::with_capacity(analyses.len());
    let mut ledger = CostLedger::new();
    let mut result_frames = Vec::new();
    for (i, analysis) in analyses.iter().enumerate() {
        let image_id = i as u64;
        let outcome = match analysis {
            Ok(a) => step(cfg, a, offloader).map_err(|e| (Some(a.label as u32), e)),
            Err(e) => Err((None, PipelineError::ImageFailed { image_id, reason: e.to_string() })),
        };
        match outcome {
            Ok(s) => {
                ledger.record(s.cost)?;
                result_frames.extend(s.frame);
                records.push(s.record);
            }
            Err((_, e)) if cfg.fail_fast => return Err(e),
            Err((client_label, e)) => {
                records.push(failed(image_id, truth.get(i).copied().flatten(), client_label, &e));
            }
        }
    }
    Ok(PipelineOutput { records, ledger, result_frames })
}

/// Analyses the dataset with the client model, then runs the loop.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    client: &ModelWeights,
    dataset: &Dataset,
    offloader: &mut dyn Offloader,
) -> Result<PipelineOutput, PipelineError> {
    let analyses = analyze_dataset(dataset, client, cfg.attention);
    let truth: Vec<Option<u32>> = dataset.images.iter().map(|im| im.label).collect();
    evaluate(cfg, &analyses, &truth, offloader)
}

/// Accuracy of a model on full images, no gating.
pub fn model_accuracy(weights: &ModelWeights, dataset: &Dataset) -> Result<f64, PipelineError> {
    let preds: Result<Vec<(usize, Option<u32>)>, VitError> = dataset
        .images
        .par_iter()
        .map(|im| crate::vit::classify(&im.image, weights).map(|(l, _)| (l, im.label)))
        .collect();
    let preds = preds?;
    let labelled = preds.iter().filter(|(_, t)| t.is_some()).count();
    if labelled == 0 {
        return Ok(f64::NAN);
    }
    Ok(preds.iter().filter(|(p, t)| *t == Some(*p as u32)).count() as f64 / labelled as f64)
}

#[cfg(test)]
mod tests;
