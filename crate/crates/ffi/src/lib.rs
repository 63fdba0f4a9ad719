//! C interface to the patchcast edge and server models.
//!
//! Every fallible function returns a [`PcStatus`]. On failure a message for
//! the calling thread is available from [`pc_last_error`] until the next call.
//! Output buffers belong to the caller; a call that writes variable-length
//! output stores the required length and returns
//! `PC_STATUS_BUFFER_TOO_SMALL` when the buffer is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use patchcast::attention::{self, AttentionMethod, AttentionProfile};
use patchcast::gate::{self, EntropyMeasure};
use patchcast::pipeline::{flops_deit, Server};
use patchcast::protocol::{encode_patch_message, ResultMessage, RESULT_FRAME_LEN};
use patchcast::selection::{self, SelectionMask, SelectionRule};
use patchcast::vit::{classify, patchify, ImageTensor, LoadError, ModelWeights};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Weight file is malformed or inconsistent.
    Model = 4,
    /// A wire frame failed to encode or decode.
    Frame = 5,
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcAttention {
    Mean = 0,
    Rollout = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcEntropy {
    Shannon = 0,
    Min = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcModelInfo {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub max_patches: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PcResult {
    pub image_id: u64,
    pub label: u32,
    pub confidence: f32,
}

/// Loaded ViT weights. Create with [`pc_model_load`], release with [`pc_model_free`].
pub struct PcModel {
    // Server owns an Arc of the weights, so one handle serves both roles.
    server: Server,
}

impl PcModel {
    fn weights(&self) -> &ModelWeights {
        self.server.weights()
    }
}

struct Failure(PcStatus, String);

impl Failure {
    fn new(status: PcStatus, msg: impl Display) -> Self {
        Failure(status, msg.to_string())
    }
}

fn invalid(e: impl Display) -> Failure {
    Failure::new(PcStatus::InvalidArgument, e)
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: Option<String>) {
    let c = msg.map(|m| CString::new(m.replace('\0', " ")).expect("nul bytes removed"));
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> PcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            PcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(Some(msg));
            status
        }
        Err(_) => {
            set_last_error(Some("panic inside patchcast".into()));
            PcStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(PcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(PcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure::new(PcStatus::NullPointer, format!("{what} is null")))
}

unsafe fn model<'a>(p: *const PcModel) -> Result<&'a PcModel, Failure> {
    p.as_ref().ok_or_else(|| Failure::new(PcStatus::NullPointer, "model is null"))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(PcStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn image(pixels: *const u8, height: usize, width: usize, channels: usize) -> Result<ImageTensor, Failure> {
    let n =
        height.checked_mul(width).and_then(|v| v.checked_mul(channels)).ok_or_else(|| invalid("image too large"))?;
    let px = input(pixels, n, "pixels")?;
    ImageTensor::new(height, width, channels, px.to_vec()).map_err(invalid)
}

fn fill<T: Copy>(src: &[T], dst: &mut [T], what: &str) -> Result<(), Failure> {
    if dst.len() < src.len() {
        return Err(Failure::new(
            PcStatus::BufferTooSmall,
            format!("{what} needs {} elements, got {}", src.len(), dst.len()),
        ));
    }
    dst[..src.len()].copy_from_slice(src);
    Ok(())
}

fn profile_of(m: &PcModel, img: &ImageTensor, method: PcAttention) -> Result<AttentionProfile, Failure> {
    let (_, trace) = classify(img, m.weights()).map_err(invalid)?;
    let method = match method {
        PcAttention::Mean => AttentionMethod::MeanLastLayer,
        PcAttention::Rollout => AttentionMethod::Rollout,
    };
    attention::profile(&trace, method).map_err(invalid)
}

fn measure(m: PcEntropy) -> EntropyMeasure {
    match m {
        PcEntropy::Shannon => EntropyMeasure::Shannon,
        PcEntropy::Min => EntropyMeasure::Min,
    }
}

/// Message for the last failed call on this thread, or null. The pointer is
/// valid until the next patchcast call on the same thread.
#[no_mangle]
pub extern "C" fn pc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_model_load(path: *const c_char, out: *mut *mut PcModel) -> PcStatus {
    run(|| {
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let weights = ModelWeights::load(text(path, "path")?).map_err(|e| match e {
            LoadError::Io(e) => Failure::new(PcStatus::Io, e),
            other => Failure::new(PcStatus::Model, other),
        })?;
        *out = Box::into_raw(Box::new(PcModel { server: Server::new(weights) }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`pc_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pc_model_free(model: *mut PcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_model_info(model: *const PcModel, out: *mut PcModelInfo) -> PcStatus {
    run(|| {
        let d = self::model(model)?.weights().dims;
        *out_ref(out, "out")? = PcModelInfo {
            embed_dim: d.embed_dim,
            heads: d.heads,
            layers: d.layers,
            classes: d.classes,
            patch_size: d.patch_size,
            channels: d.channels,
            max_patches: d.max_patches,
        };
        Ok(())
    })
}

/// Classifies a full `height×width×channels` image of 8-bit values. `probs`
/// may be null when `probs_len` is 0; otherwise it receives `classes` values.
///
/// # Safety
/// `pixels` must hold `height*width*channels` bytes and `probs` `probs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_classify(
    model: *const PcModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    label: *mut u32,
    probs: *mut f64,
    probs_len: usize,
) -> PcStatus {
    run(|| {
        let m = self::model(model)?;
        let img = image(pixels, height, width, channels)?;
        let label = out_ref(label, "label")?;
        let probs = output(probs, probs_len, "probs")?;
        let (l, trace) = classify(&img, m.weights()).map_err(invalid)?;
        if !probs.is_empty() {
            fill(&trace.probs, probs, "probs")?;
        }
        *label = l as u32;
        Ok(())
    })
}

/// Per-patch attention scores of a full image, in raster order. `scores`
/// needs one slot per patch.
///
/// # Safety
/// `pixels` must hold `height*width*channels` bytes and `scores` `scores_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_attention(
    model: *const PcModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    method: PcAttention,
    scores: *mut f64,
    scores_len: usize,
) -> PcStatus {
    run(|| {
        let m = self::model(model)?;
        let img = image(pixels, height, width, channels)?;
        let scores = output(scores, scores_len, "scores")?;
        fill(&profile_of(m, &img, method)?.scores, scores, "scores")
    })
}

/// Applies a selection rule (`topk:K`, `threshold:D`, `sum:D`, `random:M[:SEED]`)
/// to `n` patch scores. Selected indices are written in increasing order and
/// their count to `count`.
///
/// # Safety
/// `scores` must hold `n` doubles and `indices` `indices_cap` elements.
#[no_mangle]
pub unsafe extern "C" fn pc_select(
    scores: *const f64,
    n: usize,
    rule: *const c_char,
    indices: *mut usize,
    indices_cap: usize,
    count: *mut usize,
) -> PcStatus {
    run(|| {
        let scores = input(scores, n, "scores")?;
        let rule: SelectionRule = text(rule, "rule")?.parse().map_err(invalid)?;
        let indices = output(indices, indices_cap, "indices")?;
        let count = out_ref(count, "count")?;
        let profile = AttentionProfile {
            scores: scores.to_vec(),
            method: AttentionMethod::MeanLastLayer,
            source_indices: (0..n).collect(),
        };
        let mask = selection::apply(rule, &profile).map_err(invalid)?;
        *count = mask.len();
        fill(&mask.selected, indices, "indices")
    })
}

/// Entropy of a probability vector in bits.
///
/// # Safety
/// `probs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_entropy(probs: *const f64, len: usize, measure: PcEntropy, out: *mut f64) -> PcStatus {
    run(|| {
        let p = input(probs, len, "probs")?;
        *out_ref(out, "out")? = gate::entropy(p, self::measure(measure)).map_err(invalid)?;
        Ok(())
    })
}

/// Offload decision: true when the entropy reaches `eta`.
///
/// # Safety
/// `probs` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn pc_gate(
    probs: *const f64,
    len: usize,
    measure: PcEntropy,
    eta: f64,
    offload: *mut bool,
) -> PcStatus {
    run(|| {
        let p = input(probs, len, "probs")?;
        *out_ref(offload, "offload")? = gate::gate(p, self::measure(measure), eta).map_err(invalid)?.offload;
        Ok(())
    })
}

/// Encodes the selected patches of an image as a patch frame. `frame_len`
/// always receives the encoded size.
///
/// # Safety
/// `pixels` must hold `height*width*channels` bytes, `indices` `count`
/// elements and `frame` `frame_cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pc_encode_patch_frame(
    image_id: u64,
    pixels: *const u8,
    height: usize,
    width: usize,
    channels: usize,
    patch_size: usize,
    indices: *const usize,
    count: usize,
    frame: *mut u8,
    frame_cap: usize,
    frame_len: *mut usize,
) -> PcStatus {
    run(|| {
        let img = image(pixels, height, width, channels)?;
        let selected = input(indices, count, "indices")?.to_vec();
        let frame = output(frame, frame_cap, "frame")?;
        let frame_len = out_ref(frame_len, "frame_len")?;
        let grid = patchify(&img, patch_size).map_err(invalid)?;
        if selected.windows(2).any(|w| w[0] >= w[1]) || selected.last().is_some_and(|&i| i >= grid.n_patches()) {
            return Err(invalid("indices must be increasing and inside the grid"));
        }
        let mask = SelectionMask { n_total: grid.n_patches(), selected, rule: SelectionRule::TopK(count) };
        let bytes = encode_patch_message(&grid, &mask, image_id).map_err(|e| Failure::new(PcStatus::Frame, e))?;
        *frame_len = bytes.len();
        fill(&bytes, frame, "frame")
    })
}

/// Runs server inference on a patch frame and writes the 16-byte result frame.
///
/// # Safety
/// `frame` must hold `len` bytes and `result` 16 bytes.
#[no_mangle]
pub unsafe extern "C" fn pc_server_respond(
    model: *const PcModel,
    frame: *const u8,
    len: usize,
    result: *mut u8,
) -> PcStatus {
    run(|| {
        let m = self::model(model)?;
        let frame = input(frame, len, "frame")?;
        let result = output(result, RESULT_FRAME_LEN, "result")?;
        let reply = m.server.handle_frame(frame).map_err(|e| Failure::new(PcStatus::Frame, e))?;
        result.copy_from_slice(&reply);
        Ok(())
    })
}

/// # Safety
/// `frame` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pc_decode_result_frame(frame: *const u8, len: usize, out: *mut PcResult) -> PcStatus {
    run(|| {
        let bytes = input(frame, len, "frame")?;
        let msg = ResultMessage::decode(bytes).map_err(|e| Failure::new(PcStatus::Frame, e))?;
        *out_ref(out, "out")? = PcResult { image_id: msg.image_id, label: msg.label, confidence: msg.confidence };
        Ok(())
    })
}

/// Server operation count for `n` patches at width `d`. Fails if the value
/// does not fit in 64 bits.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_flops(n: u64, d: u64, out: *mut u64) -> PcStatus {
    run(|| {
        let out = out_ref(out, "out")?;
        let f = flops_deit(n, d).map_err(invalid)?;
        *out = u64::try_from(f).map_err(|_| invalid(format!("{f} does not fit in 64 bits")))?;
        Ok(())
    })
}
