//! C ABI over `defattn`.
//!
//! Every fallible function returns a [`DefattnStatus`]; on failure the
//! message is available from [`defattn_last_error`] on the same thread.
//! Models and sequences are opaque handles released with their `_free`
//! function. Images are row-major `H×W×3` bytes, masks row-major `H×W`
//! object ids with 0 for background.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use defattn::distill::cka;
use defattn::metrics::{boundary_f, region_j};
use defattn::propagation::{segment_sequence, Checkpoint, Network, NetworkSpec};
use defattn::synthdata::{generate_sequence, Difficulty, GenerateOptions, SequenceRecord};
use defattn::{Error, IdMask, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefattnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Degenerate = 5,
    Numeric = 6,
    Io = 7,
    NotFound = 8,
    Parse = 9,
    Panic = 10,
}

/// A loaded or freshly initialised network.
pub struct DefattnModel {
    net: Network,
}

/// A generated synthetic sequence.
pub struct DefattnSequence {
    rec: SequenceRecord,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> DefattnStatus {
    match e {
        Error::Shape { .. } => DefattnStatus::Shape,
        Error::Config(_) => DefattnStatus::Config,
        Error::Contract(_) => DefattnStatus::InvalidArgument,
        Error::Degenerate(_) => DefattnStatus::Degenerate,
        Error::Numeric(_) => DefattnStatus::Numeric,
        Error::Parse { .. } | Error::Json(_) => DefattnStatus::Parse,
        Error::MissingFile(_) | Error::NotFound(_) => DefattnStatus::NotFound,
        Error::Io(_) => DefattnStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DefattnStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return DefattnStatus::Ok,
        Ok(Err(Failure::Null(what))) => (DefattnStatus::NullPointer, format!("`{what}` is null")),
        Ok(Err(Failure::Invalid(msg))) => (DefattnStatus::InvalidArgument, msg),
        Ok(Err(Failure::Lib(e))) => (status_of(&e), e.to_string()),
        Err(_) => (DefattnStatus::Panic, "internal panic".to_string()),
    };
    set_error(msg);
    status
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("`{what}` is not UTF-8")))
}

fn out_ptr<T>(p: *mut T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn defattn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_model_load(path: *const c_char, out: *mut *mut DefattnModel) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let path = string(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(DefattnModel { net: ckpt.network }));
        Ok(())
    })
}

/// Initialises an untrained network by architecture name (`teacher`,
/// `student`, `student-vanilla`).
///
/// # Safety
/// `spec` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_model_init(
    spec: *const c_char,
    seed: u64,
    out: *mut *mut DefattnModel,
) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let spec = NetworkSpec::by_name(string(spec, "spec")?)?;
        *out = Box::into_raw(Box::new(DefattnModel {
            net: Network::init(spec, seed)?,
        }));
        Ok(())
    })
}

/// Writes the model to a checkpoint file.
///
/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn defattn_model_save(model: *const DefattnModel, path: *const c_char) -> DefattnStatus {
    guard(|| {
        let model = model.as_ref().ok_or(Failure::Null("model"))?;
        let path = string(path, "path")?;
        Checkpoint::new(model.net.clone()).save(Path::new(path))?;
        Ok(())
    })
}

/// Number of trainable scalars.
///
/// # Safety
/// `model` must come from this library or be null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn defattn_model_num_params(model: *const DefattnModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.params.numel())
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn defattn_model_free(model: *mut DefattnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments frames `1..n_frames` from the frame-0 mask. `frames` holds
/// `n_frames·h·w·3` bytes, `first_mask` `h·w` ids in `0..=n_objects`, and
/// `out_masks` receives `(n_frames−1)·h·w` ids.
///
/// # Safety
/// All buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn defattn_model_segment(
    model: *const DefattnModel,
    frames: *const u8,
    n_frames: usize,
    h: usize,
    w: usize,
    first_mask: *const u8,
    n_objects: usize,
    out_masks: *mut u8,
) -> DefattnStatus {
    guard(|| {
        let model = model.as_ref().ok_or(Failure::Null("model"))?;
        if n_frames < 2 || h == 0 || w == 0 {
            return Err(Failure::Invalid(format!(
                "need ≥ 2 non-empty frames, got {n_frames} of {h}×{w}"
            )));
        }
        let px = h * w;
        let rgb = slice(frames, n_frames * px * 3, "frames")?;
        let mask0 = IdMask::new(h, w, slice(first_mask, px, "first_mask")?.to_vec())?;
        let out = slice_mut(out_masks, (n_frames - 1) * px, "out_masks")?;
        let tensors: Vec<Tensor> = rgb
            .chunks(px * 3)
            .map(|f| Tensor::new(vec![h, w, 3], f.iter().map(|&v| v as f64 / 255.0).collect()))
            .collect::<defattn::Result<_>>()?;
        let seg = segment_sequence(&model.net, &tensors, &mask0, n_objects)?;
        for (dst, m) in out.chunks_mut(px).zip(&seg.masks) {
            dst.copy_from_slice(m.ids());
        }
        Ok(())
    })
}

/// Linear CKA between an `n×ct` and an `n×cs` row-major matrix.
///
/// # Safety
/// Buffers must have the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_cka(
    ft: *const f64,
    n: usize,
    ct: usize,
    fs: *const f64,
    cs: usize,
    out: *mut f64,
) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let a = Tensor::new(vec![n, ct], slice(ft, n * ct, "ft")?.to_vec())?;
        let b = Tensor::new(vec![n, cs], slice(fs, n * cs, "fs")?.to_vec())?;
        *out = cka(&a, &b)?;
        Ok(())
    })
}

unsafe fn mask_pair(pred: *const u8, gt: *const u8, h: usize, w: usize) -> Result<(IdMask, IdMask), Failure> {
    Ok((
        IdMask::new(h, w, slice(pred, h * w, "pred")?.to_vec())?,
        IdMask::new(h, w, slice(gt, h * w, "gt")?.to_vec())?,
    ))
}

/// Region similarity (IoU) of object `obj`.
///
/// # Safety
/// `pred` and `gt` must hold `h·w` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_region_j(
    pred: *const u8,
    gt: *const u8,
    h: usize,
    w: usize,
    obj: u8,
    out: *mut f64,
) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let (p, g) = mask_pair(pred, gt, h, w)?;
        *out = region_j(&p, &g, obj)?;
        Ok(())
    })
}

/// Boundary F-measure of object `obj` with a `tol`-pixel tolerance.
///
/// # Safety
/// `pred` and `gt` must hold `h·w` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_boundary_f(
    pred: *const u8,
    gt: *const u8,
    h: usize,
    w: usize,
    obj: u8,
    tol: usize,
    out: *mut f64,
) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let (p, g) = mask_pair(pred, gt, h, w)?;
        *out = boundary_f(&p, &g, obj, tol)?;
        Ok(())
    })
}

/// Renders a synthetic sequence. `difficulty` is one of `easy`,
/// `fast-motion`, `clutter`, `deform`.
///
/// # Safety
/// `difficulty` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_sequence_generate(
    seed: u64,
    h: usize,
    w: usize,
    n_frames: usize,
    n_objects: usize,
    difficulty: *const c_char,
    out: *mut *mut DefattnSequence,
) -> DefattnStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let difficulty: Difficulty = string(difficulty, "difficulty")?.parse()?;
        let opts = GenerateOptions {
            h,
            w,
            n_frames,
            n_objects,
            difficulty,
            ..GenerateOptions::default()
        };
        let rec = generate_sequence(seed, &opts)?;
        *out = Box::into_raw(Box::new(DefattnSequence { rec }));
        Ok(())
    })
}

/// Frame count, height, width and object count of a sequence.
///
/// # Safety
/// `seq` must come from this library; every out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn defattn_sequence_dims(
    seq: *const DefattnSequence,
    n_frames: *mut usize,
    h: *mut usize,
    w: *mut usize,
    n_objects: *mut usize,
) -> DefattnStatus {
    guard(|| {
        let seq = seq.as_ref().ok_or(Failure::Null("seq"))?;
        for (p, name) in [(n_frames, "n_frames"), (h, "h"), (w, "w"), (n_objects, "n_objects")] {
            out_ptr(p, name)?;
        }
        *n_frames = seq.rec.len();
        *h = seq.rec.h();
        *w = seq.rec.w();
        *n_objects = seq.rec.n_objects;
        Ok(())
    })
}

/// Copies frame `t` (`h·w·3` bytes) into `out`.
///
/// # Safety
/// `out` must hold `h·w·3` bytes.
#[no_mangle]
pub unsafe extern "C" fn defattn_sequence_frame(seq: *const DefattnSequence, t: usize, out: *mut u8) -> DefattnStatus {
    guard(|| {
        let seq = seq.as_ref().ok_or(Failure::Null("seq"))?;
        let img = seq
            .rec
            .frames
            .get(t)
            .ok_or_else(|| Failure::Invalid(format!("frame {t} out of range")))?;
        slice_mut(out, img.data.len(), "out")?.copy_from_slice(&img.data);
        Ok(())
    })
}

/// Copies the ground-truth mask of frame `t` (`h·w` bytes) into `out`.
///
/// # Safety
/// `out` must hold `h·w` bytes.
#[no_mangle]
pub unsafe extern "C" fn defattn_sequence_mask(seq: *const DefattnSequence, t: usize, out: *mut u8) -> DefattnStatus {
    guard(|| {
        let seq = seq.as_ref().ok_or(Failure::Null("seq"))?;
        if t >= seq.rec.len() {
            return Err(Failure::Invalid(format!("frame {t} out of range")));
        }
        let m = seq.rec.mask(t);
        slice_mut(out, m.ids().len(), "out")?.copy_from_slice(m.ids());
        Ok(())
    })
}

/// Releases a sequence; null is ignored.
///
/// # Safety
/// `seq` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn defattn_sequence_free(seq: *mut DefattnSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}
