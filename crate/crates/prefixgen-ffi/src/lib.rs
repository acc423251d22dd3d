//! C interface to the molecule generator: opaque model handles, integer
//! status codes, and a thread-local error message. The companion header is
//! generated into include/prefixgen.h at build time.
//!
//! Every function catches panics at the boundary; nothing unwinds into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fmt::Display;
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prefixgen::analysis::relation_matrix;
use prefixgen::encoders::{
    parse_pocket_file, select_anchor_inference, PocketGraph, CONDITION_ROWS,
};
use prefixgen::model::{load_checkpoint, LoadedCheckpoint, SampleParams};
use prefixgen::props::{property_vector, PropVec, SurrogateVina, N_PROPERTIES};
use prefixgen::smiles::{detokenize, parse, validate};
use prefixgen::tensor::no_grad;

/// Rows in a condition prefix (pocket plus the five scalar properties).
pub const PG_CONDITION_ROWS: u32 = 6;

/// Scalar properties, in order: vina, qed, sa, logp, lipinski.
pub const PG_PROPERTY_COUNT: u32 = 5;

const _: () = assert!(PG_CONDITION_ROWS as usize == CONDITION_ROWS);
const _: () = assert!(PG_PROPERTY_COUNT as usize == N_PROPERTIES);

/// Result of every fallible call. Anything other than Ok leaves a
/// description in `pg_last_error`.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ParseError = 4,
    Io = 5,
    BadCheckpoint = 6,
    BufferTooSmall = 7,
    Runtime = 8,
}

/// A loaded checkpoint: model weights plus its vocabulary.
///
/// Handles are not thread-safe; confine each one to a single thread.
pub struct PgModel {
    ckpt: LoadedCheckpoint,
}

/// Generation conditions. A `use_*` flag of zero leaves that property
/// unconditioned (its value is then ignored); a null `pocket_path` means no
/// pocket conditioning.
#[repr(C)]
pub struct PgConditions {
    pub vina: f64,
    pub qed: f64,
    pub sa: f64,
    pub logp: f64,
    pub lipinski: u8,
    pub use_vina: u8,
    pub use_qed: u8,
    pub use_sa: u8,
    pub use_logp: u8,
    pub use_lipinski: u8,
    pub pocket_path: *const c_char,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Display) {
    let s = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("NULs stripped"));
}

fn guard<F: FnOnce() -> PgStatus>(f: F) -> PgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            PgStatus::Runtime
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char, name: &str) -> Result<&'a str, PgStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(PgStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(format!("{name} is not valid UTF-8"));
        PgStatus::InvalidUtf8
    })
}

unsafe fn model_ref<'a>(m: *const PgModel) -> Result<&'a PgModel, PgStatus> {
    if m.is_null() {
        set_error("model handle is null");
        return Err(PgStatus::NullPointer);
    }
    Ok(&*m)
}

fn non_null<T>(p: *mut T, name: &str) -> Result<(), PgStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        return Err(PgStatus::NullPointer);
    }
    Ok(())
}

fn load_pocket(path: &str) -> Result<PocketGraph, PgStatus> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        set_error(format!("{path}: {e}"));
        PgStatus::Io
    })?;
    let bad = |e: &dyn Display| {
        set_error(format!("{path}: {e}"));
        PgStatus::ParseError
    };
    let cloud = parse_pocket_file(&text).map_err(|e| bad(&e))?;
    let mut g = PocketGraph::build(&cloud).map_err(|e| bad(&e))?;
    g.anchor = Some(select_anchor_inference(&g, &cloud.ligand_refs).map_err(|e| bad(&e))?);
    Ok(g)
}

unsafe fn read_conditions(
    c: *const PgConditions,
) -> Result<(PropVec, Option<PocketGraph>), PgStatus> {
    if c.is_null() {
        let props = PropVec {
            vina: 0.0,
            qed: 0.0,
            sa: 0.0,
            logp: 0.0,
            lipinski: 0,
            mask: [false; N_PROPERTIES],
        };
        return Ok((props, None));
    }
    let c = &*c;
    let props = PropVec {
        vina: c.vina,
        qed: c.qed,
        sa: c.sa,
        logp: c.logp,
        lipinski: c.lipinski,
        mask: [
            c.use_vina != 0,
            c.use_qed != 0,
            c.use_sa != 0,
            c.use_logp != 0,
            c.use_lipinski != 0,
        ],
    };
    let pocket = if c.pocket_path.is_null() {
        None
    } else {
        Some(load_pocket(cstr(c.pocket_path, "pocket_path")?)?)
    };
    Ok((props, pocket))
}

/// Message for the most recent failure on the calling thread, empty when
/// nothing failed yet. The pointer stays valid until the next failing call
/// on the same thread.
///
/// # Safety
/// The returned pointer must not be freed or written through.
#[no_mangle]
pub unsafe extern "C" fn pg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file and hands back an owned model handle through
/// `out`. Free it with `pg_model_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pg_model_load(path: *const c_char, out: *mut *mut PgModel) -> PgStatus {
    guard(|| {
        let body = || -> Result<(), PgStatus> {
            non_null(out, "out")?;
            let path = cstr(path, "path")?;
            let f = File::open(path).map_err(|e| {
                set_error(format!("{path}: {e}"));
                PgStatus::Io
            })?;
            let ckpt = load_checkpoint(&mut BufReader::new(f)).map_err(|e| {
                set_error(format!("{path}: {e}"));
                PgStatus::BadCheckpoint
            })?;
            *out = Box::into_raw(Box::new(PgModel { ckpt }));
            Ok(())
        };
        body().err().unwrap_or(PgStatus::Ok)
    })
}

/// Releases a model handle. Passing null is a no-op.
///
/// # Safety
/// `m` must be a handle from `pg_model_load` that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn pg_model_free(m: *mut PgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Model width (embedding dimension). Returns 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle from `pg_model_load`.
#[no_mangle]
pub unsafe extern "C" fn pg_model_width(m: *const PgModel) -> u32 {
    if m.is_null() {
        return 0;
    }
    (*m).ckpt.model.config.d as u32
}

/// Vocabulary size. Returns 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle from `pg_model_load`.
#[no_mangle]
pub unsafe extern "C" fn pg_model_vocab_size(m: *const PgModel) -> u32 {
    if m.is_null() {
        return 0;
    }
    (*m).ckpt.model.config.vocab as u32
}

/// Longest supported token sequence. Returns 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle from `pg_model_load`.
#[no_mangle]
pub unsafe extern "C" fn pg_model_max_len(m: *const PgModel) -> u32 {
    if m.is_null() {
        return 0;
    }
    (*m).ckpt.model.config.max_len as u32
}

/// Samples one molecule and writes it as a NUL-terminated SMILES string
/// into `buf`. `needed` always receives the required buffer size in bytes
/// (including the NUL), so a call with `buf_len` 0 sizes the buffer. The
/// same seed always produces the same molecule.
///
/// `conditions` may be null for unconditional sampling. `temperature` 0
/// picks greedily; `top_k` 0 is treated as 1.
///
/// # Safety
/// `model` must be a live handle; `buf` must point to `buf_len` writable
/// bytes (null only when `buf_len` is 0); `needed` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pg_sample(
    model: *const PgModel,
    conditions: *const PgConditions,
    seed: u64,
    temperature: f64,
    top_k: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> PgStatus {
    guard(|| {
        let body = || -> Result<(), PgStatus> {
            let m = model_ref(model)?;
            non_null(needed, "needed")?;
            if buf.is_null() && buf_len > 0 {
                set_error("buf is null but buf_len is nonzero");
                return Err(PgStatus::NullPointer);
            }
            if !temperature.is_finite() || temperature < 0.0 {
                set_error(format!("temperature {temperature} must be finite and non-negative"));
                return Err(PgStatus::InvalidArgument);
            }
            let (props, pocket) = read_conditions(conditions)?;
            let smiles = {
                let _g = no_grad();
                let prefix = m
                    .ckpt
                    .model
                    .encoder
                    .assemble_prefix(pocket.as_ref(), &props)
                    .map_err(|e| {
                        set_error(e.to_string());
                        PgStatus::Runtime
                    })?;
                let params = SampleParams {
                    max_len: m.ckpt.model.config.max_len,
                    temperature: temperature as f32,
                    top_k,
                    seed,
                };
                let ids = m.ckpt.model.sample(&prefix, &params).map_err(|e| {
                    set_error(e.to_string());
                    PgStatus::Runtime
                })?;
                let toks = m.ckpt.vocab.decode(&ids).map_err(|e| {
                    set_error(e.to_string());
                    PgStatus::Runtime
                })?;
                detokenize(&toks)
            };
            let total = smiles.len() + 1;
            *needed = total;
            if buf_len < total {
                set_error(format!("buffer of {buf_len} bytes, need {total}"));
                return Err(PgStatus::BufferTooSmall);
            }
            ptr::copy_nonoverlapping(smiles.as_ptr(), buf as *mut u8, smiles.len());
            *buf.add(smiles.len()) = 0;
            Ok(())
        };
        body().err().unwrap_or(PgStatus::Ok)
    })
}

/// Parses and validates a molecule, then writes its five properties (vina
/// surrogate, qed, sa, logp, lipinski) into `out`.
///
/// # Safety
/// `smiles` must be NUL-terminated; `out` must hold PG_PROPERTY_COUNT
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_properties(smiles: *const c_char, out: *mut f64) -> PgStatus {
    guard(|| {
        let body = || -> Result<(), PgStatus> {
            non_null(out, "out")?;
            let s = cstr(smiles, "smiles")?;
            let g = parse(s).map_err(|e| {
                set_error(format!("{s}: {e}"));
                PgStatus::ParseError
            })?;
            let report = validate(&g);
            if !report.valid {
                let reasons: Vec<String> =
                    report.reasons.iter().map(|r| r.to_string()).collect();
                set_error(format!("{s}: {}", reasons.join("; ")));
                return Err(PgStatus::ParseError);
            }
            let props = property_vector(&g, &SurrogateVina).map_err(|e| {
                set_error(format!("{s}: {e}"));
                PgStatus::Runtime
            })?;
            for (i, v) in props.values().into_iter().enumerate() {
                *out.add(i) = v;
            }
            Ok(())
        };
        body().err().unwrap_or(PgStatus::Ok)
    })
}

/// Writes 1 into `valid` when the molecule parses and passes validation,
/// else 0 (with the reason in `pg_last_error`). The status reports only
/// argument problems.
///
/// # Safety
/// `smiles` must be NUL-terminated; `valid` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pg_validate(smiles: *const c_char, valid: *mut i32) -> PgStatus {
    guard(|| {
        let body = || -> Result<(), PgStatus> {
            non_null(valid, "valid")?;
            let s = cstr(smiles, "smiles")?;
            *valid = match parse(s) {
                Ok(g) => {
                    let report = validate(&g);
                    if !report.valid {
                        let reasons: Vec<String> =
                            report.reasons.iter().map(|r| r.to_string()).collect();
                        set_error(format!("{s}: {}", reasons.join("; ")));
                    }
                    report.valid as i32
                }
                Err(e) => {
                    set_error(format!("{s}: {e}"));
                    0
                }
            };
            Ok(())
        };
        body().err().unwrap_or(PgStatus::Ok)
    })
}

/// Condition-relation matrix of the model at the given base conditions:
/// PG_CONDITION_ROWS x PG_CONDITION_ROWS doubles, row-major, into `out`.
/// Unconditioned properties contribute nothing (their rows interact only
/// through the others).
///
/// # Safety
/// `model` must be a live handle; `out` must hold PG_CONDITION_ROWS *
/// PG_CONDITION_ROWS doubles.
#[no_mangle]
pub unsafe extern "C" fn pg_relation_matrix(
    model: *const PgModel,
    conditions: *const PgConditions,
    delta: f64,
    out: *mut f64,
) -> PgStatus {
    guard(|| {
        let body = || -> Result<(), PgStatus> {
            let m = model_ref(model)?;
            non_null(out, "out")?;
            if delta == 0.0 || !delta.is_finite() {
                set_error(format!("delta {delta} must be nonzero and finite"));
                return Err(PgStatus::InvalidArgument);
            }
            let (props, pocket) = read_conditions(conditions)?;
            let matrix = relation_matrix(&m.ckpt.model, pocket.as_ref(), &props, delta)
                .map_err(|e| {
                    set_error(e.to_string());
                    PgStatus::Runtime
                })?;
            for (i, row) in matrix.r.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    *out.add(i * CONDITION_ROWS + j) = *v;
                }
            }
            Ok(())
        };
        body().err().unwrap_or(PgStatus::Ok)
    })
}
