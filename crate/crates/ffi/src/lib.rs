//! C ABI over the `lvce` toolkit.
//!
//! Objects are opaque handles created by `*_new` / `*_load` / `*_open` and
//! released with the matching `*_free`. Every fallible call returns an
//! [`LvceStatus`]; on failure [`lvce_last_error_message`] describes it.
//! Nothing panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use lvce::dosesim::{simulate_low_dose, DoseFraction, DoseModel};
use lvce::evalstat::{self, SsimConfig};
use lvce::nn::checkpoint::load_checkpoint;
use lvce::nn::VNetModel;
use lvce::register::{register_rigid, RegistrationConfig};
use lvce::study::{Study, StudyConfig};
use lvce::volume::nifti::{read_nifti, write_nifti};
use lvce::volume::stack_channels;
use lvce::{ChannelLayout, Error, Volume};
use rand::SeedableRng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LvceStatus {
    Ok = 0,
    InvalidArgument = 1,
    Shape = 2,
    EmptyRegion = 3,
    DegenerateRange = 4,
    DegenerateVariance = 5,
    Format = 6,
    Registration = 7,
    TrainingDivergence = 8,
    Dependency = 9,
    Io = 10,
    NullPointer = 11,
    Panic = 12,
}

/// A 3D scalar volume.
pub struct LvceVolume(Volume);

/// A trained V-Net loaded from a checkpoint.
pub struct LvceModel(VNetModel<f32>);

/// A study bound to its output directory.
pub struct LvceStudy(Study);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Failure {
    Core(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn status_of(e: &Error) -> LvceStatus {
    match e {
        Error::InvalidArgument(_) => LvceStatus::InvalidArgument,
        Error::Shape(_) => LvceStatus::Shape,
        Error::EmptyRegion => LvceStatus::EmptyRegion,
        Error::DegenerateRange(_) => LvceStatus::DegenerateRange,
        Error::DegenerateVariance(_) => LvceStatus::DegenerateVariance,
        Error::Format { .. } | Error::Json(_) => LvceStatus::Format,
        Error::Registration(_) => LvceStatus::Registration,
        Error::TrainingDivergence(_) => LvceStatus::TrainingDivergence,
        Error::Dependency { .. } => LvceStatus::Dependency,
        Error::Io { .. } => LvceStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LvceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LvceStatus::Ok
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed for `{what}`"));
            LvceStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic");
            LvceStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument(format!("`{what}` is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn mask_arg(mask: *const u8, len: usize) -> Result<Option<Vec<bool>>, Failure> {
    if mask.is_null() {
        return Ok(None);
    }
    Ok(Some(slice(mask, len, "mask")?.iter().map(|&b| b != 0).collect()))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    *out = value;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lvce_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn lvce_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Create a volume from `len = dims[0]*dims[1]*dims[2]` values in
/// x-fastest order.
///
/// # Safety
/// `dims` and `spacing` point to 3 values, `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_new(
    dims: *const usize,
    spacing: *const f64,
    data: *const f64,
    len: usize,
    out: *mut *mut LvceVolume,
) -> LvceStatus {
    guard(|| {
        let d = slice(dims, 3, "dims")?;
        let s = slice(spacing, 3, "spacing")?;
        let v = slice(data, len, "data")?;
        let vol = Volume::new([d[0], d[1], d[2]], [s[0], s[1], s[2]], v.to_vec())?;
        put(out, LvceVolume(vol))
    })
}

/// # Safety
/// `vol` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_free(vol: *mut LvceVolume) {
    if !vol.is_null() {
        drop(Box::from_raw(vol));
    }
}

/// # Safety
/// `vol` is a live handle; `out_dims` points to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_dims(vol: *const LvceVolume, out_dims: *mut usize) -> LvceStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        if out_dims.is_null() {
            return Err(Failure::Null("out_dims"));
        }
        std::slice::from_raw_parts_mut(out_dims, 3).copy_from_slice(&v.0.dims());
        Ok(())
    })
}

/// Copy the voxel values into `out`, which must hold exactly the voxel count.
///
/// # Safety
/// `vol` is a live handle; `out` points to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_copy_data(vol: *const LvceVolume, out: *mut f64, len: usize) -> LvceStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        if len != v.0.len() {
            return Err(Error::InvalidArgument(format!("buffer holds {len} values, volume has {}", v.0.len())).into());
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(v.0.data());
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_read_nifti(path: *const c_char, out: *mut *mut LvceVolume) -> LvceStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        put(out, LvceVolume(read_nifti(p)?))
    })
}

/// # Safety
/// `vol` is a live handle; `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lvce_volume_write_nifti(vol: *const LvceVolume, path: *const c_char) -> LvceStatus {
    guard(|| {
        let v = deref(vol, "vol")?;
        write_nifti(&v.0, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Mean squared error over the mask (nonzero bytes), or the whole volume
/// when `mask` is null.
///
/// # Safety
/// Handles are live; `mask` is null or points to `mask_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lvce_mse(
    pred: *const LvceVolume,
    reference: *const LvceVolume,
    mask: *const u8,
    mask_len: usize,
    out: *mut f64,
) -> LvceStatus {
    guard(|| {
        let m = mask_arg(mask, mask_len)?;
        let v = evalstat::mse(&deref(pred, "pred")?.0, &deref(reference, "reference")?.0, m.as_deref())?;
        write_out(out, v)
    })
}

/// PSNR in dB; `INFINITY` for identical inputs.
///
/// # Safety
/// As [`lvce_mse`].
#[no_mangle]
pub unsafe extern "C" fn lvce_psnr(
    pred: *const LvceVolume,
    reference: *const LvceVolume,
    mask: *const u8,
    mask_len: usize,
    data_range: f64,
    out: *mut f64,
) -> LvceStatus {
    guard(|| {
        let m = mask_arg(mask, mask_len)?;
        let v = evalstat::psnr(&deref(pred, "pred")?.0, &deref(reference, "reference")?.0, m.as_deref(), data_range)?;
        write_out(out, v)
    })
}

/// 3D SSIM with the default Gaussian window (sigma 1.5, 11 voxels).
///
/// # Safety
/// As [`lvce_mse`].
#[no_mangle]
pub unsafe extern "C" fn lvce_ssim(
    pred: *const LvceVolume,
    reference: *const LvceVolume,
    mask: *const u8,
    mask_len: usize,
    data_range: f64,
    out: *mut f64,
) -> LvceStatus {
    guard(|| {
        let m = mask_arg(mask, mask_len)?;
        let cfg = SsimConfig { data_range, ..SsimConfig::default() };
        let v = evalstat::ssim(&deref(pred, "pred")?.0, &deref(reference, "reference")?.0, m.as_deref(), &cfg)?;
        write_out(out, v)
    })
}

/// Linear low-dose simulation `pc + dose * (sd - pc)` plus Gaussian noise.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lvce_simulate_low_dose(
    pc: *const LvceVolume,
    sd: *const LvceVolume,
    dose: f64,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut LvceVolume,
) -> LvceStatus {
    guard(|| {
        let model = DoseModel { noise_sigma_ld: noise_sigma, ..DoseModel::default() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ld = simulate_low_dose(&deref(pc, "pc")?.0, &deref(sd, "sd")?.0, DoseFraction::new(dose)?, &model, &mut rng)?;
        put(out, LvceVolume(ld))
    })
}

/// Rigid registration of `moving` onto `fixed` with default settings.
/// Writes `[rx, ry, rz, tx, ty, tz]` (radians, mm) to `out_params`.
///
/// # Safety
/// Handles are live; `fixed_mask` is null or `mask_len` bytes;
/// `out_params` points to 6 writable values.
#[no_mangle]
pub unsafe extern "C" fn lvce_register_rigid(
    moving: *const LvceVolume,
    fixed: *const LvceVolume,
    fixed_mask: *const u8,
    mask_len: usize,
    out_params: *mut f64,
) -> LvceStatus {
    guard(|| {
        let mut f = deref(fixed, "fixed")?.0.clone();
        if let Some(m) = mask_arg(fixed_mask, mask_len)? {
            f = f.with_mask(m)?;
        }
        let p = register_rigid(&deref(moving, "moving")?.0, &f, &RegistrationConfig::default())?;
        if out_params.is_null() {
            return Err(Failure::Null("out_params"));
        }
        let out = std::slice::from_raw_parts_mut(out_params, 6);
        out[..3].copy_from_slice(&p.rotation);
        out[3..].copy_from_slice(&p.translation);
        Ok(())
    })
}

/// Wilcoxon signed-rank test on paired samples; writes min(W+, W-) and the
/// two-sided p-value.
///
/// # Safety
/// `a` and `b` point to `n` values; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn lvce_wilcoxon(
    a: *const f64,
    b: *const f64,
    n: usize,
    out_statistic: *mut f64,
    out_p: *mut f64,
) -> LvceStatus {
    guard(|| {
        let w = evalstat::wilcoxon_signed_rank(slice(a, n, "a")?, slice(b, n, "b")?)?;
        write_out(out_statistic, w.statistic)?;
        write_out(out_p, w.p)
    })
}

/// Paired t-test; writes t and the two-sided p-value.
///
/// # Safety
/// `a` and `b` point to `n` values; outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn lvce_paired_t(
    a: *const f64,
    b: *const f64,
    n: usize,
    out_t: *mut f64,
    out_p: *mut f64,
) -> LvceStatus {
    guard(|| {
        let t = evalstat::paired_t_test(slice(a, n, "a")?, slice(b, n, "b")?)?;
        write_out(out_t, t.t)?;
        write_out(out_p, t.p)
    })
}

/// # Safety
/// `path` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lvce_model_load(path: *const c_char, out: *mut *mut LvceModel) -> LvceStatus {
    guard(|| {
        let (model, _) = load_checkpoint(&path_arg(path, "path")?)?;
        put(out, LvceModel(model))
    })
}

/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lvce_model_free(model: *mut LvceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of input channels (2 single-session, 4 longitudinal); 0 for null.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lvce_model_in_channels(model: *const LvceModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config().in_channels)
}

/// Predict the full-dose image. `channels` holds `n` volumes in the model's
/// channel order, ending with the current low-dose image.
///
/// # Safety
/// `model` is live; `channels` points to `n` live volume handles.
#[no_mangle]
pub unsafe extern "C" fn lvce_model_predict(
    model: *const LvceModel,
    channels: *const *const LvceVolume,
    n: usize,
    out: *mut *mut LvceVolume,
) -> LvceStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let layout = match n {
            4 => ChannelLayout::Longitudinal,
            2 => ChannelLayout::SingleSession,
            _ => return Err(Error::InvalidArgument(format!("expected 2 or 4 channels, got {n}")).into()),
        };
        let vols = slice(channels, n, "channels")?
            .iter()
            .map(|&p| deref(p, "channel").map(|v| v.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let pred = m.0.predict_volume(&stack_channels(vols, layout)?)?;
        put(out, LvceVolume(pred))
    })
}

/// Open a study from a JSON config (missing fields take defaults).
///
/// # Safety
/// `config_json` is a NUL-terminated UTF-8 string.
#[no_mangle]
pub unsafe extern "C" fn lvce_study_open(config_json: *const c_char, out: *mut *mut LvceStudy) -> LvceStatus {
    guard(|| {
        if config_json.is_null() {
            return Err(Failure::Null("config_json"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| Error::InvalidArgument("config is not UTF-8".into()))?;
        let cfg = StudyConfig::from_json(text)?;
        put(out, LvceStudy(Study::open(&cfg)?))
    })
}

/// Run every stage at the primary dose (and the dose sweep when
/// `with_sweep` is true). Completed stages are skipped.
///
/// # Safety
/// `study` is a live handle.
#[no_mangle]
pub unsafe extern "C" fn lvce_study_run(study: *mut LvceStudy, with_sweep: bool) -> LvceStatus {
    guard(|| {
        let s = study.as_mut().ok_or(Failure::Null("study"))?;
        s.0.run_all(with_sweep)?;
        Ok(())
    })
}

/// # Safety
/// `study` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lvce_study_free(study: *mut LvceStudy) {
    if !study.is_null() {
        drop(Box::from_raw(study));
    }
}
