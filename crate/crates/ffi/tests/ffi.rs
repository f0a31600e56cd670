use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use defattn::metrics::{boundary_f, region_j};
use defattn::propagation::{segment_sequence, Network, NetworkSpec};
use defattn::synthdata::{generate_sequence, Difficulty, GenerateOptions};
use defattn::Tensor;
use defattn_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(defattn_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn sequence(seed: u64, n_frames: usize, difficulty: &str) -> *mut DefattnSequence {
    let d = CString::new(difficulty).unwrap();
    let mut seq = ptr::null_mut();
    let st = unsafe { defattn_sequence_generate(seed, 32, 32, n_frames, 2, d.as_ptr(), &mut seq) };
    assert_eq!(st, DefattnStatus::Ok, "{}", last_error());
    seq
}

#[test]
fn sequence_matches_library() {
    let seq = sequence(11, 4, "clutter");
    let (mut n, mut h, mut w, mut k) = (0, 0, 0, 0);
    assert_eq!(
        unsafe { defattn_sequence_dims(seq, &mut n, &mut h, &mut w, &mut k) },
        DefattnStatus::Ok
    );
    assert_eq!((n, h, w, k), (4, 32, 32, 2));

    let rec = generate_sequence(
        11,
        &GenerateOptions {
            h: 32,
            w: 32,
            n_frames: 4,
            n_objects: 2,
            difficulty: Difficulty::Clutter,
            ..GenerateOptions::default()
        },
    )
    .unwrap();
    let mut frame = vec![0u8; h * w * 3];
    let mut mask = vec![0u8; h * w];
    for t in 0..n {
        assert_eq!(
            unsafe { defattn_sequence_frame(seq, t, frame.as_mut_ptr()) },
            DefattnStatus::Ok
        );
        assert_eq!(
            unsafe { defattn_sequence_mask(seq, t, mask.as_mut_ptr()) },
            DefattnStatus::Ok
        );
        assert_eq!(frame, rec.frames[t].data);
        assert_eq!(mask, rec.mask(t).ids());
    }
    assert_eq!(
        unsafe { defattn_sequence_frame(seq, 4, frame.as_mut_ptr()) },
        DefattnStatus::InvalidArgument
    );
    assert!(last_error().contains("out of range"));
    unsafe { defattn_sequence_free(seq) };
}

#[test]
fn segment_matches_library() {
    let spec = CString::new("student").unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(
        unsafe { defattn_model_init(spec.as_ptr(), 3, &mut model) },
        DefattnStatus::Ok
    );
    let net = Network::init(NetworkSpec::student(), 3).unwrap();
    assert_eq!(unsafe { defattn_model_num_params(model) }, net.params.numel());

    let seq = sequence(5, 3, "easy");
    let px = 32 * 32;
    let mut frames = vec![0u8; 3 * px * 3];
    for (t, chunk) in frames.chunks_mut(px * 3).enumerate() {
        unsafe { defattn_sequence_frame(seq, t, chunk.as_mut_ptr()) };
    }
    let mut mask0 = vec![0u8; px];
    unsafe { defattn_sequence_mask(seq, 0, mask0.as_mut_ptr()) };
    let mut out = vec![0u8; 2 * px];
    let st = unsafe { defattn_model_segment(model, frames.as_ptr(), 3, 32, 32, mask0.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(st, DefattnStatus::Ok, "{}", last_error());

    let rec = generate_sequence(
        5,
        &GenerateOptions {
            h: 32,
            w: 32,
            n_frames: 3,
            n_objects: 2,
            ..GenerateOptions::default()
        },
    )
    .unwrap();
    let tensors: Vec<Tensor> = rec.frames.iter().map(|f| f.to_tensor()).collect();
    let seg = segment_sequence(&net, &tensors, rec.mask(0), 2).unwrap();
    for (chunk, m) in out.chunks(px).zip(&seg.masks) {
        assert_eq!(chunk, m.ids());
    }

    let st = unsafe { defattn_model_segment(model, frames.as_ptr(), 1, 32, 32, mask0.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(st, DefattnStatus::InvalidArgument);
    unsafe {
        defattn_sequence_free(seq);
        defattn_model_free(model);
    }
}

#[test]
fn save_and_load_round_trip() {
    let spec = CString::new("student-vanilla").unwrap();
    let mut model = ptr::null_mut();
    unsafe { defattn_model_init(spec.as_ptr(), 9, &mut model) };
    let path = Path::new(env!("CARGO_TARGET_TMPDIR")).join("ffi_round_trip.ckpt");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { defattn_model_save(model, cpath.as_ptr()) }, DefattnStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(
        unsafe { defattn_model_load(cpath.as_ptr(), &mut loaded) },
        DefattnStatus::Ok
    );
    assert_eq!(unsafe { defattn_model_num_params(loaded) }, unsafe {
        defattn_model_num_params(model)
    });
    unsafe {
        defattn_model_free(model);
        defattn_model_free(loaded);
    }
}

#[test]
fn error_codes() {
    let mut model = ptr::null_mut();
    let bad = CString::new("resnet").unwrap();
    assert_eq!(
        unsafe { defattn_model_init(bad.as_ptr(), 0, &mut model) },
        DefattnStatus::Config
    );
    assert!(last_error().contains("resnet"));
    assert!(model.is_null());

    assert_eq!(
        unsafe { defattn_model_init(ptr::null(), 0, &mut model) },
        DefattnStatus::NullPointer
    );
    assert!(last_error().contains("spec"));

    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(
        unsafe { defattn_model_load(missing.as_ptr(), &mut model) },
        DefattnStatus::NotFound
    );

    let d = CString::new("blizzard").unwrap();
    let mut seq = ptr::null_mut();
    assert_eq!(
        unsafe { defattn_sequence_generate(0, 32, 32, 3, 2, d.as_ptr(), &mut seq) },
        DefattnStatus::Config
    );

    let mut v = 0.0;
    let a = [1.0, 1.0, 1.0, 1.0];
    assert_eq!(
        unsafe { defattn_cka(a.as_ptr(), 2, 2, a.as_ptr(), 2, &mut v) },
        DefattnStatus::Degenerate
    );

    assert_eq!(unsafe { defattn_model_num_params(ptr::null()) }, 0);
    unsafe {
        defattn_model_free(ptr::null_mut());
        defattn_sequence_free(ptr::null_mut());
    }
}

#[test]
fn metrics_match_library() {
    let seq = sequence(21, 3, "deform");
    let px = 32 * 32;
    let (mut gt, mut pred) = (vec![0u8; px], vec![0u8; px]);
    unsafe {
        defattn_sequence_mask(seq, 2, gt.as_mut_ptr());
        defattn_sequence_mask(seq, 0, pred.as_mut_ptr());
        defattn_sequence_free(seq);
    }
    let g = defattn::IdMask::new(32, 32, gt.clone()).unwrap();
    let p = defattn::IdMask::new(32, 32, pred.clone()).unwrap();
    for obj in 1..=2u8 {
        let (mut j, mut f) = (f64::NAN, f64::NAN);
        unsafe {
            assert_eq!(
                defattn_region_j(pred.as_ptr(), gt.as_ptr(), 32, 32, obj, &mut j),
                DefattnStatus::Ok
            );
            assert_eq!(
                defattn_boundary_f(pred.as_ptr(), gt.as_ptr(), 32, 32, obj, 1, &mut f),
                DefattnStatus::Ok
            );
        }
        assert_eq!(j, region_j(&p, &g, obj).unwrap());
        assert_eq!(f, boundary_f(&p, &g, obj, 1).unwrap());
    }

    let x: Vec<f64> = (0..12).map(|i| ((i * 7) % 5) as f64 + 0.1 * i as f64).collect();
    let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 2.0).collect();
    let mut v = 0.0;
    assert_eq!(
        unsafe { defattn_cka(x.as_ptr(), 6, 2, y.as_ptr(), 2, &mut v) },
        DefattnStatus::Ok
    );
    assert!((v - 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/defattn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "defattn_last_error",
        "defattn_model_load",
        "defattn_model_segment",
        "defattn_cka",
        "defattn_sequence_generate",
        "DEFATTN_STATUS_PANIC",
    ] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
