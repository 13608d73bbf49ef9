use std::ffi::{CStr, CString};
use std::ptr;

use cacmotion_ffi::*;

fn last_error() -> String {
    let p = cm_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn volume_roundtrip_and_scoring() {
    unsafe {
        let spacing = [1.0, 1.0, 1.0];
        let mut vals = vec![-100.0; 4 * 4];
        vals[5] = 500.0;
        vals[6] = 500.0;
        let mut v = ptr::null_mut();
        assert_eq!(
            cm_volume_new(4, 4, 1, spacing.as_ptr(), vals.as_ptr(), &mut v),
            CmStatus::Ok
        );

        let mut dims = [0usize; 3];
        let mut sp = [0.0; 3];
        assert_eq!(
            cm_volume_dims(v, dims.as_mut_ptr(), sp.as_mut_ptr()),
            CmStatus::Ok
        );
        assert_eq!(dims, [4, 4, 1]);

        let mut score = 0.0;
        let mut grade = -1;
        assert_eq!(cm_agatston(v, &mut score, &mut grade), CmStatus::Ok);
        // 2 mm² at weight 4
        assert_eq!(score, 8.0);
        assert_eq!(grade, 1);

        let mut m = ptr::null_mut();
        assert_eq!(cm_mask_threshold(v, 130.0, &mut m), CmStatus::Ok);
        let mut count = 0;
        assert_eq!(cm_mask_count(m, &mut count), CmStatus::Ok);
        assert_eq!(count, 2);
        let mut dice = 1.0;
        assert_eq!(cm_dice_loss(v, m, &mut dice), CmStatus::Ok);
        assert_eq!(dice, 0.0);
        let mut vs = 0.0;
        assert_eq!(cm_volume_score(v, 0.01, &mut vs), CmStatus::Ok);
        assert!((vs - 2.0).abs() < 1e-9);

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("v.raw").to_str().unwrap()).unwrap();
        assert_eq!(cm_volume_save(v, path.as_ptr()), CmStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(cm_volume_load(path.as_ptr(), &mut back), CmStatus::Ok);
        let mut got = vec![0.0; 16];
        assert_eq!(
            cm_volume_copy_values(back, got.as_mut_ptr(), 16),
            CmStatus::Ok
        );
        assert_eq!(got, vals);
        assert_eq!(
            cm_volume_copy_values(back, got.as_mut_ptr(), 3),
            CmStatus::InvalidArgument
        );

        cm_volume_free(back);
        cm_mask_free(m);
        cm_volume_free(v);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut v = ptr::null_mut();
        let spacing = [1.0, 1.0, 1.0];
        assert_eq!(
            cm_volume_new(0, 4, 4, spacing.as_ptr(), ptr::null(), &mut v),
            CmStatus::InvalidArgument
        );
        assert!(v.is_null());
        assert!(!last_error().is_empty());

        assert_eq!(
            cm_agatston(ptr::null(), ptr::null_mut(), ptr::null_mut()),
            CmStatus::NullPointer
        );
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/dir/v.raw").unwrap();
        assert_eq!(cm_volume_load(missing.as_ptr(), &mut v), CmStatus::Io);

        let mut d = ptr::null_mut();
        assert_eq!(cm_denoiser_identity(2, &mut d), CmStatus::InvalidArgument);
        cm_volume_free(ptr::null_mut());
        cm_mask_free(ptr::null_mut());
        cm_denoiser_free(ptr::null_mut());
    }
}

#[test]
fn radon_fbp_roundtrip_on_a_disk() {
    let n = 32;
    let mut img = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 - 15.5, y as f64 - 15.5);
            if dx * dx + dy * dy < 64.0 {
                img[y * n + x] = 1.0;
            }
        }
    }
    let na = 180;
    let angles: Vec<f64> = (0..na).map(|i| i as f64).collect();
    let bins = cm_detector_bins(n);
    let mut sino = vec![0.0; na * bins];
    let mut rec = vec![0.0; n * n];
    unsafe {
        assert_eq!(
            cm_radon(
                img.as_ptr(),
                n,
                1.0,
                angles.as_ptr(),
                na,
                sino.as_mut_ptr(),
                sino.len()
            ),
            CmStatus::Ok
        );
        assert_eq!(
            cm_fbp(
                sino.as_ptr(),
                na,
                bins,
                1.0,
                angles.as_ptr(),
                n,
                false,
                0.0,
                rec.as_mut_ptr()
            ),
            CmStatus::Ok
        );
    }
    let err: f64 = img
        .iter()
        .zip(&rec)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = img.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(err / norm < 0.15, "relative error {}", err / norm);
}

#[test]
fn phantom_simulate_and_identity_correction() {
    unsafe {
        let (mut v, mut m) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(cm_phantom(3, &mut v, &mut m), CmStatus::Ok);
        let preset = CString::new("translation-x-mild").unwrap();
        let mut y = ptr::null_mut();
        assert_eq!(
            cm_simulate(v, m, preset.as_ptr(), 180, 1, f64::NAN, &mut y),
            CmStatus::Ok
        );
        let bad = CString::new("no-such-preset").unwrap();
        let mut z = ptr::null_mut();
        assert_eq!(
            cm_simulate(v, m, bad.as_ptr(), 180, 1, f64::NAN, &mut z),
            CmStatus::InvalidArgument
        );
        assert_eq!(
            cm_simulate(v, m, preset.as_ptr(), 100, 1, f64::NAN, &mut z),
            CmStatus::InvalidArgument
        );

        let mut d = ptr::null_mut();
        assert_eq!(cm_denoiser_identity(3, &mut d), CmStatus::Ok);
        let mut fixed = ptr::null_mut();
        assert_eq!(cm_correct(y, d, 1, 0, &mut fixed), CmStatus::Ok);
        let n = 64 * 64 * 16;
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        assert_eq!(cm_volume_copy_values(y, a.as_mut_ptr(), n), CmStatus::Ok);
        assert_eq!(
            cm_volume_copy_values(fixed, b.as_mut_ptr(), n),
            CmStatus::Ok
        );
        for (p, q) in a.iter().zip(&b) {
            assert!((p.clamp(-200.0, 800.0) - q).abs() < 1e-9);
        }
        assert_eq!(
            cm_correct(y, d, 7, 0, &mut fixed),
            CmStatus::InvalidArgument
        );

        cm_volume_free(fixed);
        cm_denoiser_free(d);
        cm_volume_free(y);
        cm_mask_free(m);
        cm_volume_free(v);
    }
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/cacmotion.h"))
        .unwrap();
    for name in [
        "CM_STATUS_NULL_POINTER",
        "cm_volume_new",
        "cm_volume_free",
        "cm_agatston",
        "cm_simulate",
        "cm_radon",
        "cm_fbp",
        "cm_denoiser_load",
        "cm_correct",
        "cm_last_error_message",
        "typedef struct CmVolume CmVolume",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}
