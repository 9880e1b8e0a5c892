use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use mscnn::grid::Grid2D;
use mscnn::model_io::{save_model, ModelFile, Provenance};
use mscnn::training::{init_model, Architecture};
use mscnn_ffi::*;

fn last_error() -> String {
    let p = mscnn_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn write_model(path: &Path) {
    let arch = Architecture::default();
    let (params, classifier) = init_model(&arch, Grid2D::unit_square(8).unwrap(), 3, 7).unwrap();
    let m = ModelFile {
        params,
        classifier,
        provenance: Provenance::default(),
    };
    save_model(&m, path).unwrap();
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn load_predict_save_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.bin");
    write_model(&src);
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            mscnn_model_load(cpath(&src).as_ptr(), &mut model),
            MscnnStatus::Ok
        );
        let (mut nx, mut ny, mut h, mut l) = (0usize, 0usize, 0.0, 0usize);
        assert_eq!(
            mscnn_model_shape(model, &mut nx, &mut ny, &mut h, &mut l),
            MscnnStatus::Ok
        );
        assert_eq!((nx, ny, l), (8, 8, 3));
        assert_eq!(h, 1.0 / 8.0);

        let img: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut probs = [0.0; 3];
        assert_eq!(
            mscnn_model_predict(model, img.as_ptr(), 64, probs.as_mut_ptr(), 3),
            MscnnStatus::Ok
        );
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let dst = dir.path().join("b.bin");
        assert_eq!(
            mscnn_model_save(model, cpath(&dst).as_ptr()),
            MscnnStatus::Ok
        );
        assert_eq!(std::fs::read(&src).unwrap(), std::fs::read(&dst).unwrap());
        mscnn_model_free(model);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut model = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.bin").unwrap();
    unsafe {
        assert_eq!(
            mscnn_model_load(missing.as_ptr(), &mut model),
            MscnnStatus::Io
        );
        assert!(last_error().contains("/nonexistent/model.bin"));
        assert!(model.is_null());
        assert_eq!(
            mscnn_model_load(ptr::null(), &mut model),
            MscnnStatus::NullPointer
        );

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"not a model").unwrap();
        assert_eq!(
            mscnn_model_load(cpath(&junk).as_ptr(), &mut model),
            MscnnStatus::Format
        );

        let mut map = ptr::null_mut();
        assert_eq!(
            mscnn_coarsen_map_new(3, 9, &mut map),
            MscnnStatus::InvalidArgument
        );
        assert_eq!(
            mscnn_coarsen_map_new(4, 0, &mut map),
            MscnnStatus::Dimension
        );
        mscnn_model_free(ptr::null_mut());
        mscnn_coarsen_map_free(ptr::null_mut());
    }
    assert!(!mscnn_last_error_message().is_null());
}

#[test]
fn predict_rejects_wrong_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.bin");
    write_model(&src);
    let mut model = ptr::null_mut();
    unsafe {
        mscnn_model_load(cpath(&src).as_ptr(), &mut model);
        let img = vec![0.0; 63];
        let mut probs = [0.0; 3];
        assert_eq!(
            mscnn_model_predict(model, img.as_ptr(), 63, probs.as_mut_ptr(), 3),
            MscnnStatus::Dimension
        );
        let img = vec![0.0; 64];
        assert_eq!(
            mscnn_model_predict(model, img.as_ptr(), 64, probs.as_mut_ptr(), 2),
            MscnnStatus::Dimension
        );
        mscnn_model_free(model);
    }
}

#[test]
fn adapt_changes_grid_and_round_trips_stencils() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("a.bin");
    write_model(&src);
    let (mut fine, mut coarse, mut back) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
    unsafe {
        mscnn_model_load(cpath(&src).as_ptr(), &mut fine);
        assert_eq!(
            mscnn_model_adapt(fine, MscnnDirection::Coarsen as u32, 0, &mut coarse),
            MscnnStatus::Ok
        );
        let (mut nx, mut ny, mut h, mut l) = (0usize, 0usize, 0.0, 0usize);
        mscnn_model_shape(coarse, &mut nx, &mut ny, &mut h, &mut l);
        assert_eq!((nx, ny, h), (4, 4, 0.25));
        assert_eq!(
            mscnn_model_adapt(coarse, MscnnDirection::Refine as u32, 0, &mut back),
            MscnnStatus::Ok
        );
        mscnn_model_shape(back, &mut nx, &mut ny, &mut h, &mut l);
        assert_eq!((nx, ny), (8, 8));
        assert_eq!(
            mscnn_model_adapt(fine, 5, 0, &mut back),
            MscnnStatus::InvalidArgument
        );
        mscnn_model_free(back);
        mscnn_model_free(coarse);
        mscnn_model_free(fine);
    }
}

#[test]
fn coarsen_map_round_trip() {
    for transfer in [MscnnTransfer::Constant, MscnnTransfer::Bilinear] {
        let mut map = ptr::null_mut();
        unsafe {
            assert_eq!(
                mscnn_coarsen_map_new(3, transfer as u32, &mut map),
                MscnnStatus::Ok
            );
            let mut cond = 0.0;
            mscnn_coarsen_map_condition(map, &mut cond);
            assert!((1.0..1e6).contains(&cond));
            let s = [0.3, -1.2, 0.5, 2.0, -0.7, 0.1, -0.4, 0.9, 1.1];
            let (mut c, mut f) = ([0.0; 9], [0.0; 9]);
            assert_eq!(
                mscnn_coarsen_map_coarsen(map, s.as_ptr(), c.as_mut_ptr(), 9),
                MscnnStatus::Ok
            );
            assert_eq!(
                mscnn_coarsen_map_refine(map, c.as_ptr(), f.as_mut_ptr(), 9),
                MscnnStatus::Ok
            );
            for (a, b) in s.iter().zip(&f) {
                assert!((a - b).abs() <= 1e-10);
            }
            assert_eq!(
                mscnn_coarsen_map_coarsen(map, s.as_ptr(), c.as_mut_ptr(), 4),
                MscnnStatus::Dimension
            );
            mscnn_coarsen_map_free(map);
        }
    }
}

#[test]
fn stability_of_identity() {
    let id = [0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let (mut re, mut g) = (0.0, 0.0);
    let st = unsafe { mscnn_stability_report(id.as_ptr(), 3, 8, 8, 1.0, 1.0, &mut re, &mut g) };
    assert_eq!(st, MscnnStatus::Ok);
    assert!((re - 1.0).abs() < 1e-12 && (g - 2.0).abs() < 1e-12);
}

#[test]
fn constant_image_transfer() {
    let img = [2.5; 16];
    let mut coarse = vec![0.0; 4];
    let mut fine = vec![0.0; 64];
    unsafe {
        assert_eq!(
            mscnn_restrict_image(img.as_ptr(), 4, 4, 0, coarse.as_mut_ptr(), 4),
            MscnnStatus::Ok
        );
        assert_eq!(
            mscnn_prolong_image(img.as_ptr(), 4, 4, 1, fine.as_mut_ptr(), 64),
            MscnnStatus::Ok
        );
        assert_eq!(
            mscnn_restrict_image(img.as_ptr(), 3, 5, 0, coarse.as_mut_ptr(), 4),
            MscnnStatus::Dimension
        );
    }
    assert!(coarse.iter().all(|v| (v - 2.5).abs() < 1e-14));
    assert!(fine.iter().all(|v| (v - 2.5).abs() < 1e-14));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mscnn.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "mscnn_model_load",
        "mscnn_coarsen_map_refine",
        "MSCNN_STATUS_DIMENSION",
        "typedef struct MscnnModel MscnnModel",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(&src, "#include \"mscnn.h\"\nint main(void){MscnnModel*m=0;return (int)mscnn_model_load(\"x\",&m);}\n").unwrap();
    match Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(st) => assert!(st.success(), "header does not compile"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}
