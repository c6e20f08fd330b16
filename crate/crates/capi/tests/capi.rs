//! Exercises the C surface exactly as a foreign caller would: through the
//! exported extern functions, NUL-terminated strings, and raw buffers.

use std::ffi::{CStr, CString};
use std::ptr;

use trajq_capi::*;

#[test]
fn version_is_a_static_string() {
    let v = unsafe { CStr::from_ptr(trajq_version()) };
    assert!(!v.to_str().unwrap().is_empty());
}

#[test]
fn simulate_fit_and_query() {
    unsafe {
        let case = CString::new("case1").unwrap();
        let mut ds: *mut TrajqDataset = ptr::null_mut();
        assert_eq!(trajq_dataset_simulate(case.as_ptr(), 150, 9, &mut ds), TrajqStatus::Ok);
        assert_eq!(trajq_dataset_n_subjects(ds), 150);
        assert_eq!(trajq_dataset_p(ds), 3);

        let mut opts = trajq_fit_options_default();
        opts.n_b = 40;
        opts.n_restarts = 1;
        let taus = [0.25, 0.5, 0.75];
        let mut fit: *mut TrajqFit = ptr::null_mut();
        assert_eq!(
            trajq_fit(ds, &opts, taus.as_ptr(), taus.len(), &mut fit),
            TrajqStatus::Ok
        );
        assert_eq!(trajq_fit_n_tau(fit), 3);
        assert_eq!(trajq_fit_p(fit), 3);
        assert!(trajq_fit_h(fit) > 0.0);
        assert!(trajq_fit_sigma2(fit) > 0.0);
        assert_eq!(trajq_fit_converged(fit, 1), 1);

        let name = CStr::from_ptr(trajq_fit_coef_name(fit, 0));
        assert_eq!(name.to_str().unwrap(), "intercept");

        let mut beta = [0.0; 3];
        assert_eq!(trajq_fit_beta(fit, 1, beta.as_mut_ptr(), 3), TrajqStatus::Ok);
        // median intercept should be near the design's value of 2
        assert!((beta[0] - 2.0).abs() < 0.5, "median intercept {}", beta[0]);

        let mut naive = [0.0; 3];
        assert_eq!(trajq_fit_beta_naive(fit, 1, naive.as_mut_ptr(), 3), TrajqStatus::Ok);
        let mut se = [0.0; 3];
        assert_eq!(trajq_fit_se(fit, 1, se.as_mut_ptr(), 3), TrajqStatus::Ok);
        assert!(se.iter().all(|s| *s >= 0.0));
        let (mut lo, mut hi) = ([0.0; 3], [0.0; 3]);
        assert_eq!(
            trajq_fit_ci(fit, 1, lo.as_mut_ptr(), hi.as_mut_ptr(), 3),
            TrajqStatus::Ok
        );
        for c in 0..3 {
            assert!(lo[c] <= beta[c] && beta[c] <= hi[c]);
        }

        trajq_fit_free(fit);
        trajq_dataset_free(ds);
    }
}

#[test]
fn csv_round_trip_through_the_c_surface() {
    let dir = tempfile::TempDir::new().unwrap();
    let long = dir.path().join("long.csv");
    let cov = dir.path().join("cov.csv");
    std::fs::write(
        &long,
        "subject_id,time,y\na,0.0,1.0\na,1.0,2.0\na,2.0,2.9\nb,0.0,0.5\nb,0.7,1.4\nb,1.9,2.3\nc,0.1,1.1\nc,1.2,2.2\nc,2.5,3.6\nd,0.0,0.9\nd,1.1,2.1\nd,2.2,3.2\n",
    )
    .unwrap();
    std::fs::write(&cov, "subject_id,x1\na,0.1\nb,0.4\nc,0.2\nd,0.3\n").unwrap();

    unsafe {
        let lp = CString::new(long.display().to_string()).unwrap();
        let cp = CString::new(cov.display().to_string()).unwrap();
        let mut ds: *mut TrajqDataset = ptr::null_mut();
        assert_eq!(trajq_dataset_read_csv(lp.as_ptr(), cp.as_ptr(), &mut ds), TrajqStatus::Ok);
        assert_eq!(trajq_dataset_n_subjects(ds), 4);
        assert_eq!(trajq_dataset_p(ds), 2);
        trajq_dataset_free(ds);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        // missing file
        let lp = CString::new("/nonexistent/long.csv").unwrap();
        let cp = CString::new("/nonexistent/cov.csv").unwrap();
        let mut ds: *mut TrajqDataset = ptr::null_mut();
        assert_eq!(
            trajq_dataset_read_csv(lp.as_ptr(), cp.as_ptr(), &mut ds),
            TrajqStatus::IoFailed
        );
        let msg = CStr::from_ptr(trajq_last_error_message());
        assert!(!msg.to_str().unwrap().is_empty());

        // NULL argument
        assert_eq!(
            trajq_dataset_read_csv(ptr::null(), cp.as_ptr(), &mut ds),
            TrajqStatus::NullArgument
        );

        // bad scenario name
        let case = CString::new("case99").unwrap();
        assert_eq!(
            trajq_dataset_simulate(case.as_ptr(), 10, 1, &mut ds),
            TrajqStatus::InvalidArgument
        );

        // buffer too small
        let case = CString::new("case1").unwrap();
        assert_eq!(trajq_dataset_simulate(case.as_ptr(), 60, 1, &mut ds), TrajqStatus::Ok);
        let mut opts = trajq_fit_options_default();
        opts.n_b = 0;
        opts.n_restarts = 1;
        let taus = [0.5];
        let mut fit: *mut TrajqFit = ptr::null_mut();
        assert_eq!(trajq_fit(ds, &opts, taus.as_ptr(), 1, &mut fit), TrajqStatus::Ok);
        let mut tiny = [0.0; 1];
        assert_eq!(
            trajq_fit_beta(fit, 0, tiny.as_mut_ptr(), 1),
            TrajqStatus::BufferTooSmall
        );
        // resampling disabled: SE must report InvalidArgument
        let mut se = [0.0; 3];
        assert_eq!(trajq_fit_se(fit, 0, se.as_mut_ptr(), 3), TrajqStatus::InvalidArgument);
        trajq_fit_free(fit);
        trajq_dataset_free(ds);
    }
}
