use std::ffi::{CStr, CString};
use std::ptr;
use std::sync::Arc;

use eqckn::ckn::{fit_network, LayerSpec, NetworkSpec};
use eqckn::group::{build_group, GroupKind};
use eqckn::kernel::KernelSpec;
use eqckn::signal::{lift, BaseImage};
use eqckn_ffi::*;

fn last_error() -> String {
    let p = eckn_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn image(n: usize, shift: f64) -> Vec<f64> {
    let c = n as f64 / 2.0 + shift;
    (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            (-((x - c).powi(2) + (y - c * 0.8).powi(2)) / 4.0).exp()
        })
        .collect()
}

/// Fits and saves a small SE(2) network; returns its directory.
fn saved_network(dir: &std::path::Path) -> CString {
    let group = Arc::new(build_group(GroupKind::Se2 { height: 8, width: 8, n_theta: 4 }).unwrap());
    let maps: Vec<_> = (0..3)
        .map(|i| lift(&BaseImage::new(8, 8, 1, image(8, i as f64 - 1.0)).unwrap(), &group).unwrap())
        .collect();
    let spec = NetworkSpec {
        sigma0: 1.0,
        layers: vec![LayerSpec::new(2.0, 1.0, 4, KernelSpec::exponential())],
        eps: 1e-6,
        seed: 3,
        fit_patches: 200,
    };
    let net = fit_network(&group, &maps, &spec).unwrap();
    let path = dir.join("net");
    net.save(&path).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

#[test]
fn header_is_generated() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/eqckn.h")).unwrap();
    for sym in ["eckn_group_se2_new", "eckn_network_represent", "ECKN_STATUS_NULL_POINTER", "typedef struct EcknNetwork"] {
        assert!(h.contains(sym), "{sym}");
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(eckn_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn groups_report_their_size_and_reject_bad_dims() {
    let mut g = ptr::null_mut();
    assert_eq!(eckn_group_se2_new(5, 6, 4, &mut g), EcknStatus::Ok);
    let mut n = 0usize;
    assert_eq!(unsafe { eckn_group_len(g, &mut n) }, EcknStatus::Ok);
    assert_eq!(n, 5 * 6 * 4);
    unsafe { eckn_group_free(g) };

    let mut s = ptr::null_mut();
    assert_eq!(eckn_group_s2_new(6, 12, &mut s), EcknStatus::Ok);
    assert_eq!(unsafe { eckn_group_len(s, &mut n) }, EcknStatus::Ok);
    assert_eq!(n, 72);
    unsafe { eckn_group_free(s) };

    let mut bad = ptr::null_mut();
    assert_eq!(eckn_group_se2_new(0, 6, 4, &mut bad), EcknStatus::InvalidArgument);
    assert!(bad.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    assert_eq!(eckn_group_se2_new(4, 4, 4, ptr::null_mut()), EcknStatus::NullPointer);
    assert!(last_error().contains("out"));
    let mut n = 0usize;
    assert_eq!(unsafe { eckn_group_len(ptr::null(), &mut n) }, EcknStatus::NullPointer);
    assert!(last_error().contains("group"));
    let mut out = 0.0;
    assert_eq!(
        unsafe { eckn_kernel_eval(ptr::null(), ptr::null(), ptr::null(), 0, &mut out) },
        EcknStatus::NullPointer
    );
    assert_eq!(unsafe { eckn_network_load(ptr::null(), ptr::null_mut()) }, EcknStatus::NullPointer);
    unsafe {
        eckn_group_free(ptr::null_mut());
        eckn_network_free(ptr::null_mut());
    }
}

#[test]
fn kernel_eval_matches_the_library() {
    let (x, y) = ([0.3, -1.2, 0.5], [1.0, 0.4, -0.2]);
    for name in ["exponential", "arccos1", "rbf_alpha:0.5", "poly:1"] {
        let c = CString::new(name).unwrap();
        let mut out = f64::NAN;
        assert_eq!(unsafe { eckn_kernel_eval(c.as_ptr(), x.as_ptr(), y.as_ptr(), 3, &mut out) }, EcknStatus::Ok);
        let spec = KernelSpec::parse(name).unwrap();
        assert_eq!(out, eqckn::kernel::kernel_eval(&spec, &x, &y).unwrap(), "{name}");
    }
    let c = CString::new("nonsense").unwrap();
    let mut out = 0.0;
    assert_eq!(
        unsafe { eckn_kernel_eval(c.as_ptr(), x.as_ptr(), y.as_ptr(), 3, &mut out) },
        EcknStatus::InvalidArgument
    );
    assert!(last_error().contains("nonsense"), "{}", last_error());
}

#[test]
fn missing_network_is_an_io_error() {
    let p = CString::new("/nonexistent/net").unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { eckn_network_load(p.as_ptr(), &mut net) }, EcknStatus::Io);
    assert!(net.is_null());
}

#[test]
fn saved_network_round_trips_through_the_abi() {
    let dir = tempfile::tempdir().unwrap();
    let path = saved_network(dir.path());
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { eckn_network_load(path.as_ptr(), &mut net) }, EcknStatus::Ok);

    let mut len = 0usize;
    assert_eq!(unsafe { eckn_network_output_len(net, &mut len) }, EcknStatus::Ok);
    assert_eq!(len, 4);

    let px = image(8, 0.0);
    let mut short = vec![0.0; len - 1];
    assert_eq!(
        unsafe { eckn_network_represent(net, px.as_ptr(), 8, 8, short.as_mut_ptr(), short.len()) },
        EcknStatus::BufferTooSmall
    );
    let mut v = vec![f64::NAN; len];
    assert_eq!(unsafe { eckn_network_represent(net, px.as_ptr(), 8, 8, v.as_mut_ptr(), len) }, EcknStatus::Ok);

    // Same numbers as the library path.
    let lib = eqckn::ckn::Network::load(std::path::Path::new(path.to_str().unwrap())).unwrap();
    let x = lift(&BaseImage::new(8, 8, 1, px.clone()).unwrap(), lib.group()).unwrap();
    assert_eq!(v, eqckn::ckn::global_pool(&lib.forward(&x).unwrap()));

    // Lattice translations are exact.
    let mut err = f64::NAN;
    assert_eq!(
        unsafe { eckn_network_equivariance_error(net, px.as_ptr(), 8, 8, 2.0, -1.0, std::f64::consts::FRAC_PI_2, &mut err) },
        EcknStatus::Ok
    );
    assert!(err <= 1e-9, "{err}");

    // Wrong image size is rejected.
    assert_eq!(
        unsafe { eckn_network_represent(net, px.as_ptr(), 4, 4, v.as_mut_ptr(), len) },
        EcknStatus::InvalidArgument
    );
    unsafe { eckn_network_free(net) };
}
