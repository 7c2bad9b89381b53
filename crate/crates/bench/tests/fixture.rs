use mfcrowd_bench::Fixture;
use mfcrowd_core::integrate;

#[test]
fn fixture_is_a_valid_reference_state() {
    let f = Fixture::new(64, 0.01);
    assert_eq!(f.control.n_slices(), f.time.n_t());
    assert!(f.control.values().max_abs() <= 10.0);
    for slice in f.density.values().slices() {
        assert!((integrate(slice, &f.grid).unwrap() - 1.0).abs() < 1e-12);
        assert!(slice.iter().all(|v| *v >= 0.0));
    }
    let p = mfcrowd_core::solve_adjoint(
        std::slice::from_ref(&f.control),
        std::slice::from_ref(&f.density),
        f.adjoint_inputs(500.0),
    )
    .unwrap();
    assert_eq!(p[0].terminal(), f.psi[0].as_slice());
}
