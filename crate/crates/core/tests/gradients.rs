mod common;

#[test]
fn style_modulation_weights() {
    let r = common::style_gradcheck(1, 120);
    assert!(r.passed(1e-3), "{r:#?}");
}

#[test]
fn wavelet_modulation_weights() {
    let r = common::wavelet_gradcheck(2, 120);
    assert!(r.passed(1e-3), "{r:#?}");
}

#[test]
fn denoiser_weights() {
    let r = common::denoiser_gradcheck(3, 100);
    assert!(r.passed(1e-3), "{r:#?}");
}
