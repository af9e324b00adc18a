mod common;

#[test]
fn adapter_only_gradients_match_finite_differences() {
    let cfg = common::tiny_config();
    let r = common::fd::gradient_check(&cfg, 200, 3);
    assert!(r.missing.iter().all(|m| m.starts_with("head.last")), "no gradient for {:?}", r.missing);
    assert!(r.worst < 1e-4, "max relative error {:e} over {} coordinates", r.worst, r.coords);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let mut cfg = common::tiny_config();
    cfg.adapter_only = false;
    let r = common::fd::gradient_check(&cfg, 200, 4);
    assert!(r.missing.is_empty(), "no gradient for {:?}", r.missing);
    assert!(r.worst < 1e-4, "max relative error {:e} over {} coordinates", r.worst, r.coords);
}
