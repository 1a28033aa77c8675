use inharmony_core::harness::gradsuite::{unet_default_sampled, TOLERANCE};

#[test]
fn default_unet_sampled_parameters_match_finite_differences() {
    let r = unet_default_sampled(0).unwrap();
    let checked: usize = r.per_input.iter().map(|i| i.checked).sum();
    assert!(checked > 1000, "only {checked} elements checked");
    let bad: Vec<String> = r
        .per_input
        .iter()
        .filter(|i| i.max_rel_err > TOLERANCE)
        .map(|i| format!("{} ({} checked): {:.3e}", i.name, i.checked, i.max_rel_err))
        .collect();
    assert!(bad.is_empty(), "over tolerance:\n{}", bad.join("\n"));
    assert!(!r.non_finite);
}
