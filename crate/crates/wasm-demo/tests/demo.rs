use cac_wasm_demo::{param_counts, render_sample, sample_size, weight_maps};

#[test]
fn sample_render_has_image_and_label_halves() {
    let n = sample_size();
    let px = render_sample(0, 3, 0.1).unwrap();
    assert_eq!(px.len(), 2 * n * n * 4);
    assert!(px.chunks(4).all(|p| p[3] == 255));
    assert_eq!(px, render_sample(0, 3, 0.1).unwrap());
}

#[test]
fn cac_map_varies_while_se_is_constant() {
    let n = sample_size();
    for d in [1, 2, 3] {
        let v = weight_maps(1, 0, 0.1, d, 0, 5).unwrap();
        assert_eq!(v.len(), 2 * n * n);
        let (cac, se) = v.split_at(n * n);
        assert!(cac.iter().chain(se).all(|&w| w > 0.0 && w < 1.0));
        assert!(se.iter().all(|&w| w == se[0]));
        let lo = cac.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cac.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(hi - lo > 1e-3);
    }
}

#[test]
fn count_table_lists_every_kind() {
    let text = param_counts(512, 3, 16, 16, 4).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.len() == 4));
    assert!(rows.contains(&vec!["cac", "cac.projections", "c^2 + s^2*c", "266752"]));
    assert_eq!(rows.last().unwrap()[3], (9u64 * 512 * 512 * 512).to_string());
}
