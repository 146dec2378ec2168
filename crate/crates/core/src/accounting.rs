//! Closed-form learnable-parameter counts for each re-weighting scheme.

use crate::head::HeadKind;

/// Query and key projections of one CaC module: `c² + s²c`.
pub fn cac_projection_params(c: u64, s: u64) -> u64 {
    c * c + s * s * c
}

/// One CaC module including the kernel-normalization affine: `c² + s²c + 2c`.
pub fn cac_module_params(c: u64, s: u64) -> u64 {
    cac_projection_params(c, s) + 2 * c
}

/// Input-invariant kernels: `s²c`.
pub fn fixed_params(c: u64, s: u64) -> u64 {
    s * s * c
}

/// FC layer from the pooled vector to the kernels: `s²c²`.
pub fn gap_params(c: u64, s: u64) -> u64 {
    s * s * c * c
}

/// Depth-wise FC over all positions: `h·w·s²·c`.
pub fn dwfc_params(c: u64, s: u64, h: u64, w: u64) -> u64 {
    h * w * s * s * c
}

/// Squeeze-excitation with reduction `r`: `2c²/r`.
pub fn se_params(c: u64, r: u64) -> u64 {
    2 * c * (c / r)
}

/// Predicting `c` sets of `s×s×c` kernels with a full FC layer: `s²c³`.
/// Reference only; never materialized.
pub fn full_fc_dynamic_params(c: u64, s: u64) -> u64 {
    s * s * c * c * c
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountRow {
    pub component: String,
    pub formula: &'static str,
    pub count: u64,
}

/// Per-module count table for `kind`, followed by the full-FC reference row.
pub fn count_table(kind: HeadKind, c: u64, s: u64, h: u64, w: u64, se_reduction: u64) -> Vec<CountRow> {
    let mut rows = match kind {
        HeadKind::Cac => vec![
            CountRow { component: "cac.projections".into(), formula: "c^2 + s^2*c", count: cac_projection_params(c, s) },
            CountRow { component: "cac.kernel_norm".into(), formula: "2*c", count: 2 * c },
            CountRow { component: "cac.module".into(), formula: "c^2 + s^2*c + 2*c", count: cac_module_params(c, s) },
        ],
        HeadKind::Fixed => vec![CountRow { component: "fixed.kernels".into(), formula: "s^2*c", count: fixed_params(c, s) }],
        HeadKind::Gap => vec![CountRow { component: "gap.fc".into(), formula: "s^2*c^2", count: gap_params(c, s) }],
        HeadKind::DwFc => vec![CountRow { component: "dwfc.weights".into(), formula: "h*w*s^2*c", count: dwfc_params(c, s, h, w) }],
        HeadKind::Se => vec![CountRow { component: "se.fc".into(), formula: "2*c*(c/r)", count: se_params(c, se_reduction) }],
    };
    rows.push(CountRow {
        component: "reference.full_fc_dynamic".into(),
        formula: "s^2*c^3",
        count: full_fc_dynamic_params(c, s),
    });
    rows
}
