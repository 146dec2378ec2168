//! Browser bindings: render context-XOR samples, compare CaC and SE weight
//! maps on them, and tabulate parameter counts.

use cac_core::accounting::count_table;
use cac_core::baselines::{se_gate, SeParams};
use cac_core::cac::{generate_weight_map, predict_cac_kernels, CacConfig, CacParams};
use cac_core::data::{generate_sample, DatasetSpec, SegSample};
use cac_core::head::HeadKind;
use cac_core::rng::SplitMix64;
use wasm_bindgen::prelude::*;

const PALETTE: [[u8; 3]; 4] = [[40, 40, 48], [230, 120, 40], [60, 150, 220], [120, 200, 90]];

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn sample(seed: u64, index: usize, noise: f64) -> Result<SegSample, JsError> {
    let spec = DatasetSpec { seed, count: index + 1, texture_noise: noise, ..DatasetSpec::default() };
    generate_sample(&spec, index).map(|s| s.0).map_err(err)
}

/// Side length of rendered samples.
#[wasm_bindgen]
pub fn sample_size() -> usize {
    DatasetSpec::default().height
}

/// RGBA pixels of the image (left half) and its label map (right half),
/// `2·size` wide.
#[wasm_bindgen]
pub fn render_sample(seed: u64, index: usize, noise: f64) -> Result<Vec<u8>, JsError> {
    let s = sample(seed, index, noise)?;
    let (h, w) = (s.height(), s.width());
    let px = s.image.data();
    let mut out = Vec::with_capacity(h * 2 * w * 4);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push((255.0 * px[(ch * h + i) * w + j].clamp(0.0, 1.0)).round() as u8);
            }
            out.push(255);
        }
        for j in 0..w {
            let [r, g, b] = PALETTE[s.labels[i * w + j] as usize % PALETTE.len()];
            out.extend([r, g, b, 255]);
        }
    }
    Ok(out)
}

/// Weight maps for one input channel, `h·w` CaC values at a single dilation
/// followed by `h·w` SE values.
#[wasm_bindgen]
pub fn weight_maps(seed: u64, index: usize, noise: f64, dilation: usize, channel: usize, init_seed: u64) -> Result<Vec<f64>, JsError> {
    let s = sample(seed, index, noise)?;
    let (c, h, w) = (3, s.height(), s.width());
    if channel >= c {
        return Err(err(format!("channel {channel} out of range 0..{c}")));
    }
    let x = s.image.reshape(&[1, c, h, w]).map_err(err)?;
    let mut rng = SplitMix64::new(init_seed);
    let cfg = CacConfig { dilations: vec![dilation], ..CacConfig::new(c) };
    let params = CacParams::init(&cfg, &mut rng);
    let (kernels, _) = predict_cac_kernels(&x, &params, &cfg).map_err(err)?;
    let wm = generate_weight_map(&x, &kernels, &cfg.dilations, cfg.padding).map_err(err)?;
    let se = SeParams::init(c, 3, &mut rng).map_err(err)?;
    let gate = se_gate(&x, &se).map_err(err)?;

    let mut out = wm.weights.data()[channel * h * w..(channel + 1) * h * w].to_vec();
    out.extend(std::iter::repeat(gate.data()[channel]).take(h * w));
    Ok(out)
}

/// Tab-separated `kind, component, formula, count` rows for every head kind.
#[wasm_bindgen]
pub fn param_counts(c: u64, s: u64, h: u64, w: u64, se_reduction: u64) -> Result<String, JsError> {
    if c == 0 || s == 0 || h == 0 || w == 0 || se_reduction == 0 {
        return Err(err("all sizes must be positive"));
    }
    let mut out = String::new();
    for kind in [HeadKind::Fixed, HeadKind::Se, HeadKind::Cac, HeadKind::Gap, HeadKind::DwFc] {
        for row in count_table(kind, c, s, h, w, se_reduction) {
            if row.component.starts_with(kind.as_str()) {
                out.push_str(&format!("{kind}\t{}\t{}\t{}\n", row.component, row.formula, row.count));
            }
        }
    }
    let full = count_table(HeadKind::Fixed, c, s, h, w, se_reduction).pop().expect("reference row");
    out.push_str(&format!("reference\t{}\t{}\t{}\n", full.component, full.formula, full.count));
    Ok(out)
}
