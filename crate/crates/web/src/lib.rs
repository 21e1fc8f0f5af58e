//! WebAssembly bindings for the browser demo in `www/`.

use kiprn::ops::bilinear_resize;
use kiprn::resizer::{self, KernelMode};
use kiprn::synth::{self, DatasetSpec, CLASS_NAMES};
use kiprn::Tensor;
use wasm_bindgen::prelude::*;

fn spec(size: usize, seed: u64) -> DatasetSpec {
    DatasetSpec {
        render_size: (size, size),
        seed,
        ..DatasetSpec::default()
    }
}

fn to_rgba(image: &Tensor<f32>, mask: Option<&[bool]>) -> Vec<u8> {
    let &[3, h, w] = image.dims() else {
        unreachable!("images are 3 x H x W")
    };
    let plane = h * w;
    let d = image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        let mut px = [d[i], d[plane + i], d[2 * plane + i]];
        if mask.is_some_and(|m| m[i]) {
            px = [0.5 * px[0] + 0.5, 0.5 * px[1], 0.5 * px[2]];
        }
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    out
}

fn err(e: kiprn::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub fn class_count() -> usize {
    CLASS_NAMES.len()
}

#[wasm_bindgen]
pub fn class_name(label: usize) -> String {
    CLASS_NAMES.get(label).map_or_else(String::new, |s| s.to_string())
}

/// Renders one synthetic sample as `size x size` RGBA bytes, optionally
/// tinting the distress mask red.
#[wasm_bindgen]
pub fn render_sample(label: usize, index: usize, size: usize, seed: u64, show_mask: bool) -> Result<Vec<u8>, String> {
    let spec = spec(size, seed);
    spec.validate().map_err(err)?;
    let s = synth::render_sample(&spec, label, index).map_err(err)?;
    Ok(to_rgba(&s.image, show_mask.then_some(&s.mask[..])))
}

/// Renders a sample and resizes it to `out x out` with half-pixel bilinear
/// interpolation, as the untrained resizer does for each pyramid level.
#[wasm_bindgen]
pub fn bilinear_level(label: usize, index: usize, size: usize, seed: u64, out: usize) -> Result<Vec<u8>, String> {
    let spec = spec(size, seed);
    spec.validate().map_err(err)?;
    let s = synth::render_sample(&spec, label, index).map_err(err)?;
    let x = s.image.reshape(vec![1, 3, size, size]).map_err(err)?;
    let y = bilinear_resize(&x, out, out).map_err(err)?;
    Ok(to_rgba(&y.reshape(vec![3, out, out]).map_err(err)?, None))
}

/// Branch kernel sizes for square levels of the given sizes (ascending).
/// `mode` is `inversed`, `forward` or a single odd kernel size such as `5`.
#[wasm_bindgen]
pub fn kernel_assignment(level_sizes: Vec<u32>, mode: &str) -> Result<Vec<u32>, String> {
    if level_sizes.is_empty() || level_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err("level sizes must be non-empty and strictly ascending".into());
    }
    let mode = match mode {
        "inversed" => KernelMode::Inversed,
        "forward" => KernelMode::Forward,
        k => match k.parse::<usize>() {
            Ok(k) if k % 2 == 1 => KernelMode::Uniform(k),
            _ => return Err(format!("unknown kernel mode {mode:?}")),
        },
    };
    let sizes: Vec<(usize, usize)> = level_sizes.iter().map(|&s| (s as usize, s as usize)).collect();
    Ok(resizer::kernel_assignment(&sizes, mode).into_iter().map(|k| k as u32).collect())
}
