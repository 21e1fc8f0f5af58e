//! Deterministic synthetic pavement-distress images.
//!
//! Each class is defined by a drawn structure on a textured asphalt
//! background. Structures are sized in pixels of the render resolution, so
//! thin cracks fade when the image is shrunk to pyramid sizes while broad
//! structures survive.

mod canvas;

use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Record};
use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

pub use canvas::Canvas;
use canvas::{crack_path, Rgb};

pub const CLASS_NAMES: [&str; 7] = [
    "alligator crack",
    "crack pouring",
    "longitudinal crack",
    "massive crack",
    "transverse crack",
    "raveling",
    "repair",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// `(height, width)` of rendered images.
    pub render_size: (usize, usize),
    pub seed: u64,
    pub texture_amplitude: f32,
    pub distractors: usize,
    pub train_fraction: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: CLASS_NAMES.len(),
            samples_per_class: 100,
            render_size: (512, 512),
            seed: 0,
            texture_amplitude: 0.12,
            distractors: 3,
            train_fraction: 0.5,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != CLASS_NAMES.len() {
            return Err(Error::Config(format!(
                "the corpus has exactly {} classes, got num_classes = {}",
                CLASS_NAMES.len(),
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        let (h, w) = self.render_size;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!("render_size {h}x{w} is below 32x32")));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

pub fn class_slug(label: usize) -> String {
    CLASS_NAMES[label].replace(' ', "_")
}

/// A rendered sample: `3 x H x W` in `[0, 1]` plus its structure mask (`H x W`).
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Renders sample `index` of class `label`; a pure function of `(spec, label, index)`.
pub fn render_sample(spec: &DatasetSpec, label: usize, index: usize) -> Result<Sample> {
    if label >= CLASS_NAMES.len() {
        return Err(Error::Argument(format!("class {label} out of range")));
    }
    let (h, w) = spec.render_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    let mut cv = Canvas::new(w, h);
    let base = rng.gen_range(0.5..0.58);
    cv.fill_asphalt(&mut rng, base, spec.texture_amplitude);
    draw_distractors(&mut cv, &mut rng, spec.distractors, base);
    let painter = Painter {
        s: w.min(h) as f32 / 512.0,
        w: w as f32,
        h: h as f32,
    };
    match label {
        0 => painter.alligator(&mut cv, &mut rng),
        1 => painter.crack_pouring(&mut cv, &mut rng),
        2 => painter.line_crack(&mut cv, &mut rng, PI / 2.0),
        3 => painter.massive(&mut cv, &mut rng),
        4 => painter.line_crack(&mut cv, &mut rng, 0.0),
        5 => painter.raveling(&mut cv, &mut rng, base),
        _ => painter.repair(&mut cv, &mut rng, base),
    }
    cv.clamp();
    Ok(Sample {
        image: Tensor::new(vec![3, h, w], cv.pixels)?,
        mask: cv.mask,
    })
}

fn crack_color(rng: &mut ChaCha8Rng) -> Rgb {
    let v = rng.gen_range(0.08..0.2);
    [v, v, v]
}

fn draw_distractors(cv: &mut Canvas, rng: &mut ChaCha8Rng, count: usize, base: f32) {
    let s = cv.width.min(cv.height) as f32 / 512.0;
    for _ in 0..count {
        let c = (rng.gen_range(0.0..cv.width as f32), rng.gen_range(0.0..cv.height as f32));
        let r = rng.gen_range(4.0..14.0) * s;
        let shade = base + rng.gen_range(-0.15..0.12);
        cv.disc(c, r, [shade, shade, shade], false);
    }
}

struct Painter {
    /// Render scale relative to 512 px.
    s: f32,
    w: f32,
    h: f32,
}

impl Painter {
    fn jitter(&self, rng: &mut ChaCha8Rng, frac: f32) -> (f32, f32) {
        (
            self.w * (0.5 + rng.gen_range(-frac..frac)),
            self.h * (0.5 + rng.gen_range(-frac..frac)),
        )
    }

    /// A single thin crack crossing the image along `angle` (0 = horizontal).
    fn line_crack(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng, angle: f32) {
        let angle = angle + rng.gen_range(-0.2..0.2);
        let centre = self.jitter(rng, 0.2);
        let reach = self.w.max(self.h) * 0.75;
        let start = (centre.0 - reach * angle.cos(), centre.1 - reach * angle.sin());
        let pts = crack_path(rng, start, angle, 2.0 * reach, 18.0 * self.s, 0.35);
        let width = rng.gen_range(2.0..4.0) * self.s;
        cv.stroke_polyline(&pts, width, crack_color(rng), true);
        // a short branch off the main crack
        if let Some(&from) = pts.get(pts.len() / 2 + rng.gen_range(0..3)) {
            let turn = if rng.gen_bool(0.5) { 0.7 } else { -0.7 };
            let branch = crack_path(rng, from, angle + turn, 60.0 * self.s, 12.0 * self.s, 0.3);
            cv.stroke_polyline(&branch, width * 0.7, crack_color(rng), true);
        }
    }

    /// Interconnected polygonal crack mesh.
    fn alligator(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng) {
        let cell = rng.gen_range(40.0..60.0) * self.s;
        let (cx, cy) = self.jitter(rng, 0.12);
        let (half_w, half_h) = (self.w * rng.gen_range(0.25..0.35), self.h * rng.gen_range(0.25..0.35));
        let cols = (2.0 * half_w / cell) as usize + 1;
        let rows = (2.0 * half_h / cell) as usize + 1;
        let mut grid = Vec::with_capacity((cols + 1) * (rows + 1));
        for r in 0..=rows {
            for c in 0..=cols {
                grid.push((
                    cx - half_w + c as f32 * cell + rng.gen_range(-0.3..0.3) * cell,
                    cy - half_h + r as f32 * cell + rng.gen_range(-0.3..0.3) * cell,
                ));
            }
        }
        let color = crack_color(rng);
        let width = rng.gen_range(2.0..3.5) * self.s;
        let at = |r: usize, c: usize| grid[r * (cols + 1) + c];
        for r in 0..=rows {
            for c in 0..=cols {
                if c < cols {
                    cv.stroke_polyline(&wiggle_edge(rng, at(r, c), at(r, c + 1), cell), width, color, true);
                }
                if r < rows {
                    cv.stroke_polyline(&wiggle_edge(rng, at(r, c), at(r + 1, c), cell), width, color, true);
                }
            }
        }
    }

    /// Crack sealed by a thick dark band.
    fn crack_pouring(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng) {
        let angle = [0.0, PI / 2.0, PI / 4.0, -PI / 4.0][rng.gen_range(0..4)] + rng.gen_range(-0.15..0.15);
        let centre = self.jitter(rng, 0.2);
        let reach = self.w.max(self.h) * 0.75;
        let start = (centre.0 - reach * angle.cos(), centre.1 - reach * angle.sin());
        let pts = crack_path(rng, start, angle, 2.0 * reach, 22.0 * self.s, 0.25);
        let v = rng.gen_range(0.1..0.18);
        let band = rng.gen_range(18.0..28.0) * self.s;
        cv.stroke_polyline(&pts, band, [v, v, v + 0.04], true);
        cv.stroke_polyline(&pts, 2.0 * self.s, [0.05, 0.05, 0.06], true);
    }

    /// Wide irregular crack with blobby spalls.
    fn massive(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng) {
        let angle = rng.gen_range(0.0..PI);
        let centre = self.jitter(rng, 0.15);
        let reach = self.w.min(self.h) * rng.gen_range(0.3..0.45);
        let start = (centre.0 - reach * angle.cos(), centre.1 - reach * angle.sin());
        let pts = crack_path(rng, start, angle, 2.0 * reach, 16.0 * self.s, 0.5);
        let color = crack_color(rng);
        for p in &pts {
            let r = rng.gen_range(6.0..16.0) * self.s;
            cv.disc(*p, r, color, true);
            if rng.gen_bool(0.35) {
                let off = (p.0 + rng.gen_range(-20.0..20.0) * self.s, p.1 + rng.gen_range(-20.0..20.0) * self.s);
                cv.disc(off, r * rng.gen_range(0.5..1.0), color, true);
            }
        }
    }

    /// Patch of loose aggregate: dense light and dark speckle.
    fn raveling(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng, base: f32) {
        let (cx, cy) = self.jitter(rng, 0.15);
        let (rx, ry) = (
            rng.gen_range(70.0..140.0) * self.s,
            rng.gen_range(70.0..140.0) * self.s,
        );
        let wobble: Vec<f32> = (0..8).map(|_| rng.gen_range(0.8..1.15)).collect();
        let (y0, y1) = ((cy - ry * 1.2).max(0.0) as usize, ((cy + ry * 1.2) as usize).min(cv.height));
        let (x0, x1) = ((cx - rx * 1.2).max(0.0) as usize, ((cx + rx * 1.2) as usize).min(cv.width));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f32 + 0.5 - cx) / rx, (y as f32 + 0.5 - cy) / ry);
                let theta = dy.atan2(dx) + PI;
                let lobe = wobble[((theta / (2.0 * PI) * 8.0) as usize).min(7)];
                if dx * dx + dy * dy > lobe * lobe {
                    continue;
                }
                let v = if rng.gen_bool(0.5) {
                    rng.gen_range(0.05..0.25)
                } else {
                    (base + rng.gen_range(0.2..0.4)).min(0.95)
                };
                cv.blend(x, y, [v, v, v], if rng.gen_bool(0.6) { 1.0 } else { 0.5 }, true);
                cv.mask[y * cv.width + x] = true;
            }
        }
    }

    /// Rectangular patch with a contrasting, tinted surface and a dark seam.
    fn repair(&self, cv: &mut Canvas, rng: &mut ChaCha8Rng, base: f32) {
        let (cx, cy) = self.jitter(rng, 0.12);
        let (hw, hh) = (self.w * rng.gen_range(0.15..0.3), self.h * rng.gen_range(0.15..0.3));
        let level = base - rng.gen_range(0.18..0.26);
        let tint: Rgb = [-0.03, 0.0, 0.05];
        let (x0, x1) = ((cx - hw).max(0.0) as usize, ((cx + hw) as usize).min(cv.width));
        let (y0, y1) = ((cy - hh).max(0.0) as usize, ((cy + hh) as usize).min(cv.height));
        for y in y0..y1 {
            for x in x0..x1 {
                let grain = rng.gen_range(-0.03..0.03);
                let color = [level + tint[0] + grain, level + tint[1] + grain, level + tint[2] + grain];
                cv.blend(x, y, color, 1.0, true);
            }
        }
        let seam = [0.15, 0.15, 0.15];
        let corners = [(x0 as f32, y0 as f32), (x1 as f32, y0 as f32), (x1 as f32, y1 as f32), (x0 as f32, y1 as f32), (x0 as f32, y0 as f32)];
        cv.stroke_polyline(&corners, 3.0 * self.s, seam, true);
    }
}

fn wiggle_edge(rng: &mut ChaCha8Rng, a: (f32, f32), b: (f32, f32), cell: f32) -> Vec<(f32, f32)> {
    let mut mid = |t: f32| {
        (
            a.0 + (b.0 - a.0) * t + rng.gen_range(-0.08..0.08) * cell,
            a.1 + (b.1 - a.1) * t + rng.gen_range(-0.08..0.08) * cell,
        )
    };
    let (m1, m2) = (mid(1.0 / 3.0), mid(2.0 / 3.0));
    vec![a, m1, m2, b]
}

/// Renders every sample of `spec` as PNG under `out_dir/images/<class>/` and
/// returns a manifest (splits unassigned) rooted at `out_dir`.
pub fn synth_generate(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    for (label, name) in CLASS_NAMES.iter().enumerate().take(spec.num_classes) {
        let rel_dir = format!("images/{}", class_slug(label));
        let dir = out_dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for index in 0..spec.samples_per_class {
            let sample = render_sample(spec, label, index)?;
            let rel = format!("{rel_dir}/{index:05}.png");
            imageio::save_png(&sample.image, &out_dir.join(&rel))?;
            records.push(Record {
                path: rel,
                label,
                class_name: name.to_string(),
                split: None,
            });
        }
    }
    Ok(DatasetManifest::new(spec.clone(), out_dir.to_path_buf(), records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            render_size: (96, 128),
            samples_per_class: 2,
            ..Default::default()
        }
    }

    #[test]
    fn every_class_draws_a_structure() {
        let spec = small();
        for label in 0..7 {
            let s = render_sample(&spec, label, 0).unwrap();
            assert_eq!(s.image.dims(), &[3, 96, 128]);
            let covered = s.mask.iter().filter(|&&m| m).count();
            assert!(covered > 20, "class {label} mask covers {covered} px");
            assert!(covered < s.mask.len(), "class {label} mask covers everything");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rendering_is_a_pure_function() {
        let spec = small();
        let a = render_sample(&spec, 3, 1).unwrap();
        let b = render_sample(&spec, 3, 1).unwrap();
        assert!(a.image.bitwise_eq(&b.image));
        assert_eq!(a.mask, b.mask);
        let c = render_sample(&spec, 3, 0).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn wrong_class_count_rejected() {
        let spec = DatasetSpec {
            num_classes: 5,
            ..Default::default()
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
