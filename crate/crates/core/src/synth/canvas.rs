//! Raster drawing on a 3-channel float canvas with a structure mask.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rgb = [f32; 3];

pub struct Canvas {
    pub width: usize,
    pub height: usize,
    /// Channel-major RGB in `[0, 1]`.
    pub pixels: Vec<f32>,
    /// True where a class-defining structure was drawn.
    pub mask: Vec<bool>,
}

impl Canvas {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; 3 * width * height],
            mask: vec![false; width * height],
        }
    }

    fn plane(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = y * self.width + x;
        let p = self.plane();
        [self.pixels[i], self.pixels[p + i], self.pixels[2 * p + i]]
    }

    /// Alpha-blends `color` into pixel `(x, y)`.
    pub fn blend(&mut self, x: usize, y: usize, color: Rgb, alpha: f32, structure: bool) {
        let i = y * self.width + x;
        let p = self.plane();
        for (c, &v) in color.iter().enumerate() {
            let px = &mut self.pixels[c * p + i];
            *px = *px * (1.0 - alpha) + v * alpha;
        }
        if structure && alpha >= 0.5 {
            self.mask[i] = true;
        }
    }

    /// Gray asphalt: base level plus three octaves of value noise and per-pixel grain.
    pub fn fill_asphalt(&mut self, rng: &mut ChaCha8Rng, base: f32, amplitude: f32) {
        let scale = self.width.max(self.height) as f32 / 512.0;
        let octaves = [(48.0 * scale, 0.5), (12.0 * scale, 0.3), (3.0 * scale, 0.2)];
        let mut lum = vec![base; self.plane()];
        for &(cell, weight) in &octaves {
            let noise = ValueNoise::new(rng, self.width, self.height, cell.max(1.0));
            for y in 0..self.height {
                for x in 0..self.width {
                    lum[y * self.width + x] += amplitude * weight * noise.sample(x as f32, y as f32);
                }
            }
        }
        for l in &mut lum {
            *l += amplitude * 0.5 * (rng.gen::<f32>() - 0.5);
        }
        let p = self.plane();
        for c in 0..3 {
            self.pixels[c * p..(c + 1) * p].copy_from_slice(&lum);
        }
    }

    /// Thick line segment with a one-pixel soft edge.
    pub fn stroke_segment(&mut self, a: (f32, f32), b: (f32, f32), width: f32, color: Rgb, structure: bool) {
        let r = width / 2.0;
        let (x0, x1) = (a.0.min(b.0) - r - 1.0, a.0.max(b.0) + r + 1.0);
        let (y0, y1) = (a.1.min(b.1) - r - 1.0, a.1.max(b.1) + r + 1.0);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        for y in self.clip_y(y0, y1) {
            for x in self.clip_x(x0, x1) {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                let d = (qx * qx + qy * qy).sqrt();
                let alpha = (r + 0.5 - d).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha, structure);
                }
            }
        }
    }

    pub fn stroke_polyline(&mut self, pts: &[(f32, f32)], width: f32, color: Rgb, structure: bool) {
        for seg in pts.windows(2) {
            self.stroke_segment(seg[0], seg[1], width, color, structure);
        }
    }

    pub fn disc(&mut self, c: (f32, f32), radius: f32, color: Rgb, structure: bool) {
        self.stroke_segment(c, c, 2.0 * radius, color, structure);
    }

    fn clip_x(&self, lo: f32, hi: f32) -> std::ops::Range<usize> {
        (lo.max(0.0) as usize)..(hi.max(0.0) as usize + 1).min(self.width)
    }

    fn clip_y(&self, lo: f32, hi: f32) -> std::ops::Range<usize> {
        (lo.max(0.0) as usize)..(hi.max(0.0) as usize + 1).min(self.height)
    }

    pub fn clamp(&mut self) {
        for v in &mut self.pixels {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Smoothly interpolated lattice noise in `[-1, 1]`.
struct ValueNoise {
    cell: f32,
    cols: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: f32) -> Self {
        let cols = (width as f32 / cell) as usize + 2;
        let rows = (height as f32 / cell) as usize + 2;
        Self {
            cell,
            cols,
            lattice: (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (ix, iy) = (gx as usize, gy as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (fx, fy) = (smooth(gx - ix as f32), smooth(gy - iy as f32));
        let at = |cx: usize, cy: usize| self.lattice[cy * self.cols + cx];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bottom = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Random-walk crack path from `start` heading `angle` (radians) for `length` pixels.
pub fn crack_path(rng: &mut ChaCha8Rng, start: (f32, f32), angle: f32, length: f32, step: f32, wiggle: f32) -> Vec<(f32, f32)> {
    let mut pts = vec![start];
    let (mut x, mut y) = start;
    let mut heading = angle;
    let mut travelled = 0.0;
    while travelled < length {
        heading += rng.gen_range(-wiggle..wiggle);
        // pull back toward the base orientation so the crack keeps its class direction
        heading += 0.3 * (angle - heading);
        let s = step * rng.gen_range(0.6..1.4);
        x += s * heading.cos();
        y += s * heading.sin();
        travelled += s;
        pts.push((x, y));
    }
    pts
}
