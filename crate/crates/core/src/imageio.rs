//! 8-bit PNG input and output for `3 x H x W` float images in `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Decode(format!("{}: {other}", path.display())),
    };
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(bytes).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Saves a `3 x H x W` image.
pub fn save_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let &[3, h, w] = image.dims() else {
        return Err(Error::Shape(format!("save_png expects 3 x H x W, got {:?}", image.dims())));
    };
    let plane = h * w;
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(data[c * plane + i]));
        }
    }
    write(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Saves an `H x W` map as 8-bit grayscale.
pub fn save_gray_png(map: &Tensor<f32>, path: &Path) -> Result<()> {
    let &[h, w] = map.dims() else {
        return Err(Error::Shape(format!("save_gray_png expects H x W, got {:?}", map.dims())));
    };
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    write(path, w, h, png::ColorType::Grayscale, &bytes)
}

/// Loads any 8-bit or 16-bit PNG as a `3 x H x W` image; alpha is dropped.
pub fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let decode_err = |e: png::DecodingError| Error::Decode(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(decode_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Decode(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for y in 0..h {
        let row = &buf[y * info.line_size..];
        for x in 0..w {
            let px = &row[x * channels..];
            for c in 0..3 {
                let v = if channels >= 3 { px[c] } else { px[0] };
                data[c * plane + y * w + x] = v as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Jet-style colour ramp: 0 is dark blue, 0.5 green, 1 dark red.
pub fn heat_color(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ramp = |centre: f32| (1.5 - (4.0 * v - centre).abs()).clamp(0.0, 1.0);
    [ramp(3.0), ramp(2.0), ramp(1.0)]
}

/// `image * (1 - alpha) + heat_color(heat) * alpha`, per pixel.
pub fn heat_overlay(image: &Tensor<f32>, heat: &Tensor<f32>, alpha: f32) -> Result<Tensor<f32>> {
    let (&[3, h, w], &[hh, hw]) = (image.dims(), heat.dims()) else {
        return Err(Error::Shape(format!(
            "overlay needs a 3 x H x W image and H x W heatmap, got {:?} and {:?}",
            image.dims(),
            heat.dims()
        )));
    };
    if (h, w) != (hh, hw) {
        return Err(Error::Shape(format!("image is {h}x{w} but heatmap is {hh}x{hw}")));
    }
    let plane = h * w;
    let mut out = image.data().to_vec();
    for (i, &v) in heat.data().iter().enumerate() {
        for (c, col) in heat_color(v).into_iter().enumerate() {
            let px = &mut out[c * plane + i];
            *px = *px * (1.0 - alpha) + col * alpha;
        }
    }
    Tensor::new(vec![3, h, w], out)
}
