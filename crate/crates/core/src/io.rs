//! PNG and NPY helpers for 8-bit images and class maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::imaging::ImagingError;

fn png_err(path: &Path, e: impl std::fmt::Display) -> ImagingError {
    ImagingError::Png { path: path.display().to_string(), message: e.to_string() }
}

/// Reads a PNG as 8-bit grayscale, returning `(height, width, pixels)`.
///
/// Colour images are reduced with the Rec. 601 luma weights; 16-bit samples
/// keep their high byte.
pub fn read_gray_png(path: &Path) -> Result<(usize, usize, Vec<u8>), ImagingError> {
    let file = File::open(path).map_err(|e| png_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let line = info.line_size;
    let mut out = Vec::with_capacity(w * h);
    for row in buf.chunks(line).take(h) {
        for px in row.chunks(channels).take(w) {
            let v = match channels {
                1 | 2 => px[0],
                _ => (0.299 * px[0] as f64 + 0.587 * px[1] as f64 + 0.114 * px[2] as f64).round() as u8,
            };
            out.push(v);
        }
    }
    Ok((h, w, out))
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, pixels: &[u8]) -> Result<(), ImagingError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path).map_err(|e| png_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(pixels).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Reads a 2-D integer `.npy` class map.
pub fn read_label_npy(path: &Path) -> Result<(usize, usize, Vec<u8>), ImagingError> {
    let bytes = std::fs::read(path).map_err(|e| png_err(path, e))?;
    let npy = npyz::NpyFile::new(&bytes[..]).map_err(|e| png_err(path, e))?;
    let shape = npy.shape().to_vec();
    if shape.len() != 2 {
        return Err(png_err(path, format!("expected a 2-D array, got shape {shape:?}")));
    }
    let (h, w) = (shape[0] as usize, shape[1] as usize);
    let descr = match npy.dtype() {
        npyz::DType::Plain(ts) => ts.to_string(),
        other => return Err(png_err(path, format!("unsupported dtype {other:?}"))),
    };
    let kind = descr.trim_start_matches(['<', '>', '|', '=']);
    let to_u8 = |v: i64| u8::try_from(v).map_err(|_| png_err(path, format!("label {v} out of range")));
    let labels: Vec<u8> = match kind {
        "u1" => npy.into_vec::<u8>().map_err(|e| png_err(path, e))?,
        "i1" => npy.into_vec::<i8>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "u2" => npy.into_vec::<u16>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "i2" => npy.into_vec::<i16>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "u4" => npy.into_vec::<u32>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "i4" => npy.into_vec::<i32>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "u8" => npy.into_vec::<u64>().map_err(|e| png_err(path, e))?.into_iter().map(|v| to_u8(v as i64)).collect::<Result<_, _>>()?,
        "i8" => npy.into_vec::<i64>().map_err(|e| png_err(path, e))?.into_iter().map(to_u8).collect::<Result<_, _>>()?,
        other => return Err(png_err(path, format!("unsupported label dtype {other}"))),
    };
    Ok((h, w, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        let pixels: Vec<u8> = (0..35u32).map(|v| (v * 7) as u8).collect();
        write_gray_png(&path, 5, 7, &pixels).unwrap();
        assert_eq!(read_gray_png(&path).unwrap(), (5, 7, pixels));
    }

    #[test]
    fn npy_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        let data: Vec<i64> = vec![0, 1, 2, 3, 2, 1];
        let mut buf = Vec::new();
        {
            use npyz::WriterBuilder;
            let mut w = npyz::WriteOptions::<i64>::new().default_dtype().shape(&[2, 3]).writer(&mut buf).begin_nd().unwrap();
            w.extend(data.iter().copied()).unwrap();
            w.finish().unwrap();
        }
        std::fs::write(&path, buf).unwrap();
        assert_eq!(read_label_npy(&path).unwrap(), (2, 3, vec![0, 1, 2, 3, 2, 1]));
    }
}
