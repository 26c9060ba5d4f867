use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::RecurrencePlot;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn gray<T: Scalar>(plot: &RecurrencePlot<T>) -> Vec<u8> {
    plot.pixels
        .iter()
        .map(|&v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Binary (P5) PGM, recurrent pixels white.
pub fn write_pgm<T: Scalar>(plot: &RecurrencePlot<T>, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(plot.pixels.len() + 32);
    out.extend_from_slice(format!("P5\n{} {}\n255\n", plot.side, plot.side).as_bytes());
    out.extend_from_slice(&gray(plot));
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_png<T: Scalar>(plot: &RecurrencePlot<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), plot.side as u32, plot.side as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| {
        Error::io(path, std::io::Error::other(e.to_string()))
    };
    let mut writer = encoder.write_header().map_err(to_io)?;
    writer.write_image_data(&gray(plot)).map_err(to_io)?;
    writer.finish().map_err(to_io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let plot = RecurrencePlot {
            side: 2,
            pixels: vec![1.0f64, 0.0, 0.0, 1.0],
        };
        write_pgm(&plot, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[255, 0, 0, 255]);
        let png_path = dir.path().join("x.png");
        write_png(&plot, &png_path).unwrap();
        assert_eq!(&std::fs::read(&png_path).unwrap()[1..4], b"PNG");
    }
}
