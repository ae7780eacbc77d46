//! Raw single-channel PNG access. Palette images keep their indices rather
//! than being expanded to colour.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Pixel values of an 8-bit palette/grayscale or 16-bit grayscale PNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u16>,
}

fn open(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    decoder
        .read_info()
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn check_layout(path: &Path, color: png::ColorType, depth: png::BitDepth) -> Result<()> {
    use png::{BitDepth, ColorType};
    match (color, depth) {
        (ColorType::Indexed | ColorType::Grayscale, BitDepth::Eight) | (ColorType::Grayscale, BitDepth::Sixteen) => {
            Ok(())
        }
        _ => Err(Error::Dataset(format!(
            "{}: expected an 8-bit palette/grayscale or 16-bit grayscale PNG, found {color:?} at {depth:?}",
            path.display()
        ))),
    }
}

/// Read only the header and confirm the layout is supported.
pub fn probe(path: &Path) -> Result<(usize, usize)> {
    let reader = open(path)?;
    let info = reader.info();
    check_layout(path, info.color_type, info.bit_depth)?;
    Ok((info.width as usize, info.height as usize))
}

pub fn read_index_png(path: &Path) -> Result<IndexImage> {
    let mut reader = open(path)?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    check_layout(path, color, depth)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Dataset(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let values: Vec<u16> = match depth {
        png::BitDepth::Sixteen => buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        _ => buf[..w * h].iter().map(|&v| v as u16).collect(),
    };
    Ok(IndexImage {
        width: w,
        height: h,
        values,
    })
}

fn encoder<'a>(path: &Path, w: usize, h: usize) -> Result<png::Encoder<'a, BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(png::Encoder::new(BufWriter::new(file), w as u32, h as u32))
}

fn finish(path: &Path, enc: png::Encoder<'_, BufWriter<File>>, data: &[u8]) -> Result<()> {
    let err = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(err)?;
    writer.write_image_data(data).map_err(err)?;
    writer.finish().map_err(err)
}

pub fn write_gray16(path: &Path, w: usize, h: usize, values: &[u16]) -> Result<()> {
    let mut enc = encoder(path, w, h)?;
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let data: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    finish(path, enc, &data)
}

/// 8-bit palette PNG using the VOC colour table.
pub fn write_indexed(path: &Path, w: usize, h: usize, values: &[u8]) -> Result<()> {
    let mut enc = encoder(path, w, h)?;
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(crate::palette::table());
    finish(path, enc, values)
}
