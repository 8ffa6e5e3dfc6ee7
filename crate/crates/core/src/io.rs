//! On-disk formats: 16-bit PCM mono WAV, 8-bit grayscale/RGB PNG, PGM, and
//! spectrograms as a flat little-endian `f64` blob plus a JSON header.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::dsp::{FrequencyGrid, FrequencyScale, Spectrogram, StftParams, Waveform};
use crate::error::{Error, Result};

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + data_len).to_le_bytes())?;
    out.write_all(b"WAVEfmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // PCM
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&w.sample_rate.to_le_bytes())?;
    out.write_all(&(w.sample_rate * 2).to_le_bytes())?;
    out.write_all(&2u16.to_le_bytes())?;
    out.write_all(&16u16.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    for &s in &w.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.write_all(&q.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format(format!("{} is not a RIFF/WAVE file", path.display())));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let mut pos = 12;
    let mut sample_rate = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32_at(pos + 4) as usize;
        let body = pos + 8;
        if body + len > bytes.len() {
            return Err(Error::Format("truncated WAV chunk".into()));
        }
        match id {
            b"fmt " => {
                let (format, channels, bits) = (u16_at(body), u16_at(body + 2), u16_at(body + 14));
                if format != 1 || channels != 1 || bits != 16 {
                    return Err(Error::Format("only 16-bit PCM mono WAV is supported".into()));
                }
                sample_rate = Some(u32_at(body + 4));
            }
            b"data" => {
                let sr = sample_rate.ok_or_else(|| Error::Format("data before fmt chunk".into()))?;
                let samples = bytes[body..body + len]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32767.0)
                    .collect();
                return Waveform::new(samples, sr);
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err(Error::Format("WAV file has no data chunk".into()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale PNG of a grid with values in [0, 1].
pub fn write_png_gray(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let data: Vec<u8> = grid.iter().map(|&v| to_u8(v)).collect();
    write_png(path, w as u32, h as u32, png::ColorType::Grayscale, &data)
}

/// RGB PNG of an H×W×3 image with values in [0, 1].
pub fn write_png_rgb(path: &Path, image: &Array3<f64>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::ShapeMismatch("RGB image needs 3 channels".into()));
    }
    let data: Vec<u8> = image.iter().map(|&v| to_u8(v)).collect();
    write_png(path, w as u32, h as u32, png::ColorType::Rgb, &data)
}

fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads an 8-bit PNG into an H×W×C grid scaled to [0, 1].
pub fn read_png(path: &Path) -> Result<Array3<f64>> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("only 8-bit PNG is supported".into()));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(Error::Format(format!("unsupported PNG color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let data = buf[..h * w * channels].iter().map(|&b| b as f64 / 255.0).collect();
    Array3::from_shape_vec((h, w, channels), data).map_err(|e| Error::Format(e.to_string()))
}

/// Binary (P5) PGM, the fallback heatmap format.
pub fn write_pgm(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let data: Vec<u8> = grid.iter().map(|&v| to_u8(v)).collect();
    out.write_all(&data)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct SpectrogramHeader {
    freq_bins: usize,
    frames: usize,
    params: StftParams,
    /// Present for projected spectrograms.
    grid: Option<FrequencyGrid>,
    layout: String,
}

/// Writes `<stem>.json` (dims, params) and `<stem>.bin` (magnitudes then
/// phases, row-major little-endian f64).
pub fn save_spectrogram(stem: &Path, s: &Spectrogram) -> Result<()> {
    let header = SpectrogramHeader {
        freq_bins: s.freq_bins(),
        frames: s.frames(),
        params: s.params,
        grid: match &s.scale {
            FrequencyScale::Linear => None,
            FrequencyScale::Projected(g) => Some(g.clone()),
        },
        layout: "f64-le row-major; magnitudes then phases".into(),
    };
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&header)?)?;
    let mut out = BufWriter::new(File::create(stem.with_extension("bin"))?);
    for v in s.magnitudes.iter().chain(s.phases.iter()) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_spectrogram(stem: &Path) -> Result<Spectrogram> {
    let header: SpectrogramHeader = serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    let bytes = fs::read(stem.with_extension("bin"))?;
    let n = header.freq_bins * header.frames;
    if bytes.len() != 16 * n {
        return Err(Error::Format("spectrogram blob size does not match header".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let dims = (header.freq_bins, header.frames);
    let as_grid = |v: &[f64]| {
        Array2::from_shape_vec(dims, v.to_vec()).map_err(|e| Error::Format(e.to_string()))
    };
    Ok(Spectrogram {
        magnitudes: as_grid(&values[..n])?,
        phases: as_grid(&values[n..])?,
        params: header.params,
        scale: header.grid.map_or(FrequencyScale::Linear, FrequencyScale::Projected),
    })
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("blob length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
