//! Portable Float Map (PFM) reading and writing.
//!
//! Grayscale maps only (`Pf` header): 32-bit floats, rows stored
//! bottom-to-top, scale −1.0 marking little-endian data. Lossless for the
//! `f32`-rounded values, so a write → read → write cycle is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{PanoError, Result};
use crate::tensor::Tensor;

pub fn save_pfm(path: &Path, map: &Tensor) -> Result<()> {
    let (c, h, w) = map.chw()?;
    if c != 1 {
        return Err(PanoError::invalid("PFM export expects a single channel"));
    }
    let file = File::create(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
    let mut out = BufWriter::new(file);
    let write = |out: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        out.write_all(bytes)
            .map_err(|e| PanoError::io(path.display().to_string(), e))
    };
    write(&mut out, format!("Pf\n{w} {h}\n-1.0\n").as_bytes())?;
    for y in (0..h).rev() {
        for x in 0..w {
            let v = map.data()[y * w + x] as f32;
            write(&mut out, &v.to_le_bytes())?;
        }
    }
    out.flush()
        .map_err(|e| PanoError::io(path.display().to_string(), e))
}

pub fn load_pfm(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| PanoError::io(path.display().to_string(), e))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| PanoError::io(path.display().to_string(), e))?;
    parse_pfm(&bytes).map_err(|message| PanoError::Format {
        path: path.display().to_string(),
        message,
    })
}

fn parse_pfm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".to_string());
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(tok)
    };
    let magic = token(bytes)?;
    if magic != "Pf" {
        return Err(format!("unsupported PFM magic {magic:?} (grayscale Pf only)"));
    }
    let w: usize = token(bytes)?.parse().map_err(|_| "bad width".to_string())?;
    let h: usize = token(bytes)?.parse().map_err(|_| "bad height".to_string())?;
    let scale: f64 = token(bytes)?.parse().map_err(|_| "bad scale".to_string())?;
    if scale >= 0.0 {
        return Err("big-endian PFM not supported".to_string());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 4;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let mut data = vec![0.0f64; w * h];
    for row in 0..h {
        let y = h - 1 - row;
        for x in 0..w {
            let off = pos + (row * w + x) * 4;
            let v = f32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]);
            data[y * w + x] = v as f64;
        }
    }
    Tensor::new(vec![1, h, w], data).map_err(|e| e.to_string())
}
