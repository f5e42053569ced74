//! Point-cloud file formats: ASCII PLY and the compact PCB1 binary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::PointCloud;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Write an ASCII PLY with x,y,z floats (meters) and red,green,blue uchar.
pub fn save_ply(cloud: &PointCloud, path: &Path) -> Result<(), CloudIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    writeln!(w, "property float x")?;
    writeln!(w, "property float y")?;
    writeln!(w, "property float z")?;
    writeln!(w, "property uchar red")?;
    writeln!(w, "property uchar green")?;
    writeln!(w, "property uchar blue")?;
    writeln!(w, "end_header")?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        writeln!(
            w,
            "{} {} {} {} {} {}",
            p[0] as f32,
            p[1] as f32,
            p[2] as f32,
            to_u8(c[0]),
            to_u8(c[1]),
            to_u8(c[2])
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_ply(path: &Path) -> Result<PointCloud, CloudIoError> {
    let r = BufReader::new(File::open(path)?);
    let mut lines = r.lines();
    let mut count: Option<usize> = None;
    loop {
        let line = lines
            .next()
            .ok_or_else(|| CloudIoError::Parse("missing end_header".into()))??;
        let line = line.trim().to_string();
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(
                rest.trim()
                    .parse()
                    .map_err(|_| CloudIoError::Parse(format!("bad vertex count '{rest}'")))?,
            );
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| CloudIoError::Parse("missing element vertex".into()))?;
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| CloudIoError::Parse("truncated vertex list".into()))??;
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 {
            return Err(CloudIoError::Parse(format!(
                "expected 6 fields per vertex, got {}",
                tok.len()
            )));
        }
        let f = |s: &str| -> Result<f64, CloudIoError> {
            s.parse::<f64>()
                .map_err(|_| CloudIoError::Parse(format!("bad number '{s}'")))
        };
        positions.push([f(tok[0])?, f(tok[1])?, f(tok[2])?]);
        let u = |s: &str| -> Result<f64, CloudIoError> {
            Ok(s.parse::<u8>()
                .map_err(|_| CloudIoError::Parse(format!("bad color '{s}'")))? as f64
                / 255.0)
        };
        colors.push([u(tok[3])?, u(tok[4])?, u(tok[5])?]);
    }
    Ok(PointCloud { positions, colors })
}

const PCB_MAGIC: &[u8; 4] = b"PCB1";

/// Binary alternative: magic "PCB1", u64 count, interleaved 6xf32 records
/// (x,y,z then r,g,b in [0,1]), little-endian.
pub fn save_pcb(cloud: &PointCloud, path: &Path) -> Result<(), CloudIoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PCB_MAGIC)?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for v in c {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_pcb(path: &Path) -> Result<PointCloud, CloudIoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PCB_MAGIC {
        return Err(CloudIoError::Parse("bad PCB1 magic".into()));
    }
    let mut cbuf = [0u8; 8];
    r.read_exact(&mut cbuf)?;
    let count = u64::from_le_bytes(cbuf) as usize;
    let mut positions = Vec::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    let mut rec = [0u8; 24];
    for _ in 0..count {
        r.read_exact(&mut rec)
            .map_err(|_| CloudIoError::Parse("truncated PCB1 records".into()))?;
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap()) as f64;
        positions.push([f(0), f(1), f(2)]);
        colors.push([f(3), f(4), f(5)]);
    }
    Ok(PointCloud { positions, colors })
}
