//! Raw feature matrices on disk.
//!
//! A matrix `name.bin` holds little-endian `f32` values in row-major order.
//! Its sidecar `name.bin.meta` is plain text with one `key = value` per line:
//!
//! ```text
//! num_frames = 87
//! feature_dim = 16
//! frame_hop_ms = 10
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::Matrix;

/// A matrix plus the frame hop it was sampled at.
#[derive(Debug, Clone, PartialEq)]
pub struct RawMatrix {
    pub data: Matrix,
    pub frame_hop_ms: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn write_matrix(path: &Path, data: &Matrix, frame_hop_ms: f64) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for row in data.rows() {
        for &v in row {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = format!(
        "num_frames = {}\nfeature_dim = {}\nframe_hop_ms = {}\n",
        data.nrows(),
        data.ncols(),
        frame_hop_ms
    );
    let side = sidecar_path(path);
    fs::write(&side, meta).map_err(|e| Error::io(&side, e))
}

fn parse_sidecar(path: &Path) -> Result<(usize, usize, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let (mut rows, mut cols, mut hop) = (None, None, None);
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let value = value.trim();
        match key.trim() {
            "num_frames" => rows = Some(value.parse().map_err(|_| bad(format!("bad num_frames {value}")))?),
            "feature_dim" => cols = Some(value.parse().map_err(|_| bad(format!("bad feature_dim {value}")))?),
            "frame_hop_ms" => hop = Some(value.parse().map_err(|_| bad(format!("bad frame_hop_ms {value}")))?),
            other => return Err(bad(format!("unknown key {other}"))),
        }
    }
    match (rows, cols, hop) {
        (Some(r), Some(c), Some(h)) => Ok((r, c, h)),
        _ => Err(bad("missing num_frames, feature_dim or frame_hop_ms".into())),
    }
}

pub fn read_matrix(path: &Path) -> Result<RawMatrix> {
    let (rows, cols, frame_hop_ms) = parse_sidecar(&sidecar_path(path))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} bytes for {rows}x{cols}, found {}",
                rows * cols * 4,
                bytes.len()
            ),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).expect("size checked above");
    Ok(RawMatrix { data, frame_hop_ms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = array![[1.5, -2.25, 0.0], [3.0, 4.125, -0.5]];
        write_matrix(&path, &m, 10.0).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(back.data, m);
        assert_eq!(back.frame_hop_ms, 10.0);
        let meta = fs::read_to_string(sidecar_path(&path)).unwrap();
        assert!(meta.contains("num_frames = 2"));
        assert!(meta.contains("feature_dim = 3"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        write_matrix(&path, &array![[1.0, 2.0]], 10.0).unwrap();
        fs::write(&path, [0u8; 4]).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
    }
}
