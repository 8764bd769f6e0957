//! Binary P6 pixmaps, maxval 255. Values quantize as round(v*255); the
//! first quantization is lossy, after which write/read round-trips are
//! byte-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let (h, w, c) = match image.shape() {
        [h, w, 3] => (*h, *w, 3),
        [h, w, 1] => (*h, *w, 1),
        s => {
            return Err(Error::Geometry(format!(
                "ppm wants [H,W,3] or [H,W,1], got {s:?}"
            )))
        }
    };
    let mut bytes = Vec::with_capacity(32 + h * w * 3);
    bytes.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for i in 0..h * w {
        for ch in 0..3 {
            let v = image.data()[i * c + ch.min(c - 1)].as_f64();
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a P6 file into a [H,W,3] tensor with values k/255.
pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut next_token = || -> Result<String> {
        // skip whitespace and # comments between header tokens
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token()?;
    if magic != "P6" {
        return Err(Error::format(path, format!("magic {magic:?}, expected P6")));
    }
    let w: usize = next_token()?
        .parse()
        .map_err(|_| Error::format(path, "bad width"))?;
    let h: usize = next_token()?
        .parse()
        .map_err(|_| Error::format(path, "bad height"))?;
    let maxval: usize = next_token()?
        .parse()
        .map_err(|_| Error::format(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(Error::format(path, format!("maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(path, "zero extent"));
    }
    // exactly one whitespace byte separates header from payload
    pos += 1;
    let need = h * w * 3;
    if bytes.len() < pos + need {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, needs {need}", bytes.len().saturating_sub(pos)),
        ));
    }
    let data: Vec<S> = bytes[pos..pos + need]
        .iter()
        .map(|&b| S::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::new(vec![h, w, 3], data)
}

/// Collapses a replicated-channel pixmap back to [H,W,1] using the first
/// channel. Exact for masks written by `write_ppm`.
pub fn read_mask<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let rgb: Tensor<S> = read_ppm(path)?;
    let [h, w, _] = *rgb.shape() else { unreachable!() };
    let data: Vec<S> = (0..h * w).map(|i| rgb.data()[i * 3]).collect();
    Tensor::new(vec![h, w, 1], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dewarp-ppm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn quantized_round_trip_is_byte_exact() {
        let img: Tensor<f32> = Tensor::from_fn(&[5, 7, 3], |i| (i % 256) as f32 / 255.0);
        let p = tmp("rt.ppm");
        write_ppm(&p, &img).unwrap();
        let first = std::fs::read(&p).unwrap();
        let back: Tensor<f32> = read_ppm(&p).unwrap();
        assert_eq!(back.data(), img.data());
        write_ppm(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn mask_round_trip() {
        let mask: Tensor<f32> = Tensor::from_fn(&[6, 4, 1], |i| (i % 2) as f32);
        let p = tmp("mask.ppm");
        write_ppm(&p, &mask).unwrap();
        let back: Tensor<f32> = read_mask(&p).unwrap();
        assert_eq!(back.shape(), [6, 4, 1]);
        assert_eq!(back.data(), mask.data());
    }

    #[test]
    fn values_clamp_into_range() {
        let img: Tensor<f64> = Tensor::from_fn(&[2, 2, 3], |i| i as f64 - 5.0);
        let p = tmp("clamp.ppm");
        write_ppm(&p, &img).unwrap();
        let back: Tensor<f64> = read_ppm(&p).unwrap();
        assert!(back.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn header_comments_are_skipped() {
        let p = tmp("comment.ppm");
        let mut bytes = b"P6\n# produced elsewhere\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 255, 255, 255]);
        std::fs::write(&p, bytes).unwrap();
        let img: Tensor<f64> = read_ppm(&p).unwrap();
        assert_eq!(img.shape(), [1, 2, 3]);
        assert_eq!(img.data()[3], 1.0);
    }

    #[test]
    fn malformed_files_name_the_path() {
        let p = tmp("bad.ppm");
        std::fs::write(&p, b"P5\n2 2\n255\n....").unwrap();
        match read_ppm::<f32>(&p) {
            Err(Error::Format { path, .. }) => {
                assert!(path.to_string_lossy().contains("bad.ppm"))
            }
            other => panic!("{other:?}"),
        }
        let q = tmp("short.ppm");
        std::fs::write(&q, b"P6\n4 4\n255\nxy").unwrap();
        assert!(read_ppm::<f32>(&q).is_err());
        assert!(read_ppm::<f32>(&tmp("missing.ppm")).is_err());
    }
}
