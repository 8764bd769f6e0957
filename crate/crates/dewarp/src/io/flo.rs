//! Middlebury flow container: the magic bytes "PIEH" (the float 202021.25
//! little-endian), width and height as 32-bit integers, then row-major
//! interleaved (du, dv) as 32-bit floats.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rectifier::FlowField;
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"PIEH";

pub fn write_flo(path: &Path, flow: &FlowField<f32>) -> Result<()> {
    let (h, w) = (flow.h(), flow.w());
    let mut bytes = Vec::with_capacity(12 + h * w * 8);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&(w as i32).to_le_bytes());
    bytes.extend_from_slice(&(h as i32).to_le_bytes());
    for &v in flow.disp.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_flo(path: &Path) -> Result<FlowField<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "shorter than the 12-byte header"));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::format(path, format!("magic {:?}, expected PIEH", &bytes[..4])));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 {
        return Err(Error::format(path, format!("extent {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let need = 12 + h * w * 8;
    if bytes.len() != need {
        return Err(Error::format(
            path,
            format!("{} bytes for {w}x{h} flow, expected {need}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FlowField::new(Tensor::new(vec![h, w, 2], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("dewarp-flo-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let flow = FlowField::new(Tensor::from_fn(&[3, 5, 2], |i| {
            ((i * 37 % 101) as f32 - 50.0) * 0.173
        }))
        .unwrap();
        let p = tmp("rt.flo");
        write_flo(&p, &flow).unwrap();
        let back = read_flo(&p).unwrap();
        assert_eq!(back.disp.shape(), flow.disp.shape());
        for (a, b) in back.disp.data().iter().zip(flow.disp.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // write again: identical bytes
        let first = std::fs::read(&p).unwrap();
        write_flo(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn header_layout_is_the_container_format() {
        let flow = FlowField::new(Tensor::from_fn(&[2, 3, 2], |i| i as f32)).unwrap();
        let p = tmp("layout.flo");
        write_flo(&p, &flow).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(i32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 12 + 2 * 3 * 8);
        // the magic doubles as the float 202021.25
        assert_eq!(f32::from_le_bytes(bytes[..4].try_into().unwrap()), 202021.25);
        // first pair is (du, dv) of pixel (0,0)
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 0.0);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = tmp("badmagic.flo");
        std::fs::write(&p, b"FLOW\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_flo(&p), Err(Error::Format { .. })));
        let q = tmp("truncated.flo");
        let mut bytes = b"PIEH".to_vec();
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&4i32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&q, bytes).unwrap();
        assert!(read_flo(&q).is_err());
    }
}
