//! Little-endian named-tensor framing shared by weight files, golden
//! fixtures and checkpoints.
//!
//! A record is `name_len: u16`, UTF-8 name, `ndim: u8`, `dims: u32 * ndim`,
//! then the `f32` elements in row-major order.

use std::io::{self, Read, Write};

use stylefield_tensor::Tensor;

pub type NamedTensor = (String, Tensor<f32>);

pub fn write_u16(w: &mut impl Write, v: u16) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "string longer than 65535 bytes"))?;
    write_u16(w, len)?;
    w.write_all(s.as_bytes())
}

pub fn read_string(r: &mut impl Read) -> io::Result<String> {
    let len = read_u16(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn write_tensor(w: &mut impl Write, name: &str, tensor: &Tensor<f32>) -> io::Result<()> {
    write_string(w, name)?;
    let ndim = u8::try_from(tensor.ndim())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "too many dimensions"))?;
    w.write_all(&[ndim])?;
    for &d in tensor.shape() {
        let d = u32::try_from(d)
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "extent exceeds u32"))?;
        write_u32(w, d)?;
    }
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

pub fn read_tensor(r: &mut impl Read) -> io::Result<NamedTensor> {
    let name = read_string(r)?;
    let ndim = read_u8(r)? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(r)? as usize);
    }
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let tensor = Tensor::new(shape, data)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    Ok((name, tensor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_record_round_trips(
            name in "[a-z0-9_.]{1,24}",
            shape in proptest::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = (0..len).map(|i| (i as f32 + seed as f32).sin()).collect();
            let tensor = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &name, &tensor).unwrap();
            let (n, t) = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(n, name);
            prop_assert_eq!(t, tensor);
        }
    }

    #[test]
    fn truncated_record_is_an_io_error() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, "w", &Tensor::from_vec(vec![1.0f32, 2.0])).unwrap();
        buf.truncate(buf.len() - 1);
        let err = read_tensor(&mut buf.as_slice()).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::UnexpectedEof);
    }
}
