//! Minimal `.npy` (format 1.0) support for little-endian `f32` arrays in C order.

use std::io::{self, Read, Write};

use ndarray::{ArrayD, IxDyn};

const MAGIC: &[u8] = b"\x93NUMPY";

fn header_dict(shape: &[usize]) -> String {
    let dims = match shape {
        [n] => format!("({n},)"),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}")
}

pub fn write_f32(array: &ArrayD<f32>, mut w: impl Write) -> io::Result<()> {
    let mut header = header_dict(array.shape());
    // magic(6) + version(2) + len(2) + header + '\n' is padded to 64 bytes.
    let unpadded = MAGIC.len() + 4 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    w.write_all(MAGIC)?;
    w.write_all(&[1, 0])?;
    w.write_all(&(header.len() as u16).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(array.len() * 4);
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn parse_shape(header: &str) -> io::Result<Vec<usize>> {
    if !header.contains("'descr': '<f4'") {
        return Err(invalid("only little-endian f32 arrays are supported"));
    }
    if !header.contains("'fortran_order': False") {
        return Err(invalid("fortran-ordered arrays are not supported"));
    }
    let start = header.find("'shape': (").ok_or_else(|| invalid("missing shape"))? + "'shape': (".len();
    let end = start + header[start..].find(')').ok_or_else(|| invalid("unterminated shape"))?;
    header[start..end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| invalid(format!("bad dimension `{s}`"))))
        .collect()
}

pub fn read_f32(mut r: impl Read) -> io::Result<ArrayD<f32>> {
    let mut pre = [0u8; 10];
    r.read_exact(&mut pre)?;
    if &pre[..6] != MAGIC || pre[6] != 1 {
        return Err(invalid("not a version 1 npy file"));
    }
    let len = u16::from_le_bytes([pre[8], pre[9]]) as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| invalid("header is not utf-8"))?;
    let shape = parse_shape(&header)?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| invalid(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_alignment() {
        for shape in [vec![3], vec![2, 3, 4], vec![1, 1], vec![0, 5]] {
            let n: usize = shape.iter().product();
            let a = ArrayD::from_shape_vec(IxDyn(&shape), (0..n).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
            let mut buf = Vec::new();
            write_f32(&a, &mut buf).unwrap();
            let header_len = u16::from_le_bytes([buf[8], buf[9]]) as usize;
            assert_eq!((10 + header_len) % 64, 0);
            assert_eq!(buf[9 + header_len], b'\n');
            assert_eq!(read_f32(buf.as_slice()).unwrap(), a);
        }
    }

    #[test]
    fn one_dimensional_header_has_trailing_comma() {
        assert!(header_dict(&[7]).contains("(7,)"));
    }

    #[test]
    fn rejects_other_dtypes() {
        let mut buf = Vec::new();
        write_f32(&ArrayD::zeros(IxDyn(&[2])), &mut buf).unwrap();
        let s = String::from_utf8_lossy(&buf).replace("<f4", "<f8");
        assert!(read_f32(s.as_bytes()).is_err());
    }
}
