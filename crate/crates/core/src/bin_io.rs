//! Little-endian binary encoding helpers shared by the artifact formats
//! (model files, checkpoints, datasets).
//!
//! Writers are infallible into a byte vector; the reader reports a corrupt
//! artifact (never panics) when bytes run out or decode to nonsense, so
//! callers can map it to the corrupt-file exit path.

use crate::error::{Error, Result};
use crate::tensor::TensorBase;

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_i32(out: &mut Vec<u8>, v: i32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_i64(out: &mut Vec<u8>, v: i64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u16(out, s.len().try_into().expect("string fits in u16 length"));
    out.extend_from_slice(s.as_bytes());
}

pub fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

/// Shape (rank + dims as u32) followed by f64 data.
pub fn put_tensor(out: &mut Vec<u8>, t: &TensorBase<f64>) {
    put_u16(out, t.shape().len() as u16);
    for &d in t.shape() {
        put_u32(out, d.try_into().expect("tensor dim fits in u32"));
    }
    for &v in t.data() {
        put_f64(out, v);
    }
}

pub fn put_f64_slice(out: &mut Vec<u8>, s: &[f64]) {
    put_u64(out, s.len() as u64);
    for &v in s {
        put_f64(out, v);
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'a str) -> Self {
        Reader { buf, pos: 0, what }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::corrupt(format!(
                "{}: truncated at byte {} (wanted {} more)",
                self.what, self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expect {
            return Err(Error::corrupt(format!(
                "{}: bad magic {:?}, expected {:?}",
                self.what,
                got,
                &expect[..]
            )));
        }
        Ok(())
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::corrupt(format!("{}: invalid utf8 string", self.what)))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::corrupt(format!("{}: byte blob length {n} exceeds file", self.what)));
        }
        Ok(self.take(n)?.to_vec())
    }

    pub fn tensor(&mut self) -> Result<TensorBase<f64>> {
        let rank = self.u16()? as usize;
        if rank > 8 {
            return Err(Error::corrupt(format!("{}: tensor rank {rank}", self.what)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.checked_mul(8).map_or(true, |b| self.pos + b > self.buf.len()) {
            return Err(Error::corrupt(format!(
                "{}: tensor of shape {shape:?} exceeds file size",
                self.what
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f64()?);
        }
        TensorBase::new(&shape, data)
            .map_err(|e| Error::corrupt(format!("{}: {e}", self.what)))
    }

    pub fn f64_slice(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n.checked_mul(8).map_or(true, |b| self.pos + b > self.buf.len()) {
            return Err(Error::corrupt(format!("{}: float array length {n} exceeds file", self.what)));
        }
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.f64()?);
        }
        Ok(v)
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::corrupt(format!(
                "{}: {} trailing bytes after payload",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_all_primitives() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TST1");
        put_u16(&mut buf, 7);
        put_u32(&mut buf, 70_000);
        put_u64(&mut buf, u64::MAX - 3);
        put_i32(&mut buf, -42);
        put_f64(&mut buf, -0.125);
        put_str(&mut buf, "hello");
        put_bytes(&mut buf, &[1, 2, 3]);
        let t = TensorBase::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        put_tensor(&mut buf, &t);
        put_f64_slice(&mut buf, &[0.5, -0.5]);

        let mut r = Reader::new(&buf, "test");
        r.magic(b"TST1").unwrap();
        assert_eq!(r.u16().unwrap(), 7);
        assert_eq!(r.u32().unwrap(), 70_000);
        assert_eq!(r.u64().unwrap(), u64::MAX - 3);
        assert_eq!(r.i32().unwrap(), -42);
        assert_eq!(r.f64().unwrap(), -0.125);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.bytes().unwrap(), vec![1, 2, 3]);
        assert_eq!(r.tensor().unwrap(), t);
        assert_eq!(r.f64_slice().unwrap(), vec![0.5, -0.5]);
        r.expect_end().unwrap();
    }

    #[test]
    fn truncation_and_bad_magic_are_corrupt_not_panics() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TST1");
        put_u32(&mut buf, 5);
        let mut r = Reader::new(&buf[..5], "test");
        r.magic(b"TST1").unwrap();
        assert!(matches!(r.u32(), Err(Error::Corrupt(_))));

        let mut r = Reader::new(b"XXXX....", "test");
        assert!(matches!(r.magic(b"TST1"), Err(Error::Corrupt(_))));
    }

    #[test]
    fn trailing_bytes_detected() {
        let mut buf = Vec::new();
        put_u16(&mut buf, 1);
        buf.push(9);
        let mut r = Reader::new(&buf, "test");
        r.u16().unwrap();
        assert!(r.expect_end().is_err());
    }
}
