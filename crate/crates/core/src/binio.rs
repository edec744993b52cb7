//! Little-endian binary encoding shared by the mesh, sample and checkpoint files.

use meshcontact_tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Default)]
pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8]) -> Self {
        Self { buf: magic.to_vec() }
    }

    pub fn u32(&mut self, x: usize) {
        let x = u32::try_from(x).expect("extent fits in u32");
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    pub fn i32s(&mut self, xs: impl IntoIterator<Item = i32>) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, xs: &[f64]) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &d in t.shape() {
            self.u32(d);
        }
        self.f64s(t.data());
    }

    /// Count followed by `(name, tensor)` records.
    pub fn table<'a>(&mut self, entries: impl IntoIterator<Item = (&'a String, &'a Tensor)>) {
        let entries: Vec<_> = entries.into_iter().collect();
        self.u32(entries.len());
        for (name, t) in entries {
            self.str(name);
            self.tensor(t);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    what: String,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the magic prefix and positions the cursor after it.
    pub fn new(what: impl Into<String>, buf: &'a [u8], magic: &[u8]) -> Result<Self> {
        let mut r = Self {
            what: what.into(),
            buf,
            pos: 0,
        };
        if r.take(magic.len())? != magic {
            return Err(r.err_at(0));
        }
        Ok(r)
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn err_at(&self, offset: usize) -> Error {
        Error::Parse {
            what: self.what.clone(),
            offset,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err_at(self.pos)),
        }
    }

    pub fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    pub fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn i32s(&mut self, n: usize) -> Result<Vec<i32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.err_at(self.pos))?)?;
        Ok(b.chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| self.err_at(self.pos))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let start = self.pos;
        let n = self.u32()?;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err_at(start))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let start = self.pos;
        let rank = self.u32()?;
        if rank > 8 {
            return Err(self.err_at(start));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| self.err_at(start))?;
        let data = self.f64s(n)?;
        Tensor::new(shape, data).map_err(|_| self.err_at(start))
    }

    pub fn table(&mut self) -> Result<Vec<(String, Tensor)>> {
        let n = self.u32()?;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.str()?;
            out.push((name, self.tensor()?));
        }
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(self.err_at(self.pos))
        }
    }
}
