//! Little-endian binary encoding for parameter groups and optimizer state.

use super::{Adam, ParamSet, Real, Tensor};

const PARAM_MAGIC: &[u8; 8] = b"ADVPRM01";
const ADAM_MAGIC: &[u8; 8] = b"ADVADM01";

#[derive(Default)]
pub struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

/// Error carrying only what went wrong; callers attach the source name.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeError(pub String);

type DResult<T> = std::result::Result<T, DecodeError>;

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn bytes(&mut self, n: usize) -> DResult<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DecodeError(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u64(&mut self) -> DResult<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn len(&mut self) -> DResult<usize> {
        let n = self.u64()?;
        if n as usize > self.buf.len() * 8 {
            return Err(DecodeError(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    pub fn f64(&mut self) -> DResult<f64> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> DResult<String> {
        let n = self.len()?;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|e| DecodeError(e.to_string()))
    }

    pub fn f32s(&mut self, n: usize) -> DResult<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| DecodeError("overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    pub fn f64s(&mut self) -> DResult<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn expect(&mut self, magic: &[u8]) -> DResult<()> {
        if self.bytes(magic.len())? != magic {
            return Err(DecodeError("bad magic".into()));
        }
        Ok(())
    }

    /// Everything not yet consumed.
    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Parameters are stored as `f32`.
pub fn encode_params<T: Real>(p: &ParamSet<T>, w: &mut Writer) {
    w.bytes(PARAM_MAGIC);
    w.u64(p.len() as u64);
    for (name, t) in p.iter() {
        w.str(name);
        w.u64(t.shape().len() as u64);
        for &d in t.shape() {
            w.u64(d as u64);
        }
        w.f32s(t.data().iter().map(|v| v.to_f32().expect("finite parameter")));
    }
}

pub fn decode_params<T: Real>(r: &mut Reader) -> DResult<ParamSet<T>> {
    r.expect(PARAM_MAGIC)?;
    let n = r.len()?;
    let mut p = ParamSet::new();
    for _ in 0..n {
        let name = r.str()?;
        let nd = r.len()?;
        let shape = (0..nd).map(|_| r.len()).collect::<DResult<Vec<_>>>()?;
        let count = shape.iter().product();
        let data = r.f32s(count)?;
        p.add(name, Tensor::from_f32(&shape, &data));
    }
    Ok(p)
}

pub fn encode_adam(a: &Adam, w: &mut Writer) {
    w.bytes(ADAM_MAGIC);
    for v in [a.lr, a.beta1, a.beta2, a.eps] {
        w.f64(v);
    }
    w.u64(a.step);
    w.u64(a.m.len() as u64);
    for (m, v) in a.m.iter().zip(&a.v) {
        w.f64s(m);
        w.f64s(v);
    }
}

pub fn decode_adam(r: &mut Reader) -> DResult<Adam> {
    r.expect(ADAM_MAGIC)?;
    let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let step = r.u64()?;
    let n = r.len()?;
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(r.f64s()?);
        v.push(r.f64s()?);
    }
    Ok(Adam {
        lr,
        beta1,
        beta2,
        eps,
        step,
        m,
        v,
    })
}
