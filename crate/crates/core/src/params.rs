//! Named parameter storage and the SCNW weight file.
//!
//! Layout (all integers little-endian): magic `SCNW`, u32 version, u32 tensor
//! count, then per tensor a u16 name length, the UTF-8 name, a u8 rank, `rank`
//! u32 dims and the f32 data. Tensors are written in name order. Trailing unit
//! dims are trimmed on write and restored on read, so a bias `[16,1,1,1]` is
//! stored with rank 1.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SCNW_MAGIC: &[u8; 4] = b"SCNW";
pub const SCNW_VERSION: u32 = 1;

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform He init, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    He { fan_in: usize },
    Const(f64),
}

/// Shape and initialiser of one named parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: [usize; 4],
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, dims: [usize; 4], init: Init) -> Self {
        Self { name: name.into(), dims, init }
    }

    /// Weight `[cout, cin, kh, kw]` with He init over `cin * kh * kw`.
    pub fn conv_weight(name: impl Into<String>, cout: usize, cin: usize, kh: usize, kw: usize) -> Self {
        Self::new(name, [cout, cin, kh, kw], Init::He { fan_in: cin * kh * kw })
    }

    pub fn bias(name: impl Into<String>, n: usize) -> Self {
        Self::new(name, [n, 1, 1, 1], Init::Const(0.0))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn init(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Self {
        let mut store = Self::new();
        for s in specs {
            let n: usize = s.dims.iter().product();
            let data = match s.init {
                Init::He { fan_in } => {
                    let b = (6.0 / fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| T::lit(rng.gen_range(-b..b))).collect()
                }
                Init::Const(v) => vec![T::lit(v); n],
            };
            store.insert(s.name.clone(), Tensor::new(s.dims, data).expect("dims match data"));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::schema(name, "missing parameter"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::schema(name, "missing parameter"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Checks that every spec is present with the right shape and nothing else is.
    pub fn validate(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self.get(&s.name)?;
            if t.dims() != s.dims {
                return Err(Error::schema(
                    &s.name,
                    format!("expected dims {:?}, found {:?}", s.dims, t.dims()),
                ));
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| &s.name == *n)) {
            return Err(Error::schema(extra, "unexpected parameter"));
        }
        Ok(())
    }

    /// Records every parameter on `tape`: as a leaf when `trainable(name)`,
    /// otherwise as a constant.
    pub fn bind(&self, tape: &Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) { tape.leaf(v.clone()) } else { tape.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        Bindings { vars }
    }
}

impl ParamStore<f32> {
    pub fn write_scnw<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(SCNW_MAGIC)?;
        out.write_all(&SCNW_VERSION.to_le_bytes())?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| Error::schema(name, "name longer than 65535 bytes"))?;
            out.write_all(&len.to_le_bytes())?;
            out.write_all(bytes)?;
            let dims = t.dims();
            let rank = dims.iter().rposition(|&d| d != 1).map_or(1, |i| i + 1);
            out.write_all(&[rank as u8])?;
            for d in &dims[..rank] {
                out.write_all(&(*d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_scnw<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(4, "magic")? != SCNW_MAGIC {
            return Err(Error::schema("magic", "not an SCNW file"));
        }
        let version = cur.u32("version")?;
        if version != SCNW_VERSION {
            return Err(Error::schema("version", format!("unsupported version {version}")));
        }
        let count = cur.u32("tensor_count")?;
        let mut store = Self::new();
        for i in 0..count {
            let len = u16::from_le_bytes(cur.take(2, "name_length")?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| Error::schema(format!("tensor[{i}].name"), "invalid UTF-8"))?
                .to_string();
            let rank = cur.take(1, &name)?[0] as usize;
            if rank == 0 || rank > 4 {
                return Err(Error::schema(&name, format!("rank {rank} not in 1..=4")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().take(rank) {
                *d = cur.u32(&name)? as usize;
            }
            let n: usize = dims.iter().product();
            let raw = cur.take(n * 4, &name)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if store.contains(&name) {
                return Err(Error::schema(&name, "duplicate tensor"));
            }
            store.insert(name, Tensor::new(dims, data)?);
        }
        if cur.pos != buf.len() {
            return Err(Error::schema("trailer", "bytes after the last tensor"));
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::schema(field, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }
}

/// Parameter name to tape variable.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::schema(name, "missing parameter"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> ParamStore {
        let specs = [
            ParamSpec::conv_weight("b.w", 4, 2, 3, 3),
            ParamSpec::bias("b.b", 4),
            ParamSpec::new("a.s", [1, 1, 1, 1], Init::Const(2.5)),
        ];
        ParamStore::init(&specs, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn scnw_round_trip_is_bit_exact() {
        let p = sample();
        let mut buf = Vec::new();
        p.write_scnw(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SCNW");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 3);
        let q = ParamStore::read_scnw(&buf[..]).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn scnw_layout_first_tensor() {
        let mut buf = Vec::new();
        sample().write_scnw(&mut buf).unwrap();
        // "a.s" sorts first, scalar stored with rank 1
        assert_eq!(&buf[12..14], &3u16.to_le_bytes());
        assert_eq!(&buf[14..17], b"a.s");
        assert_eq!(buf[17], 1);
        assert_eq!(&buf[18..22], &1u32.to_le_bytes());
        assert_eq!(&buf[22..26], &2.5f32.to_le_bytes());
    }

    #[test]
    fn scnw_rejects_damage() {
        let mut buf = Vec::new();
        sample().write_scnw(&mut buf).unwrap();
        let e = ParamStore::read_scnw(&buf[..buf.len() - 1]).unwrap_err();
        assert!(e.is_schema());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_scnw(&bad[..]).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn validate_names_offender() {
        let p = sample();
        let specs = [ParamSpec::conv_weight("b.w", 4, 2, 3, 3), ParamSpec::bias("b.b", 5)];
        let e = p.validate(&specs).unwrap_err();
        assert!(e.to_string().contains("b.b"), "{e}");
    }
}
