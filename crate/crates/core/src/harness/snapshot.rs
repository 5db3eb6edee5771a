//! Binary field snapshots.
//!
//! Layout: magic `WFLD1`, u32 LE header length, JSON header, the field
//! arrays as little-endian f64 (time-major, then space with axis 0 fastest,
//! then component), and a trailing SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matgeom::{SymMat, Vec3};

pub const MAGIC: &[u8; 5] = b"WFLD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub comps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    grid: Grid,
    gamma: Option<f64>,
    fields: Vec<FieldSpec>,
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub name: String,
    pub comps: usize,
    /// len = grid.len() * comps
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub grid: Grid,
    pub gamma: Option<f64>,
    pub fields: Vec<Field>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Snapshot {
    pub fn new(grid: Grid, gamma: Option<f64>) -> Self {
        Snapshot {
            grid,
            gamma,
            fields: Vec::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: &str, comps: usize, data: Vec<f64>) -> Result<()> {
        if self.fields.iter().any(|f| f.name == name) {
            return Err(Error::Snapshot(format!("duplicate field name {name}")));
        }
        let expected = self.grid.len() * comps;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        self.fields.push(Field {
            name: name.to_string(),
            comps,
            data,
        });
        Ok(())
    }

    pub fn push_scalar(&mut self, name: &str, data: &[f64]) -> Result<()> {
        self.push(name, 1, data.to_vec())
    }

    pub fn push_vector(&mut self, name: &str, data: &[Vec3]) -> Result<()> {
        let n = self.grid.n;
        self.push(name, n, data.iter().flat_map(|v| v[..n].to_vec()).collect())
    }

    pub fn push_sym(&mut self, name: &str, data: &[SymMat]) -> Result<()> {
        let n = self.grid.n;
        self.push(name, n * (n + 1) / 2, data.iter().flat_map(|m| m.upper().to_vec()).collect())
    }

    pub fn field(&self, name: &str) -> Result<&Field> {
        self.fields
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::Snapshot(format!("missing field {name}")))
    }

    pub fn scalar(&self, name: &str) -> Result<Vec<f64>> {
        let f = self.field(name)?;
        if f.comps != 1 {
            return Err(Error::Snapshot(format!("field {name} is not scalar")));
        }
        Ok(f.data.clone())
    }

    pub fn vector(&self, name: &str) -> Result<Vec<Vec3>> {
        let n = self.grid.n;
        let f = self.field(name)?;
        if f.comps != n {
            return Err(Error::Snapshot(format!("field {name} is not a vector field")));
        }
        Ok(f.data
            .chunks(n)
            .map(|c| {
                let mut v = [0.0; 3];
                v[..n].copy_from_slice(c);
                v
            })
            .collect())
    }

    pub fn sym(&self, name: &str) -> Result<Vec<SymMat>> {
        let n = self.grid.n;
        let f = self.field(name)?;
        if f.comps != n * (n + 1) / 2 {
            return Err(Error::Snapshot(format!("field {name} is not a symmetric tensor field")));
        }
        f.data.chunks(f.comps).map(|c| SymMat::from_upper(n, c)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            grid: self.grid,
            gamma: self.gamma,
            fields: self
                .fields
                .iter()
                .map(|f| FieldSpec {
                    name: f.name.clone(),
                    comps: f.comps,
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let hjson = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(9 + hjson.len() + 8 * self.fields.iter().map(|f| f.data.len()).sum::<usize>() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
        out.extend_from_slice(&hjson);
        for f in &self.fields {
            for x in &f.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = Sha256::digest(&out);
        out.extend_from_slice(&sum);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < MAGIC.len() + 4 + 32 || &b[..5] != MAGIC {
            return Err(Error::Snapshot("bad magic or truncated file".into()));
        }
        let body = &b[..b.len() - 32];
        let sum = Sha256::digest(body);
        if sum.as_slice() != &b[b.len() - 32..] {
            return Err(Error::Snapshot("checksum mismatch".into()));
        }
        let hlen = u32::from_le_bytes(b[5..9].try_into().unwrap()) as usize;
        if 9 + hlen > body.len() {
            return Err(Error::Snapshot("header length out of range".into()));
        }
        let header: Header = serde_json::from_slice(&body[9..9 + hlen])
            .map_err(|e| Error::Snapshot(format!("header: {e}")))?;
        let g = header.grid;
        Grid::new(g.n, g.nx, g.nt, g.extent, g.t_start, g.t_end, g.layout)
            .map_err(|e| Error::Snapshot(format!("header grid: {e}")))?;
        let mut names = std::collections::BTreeSet::new();
        let mut pos = 9 + hlen;
        let mut fields = Vec::new();
        for spec in header.fields {
            if !names.insert(spec.name.clone()) {
                return Err(Error::Snapshot(format!("duplicate field name {}", spec.name)));
            }
            let count = g.len() * spec.comps;
            let end = pos + 8 * count;
            if end > body.len() {
                return Err(Error::Snapshot("field data truncated".into()));
            }
            let data = body[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            fields.push(Field {
                name: spec.name,
                comps: spec.comps,
                data,
            });
        }
        if pos != body.len() {
            return Err(Error::Snapshot("trailing bytes after field data".into()));
        }
        Ok(Snapshot {
            grid: g,
            gamma: header.gamma,
            fields,
            meta: header.meta,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
