//! Named parameter store and the flat-binary checkpoint format.
//!
//! All learned grids live in one [`ParamStore`], registered in a fixed
//! order at model construction. Each training step binds the whole store
//! onto a fresh tape; gradients come back positionally.
//!
//! Checkpoints are a pair of files: `<base>.bin` holds every parameter grid
//! concatenated as little-endian `f64`, `<base>.manifest` is a text index
//! with one `name dims offset` line per grid (dims are `x`-separated, the
//! offset counts elements).

use crate::grid::ValueGrid;
use crate::tape::{Tape, Var};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter {0:?} registered twice")]
    Duplicate(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },
    #[error("checkpoint data length {actual} does not match manifest total {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("checkpoint is missing parameter {0:?}")]
    Missing(String),
    #[error("parameter {name:?} has shape {actual:?}, checkpoint has {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Default)]
pub struct ParamStore {
    names: Vec<String>,
    grids: Vec<ValueGrid>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, grid: ValueGrid) -> Result<ParamId, ParamError> {
        if self.index.contains_key(name) {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let id = self.grids.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grids.push(grid);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.grids.iter().map(|g| g.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn grid(&self, id: ParamId) -> &ValueGrid {
        &self.grids[id.0]
    }

    pub fn grid_mut(&mut self, id: ParamId) -> &mut ValueGrid {
        &mut self.grids[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.grids.len()).map(ParamId)
    }

    /// Registers every parameter on `tape` (with gradients) in store order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .grids
            .iter()
            .map(|g| tape.input(g.clone(), true))
            .collect();
        BoundParams { vars }
    }

    /// Like [`ParamStore::bind`] but without gradient tracking (inference).
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .grids
            .iter()
            .map(|g| tape.input(g.clone(), false))
            .collect();
        BoundParams { vars }
    }

    pub fn save(&self, base: &Path) -> Result<(), ParamError> {
        let mut manifest = String::new();
        let mut bin: Vec<u8> = Vec::with_capacity(self.total_elements() * 8);
        let mut offset = 0usize;
        for (name, grid) in self.names.iter().zip(&self.grids) {
            let dims: Vec<String> = grid.shape().iter().map(|d| d.to_string()).collect();
            writeln!(manifest, "{} {} {}", name, dims.join("x"), offset).expect("string write");
            for v in grid.data() {
                bin.extend_from_slice(&v.to_le_bytes());
            }
            offset += grid.len();
        }
        std::fs::write(with_ext(base, "manifest"), manifest)?;
        let mut f = std::fs::File::create(with_ext(base, "bin"))?;
        f.write_all(&bin)?;
        Ok(())
    }

    /// Loads checkpoint values into this store; every registered parameter
    /// must be present with a matching shape.
    pub fn load(&mut self, base: &Path) -> Result<(), ParamError> {
        let manifest = std::fs::read_to_string(with_ext(base, "manifest"))?;
        let mut bin = Vec::new();
        std::fs::File::open(with_ext(base, "bin"))?.read_to_end(&mut bin)?;
        let mut entries: HashMap<String, (Vec<usize>, usize)> = HashMap::new();
        let mut total = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(ParamError::Manifest {
                    line: lineno + 1,
                    detail: format!("expected `name dims offset`, got {line:?}"),
                });
            }
            let dims: Vec<usize> = parts[1]
                .split('x')
                .map(|d| {
                    d.parse::<usize>().map_err(|_| ParamError::Manifest {
                        line: lineno + 1,
                        detail: format!("bad dimension {d:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let offset: usize = parts[2].parse().map_err(|_| ParamError::Manifest {
                line: lineno + 1,
                detail: format!("bad offset {:?}", parts[2]),
            })?;
            total += dims.iter().product::<usize>();
            entries.insert(parts[0].to_string(), (dims, offset));
        }
        if bin.len() != total * 8 {
            return Err(ParamError::DataLength {
                expected: total * 8,
                actual: bin.len(),
            });
        }
        for (name, grid) in self.names.iter().zip(&mut self.grids) {
            let (dims, offset) = entries
                .get(name)
                .ok_or_else(|| ParamError::Missing(name.clone()))?;
            if dims != grid.shape() {
                return Err(ParamError::ShapeMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    actual: grid.shape().to_vec(),
                });
            }
            let n = grid.len();
            let data = grid.data_mut();
            for (i, v) in data.iter_mut().enumerate().take(n) {
                let at = (offset + i) * 8;
                let bytes: [u8; 8] = bin[at..at + 8].try_into().expect("length checked");
                *v = f64::from_le_bytes(bytes);
            }
        }
        Ok(())
    }
}

/// Gaussian-initialized grid (Box–Muller over the given RNG).
pub fn normal_grid(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> ValueGrid {
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(r * theta.cos() * std);
        if data.len() < len {
            data.push(r * theta.sin() * std);
        }
    }
    ValueGrid::from_vec(shape, data).expect("sized")
}

fn with_ext(base: &Path, ext: &str) -> std::path::PathBuf {
    let mut p = base.as_os_str().to_os_string();
    p.push(".");
    p.push(ext);
    std::path::PathBuf::from(p)
}

/// Tape variables for every parameter of a store, in store order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_rejects_duplicates() {
        let mut store = ParamStore::new();
        store.register("w", ValueGrid::zeros(&[2])).unwrap();
        assert!(matches!(
            store.register("w", ValueGrid::zeros(&[2])),
            Err(ParamError::Duplicate(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = std::env::temp_dir().join(format!("winmvs-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("weights");

        let mut store = ParamStore::new();
        store
            .register("a.w", ValueGrid::from_vec(&[2, 2], vec![1.0, -2.5, 0.125, 9.0]).unwrap())
            .unwrap();
        store
            .register("b.bias", ValueGrid::from_vec(&[3], vec![0.1, 0.2, 0.3]).unwrap())
            .unwrap();
        store.save(&base).unwrap();

        let mut restored = ParamStore::new();
        let a = restored.register("a.w", ValueGrid::zeros(&[2, 2])).unwrap();
        let b = restored.register("b.bias", ValueGrid::zeros(&[3])).unwrap();
        restored.load(&base).unwrap();
        assert_eq!(restored.grid(a).data(), &[1.0, -2.5, 0.125, 9.0]);
        assert_eq!(restored.grid(b).data(), &[0.1, 0.2, 0.3]);

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_rejects_shape_change() {
        let dir = std::env::temp_dir().join(format!("winmvs-ckpt-shape-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let base = dir.join("weights");

        let mut store = ParamStore::new();
        store.register("w", ValueGrid::zeros(&[4])).unwrap();
        store.save(&base).unwrap();

        let mut other = ParamStore::new();
        other.register("w", ValueGrid::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            other.load(&base),
            Err(ParamError::ShapeMismatch { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
