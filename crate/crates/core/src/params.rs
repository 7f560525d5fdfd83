//! Named parameter storage shared by the network, classifier, and predictor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, Tape, Tensor};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct Entry {
    name: String,
    value: Tensor,
}

/// Flat store of learnable tensors, addressed by [`ParamId`].
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = value;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Leafs the parameter onto the tape (cached per tape, so repeated use
    /// accumulates gradient at a single node).
    pub fn node(&self, tape: &mut Tape, id: ParamId) -> NodeId {
        tape.param(id.0, &self.entries[id.0].value)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Concatenates every parameter into one flat vector (canonical order).
    pub fn flatten(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.scalar_count());
        for e in &self.entries {
            data.extend_from_slice(e.value.data());
        }
        Tensor::from_vec(data)
    }

    /// Writes a flat vector produced by [`flatten`](Self::flatten) back into
    /// the individual parameters.
    pub fn unflatten(&mut self, flat: &Tensor) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value = Tensor::new(e.value.shape().to_vec(), flat.data()[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }
}

/// Xavier/Glorot normal initialization for a [rows, cols] weight matrix.
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    gaussian(rng, vec![rows, cols], std)
}

/// Gaussian tensor with the given standard deviation.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::from_parts(shape, data)
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
