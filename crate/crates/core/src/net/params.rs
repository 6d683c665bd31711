use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A named, shaped region of a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Layout of a network's flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    slices: Vec<ParamSlice>,
    len: usize,
}

impl ParamLayout {
    /// Appends a slice and returns its offset.
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let offset = self.len;
        let slice = ParamSlice {
            name: name.into(),
            offset,
            shape,
        };
        self.len += slice.len();
        self.slices.push(slice);
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn get(&self, name: &str) -> Option<&ParamSlice> {
        self.slices.iter().find(|s| s.name == name)
    }
}

pub(crate) fn fill_normal<R: Rng>(rng: &mut R, out: &mut [f64], std: f64) {
    for v in out {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * std;
    }
}
