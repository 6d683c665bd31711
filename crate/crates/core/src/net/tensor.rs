use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Volume3};

/// Multi-channel 3D activation, channels-last: `data[voxel * c + channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Dims,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: Dims, c: usize) -> Self {
        Self {
            dims,
            c,
            data: vec![0.0; voxel_count(dims) * c],
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn from_volume(v: &Volume3) -> Self {
        Self {
            dims: v.dims(),
            c: 1,
            data: v.data().to_vec(),
        }
    }

    /// Interleaves equally shaped volumes as channels.
    pub fn stack(vols: &[&Volume3]) -> Result<Self> {
        let first = vols
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack needs at least one volume".into()))?;
        let dims = first.dims();
        for v in vols {
            first.ensure_same_dims(v, "channel stack")?;
        }
        let c = vols.len();
        let mut data = vec![0.0; voxel_count(dims) * c];
        for (ch, v) in vols.iter().enumerate() {
            for (i, &x) in v.data().iter().enumerate() {
                data[i * c + ch] = x;
            }
        }
        Ok(Self { dims, c, data })
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.c).copied().collect()
    }

    /// Single-channel tensor as a volume (unit spacing).
    pub fn to_volume(&self) -> Result<Volume3> {
        if self.c != 1 {
            return Err(Error::DimMismatch(format!(
                "expected a single-channel tensor, got {} channels",
                self.c
            )));
        }
        Volume3::new(self.dims, [1.0; 3], self.data.clone())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
