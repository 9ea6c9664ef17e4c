use candle_core::{DType, Device, Tensor, Var};
use candle_nn::VarMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;

/// Creates named trainable variables from a seeded generator.
///
/// Weights use the usual fan-in uniform bound `1/sqrt(fan_in)` for both
/// kernels and biases; PReLU slopes start at 0.25.
pub struct ParamStore {
    varmap: VarMap,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device,
        }
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor, ModelError> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_vec(values, shape, &self.device)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor, ModelError> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_vec(vec![value; n], shape, &self.device)?)
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor, ModelError> {
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let tensor = var.as_tensor().clone();
        let mut data = self.varmap.data().lock().expect("varmap lock poisoned");
        if data.insert(name.to_string(), var).is_some() {
            return Err(ModelError::InvalidSpec(format!("duplicate parameter {name}")));
        }
        Ok(tensor)
    }
}
