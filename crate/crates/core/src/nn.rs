//! Small neural-network plumbing over `candle`: a named parameter store with
//! seeded initialisation, dense layers and activations.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub(crate) const LEAK: f64 = 0.2;

/// Initialisation schemes. Draws come from one seeded stream, in parameter
/// creation order, so a model is a pure function of its config and seed.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    /// Each column of a `(rows, cols)` matrix orthonormal, via Gram-Schmidt
    /// QR of Gaussian noise. Requires `rows >= cols`.
    OrthonormalColumns,
}

/// Named trainable parameters plus a seeded generator for new ones.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &Device::Cpu
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} defined twice")));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..count).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
            Init::OrthonormalColumns => {
                let [rows, cols] = shape else {
                    return Err(Error::invalid("orthonormal init needs a matrix shape"));
                };
                orthonormal_columns(&mut self.rng, *rows, *cols)?
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.vars.get(name).map(Var::as_tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Overwrites a parameter in place; every layer holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::invalid(format!(
                "parameter {name} has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Deep copies of every parameter value.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?.detach())))
            .collect()
    }

    pub fn restore(&self, snapshot: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in snapshot {
            self.set(name, value)?;
        }
        Ok(())
    }
}

fn orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Vec<f64>> {
    if cols > rows {
        return Err(Error::invalid(format!(
            "cannot fit {cols} orthonormal columns in dimension {rows}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        // Two passes of modified Gram-Schmidt for numerical orthogonality.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in basis.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            out[i * cols + j] = x;
        }
    }
    Ok(out)
}

/// Dense layer applied over the last dimension.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(store, name, input, output, Init::Uniform { fan_in: input }, true)
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(store, name, input, output, Init::Uniform { fan_in: input }, false)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.create(&format!("{name}.weight"), &[output, input], init)?;
        let bias = if bias {
            let bias_init = match init {
                Init::Zeros => Init::Zeros,
                _ => Init::Uniform { fan_in: input },
            };
            Some(store.create(&format!("{name}.bias"), &[output], bias_init)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| Error::invalid("linear layer on a scalar"))?;
        let rows = x.elem_count() / input.max(1);
        let flat = x.reshape((rows, input))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

pub(crate) fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * LEAK)?)?)
}

/// `log(1 + e^x)` written to stay finite for large `|x|`.
pub(crate) fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

/// Numerically stable softmax over the last dimension.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-major `f32` copy of any tensor.
pub(crate) fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub(crate) fn tensor_from_f32(data: Vec<f32>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn tensor_from_f64(data: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_init_is_orthonormal() {
        let mut store = ParamStore::new(DType::F64, 3);
        let u = store.create("u", &[200, 18], Init::OrthonormalColumns).unwrap();
        let g = u.t().unwrap().matmul(&u).unwrap().to_vec2::<f64>().unwrap();
        for (i, row) in g.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
        assert!(store.create("w", &[3, 5], Init::OrthonormalColumns).is_err());
    }

    #[test]
    fn linear_matches_manual_product() {
        let mut store = ParamStore::new(DType::F64, 1);
        let lin = Linear::new(&mut store, "l", 3, 2).unwrap();
        let x = Tensor::new(&[[[1.0f64, 2.0, 3.0]]], &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2]);
        let w = store.get("l.weight").unwrap().to_vec2::<f64>().unwrap();
        let b = store.get("l.bias").unwrap().to_vec1::<f64>().unwrap();
        let y = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for o in 0..2 {
            let want = w[o][0] + 2.0 * w[o][1] + 3.0 * w[o][2] + b[o];
            assert!((y[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut s = ParamStore::new(DType::F32, 9);
            s.create("a", &[4, 4], Init::Uniform { fan_in: 4 }).unwrap();
            to_f32_vec(s.get("a").unwrap()).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn softplus_and_softmax() {
        let x = Tensor::new(&[-50.0f64, 0.0, 50.0], &Device::Cpu).unwrap();
        let sp = softplus(&x).unwrap().to_vec1::<f64>().unwrap();
        assert!((sp[1] - 2f64.ln()).abs() < 1e-12 && (sp[2] - 50.0).abs() < 1e-12 && (0.0..1e-20).contains(&sp[0]));
        let sm = softmax_last(&Tensor::new(&[[1.0f64, 2.0, 3.0]], &Device::Cpu).unwrap()).unwrap();
        let s: f64 = sm.to_vec2::<f64>().unwrap()[0].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn set_updates_shared_tensors() {
        let mut store = ParamStore::new(DType::F32, 0);
        let t = store.create("p", &[2], Init::Zeros).unwrap();
        store.set("p", &Tensor::new(&[1.0f32, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.to_vec1::<f32>().unwrap(), vec![1.0, 2.0]);
        assert!(store.set("p", &Tensor::new(&[1.0f32], &Device::Cpu).unwrap()).is_err());
    }
}
