//! Multilayer perceptrons over the autodiff tape.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
}

/// Dense MLP. Parameters are stored flat as `[W1, b1, (ln_gain, ln_bias,)
/// W2, b2, ...]` with weights `fan_in x fan_out` and biases `1 x fan_out`.
/// Initialization is uniform in `±sqrt(1/fan_in)`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Layer normalization on the first hidden layer's pre-activations.
    pub layer_norm_first: bool,
    pub params: Vec<Array2<f64>>,
}

/// Node ids of one insertion of the parameters into a graph.
pub struct MlpVars {
    pub ids: Vec<NodeId>,
}

impl Mlp {
    pub fn init(
        layer_sizes: &[usize],
        activation: Activation,
        layer_norm_first: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output sizes");
        let mut params = Vec::new();
        for (l, (&fin, &fout)) in layer_sizes.iter().zip(&layer_sizes[1..]).enumerate() {
            let bound = (1.0 / fin as f64).sqrt();
            params.push(Array2::from_shape_fn((fin, fout), |_| {
                rng.gen::<f64>() * 2.0 * bound - bound
            }));
            params.push(Array2::from_shape_fn((1, fout), |_| {
                rng.gen::<f64>() * 2.0 * bound - bound
            }));
            if l == 0 && layer_norm_first && layer_sizes.len() > 2 {
                params.push(Array2::ones((1, fout)));
                params.push(Array2::zeros((1, fout)));
            }
        }
        Mlp {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            layer_norm_first,
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Registers all parameters as trainable leaves.
    pub fn insert_params(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            ids: self.params.iter().map(|p| g.param(p.clone())).collect(),
        }
    }

    /// Registers all parameters as constants (no gradient), e.g. for a
    /// frozen target network inside a taped loss.
    pub fn insert_frozen(&self, g: &mut Graph) -> MlpVars {
        MlpVars {
            ids: self.params.iter().map(|p| g.constant(p.clone())).collect(),
        }
    }

    /// Taped forward pass for a batch `x` (`n x input_dim`).
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: NodeId) -> NodeId {
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = x;
        let mut k = 0;
        for l in 0..n_layers {
            let w = vars.ids[k];
            let b = vars.ids[k + 1];
            k += 2;
            let z = g.matmul(h, w);
            let mut z = g.add(z, b);
            if l == 0 && self.layer_norm_first && n_layers > 1 {
                let gain = vars.ids[k];
                let bias = vars.ids[k + 1];
                k += 2;
                z = g.layer_norm_rows(z, gain, bias);
            }
            h = if l < n_layers - 1 {
                match self.activation {
                    Activation::Relu => g.relu(z),
                    Activation::Elu => g.elu(z),
                }
            } else {
                z
            };
        }
        h
    }

    /// Tape-free forward pass (evaluation / frozen target nets).
    pub fn forward_value(&self, x: &Array2<f64>) -> Array2<f64> {
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = x.clone();
        let mut k = 0;
        for l in 0..n_layers {
            let w = &self.params[k];
            let b = &self.params[k + 1];
            k += 2;
            let mut z = h.dot(w);
            for mut row in z.rows_mut() {
                row += &b.row(0);
            }
            if l == 0 && self.layer_norm_first && n_layers > 1 {
                let gain = &self.params[k];
                let bias = &self.params[k + 1];
                k += 2;
                let d = z.ncols() as f64;
                for mut row in z.rows_mut() {
                    let mu = row.sum() / d;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
                    let inv = 1.0 / (var + 1e-8).sqrt();
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mu) * inv * gain[[0, j]] + bias[[0, j]];
                    }
                }
            }
            if l < n_layers - 1 {
                match self.activation {
                    Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                    Activation::Elu => z.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() }),
                }
            }
            h = z;
        }
        h
    }

    /// Scalar output for a single input row (1-output networks).
    pub fn eval_scalar(&self, x: &[f64]) -> f64 {
        let input = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        self.forward_value(&input)[[0, 0]]
    }

    /// Smallest absolute pre-activation over all hidden layers for a batch.
    /// Finite-difference gradient checks resample inputs when this is tiny
    /// (central differences are invalid at ReLU kinks).
    pub fn min_abs_preactivation(&self, x: &Array2<f64>) -> f64 {
        let n_layers = self.layer_sizes.len() - 1;
        let mut h = x.clone();
        let mut k = 0;
        let mut min_abs = f64::INFINITY;
        for l in 0..n_layers {
            let w = &self.params[k];
            let b = &self.params[k + 1];
            k += 2;
            let mut z = h.dot(w);
            for mut row in z.rows_mut() {
                row += &b.row(0);
            }
            if l == 0 && self.layer_norm_first && n_layers > 1 {
                k += 2;
            }
            if l < n_layers - 1 {
                for &v in z.iter() {
                    min_abs = min_abs.min(v.abs());
                }
                match self.activation {
                    Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                    Activation::Elu => z.mapv_inplace(|v| if v > 0.0 { v } else { v.exp_m1() }),
                }
            }
            h = z;
        }
        min_abs
    }

    /// Writes parameters to a flat binary blob with an architecture header.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(self.param_count() * 8 + 64);
        self.write_blob(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(b"IVNN")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[match self.activation {
            Activation::Relu => 0u8,
            Activation::Elu => 1u8,
        }])?;
        w.write_all(&[self.layer_norm_first as u8])?;
        w.write_all(&(self.layer_sizes.len() as u32).to_le_bytes())?;
        for &s in &self.layer_sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for p in &self.params {
            for &v in p.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_blob(&mut bytes.as_slice())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"IVNN" {
            return Err(Error::invalid("bad checkpoint magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(Error::invalid("unsupported checkpoint version"));
        }
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        let activation = match byte[0] {
            0 => Activation::Relu,
            1 => Activation::Elu,
            other => return Err(Error::invalid(format!("bad activation tag {other}"))),
        };
        r.read_exact(&mut byte)?;
        let layer_norm_first = byte[0] != 0;
        r.read_exact(&mut u32buf)?;
        let n_sizes = u32::from_le_bytes(u32buf) as usize;
        let mut layer_sizes = Vec::with_capacity(n_sizes);
        for _ in 0..n_sizes {
            r.read_exact(&mut u32buf)?;
            layer_sizes.push(u32::from_le_bytes(u32buf) as usize);
        }
        // Rebuild shapes, then fill values.
        let mut proto = Mlp {
            layer_sizes: layer_sizes.clone(),
            activation,
            layer_norm_first,
            params: Vec::new(),
        };
        let n_layers = layer_sizes.len() - 1;
        for (l, (&fin, &fout)) in layer_sizes.iter().zip(&layer_sizes[1..]).enumerate() {
            proto.params.push(Array2::zeros((fin, fout)));
            proto.params.push(Array2::zeros((1, fout)));
            if l == 0 && layer_norm_first && n_layers > 1 {
                proto.params.push(Array2::zeros((1, fout)));
                proto.params.push(Array2::zeros((1, fout)));
            }
        }
        let mut f64buf = [0u8; 8];
        for p in &mut proto.params {
            for v in p.iter_mut() {
                r.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(proto)
    }
}
