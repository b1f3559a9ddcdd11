//! Schema-versioned model persistence: an architecture descriptor plus flat
//! float arrays per tensor, with the training config and seed echoed for
//! provenance.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralnet::fnn::Fnn;
use crate::neuralnet::proxnet::{ProxBlock, ProxLinearNet};
use crate::neuralnet::{Activation, NetModel, TrainConfig};

pub const CKPT_SCHEMA: &str = "ckpt/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ArchDescriptor {
    ProxNet {
        m: usize,
        state_dim: usize,
        blocks: usize,
        layers_per_block: usize,
        activations: Vec<Activation>,
    },
    Fnn {
        dims: Vec<usize>,
        activation: Activation,
    },
    Rnn {
        input_dim: usize,
        widths: Vec<usize>,
        window: usize,
        activation: Activation,
    },
    Var1 {
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn from_array(name: impl Into<String>, a: &Array2<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::CorruptFile(format!(
                "tensor {}: {} values for {}x{}",
                self.name,
                self.data.len(),
                self.rows,
                self.cols
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: String,
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema != CKPT_SCHEMA {
            return Err(Error::SchemaMismatch {
                expected: CKPT_SCHEMA.into(),
                found: ckpt.schema,
            });
        }
        Ok(ckpt)
    }

    pub fn from_proxnet(net: &ProxLinearNet, seed: u64, cfg: Option<TrainConfig>) -> Checkpoint {
        let mut tensors = Vec::new();
        for (bi, block) in net.blocks.iter().enumerate() {
            tensors.push(NamedTensor::from_array(format!("block{bi}.a"), &block.a));
            for (li, (w, b)) in block.layers.iter().enumerate() {
                tensors.push(NamedTensor::from_array(format!("block{bi}.w{li}"), w));
                tensors.push(NamedTensor::from_array(format!("block{bi}.b{li}"), b));
            }
        }
        tensors.push(NamedTensor::from_array("out_u", &net.out_u));
        tensors.push(NamedTensor::from_array("out_z", &net.out_z));
        tensors.push(NamedTensor::from_array("out_bias", &net.out_bias));
        Checkpoint {
            schema: CKPT_SCHEMA.into(),
            arch: ArchDescriptor::ProxNet {
                m: net.m,
                state_dim: net.state_dim,
                blocks: net.blocks.len(),
                layers_per_block: net.blocks.first().map_or(0, |b| b.layers.len()),
                activations: net.blocks.iter().map(|b| b.activation).collect(),
            },
            seed,
            train_config: cfg,
            tensors,
        }
    }

    pub fn to_proxnet(&self) -> Result<ProxLinearNet> {
        let ArchDescriptor::ProxNet {
            m,
            state_dim,
            blocks,
            layers_per_block,
            ref activations,
        } = self.arch
        else {
            return Err(Error::SchemaMismatch {
                expected: "ProxNet arch".into(),
                found: format!("{:?}", self.arch),
            });
        };
        let want = blocks * (1 + 2 * layers_per_block) + 3;
        if self.tensors.len() != want || activations.len() != blocks {
            return Err(Error::CorruptFile(format!(
                "expected {want} tensors and {blocks} activations"
            )));
        }
        let mut it = self.tensors.iter();
        let mut net_blocks = Vec::with_capacity(blocks);
        for activation in activations {
            let a = it.next().unwrap().to_array()?;
            let mut layers = Vec::with_capacity(layers_per_block);
            for _ in 0..layers_per_block {
                let w = it.next().unwrap().to_array()?;
                let b = it.next().unwrap().to_array()?;
                layers.push((w, b));
            }
            net_blocks.push(ProxBlock {
                a,
                layers,
                activation: *activation,
            });
        }
        let out_u = it.next().unwrap().to_array()?;
        let out_z = it.next().unwrap().to_array()?;
        let out_bias = it.next().unwrap().to_array()?;
        Ok(ProxLinearNet {
            m,
            state_dim,
            blocks: net_blocks,
            out_u,
            out_z,
            out_bias,
        })
    }

    pub fn from_rnn(
        net: &crate::forecaster::RnnForecaster,
        seed: u64,
        cfg: Option<TrainConfig>,
    ) -> Checkpoint {
        let mut tensors = Vec::new();
        for l in 0..net.layer_count() {
            tensors.push(NamedTensor::from_array(format!("layer{l}.w_in"), &net.w_in[l]));
            tensors.push(NamedTensor::from_array(format!("layer{l}.w_rec"), &net.w_rec[l]));
            tensors.push(NamedTensor::from_array(format!("layer{l}.bias"), &net.bias[l]));
        }
        tensors.push(NamedTensor::from_array("w_out", &net.w_out));
        tensors.push(NamedTensor::from_array("b_out", &net.b_out));
        Checkpoint {
            schema: CKPT_SCHEMA.into(),
            arch: ArchDescriptor::Rnn {
                input_dim: net.input_dim,
                widths: net.widths.clone(),
                window: net.window,
                activation: net.activation,
            },
            seed,
            train_config: cfg,
            tensors,
        }
    }

    pub fn to_rnn(&self) -> Result<crate::forecaster::RnnForecaster> {
        let ArchDescriptor::Rnn {
            input_dim,
            ref widths,
            window,
            activation,
        } = self.arch
        else {
            return Err(Error::SchemaMismatch {
                expected: "Rnn arch".into(),
                found: format!("{:?}", self.arch),
            });
        };
        if self.tensors.len() != 3 * widths.len() + 2 {
            return Err(Error::CorruptFile("tensor count mismatch".into()));
        }
        let mut it = self.tensors.iter();
        let mut w_in = Vec::new();
        let mut w_rec = Vec::new();
        let mut bias = Vec::new();
        for _ in 0..widths.len() {
            w_in.push(it.next().unwrap().to_array()?);
            w_rec.push(it.next().unwrap().to_array()?);
            bias.push(it.next().unwrap().to_array()?);
        }
        Ok(crate::forecaster::RnnForecaster {
            input_dim,
            widths: widths.clone(),
            window,
            w_in,
            w_rec,
            bias,
            w_out: it.next().unwrap().to_array()?,
            b_out: it.next().unwrap().to_array()?,
            activation,
        })
    }

    pub fn from_var(params: &crate::forecaster::VarParams, seed: u64) -> Checkpoint {
        let dim = params.c.len();
        let mut c_col = Array2::zeros((dim, 1));
        c_col.column_mut(0).assign(&params.c);
        Checkpoint {
            schema: CKPT_SCHEMA.into(),
            arch: ArchDescriptor::Var1 { dim },
            seed,
            train_config: None,
            tensors: vec![
                NamedTensor::from_array("a", &params.a),
                NamedTensor::from_array("c", &c_col),
            ],
        }
    }

    pub fn to_var(&self) -> Result<crate::forecaster::VarParams> {
        let ArchDescriptor::Var1 { dim } = self.arch else {
            return Err(Error::SchemaMismatch {
                expected: "Var1 arch".into(),
                found: format!("{:?}", self.arch),
            });
        };
        if self.tensors.len() != 2 {
            return Err(Error::CorruptFile("tensor count mismatch".into()));
        }
        let a = self.tensors[0].to_array()?;
        let c_col = self.tensors[1].to_array()?;
        if a.dim() != (dim, dim) || c_col.dim() != (dim, 1) {
            return Err(Error::CorruptFile("tensor shape mismatch".into()));
        }
        Ok(crate::forecaster::VarParams {
            a,
            c: c_col.column(0).to_owned(),
        })
    }

    pub fn from_fnn(net: &Fnn, seed: u64, cfg: Option<TrainConfig>) -> Checkpoint {
        let mut dims = vec![net.input_dim()];
        for (w, _) in &net.layers {
            dims.push(w.nrows());
        }
        let mut tensors = Vec::new();
        for (li, (w, b)) in net.layers.iter().enumerate() {
            tensors.push(NamedTensor::from_array(format!("layer{li}.w"), w));
            tensors.push(NamedTensor::from_array(format!("layer{li}.b"), b));
        }
        Checkpoint {
            schema: CKPT_SCHEMA.into(),
            arch: ArchDescriptor::Fnn {
                dims,
                activation: net.activation,
            },
            seed,
            train_config: cfg,
            tensors,
        }
    }

    pub fn to_fnn(&self) -> Result<Fnn> {
        let ArchDescriptor::Fnn { ref dims, activation } = self.arch else {
            return Err(Error::SchemaMismatch {
                expected: "Fnn arch".into(),
                found: format!("{:?}", self.arch),
            });
        };
        if self.tensors.len() != 2 * (dims.len() - 1) {
            return Err(Error::CorruptFile("tensor count mismatch".into()));
        }
        let mut layers = Vec::new();
        let mut it = self.tensors.iter();
        for _ in 0..dims.len() - 1 {
            let w = it.next().unwrap().to_array()?;
            let b = it.next().unwrap().to_array()?;
            layers.push((w, b));
        }
        Ok(Fnn { layers, activation })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Loss;
    use ndarray::Array1;

    #[test]
    fn proxnet_round_trip_is_exact() {
        let net = ProxLinearNet::random(5, 4, 2, 3, Activation::SoftThreshold(0.2), 3);
        let dir = std::env::temp_dir().join("psse_ckpt_test_proxnet");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        let cfg = TrainConfig {
            loss: Loss::Huber(0.9),
            ..Default::default()
        };
        Checkpoint::from_proxnet(&net, 42, Some(cfg))
            .save(&path)
            .unwrap();
        let back = Checkpoint::load(&path).unwrap().to_proxnet().unwrap();
        for (a, b) in net.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(a, b, "tensors must round-trip bit-exactly");
        }
        let z = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.4, -0.5]);
        assert_eq!(net.forward_one(&z), back.forward_one(&z));
    }

    #[test]
    fn fnn_round_trip_is_exact() {
        let net = Fnn::random(&[4, 6, 3], Activation::Relu, 9);
        let dir = std::env::temp_dir().join("psse_ckpt_test_fnn");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        Checkpoint::from_fnn(&net, 1, None).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_fnn().unwrap();
        for (a, b) in net.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rnn_and_var_round_trips_are_exact() {
        let dir = std::env::temp_dir().join("psse_ckpt_test_rnn");
        std::fs::create_dir_all(&dir).unwrap();
        let rnn =
            crate::forecaster::RnnForecaster::random(4, &[5, 4], 3, Activation::Relu, 12);
        let path = dir.join("rnn.json");
        Checkpoint::from_rnn(&rnn, 7, None).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_rnn().unwrap();
        for (a, b) in rnn.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(a, b);
        }

        let var = crate::forecaster::VarParams {
            a: Array2::from_shape_fn((3, 3), |(i, j)| (i * 3 + j) as f64 * 0.1),
            c: ndarray::Array1::from_vec(vec![0.5, -0.25, 0.125]),
        };
        let path = dir.join("var.json");
        Checkpoint::from_var(&var, 1).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_var().unwrap();
        assert_eq!(var, back);
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let net = Fnn::random(&[3, 2], Activation::Relu, 1);
        let dir = std::env::temp_dir().join("psse_ckpt_test_schema");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.json");
        let mut ckpt = Checkpoint::from_fnn(&net, 1, None);
        ckpt.schema = "ckpt/0".into();
        std::fs::write(&path, serde_json::to_string(&ckpt).unwrap()).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(Error::SchemaMismatch { .. })
        ));
    }

    #[test]
    fn wrong_arch_conversion_fails() {
        let net = Fnn::random(&[3, 2], Activation::Relu, 1);
        let ckpt = Checkpoint::from_fnn(&net, 1, None);
        assert!(ckpt.to_proxnet().is_err());
    }
}
