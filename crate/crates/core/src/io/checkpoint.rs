//! Model checkpoints stored as tensor archives.
//!
//! Every parameter is saved under its [`TinyGPTModel::named_params`] name.
//! Factored tensors appear as `<name>.a` / `<name>.b` in place of
//! `<name>.weight` (or `wte`). The configuration travels in a rank-1 tensor
//! named `meta.config`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::archive::{ArchiveError, Tensor, TensorArchive};
use crate::kronecker::KroneckerPair;
use crate::layers::{DenseLinear, KroneckerEmbedding, KroneckerLinear, Linear, Role};
use crate::model::{linear_name, Block, GPTConfig, LayerNormParams, TinyGPTModel, TokenEmbedding};
use crate::tensor::Matrix;

pub const CONFIG_TENSOR: &str = "meta.config";

fn config_tensor(c: &GPTConfig) -> Tensor {
    Tensor::vector(
        CONFIG_TENSOR,
        vec![
            c.n_layers as f64,
            c.n_heads as f64,
            c.d_model as f64,
            c.d_ff as f64,
            c.vocab as f64,
            c.max_seq_len as f64,
            (c.seed >> 32) as f64,
            (c.seed & 0xffff_ffff) as f64,
            c.ln_eps,
            c.init_std,
        ],
    )
}

fn parse_config(t: &Tensor) -> Result<GPTConfig> {
    let v = &t.data;
    if v.len() != 10 {
        return Err(Error::Config(format!(
            "{CONFIG_TENSOR} holds {} values, expected 10",
            v.len()
        )));
    }
    let int = |x: f64| -> Result<usize> {
        if x >= 0.0 && x.fract() == 0.0 && x <= u32::MAX as f64 {
            Ok(x as usize)
        } else {
            Err(Error::Config(format!(
                "{CONFIG_TENSOR}: {x} is not a valid integer field"
            )))
        }
    };
    let c = GPTConfig {
        n_layers: int(v[0])?,
        n_heads: int(v[1])?,
        d_model: int(v[2])?,
        d_ff: int(v[3])?,
        vocab: int(v[4])?,
        max_seq_len: int(v[5])?,
        seed: ((int(v[6])? as u64) << 32) | int(v[7])? as u64,
        ln_eps: v[8],
        init_std: v[9],
    };
    c.validate()?;
    Ok(c)
}

pub fn to_archive(model: &TinyGPTModel) -> TensorArchive {
    let mut a = TensorArchive::new();
    a.push(config_tensor(&model.config)).expect("fresh archive");
    for (name, m) in model.named_params() {
        a.push_matrix(name, m).expect("parameter names are unique");
    }
    a
}

struct Reader<'a> {
    archive: &'a TensorArchive,
}

impl Reader<'_> {
    fn has(&self, name: &str) -> bool {
        self.archive.get(name).is_some()
    }

    fn matrix(&self, name: &str, shape: Option<(usize, usize)>) -> Result<Matrix> {
        let m = self.archive.matrix(name)?;
        if let Some(s) = shape {
            if m.shape() != s {
                return Err(ArchiveError::ShapeMismatch {
                    tensor: name.to_string(),
                    expected: vec![s.0, s.1],
                    got: vec![m.rows(), m.cols()],
                }
                .into());
            }
        }
        Ok(m)
    }

    fn layernorm(&self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.matrix(&format!("{prefix}.gain"), Some((1, d)))?,
            bias: self.matrix(&format!("{prefix}.bias"), Some((1, d)))?,
        })
    }

    fn linear(&self, name: &str, out: usize, inp: usize) -> Result<Linear> {
        let bias_name = format!("{name}.bias");
        let bias = if self.has(&bias_name) {
            Some(self.matrix(&bias_name, Some((1, out)))?)
        } else {
            None
        };
        let weight_name = format!("{name}.weight");
        if self.has(&weight_name) {
            let w = self.matrix(&weight_name, Some((out, inp)))?;
            return Ok(Linear::Dense(DenseLinear::new(w, bias)?));
        }
        let a = self.matrix(&format!("{name}.a"), None)?;
        let b = self.matrix(&format!("{name}.b"), None)?;
        let pair = KroneckerPair::new(a, b);
        if pair.shape() != (out, inp) {
            return Err(Error::Shape {
                op: "factored layer",
                lhs: (out, inp),
                rhs: pair.shape(),
            }
            .in_tensor(name));
        }
        Ok(Linear::Kronecker(KroneckerLinear::new(pair, bias)?))
    }
}

pub fn from_archive(archive: &TensorArchive) -> Result<TinyGPTModel> {
    let config = parse_config(archive.require(CONFIG_TENSOR)?)?;
    let r = Reader { archive };
    let (v, d) = (config.vocab, config.d_model);
    let wte = if r.has("wte") {
        TokenEmbedding::Dense(r.matrix("wte", Some((v, d)))?)
    } else {
        let e = KroneckerEmbedding::new(r.matrix("wte.a", None)?, r.matrix("wte.b", None)?)
            .map_err(|e| e.in_tensor("wte"))?;
        if (e.vocab(), e.dim()) != (v, d) {
            return Err(Error::Shape {
                op: "factored embedding",
                lhs: (v, d),
                rhs: (e.vocab(), e.dim()),
            }
            .in_tensor("wte"));
        }
        TokenEmbedding::Kronecker(e)
    };
    let wpe = r.matrix("wpe", Some((config.max_seq_len, d)))?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let lin = |role: Role| {
            let (o, n) = config.role_dims(role);
            r.linear(&linear_name(i, role), o, n)
        };
        blocks.push(Block {
            ln1: r.layernorm(&format!("blocks.{i}.ln1"), d)?,
            q: lin(Role::Query)?,
            k: lin(Role::Key)?,
            v: lin(Role::Value)?,
            o: lin(Role::AttnOut)?,
            ln2: r.layernorm(&format!("blocks.{i}.ln2"), d)?,
            fc: lin(Role::FcIn)?,
            proj: lin(Role::FcOut)?,
        });
    }
    let ln_f = r.layernorm("ln_f", d)?;
    let lm_head = DenseLinear::new(r.matrix("lm_head.weight", Some((v, d)))?, None)?;
    let model = TinyGPTModel {
        config,
        wte,
        wpe,
        blocks,
        ln_f,
        lm_head,
    };
    let expected = model.named_params().len() + 1;
    if archive.len() != expected {
        let known: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let extra = archive
            .names()
            .find(|n| *n != CONFIG_TENSOR && !known.iter().any(|k| k == n))
            .unwrap_or("?");
        return Err(Error::Config(format!(
            "unexpected tensor {extra} in checkpoint"
        )));
    }
    Ok(model)
}

pub fn save_model(model: &TinyGPTModel, path: impl AsRef<Path>) -> Result<()> {
    to_archive(model).save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<TinyGPTModel> {
    from_archive(&TensorArchive::load(path)?)
}
