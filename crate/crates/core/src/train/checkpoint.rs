//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian, strings as u32 length + UTF-8 bytes, every
//! tensor as a complete tensor-file record, see [`crate::data::io`]):
//!
//! ```text
//! "SFFC" | u16 version = 1 | string run config (TOML)
//! u64 epochs completed | f64 best eval mIoU (NaN before the first evaluation)
//! u32 P | P x (string name, tensor)          trainable parameters
//! u32 B | B x (string name, tensor)          normalization buffers
//! u8 has_optimizer | [u64 step | P x (tensor m, tensor v)]
//! ```

use std::path::Path;

use crate::config::RunConfig;
use crate::data::io::{put_string, ByteReader, DType, TensorFile};
use crate::error::{Error, Result};
use crate::model::Sffnet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::optim::{AdamW, OptimState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SFFC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epochs: usize,
    pub best_miou: f64,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    /// Optimizer step count and moment buffers, in parameter order.
    pub optim: Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, store: &ParamStore, optim: Option<&OptimState>, epochs: usize, best_miou: f64) -> Self {
        Self {
            config: config.clone(),
            epochs,
            best_miou,
            params: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.tensor.clone().with_requires_grad(false)))
                .collect(),
            buffers: store.buffers().iter().map(|b| (b.name.clone(), b.tensor.clone())).collect(),
            optim: optim.map(|o| (o.step, o.m.clone(), o.v.clone())),
        }
    }

    /// Trainable scalars stored in the file.
    pub fn num_param_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuilds the network and copies every stored tensor into it by name.
    pub fn restore(&self) -> Result<(Sffnet, ParamStore, Option<OptimState>)> {
        let (net, mut store) = Sffnet::build(&self.config.model, self.config.train.seed)?;
        if store.params().len() != self.params.len() || store.buffers().len() != self.buffers.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} parameters / {} buffers, the configured model has {} / {}",
                self.params.len(),
                self.buffers.len(),
                store.params().len(),
                store.buffers().len()
            )));
        }
        for (name, t) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Config(format!("checkpoint parameter {name} not in model")))?;
            let slot = &mut store.params_mut()[id.index()].tensor;
            copy_into(name, slot, t)?;
        }
        for (name, t) in &self.buffers {
            let idx = store
                .buffers()
                .iter()
                .position(|b| &b.name == name)
                .ok_or_else(|| Error::Config(format!("checkpoint buffer {name} not in model")))?;
            copy_into(name, &mut store.buffers_mut()[idx].tensor, t)?;
        }
        let optim = match &self.optim {
            None => None,
            Some((step, m, v)) => {
                let mut st = OptimState::new(AdamW::from_config(&self.config.train), &store);
                // Moments are stored in checkpoint parameter order; map them by name.
                for (k, (name, _)) in self.params.iter().enumerate() {
                    let i = store.find(name).expect("checked above").index();
                    if m[k].len() != st.m[i].len() || v[k].len() != st.v[i].len() {
                        return Err(Error::Config(format!("optimizer moments for {name} have the wrong size")));
                    }
                    st.m[i].clone_from(&m[k]);
                    st.v[i].clone_from(&v[k]);
                }
                st.step = *step;
                Some(st)
            }
        };
        Ok((net, store, optim))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_string(&mut out, &self.config.to_toml());
        out.extend_from_slice(&(self.epochs as u64).to_le_bytes());
        out.extend_from_slice(&self.best_miou.to_le_bytes());
        for group in [&self.params, &self.buffers] {
            out.extend_from_slice(&(group.len() as u32).to_le_bytes());
            for (name, t) in group {
                put_string(&mut out, name);
                TensorFile::from_tensor(t, DType::F64).encode_into(&mut out)?;
            }
        }
        match &self.optim {
            None => out.push(0),
            Some((step, m, v)) => {
                out.push(1);
                out.extend_from_slice(&step.to_le_bytes());
                for (mk, vk) in m.iter().zip(v) {
                    for buf in [mk, vk] {
                        let tf = TensorFile {
                            dtype: DType::F64,
                            shape: vec![buf.len()],
                            data: buf.clone(),
                        };
                        tf.encode_into(&mut out)?;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                detail: format!("bad magic {magic:02x?}, expected \"SFFC\""),
            });
        }
        let at = r.pos();
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                offset: at,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let config = RunConfig::from_toml(&r.string("config")?)?;
        let epochs = r.u64("epochs")? as usize;
        let best_miou = r.f64("best mIoU")?;
        let mut groups = Vec::with_capacity(2);
        for what in ["parameter count", "buffer count"] {
            let n = r.u32(what)? as usize;
            let mut g = Vec::with_capacity(n.min(1 << 16));
            for _ in 0..n {
                let name = r.string("tensor name")?;
                let t = TensorFile::decode_from(&mut r)?.to_tensor()?;
                g.push((name, t));
            }
            groups.push(g);
        }
        let buffers = groups.pop().expect("two groups");
        let params = groups.pop().expect("two groups");
        let at = r.pos();
        let optim = match r.u8("optimizer flag")? {
            0 => None,
            1 => {
                let step = r.u64("optimizer step")?;
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..params.len() {
                    m.push(TensorFile::decode_from(&mut r)?.data);
                    v.push(TensorFile::decode_from(&mut r)?.data);
                }
                Some((step, m, v))
            }
            f => {
                return Err(Error::Parse {
                    offset: at,
                    detail: format!("optimizer flag {f}"),
                })
            }
        };
        if r.remaining() != 0 {
            return Err(Error::Parse {
                offset: r.pos(),
                detail: format!("{} trailing bytes", r.remaining()),
            });
        }
        Ok(Self {
            config,
            epochs,
            best_miou,
            params,
            buffers,
            optim,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Writes through a temporary sibling so a crash never leaves a partial file.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn copy_into(name: &str, slot: &mut Tensor, src: &Tensor) -> Result<()> {
    if slot.numel() != src.numel() {
        return Err(Error::Config(format!(
            "{name}: checkpoint dims {:?}, model dims {:?}",
            src.dims(),
            slot.dims()
        )));
    }
    slot.data_mut().copy_from_slice(src.data());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small() -> RunConfig {
        RunConfig {
            model: ModelConfig::micro(),
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_restores_everything() {
        let cfg = small();
        let (_, mut store) = Sffnet::build(&cfg.model, 3).unwrap();
        store.params_mut()[0].tensor.data_mut()[0] = 42.0;
        let mut st = OptimState::new(AdamW::from_config(&cfg.train), &store);
        st.step = 17;
        st.m[2][0] = 0.5;
        st.v[3][1] = 0.25;
        let ck = Checkpoint::capture(&cfg, &store, Some(&st), 5, 0.75);
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), bytes);

        let (_, restored, opt) = back.restore().unwrap();
        for (a, b) in restored.params().iter().zip(store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        assert_eq!(opt.unwrap(), st);
        assert_eq!(ck.num_param_scalars(), store.num_scalars());
    }

    #[test]
    fn corrupt_files_are_parse_errors() {
        let cfg = small();
        let (_, store) = Sffnet::build(&cfg.model, 0).unwrap();
        let bytes = Checkpoint::capture(&cfg, &store, None, 0, f64::NAN).encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Parse { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(1);
        assert!(matches!(Checkpoint::decode(&extra), Err(Error::Parse { .. })));
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = small();
        let (_, store) = Sffnet::build(&cfg.model, 0).unwrap();
        let mut ck = Checkpoint::capture(&cfg, &store, None, 0, 0.0);
        ck.config.model.mapped_channels = 8;
        assert!(matches!(ck.restore(), Err(Error::Config(_))));
    }
}
