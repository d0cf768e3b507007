//! Model checkpoints: architecture header, every named parameter, the part
//! centers and the run configuration that produced them.
//!
//! Layout: magic `WSBC`, format version `u32`, architecture header, config
//! text, parameter count `u32` followed by `(name, WSBT tensor)` pairs, and
//! finally the center bank (`β` as `f64`, then a WSBT tensor).

use std::fs;
use std::path::Path;

use crate::attention::CenterBank;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, WsBanModel};
use crate::nn::PoolMode;
use crate::tensor::Tensor;
use crate::wire::{ByteReader, ByteWriter};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WSBC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: WsBanModel<f32>,
    pub centers: CenterBank<f32>,
    /// Effective configuration, as echoed by the run that wrote it.
    pub config_text: String,
}

fn write_arch(w: &mut ByteWriter, c: &ModelConfig) {
    w.u32(c.classes as u32);
    w.u32(c.parts as u32);
    w.u32(c.features() as u32);
    w.u32(c.input_size as u32);
    w.u8(c.attention_pooling as u8);
    w.u8(match c.pool {
        PoolMode::Gap => 0,
        PoolMode::Gmp => 1,
    });
    w.f64(c.logit_scale);
    w.u32(c.channels.len() as u32);
    for &ch in &c.channels {
        w.u32(ch as u32);
    }
}

fn read_arch(r: &mut ByteReader<'_>) -> Result<ModelConfig> {
    let start = r.offset();
    let classes = r.u32()? as usize;
    let parts = r.u32()? as usize;
    let features = r.u32()? as usize;
    let input_size = r.u32()? as usize;
    let attention_pooling = r.u8()? != 0;
    let at = r.offset();
    let pool = match r.u8()? {
        0 => PoolMode::Gap,
        1 => PoolMode::Gmp,
        code => {
            return Err(Error::Format {
                offset: at,
                message: format!("unknown pooling code {code}"),
            })
        }
    };
    let logit_scale = r.f64()?;
    let layers = r.u32()? as usize;
    if layers > 64 {
        return Err(Error::Format {
            offset: r.offset() - 4,
            message: format!("implausible layer count {layers}"),
        });
    }
    let channels = (0..layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        classes,
        parts,
        input_size,
        channels,
        attention_pooling,
        pool,
        logit_scale,
    };
    if config.features() != features || config.validate().is_err() {
        return Err(Error::Format {
            offset: start,
            message: format!("inconsistent architecture header {config:?}"),
        });
    }
    Ok(config)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        write_arch(&mut w, self.model.config());
        w.str(&self.config_text);
        let params = self.model.named_params();
        w.u32(params.len() as u32);
        for (name, t) in params {
            w.str(&name);
            t.write_wsbt(&mut w);
        }
        self.centers.write(&mut w);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::IncompatibleCheckpoint(format!(
                "format version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let config = read_arch(&mut r)?;
        let config_text = r.str()?;
        let mut model = WsBanModel::<f32>::new(config.clone(), 0)?;
        let expected: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Format {
                offset: r.offset() - 4,
                message: format!("{count} parameters, architecture needs {}", expected.len()),
            });
        }
        for name in &expected {
            let at = r.offset();
            let got = r.str()?;
            if &got != name {
                return Err(Error::Format {
                    offset: at,
                    message: format!("parameter {got:?} where {name:?} was expected"),
                });
            }
            let at = r.offset();
            let t: Tensor<f32> = Tensor::read_wsbt(&mut r)?;
            model.set_param(name, t).map_err(|e| Error::Format {
                offset: at,
                message: e.to_string(),
            })?;
        }
        let at = r.offset();
        let centers = CenterBank::read(&mut r)?;
        if centers.dims() != (config.classes, config.part_rows(), config.features()) {
            return Err(Error::Format {
                offset: at,
                message: format!("center bank dims {:?} do not match the architecture", centers.dims()),
            });
        }
        if !r.is_at_end() {
            return Err(Error::Format {
                offset: r.offset(),
                message: "trailing bytes after center bank".into(),
            });
        }
        Ok(Self {
            model,
            centers,
            config_text,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails with a readable message unless the stored architecture equals
    /// `expected`.
    pub fn check_architecture(&self, expected: &ModelConfig) -> Result<()> {
        let got = self.model.config();
        if got != expected {
            return Err(Error::IncompatibleCheckpoint(format!(
                "architecture {got:?} does not match the requested {expected:?}"
            )));
        }
        Ok(())
    }
}
