//! Checkpoint layout: one JSON header line
//! `{"magic":"CMCM","version":1,<model config fields>,"tensors":[{"name","len"}..],..}`
//! followed by every tensor as little-endian f64, in header order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "CMCM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub magic: String,
    pub version: u32,
    #[serde(flatten)]
    pub config: ModelConfig,
    pub tensors: Vec<TensorInfo>,
    /// Id-ordered vocabulary the model was trained with.
    #[serde(default)]
    pub vocab: Vec<String>,
    /// Effective run configuration, echoed for provenance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: Vec<String>,
    pub run: Option<Value>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        let tensors = self.params.tensors();
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config: self.params.config,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorInfo {
                    name: name.clone(),
                    len: t.len(),
                })
                .collect(),
            vocab: self.vocab.clone(),
            run: self.run.clone(),
        };
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n")?;
        for (_, t) in tensors {
            for v in t {
                writer.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
        if header.magic != CHECKPOINT_MAGIC || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unexpected checkpoint header {}/{}",
                header.magic, header.version
            )));
        }
        let mut params = ModelParams::zeros(header.config);
        {
            let slots = params.tensors_mut();
            if slots.len() != header.tensors.len() {
                return Err(Error::Format("tensor count mismatch".into()));
            }
            let mut buf = [0u8; 8];
            for ((name, slot), info) in slots.into_iter().zip(&header.tensors) {
                if name != info.name || slot.len() != info.len {
                    return Err(Error::Format(format!("tensor `{}` does not match", info.name)));
                }
                for v in slot.iter_mut() {
                    reader.read_exact(&mut buf)?;
                    *v = f64::from_le_bytes(buf);
                }
            }
        }
        Ok(Self {
            params,
            vocab: header.vocab,
            run: header.run,
        })
    }
}
