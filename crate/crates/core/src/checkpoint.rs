//! Self-contained model files.
//!
//! Layout (little endian):
//!
//! ```text
//! b"DARGCKP\0"  magic
//! u32           version
//! u64           metadata length L
//! [u8; L]       JSON metadata: config, schema, preprocessor, casebase, split
//! ...           network parameters in the heads codec format
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, Preprocessor, SplitInfo};
use crate::error::{Error, Result};
use crate::heads::codec;
use crate::qbaf::{make_targets, FullCasebase};
use crate::train::{TrainConfig, TrainedModel};

const MAGIC: &[u8; 8] = b"DARGCKP\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub trained: TrainedModel,
    pub schema: DatasetSchema,
    pub preprocessor: Preprocessor,
    pub split: SplitInfo,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: TrainConfig,
    schema: DatasetSchema,
    preprocessor: Preprocessor,
    casebase: FullCasebase,
    split: SplitInfo,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Metadata {
            config: self.trained.config.clone(),
            schema: self.schema.clone(),
            preprocessor: self.preprocessor.clone(),
            casebase: self.trained.casebase.clone(),
            split: self.split.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serialises");
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&codec::encode(&self.trained.model));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 12;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(header..header.saturating_add(len)).ok_or_else(|| Error::Format("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let (model, used) = codec::decode(&bytes[header + len..])?;
        if header + len + used != bytes.len() {
            return Err(Error::Format("trailing bytes after model parameters".into()));
        }

        let casebase = meta.casebase;
        if casebase.targets() != make_targets(casebase.cases(), casebase.num_classes())?.as_slice() {
            return Err(Error::Format("stored targets do not match the casebase".into()));
        }
        if casebase.width() != model.input_width() || meta.preprocessor.output_width() != model.input_width() {
            return Err(Error::Format("casebase, preprocessor and model widths disagree".into()));
        }
        if meta.schema.num_classes() != casebase.num_classes() {
            return Err(Error::Format("schema vocabulary and casebase disagree on the class count".into()));
        }
        Ok(Self {
            trained: TrainedModel { model, casebase, config: meta.config },
            schema: meta.schema,
            preprocessor: meta.preprocessor,
            split: meta.split,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
