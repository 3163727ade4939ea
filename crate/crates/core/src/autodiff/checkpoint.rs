//! Parameter checkpoint files.
//!
//! A checkpoint is a UTF-8 JSON document:
//!
//! ```json
//! {
//!   "format": "nma-checkpoint",
//!   "version": 1,
//!   "params": [
//!     { "name": "clpm.list.0.w", "shape": [34, 32], "values": [ ... ] }
//!   ]
//! }
//! ```
//!
//! `values` are row-major and written with shortest round-trip formatting, so
//! save followed by load reproduces every `f64` bit-for-bit. Parameters keep
//! their registration order. Readers must reject other `format`/`version`
//! values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{NmaError, Result};

pub const CHECKPOINT_FORMAT: &str = "nma-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format: String,
    version: u32,
    params: Vec<Entry>,
}

pub fn to_json(store: &ParamStore) -> Result<String> {
    let doc = Document {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        params: store
            .iter()
            .map(|(_, name, t)| Entry {
                name: name.to_string(),
                shape: t.shape(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn from_json(text: &str) -> Result<ParamStore> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(NmaError::Format(format!(
            "not a checkpoint (format `{}`)",
            doc.format
        )));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(NmaError::SchemaVersion {
            found: doc.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mut store = ParamStore::new();
    for e in doc.params {
        store.insert(e.name, Tensor::new(e.shape, e.values)?);
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(store)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_json(&std::fs::read_to_string(path)?)
}

/// Copies every tensor of `loaded` into the same-named slot of `store`.
/// Names missing from `store`, or shape changes, are errors.
pub fn restore_into(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for (_, name, t) in loaded.iter() {
        let id = store.id(name)?;
        if store.get(id).shape() != t.shape() {
            return Err(NmaError::ShapeMismatch {
                op: "restore",
                left: store.get(id).shape(),
                right: t.shape(),
            });
        }
        *store.get_mut(id) = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert_random("a", 3, 4, 0.7, &mut rng);
        store.insert("b", Tensor::row(vec![1.0 / 3.0, -0.0, 1e-300, 12345.678]));
        let text = to_json(&store).unwrap();
        let back = from_json(&text).unwrap();
        assert_eq!(store, back);
        for ((_, _, x), (_, _, y)) in store.iter().zip(back.iter()) {
            for (a, b) in x.data().iter().zip(y.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn rejects_foreign_documents() {
        let bad = r#"{"format":"other","version":1,"params":[]}"#;
        assert!(from_json(bad).is_err());
        let newer = r#"{"format":"nma-checkpoint","version":9,"params":[]}"#;
        assert!(matches!(
            from_json(newer),
            Err(NmaError::SchemaVersion { found: 9, .. })
        ));
        let ragged = r#"{"format":"nma-checkpoint","version":1,"params":[{"name":"x","shape":[2,2],"values":[1]}]}"#;
        assert!(from_json(ragged).is_err());
    }
}
