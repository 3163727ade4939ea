//! AuctionInstance JSONL.
//!
//! One JSON object per line with the fields of [`AuctionInstance`]:
//! `schema_version` (mandatory, currently 1), `id`, `slots`, `ads`
//! (`id`, `category`, `brand`, `bid`, `pointwise_pctr`, `true_value`),
//! `organic` (`id`, `category`), `user_id`, `request_ctx`, and optionally
//! `logged` (ordered ad indices, slot 1 first) and `clicks` (one 0/1 label per
//! logged slot). All ids are unsigned integers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::types::AuctionInstance;
use crate::error::{NmaError, Result};

pub fn write_jsonl<W: Write>(mut out: W, instances: &[AuctionInstance]) -> Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<AuctionInstance>> {
    let mut out = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: AuctionInstance = serde_json::from_str(&line)
            .map_err(|e| NmaError::Format(format!("line {}: {e}", lineno + 1)))?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, instances: &[AuctionInstance]) -> Result<()> {
    write_jsonl(BufWriter::new(File::create(path)?), instances)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<AuctionInstance>> {
    read_jsonl(BufReader::new(File::open(path)?))
}
