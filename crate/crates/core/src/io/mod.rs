//! Adapter files, canonical JSON reports and learning-curve CSVs.

mod adapter_file;
mod report;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

pub use adapter_file::{
    digest, from_bytes, load_adapter_set, parse_header, save_adapter_set, to_bytes, FileHeader, Role, TensorEntry,
    FORMAT_VERSION, MAGIC, PREAMBLE_LEN,
};
pub use report::{load_merge_report, save_merge_report, to_canonical_json};

use crate::error::{Error, Result};
use crate::train::EpochRecord;

pub const CURVE_HEADER: &str = "epoch,train_loss,val_acc";

/// `epoch,train_loss,val_acc` rows with fixed formatting.
pub fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for r in curve {
        writeln!(out, "{},{:.10},{:.6}", r.epoch, r.train_loss, r.val_acc).expect("string write");
    }
    out
}

pub fn save_curve_csv(curve: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}
