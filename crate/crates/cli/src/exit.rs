//! Process exit codes and the JSON error report.

use serde::Serialize;
use ssp_core::SspError;

pub const INTERNAL: u8 = 1;
pub const USAGE: u8 = 2;

/// Listed in `--help`.
pub const TABLE: &str = "\
Exit codes:
   0  success
   1  internal error
   2  invalid command line
   3  invalid configuration (unknown key, bad value, missing setting)
   4  file system error
   5  output directory not empty (pass --force)
   6  malformed file header
   7  truncated file payload
   8  unsupported file version
   9  corrupt file payload
  10  geometry violation (r * D_i != D_s)
  11  shape contract violation
  12  task label out of range
  13  non-finite value during training
  14  undefined metric
  15  malformed JSON document

Errors are reported on stderr as one JSON object: {\"error\", \"code\", \"message\"}.";

/// `(code, short name)` of a core error.
pub fn classify(e: &SspError) -> (u8, &'static str) {
    match e {
        SspError::Config(_) => (3, "config"),
        SspError::Io(_) => (4, "io"),
        SspError::OutputExists(_) => (5, "output_exists"),
        SspError::MalformedHeader(_) => (6, "malformed_header"),
        SspError::TruncatedPayload { .. } => (7, "truncated_payload"),
        SspError::UnsupportedVersion { .. } => (8, "unsupported_version"),
        SspError::CorruptPayload(_) => (9, "corrupt_payload"),
        SspError::Geometry { .. } => (10, "geometry"),
        SspError::Contract { .. } => (11, "contract"),
        SspError::Label { .. } => (12, "label"),
        SspError::NonFinite(_) => (13, "non_finite"),
        SspError::Undefined(_) => (14, "undefined"),
        SspError::Json(_) => (15, "json"),
    }
}

#[derive(Serialize)]
pub struct ErrorReport<'a> {
    pub error: &'a str,
    pub code: u8,
    pub message: String,
}

pub fn report(error: &str, code: u8, message: String) {
    let line = serde_json::to_string(&ErrorReport { error, code, message }).expect("plain strings serialize");
    eprintln!("{line}");
}
