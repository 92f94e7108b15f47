//! Delimited result tables preceded by a `# key: value` manifest header.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableHeader {
    pub manifest: String,
    pub config_sha256: String,
    pub checkpoint_sha256: String,
    pub platform: String,
}

/// `os-arch` of the running binary.
pub fn platform_string() -> String {
    format!("{}-{}", std::env::consts::OS, std::env::consts::ARCH)
}

pub fn write_table(path: &Path, header: &TableHeader, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let io = |e: std::io::Error| Error::io(path, e);
    writeln!(f, "# manifest: {}", header.manifest).map_err(io)?;
    writeln!(f, "# config_sha256: {}", header.config_sha256).map_err(io)?;
    writeln!(f, "# checkpoint_sha256: {}", header.checkpoint_sha256).map_err(io)?;
    writeln!(f, "# platform: {}", header.platform).map_err(io)?;
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(f);
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Header fields and rows of a table written by [`write_table`].
pub fn read_table(path: &Path) -> Result<(Vec<(String, String)>, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text
        .lines()
        .filter_map(|l| l.strip_prefix("# "))
        .filter_map(|l| l.split_once(": "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let columns = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, columns, rows))
}
