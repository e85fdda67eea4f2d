//! Line-delimited JSON helpers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub fn write<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_to(&mut out, items)?;
    out.flush()?;
    Ok(())
}

pub fn write_to<T: Serialize, W: Write>(out: &mut W, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut *out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    read_from(BufReader::new(File::open(path)?))
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

pub fn read_from<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>> {
    let mut items = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("line {}: {e}", lineno + 1)))?;
        items.push(item);
    }
    Ok(items)
}
