//! Line-delimited record files: one JSON object per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;

use super::record::PacketRecord;
use crate::error::{Error, Result};

/// Iterator over the records of a line-delimited file. Bad lines are skipped
/// and counted.
pub struct RecordStream<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
    skipped: usize,
}

impl<R: BufRead> RecordStream<R> {
    pub fn new(reader: R) -> Self {
        RecordStream {
            lines: reader.lines(),
            line_no: 0,
            skipped: 0,
        }
    }

    /// Number of lines skipped so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }
}

impl<R: BufRead> Iterator for RecordStream<R> {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => {
                    warn!("records: read error, stopping: {e}");
                    self.skipped += 1;
                    return None;
                }
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<PacketRecord>(&line) {
                Ok(r) => return Some(r),
                Err(e) => {
                    warn!("records: skipping line {}: {e}", self.line_no);
                    self.skipped += 1;
                }
            }
        }
    }
}

pub fn read_records(path: impl AsRef<Path>) -> Result<RecordStream<BufReader<File>>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(RecordStream::new(BufReader::new(f)))
}

/// Reads a whole record file, returning the records and the skip count.
pub fn load_records(path: impl AsRef<Path>) -> Result<(Vec<PacketRecord>, usize)> {
    let mut stream = read_records(path)?;
    let recs: Vec<PacketRecord> = stream.by_ref().collect();
    Ok((recs, stream.skipped()))
}

pub fn write_records<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a PacketRecord>,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_records<'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a PacketRecord>,
) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(BufWriter::new(f), records).map_err(|e| Error::io(path, e))
}
