//! Packed batch files.
//!
//! Layout, little-endian: magic `NARB`, `u32` version, `u32` seq_len,
//! `u32` target_len, `u32` vocab, `u64` row count, then per row a `u32`
//! prefix length, `seq_len` `u32` ids and `seq_len` `u8` loss-mask bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{SequenceBatch, SequenceRow};
use crate::tokenizer::PAD;

pub const NARB_MAGIC: &[u8; 4] = b"NARB";
pub const NARB_VERSION: u32 = 1;
const ROWS_OFFSET: u64 = 20;

/// Streaming writer; the row count is patched in by [`PackedWriter::finish`].
pub struct PackedWriter<W: Write + Seek> {
    out: W,
    seq_len: usize,
    target_len: usize,
    vocab: usize,
    rows: u64,
}

impl<W: Write + Seek> PackedWriter<W> {
    pub fn new(mut out: W, seq_len: usize, target_len: usize, vocab: usize) -> Result<Self> {
        let io = |e| Error::io("packed batch", e);
        out.write_all(NARB_MAGIC).map_err(io)?;
        for v in [NARB_VERSION, seq_len as u32, target_len as u32, vocab as u32] {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        out.write_all(&0u64.to_le_bytes()).map_err(io)?;
        Ok(Self { out, seq_len, target_len, vocab, rows: 0 })
    }

    pub fn push(&mut self, row: &SequenceRow) -> Result<()> {
        if row.target.len() != self.target_len || row.prefix.len() + self.target_len > self.seq_len {
            return Err(Error::Data(format!(
                "row with prefix {} and target {} does not fit seq_len {} / target_len {}",
                row.prefix.len(),
                row.target.len(),
                self.seq_len,
                self.target_len
            )));
        }
        if let Some(&bad) = row.prefix.iter().chain(&row.target).find(|&&t| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.vocab });
        }
        let batch = SequenceBatch::from_rows(std::slice::from_ref(row), Some(self.seq_len))?;
        let mut buf = Vec::with_capacity(4 + 5 * self.seq_len);
        buf.extend_from_slice(&(row.prefix.len() as u32).to_le_bytes());
        for id in &batch.ids {
            buf.extend_from_slice(&id.to_le_bytes());
        }
        buf.extend_from_slice(&batch.loss_mask);
        self.out.write_all(&buf).map_err(|e| Error::io("packed batch", e))?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn finish(mut self) -> Result<W> {
        let io = |e| Error::io("packed batch", e);
        let end = self.out.stream_position().map_err(io)?;
        self.out.seek(SeekFrom::Start(ROWS_OFFSET)).map_err(io)?;
        self.out.write_all(&self.rows.to_le_bytes()).map_err(io)?;
        self.out.seek(SeekFrom::Start(end)).map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(self.out)
    }
}

impl PackedWriter<BufWriter<File>> {
    pub fn create(path: &Path, seq_len: usize, target_len: usize, vocab: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Self::new(BufWriter::new(file), seq_len, target_len, vocab)
    }
}

/// Streaming reader yielding one row at a time.
pub struct PackedReader<R: Read> {
    input: R,
    pub seq_len: usize,
    pub target_len: usize,
    pub vocab: usize,
    pub rows: u64,
    read: u64,
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::Data(format!("truncated packed batch: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

impl<R: Read> PackedReader<R> {
    pub fn new(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|e| Error::Data(format!("truncated packed batch: {e}")))?;
        if &magic != NARB_MAGIC {
            return Err(Error::Data("not a packed batch file".into()));
        }
        let version = read_u32(&mut input)?;
        if version != NARB_VERSION {
            return Err(Error::Data(format!("unsupported packed batch version {version}")));
        }
        let seq_len = read_u32(&mut input)? as usize;
        let target_len = read_u32(&mut input)? as usize;
        let vocab = read_u32(&mut input)? as usize;
        let rows = read_u32(&mut input)? as u64 | (read_u32(&mut input)? as u64) << 32;
        Ok(Self { input, seq_len, target_len, vocab, rows, read: 0 })
    }

    fn read_row(&mut self) -> Result<SequenceRow> {
        let p = read_u32(&mut self.input)? as usize;
        if p + self.target_len > self.seq_len {
            return Err(Error::Data(format!("row prefix {p} overflows seq_len {}", self.seq_len)));
        }
        let mut raw = vec![0u8; 5 * self.seq_len];
        self.input.read_exact(&mut raw).map_err(|e| Error::Data(format!("truncated packed batch: {e}")))?;
        let (id_bytes, mask) = raw.split_at(4 * self.seq_len);
        let ids: Vec<u32> = id_bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange { id: bad, size: self.vocab });
        }
        let end = p + self.target_len;
        if ids[end..].iter().any(|&t| t != PAD) || mask[..p].iter().chain(&mask[end..]).any(|&m| m != 0) {
            return Err(Error::Data("packed row violates batch layout".into()));
        }
        Ok(SequenceRow { prefix: ids[..p].to_vec(), target: ids[p..end].to_vec(), target_mask: mask[p..end].to_vec() })
    }
}

impl<R: Read> Iterator for PackedReader<R> {
    type Item = Result<SequenceRow>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.rows {
            return None;
        }
        self.read += 1;
        let row = self.read_row();
        if row.is_err() {
            self.read = self.rows;
        }
        Some(row)
    }
}

/// Reads every row of a packed file.
pub fn read_packed(path: &Path) -> Result<(PackedReader<BufReader<File>>, Vec<SequenceRow>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = PackedReader::new(BufReader::new(file))?;
    let rows = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((reader, rows))
}
