//! Corpus ingestion and example stream encodings.
//!
//! Examples are stored either as JSON Lines, one object per example:
//!
//! ```text
//! {"inputs":[...],"targets":[...],"denoiser":"R","denoiser_index":0,"record_id":3,"offset":0,"stream":123}
//! ```
//!
//! or in a little-endian binary layout:
//!
//! ```text
//! header   "UL2X" (4 bytes), version u16 = 1
//! record   u32 inputs_len, u32 targets_len,
//!          u32 denoiser_index, u8 label ('R' | 'S' | 'X'),
//!          u64 record_id, u64 offset, u64 stream,
//!          inputs_len x u32 ids, targets_len x u32 ids
//! ```

use std::io::{self, BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::FormatError;
use crate::example::{Example, Provenance};
use crate::vocab::{ParadigmLabel, TokenId, TokenSequence, DEFAULT_EOS_ID, PAD_ID};

pub const BINARY_MAGIC: [u8; 4] = *b"UL2X";
pub const BINARY_VERSION: u16 = 1;

/// One corpus document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: u64,
    pub tokens: TokenSequence,
}

/// Offset added to byte values by the byte fallback tokenizer; ids 0, 1, 2
/// are pad, eos and unk.
pub const BYTE_OFFSET: u32 = 3;
pub const UNK_ID: u32 = 2;
/// Base vocabulary size implied by the byte fallback tokenizer.
pub const BYTE_VOCAB_SIZE: u32 = 256 + BYTE_OFFSET;

pub fn byte_tokenize(text: &str) -> TokenSequence {
    text.bytes().map(|b| TokenId(b as u32 + BYTE_OFFSET)).collect()
}

/// Inverse of [`byte_tokenize`] for base ids; other ids are dropped.
pub fn byte_detokenize(ids: &[TokenId]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|t| (BYTE_OFFSET..BYTE_VOCAB_SIZE).contains(&t.0))
        .map(|t| (t.0 - BYTE_OFFSET) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

const _: () = assert!(PAD_ID == 0 && DEFAULT_EOS_ID == 1 && UNK_ID == 2);

/// Read a JSON Lines corpus of `{"id": n, "tokens": [...]}` objects.
/// Ids must be strictly increasing and tokens must lie below `base_size`.
pub fn read_corpus_jsonl<R: BufRead>(reader: R, base_size: u32) -> Result<Vec<CorpusRecord>, FormatError> {
    let mut out: Vec<CorpusRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|source| FormatError::Json { line: i + 1, source })?;
        if let Some(prev) = out.last() {
            if rec.id <= prev.id {
                return Err(FormatError::NonIncreasingId { prev: prev.id, next: rec.id, line: i + 1 });
            }
        }
        if let Some(bad) = rec.tokens.iter().find(|t| t.0 >= base_size) {
            return Err(FormatError::TokenOutOfRange { record_id: rec.id, token: bad.0, base_size });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Raw UTF-8 text: every nonempty line becomes one record, id = line index.
pub fn read_corpus_text<R: BufRead>(reader: R) -> Result<Vec<CorpusRecord>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(CorpusRecord { id: i as u64, tokens: byte_tokenize(&line) });
    }
    Ok(out)
}

/// Serialized form of an [`Example`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleRecord {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub denoiser: String,
    pub denoiser_index: u32,
    pub record_id: u64,
    pub offset: u64,
    pub stream: u64,
}

impl ExampleRecord {
    pub fn from_example(ex: &Example, label: ParadigmLabel) -> Self {
        ExampleRecord {
            inputs: ex.inputs.iter().map(|t| t.0).collect(),
            targets: ex.targets.iter().map(|t| t.0).collect(),
            denoiser: label.to_string(),
            denoiser_index: ex.denoiser_index as u32,
            record_id: ex.provenance.record_id,
            offset: ex.provenance.offset,
            stream: ex.provenance.stream,
        }
    }

    pub fn label(&self) -> Result<ParadigmLabel, FormatError> {
        self.denoiser.parse().map_err(|_| FormatError::Label(self.denoiser.clone()))
    }

    pub fn to_example(&self) -> Example {
        Example {
            inputs: self.inputs.iter().copied().map(TokenId).collect(),
            targets: self.targets.iter().copied().map(TokenId).collect(),
            denoiser_index: self.denoiser_index as usize,
            provenance: Provenance { record_id: self.record_id, offset: self.offset, stream: self.stream },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Encoding {
    #[default]
    Jsonl,
    Binary,
}

impl std::str::FromStr for Encoding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" | "json" => Ok(Encoding::Jsonl),
            "bin" | "binary" => Ok(Encoding::Binary),
            other => Err(format!("unknown format {other:?} (expected jsonl or bin)")),
        }
    }
}

pub struct ExampleWriter<W: Write> {
    out: W,
    encoding: Encoding,
    written: usize,
}

impl<W: Write> ExampleWriter<W> {
    pub fn new(mut out: W, encoding: Encoding) -> io::Result<Self> {
        if encoding == Encoding::Binary {
            out.write_all(&BINARY_MAGIC)?;
            out.write_all(&BINARY_VERSION.to_le_bytes())?;
        }
        Ok(ExampleWriter { out, encoding, written: 0 })
    }

    pub fn write(&mut self, rec: &ExampleRecord) -> Result<(), FormatError> {
        match self.encoding {
            Encoding::Jsonl => {
                serde_json::to_writer(&mut self.out, rec)
                    .map_err(|source| FormatError::Json { line: self.written + 1, source })?;
                self.out.write_all(b"\n")?;
            }
            Encoding::Binary => {
                let label = rec.label()?.as_char() as u8;
                let w = &mut self.out;
                w.write_all(&(rec.inputs.len() as u32).to_le_bytes())?;
                w.write_all(&(rec.targets.len() as u32).to_le_bytes())?;
                w.write_all(&rec.denoiser_index.to_le_bytes())?;
                w.write_all(&[label])?;
                w.write_all(&rec.record_id.to_le_bytes())?;
                w.write_all(&rec.offset.to_le_bytes())?;
                w.write_all(&rec.stream.to_le_bytes())?;
                for id in rec.inputs.iter().chain(&rec.targets) {
                    w.write_all(&id.to_le_bytes())?;
                }
            }
        }
        self.written += 1;
        Ok(())
    }

    pub fn written(&self) -> usize {
        self.written
    }

    pub fn finish(mut self) -> io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

/// Reads either encoding; the format is detected from the first bytes.
pub struct ExampleReader<R: BufRead> {
    input: R,
    encoding: Encoding,
    index: usize,
    line: String,
}

impl<R: BufRead> ExampleReader<R> {
    pub fn new(mut input: R) -> Result<Self, FormatError> {
        let head = input.fill_buf()?;
        let encoding = if head.starts_with(&BINARY_MAGIC) { Encoding::Binary } else { Encoding::Jsonl };
        if encoding == Encoding::Binary {
            let mut header = [0u8; 6];
            input.read_exact(&mut header)?;
            let version = u16::from_le_bytes([header[4], header[5]]);
            if version != BINARY_VERSION {
                return Err(FormatError::Version(version));
            }
        }
        Ok(ExampleReader { input, encoding, index: 0, line: String::new() })
    }

    pub fn encoding(&self) -> Encoding {
        self.encoding
    }

    fn next_binary(&mut self) -> Option<Result<ExampleRecord, FormatError>> {
        match self.input.fill_buf() {
            Ok([]) => return None,
            Ok(_) => {}
            Err(e) => return Some(Err(e.into())),
        }
        let index = self.index;
        let truncated = |e: io::Error| {
            if e.kind() == io::ErrorKind::UnexpectedEof {
                FormatError::Truncated(index)
            } else {
                FormatError::Io(e)
            }
        };
        let mut fixed = [0u8; 37];
        if let Err(e) = self.input.read_exact(&mut fixed) {
            return Some(Err(truncated(e)));
        }
        let u32_at = |o: usize| u32::from_le_bytes(fixed[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(fixed[o..o + 8].try_into().unwrap());
        let (n_in, n_tgt) = (u32_at(0) as usize, u32_at(4) as usize);
        let denoiser_index = u32_at(8);
        let label = match ParadigmLabel::from_char(fixed[12] as char) {
            Some(l) => l,
            None => return Some(Err(FormatError::Label(format!("{:?}", fixed[12] as char)))),
        };
        let (record_id, offset, stream) = (u64_at(13), u64_at(21), u64_at(29));
        let mut ids = vec![0u8; (n_in + n_tgt) * 4];
        if let Err(e) = self.input.read_exact(&mut ids) {
            return Some(Err(truncated(e)));
        }
        let ids: Vec<u32> = ids.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        self.index += 1;
        Some(Ok(ExampleRecord {
            inputs: ids[..n_in].to_vec(),
            targets: ids[n_in..].to_vec(),
            denoiser: label.to_string(),
            denoiser_index,
            record_id,
            offset,
            stream,
        }))
    }

    fn next_jsonl(&mut self) -> Option<Result<ExampleRecord, FormatError>> {
        loop {
            self.line.clear();
            match self.input.read_line(&mut self.line) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.index += 1;
            if self.line.trim().is_empty() {
                continue;
            }
            let line = self.index;
            return Some(serde_json::from_str(&self.line).map_err(|source| FormatError::Json { line, source }));
        }
    }
}

impl<R: BufRead> Iterator for ExampleReader<R> {
    type Item = Result<ExampleRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.encoding {
            Encoding::Binary => self.next_binary(),
            Encoding::Jsonl => self.next_jsonl(),
        }
    }
}

/// Read every record from a file-like source.
pub fn read_examples<R: Read>(input: R) -> Result<Vec<ExampleRecord>, FormatError> {
    ExampleReader::new(BufReader::new(input))?.collect()
}
