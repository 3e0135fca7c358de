//! Model file format: the magic line `SDLM1\n`, a one-line JSON header
//! `{"version", "order", "vocab_size", "reserved_ids"}` terminated by `\n`,
//! then the logit table as row-major little-endian f64.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{SoftmaxTableLM, Token, Vocabulary, RESERVED};

pub const MODEL_MAGIC: &[u8; 6] = b"SDLM1\n";
pub const MODEL_FORMAT_VERSION: u64 = 1;
const MAX_HEADER_BYTES: u64 = 4096;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u64,
    order: usize,
    vocab_size: usize,
    reserved_ids: Vec<Token>,
}

pub fn write_model<W: Write>(model: &SoftmaxTableLM, mut w: W) -> Result<()> {
    let header = Header {
        version: MODEL_FORMAT_VERSION,
        order: model.order(),
        vocab_size: model.vocab_size(),
        reserved_ids: RESERVED.to_vec(),
    };
    w.write_all(MODEL_MAGIC)?;
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for z in model.logits() {
        w.write_all(&z.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<SoftmaxTableLM> {
    let mut r = BufReader::new(r);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|_| Error::BadMagic)?;
    if &magic != MODEL_MAGIC {
        // Same family, other revision: report it as a version problem.
        if magic.starts_with(b"SDLM") && magic[5] == b'\n' && magic[4].is_ascii_digit() {
            return Err(Error::Version {
                found: u64::from(magic[4] - b'0'),
                expected: MODEL_FORMAT_VERSION,
            });
        }
        return Err(Error::BadMagic);
    }

    let mut line = Vec::new();
    (&mut r).take(MAX_HEADER_BYTES).read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(Error::Header("missing header terminator".into()));
    }
    let header: Header =
        serde_json::from_slice(&line[..line.len() - 1]).map_err(|e| Error::Header(e.to_string()))?;
    if header.version != MODEL_FORMAT_VERSION {
        return Err(Error::Version { found: header.version, expected: MODEL_FORMAT_VERSION });
    }
    if header.reserved_ids != RESERVED {
        return Err(Error::Header(format!("unexpected reserved ids {:?}", header.reserved_ids)));
    }
    let vocab = Vocabulary::new(header.vocab_size)?;
    let shell = SoftmaxTableLM::zeros(header.order, vocab)?;
    let expected = shell.logits().len() * 8;

    let mut bytes = Vec::with_capacity(expected);
    (&mut r).take(expected as u64).read_to_end(&mut bytes)?;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    if !r.fill_buf()?.is_empty() {
        return Err(Error::Corrupt("trailing bytes after logit table".into()));
    }
    let logits = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect::<Vec<_>>();
    SoftmaxTableLM::from_logits(header.order, vocab, logits).map_err(|e| Error::Corrupt(e.to_string()))
}

pub fn save_model(model: &SoftmaxTableLM, path: impl AsRef<Path>) -> Result<()> {
    write_model(model, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SoftmaxTableLM> {
    read_model(File::open(path)?)
}
