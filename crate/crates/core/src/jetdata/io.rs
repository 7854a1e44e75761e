//! Jet files: a length-prefixed little-endian binary format (`JETB`) and a
//! JSON-lines alternative. Files ending in `.jsonl` use the text format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::path::Path;

use super::{ClassLabel, Jet, Particle, ParticleType};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"JETB";
pub const VERSION: u16 = 1;
/// Feature schema: f64 momentum components and u8 flags per particle.
pub const SCHEMA: [u8; 2] = [4, 1];
const HEADER_LEN: u64 = 8;
const PARTICLE_LEN: usize = 4 * 8 + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Binary,
    JsonLines,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => Format::JsonLines,
            _ => Format::Binary,
        }
    }
}

pub fn write_jets(path: impl AsRef<Path>, jets: &[Jet]) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    write_jets_to(&mut w, jets, Format::from_path(path))?;
    w.flush()?;
    Ok(())
}

pub fn write_jets_to<W: Write>(w: &mut W, jets: &[Jet], format: Format) -> Result<()> {
    match format {
        Format::Binary => {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&SCHEMA)?;
            for jet in jets {
                let count = u32::try_from(jet.len())
                    .map_err(|_| Error::InvalidArgument("too many particles for u32 count".into()))?;
                w.write_all(&count.to_le_bytes())?;
                w.write_all(&[jet.label.code()])?;
                for p in &jet.particles {
                    for v in [p.px, p.py, p.pz, p.energy] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                    w.write_all(&[p.type_flags.code()])?;
                }
            }
        }
        Format::JsonLines => {
            for jet in jets {
                serde_json::to_writer(&mut *w, jet)?;
                w.write_all(b"\n")?;
            }
        }
    }
    Ok(())
}

pub fn read_jets(path: impl AsRef<Path>) -> Result<JetReader<BufReader<File>>> {
    let path = path.as_ref();
    let r = BufReader::new(File::open(path)?);
    Ok(JetReader::new(r, Format::from_path(path)))
}

/// Reads every jet of a file, stopping at the first error.
pub fn read_all(path: impl AsRef<Path>) -> Result<Vec<Jet>> {
    read_jets(path)?.collect()
}

/// Streaming jet reader. Yields nothing further after the first error.
pub struct JetReader<R> {
    inner: R,
    format: Format,
    offset: u64,
    index: usize,
    header_done: bool,
    failed: bool,
    line: String,
}

impl<R: BufRead> JetReader<R> {
    pub fn new(inner: R, format: Format) -> Self {
        Self {
            inner,
            format,
            offset: 0,
            index: 0,
            header_done: false,
            failed: false,
            line: String::new(),
        }
    }

    fn malformed(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Malformed {
            index: self.index,
            offset,
            reason: reason.into(),
        }
    }

    /// Fills `buf` completely. `Ok(false)` on a clean end of input before
    /// the first byte when `eof_ok` is set.
    fn fill(&mut self, buf: &mut [u8], eof_ok: bool, what: &str) -> Result<bool> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => {
                    if got == 0 && eof_ok {
                        return Ok(false);
                    }
                    return Err(self.malformed(
                        self.offset + got as u64,
                        format!("truncated {what}: expected {} bytes, found {got}", buf.len()),
                    ));
                }
                Ok(k) => got += k,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(true)
    }

    fn read_header(&mut self) -> Result<bool> {
        let mut h = [0u8; HEADER_LEN as usize];
        if !self.fill(&mut h, true, "header")? {
            return Ok(false);
        }
        if &h[..4] != MAGIC {
            return Err(self.malformed(0, "bad magic, expected JETB"));
        }
        let version = u16::from_le_bytes([h[4], h[5]]);
        if version != VERSION {
            return Err(self.malformed(4, format!("unsupported version {version}")));
        }
        if h[6..8] != SCHEMA {
            return Err(self.malformed(6, format!("unsupported feature schema {:?}", &h[6..8])));
        }
        Ok(true)
    }

    fn next_binary(&mut self) -> Result<Option<Jet>> {
        if !self.header_done {
            self.header_done = true;
            if !self.read_header()? {
                return Ok(None);
            }
        }
        let start = self.offset;
        let mut head = [0u8; 5];
        if !self.fill(&mut head, true, "record header")? {
            return Ok(None);
        }
        let count = u32::from_le_bytes([head[0], head[1], head[2], head[3]]) as usize;
        let label = ClassLabel::from_code(head[4])
            .ok_or_else(|| self.malformed(start + 4, format!("unknown label code {}", head[4])))?;
        if count == 0 {
            return Err(self.malformed(start, "jet with zero particles"));
        }
        let mut particles = Vec::with_capacity(count.min(1 << 16));
        let mut buf = [0u8; PARTICLE_LEN];
        for _ in 0..count {
            let at = self.offset;
            self.fill(&mut buf, false, "particle")?;
            let f = |k: usize| f64::from_le_bytes(buf[k * 8..k * 8 + 8].try_into().expect("8 bytes"));
            let ty = ParticleType::from_code(buf[32])
                .ok_or_else(|| self.malformed(at + 32, format!("unknown particle type {}", buf[32])))?;
            particles.push(Particle::new(f(0), f(1), f(2), f(3), ty));
        }
        Ok(Some(Jet::new(particles, label)))
    }

    fn next_json(&mut self) -> Result<Option<Jet>> {
        loop {
            self.line.clear();
            let start = self.offset;
            let n = self.inner.read_line(&mut self.line)?;
            if n == 0 {
                return Ok(None);
            }
            self.offset += n as u64;
            if self.line.trim().is_empty() {
                continue;
            }
            let jet: Jet = serde_json::from_str(&self.line).map_err(|e| self.malformed(start, e.to_string()))?;
            if jet.is_empty() {
                return Err(self.malformed(start, "jet with zero particles"));
            }
            return Ok(Some(jet));
        }
    }
}

impl<R: BufRead> Iterator for JetReader<R> {
    type Item = Result<Jet>;

    fn next(&mut self) -> Option<Result<Jet>> {
        if self.failed {
            return None;
        }
        let r = match self.format {
            Format::Binary => self.next_binary(),
            Format::JsonLines => self.next_json(),
        };
        match r {
            Ok(Some(j)) => {
                self.index += 1;
                Some(Ok(j))
            }
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}
