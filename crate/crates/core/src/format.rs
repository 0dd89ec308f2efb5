//! On-disk formats for embedding spaces.
//!
//! * text: optional `<count> <dim>` header, then `id v1 … vdim` per line;
//! * binary: `VALS`, u32 version (1), u32 count, u32 dim, then per item a
//!   u16 id length, the id bytes and `dim` little-endian f32 values;
//! * frequency sidecar: `id<TAB>count` per line.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::EmbeddingSpace;

const SPACE_MAGIC: &[u8; 4] = b"VALS";
const SPACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpaceFormat {
    #[default]
    Text,
    Binary,
}

impl FromStr for SpaceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Self::Text),
            "binary" => Ok(Self::Binary),
            other => Err(Error::Config(format!("unknown space format `{other}`"))),
        }
    }
}

impl SpaceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Text => "vec",
            Self::Binary => "vals",
        }
    }
}

pub fn load_space(path: &Path, format: SpaceFormat) -> Result<EmbeddingSpace> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = File::open(path)?;
    match format {
        SpaceFormat::Text => read_text(BufReader::new(file), &name, path),
        SpaceFormat::Binary => read_binary(BufReader::new(file), &name, path),
    }
}

pub fn save_space(space: &EmbeddingSpace, path: &Path, format: SpaceFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        SpaceFormat::Text => write_text(space, &mut w)?,
        SpaceFormat::Binary => write_binary(space, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

/// Parses the text format. `origin` only labels error messages.
pub fn read_text<R: BufRead>(reader: R, name: &str, origin: &Path) -> Result<EmbeddingSpace> {
    let mut space: Option<EmbeddingSpace> = None;
    let mut declared_count = None;
    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if lineno == 1 && fields.len() == 2 {
            if let (Ok(count), Ok(dim)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                declared_count = Some((count, lineno));
                space = Some(EmbeddingSpace::new(name, dim));
                continue;
            }
        }
        let id = fields[0];
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::parse(origin, lineno, format!("bad float: {e}")))?;
        let space = space.get_or_insert_with(|| EmbeddingSpace::new(name, values.len()));
        if values.len() != space.dim() {
            return Err(Error::parse(
                origin,
                lineno,
                format!("expected {} values, found {}", space.dim(), values.len()),
            ));
        }
        space.push(id, &values).map_err(|e| match e {
            Error::DuplicateId(_) => e,
            other => Error::parse(origin, lineno, other.to_string()),
        })?;
    }
    let space = space.ok_or_else(|| {
        Error::parse(origin, last_line.max(1), "empty file without a `<count> <dim>` header")
    })?;
    if let Some((count, lineno)) = declared_count {
        if count != space.len() {
            return Err(Error::parse(
                origin,
                lineno,
                format!("header declares {count} items, found {}", space.len()),
            ));
        }
    }
    Ok(space)
}

/// Writes the text format with a header. Values use the shortest decimal
/// representation that reads back to the same `f64`.
pub fn write_text<W: Write>(space: &EmbeddingSpace, w: &mut W) -> Result<()> {
    writeln!(w, "{} {}", space.len(), space.dim())?;
    let mut line = String::new();
    for (id, v) in space.iter() {
        line.clear();
        line.push_str(id);
        for x in v {
            write!(line, " {x}").expect("write to String");
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R, name: &str, origin: &Path) -> Result<EmbeddingSpace> {
    let bad = |msg: &str| Error::Format {
        what: "binary space",
        msg: format!("{}: {msg}", origin.display()),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != SPACE_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = read_u32(&mut r).map_err(|_| bad("truncated header"))?;
    if version != SPACE_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let dim = read_u32(&mut r).map_err(|_| bad("truncated header"))? as usize;
    let mut space = EmbeddingSpace::new(name, dim);
    let mut buf = vec![0u8; dim * 4];
    let mut values = vec![0.0f64; dim];
    for item in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)
            .map_err(|_| bad(&format!("truncated item {item}")))?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut id)
            .map_err(|_| bad(&format!("truncated item {item}")))?;
        let id = String::from_utf8(id).map_err(|_| bad(&format!("item {item}: id is not UTF-8")))?;
        r.read_exact(&mut buf)
            .map_err(|_| bad(&format!("truncated item {item}")))?;
        for (v, chunk) in values.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        space.push(id, &values)?;
    }
    Ok(space)
}

/// Writes the binary format; vectors are narrowed to `f32`.
pub fn write_binary<W: Write>(space: &EmbeddingSpace, w: &mut W) -> Result<()> {
    let as_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| Error::Config(format!("{what} {n} exceeds u32")))
    };
    w.write_all(SPACE_MAGIC)?;
    w.write_all(&SPACE_VERSION.to_le_bytes())?;
    w.write_all(&as_u32(space.len(), "count")?.to_le_bytes())?;
    w.write_all(&as_u32(space.dim(), "dim")?.to_le_bytes())?;
    for (id, v) in space.iter() {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Config(format!("id `{id}` longer than 65535 bytes")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for &x in v {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Applies a frequency sidecar to `space`. Ids absent from the sidecar keep
/// count 0; ids absent from the space are an error.
pub fn load_frequencies(space: &mut EmbeddingSpace, path: &Path) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, count) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, idx + 1, "expected `id<TAB>count`"))?;
        let count: u64 = count
            .trim()
            .parse()
            .map_err(|e| Error::parse(path, idx + 1, format!("bad count: {e}")))?;
        space.set_freq(id, count)?;
    }
    Ok(())
}

pub fn save_frequencies(space: &EmbeddingSpace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, id) in space.ids().iter().enumerate() {
        writeln!(w, "{id}\t{}", space.freq(i))?;
    }
    w.flush()?;
    Ok(())
}
