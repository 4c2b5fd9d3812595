//! Binary containers: `.sgds` datasets and `SGSN` snapshots. All integers
//! and reals are little-endian.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use siftgan_core::augment::Image;
use siftgan_core::data::{LabeledImage, Origin};

pub const DATASET_MAGIC: [u8; 4] = *b"SGDS";
pub const DATASET_VERSION: u16 = 1;
pub const SNAPSHOT_MAGIC: [u8; 4] = *b"SGSN";
pub const SNAPSHOT_VERSION: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected `{expected}`, found `{found}`")]
    BadMagic { expected: String, found: String },

    #[error("unsupported {kind} version {found} (this build reads version {supported})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u16,
        supported: u16,
    },

    #[error("truncated input while reading {what}")]
    Truncated { what: String },

    #[error("invalid {kind} content: {message}")]
    Invalid { kind: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: Box<FormatError>,
    },

    #[error(transparent)]
    Stream(#[from] io::Error),
}

impl FormatError {
    fn invalid(kind: &'static str, message: impl Into<String>) -> Self {
        FormatError::Invalid {
            kind,
            message: message.into(),
        }
    }

    fn at(self, path: &Path) -> Self {
        FormatError::Io {
            path: path.to_path_buf(),
            source: Box::new(self),
        }
    }

    /// The innermost error, past any path wrappers.
    pub fn root(&self) -> &FormatError {
        match self {
            FormatError::Io { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Contents of one `.sgds` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub samples: Vec<LabeledImage>,
}

impl Dataset {
    /// Takes the image shape from the first sample; an empty dataset needs
    /// [`Dataset::empty`].
    pub fn new(num_classes: usize, samples: Vec<LabeledImage>) -> Result<Self> {
        let shape = match samples.first() {
            Some(s) => s.image.shape(),
            None => {
                return Err(FormatError::invalid(
                    "dataset",
                    "no samples to take the image shape from",
                ))
            }
        };
        let ds = Self {
            shape,
            num_classes,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(num_classes: usize, shape: [usize; 3]) -> Self {
        Self {
            shape,
            num_classes,
            samples: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0 || d > u16::MAX as usize) || self.num_classes > u16::MAX as usize {
            return Err(FormatError::invalid(
                "dataset",
                format!(
                    "shape {:?} or class count {} out of range",
                    self.shape, self.num_classes
                ),
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.image.shape() != self.shape {
                return Err(FormatError::invalid(
                    "dataset",
                    format!("sample {i} has shape {:?}, expected {:?}", s.image.shape(), self.shape),
                ));
            }
            if s.label >= self.num_classes {
                return Err(FormatError::invalid(
                    "dataset",
                    format!(
                        "sample {i} has label {} but there are {} classes",
                        s.label, self.num_classes
                    ),
                ));
            }
        }
        Ok(())
    }
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &dyn Fn() -> String) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.fill(&mut buf, what)?;
        Ok(buf)
    }

    fn fill(&mut self, buf: &mut [u8], what: &dyn Fn() -> String) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(FormatError::Truncated { what: what() }),
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self, what: &dyn Fn() -> String) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &dyn Fn() -> String) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn f64s(&mut self, count: usize, what: &dyn Fn() -> String) -> Result<Vec<f64>> {
        let mut raw = vec![0u8; count * 8];
        self.fill(&mut raw, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
            .collect())
    }

    /// The next byte, or `None` at a clean end of stream.
    fn next_byte(&mut self) -> Result<Option<u8>> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(None),
                Ok(_) => return Ok(Some(probe[0])),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let found = self.bytes::<4>(&|| "magic".into())?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: expected.escape_ascii().to_string(),
                found: found.escape_ascii().to_string(),
            });
        }
        Ok(())
    }
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    w.write_all(&DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(ds.samples.len() as u64).to_le_bytes())?;
    for d in ds.shape {
        w.write_all(&(d as u16).to_le_bytes())?;
    }
    w.write_all(&(ds.num_classes as u16).to_le_bytes())?;
    for s in &ds.samples {
        w.write_all(&(s.label as u16).to_le_bytes())?;
        w.write_all(&[s.origin.code()])?;
        write_f64s(w, s.image.values())?;
    }
    Ok(())
}

pub fn read_dataset(r: impl Read) -> Result<Dataset> {
    let mut r = Reader { inner: r };
    r.magic(DATASET_MAGIC)?;
    let header = |field: &'static str| move || format!("dataset header field `{field}`");
    let version = r.u16(&header("version"))?;
    if version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            kind: "dataset",
            found: version,
            supported: DATASET_VERSION,
        });
    }
    let count = r.u64(&header("count"))?;
    let c = r.u16(&header("channels"))? as usize;
    let h = r.u16(&header("height"))? as usize;
    let w = r.u16(&header("width"))? as usize;
    let k = r.u16(&header("classes"))? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(FormatError::invalid(
            "dataset",
            format!("zero dimension in shape {c}x{h}x{w}"),
        ));
    }
    let mut samples = Vec::new();
    for i in 0..count {
        let what = move || format!("dataset record {i} of {count}");
        let label = r.u16(&what)? as usize;
        let code = r.u8(&what)?;
        let origin = Origin::from_code(code)
            .ok_or_else(|| FormatError::invalid("dataset", format!("record {i} has unknown origin code {code}")))?;
        if label >= k {
            return Err(FormatError::invalid(
                "dataset",
                format!("record {i} has label {label} but the header declares {k} classes"),
            ));
        }
        let values = r.f64s(c * h * w, &what)?;
        let image = Image::new(c, h, w, values).map_err(|e| FormatError::invalid("dataset", e.to_string()))?;
        samples.push(LabeledImage::new(image, label, origin));
    }
    if r.next_byte()?.is_some() {
        return Err(FormatError::invalid(
            "dataset",
            format!("trailing bytes after the {count} declared records"),
        ));
    }
    Ok(Dataset {
        shape: [c, h, w],
        num_classes: k,
        samples,
    })
}

/// A serialized snapshot: its iteration and named value records.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotFile {
    pub iteration: u64,
    pub records: Vec<(String, Vec<f64>)>,
}

pub fn write_snapshot(w: &mut impl Write, snap: &SnapshotFile) -> Result<()> {
    w.write_all(&SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    w.write_all(&snap.iteration.to_le_bytes())?;
    for (name, values) in &snap.records {
        let len = u16::try_from(name.len()).map_err(|_| {
            FormatError::invalid("snapshot", format!("record name of {} bytes is too long", name.len()))
        })?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(values.len() as u64).to_le_bytes())?;
        write_f64s(w, values)?;
    }
    Ok(())
}

/// Records run until the end of the stream.
pub fn read_snapshot(r: impl Read) -> Result<SnapshotFile> {
    let mut r = Reader { inner: r };
    r.magic(SNAPSHOT_MAGIC)?;
    let version = r.u16(&|| "snapshot header field `version`".into())?;
    if version != SNAPSHOT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            kind: "snapshot",
            found: version,
            supported: SNAPSHOT_VERSION,
        });
    }
    let iteration = r.u64(&|| "snapshot header field `iteration`".into())?;
    let mut records = Vec::new();
    while let Some(first) = r.next_byte()? {
        let index = records.len();
        let what = move || format!("snapshot record {index}");
        let second = r.u8(&what)?;
        let len = u16::from_le_bytes([first, second]) as usize;
        let mut name = vec![0u8; len];
        r.fill(&mut name, &what)?;
        let name = String::from_utf8(name)
            .map_err(|_| FormatError::invalid("snapshot", format!("record {index} name is not UTF-8")))?;
        let what = || format!("snapshot record `{name}`");
        let count = r.u64(&what)? as usize;
        let values = r.f64s(count, &what)?;
        records.push((name, values));
    }
    Ok(SnapshotFile { iteration, records })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_dataset(&mut w, ds)?;
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| e.at(path))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let run = || read_dataset(BufReader::new(File::open(path)?));
    run().map_err(|e| e.at(path))
}

pub fn save_snapshot(path: &Path, snap: &SnapshotFile) -> Result<()> {
    let run = || -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_snapshot(&mut w, snap)?;
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| e.at(path))
}

pub fn load_snapshot(path: &Path) -> Result<SnapshotFile> {
    let run = || read_snapshot(BufReader::new(File::open(path)?));
    run().map_err(|e| e.at(path))
}
