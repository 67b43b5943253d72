//! Epoch archive: a binary container of equally shaped labelled epochs.
//!
//! ```text
//! magic        8 bytes "ISPEPOCH"
//! version      u32 = 1
//! n_channels   u32
//! n_samples    u32
//! rate_hz      u32
//! n_labels     u32, then per label: len u32 + code bytes
//! n_subjects   u32, then per subject: len u32 + id bytes
//! n_epochs     u32
//! per epoch:   label u32 (u32::MAX = none), subject u32 (u32::MAX = none),
//!              n_channels * n_samples f32
//! ```
//!
//! Integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{ClassLabel, Epoch};

const MAGIC: &[u8; 8] = b"ISPEPOCH";
const VERSION: u32 = 1;
const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochArchive {
    pub sampling_rate_hz: u32,
    pub epochs: Vec<Epoch>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("archive truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("archive string is not UTF-8".into()))
    }
}

impl EpochArchive {
    pub fn new(sampling_rate_hz: u32, epochs: Vec<Epoch>) -> Result<Self> {
        if let Some(first) = epochs.first() {
            if let Some(bad) = epochs
                .iter()
                .position(|e| e.n_channels != first.n_channels || e.n_samples != first.n_samples)
            {
                return Err(Error::Data(format!("epoch {bad} differs in shape from epoch 0")));
            }
        }
        Ok(Self {
            sampling_rate_hz,
            epochs,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let (c, n) = self.epochs.first().map_or((0, 0), |e| (e.n_channels, e.n_samples));
        let labels: Vec<ClassLabel> = ClassLabel::ALL.to_vec();
        let mut subjects: Vec<String> = Vec::new();
        for e in &self.epochs {
            if let Some(s) = &e.subject_id {
                if !subjects.contains(s) {
                    subjects.push(s.clone());
                }
            }
        }
        let mut out = Vec::with_capacity(64 + self.epochs.len() * (8 + 4 * c * n));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, c as u32);
        put_u32(&mut out, n as u32);
        put_u32(&mut out, self.sampling_rate_hz);
        put_u32(&mut out, labels.len() as u32);
        for l in &labels {
            put_str(&mut out, l.code());
        }
        put_u32(&mut out, subjects.len() as u32);
        for s in &subjects {
            put_str(&mut out, s);
        }
        put_u32(&mut out, self.epochs.len() as u32);
        for e in &self.epochs {
            put_u32(&mut out, e.label.map_or(NONE, |l| l.index() as u32));
            let si = e
                .subject_id
                .as_ref()
                .map_or(NONE, |s| subjects.iter().position(|x| x == s).expect("collected") as u32);
            put_u32(&mut out, si);
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an epoch archive".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let c = r.u32()? as usize;
        let n = r.u32()? as usize;
        let rate = r.u32()?;
        let n_labels = r.u32()? as usize;
        let mut labels = Vec::with_capacity(n_labels);
        for _ in 0..n_labels {
            labels.push(ClassLabel::parse(&r.string()?).map_err(|e| Error::Format(e.to_string()))?);
        }
        let n_subjects = r.u32()? as usize;
        let mut subjects = Vec::with_capacity(n_subjects);
        for _ in 0..n_subjects {
            subjects.push(r.string()?);
        }
        let n_epochs = r.u32()? as usize;
        if n_epochs > 0 && (c == 0 || n == 0) {
            return Err(Error::Format("archive declares epochs of zero size".into()));
        }
        let mut epochs = Vec::with_capacity(n_epochs.min(1 << 16));
        for i in 0..n_epochs {
            let li = r.u32()?;
            let label = match li {
                NONE => None,
                k => Some(
                    *labels
                        .get(k as usize)
                        .ok_or_else(|| Error::Format(format!("epoch {i} has label index {k} outside the table")))?,
                ),
            };
            let si = r.u32()?;
            let subject_id = match si {
                NONE => None,
                k => Some(
                    subjects
                        .get(k as usize)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("epoch {i} has subject index {k} outside the table")))?,
                ),
            };
            let raw = r.take(4 * c * n)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            epochs.push(Epoch {
                n_channels: c,
                n_samples: n,
                data,
                label,
                subject_id,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after archive", bytes.len() - r.pos)));
        }
        Ok(Self {
            sampling_rate_hz: rate,
            epochs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::atomic_write(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EpochArchive {
        let e = |label, subject: Option<&str>, v: f32| Epoch {
            n_channels: 2,
            n_samples: 3,
            data: vec![v, -v, 0.5, 1e-7, f32::MIN_POSITIVE, v * 2.0],
            label,
            subject_id: subject.map(str::to_string),
        };
        EpochArchive::new(
            250,
            vec![
                e(Some(ClassLabel::HelpMe), Some("A"), 1.0),
                e(None, None, 2.0),
                e(Some(ClassLabel::Rest), Some("B"), 3.0),
                e(Some(ClassLabel::Tired), Some("A"), 4.0),
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let a = sample();
        let bytes = a.encode();
        assert_eq!(EpochArchive::decode(&bytes).unwrap(), a);
        assert_eq!(EpochArchive::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn empty_archive_round_trips() {
        let a = EpochArchive::new(250, vec![]).unwrap();
        assert!(EpochArchive::decode(&a.encode()).unwrap().epochs.is_empty());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().encode();
        assert!(EpochArchive::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(EpochArchive::decode(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(EpochArchive::decode(&bad).is_err());
    }

    #[test]
    fn mixed_shapes_rejected() {
        let mut a = sample().epochs;
        a[1].n_samples = 6;
        a[1].n_channels = 1;
        assert!(EpochArchive::new(250, a).is_err());
    }
}
