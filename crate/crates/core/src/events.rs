//! Event records and their on-disk encodings.
//!
//! Binary (`.evs`), little-endian:
//!
//! ```text
//! "EVS1" | width u16 | height u16 | count u64            16-byte header
//! t u64 | x u16 | y u16 | p i8 | 3 zero bytes            16 bytes per record
//! ```
//!
//! CSV: an optional `# width=W,height=H` line, the header `t,x,y,p`, then one
//! record per line with polarity written as `1` or `-1`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{io_err, CmtcError, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"EVS1";
pub const BINARY_HEADER_LEN: usize = 16;
pub const BINARY_RECORD_LEN: usize = 16;
pub const CSV_HEADER: &str = "t,x,y,p";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventRecord {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// +1 for a brightness increase, -1 for a decrease.
    pub p: i8,
}

impl fmt::Display for EventRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} x={} y={} p={}", self.t, self.x, self.y, self.p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    records: Vec<EventRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "evs" | "bin" => Some(Self::Binary),
            _ => None,
        }
    }
}

impl EventStream {
    /// Validates coordinates and polarity, then stable-sorts by timestamp.
    pub fn new(width: u16, height: u16, mut records: Vec<EventRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            check_record(i, r, width, height)?;
        }
        records.sort_by_key(|r| r.t);
        Ok(Self {
            width,
            height,
            records,
        })
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn first_t(&self) -> Option<u64> {
        self.records.first().map(|r| r.t)
    }

    pub fn last_t(&self) -> Option<u64> {
        self.records.last().map(|r| r.t)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(BINARY_HEADER_LEN + BINARY_RECORD_LEN * self.len());
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.t.to_le_bytes());
            out.extend_from_slice(&r.x.to_le_bytes());
            out.extend_from_slice(&r.y.to_le_bytes());
            out.push(r.p as u8);
            out.extend_from_slice(&[0, 0, 0]);
        }
        out
    }

    pub fn from_binary(buf: &[u8]) -> Result<Self> {
        let bad = |offset: usize, msg: String| CmtcError::Parse {
            line: 0,
            offset,
            msg,
        };
        if buf.len() < BINARY_HEADER_LEN {
            return Err(bad(buf.len(), "truncated header".into()));
        }
        if &buf[..4] != BINARY_MAGIC {
            return Err(bad(0, "missing EVS1 magic".into()));
        }
        let width = u16::from_le_bytes([buf[4], buf[5]]);
        let height = u16::from_le_bytes([buf[6], buf[7]]);
        let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let body = &buf[BINARY_HEADER_LEN..];
        if body.len() != count * BINARY_RECORD_LEN {
            return Err(bad(
                BINARY_HEADER_LEN,
                format!(
                    "header declares {count} records ({} bytes) but body has {} bytes",
                    count * BINARY_RECORD_LEN,
                    body.len()
                ),
            ));
        }
        let mut records = Vec::with_capacity(count);
        for (i, rec) in body.chunks_exact(BINARY_RECORD_LEN).enumerate() {
            let offset = BINARY_HEADER_LEN + i * BINARY_RECORD_LEN;
            let r = EventRecord {
                t: u64::from_le_bytes(rec[..8].try_into().unwrap()),
                x: u16::from_le_bytes([rec[8], rec[9]]),
                y: u16::from_le_bytes([rec[10], rec[11]]),
                p: rec[12] as i8,
            };
            if r.p != 1 && r.p != -1 {
                return Err(bad(offset + 12, format!("record {i}: polarity {} is not +1/-1", r.p)));
            }
            if rec[13..] != [0, 0, 0] {
                return Err(bad(offset + 13, format!("record {i}: non-zero padding")));
            }
            records.push(r);
        }
        Self::new(width, height, records)
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 20 * self.len());
        writeln!(out, "# width={},height={}", self.width, self.height).unwrap();
        writeln!(out, "{CSV_HEADER}").unwrap();
        for r in &self.records {
            writeln!(out, "{},{},{},{}", r.t, r.x, r.y, r.p).unwrap();
        }
        out
    }

    /// Parses CSV. Without a `# width=..,height=..` line the sensor size is
    /// taken as one past the largest coordinate.
    pub fn from_csv(buf: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(buf).map_err(|e| CmtcError::Parse {
            line: 0,
            offset: e.valid_up_to(),
            msg: "not valid utf-8".into(),
        })?;
        let mut dims: Option<(u16, u16)> = None;
        let mut seen_header = false;
        let mut records = Vec::new();
        let mut offset = 0usize;
        for (ln, raw) in text.split_inclusive('\n').enumerate() {
            let line_no = ln + 1;
            let line = raw.trim_end_matches(['\n', '\r']);
            let here = offset;
            offset += raw.len();
            let err = |msg: String| CmtcError::Parse {
                line: line_no,
                offset: here,
                msg,
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if !seen_header && dims.is_none() {
                    dims = parse_dims(comment).map_err(err)?;
                }
                continue;
            }
            if !seen_header {
                if line.trim() != CSV_HEADER {
                    return Err(err(format!("expected header `{CSV_HEADER}`, found `{line}`")));
                }
                seen_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", fields.len())));
            }
            let num = |i: usize, name: &str| -> Result<i64> {
                fields[i]
                    .parse::<i64>()
                    .map_err(|_| err(format!("field `{name}` is not an integer: `{}`", fields[i])))
            };
            let t = fields[0]
                .parse::<u64>()
                .map_err(|_| err(format!("field `t` is not an unsigned integer: `{}`", fields[0])))?;
            let x = num(1, "x")?;
            let y = num(2, "y")?;
            let p = num(3, "p")?;
            if !(0..=u16::MAX as i64).contains(&x) || !(0..=u16::MAX as i64).contains(&y) {
                return Err(err(format!("coordinate ({x}, {y}) outside the u16 range")));
            }
            if p != 1 && p != -1 {
                return Err(err(format!("polarity {p} is not 1 or -1")));
            }
            records.push(EventRecord {
                t,
                x: x as u16,
                y: y as u16,
                p: p as i8,
            });
        }
        if !seen_header {
            return Err(CmtcError::Parse {
                line: 1,
                offset: 0,
                msg: format!("missing header `{CSV_HEADER}`"),
            });
        }
        let (width, height) = dims.unwrap_or_else(|| {
            let w = records.iter().map(|r| r.x + 1).max().unwrap_or(0);
            let h = records.iter().map(|r| r.y + 1).max().unwrap_or(0);
            (w, h)
        });
        Self::new(width, height, records)
    }
}

fn parse_dims(comment: &str) -> std::result::Result<Option<(u16, u16)>, String> {
    let mut w = None;
    let mut h = None;
    for part in comment.split(',') {
        let Some((k, v)) = part.split_once('=') else {
            continue;
        };
        let v: u16 = v
            .trim()
            .parse()
            .map_err(|_| format!("bad sensor dimension `{}`", v.trim()))?;
        match k.trim() {
            "width" => w = Some(v),
            "height" => h = Some(v),
            _ => {}
        }
    }
    Ok(w.zip(h))
}

fn check_record(index: usize, r: &EventRecord, width: u16, height: u16) -> Result<()> {
    if r.x >= width || r.y >= height || (r.p != 1 && r.p != -1) {
        return Err(CmtcError::OutOfRange {
            index,
            record: r.to_string(),
            width,
            height,
        });
    }
    Ok(())
}

pub fn parse_events(path: impl AsRef<Path>, format: EventFormat) -> Result<EventStream> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(io_err(path))?;
    match format {
        EventFormat::Csv => EventStream::from_csv(&buf),
        EventFormat::Binary => EventStream::from_binary(&buf),
    }
}

pub fn write_events(stream: &EventStream, path: impl AsRef<Path>, format: EventFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        EventFormat::Csv => stream.to_csv(),
        EventFormat::Binary => stream.to_binary(),
    };
    std::fs::write(path, bytes).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_line_maps_fields() {
        let s = EventStream::from_csv(b"t,x,y,p\n1000,3,2,1\n").unwrap();
        assert_eq!(
            s.records(),
            &[EventRecord {
                t: 1000,
                x: 3,
                y: 2,
                p: 1
            }]
        );
        assert_eq!((s.width, s.height), (4, 3));
    }

    #[test]
    fn header_only_is_empty() {
        let s = EventStream::from_csv(b"# width=32,height=64\nt,x,y,p\n").unwrap();
        assert!(s.is_empty());
        assert_eq!((s.width, s.height), (32, 64));

        let empty = EventStream::new(32, 64, vec![]).unwrap();
        assert_eq!(empty.to_binary().len(), BINARY_HEADER_LEN);
        assert_eq!(EventStream::from_binary(&empty.to_binary()).unwrap(), empty);
        assert_eq!(empty.to_csv(), b"# width=32,height=64\nt,x,y,p\n");
    }

    #[test]
    fn malformed_line_reports_position() {
        let text = b"t,x,y,p\n1,1,1,1\n2,oops,1,1\n";
        match EventStream::from_csv(text) {
            Err(CmtcError::Parse { line, offset, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(offset, 16);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(EventStream::from_csv(b"t,x,y,p\n1,1,1,0\n").is_err());
        assert!(EventStream::from_csv(b"1,1,1,1\n").is_err());
    }

    #[test]
    fn out_of_range_names_the_record() {
        let err = EventStream::from_csv(b"# width=4,height=4\nt,x,y,p\n5,1,1,1\n9,4,0,-1\n").unwrap_err();
        match err {
            CmtcError::OutOfRange { index, record, .. } => {
                assert_eq!(index, 1);
                assert!(record.contains("x=4"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unsorted_input_is_stably_sorted() {
        let s = EventStream::from_csv(b"t,x,y,p\n5,0,0,1\n1,1,0,1\n5,2,0,-1\n1,3,0,-1\n").unwrap();
        let xs: Vec<u16> = s.records().iter().map(|r| r.x).collect();
        assert_eq!(xs, vec![1, 3, 0, 2]);
    }

    #[test]
    fn binary_rejects_corruption() {
        let s = EventStream::new(8, 8, vec![EventRecord { t: 1, x: 2, y: 3, p: -1 }]).unwrap();
        let mut b = s.to_binary();
        assert_eq!(EventStream::from_binary(&b).unwrap(), s);
        b[BINARY_HEADER_LEN + 12] = 0;
        assert!(EventStream::from_binary(&b).is_err());
        let b = s.to_binary();
        assert!(EventStream::from_binary(&b[..b.len() - 1]).is_err());
    }
}
