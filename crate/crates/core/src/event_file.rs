//! Text event-stream ingestion (`timestamp_us,x,y,polarity` per line) and binning into
//! binary frames.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::SpikeTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DvsEvent {
    pub timestamp_us: u64,
    pub x: u32,
    pub y: u32,
    pub polarity: u8,
}

/// How polarity maps onto the channel axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Polarity {
    /// One channel; polarity ignored.
    #[default]
    Merge,
    /// Two channels; polarity selects the channel.
    Split,
}

impl Polarity {
    pub fn channels(self) -> usize {
        match self {
            Polarity::Merge => 1,
            Polarity::Split => 2,
        }
    }
}

fn field<T: std::str::FromStr>(tok: Option<&str>, name: &str, line: usize) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    tok.trim().parse().map_err(|_| Error::Parse {
        line,
        msg: format!("field `{name}` is not an unsigned integer: {tok:?}"),
    })
}

/// Parse event records. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_events(reader: impl Read) -> Result<Vec<DvsEvent>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let timestamp_us = field(parts.next(), "timestamp_us", line_no)?;
        let x = field(parts.next(), "x", line_no)?;
        let y = field(parts.next(), "y", line_no)?;
        let polarity: u8 = field(parts.next(), "polarity", line_no)?;
        if parts.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected exactly 4 fields".into(),
            });
        }
        if polarity > 1 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("polarity must be 0 or 1, got {polarity}"),
            });
        }
        out.push(DvsEvent {
            timestamp_us,
            x,
            y,
            polarity,
        });
    }
    Ok(out)
}

/// Index of the equal-duration bin an event falls in.
///
/// The stream spans `[t_min, t_max]` inclusive (`t_max - t_min + 1` microseconds); bin `b`
/// covers `[t_min + b*span/T, t_min + (b+1)*span/T)`.
pub fn time_bin(ts: u64, t_min: u64, t_max: u64, bins: usize) -> usize {
    let span = (t_max - t_min + 1) as u128;
    (((ts - t_min) as u128 * bins as u128) / span) as usize
}

/// Bin events into `bins` frames of shape `(bins, 1, C, H, W)`. A pixel is 1 in a bin
/// if at least one event landed there.
pub fn bin_events(
    events: &[DvsEvent],
    bins: usize,
    resolution: (usize, usize),
    polarity: Polarity,
) -> Result<SpikeTensor> {
    if bins == 0 {
        return Err(Error::Arg("number of time bins must be >= 1".into()));
    }
    let (h, w) = resolution;
    let c = polarity.channels();
    let mut data = vec![0u8; bins * c * h * w];
    if let (Some(t_min), Some(t_max)) = (
        events.iter().map(|e| e.timestamp_us).min(),
        events.iter().map(|e| e.timestamp_us).max(),
    ) {
        for (i, e) in events.iter().enumerate() {
            let (x, y) = (e.x as usize, e.y as usize);
            if x >= w || y >= h {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("pixel ({x}, {y}) outside {w}x{h} sensor"),
                });
            }
            let b = time_bin(e.timestamp_us, t_min, t_max, bins);
            let ch = match polarity {
                Polarity::Merge => 0,
                Polarity::Split => e.polarity as usize,
            };
            data[((b * c + ch) * h + y) * w + x] = 1;
        }
    }
    SpikeTensor::new(vec![bins, 1, c, h, w], data)
}

/// Load an event file and bin it into `bins` binary frames.
pub fn load_event_file(
    path: impl AsRef<Path>,
    bins: usize,
    resolution: (usize, usize),
    polarity: Polarity,
) -> Result<SpikeTensor> {
    let events = parse_events(File::open(path)?)?;
    bin_events(&events, bins, resolution, polarity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn empty_file_gives_zero_frames() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let s = load_event_file(f.path(), 2, (4, 4), Polarity::Merge).unwrap();
        assert_eq!(s.shape(), &[2, 1, 1, 4, 4]);
        assert_eq!(s.count_ones(), 0);
    }

    #[test]
    fn duplicate_events_binarize() {
        let ev = parse_events("10,1,2,1\n10,1,2,1\n".as_bytes()).unwrap();
        let s = bin_events(&ev, 1, (4, 4), Polarity::Merge).unwrap();
        assert_eq!(s.count_ones(), 1);
        assert!(s.get(2 * 4 + 1));
    }

    #[test]
    fn polarity_split_channels() {
        let ev = parse_events("0,0,0,0\n5,0,0,1\n".as_bytes()).unwrap();
        let s = bin_events(&ev, 1, (2, 2), Polarity::Split).unwrap();
        assert_eq!(s.shape(), &[1, 1, 2, 2, 2]);
        assert!(s.get(0) && s.get(4));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let err = parse_events("1,2,3,0\n\n4,x,1,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_events("1,2,3,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_events("1,2,3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn file_roundtrip() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "0,0,0,1").unwrap();
        writeln!(f, "99,3,3,0").unwrap();
        let s = load_event_file(f.path(), 2, (4, 4), Polarity::Merge).unwrap();
        assert!(s.get(0));
        assert!(s.get(16 + 15));
        assert_eq!(s.count_ones(), 2);
    }
}
