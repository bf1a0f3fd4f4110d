use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::{Event, GroundTruthBox, Polarity, SensorGeometry};
use crate::error::{Error, Result};

const BIN_MAGIC: &[u8; 4] = b"EVB1";
const BIN_HEADER_LEN: usize = 4 + 2 + 2 + 8;
const BIN_RECORD_LEN: usize = 2 + 2 + 8 + 1;

/// On-disk event stream encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    /// `# evcsv v1 W=<int> H=<int>` header then `x,y,t_us,p` lines.
    Csv,
    /// `EVB1` magic, u16 W, u16 H, u64 count, then packed little-endian
    /// `(u16 x, u16 y, u64 t_us, i8 p)` records.
    Bin,
}

impl EventFormat {
    /// Guesses the format from a file extension (`.bin`/`.evb` are binary,
    /// anything else is CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("evb") => EventFormat::Bin,
            _ => EventFormat::Csv,
        }
    }
}

impl FromStr for EventFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "bin" => Ok(EventFormat::Bin),
            other => Err(Error::Value(format!(
                "unknown event format `{other}` (expected csv or bin)"
            ))),
        }
    }
}

pub fn parse_event_file(path: &Path, format: EventFormat) -> Result<(Vec<Event>, SensorGeometry)> {
    match format {
        EventFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_csv(path, &text)
        }
        EventFormat::Bin => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_bin(path, &bytes)
        }
    }
}

pub fn write_event_file(
    events: &[Event],
    geometry: SensorGeometry,
    path: &Path,
    format: EventFormat,
) -> Result<()> {
    let bytes = match format {
        EventFormat::Csv => encode_csv(events, geometry).into_bytes(),
        EventFormat::Bin => encode_bin(events, geometry),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn parse_header(path: &Path, line: &str) -> Result<SensorGeometry> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some("#") || parts.next() != Some("evcsv") || parts.next() != Some("v1") {
        return Err(parse_error(path, 1, "expected header `# evcsv v1 W=<int> H=<int>`"));
    }
    let mut width = None;
    let mut height = None;
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| parse_error(path, 1, format!("malformed header field `{part}`")))?;
        let value: u16 = value
            .parse()
            .map_err(|_| parse_error(path, 1, format!("bad header value `{part}`")))?;
        match key {
            "W" => width = Some(value),
            "H" => height = Some(value),
            _ => return Err(parse_error(path, 1, format!("unknown header field `{key}`"))),
        }
    }
    match (width, height) {
        (Some(w), Some(h)) => {
            SensorGeometry::new(w, h).map_err(|e| parse_error(path, 1, e.to_string()))
        }
        _ => Err(parse_error(path, 1, "header must declare both W and H")),
    }
}

fn parse_csv(path: &Path, text: &str) -> Result<(Vec<Event>, SensorGeometry)> {
    let mut lines = text.lines().enumerate();
    let geometry = match lines.next() {
        Some((_, header)) => parse_header(path, header)?,
        None => return Err(parse_error(path, 1, "missing header")),
    };
    let mut events = Vec::new();
    let mut prev_t = 0u64;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 4 fields `x,y,t_us,p`, found {}", fields.len()),
            ));
        }
        let x: u16 = fields[0]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad x `{}`", fields[0])))?;
        let y: u16 = fields[1]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad y `{}`", fields[1])))?;
        let t: u64 = fields[2]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad timestamp `{}`", fields[2])))?;
        let p: i64 = fields[3]
            .parse()
            .map_err(|_| parse_error(path, lineno, format!("bad polarity `{}`", fields[3])))?;
        let p = Polarity::from_sign(p).map_err(|_| {
            Error::Value(format!(
                "{}: line {lineno}: polarity must be -1 or 1, got {p}",
                path.display()
            ))
        })?;
        let ev = Event::new(x, y, t, p);
        if !geometry.contains(&ev) {
            return Err(parse_error(
                path,
                lineno,
                format!(
                    "event ({x}, {y}) outside {}x{} sensor",
                    geometry.width(),
                    geometry.height()
                ),
            ));
        }
        if t < prev_t {
            return Err(Error::Ordering {
                path: path.to_path_buf(),
                record: events.len() + 1,
                t,
                prev: prev_t,
            });
        }
        prev_t = t;
        events.push(ev);
    }
    Ok((events, geometry))
}

fn encode_csv(events: &[Event], geometry: SensorGeometry) -> String {
    let mut out = String::with_capacity(32 + events.len() * 16);
    let _ = writeln!(
        out,
        "# evcsv v1 W={} H={}",
        geometry.width(),
        geometry.height()
    );
    for ev in events {
        let _ = writeln!(out, "{},{},{},{}", ev.x, ev.y, ev.t, ev.p.sign());
    }
    out
}

fn parse_bin(path: &Path, bytes: &[u8]) -> Result<(Vec<Event>, SensorGeometry)> {
    if bytes.len() < BIN_HEADER_LEN || &bytes[..4] != BIN_MAGIC {
        return Err(parse_error(path, 0, "missing EVB1 header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let geometry = SensorGeometry::new(width, height).map_err(|e| parse_error(path, 0, e.to_string()))?;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let body = &bytes[BIN_HEADER_LEN..];
    let expected = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(BIN_RECORD_LEN));
    if expected != Some(body.len()) {
        return Err(parse_error(
            path,
            0,
            format!(
                "header declares {count} records but body holds {} bytes",
                body.len()
            ),
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    let mut prev_t = 0u64;
    for (i, rec) in body.chunks_exact(BIN_RECORD_LEN).enumerate() {
        let record = i + 1;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().expect("8-byte slice"));
        let p = Polarity::from_sign(i64::from(rec[12] as i8)).map_err(|e| {
            Error::Value(format!("{}: record {record}: {e}", path.display()))
        })?;
        let ev = Event::new(x, y, t, p);
        if !geometry.contains(&ev) {
            return Err(parse_error(
                path,
                record,
                format!("event ({x}, {y}) outside sensor"),
            ));
        }
        if t < prev_t {
            return Err(Error::Ordering {
                path: path.to_path_buf(),
                record,
                t,
                prev: prev_t,
            });
        }
        prev_t = t;
        events.push(ev);
    }
    Ok((events, geometry))
}

fn encode_bin(events: &[Event], geometry: SensorGeometry) -> Vec<u8> {
    let mut out = Vec::with_capacity(BIN_HEADER_LEN + events.len() * BIN_RECORD_LEN);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&(geometry.width() as u16).to_le_bytes());
    out.extend_from_slice(&(geometry.height() as u16).to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for ev in events {
        out.extend_from_slice(&ev.x.to_le_bytes());
        out.extend_from_slice(&ev.y.to_le_bytes());
        out.extend_from_slice(&ev.t.to_le_bytes());
        out.push(ev.p.sign() as u8);
    }
    out
}

/// Writes `window_idx,class_id,x_min,y_min,x_max,y_max` lines.
pub fn write_gt_file(boxes: &[GroundTruthBox], path: &Path) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.window, b.class_id, b.x_min, b.y_min, b.x_max, b.y_max
        );
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_gt_file(path: &Path) -> Result<Vec<GroundTruthBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<i64> = line
            .split(',')
            .map(|f| f.trim().parse::<i64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_error(path, lineno, format!("malformed GT line `{line}`")))?;
        if fields.len() != 6 || fields.iter().any(|&v| v < 0) {
            return Err(parse_error(
                path,
                lineno,
                "expected 6 non-negative integers `window_idx,class_id,x_min,y_min,x_max,y_max`",
            ));
        }
        let b = GroundTruthBox {
            window: fields[0] as usize,
            class_id: fields[1] as u16,
            x_min: fields[2] as u16,
            y_min: fields[3] as u16,
            x_max: fields[4] as u16,
            y_max: fields[5] as u16,
        };
        if b.x_min >= b.x_max || b.y_min >= b.y_max {
            return Err(parse_error(path, lineno, "degenerate box"));
        }
        boxes.push(b);
    }
    Ok(boxes)
}
