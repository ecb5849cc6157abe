//! Event and pose files.
//!
//! Event CSV is header-free `t,x,y,p` with `p` in `{-1, 1}` (or `{0, 1}`, 0
//! meaning negative). The binary format is `EVT1`, width and height as
//! little-endian `u16`, then 13-byte records `t:u64 x:u16 y:u16 p:i8`.
//! Pose CSV is header-free `t,a,b` where `(a, b)` is lat/lon or
//! easting/northing depending on the dataset's coordinate mode.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use evsnn_core::event::{CoordMode, Event, EventStream, GeoPose, Resolution};

use crate::error::{Error, Result};

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
const HEADER_LEN: usize = 8;
const RECORD_LEN: usize = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Binary,
}

impl EventFormat {
    /// `.bin`/`.evt` are binary, anything else CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("bin") | Some("evt") => EventFormat::Binary,
            _ => EventFormat::Csv,
        }
    }
}

/// A loaded stream plus the number of events that had to be reordered.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded {
    pub stream: EventStream,
    pub reordered: usize,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_event(path: &Path, at: impl Fn() -> String, e: &Event, res: Resolution) -> Result<()> {
    if e.x >= res.width || e.y >= res.height {
        return Err(Error::format(
            path,
            at(),
            format!("coordinate ({}, {}) outside {}x{}", e.x, e.y, res.width, res.height),
        ));
    }
    Ok(())
}

fn parse_polarity(s: &str) -> Option<i8> {
    match s {
        "1" | "+1" => Some(1),
        "-1" | "0" => Some(-1),
        _ => None,
    }
}

/// Load an event file. `resolution` is required for CSV and, when given,
/// must match the header of a binary file.
pub fn load_events(path: &Path, format: EventFormat, resolution: Option<Resolution>) -> Result<Loaded> {
    let bytes = read(path)?;
    let (events, res) = match format {
        EventFormat::Csv => {
            let res = resolution.ok_or_else(|| Error::Config("CSV events need a resolution".into()))?;
            (parse_csv(path, &bytes, res)?, res)
        }
        EventFormat::Binary => parse_binary(path, &bytes, resolution)?,
    };
    let (stream, reordered) = EventStream::new(events, res)?;
    Ok(Loaded { stream, reordered })
}

fn parse_csv(path: &Path, bytes: &[u8], res: Resolution) -> Result<Vec<Event>> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::format(path, format!("byte {}", e.valid_up_to()), "not UTF-8"))?;
    let mut events = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = || format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(path, at(), format!("expected 4 fields, found {}", fields.len())));
        }
        let bad = |what: &str| Error::format(path, at(), format!("bad {what} {line:?}"));
        let t = fields[0].parse::<u64>().map_err(|_| bad("timestamp"))?;
        let x = fields[1].parse::<u16>().map_err(|_| bad("x"))?;
        let y = fields[2].parse::<u16>().map_err(|_| bad("y"))?;
        let p = parse_polarity(fields[3]).ok_or_else(|| bad("polarity"))?;
        let e = Event::new(t, x, y, p);
        check_event(path, at, &e, res)?;
        events.push(e);
    }
    Ok(events)
}

fn parse_binary(path: &Path, bytes: &[u8], expected: Option<Resolution>) -> Result<(Vec<Event>, Resolution)> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != EVENT_MAGIC {
        return Err(Error::format(path, "offset 0", "missing EVT1 header"));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let res = Resolution::new(u16_at(4), u16_at(6));
    if let Some(r) = expected {
        if r != res {
            return Err(Error::format(
                path,
                "offset 4",
                format!("resolution {}x{} differs from expected {}x{}", res.width, res.height, r.width, r.height),
            ));
        }
    }
    let body = &bytes[HEADER_LEN..];
    if body.len() % RECORD_LEN != 0 {
        let off = HEADER_LEN + body.len() / RECORD_LEN * RECORD_LEN;
        return Err(Error::format(path, format!("offset {off}"), "truncated record"));
    }
    let mut events = Vec::with_capacity(body.len() / RECORD_LEN);
    for (i, r) in body.chunks_exact(RECORD_LEN).enumerate() {
        let off = HEADER_LEN + i * RECORD_LEN;
        let at = || format!("offset {off}");
        let t = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
        let x = u16::from_le_bytes([r[8], r[9]]);
        let y = u16::from_le_bytes([r[10], r[11]]);
        let p = r[12] as i8;
        if p != 1 && p != -1 {
            return Err(Error::format(path, at(), format!("polarity {p} not in {{-1, 1}}")));
        }
        let e = Event::new(t, x, y, p);
        check_event(path, at, &e, res)?;
        events.push(e);
    }
    Ok((events, res))
}

pub fn encode_csv(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(stream.len() * 16);
    for e in stream.events() {
        writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p).expect("write to Vec");
    }
    out
}

pub fn encode_binary(stream: &EventStream) -> Vec<u8> {
    let res = stream.resolution();
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&res.width.to_le_bytes());
    out.extend_from_slice(&res.height.to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
    }
    out
}

pub fn save_events(path: &Path, stream: &EventStream, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Csv => encode_csv(stream),
        EventFormat::Binary => encode_binary(stream),
    };
    write(path, &bytes)
}

pub fn load_poses(path: &Path, mode: CoordMode) -> Result<Vec<GeoPose>> {
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::format(path, format!("byte {}", e.valid_up_to()), "not UTF-8"))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::format(path, at, format!("expected 3 fields, found {}", fields.len())));
        }
        let t = fields[0].parse::<u64>();
        let a = fields[1].parse::<f64>();
        let b = fields[2].parse::<f64>();
        let (Ok(t), Ok(a), Ok(b)) = (t, a, b) else {
            return Err(Error::format(path, at, format!("malformed pose {line:?}")));
        };
        let pose = match mode {
            CoordMode::Geographic => GeoPose::geographic(t, a, b),
            CoordMode::Planar => GeoPose::planar(t, a, b),
        }
        .map_err(|e| Error::format(path, at.clone(), e.to_string()))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn encode_poses(poses: &[GeoPose]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in poses {
        // `{:?}` prints the shortest representation that round-trips.
        writeln!(out, "{},{:?},{:?}", p.t, p.a, p.b).expect("write to Vec");
    }
    out
}

pub fn save_poses(path: &Path, poses: &[GeoPose]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&encode_poses(poses)).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
