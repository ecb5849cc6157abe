//! Events, time-windowed volumes, poses, and the synthetic dataset generator.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{label, Stream};

/// Mean Earth radius used by the haversine distance, meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// One camera event. Timestamps are microseconds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// Either `-1` or `+1`.
    pub p: i8,
}

impl Event {
    pub fn new(t: u64, x: u16, y: u16, p: i8) -> Self {
        Self { t, x, y, p }
    }

    #[inline]
    pub fn is_positive(&self) -> bool {
        self.p > 0
    }
}

/// Sensor size in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Resolution {
    pub width: u16,
    pub height: u16,
}

impl Resolution {
    pub fn new(width: u16, height: u16) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

fn validate_event(e: &Event, res: Resolution, index: usize) -> Result<()> {
    if e.x >= res.width || e.y >= res.height {
        return Err(Error::InvalidInput(format!(
            "event {index}: coordinate ({}, {}) outside {}x{}",
            e.x, e.y, res.width, res.height
        )));
    }
    if e.p != 1 && e.p != -1 {
        return Err(Error::InvalidInput(format!("event {index}: polarity {} not in {{-1, +1}}", e.p)));
    }
    Ok(())
}

/// Time-ordered event sequence from one sensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    resolution: Resolution,
}

impl EventStream {
    /// Validate and build. Out-of-order input is stable-sorted by timestamp;
    /// the second value counts events that arrived earlier than their predecessor.
    pub fn new(mut events: Vec<Event>, resolution: Resolution) -> Result<(Self, usize)> {
        let mut reordered = 0;
        let mut max_t = 0;
        for (i, e) in events.iter().enumerate() {
            validate_event(e, resolution, i)?;
            if e.t < max_t {
                reordered += 1;
            }
            max_t = max_t.max(e.t);
        }
        if reordered > 0 {
            events.sort_by_key(|e| e.t);
        }
        Ok((Self { events, resolution }, reordered))
    }

    pub fn empty(resolution: Resolution) -> Self {
        Self { events: Vec::new(), resolution }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// How pose coordinates are interpreted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CoordMode {
    /// Latitude/longitude in degrees.
    Geographic,
    /// Easting/northing in meters.
    Planar,
}

impl CoordMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            CoordMode::Geographic => "geographic",
            CoordMode::Planar => "planar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "geographic" => Ok(CoordMode::Geographic),
            "planar" => Ok(CoordMode::Planar),
            other => Err(Error::Config(format!("unknown coordinate mode {other:?}"))),
        }
    }
}

/// A timestamped position. In geographic mode `a`/`b` are lat/lon degrees,
/// in planar mode easting/northing meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeoPose {
    pub t: u64,
    pub a: f64,
    pub b: f64,
    pub mode: CoordMode,
}

impl GeoPose {
    pub fn geographic(t: u64, lat: f64, lon: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            return Err(Error::InvalidInput(format!("lat/lon ({lat}, {lon}) out of range")));
        }
        Ok(Self { t, a: lat, b: lon, mode: CoordMode::Geographic })
    }

    pub fn planar(t: u64, easting: f64, northing: f64) -> Result<Self> {
        if !easting.is_finite() || !northing.is_finite() {
            return Err(Error::InvalidInput("planar pose must be finite".into()));
        }
        Ok(Self { t, a: easting, b: northing, mode: CoordMode::Planar })
    }
}

/// Distance in meters: haversine on a 6371 km sphere, or Euclidean in planar mode.
pub fn geo_distance(p: &GeoPose, q: &GeoPose) -> Result<f64> {
    if p.mode != q.mode {
        return Err(Error::MixedCoordinateModes);
    }
    Ok(match p.mode {
        CoordMode::Planar => {
            let (dx, dy) = (p.a - q.a, p.b - q.b);
            math::sqrt(dx * dx + dy * dy)
        }
        CoordMode::Geographic => {
            let to_rad = core::f64::consts::PI / 180.0;
            let (lat1, lat2) = (p.a * to_rad, q.a * to_rad);
            let dlat = lat2 - lat1;
            let dlon = (q.b - p.b) * to_rad;
            let s1 = math::sin(dlat / 2.0);
            let s2 = math::sin(dlon / 2.0);
            let h = s1 * s1 + math::cos(lat1) * math::cos(lat2) * s2 * s2;
            2.0 * EARTH_RADIUS_M * math::asin(math::sqrt(h.clamp(0.0, 1.0)))
        }
    })
}

/// Events of one time window plus its ground-truth pose.
#[derive(Clone, Debug, PartialEq)]
pub struct EventVolume {
    events: Vec<Event>,
    t_start: u64,
    t_end: u64,
    resolution: Resolution,
    pub pose: Option<GeoPose>,
}

impl EventVolume {
    pub fn new(
        events: Vec<Event>,
        t_start: u64,
        t_end: u64,
        resolution: Resolution,
        pose: Option<GeoPose>,
    ) -> Result<Self> {
        if t_end <= t_start {
            return Err(Error::InvalidInput(format!("volume end {t_end} must exceed start {t_start}")));
        }
        for (i, e) in events.iter().enumerate() {
            validate_event(e, resolution, i)?;
            if e.t < t_start || e.t >= t_end {
                return Err(Error::InvalidInput(format!(
                    "event {i} at t={} outside volume [{t_start}, {t_end})",
                    e.t
                )));
            }
        }
        Ok(Self { events, t_start, t_end, resolution, pose })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn t_start(&self) -> u64 {
        self.t_start
    }

    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    /// Volumes without events are kept in slicing output but flagged here.
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn midpoint(&self) -> f64 {
        (self.t_start as f64 + self.t_end as f64) / 2.0
    }
}

/// Seconds to whole microseconds, rejecting non-positive intervals.
pub fn interval_micros(interval_s: f64) -> Result<u64> {
    if !(interval_s > 0.0) || !interval_s.is_finite() {
        return Err(Error::Config(format!("volume interval must be positive, got {interval_s}")));
    }
    let us = math::round(interval_s * 1e6);
    if us < 1.0 {
        return Err(Error::Config(format!("volume interval {interval_s}s is below 1us")));
    }
    Ok(us as u64)
}

/// Index of the pose nearest in time to `t`; ties go to the earlier pose.
/// `poses` must be sorted by time.
fn nearest_pose(poses: &[GeoPose], t: f64) -> Option<usize> {
    if poses.is_empty() {
        return None;
    }
    let after = poses.partition_point(|p| (p.t as f64) < t);
    let mut best = None;
    let mut best_d = f64::INFINITY;
    for i in [after.wrapping_sub(1), after] {
        if let Some(p) = poses.get(i) {
            let d = (p.t as f64 - t).abs();
            if d < best_d {
                best = Some(i);
                best_d = d;
            }
        }
    }
    best
}

/// Cut a stream into consecutive non-overlapping windows of `interval_s`
/// starting at the first event, covering the last event. Empty windows are
/// kept. Each volume takes the pose nearest to its midpoint.
pub fn slice_volumes(stream: &EventStream, interval_s: f64, poses: &[GeoPose]) -> Result<Vec<EventVolume>> {
    let width = interval_micros(interval_s)?;
    let events = stream.events();
    let (Some(first), Some(last)) = (events.first(), events.last()) else {
        return Ok(Vec::new());
    };
    let mut sorted_poses = poses.to_vec();
    sorted_poses.sort_by_key(|p| p.t);

    let n_windows = ((last.t - first.t) / width + 1) as usize;
    let mut out = Vec::with_capacity(n_windows);
    let mut cursor = 0;
    for w in 0..n_windows {
        let start = first.t + w as u64 * width;
        let end = start + width;
        let from = cursor;
        while cursor < events.len() && events[cursor].t < end {
            cursor += 1;
        }
        let mid = (start as f64 + end as f64) / 2.0;
        let pose = nearest_pose(&sorted_poses, mid).map(|i| sorted_poses[i]);
        out.push(EventVolume {
            events: events[from..cursor].to_vec(),
            t_start: start,
            t_end: end,
            resolution: stream.resolution(),
            pose,
        });
    }
    Ok(out)
}

/// Parameters of the synthetic multi-traverse dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_places: usize,
    pub traverses: usize,
    pub resolution: Resolution,
    /// Number of distinct structure pixels per place (one signal event each).
    pub events_per_place: usize,
    /// Noise events per signal event, spread uniformly over the window.
    pub noise_rate: f64,
    pub seed: u64,
    pub interval_s: f64,
    /// Along-track distance between consecutive places, meters.
    pub spacing_m: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_places: 20,
            traverses: 2,
            resolution: Resolution::new(32, 32),
            events_per_place: 64,
            noise_rate: 0.1,
            seed: 7,
            interval_s: 0.25,
            spacing_m: 100.0,
        }
    }
}

/// One generated traverse.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthTraverse {
    pub name: String,
    pub stream: EventStream,
    pub poses: Vec<GeoPose>,
}

/// In-memory result of [`synth_dataset`]; the `evsnn` crate writes it to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub traverses: Vec<SynthTraverse>,
    pub resolution: Resolution,
    pub interval_s: f64,
    pub coord_mode: CoordMode,
    /// Structure pixels `(x, y)` of each place.
    pub structure: Vec<Vec<(u16, u16)>>,
}

/// Half-width of the per-traverse along-track pose offset, meters.
const POSE_JITTER_M: f64 = 5.0;
/// Half-width of per-traverse event timing jitter, as a fraction of the window.
const TIME_JITTER: f64 = 0.05;

/// Segments in a row that add no new pixel before switching to single pixels.
const MAX_IDLE_SEGMENTS: usize = 64;
/// Fraction of the window an edge takes to sweep along its segment.
const SWEEP: f64 = 0.3;

struct Place {
    pixels: Vec<(u16, u16)>,
    polarity: Vec<i8>,
    phase: Vec<f64>,
}

/// Rasterize one edge: a segment of random position, orientation and length
/// with one polarity, its pixels firing in order along the segment.
fn add_segment(place: &mut Place, used: &mut [bool], s: &mut Stream, res: Resolution, cap: usize) {
    let (w, h) = (res.width as f64, res.height as f64);
    let (cx, cy) = (s.range_f64(0.0, w), s.range_f64(0.0, h));
    let theta = s.range_f64(0.0, core::f64::consts::PI);
    let len = s.range_f64(6.0, 14.0).min(w.max(h));
    let polarity = if s.below(2) == 0 { -1 } else { 1 };
    let start = s.range_f64(0.0, 0.9 - SWEEP);
    let (dx, dy) = (math::cos(theta), math::sin(theta));
    let n = len as usize;
    for i in 0..n {
        if place.pixels.len() >= cap {
            return;
        }
        let u = i as f64 - len / 2.0;
        let (x, y) = (math::floor(cx + u * dx), math::floor(cy + u * dy));
        if x < 0.0 || y < 0.0 || x >= w || y >= h {
            continue;
        }
        let idx = y as usize * res.width as usize + x as usize;
        if used[idx] {
            continue;
        }
        used[idx] = true;
        place.pixels.push((x as u16, y as u16));
        place.polarity.push(polarity);
        place.phase.push(start + SWEEP * i as f64 / n as f64);
    }
}

/// Generate a deterministic place-recognition dataset.
///
/// Place `k` occupies window `[k*I, (k+1)*I)` of every traverse. It owns a
/// seed-derived set of structure pixels laid out as short edges, each edge
/// with one polarity and sweeping along its length within the window. Every
/// traverse re-emits them with fresh timing jitter plus uniform noise events. The first structure pixel fires exactly
/// at the window start so slicing recovers the place windows.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_places < 2 {
        return Err(Error::Config("n_places must be >= 2".into()));
    }
    if cfg.traverses < 2 {
        return Err(Error::Config("traverses must be >= 2".into()));
    }
    if cfg.events_per_place == 0 {
        return Err(Error::Config("events_per_place must be >= 1".into()));
    }
    if cfg.events_per_place > cfg.resolution.pixels() {
        return Err(Error::Config(format!(
            "resolution {}x{} cannot host {} distinct structure pixels",
            cfg.resolution.width, cfg.resolution.height, cfg.events_per_place
        )));
    }
    if !(cfg.noise_rate >= 0.0) || !cfg.noise_rate.is_finite() {
        return Err(Error::Config("noise_rate must be a non-negative number".into()));
    }
    if !(cfg.spacing_m > 2.0 * POSE_JITTER_M) {
        return Err(Error::Config("place spacing must exceed twice the pose jitter".into()));
    }
    let width_us = interval_micros(cfg.interval_s)?;
    let res = cfg.resolution;
    let (w, h) = (res.width as u64, res.height as u64);

    let places: Vec<Place> = (0..cfg.n_places)
        .map(|k| {
            let mut s = Stream::keyed(cfg.seed, &[label("synth.place"), k as u64]);
            let mut used = vec![false; res.pixels()];
            let mut place = Place { pixels: Vec::new(), polarity: Vec::new(), phase: Vec::new() };
            let mut idle = 0;
            while place.pixels.len() < cfg.events_per_place {
                let before = place.pixels.len();
                if idle < MAX_IDLE_SEGMENTS {
                    add_segment(&mut place, &mut used, &mut s, res, cfg.events_per_place);
                } else {
                    // Nearly full sensor: fall back to isolated pixels.
                    let idx = s.below(w * h) as usize;
                    if !used[idx] {
                        used[idx] = true;
                        place.pixels.push(((idx as u64 % w) as u16, (idx as u64 / w) as u16));
                        place.polarity.push(if s.below(2) == 0 { -1 } else { 1 });
                        place.phase.push(s.range_f64(0.0, 0.9));
                    }
                }
                idle = if place.pixels.len() > before { 0 } else { idle + 1 };
            }
            place.phase[0] = 0.0;
            place
        })
        .collect();

    let n_noise = math::round(cfg.noise_rate * cfg.events_per_place as f64) as usize;
    let mut traverses = Vec::with_capacity(cfg.traverses);
    for r in 0..cfg.traverses {
        let mut events = Vec::new();
        let mut poses = Vec::with_capacity(cfg.n_places);
        for (k, place) in places.iter().enumerate() {
            let start = k as u64 * width_us;
            let mut s = Stream::keyed(cfg.seed, &[label("synth.traverse"), r as u64, k as u64]);
            let mut window = Vec::with_capacity(place.pixels.len() + n_noise);
            for (j, &(x, y)) in place.pixels.iter().enumerate() {
                let frac = if j == 0 {
                    0.0
                } else {
                    (place.phase[j] + s.range_f64(-TIME_JITTER, TIME_JITTER)).clamp(0.0, 0.999)
                };
                let t = start + (frac * width_us as f64) as u64;
                window.push(Event::new(t, x, y, place.polarity[j]));
            }
            for _ in 0..n_noise {
                let x = s.below(w) as u16;
                let y = s.below(h) as u16;
                let p = if s.below(2) == 0 { -1 } else { 1 };
                let t = start + s.below(width_us);
                window.push(Event::new(t, x, y, p));
            }
            window.sort_by_key(|e| e.t);
            events.extend(window);
            let offset = s.range_f64(-POSE_JITTER_M, POSE_JITTER_M);
            poses.push(GeoPose::planar(start + width_us / 2, k as f64 * cfg.spacing_m + offset, 0.0)?);
        }
        let (stream, _) = EventStream::new(events, res)?;
        traverses.push(SynthTraverse { name: format!("traverse{r}"), stream, poses });
    }
    Ok(SynthDataset {
        traverses,
        resolution: res,
        interval_s: cfg.interval_s,
        coord_mode: CoordMode::Planar,
        structure: places.into_iter().map(|p| p.pixels).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res32() -> Resolution {
        Resolution::new(32, 32)
    }

    #[test]
    fn stream_rejects_bad_events() {
        assert!(EventStream::new(vec![Event::new(0, 32, 0, 1)], res32()).is_err());
        assert!(EventStream::new(vec![Event::new(0, 0, 0, 0)], res32()).is_err());
        assert!(EventStream::new(vec![Event::new(0, 0, 0, 2)], res32()).is_err());
    }

    #[test]
    fn unsorted_stream_is_stable_sorted_and_counted() {
        let evs = vec![Event::new(5, 0, 0, 1), Event::new(3, 1, 0, 1), Event::new(3, 2, 0, -1), Event::new(9, 0, 0, 1)];
        let (s, reordered) = EventStream::new(evs, res32()).unwrap();
        assert_eq!(reordered, 2);
        let xs: Vec<u16> = s.events().iter().map(|e| e.x).collect();
        assert_eq!(xs, vec![1, 2, 0, 0]);
    }

    #[test]
    fn slicing_partitions_timeline() {
        let evs = vec![Event::new(0, 0, 0, 1), Event::new(100_000, 1, 1, -1), Event::new(300_000, 2, 2, 1)];
        let (s, _) = EventStream::new(evs, res32()).unwrap();
        let vols = slice_volumes(&s, 0.25, &[]).unwrap();
        assert_eq!(vols.len(), 2);
        assert_eq!(vols[0].events().len(), 2);
        assert_eq!(vols[1].events().len(), 1);
        assert_eq!((vols[1].t_start(), vols[1].t_end()), (250_000, 500_000));
        assert!(vols.iter().all(|v| v.pose.is_none()));
    }

    #[test]
    fn slicing_edge_cases() {
        let empty = EventStream::empty(res32());
        assert!(slice_volumes(&empty, 0.25, &[]).unwrap().is_empty());
        assert!(slice_volumes(&empty, 0.0, &[]).is_err());
        let (one, _) = EventStream::new(vec![Event::new(42, 0, 0, 1)], res32()).unwrap();
        let v = slice_volumes(&one, 0.25, &[]).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].events().len(), 1);
    }

    #[test]
    fn empty_windows_are_kept() {
        let evs = vec![Event::new(0, 0, 0, 1), Event::new(600_000, 1, 1, -1)];
        let (s, _) = EventStream::new(evs, res32()).unwrap();
        let vols = slice_volumes(&s, 0.25, &[]).unwrap();
        assert_eq!(vols.len(), 3);
        assert!(vols[1].is_empty());
    }

    #[test]
    fn pose_at_midpoint_is_assigned_and_ties_go_earlier() {
        let (s, _) = EventStream::new(vec![Event::new(0, 0, 0, 1)], res32()).unwrap();
        let poses = [
            GeoPose::planar(0, 0.0, 0.0).unwrap(),
            GeoPose::planar(125_000, 1.0, 0.0).unwrap(),
            GeoPose::planar(300_000, 2.0, 0.0).unwrap(),
        ];
        let v = slice_volumes(&s, 0.25, &poses).unwrap();
        assert_eq!(v[0].pose.unwrap().a, 1.0);
        let tie = [GeoPose::planar(100_000, 1.0, 0.0).unwrap(), GeoPose::planar(150_000, 2.0, 0.0).unwrap()];
        let v = slice_volumes(&s, 0.25, &tie).unwrap();
        assert_eq!(v[0].pose.unwrap().a, 1.0);
    }

    #[test]
    fn distances() {
        let a = GeoPose::geographic(0, 0.0, 0.0).unwrap();
        let b = GeoPose::geographic(0, 0.0, 180.0).unwrap();
        assert_eq!(geo_distance(&a, &a).unwrap(), 0.0);
        let half = geo_distance(&a, &b).unwrap();
        assert!((half - core::f64::consts::PI * EARTH_RADIUS_M).abs() < 1.0);
        assert!((half - 20_015_086.8).abs() < 1.0);
        let p = GeoPose::planar(0, 0.0, 0.0).unwrap();
        let q = GeoPose::planar(0, 3.0, 4.0).unwrap();
        assert_eq!(geo_distance(&p, &q).unwrap(), 5.0);
        assert_eq!(geo_distance(&a, &p), Err(Error::MixedCoordinateModes));
        assert!(GeoPose::geographic(0, 91.0, 0.0).is_err());
    }

    #[test]
    fn synth_preconditions() {
        let mut c = SynthConfig { n_places: 1, ..Default::default() };
        assert!(synth_dataset(&c).is_err());
        c.n_places = 2;
        c.traverses = 1;
        assert!(synth_dataset(&c).is_err());
        c.traverses = 2;
        c.resolution = Resolution::new(4, 4);
        c.events_per_place = 17;
        assert!(synth_dataset(&c).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let c = SynthConfig::default();
        assert_eq!(synth_dataset(&c).unwrap(), synth_dataset(&c).unwrap());
        let d = SynthConfig { seed: 8, ..c };
        assert_ne!(synth_dataset(&d).unwrap().traverses[0], synth_dataset(&SynthConfig::default()).unwrap().traverses[0]);
    }

    #[test]
    fn noiseless_events_fall_on_structure_pixels() {
        let c = SynthConfig { noise_rate: 0.0, ..Default::default() };
        let ds = synth_dataset(&c).unwrap();
        let tr = &ds.traverses[1];
        let vols = slice_volumes(&tr.stream, c.interval_s, &tr.poses).unwrap();
        assert_eq!(vols.len(), c.n_places);
        for (k, v) in vols.iter().enumerate() {
            assert_eq!(v.events().len(), c.events_per_place);
            for e in v.events() {
                assert!(ds.structure[k].contains(&(e.x, e.y)));
            }
        }
    }

    #[test]
    fn synth_poses_separate_places_under_75m() {
        let c = SynthConfig::default();
        let ds = synth_dataset(&c).unwrap();
        let (p0, p1) = (&ds.traverses[0].poses, &ds.traverses[1].poses);
        let mut max_same: f64 = 0.0;
        let mut min_cross = f64::INFINITY;
        for i in 0..c.n_places {
            for j in 0..c.n_places {
                let d = geo_distance(&p0[i], &p1[j]).unwrap();
                if i == j {
                    max_same = max_same.max(d);
                } else {
                    min_cross = min_cross.min(d);
                }
            }
        }
        assert!(max_same < 75.0 && max_same <= 2.0 * POSE_JITTER_M);
        assert!(min_cross > 75.0);
    }
}
