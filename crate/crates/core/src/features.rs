//! Keypoint ingestion, cross-camera intra-matching into multi-view features,
//! and mono features for regions no other camera covers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::RigCalibration;
use crate::geometry::{pixel_to_plucker, PluckerRay};
use crate::overlap::{Grid, OverlapMap};
use crate::solvers::triangulate_from_centers;

/// Frame period assumed when a sequence carries no timestamps.
pub const DEFAULT_FRAME_PERIOD: f64 = 0.05;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("expected input for {expected} cameras, got {got}")]
    CameraCount { expected: usize, got: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid descriptor: {0}")]
    Descriptor(String),
}

/// A 256-bit binary descriptor, most significant bit first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Descriptor(pub [u64; 4]);

impl Descriptor {
    pub const BITS: usize = 256;

    pub fn hamming(&self, other: &Descriptor) -> u32 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Bit `i`, counted from the most significant bit of the first word.
    pub fn bit(&self, i: usize) -> bool {
        (self.0[i / 64] >> (63 - i % 64)) & 1 == 1
    }

    pub fn set_bit(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (63 - i % 64);
        if value {
            self.0[i / 64] |= mask;
        } else {
            self.0[i / 64] &= !mask;
        }
    }

    pub fn flip_bit(&mut self, i: usize) {
        self.0[i / 64] ^= 1u64 << (63 - i % 64);
    }

    pub fn to_hex(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Descriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in &self.0 {
            write!(f, "{w:016x}")?;
        }
        Ok(())
    }
}

impl FromStr for Descriptor {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.len() != 64 || !s.is_ascii() {
            return Err(FeatureError::Descriptor(format!(
                "expected 64 hex characters, got {}",
                s.len()
            )));
        }
        let mut words = [0u64; 4];
        for (k, w) in words.iter_mut().enumerate() {
            *w = u64::from_str_radix(&s[16 * k..16 * (k + 1)], 16)
                .map_err(|e| FeatureError::Descriptor(e.to_string()))?;
        }
        Ok(Descriptor(words))
    }
}

/// Per-bit majority vote. Ties resolve to the bit of the first descriptor.
///
/// # Panics
/// If `descriptors` is empty.
pub fn representative_descriptor(descriptors: &[Descriptor]) -> Descriptor {
    assert!(!descriptors.is_empty(), "representative of no descriptors");
    let n = descriptors.len();
    let mut out = descriptors[0];
    for i in 0..Descriptor::BITS {
        let ones = descriptors.iter().filter(|d| d.bit(i)).count();
        if 2 * ones > n {
            out.set_bit(i, true);
        } else if 2 * ones < n {
            out.set_bit(i, false);
        }
    }
    out
}

/// A keypoint as delivered by a provider, before grid assignment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawKeypoint {
    pub id: u64,
    pub pixel: Vector2<f64>,
    pub octave: u8,
    pub descriptor: Descriptor,
}

/// Per-camera keypoints of one multi-camera frame, as delivered by a provider.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameInput {
    pub frame_id: u64,
    pub timestamp: f64,
    pub cameras: Vec<Vec<RawKeypoint>>,
}

/// Anything that yields multi-camera frames in order: a track file, the
/// simulator, or an image detector.
pub trait FrameSource {
    fn num_cameras(&self) -> usize;
    fn next_frame(&mut self) -> Option<FrameInput>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub id: u64,
    pub camera_index: usize,
    pub pixel: Vector2<f64>,
    pub cell: usize,
    pub octave: u8,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewFeature {
    /// One keypoint per member camera, ordered by camera index.
    pub keypoints: Vec<Keypoint>,
    pub point_body: Vector3<f64>,
    pub representative_descriptor: Descriptor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MonoFeature {
    pub keypoint: Keypoint,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiCameraFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<Vec<Keypoint>>,
    pub multiview: Vec<MultiViewFeature>,
    pub mono: Vec<MonoFeature>,
}

/// Thresholds for intra-matching and the multi-view triangulation gate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub max_hamming: u32,
    pub ratio: f64,
    pub epipolar_px: f64,
    pub max_reprojection_px: f64,
    pub min_parallax_deg: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_hamming: 64,
            ratio: 0.8,
            epipolar_px: 2.0,
            max_reprojection_px: 2.0,
            min_parallax_deg: 1.0,
        }
    }
}

/// Assigns grid cells; keypoints outside their image are dropped.
pub fn detect(input: &FrameInput, rig: &RigCalibration, grid: Grid) -> Result<Vec<Vec<Keypoint>>, FeatureError> {
    if input.cameras.len() != rig.num_cameras() {
        return Err(FeatureError::CameraCount {
            expected: rig.num_cameras(),
            got: input.cameras.len(),
        });
    }
    Ok(input
        .cameras
        .iter()
        .enumerate()
        .map(|(c, raw)| {
            let k = &rig.camera(c).intrinsics;
            raw.iter()
                .filter_map(|r| {
                    grid.cell_of(k, &r.pixel).map(|cell| Keypoint {
                        id: r.id,
                        camera_index: c,
                        pixel: r.pixel,
                        cell,
                        octave: r.octave,
                        descriptor: r.descriptor,
                    })
                })
                .collect()
        })
        .collect())
}

/// All camera pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn camera_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
}

/// Cross-camera matching over the default pair order.
pub fn intra_match(
    keypoints: &[Vec<Keypoint>],
    overlap: &OverlapMap,
    rig: &RigCalibration,
    cfg: &MatchConfig,
) -> (Vec<MultiViewFeature>, Vec<MonoFeature>) {
    intra_match_ordered(keypoints, overlap, rig, cfg, &camera_pairs(rig.num_cameras()))
}

type KeyRef = (usize, usize);

/// Cross-camera matching visiting camera pairs in the given order.
///
/// Per pair, each keypoint of `i` is matched against the keypoints of `j`
/// in its candidate cells; a match needs Hamming distance, ratio and
/// epipolar tests to pass, and each keypoint of `j` keeps only its best
/// match. Matches then grow groups: two free keypoints start a group, a
/// free keypoint joins its partner's group unless its camera is already
/// present, and matches across two different groups are dropped. Groups
/// are triangulated in the body frame; those failing the reprojection or
/// parallax gate dissolve into mono features.
pub fn intra_match_ordered(
    keypoints: &[Vec<Keypoint>],
    overlap: &OverlapMap,
    rig: &RigCalibration,
    cfg: &MatchConfig,
    pairs: &[(usize, usize)],
) -> (Vec<MultiViewFeature>, Vec<MonoFeature>) {
    let grid = overlap.grid();
    let mut groups: Vec<Vec<KeyRef>> = Vec::new();
    let mut group_of: BTreeMap<KeyRef, usize> = BTreeMap::new();

    for &(i, j) in pairs {
        if i >= keypoints.len() || j >= keypoints.len() || !overlap.pair_overlaps(i, j) {
            continue;
        }
        let Some(pair) = overlap.pair(i, j) else { continue };
        let mut by_cell: Vec<Vec<usize>> = vec![Vec::new(); grid.num_cells()];
        for (idx, kp) in keypoints[j].iter().enumerate() {
            by_cell[kp.cell].push(idx);
        }
        // Best proposal per keypoint of j: (distance, index in i).
        let mut best_for_j: BTreeMap<usize, (u32, usize)> = BTreeMap::new();
        for (ia, a) in keypoints[i].iter().enumerate() {
            let mut best: Option<(u32, usize)> = None;
            let mut second = u32::MAX;
            for &cell in overlap.candidates(i, j, a.cell) {
                for &jb in &by_cell[cell] {
                    let d = a.descriptor.hamming(&keypoints[j][jb].descriptor);
                    match best {
                        Some((bd, _)) if d >= bd => second = second.min(d),
                        _ => {
                            if let Some((bd, _)) = best {
                                second = second.min(bd);
                            }
                            best = Some((d, jb));
                        }
                    }
                }
            }
            let Some((d, jb)) = best else { continue };
            if d > cfg.max_hamming {
                continue;
            }
            if second != u32::MAX && d as f64 > cfg.ratio * second as f64 {
                continue;
            }
            if pair.geometry.distance(&a.pixel, &keypoints[j][jb].pixel) > cfg.epipolar_px {
                continue;
            }
            match best_for_j.get(&jb) {
                Some(&(bd, _)) if bd <= d => {}
                _ => {
                    best_for_j.insert(jb, (d, ia));
                }
            }
        }
        let mut accepted: Vec<(usize, usize)> = best_for_j.into_iter().map(|(jb, (_, ia))| (ia, jb)).collect();
        accepted.sort_unstable();
        for (ia, jb) in accepted {
            let (a, b) = ((i, ia), (j, jb));
            match (group_of.get(&a).copied(), group_of.get(&b).copied()) {
                (None, None) => {
                    group_of.insert(a, groups.len());
                    group_of.insert(b, groups.len());
                    groups.push(vec![a, b]);
                }
                (Some(g), None) => join(&mut groups, &mut group_of, g, b),
                (None, Some(g)) => join(&mut groups, &mut group_of, g, a),
                (Some(_), Some(_)) => {}
            }
        }
    }

    let mut multiview = Vec::new();
    let mut used: BTreeMap<KeyRef, ()> = BTreeMap::new();
    for mut group in groups {
        group.sort_unstable();
        let members: Vec<Keypoint> = group.iter().map(|&(c, k)| keypoints[c][k]).collect();
        if let Some(point_body) = triangulate_group(&members, rig, cfg) {
            for r in &group {
                used.insert(*r, ());
            }
            let descriptors: Vec<Descriptor> = members.iter().map(|k| k.descriptor).collect();
            multiview.push(MultiViewFeature {
                representative_descriptor: representative_descriptor(&descriptors),
                keypoints: members,
                point_body,
            });
        }
    }
    let mono = keypoints
        .iter()
        .enumerate()
        .flat_map(|(c, kps)| kps.iter().enumerate().map(move |(k, kp)| ((c, k), kp)))
        .filter(|(r, _)| !used.contains_key(r))
        .map(|(_, kp)| MonoFeature { keypoint: *kp })
        .collect();
    (multiview, mono)
}

fn join(groups: &mut [Vec<KeyRef>], group_of: &mut BTreeMap<KeyRef, usize>, g: usize, k: KeyRef) {
    if groups[g].iter().any(|m| m.0 == k.0) {
        return;
    }
    groups[g].push(k);
    group_of.insert(k, g);
}

/// Body-frame ray of a keypoint.
pub fn keypoint_ray(kp: &Keypoint, rig: &RigCalibration) -> PluckerRay<f64> {
    let cam = rig.camera(kp.camera_index);
    pixel_to_plucker(&kp.pixel, &cam.intrinsics, &cam.body_t_cam).expect("validated intrinsics")
}

/// Triangulates a group in the body frame and applies the reprojection and
/// parallax gate.
pub fn triangulate_group(members: &[Keypoint], rig: &RigCalibration, cfg: &MatchConfig) -> Option<Vector3<f64>> {
    let rays: Vec<_> = members.iter().map(|k| keypoint_ray(k, rig)).collect();
    let centers: Vec<_> = members
        .iter()
        .map(|k| *rig.camera(k.camera_index).body_t_cam.translation())
        .collect();
    let x = triangulate_from_centers(&rays, &centers, cfg.min_parallax_deg.to_radians()).ok()?;
    for kp in members {
        let cam = rig.camera(kp.camera_index);
        let pc = cam.body_t_cam.inverse_transform_point(&x);
        let u = cam.intrinsics.project(&pc).ok()?;
        if (u - kp.pixel).norm() > cfg.max_reprojection_px {
            return None;
        }
    }
    Some(x)
}

/// Detection followed by intra-matching.
pub fn build_frame(
    input: &FrameInput,
    rig: &RigCalibration,
    overlap: &OverlapMap,
    cfg: &MatchConfig,
) -> Result<MultiCameraFrame, FeatureError> {
    let keypoints = detect(input, rig, overlap.grid())?;
    let (multiview, mono) = intra_match(&keypoints, overlap, rig, cfg);
    Ok(MultiCameraFrame {
        frame_id: input.frame_id,
        timestamp: input.timestamp,
        keypoints,
        multiview,
        mono,
    })
}

const TRACKS_HEADER: [&str; 7] = ["frame_id", "camera_id", "keypoint_id", "x", "y", "octave", "descriptor_hex"];

/// Writes frames as `frame_id,camera_id,keypoint_id,x,y,octave,descriptor_hex`.
pub fn write_tracks<W: Write>(w: W, frames: &[FrameInput]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRACKS_HEADER)?;
    for f in frames {
        for (c, kps) in f.cameras.iter().enumerate() {
            for k in kps {
                out.write_record([
                    f.frame_id.to_string(),
                    c.to_string(),
                    k.id.to_string(),
                    k.pixel.x.to_string(),
                    k.pixel.y.to_string(),
                    k.octave.to_string(),
                    k.descriptor.to_string(),
                ])?;
            }
        }
    }
    out.flush()
}

/// Writes `frame_id,timestamp` rows.
pub fn write_frame_times<W: Write>(w: W, frames: &[FrameInput]) -> std::io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["frame_id", "timestamp"])?;
    for f in frames {
        out.write_record([f.frame_id.to_string(), f.timestamp.to_string()])?;
    }
    out.flush()
}

/// Rows of a headerless-or-headed CSV with their line numbers. A first row
/// whose first field is not an integer is taken as the header.
fn csv_rows<R: Read>(r: R) -> impl Iterator<Item = Result<(usize, csv::StringRecord), FeatureError>> {
    let reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    reader.into_records().enumerate().filter_map(|(n, rec)| match rec {
        Err(e) => Some(Err(FeatureError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })),
        Ok(rec) => {
            let line = rec.position().map_or(n + 1, |p| p.line() as usize);
            let header = n == 0 && rec.get(0).is_some_and(|f| f.parse::<u64>().is_err());
            (!header).then_some(Ok((line, rec)))
        }
    })
}

fn parse_field<T: FromStr>(rec: &csv::StringRecord, i: usize, line: usize, name: &str) -> Result<T, FeatureError> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| FeatureError::Parse {
        line,
        message: format!("bad or missing {name}"),
    })
}

/// Reads a track CSV. Rows have 7 fields, or 6 without the octave column.
/// Frames are returned in id order with `frame_id * DEFAULT_FRAME_PERIOD`
/// timestamps.
pub fn read_tracks<R: Read>(r: R, num_cameras: usize) -> Result<Vec<FrameInput>, FeatureError> {
    let mut frames: BTreeMap<u64, FrameInput> = BTreeMap::new();
    for row in csv_rows(r) {
        let (line, rec) = row?;
        let (octave, hex) = match rec.len() {
            7 => (parse_field::<u8>(&rec, 5, line, "octave")?, 6),
            6 => (0, 5),
            k => {
                return Err(FeatureError::Parse {
                    line,
                    message: format!("expected 6 or 7 fields, got {k}"),
                })
            }
        };
        let frame_id: u64 = parse_field(&rec, 0, line, "frame_id")?;
        let camera: usize = parse_field(&rec, 1, line, "camera_id")?;
        if camera >= num_cameras {
            return Err(FeatureError::Parse {
                line,
                message: format!("camera {camera} out of range for {num_cameras} cameras"),
            });
        }
        let kp = RawKeypoint {
            id: parse_field(&rec, 2, line, "keypoint_id")?,
            pixel: Vector2::new(parse_field(&rec, 3, line, "x")?, parse_field(&rec, 4, line, "y")?),
            octave,
            descriptor: rec[hex].parse().map_err(|e: FeatureError| FeatureError::Parse {
                line,
                message: e.to_string(),
            })?,
        };
        frames
            .entry(frame_id)
            .or_insert_with(|| FrameInput {
                frame_id,
                timestamp: frame_id as f64 * DEFAULT_FRAME_PERIOD,
                cameras: vec![Vec::new(); num_cameras],
            })
            .cameras[camera]
            .push(kp);
    }
    Ok(frames.into_values().collect())
}

/// Reads `frame_id,timestamp` rows.
pub fn read_frame_times<R: Read>(r: R) -> Result<BTreeMap<u64, f64>, FeatureError> {
    let mut out = BTreeMap::new();
    for row in csv_rows(r) {
        let (line, rec) = row?;
        let id: u64 = parse_field(&rec, 0, line, "frame_id")?;
        let t: f64 = parse_field(&rec, 1, line, "timestamp")?;
        out.insert(id, t);
    }
    Ok(out)
}

/// Frames read from a sequence directory holding `tracks.csv` and,
/// optionally, `frames.csv` with timestamps. Frames listed in `frames.csv`
/// without any keypoint are yielded empty.
#[derive(Clone, Debug)]
pub struct TrackFileSource {
    num_cameras: usize,
    frames: std::vec::IntoIter<FrameInput>,
}

pub const TRACKS_FILE: &str = "tracks.csv";
pub const FRAMES_FILE: &str = "frames.csv";

impl TrackFileSource {
    pub fn open(dir: impl AsRef<Path>, num_cameras: usize) -> Result<Self, FeatureError> {
        let dir = dir.as_ref();
        let open = |name: &str| {
            let path = dir.join(name);
            fs::File::open(&path)
                .map(BufReader::new)
                .map_err(|source| FeatureError::Io { path, source })
        };
        let mut frames: BTreeMap<u64, FrameInput> = read_tracks(open(TRACKS_FILE)?, num_cameras)?
            .into_iter()
            .map(|f| (f.frame_id, f))
            .collect();
        if dir.join(FRAMES_FILE).exists() {
            for (id, t) in read_frame_times(open(FRAMES_FILE)?)? {
                frames
                    .entry(id)
                    .or_insert_with(|| FrameInput {
                        frame_id: id,
                        timestamp: t,
                        cameras: vec![Vec::new(); num_cameras],
                    })
                    .timestamp = t;
            }
        }
        Ok(Self {
            num_cameras,
            frames: frames.into_values().collect::<Vec<_>>().into_iter(),
        })
    }
}

impl FrameSource for TrackFileSource {
    fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    fn next_frame(&mut self) -> Option<FrameInput> {
        self.frames.next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CameraCalibration;
    use crate::geometry::{Intrinsics, Pose};
    use crate::overlap::compute_overlap_map;

    fn bits(s: &str) -> Descriptor {
        let mut d = Descriptor::default();
        for (i, c) in s.chars().enumerate() {
            d.set_bit(i, c == '1');
        }
        d
    }

    fn rig(poses: &[Pose<f64>]) -> RigCalibration {
        let cams = poses
            .iter()
            .enumerate()
            .map(|(i, p)| CameraCalibration {
                id: format!("cam{i}"),
                intrinsics: Intrinsics::new(400.0, 400.0, 320.0, 240.0, 640, 480).unwrap(),
                body_t_cam: *p,
            })
            .collect();
        RigCalibration::new(cams, None).unwrap()
    }

    fn descriptor_for(id: u64) -> Descriptor {
        let mut x = id.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD1B5_4A32_D192_ED03;
        let mut words = [0u64; 4];
        for w in &mut words {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            *w = x;
        }
        Descriptor(words)
    }

    fn observe(rig: &RigCalibration, points: &[Vector3<f64>]) -> FrameInput {
        let cameras = (0..rig.num_cameras())
            .map(|c| {
                let cam = rig.camera(c);
                points
                    .iter()
                    .enumerate()
                    .filter_map(|(id, p)| {
                        let u = cam.intrinsics.project(&cam.body_t_cam.inverse_transform_point(p)).ok()?;
                        cam.intrinsics.contains(&u).then(|| RawKeypoint {
                            id: id as u64,
                            pixel: u,
                            octave: 0,
                            descriptor: descriptor_for(id as u64),
                        })
                    })
                    .collect()
            })
            .collect();
        FrameInput {
            frame_id: 0,
            timestamp: 0.0,
            cameras,
        }
    }

    #[test]
    fn descriptor_hex_round_trip() {
        let d = descriptor_for(5);
        assert_eq!(d.to_hex().len(), 64);
        assert_eq!(d.to_hex().parse::<Descriptor>().unwrap(), d);
        assert!("abc".parse::<Descriptor>().is_err());
        let mut e = d;
        e.flip_bit(0);
        e.flip_bit(255);
        assert_eq!(d.hamming(&e), 2);
        assert!(bits("1").bit(0) && !bits("01").bit(0));
    }

    #[test]
    fn majority_vote() {
        let r = representative_descriptor(&[bits("1100"), bits("1010"), bits("1000")]);
        assert_eq!(r, bits("1000"));
        let d = descriptor_for(1);
        assert_eq!(representative_descriptor(&[d]), d);
        assert_eq!(representative_descriptor(&[d, d, descriptor_for(2)]), d);
        // Even split keeps the first descriptor's bit.
        assert_eq!(representative_descriptor(&[bits("10"), bits("01")]), bits("10"));
    }

    #[test]
    fn detect_checks_camera_count_and_bins() {
        let r = rig(&[Pose::identity(), Pose::from_translation(Vector3::new(0.2, 0.0, 0.0))]);
        let grid = Grid::default();
        let empty = FrameInput {
            frame_id: 0,
            timestamp: 0.0,
            cameras: vec![Vec::new(), Vec::new()],
        };
        assert_eq!(detect(&empty, &r, grid).unwrap(), vec![Vec::<Keypoint>::new(), Vec::new()]);
        let bad = FrameInput {
            cameras: vec![Vec::new()],
            ..empty.clone()
        };
        assert!(matches!(
            detect(&bad, &r, grid),
            Err(FeatureError::CameraCount { expected: 2, got: 1 })
        ));
        let input = observe(&r, &[Vector3::new(0.1, 0.2, 3.0)]);
        let kps = detect(&input, &r, grid).unwrap();
        let k = &kps[0][0];
        assert_eq!(Some(k.cell), grid.cell_of(&r.camera(0).intrinsics, &k.pixel));
    }

    #[test]
    fn parses_track_rows() {
        let hex = descriptor_for(3).to_hex();
        let text = format!("7,2,41,363.0,271.0,{hex}\n7,0,1,10.5,20.25,2,{hex}\n");
        let frames = read_tracks(text.as_bytes(), 3).unwrap();
        assert_eq!(frames.len(), 1);
        let f = &frames[0];
        assert_eq!(f.frame_id, 7);
        assert_eq!(f.cameras[2][0].id, 41);
        assert_eq!(f.cameras[2][0].pixel, Vector2::new(363.0, 271.0));
        assert_eq!(f.cameras[0][0].octave, 2);
        assert!(read_tracks("1,5,0,1,1,0,00\n".as_bytes(), 3).is_err());
        assert!(read_tracks("1,0,0,1\n".as_bytes(), 3).is_err());
    }

    #[test]
    fn track_file_round_trip() {
        let r = rig(&[Pose::identity(), Pose::from_translation(Vector3::new(0.2, 0.0, 0.0))]);
        let mut a = observe(&r, &[Vector3::new(0.1, 0.2, 3.0), Vector3::new(-0.4, 0.1, 5.0)]);
        a.frame_id = 3;
        a.timestamp = 1.25;
        let mut buf = Vec::new();
        write_tracks(&mut buf, std::slice::from_ref(&a)).unwrap();
        let mut b = read_tracks(buf.as_slice(), 2).unwrap();
        b[0].timestamp = a.timestamp;
        assert_eq!(b, vec![a]);
    }

    #[test]
    fn single_camera_is_all_mono() {
        let r = rig(&[Pose::identity()]);
        let map = compute_overlap_map(&r, Grid::default()).unwrap();
        let input = observe(&r, &[Vector3::new(0.1, 0.2, 3.0), Vector3::new(-0.4, 0.1, 5.0)]);
        let frame = build_frame(&input, &r, &map, &MatchConfig::default()).unwrap();
        assert!(frame.multiview.is_empty());
        assert_eq!(frame.mono.len(), 2);
    }

    #[test]
    fn three_camera_landmark_becomes_one_feature() {
        let r = rig(&[
            Pose::identity(),
            Pose::from_translation(Vector3::new(0.165, 0.0, 0.0)),
            Pose::from_translation(Vector3::new(0.33, 0.0, 0.0)),
        ]);
        let map = compute_overlap_map(&r, Grid::default()).unwrap();
        let p = Vector3::new(0.2, -0.1, 2.5);
        let frame = build_frame(&observe(&r, &[p]), &r, &map, &MatchConfig::default()).unwrap();
        assert_eq!(frame.multiview.len(), 1);
        let f = &frame.multiview[0];
        assert_eq!(f.keypoints.iter().map(|k| k.camera_index).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!((f.point_body - p).norm() < 1e-6);
        assert!(frame.mono.is_empty());
    }

    #[test]
    fn back_to_back_cameras_yield_only_mono() {
        let r = rig(&[Pose::identity(), Pose::from_yaw(std::f64::consts::PI, Vector3::new(0.0, 0.0, -0.1))]);
        let map = compute_overlap_map(&r, Grid::default()).unwrap();
        let points: Vec<_> = (0..40)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                Vector3::new(0.05 * (i as f64 - 20.0), 0.02 * i as f64 - 0.4, s * 3.0)
            })
            .collect();
        let frame = build_frame(&observe(&r, &points), &r, &map, &MatchConfig::default()).unwrap();
        assert!(frame.multiview.is_empty());
        assert_eq!(frame.mono.len(), 40);
    }
}
