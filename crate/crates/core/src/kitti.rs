//! KITTI odometry Velodyne scans: parsing, splits, triplets and a cache of
//! projected range images.
//!
//! Scans live at `<root>/sequences/<SS>/velodyne/<FFFFFF>.bin`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{read_file, rimg};
use crate::projection::{normalize, project_cloud, Point, ProjectionConfig, RangeImage};
use crate::train::PairDataset;

/// Environment variable overriding the range-image cache directory.
pub const CACHE_ENV: &str = "LIDARFLOW_CACHE";

/// Parses a scan held in memory. Returns the points and the number of
/// records skipped for holding non-finite values.
pub fn parse_velodyne(bytes: &[u8], origin: &str) -> Result<(Vec<Point>, usize)> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::format(
            origin,
            format!("length {} is not a multiple of 16", bytes.len()),
        ));
    }
    let mut skipped = 0;
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
        let p = Point {
            x: f(0),
            y: f(1),
            z: f(2),
            intensity: f(3),
        };
        if p.is_finite() {
            points.push(p);
        } else {
            skipped += 1;
        }
    }
    Ok((points, skipped))
}

/// Reads a `.bin` scan of `(x, y, z, intensity)` little-endian `f32` records.
pub fn load_velodyne_bin(path: &Path) -> Result<Vec<Point>> {
    let origin = path.display().to_string();
    let (points, skipped) = parse_velodyne(&read_file(path)?, &origin)?;
    if skipped > 0 {
        log::warn!("{origin}: skipped {skipped} non-finite points");
    }
    Ok(points)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SequenceId(pub u8);

impl fmt::Display for SequenceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}", self.0)
    }
}

pub fn sequence_dir(root: &Path, seq: SequenceId) -> PathBuf {
    root.join("sequences")
        .join(seq.to_string())
        .join("velodyne")
}

/// Scan files of one sequence in frame order.
pub fn list_frames(root: &Path, seq: SequenceId) -> Result<Vec<PathBuf>> {
    let dir = sequence_dir(root, seq);
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(&dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            frames.push(path);
        }
    }
    frames.sort();
    Ok(frames)
}

/// Train / validation / test sequence ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<SequenceId>,
    pub val: Vec<SequenceId>,
    pub test: Vec<SequenceId>,
}

impl Default for DatasetSplit {
    fn default() -> Self {
        let ids = |r: std::ops::RangeInclusive<u8>| r.map(SequenceId).collect();
        Self {
            train: ids(0..=15),
            val: ids(16..=18),
            test: ids(19..=21),
        }
    }
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        let mut all: Vec<_> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        if all.len() != n {
            return Err(Error::Config(format!("split sets overlap: {self}")));
        }
        Ok(())
    }

    /// Whether the split covers exactly the odometry sequences 00-21.
    pub fn covers_odometry(&self) -> bool {
        let mut all: Vec<u8> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .map(|s| s.0)
            .collect();
        all.sort();
        all == (0..=21).collect::<Vec<_>>()
    }
}

fn fmt_ids(ids: &[SequenceId]) -> String {
    ids.iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for DatasetSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}",
            fmt_ids(&self.train),
            fmt_ids(&self.val),
            fmt_ids(&self.test)
        )
    }
}

/// `TRAIN:VAL:TEST`, each a comma list of ids or inclusive ranges, e.g.
/// `0-15:16-18:19-21`.
impl FromStr for DatasetSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "split `{s}` must have the form TRAIN:VAL:TEST"
            )));
        }
        let parse = |part: &str| -> Result<Vec<SequenceId>> {
            let mut out = Vec::new();
            for item in part.split(',').map(str::trim).filter(|i| !i.is_empty()) {
                let num = |t: &str| {
                    t.trim()
                        .parse::<u8>()
                        .map_err(|_| Error::Config(format!("bad sequence id `{t}` in `{s}`")))
                };
                match item.split_once('-') {
                    Some((a, b)) => {
                        let (a, b) = (num(a)?, num(b)?);
                        if a > b {
                            return Err(Error::Config(format!("empty range `{item}`")));
                        }
                        out.extend((a..=b).map(SequenceId));
                    }
                    None => out.push(SequenceId(num(item)?)),
                }
            }
            Ok(out)
        };
        let split = Self {
            train: parse(parts[0])?,
            val: parse(parts[1])?,
            test: parse(parts[2])?,
        };
        split.validate()?;
        Ok(split)
    }
}

/// Frames `start`, `start + 1`, `start + 2` of one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub sequence: SequenceId,
    pub start: usize,
}

impl Triplet {
    pub fn frames(&self) -> [usize; 3] {
        [self.start, self.start + 1, self.start + 2]
    }

    /// The pair used for training and evaluation.
    pub fn pair(&self) -> (usize, usize) {
        (self.start, self.start + 1)
    }
}

/// Non-overlapping triplets `0-1-2, 3-4-5, ...` of each sequence; a remainder
/// of one or two frames is dropped and sequences shorter than three frames
/// are skipped with a warning.
pub fn build_triplets(frame_counts: &[(SequenceId, usize)]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for &(sequence, count) in frame_counts {
        if count < 3 {
            log::warn!("sequence {sequence} has {count} frames; at least 3 are needed");
            continue;
        }
        out.extend((0..count / 3).map(|k| Triplet {
            sequence,
            start: 3 * k,
        }));
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSets {
    pub train: Vec<Triplet>,
    pub val: Vec<Triplet>,
    pub test: Vec<Triplet>,
}

/// Triplets of every sequence in `split` found under `root`. Missing
/// sequences are skipped with a warning.
pub fn discover(root: &Path, split: &DatasetSplit) -> Result<TripletSets> {
    split.validate()?;
    let count = |ids: &[SequenceId]| -> Result<Vec<(SequenceId, usize)>> {
        let mut out = Vec::new();
        for &id in ids {
            if !sequence_dir(root, id).is_dir() {
                log::warn!("sequence {id} not found under {}", root.display());
                continue;
            }
            out.push((id, list_frames(root, id)?.len()));
        }
        Ok(out)
    };
    Ok(TripletSets {
        train: build_triplets(&count(&split.train)?),
        val: build_triplets(&count(&split.val)?),
        test: build_triplets(&count(&split.test)?),
    })
}

/// Loads projected frames, reading and writing `RIMG` files under a
/// directory keyed by the projection's fingerprint.
#[derive(Clone, Debug)]
pub struct FrameSource {
    root: PathBuf,
    projection: ProjectionConfig,
    cache: Option<PathBuf>,
}

impl FrameSource {
    /// Caches under `$LIDARFLOW_CACHE` when set, `<root>/rimg-cache` otherwise.
    pub fn new(root: &Path, projection: ProjectionConfig) -> Result<Self> {
        projection.validate()?;
        let base = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| root.join("rimg-cache"));
        Ok(Self {
            root: root.to_path_buf(),
            projection,
            cache: Some(base.join(format!("{:016x}", projection.fingerprint()))),
        })
    }

    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn projection(&self) -> &ProjectionConfig {
        &self.projection
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache.as_deref()
    }

    /// Projected frame `index` (position in the sorted file list) of `seq`.
    pub fn frame(&self, seq: SequenceId, index: usize) -> Result<RangeImage> {
        let frames = list_frames(&self.root, seq)?;
        let path = frames
            .get(index)
            .ok_or_else(|| Error::Config(format!("sequence {seq} has no frame {index}")))?;
        self.frame_at(seq, path)
    }

    fn frame_at(&self, seq: SequenceId, path: &Path) -> Result<RangeImage> {
        let cached = self.cache.as_ref().map(|dir| {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            dir.join(seq.to_string()).join(format!("{stem}.rimg"))
        });
        if let Some(c) = cached.as_ref().filter(|c| c.is_file()) {
            return rimg::read(c);
        }
        let img = project_cloud(&load_velodyne_bin(path)?, &self.projection)?;
        if img.occupied() == 0 {
            return Err(Error::format(
                path.display().to_string(),
                "scan projects to an empty image",
            ));
        }
        if let Some(c) = cached {
            rimg::write(&c, &img)?;
        }
        Ok(img)
    }

    /// Frame pairs `(i, i + 1)` of `triplets` in meters, projected in parallel.
    pub fn pairs(&self, triplets: &[Triplet]) -> Result<Vec<(RangeImage, RangeImage)>> {
        let mut listings = std::collections::BTreeMap::new();
        for t in triplets {
            if let std::collections::btree_map::Entry::Vacant(e) = listings.entry(t.sequence) {
                e.insert(list_frames(&self.root, t.sequence)?);
            }
        }
        triplets
            .par_iter()
            .map(|t| {
                let files = &listings[&t.sequence];
                let (a, b) = t.pair();
                let get = |i: usize| {
                    files.get(i).ok_or_else(|| {
                        Error::Config(format!("sequence {} has no frame {i}", t.sequence))
                    })
                };
                Ok((
                    self.frame_at(t.sequence, get(a)?)?,
                    self.frame_at(t.sequence, get(b)?)?,
                ))
            })
            .collect()
    }

    /// Normalized training pairs, zero-padded to multiples of `multiple`.
    pub fn dataset(&self, triplets: &[Triplet], multiple: usize) -> Result<PairDataset> {
        let pairs = self
            .pairs(triplets)?
            .iter()
            .map(|(a, b)| {
                Ok((
                    network_input(a, &self.projection, multiple)?,
                    network_input(b, &self.projection, multiple)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        PairDataset::new(pairs)
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Normalized `(1, 1, H', W')` tensor of `img`, zero-padded so both extents
/// are multiples of `multiple`.
pub fn network_input(
    img: &RangeImage,
    projection: &ProjectionConfig,
    multiple: usize,
) -> Result<crate::tensor::Tensor<f32>> {
    let t = normalize(img, projection);
    t.pad_to(
        round_up(img.height(), multiple),
        round_up(img.width(), multiple),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 0.0, 0.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let (pts, skipped) = parse_velodyne(&bytes, "mem").unwrap();
        assert_eq!(
            pts,
            vec![Point {
                x: 1.0,
                y: 0.0,
                z: 0.0,
                intensity: 0.5
            }]
        );
        assert_eq!(skipped, 0);
        assert!(parse_velodyne(&[], "mem").unwrap().0.is_empty());
        assert!(parse_velodyne(&[0u8; 20], "mem").is_err());
    }

    #[test]
    fn triplet_counts() {
        let t = build_triplets(&[(SequenceId(0), 7), (SequenceId(1), 3), (SequenceId(2), 2)]);
        assert_eq!(t.iter().filter(|t| t.sequence == SequenceId(0)).count(), 2);
        assert_eq!(t.iter().filter(|t| t.sequence == SequenceId(1)).count(), 1);
        assert_eq!(t.iter().filter(|t| t.sequence == SequenceId(2)).count(), 0);
    }

    #[test]
    fn default_split() {
        let s = DatasetSplit::default();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (16, 3, 3));
        s.validate().unwrap();
        assert!(s.covers_odometry());
        assert_eq!("0-15:16-18:19-21".parse::<DatasetSplit>().unwrap(), s);
        assert!("0-3:3:4".parse::<DatasetSplit>().is_err());
        assert!("0-3:4".parse::<DatasetSplit>().is_err());
    }
}
