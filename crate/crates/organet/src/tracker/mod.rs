//! Frame-to-frame organoid tracking: connected regions, SSIM + distance
//! matching costs, optimal assignment with a cost gate, and Kalman
//! compensation of temporarily unmatched tracks.

pub mod hungarian;
pub mod kalman;
pub mod ssim;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use hungarian::hungarian;
pub use kalman::KalmanCv2d;
pub use ssim::ssim;

use crate::data::imops::resize_bilinear;
use crate::metrics::label_connected;

/// Matching and lifecycle parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Weight of the Euclidean distance term.
    pub alpha: f64,
    /// Weight of the similarity term.
    pub beta: f64,
    /// Maximum accepted matching cost; dearer pairs stay unmatched.
    pub cost_gate: f64,
    /// Frames a track survives without a match before retirement.
    pub max_age: usize,
    /// Components below this pixel count are discarded.
    pub min_area: usize,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    /// Patches are resized to this square side before SSIM.
    pub ssim_patch_side: usize,
    /// When set, the cost adds `beta * s` exactly as the printed equation;
    /// the default `beta * (1 - s)` makes similar regions cheap to match.
    pub literal_cost: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            alpha: 1.0,
            beta: 10.0,
            cost_gate: 20.0,
            max_age: 5,
            min_area: 9,
            ssim_c1: (0.01 * 255.0) * (0.01 * 255.0),
            ssim_c2: (0.03 * 255.0) * (0.03 * 255.0),
            ssim_patch_side: 32,
            literal_cost: false,
        }
    }
}

/// Inclusive pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

/// One connected component of a segmentation mask.
#[derive(Debug, Clone)]
pub struct Region {
    /// `(x, y)` centroid in pixels (x along columns).
    pub centroid: (f64, f64),
    pub area: usize,
    pub bbox: BBox,
    /// Grayscale crop (0/255) resized to the configured patch side.
    pub patch: Array2<f64>,
}

/// Extract 8-connected regions of at least `min_area` pixels.
pub fn connected_regions(mask: &Array2<bool>, config: &TrackerConfig) -> Vec<Region> {
    let (labels, count) = label_connected(mask);
    let mut out = Vec::new();
    for id in 1..=count {
        let mut area = 0usize;
        let mut sum_x = 0.0;
        let mut sum_y = 0.0;
        let (h, w) = mask.dim();
        let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
        for ((y, x), &v) in labels.indexed_iter() {
            if v == id {
                area += 1;
                sum_x += x as f64;
                sum_y += y as f64;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
        if area < config.min_area {
            continue;
        }
        let crop = Array2::from_shape_fn((y1 - y0 + 1, x1 - x0 + 1), |(dy, dx)| {
            if labels[(y0 + dy, x0 + dx)] == id {
                255.0
            } else {
                0.0
            }
        });
        let patch = resize_bilinear(&crop, config.ssim_patch_side, config.ssim_patch_side);
        out.push(Region {
            centroid: (sum_x / area as f64, sum_y / area as f64),
            area,
            bbox: BBox { y0, x0, y1, x1 },
            patch,
        });
    }
    out
}

/// Matching cost between two regions: `alpha * d_euclid` plus a similarity
/// term (`beta * (1 - s)` by default, `beta * s` in literal mode).
pub fn match_cost(a: &Region, b: &Region, config: &TrackerConfig) -> f64 {
    let dx = a.centroid.0 - b.centroid.0;
    let dy = a.centroid.1 - b.centroid.1;
    let d = (dx * dx + dy * dy).sqrt();
    let s = ssim(&a.patch, &b.patch, config.ssim_c1, config.ssim_c2)
        .expect("patches share the configured side");
    if config.literal_cost {
        config.alpha * d + config.beta * s
    } else {
        config.alpha * d + config.beta * (1.0 - s)
    }
}

/// One recorded frame of a track: either a measured region or a Kalman
/// placeholder carrying the last observed area.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackObs {
    pub frame: usize,
    pub cx: f64,
    pub cy: f64,
    pub area: usize,
    /// Set on frames where the position is the filter forecast, not a match.
    pub predicted: bool,
}

/// Persistent identity of one tracked organoid.
#[derive(Debug, Clone)]
pub struct Track {
    pub id: u32,
    pub kalman: KalmanCv2d,
    pub history: Vec<TrackObs>,
    pub miss_count: usize,
    pub alive: bool,
    last_patch: Array2<f64>,
    last_area: usize,
}

impl Track {
    fn new(id: u32, region: &Region, frame: usize) -> Self {
        Track {
            id,
            kalman: KalmanCv2d::new(region.centroid.0, region.centroid.1),
            history: vec![TrackObs {
                frame,
                cx: region.centroid.0,
                cy: region.centroid.1,
                area: region.area,
                predicted: false,
            }],
            miss_count: 0,
            alive: true,
            last_patch: region.patch.clone(),
            last_area: region.area,
        }
    }
}

/// Per-frame `(frame, area, predicted)` series of a track.
pub fn area_series(track: &Track) -> Vec<(usize, usize, bool)> {
    track
        .history
        .iter()
        .map(|o| (o.frame, o.area, o.predicted))
        .collect()
}

/// Tracking state over one sequence. Region lists are fed frame by frame.
pub struct Tracker {
    pub config: TrackerConfig,
    pub tracks: Vec<Track>,
    next_id: u32,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker {
            config,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn active_tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.iter().filter(|t| t.alive)
    }

    /// Associate the regions of frame `frame_index` with the live tracks:
    /// optimal assignment under the cost gate, Kalman update for matches,
    /// forecast placeholders for misses, fresh ids for leftover regions.
    pub fn step(&mut self, regions: &[Region], frame_index: usize) {
        let active: Vec<usize> = self
            .tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.alive)
            .map(|(i, _)| i)
            .collect();

        // Advance every live filter to this frame and match against the
        // forecast positions with the last observed appearance.
        let mut forecasts = Vec::with_capacity(active.len());
        for &ti in &active {
            let t = &mut self.tracks[ti];
            let (px, py) = t.kalman.predict();
            forecasts.push(Region {
                centroid: (px, py),
                area: t.last_area,
                bbox: BBox {
                    y0: 0,
                    x0: 0,
                    y1: 0,
                    x1: 0,
                },
                patch: t.last_patch.clone(),
            });
        }

        let mut matched_track = vec![false; active.len()];
        let mut matched_region = vec![false; regions.len()];
        if !active.is_empty() && !regions.is_empty() {
            let cost = Array2::from_shape_fn((active.len(), regions.len()), |(i, j)| {
                match_cost(&forecasts[i], &regions[j], &self.config)
            });
            for (i, j) in hungarian(&cost) {
                if cost[(i, j)] > self.config.cost_gate {
                    continue;
                }
                matched_track[i] = true;
                matched_region[j] = true;
                let t = &mut self.tracks[active[i]];
                let r = &regions[j];
                t.kalman.update(r.centroid.0, r.centroid.1);
                t.history.push(TrackObs {
                    frame: frame_index,
                    cx: r.centroid.0,
                    cy: r.centroid.1,
                    area: r.area,
                    predicted: false,
                });
                t.miss_count = 0;
                t.last_patch = r.patch.clone();
                t.last_area = r.area;
            }
        }

        // Unmatched tracks carry a flagged forecast or retire.
        for (i, &ti) in active.iter().enumerate() {
            if matched_track[i] {
                continue;
            }
            let t = &mut self.tracks[ti];
            t.miss_count += 1;
            if t.miss_count > self.config.max_age {
                t.alive = false;
                continue;
            }
            let (px, py) = t.kalman.position();
            t.history.push(TrackObs {
                frame: frame_index,
                cx: px,
                cy: py,
                area: t.last_area,
                predicted: true,
            });
        }

        // Unmatched regions spawn fresh identities; ids are never reused.
        for (j, r) in regions.iter().enumerate() {
            if !matched_region[j] {
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.push(Track::new(id, r, frame_index));
            }
        }
    }
}
