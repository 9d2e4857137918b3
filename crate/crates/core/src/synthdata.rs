//! Synthetic geo-tagged landmark data.
//!
//! Every class gets a visual centroid and a geographic centroid. A share of
//! the classes is arranged in confusable pairs: both members of a pair draw
//! image features around one shared visual centroid but live far apart on
//! the map, so only the location tells them apart.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::geoenc::{geo_features, GeoScheme, GEO_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSample {
    pub id: u64,
    pub label: usize,
    pub lat: f64,
    pub lon: f64,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub feature_dim: usize,
    pub samples: Vec<LandmarkSample>,
}

impl Dataset {
    pub fn new(feature_dim: usize) -> Self {
        Dataset {
            feature_dim,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    /// Tensor views used by the training loops.
    pub fn prepare(&self, scheme: GeoScheme) -> Result<Prepared> {
        let m = self.samples.len();
        let mut loc = Vec::with_capacity(m * GEO_DIM);
        let mut img = Vec::with_capacity(m * self.feature_dim);
        for s in &self.samples {
            loc.extend_from_slice(&geo_features(s.lat, s.lon, scheme)?);
            if s.features.len() != self.feature_dim {
                return Err(Error::Config(format!(
                    "sample {} has {} features, dataset has {}",
                    s.id,
                    s.features.len(),
                    self.feature_dim
                )));
            }
            img.extend_from_slice(&s.features);
        }
        Ok(Prepared {
            x_loc: Tensor2::from_vec(m, GEO_DIM, loc)?,
            x_img: Tensor2::from_vec(m, self.feature_dim, img)?,
            labels: self.samples.iter().map(|s| s.label).collect(),
            ids: self.samples.iter().map(|s| s.id).collect(),
        })
    }
}

/// A dataset as dense inputs: normalized geo vectors, image features,
/// labels and ids, all row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub x_loc: Tensor2,
    pub x_img: Tensor2,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Prepared {
        Prepared {
            x_loc: self.x_loc.select_rows(idx),
            x_img: self.x_img.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub classes: usize,
    /// Share of classes arranged in confusable pairs.
    pub pair_fraction: f64,
    pub feature_dim: usize,
    /// Standard deviation of the Gaussian visual noise.
    pub visual_noise: f64,
    /// Half-width in degrees of the uniform geo jitter box.
    pub geo_radius: f64,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            classes: 20,
            pair_fraction: 0.5,
            feature_dim: 32,
            visual_noise: 0.05,
            geo_radius: 1.0,
            samples_per_class: 100,
            seed: 0,
        }
    }
}

/// Held-out share per class.
pub const EVAL_FRACTION: f64 = 0.1;

/// Minimum centroid distance of a confusable pair, in geo radii.
pub const PAIR_SEPARATION: f64 = 10.0;

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.feature_dim == 0 || self.samples_per_class == 0 {
            return Err(Error::Config(
                "classes, feature_dim and samples_per_class must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(Error::Config(format!(
                "pair_fraction {} outside [0, 1]",
                self.pair_fraction
            )));
        }
        if !(self.visual_noise > 0.0 && self.visual_noise.is_finite()) {
            return Err(Error::Config("visual_noise must be > 0".into()));
        }
        if !(self.geo_radius > 0.0 && self.geo_radius.is_finite()) {
            return Err(Error::Config("geo_radius must be > 0".into()));
        }
        let margin = self.margin();
        if PAIR_SEPARATION * self.geo_radius >= 2.0 * (180.0 - margin) || margin >= 90.0 {
            return Err(Error::Config(format!(
                "geo_radius {} leaves no room to separate pairs",
                self.geo_radius
            )));
        }
        Ok(())
    }

    pub fn pairs(&self) -> usize {
        (self.pair_fraction * self.classes as f64 / 2.0 + 1e-9).floor() as usize
    }

    fn margin(&self) -> f64 {
        self.geo_radius.max(1.0)
    }

    pub fn eval_per_class(&self) -> usize {
        (self.samples_per_class as f64 * EVAL_FRACTION).round() as usize
    }
}

/// Generator bookkeeping for one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub label: usize,
    /// Index into the visual centroid table; shared within a pair.
    pub visual_id: usize,
    pub partner: Option<usize>,
    pub geo_centroid: (f64, f64),
    pub visual_centroid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub train: Dataset,
    pub eval: Dataset,
    pub classes: Vec<ClassInfo>,
}

fn geo_distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Draws a dataset. Classes `2k` and `2k+1` for `k < spec.pairs()` form the
/// confusable pairs. Output is a pure function of `spec`.
pub fn generate(spec: &GenSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pairs = spec.pairs();
    let margin = spec.margin();
    let lat_range = -90.0 + margin..=90.0 - margin;
    let lon_range = -180.0 + margin..=180.0 - margin;

    let mut visual_table: Vec<Vec<f64>> = Vec::new();
    let mut classes: Vec<ClassInfo> = Vec::with_capacity(spec.classes);
    for label in 0..spec.classes {
        let paired_second = label < 2 * pairs && label % 2 == 1;
        let geo_centroid = if paired_second {
            let first = classes[label - 1].geo_centroid;
            let mut found = None;
            for _ in 0..100_000 {
                let c = (rng.random_range(lat_range.clone()), rng.random_range(lon_range.clone()));
                if geo_distance(first, c) >= PAIR_SEPARATION * spec.geo_radius {
                    found = Some(c);
                    break;
                }
            }
            found.ok_or_else(|| Error::Config("could not separate a confusable pair".into()))?
        } else {
            (rng.random_range(lat_range.clone()), rng.random_range(lon_range.clone()))
        };
        let visual_id = if paired_second {
            classes[label - 1].visual_id
        } else {
            let centroid: Vec<f64> = (0..spec.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            visual_table.push(centroid);
            visual_table.len() - 1
        };
        let partner = if label < 2 * pairs {
            Some(label ^ 1)
        } else {
            None
        };
        classes.push(ClassInfo {
            label,
            visual_id,
            partner,
            geo_centroid,
            visual_centroid: visual_table[visual_id].clone(),
        });
    }

    let eval_n = spec.eval_per_class();
    let mut train = Dataset::new(spec.feature_dim);
    let mut eval = Dataset::new(spec.feature_dim);
    let mut next_id = 0u64;
    let r = spec.geo_radius;
    for info in &classes {
        for k in 0..spec.samples_per_class {
            let features = info
                .visual_centroid
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + spec.visual_noise * z
                })
                .collect();
            let lat = info.geo_centroid.0 + rng.random_range(-r..=r);
            let lon = info.geo_centroid.1 + rng.random_range(-r..=r);
            let sample = LandmarkSample {
                id: next_id,
                label: info.label,
                lat,
                lon,
                features,
            };
            next_id += 1;
            if k < spec.samples_per_class - eval_n {
                train.samples.push(sample);
            } else {
                eval.samples.push(sample);
            }
        }
    }
    Ok(Generated {
        train,
        eval,
        classes,
    })
}

pub fn csv_header(feature_dim: usize) -> String {
    let mut h = String::from("id,label,lat,lon");
    for i in 0..feature_dim {
        let _ = write!(h, ",f{i}");
    }
    h
}

/// CSV text with header `id,label,lat,lon,f0,…`. Reals use the shortest
/// representation that parses back to the same `f64`.
pub fn to_csv_string(data: &Dataset) -> String {
    let mut out = csv_header(data.feature_dim);
    out.push('\n');
    for s in &data.samples {
        let _ = write!(out, "{},{},{},{}", s.id, s.label, s.lat, s.lon);
        for f in &s.features {
            let _ = write!(out, ",{f}");
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_csv_string(data))?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Parses CSV text. Errors name the 1-based line number.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Csv {
        row: 1,
        msg: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    if cols.len() < 4 || cols[..4] != ["id", "label", "lat", "lon"] {
        return Err(Error::Csv {
            row: 1,
            msg: format!("header must start with id,label,lat,lon, got '{header}'"),
        });
    }
    let feature_dim = cols.len() - 4;
    if header.trim_end_matches('\r') != csv_header(feature_dim) {
        return Err(Error::Csv {
            row: 1,
            msg: "feature columns must be f0..f{d-1} in order".into(),
        });
    }

    let mut data = Dataset::new(feature_dim);
    for (i, line) in lines {
        let row = i + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Csv { row, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != feature_dim + 4 {
            return Err(err(format!(
                "expected {} columns, found {}",
                feature_dim + 4,
                fields.len()
            )));
        }
        let id = fields[0]
            .parse::<u64>()
            .map_err(|e| err(format!("bad id '{}': {e}", fields[0])))?;
        let label = fields[1]
            .parse::<usize>()
            .map_err(|e| err(format!("bad label '{}': {e}", fields[1])))?;
        let real = |j: usize| -> Result<f64> {
            let v = fields[j]
                .parse::<f64>()
                .map_err(|e| err(format!("bad number '{}': {e}", fields[j])))?;
            if !v.is_finite() {
                return Err(err(format!("non-finite value '{}'", fields[j])));
            }
            Ok(v)
        };
        let lat = real(2)?;
        let lon = real(3)?;
        if !(-90.0..=90.0).contains(&lat) {
            return Err(err(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(err(format!("longitude {lon} outside [-180, 180]")));
        }
        let features = (4..fields.len()).map(real).collect::<Result<Vec<_>>>()?;
        data.samples.push(LandmarkSample {
            id,
            label,
            lat,
            lon,
            features,
        });
    }
    Ok(data)
}
