//! Degrees/minutes/seconds encoding of a coordinate pair.
//!
//! A location becomes `[sign, D, M, S]` for latitude followed by the same
//! four entries for longitude, hemispheres replaced by ±1 flags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GEO_DIM: usize = 8;

/// One axis in sign/degrees/minutes/seconds form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dms {
    pub sign: f64,
    pub degrees: f64,
    pub minutes: f64,
    pub seconds: f64,
}

impl Dms {
    /// Splits decimal degrees. Seconds stay fractional so that
    /// [`Dms::to_decimal`] recovers the input to rounding error.
    pub fn from_decimal(value: f64) -> Dms {
        let sign = if value < 0.0 { -1.0 } else { 1.0 };
        let a = value.abs();
        let degrees = a.floor();
        let rem = (a - degrees) * 60.0;
        let minutes = rem.floor().min(59.0);
        // (rem - minutes) < 1, but the product can still round up to 60.
        let seconds = ((rem - minutes) * 60.0).clamp(0.0, f64::from_bits(60f64.to_bits() - 1));
        Dms {
            sign,
            degrees,
            minutes,
            seconds,
        }
    }

    pub fn to_decimal(self) -> f64 {
        self.sign * (self.degrees + self.minutes / 60.0 + self.seconds / 3600.0)
    }
}

/// The 8-dimensional encoded location.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoVector {
    pub lat: Dms,
    pub lon: Dms,
}

impl GeoVector {
    pub fn to_array(&self) -> [f64; GEO_DIM] {
        [
            self.lat.sign,
            self.lat.degrees,
            self.lat.minutes,
            self.lat.seconds,
            self.lon.sign,
            self.lon.degrees,
            self.lon.minutes,
            self.lon.seconds,
        ]
    }

    /// Decimal `(lat, lon)`.
    pub fn decode(&self) -> (f64, f64) {
        (self.lat.to_decimal(), self.lon.to_decimal())
    }
}

pub fn encode_geo(lat: f64, lon: f64) -> Result<GeoVector> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::Coordinate(format!("latitude {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Coordinate(format!(
            "longitude {lon} outside [-180, 180]"
        )));
    }
    Ok(GeoVector {
        lat: Dms::from_decimal(lat),
        lon: Dms::from_decimal(lon),
    })
}

/// Rescaling applied to a [`GeoVector`] before it enters the location MLP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeoScheme {
    /// DMS magnitudes as-is.
    Raw,
    /// Degrees / 180, minutes / 60, seconds / 60; signs untouched.
    #[default]
    Unit,
}

impl FromStr for GeoScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GeoScheme::Raw),
            "unit" => Ok(GeoScheme::Unit),
            other => Err(Error::UnknownName {
                kind: "geo scheme",
                name: other.to_string(),
            }),
        }
    }
}

impl fmt::Display for GeoScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeoScheme::Raw => "raw",
            GeoScheme::Unit => "unit",
        })
    }
}

pub fn normalize_geo(v: &GeoVector, scheme: GeoScheme) -> [f64; GEO_DIM] {
    let mut out = v.to_array();
    if scheme == GeoScheme::Unit {
        for axis in 0..2 {
            out[axis * 4 + 1] /= 180.0;
            out[axis * 4 + 2] /= 60.0;
            out[axis * 4 + 3] /= 60.0;
        }
    }
    out
}

/// Encodes and normalizes in one step.
pub fn geo_features(lat: f64, lon: f64, scheme: GeoScheme) -> Result<[f64; GEO_DIM]> {
    Ok(normalize_geo(&encode_geo(lat, lon)?, scheme))
}
