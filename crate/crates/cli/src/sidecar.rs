//! GPS sidecar files standing in for phone sensors.
//!
//! For an image `IMG_001.png` the simulator looks for `IMG_001.png.gps`,
//! then `IMG_001.gps`. The file holds one line `lat,lon[,accuracy[,heading]]`;
//! missing accuracy and heading default to 0.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use fieldforge_core::capture::SensorFrame;

pub fn sidecar_path(image: &Path) -> Option<PathBuf> {
    let mut appended = image.as_os_str().to_owned();
    appended.push(".gps");
    let appended = PathBuf::from(appended);
    if appended.is_file() {
        return Some(appended);
    }
    let replaced = image.with_extension("gps");
    replaced.is_file().then_some(replaced)
}

pub fn parse_sidecar(text: &str, captured_at: DateTime<Utc>) -> Result<SensorFrame, String> {
    let fields: Vec<&str> = text.trim().split(',').map(str::trim).collect();
    if !(2..=4).contains(&fields.len()) {
        return Err(format!(
            "expected `lat,lon[,accuracy[,heading]]`, got {} fields",
            fields.len()
        ));
    }
    let num = |i: usize, name: &str| -> Result<f64, String> {
        match fields.get(i) {
            None => Ok(0.0),
            Some(s) => s
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("{name} {s:?} is not a number")),
        }
    };
    let frame = SensorFrame {
        latitude: num(0, "latitude")?,
        longitude: num(1, "longitude")?,
        gps_accuracy: num(2, "accuracy")?,
        heading: num(3, "heading")?,
        captured_at,
    };
    frame.validate()?;
    Ok(frame)
}
