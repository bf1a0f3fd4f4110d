//! Flat text form of [`SceneSpec`]:
//!
//! ```text
//! # comments and blank lines are ignored
//! width = 64
//! height = 64
//! duration_us = 500000
//! threshold = 0.2
//! noise_rate = 0.5
//! seed = 7
//! # x, y, width, height, vx, vy, polarity (+1 brighter / -1 darker), class
//! box = 8, 20, 16, 16, 30, 10, 1, 0
//! # box index, start_us, end_us
//! pause = 0, 100000, 200000
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{MovingBox, Polarity, SceneSpec, SensorGeometry};
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn file_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Value(format!("{}: {msg}", path.display()))
}

fn num<T: std::str::FromStr>(s: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("bad {what} `{}`", s.trim())))
}

impl SceneSpec {
    /// Parses the text form; `path` only labels errors.
    pub fn parse_str(text: &str, path: &Path) -> Result<Self> {
        let (mut width, mut height) = (None, None);
        let mut spec = SceneSpec {
            geometry: SensorGeometry::new(1, 1)?,
            boxes: Vec::new(),
            duration_us: 0,
            threshold: 0.2,
            noise_rate: 0.0,
            seed: 0,
        };
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| parse_err(path, line, format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "width" => width = Some(num::<u16>(value, "width", path, line)?),
                "height" => height = Some(num::<u16>(value, "height", path, line)?),
                "duration_us" => spec.duration_us = num(value, "duration_us", path, line)?,
                "duration_ms" => spec.duration_us = num::<u64>(value, "duration_ms", path, line)? * 1000,
                "threshold" => spec.threshold = num(value, "threshold", path, line)?,
                "noise_rate" => spec.noise_rate = num(value, "noise_rate", path, line)?,
                "seed" => spec.seed = num(value, "seed", path, line)?,
                "box" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 8 {
                        return Err(parse_err(path, line, format!("box needs 8 fields, got {}", f.len())));
                    }
                    let v: Vec<f64> = f[..6]
                        .iter()
                        .map(|s| num::<f64>(s, "box field", path, line))
                        .collect::<Result<_>>()?;
                    let p: i64 = num(f[6], "polarity", path, line)?;
                    let contrast = Polarity::from_sign(p).map_err(|e| parse_err(path, line, e.to_string()))?;
                    spec.boxes.push(MovingBox {
                        x: v[0],
                        y: v[1],
                        width: v[2],
                        height: v[3],
                        vx: v[4],
                        vy: v[5],
                        contrast,
                        class_id: num(f[7], "class", path, line)?,
                        pauses: Vec::new(),
                    });
                }
                "pause" => {
                    let f: Vec<&str> = value.split(',').collect();
                    if f.len() != 3 {
                        return Err(parse_err(path, line, format!("pause needs 3 fields, got {}", f.len())));
                    }
                    let i: usize = num(f[0], "box index", path, line)?;
                    let (a, b): (u64, u64) = (num(f[1], "start", path, line)?, num(f[2], "end", path, line)?);
                    if a >= b {
                        return Err(parse_err(path, line, format!("empty pause {a}..{b}")));
                    }
                    let target = spec
                        .boxes
                        .get_mut(i)
                        .ok_or_else(|| parse_err(path, line, format!("pause refers to box {i}, which is not defined yet")))?;
                    target.pauses.push((a, b));
                }
                other => return Err(parse_err(path, line, format!("unknown key `{other}`"))),
            }
        }
        let (Some(w), Some(h)) = (width, height) else {
            return Err(file_err(path, "scene needs both `width` and `height`"));
        };
        spec.geometry = SensorGeometry::new(w, h).map_err(|e| file_err(path, e))?;
        spec.validate().map_err(|e| file_err(path, e))?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    /// Text form accepted by [`SceneSpec::parse_str`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "width = {}", self.geometry.width());
        let _ = writeln!(s, "height = {}", self.geometry.height());
        let _ = writeln!(s, "duration_us = {}", self.duration_us);
        let _ = writeln!(s, "threshold = {:?}", self.threshold);
        let _ = writeln!(s, "noise_rate = {:?}", self.noise_rate);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (i, b) in self.boxes.iter().enumerate() {
            let _ = writeln!(
                s,
                "box = {:?}, {:?}, {:?}, {:?}, {:?}, {:?}, {}, {}",
                b.x,
                b.y,
                b.width,
                b.height,
                b.vx,
                b.vy,
                b.contrast.sign(),
                b.class_id
            );
            for &(a, e) in &b.pauses {
                let _ = writeln!(s, "pause = {i}, {a}, {e}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = "width = 64\nheight = 48 # sensor\nduration_ms = 500\nthreshold = 0.25\nnoise_rate = 0.5\nseed = 7\n\
                           box = 8, 20, 16, 16, 30, 10, 1, 0\nbox = 30.5, 2, 8, 8, -20, 5, -1, 1\npause = 1, 100000, 200000\n";

    #[test]
    fn parses_and_round_trips() {
        let p = Path::new("scene.txt");
        let s = SceneSpec::parse_str(EXAMPLE, p).unwrap();
        assert_eq!((s.geometry.width(), s.geometry.height(), s.duration_us, s.seed), (64, 48, 500_000, 7));
        assert_eq!(s.boxes.len(), 2);
        assert_eq!(s.boxes[1].contrast, Polarity::Negative);
        assert_eq!(s.boxes[1].pauses, vec![(100_000, 200_000)]);
        assert_eq!(SceneSpec::parse_str(&s.to_text(), p).unwrap(), s);
    }

    #[test]
    fn errors_carry_path_and_line() {
        let p = Path::new("bad.txt");
        let e = SceneSpec::parse_str("width = 8\nheight = 8\nbox = 1,2,3\n", p).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("bad.txt") && msg.contains("line 3"), "{msg}");
        assert!(SceneSpec::parse_str("width = 8\ncolour = red\n", p).is_err());
        assert!(SceneSpec::parse_str("width = 8\nheight = 8\nduration_us = 10\npause = 0, 1, 2\n", p).is_err());
        // box outside the sensor fails validation
        let e = SceneSpec::parse_str("width = 8\nheight = 8\nduration_us = 10\nbox = 4,4,8,8,0,0,1,0\n", p).unwrap_err();
        assert!(e.to_string().contains("bad.txt"));
    }
}
