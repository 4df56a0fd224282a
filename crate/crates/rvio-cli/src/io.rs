//! Dataset file formats: plain CSV with a header row, floats serialized
//! with 17 significant digits so values round-trip bit-faithfully.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector2;

use rvio_core::filter::ImuSample;
use rvio_core::geom::{Quat, Vec3};
use rvio_core::sim::{Dataset, EstimateSample, Frame, RangeSample, TruthSample};
use rvio_core::vio::Diagnostics;
use rvio_core::{Error, Result};

/// 17 significant digits: exact round-trip for f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(field: &str, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::data_at(line, format!("{what}: '{field}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::data_at(line, format!("{what}: non-finite value '{field}'")));
    }
    Ok(v)
}

fn parse_u64(field: &str, line: usize, what: &str) -> Result<u64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::data_at(line, format!("{what}: '{field}' is not an integer")))
}

struct CsvReader {
    rows: Vec<(usize, Vec<String>)>,
}

impl CsvReader {
    fn load(path: &Path, expected_header: &str) -> Result<CsvReader> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines().enumerate();
        let Some((_, header)) = lines.next() else {
            return Err(Error::data(format!("{}: empty file", path.display())));
        };
        if header.trim() != expected_header {
            return Err(Error::data_at(
                1,
                format!("{}: expected header '{expected_header}', got '{header}'", path.display()),
            ));
        }
        let ncols = expected_header.split(',').count();
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
            if fields.len() != ncols {
                return Err(Error::data_at(
                    i + 1,
                    format!("{}: expected {ncols} fields, got {}", path.display(), fields.len()),
                ));
            }
            rows.push((i + 1, fields));
        }
        Ok(CsvReader { rows })
    }
}

pub fn write_imu(path: &Path, samples: &[ImuSample]) -> Result<()> {
    let mut out = String::from("t,wx,wy,wz,ax,ay,az\n");
    for s in samples {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            fmt_f64(s.t),
            fmt_f64(s.omega_imu.x),
            fmt_f64(s.omega_imu.y),
            fmt_f64(s.omega_imu.z),
            fmt_f64(s.a_imu.x),
            fmt_f64(s.a_imu.y),
            fmt_f64(s.a_imu.z)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let reader = CsvReader::load(path, "t,wx,wy,wz,ax,ay,az")?;
    let mut out = Vec::with_capacity(reader.rows.len());
    let mut last_t = f64::NEG_INFINITY;
    for (line, f) in &reader.rows {
        let t = parse_f64(&f[0], *line, "imu t")?;
        if t <= last_t {
            return Err(Error::data_at(*line, "imu timestamps must be strictly increasing"));
        }
        last_t = t;
        out.push(ImuSample {
            t,
            omega_imu: Vec3::new(
                parse_f64(&f[1], *line, "wx")?,
                parse_f64(&f[2], *line, "wy")?,
                parse_f64(&f[3], *line, "wz")?,
            ),
            a_imu: Vec3::new(
                parse_f64(&f[4], *line, "ax")?,
                parse_f64(&f[5], *line, "ay")?,
                parse_f64(&f[6], *line, "az")?,
            ),
        });
    }
    Ok(out)
}

pub fn write_features(path: &Path, frames: &[Frame]) -> Result<()> {
    let mut out = String::from("t,track_id,u,v\n");
    for fr in frames {
        for (id, uv) in &fr.observations {
            writeln!(out, "{},{},{},{}", fmt_f64(fr.t), id, fmt_f64(uv.x), fmt_f64(uv.y)).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Rebuilds frames from the features file; frame boundaries are the
/// distinct timestamps in order.
pub fn read_features(path: &Path) -> Result<Vec<Frame>> {
    let reader = CsvReader::load(path, "t,track_id,u,v")?;
    let mut frames: Vec<Frame> = Vec::new();
    for (line, f) in &reader.rows {
        let t = parse_f64(&f[0], *line, "feature t")?;
        let id = parse_u64(&f[1], *line, "track_id")?;
        let uv = Vector2::new(parse_f64(&f[2], *line, "u")?, parse_f64(&f[3], *line, "v")?);
        match frames.last_mut() {
            Some(fr) if (fr.t - t).abs() <= 1e-12 => fr.observations.push((id, uv)),
            Some(fr) if t < fr.t => {
                return Err(Error::data_at(*line, "feature timestamps must be non-decreasing"))
            }
            _ => frames.push(Frame {
                t,
                observations: vec![(id, uv)],
            }),
        }
    }
    Ok(frames)
}

pub fn write_ranges(path: &Path, ranges: &[RangeSample]) -> Result<()> {
    let mut out = String::from("t,range\n");
    for r in ranges {
        writeln!(out, "{},{}", fmt_f64(r.t), fmt_f64(r.range)).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_ranges(path: &Path) -> Result<Vec<RangeSample>> {
    let reader = CsvReader::load(path, "t,range")?;
    let mut out = Vec::with_capacity(reader.rows.len());
    for (line, f) in &reader.rows {
        out.push(RangeSample {
            t: parse_f64(&f[0], *line, "range t")?,
            range: parse_f64(&f[1], *line, "range")?,
        });
    }
    Ok(out)
}

pub fn write_truth(path: &Path, truth: &[TruthSample]) -> Result<()> {
    let mut out = String::from("t,px,py,pz,vx,vy,vz,qw,qx,qy,qz\n");
    for s in truth {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(s.t),
            fmt_f64(s.p.x),
            fmt_f64(s.p.y),
            fmt_f64(s.p.z),
            fmt_f64(s.v.x),
            fmt_f64(s.v.y),
            fmt_f64(s.v.z),
            fmt_f64(s.q.w),
            fmt_f64(s.q.x),
            fmt_f64(s.q.y),
            fmt_f64(s.q.z)
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthSample>> {
    let reader = CsvReader::load(path, "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz")?;
    let mut out = Vec::with_capacity(reader.rows.len());
    for (line, f) in &reader.rows {
        let g = |i: usize, what: &str| parse_f64(&f[i], *line, what);
        let q = Quat {
            w: g(7, "qw")?,
            x: g(8, "qx")?,
            y: g(9, "qy")?,
            z: g(10, "qz")?,
        };
        if (q.norm() - 1.0).abs() > 1e-6 {
            return Err(Error::data_at(*line, "truth quaternion is not unit"));
        }
        out.push(TruthSample {
            t: g(0, "t")?,
            p: Vec3::new(g(1, "px")?, g(2, "py")?, g(3, "pz")?),
            v: Vec3::new(g(4, "vx")?, g(5, "vy")?, g(6, "vz")?),
            q: q.normalized(),
        });
    }
    Ok(out)
}

const ESTIMATE_HEADER: &str =
    "t,px,py,pz,vx,vy,vz,qw,qx,qy,qz,pxx,pxy,pxz,pyy,pyz,pzz";

pub fn write_estimates(path: &Path, estimates: &[EstimateSample]) -> Result<()> {
    let mut out = String::from(ESTIMATE_HEADER);
    out.push('\n');
    for e in estimates {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            fmt_f64(e.t),
            fmt_f64(e.p.x),
            fmt_f64(e.p.y),
            fmt_f64(e.p.z),
            fmt_f64(e.v.x),
            fmt_f64(e.v.y),
            fmt_f64(e.v.z),
            fmt_f64(e.q.w),
            fmt_f64(e.q.x),
            fmt_f64(e.q.y),
            fmt_f64(e.q.z),
            fmt_f64(e.pos_cov[(0, 0)]),
            fmt_f64(e.pos_cov[(0, 1)]),
            fmt_f64(e.pos_cov[(0, 2)]),
            fmt_f64(e.pos_cov[(1, 1)]),
            fmt_f64(e.pos_cov[(1, 2)]),
            fmt_f64(e.pos_cov[(2, 2)])
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_estimates(path: &Path) -> Result<Vec<EstimateSample>> {
    let reader = CsvReader::load(path, ESTIMATE_HEADER)?;
    let mut out = Vec::with_capacity(reader.rows.len());
    for (line, f) in &reader.rows {
        let g = |i: usize, what: &str| parse_f64(&f[i], *line, what);
        let mut pos_cov = nalgebra::Matrix3::zeros();
        pos_cov[(0, 0)] = g(11, "pxx")?;
        pos_cov[(0, 1)] = g(12, "pxy")?;
        pos_cov[(0, 2)] = g(13, "pxz")?;
        pos_cov[(1, 1)] = g(14, "pyy")?;
        pos_cov[(1, 2)] = g(15, "pyz")?;
        pos_cov[(2, 2)] = g(16, "pzz")?;
        pos_cov[(1, 0)] = pos_cov[(0, 1)];
        pos_cov[(2, 0)] = pos_cov[(0, 2)];
        pos_cov[(2, 1)] = pos_cov[(1, 2)];
        out.push(EstimateSample {
            t: g(0, "t")?,
            p: Vec3::new(g(1, "px")?, g(2, "py")?, g(3, "pz")?),
            v: Vec3::new(g(4, "vx")?, g(5, "vy")?, g(6, "vz")?),
            q: Quat::new(g(7, "qw")?, g(8, "qx")?, g(9, "qy")?, g(10, "qz")?),
            pos_cov,
        });
    }
    Ok(out)
}

pub fn write_diagnostics(path: &Path, diag: &Diagnostics) -> Result<()> {
    let mut out = String::from(
        "t,slam_rows,slam_gated,msckf_accepted,msckf_rejected,range_applied,range_gated,live_features\n",
    );
    for fr in &diag.per_frame {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_f64(fr.t),
            fr.slam_rows,
            fr.slam_gated,
            fr.msckf_accepted,
            fr.msckf_rejected,
            fr.range_applied,
            fr.range_gated,
            fr.live_features
        )
        .unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a whole dataset directory (imu.csv, features.csv, range.csv,
/// truth.csv).
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let imu = read_imu(&dir.join("imu.csv"))?;
    let frames = read_features(&dir.join("features.csv"))?;
    let ranges = read_ranges(&dir.join("range.csv"))?;
    let truth_path = dir.join("truth.csv");
    let truth = if truth_path.exists() {
        read_truth(&truth_path)?
    } else {
        Vec::new()
    };
    Ok(Dataset {
        imu,
        frames,
        ranges,
        truth,
        dropped_ranges: 0,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset, meta: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_imu(&dir.join("imu.csv"), &data.imu)?;
    write_features(&dir.join("features.csv"), &data.frames)?;
    write_ranges(&dir.join("range.csv"), &data.ranges)?;
    write_truth(&dir.join("truth.csv"), &data.truth)?;
    std::fs::write(dir.join("meta.txt"), meta)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn float_roundtrip_is_bit_faithful() {
        for x in [
            0.1,
            -3.14159265358979,
            1.0 / 3.0,
            6.02e23,
            f64::MIN_POSITIVE,
            -0.0,
        ] {
            let s = fmt_f64(x);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits(), "{x} -> {s} -> {back}");
        }
    }

    #[test]
    fn truncated_row_is_line_numbered_error() {
        let dir = std::env::temp_dir().join("rvio_io_test_truncated");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("imu.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "t,wx,wy,wz,ax,ay,az").unwrap();
        writeln!(f, "0.0,0,0,0,0,0,9.81").unwrap();
        writeln!(f, "0.01,0,0").unwrap();
        drop(f);
        let err = read_imu(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn nan_is_rejected() {
        let dir = std::env::temp_dir().join("rvio_io_test_nan");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("range.csv");
        std::fs::write(&path, "t,range\n0.0,NaN\n").unwrap();
        let err = read_ranges(&path).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = std::env::temp_dir().join("rvio_io_test_header");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("range.csv");
        std::fs::write(&path, "time,dist\n0.0,1.0\n").unwrap();
        assert!(read_ranges(&path).is_err());
    }
}
