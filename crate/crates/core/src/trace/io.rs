//! CSV formats: trace files (`t,y,v,rho`) and feature files
//! (`T,d_y,sigma_y,v_bar,a_bar,sigma_v,rho_0,delta_rho`).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureVector, Side, TrajectoryTrace};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct TraceRow {
    t: f64,
    y: f64,
    v: f64,
    rho: f64,
}

/// Parses a trace. The side is taken from `side` when given, otherwise from
/// the sign of the extremal `y`.
pub fn read_trace<R: Read>(reader: R, side: Option<Side>) -> Result<TrajectoryTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "y", "v", "rho"] {
        return Err(Error::InvalidTrace(format!(
            "expected header `t,y,v,rho`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let rows = rdr
        .deserialize::<TraceRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if rows.len() < 2 {
        return Err(Error::InvalidTrace(format!(
            "trace needs at least 2 rows, got {}",
            rows.len()
        )));
    }
    let span = rows[rows.len() - 1].t - rows[0].t;
    let ts = span / (rows.len() - 1) as f64;
    if !(ts > 0.0) {
        return Err(Error::InvalidTrace("time column must increase".into()));
    }
    for (l, w) in rows.windows(2).enumerate() {
        let dt = w[1].t - w[0].t;
        if (dt - ts).abs() > 1e-6 * ts + 1e-9 {
            return Err(Error::InvalidTrace(format!(
                "non-uniform sampling between rows {} and {} (dt = {dt}, expected {ts})",
                l,
                l + 1
            )));
        }
    }
    let y: Vec<f64> = rows.iter().map(|r| r.y).collect();
    let v = rows.iter().map(|r| r.v).collect();
    let rho = rows.iter().map(|r| r.rho).collect();
    match side {
        Some(side) => TrajectoryTrace::new(ts, y, v, rho, side),
        None => TrajectoryTrace::with_inferred_side(ts, y, v, rho),
    }
}

pub fn write_trace<W: Write>(writer: W, trace: &TrajectoryTrace) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    for (l, t) in trace.times().enumerate() {
        wtr.serialize(TraceRow {
            t,
            y: trace.lateral_offset()[l],
            v: trace.speed()[l],
            rho: trace.curvature()[l],
        })?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_trace_file(path: &Path, side: Option<Side>) -> Result<TrajectoryTrace> {
    let open = || -> Result<TrajectoryTrace> { read_trace(File::open(path)?, side) };
    open().map_err(|e| e.at(path))
}

pub fn write_trace_file(path: &Path, trace: &TrajectoryTrace) -> Result<()> {
    let write = || -> Result<()> { write_trace(File::create(path)?, trace) };
    write().map_err(|e| e.at(path))
}

pub fn read_features<R: Read>(reader: R) -> Result<Vec<FeatureVector>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != super::FEATURE_NAMES {
        return Err(Error::InvalidConfig(format!(
            "expected feature header `{}`, found `{}`",
            super::FEATURE_NAMES.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(rdr
        .deserialize::<FeatureVector>()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Writes the header even for an empty list.
pub fn write_features<W: Write>(writer: W, features: &[FeatureVector]) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    wtr.write_record(super::FEATURE_NAMES)?;
    for xi in features {
        wtr.serialize(xi)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_features_file(path: &Path) -> Result<Vec<FeatureVector>> {
    let read = || -> Result<Vec<FeatureVector>> { read_features(File::open(path)?) };
    read().map_err(|e| e.at(path))
}

pub fn write_features_file(path: &Path, features: &[FeatureVector]) -> Result<()> {
    let write = || -> Result<()> { write_features(File::create(path)?, features) };
    write().map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_round_trip() {
        let trace = TrajectoryTrace::new(
            0.1,
            vec![0.0, -0.21, -0.3, -0.05],
            vec![20.0, 20.1, 20.2, 20.1],
            vec![0.001, 0.0011, 0.0012, 0.0013],
            Side::Right,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y,v,rho\n"));
        let back = read_trace(buf.as_slice(), None).unwrap();
        assert_eq!(back.side(), Side::Right);
        assert_eq!(back.lateral_offset(), trace.lateral_offset());
        assert!((back.sample_period() - 0.1).abs() < 1e-12);
        let forced = read_trace(buf.as_slice(), Some(Side::Left)).unwrap();
        assert_eq!(forced.side(), Side::Left);
    }

    #[test]
    fn rejects_non_uniform_time() {
        let csv = "t,y,v,rho\n0,0,10,0\n0.1,0.1,10,0\n0.3,0.2,10,0\n";
        assert!(matches!(read_trace(csv.as_bytes(), None), Err(Error::InvalidTrace(_))));
        let bad_header = "time,y,v,rho\n0,0,10,0\n0.1,0,10,0\n";
        assert!(read_trace(bad_header.as_bytes(), None).is_err());
    }

    #[test]
    fn empty_feature_file_has_header() {
        let mut buf = Vec::new();
        write_features(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf.clone()).unwrap(),
            "T,d_y,sigma_y,v_bar,a_bar,sigma_v,rho_0,delta_rho\n"
        );
        assert!(read_features(buf.as_slice()).unwrap().is_empty());
    }

    #[test]
    fn feature_csv_round_trip_is_exact() {
        let xi = FeatureVector {
            duration: 4.1,
            d_y: 0.1 + 0.2,
            sigma_y: 0.031_415_926_535,
            v_bar: 21.7,
            a_bar: -0.123,
            sigma_v: 0.2,
            rho_0: 1.234e-4,
            delta_rho: -5.6e-5,
        };
        let mut buf = Vec::new();
        write_features(&mut buf, &[xi, xi]).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back, vec![xi, xi]);
    }
}
