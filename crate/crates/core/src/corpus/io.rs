//! Trajectory CSV and alignment label files.
//!
//! Trajectories: a header `time_s,UL_x,UL_y,...,TD_y` followed by one row per
//! frame. The frame rate is recovered from the time column.
//!
//! Alignments: one `start_s end_s phoneme` triple per line, whitespace
//! separated. Blank lines are ignored.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{ArticulatoryTrajectory, Interval, PhonemeAlignment, CHANNELS, NUM_CHANNELS};
use crate::error::{Error, Result};
use crate::features::PhonemeInventory;
use crate::numerics::Tensor;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn header() -> String {
    std::iter::once("time_s")
        .chain(CHANNELS.iter().copied())
        .collect::<Vec<_>>()
        .join(",")
}

/// Frame rates are stored implicitly; round the recovered rate to µHz.
fn round_rate(rate: f64) -> f64 {
    (rate * 1e6).round() / 1e6
}

pub fn write_trajectory(traj: &ArticulatoryTrajectory) -> String {
    let mut out = header();
    out.push('\n');
    for (i, row) in traj.frames().iter_rows().enumerate() {
        let t = i as f64 / traj.frame_rate_hz();
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parses trajectory CSV text. `path` is only used in error messages.
pub fn parse_trajectory(text: &str, path: &Path) -> Result<ArticulatoryTrajectory> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (hline, head) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let cols: Vec<&str> = head.split(',').map(str::trim).collect();
    if cols.first() != Some(&"time_s") {
        return Err(parse_err(path, hline, "header must start with time_s"));
    }
    if cols.len() - 1 != NUM_CHANNELS {
        return Err(parse_err(
            path,
            hline,
            format!("expected {NUM_CHANNELS} channels, header has {}", cols.len() - 1),
        ));
    }
    if cols[1..] != CHANNELS {
        return Err(parse_err(
            path,
            hline,
            format!("channel names must be {}", CHANNELS.join(",")),
        ));
    }

    let mut times = Vec::new();
    let mut data = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != NUM_CHANNELS + 1 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, found {}", NUM_CHANNELS + 1, fields.len()),
            ));
        }
        let mut row = [0.0; NUM_CHANNELS + 1];
        for (slot, f) in row.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("bad number {f:?}")))?;
        }
        if let Some(&prev) = times.last() {
            if row[0] <= prev {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("time {} does not increase (previous {prev})", row[0]),
                ));
            }
        }
        times.push(row[0]);
        data.extend_from_slice(&row[1..]);
    }
    if times.len() < 2 {
        return Err(parse_err(
            path,
            hline,
            "need at least two frames to determine the frame rate",
        ));
    }
    let span = times[times.len() - 1] - times[0];
    let rate = round_rate((times.len() - 1) as f64 / span);
    ArticulatoryTrajectory::new(Tensor::matrix(times.len(), NUM_CHANNELS, data)?, rate)
}

pub fn save_trajectory(traj: &ArticulatoryTrajectory, path: &Path) -> Result<()> {
    fs::write(path, write_trajectory(traj))?;
    Ok(())
}

pub fn load_trajectory(path: &Path) -> Result<ArticulatoryTrajectory> {
    let text = fs::read_to_string(path)?;
    parse_trajectory(&text, path)
}

pub fn write_alignment(al: &PhonemeAlignment) -> String {
    let mut out = String::new();
    for iv in al.intervals() {
        let _ = writeln!(out, "{} {} {}", iv.start_s, iv.end_s, iv.phoneme);
    }
    out
}

pub fn parse_alignment(text: &str, path: &Path) -> Result<PhonemeAlignment> {
    let inventory = PhonemeInventory;
    let mut intervals: Vec<Interval> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r').trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [start, end, phone] = fields[..] else {
            return Err(parse_err(path, lineno, "expected `start_s end_s phoneme`"));
        };
        let num = |f: &str| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, lineno, format!("bad time {f:?}")))
        };
        let iv = Interval::new(phone, num(start)?, num(end)?);
        if !inventory.contains(phone) {
            return Err(parse_err(path, lineno, format!("unknown phoneme {phone:?}")));
        }
        if !(iv.duration() > 0.0) {
            return Err(parse_err(path, lineno, "interval has non-positive duration"));
        }
        let expected_start = intervals.last().map_or(0.0, |p| p.end_s);
        if (iv.start_s - expected_start).abs() > 1e-9 {
            return Err(parse_err(
                path,
                lineno,
                format!("interval starts at {} but should start at {expected_start}", iv.start_s),
            ));
        }
        intervals.push(iv);
    }
    PhonemeAlignment::new(intervals).map_err(|e| parse_err(path, 1, e.to_string()))
}

pub fn save_alignment(al: &PhonemeAlignment, path: &Path) -> Result<()> {
    fs::write(path, write_alignment(al))?;
    Ok(())
}

pub fn load_alignment(path: &Path) -> Result<PhonemeAlignment> {
    let text = fs::read_to_string(path)?;
    parse_alignment(&text, path)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn p() -> &'static Path {
        Path::new("probe.csv")
    }

    fn traj(rows: usize, rate: f64) -> ArticulatoryTrajectory {
        let data = (0..rows * NUM_CHANNELS).map(|i| (i as f64 * 0.37).sin() * 3.1).collect();
        ArticulatoryTrajectory::new(Tensor::matrix(rows, NUM_CHANNELS, data).unwrap(), rate).unwrap()
    }

    proptest! {
        #[test]
        fn trajectory_roundtrip(rows in 2usize..40, rate in prop_oneof![Just(100.0), Just(250.0), Just(200.0)]) {
            let t = traj(rows, rate);
            let back = parse_trajectory(&write_trajectory(&t), p()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn crlf_accepted() {
        let t = traj(5, 100.0);
        let crlf = write_trajectory(&t).replace('\n', "\r\n");
        assert_eq!(parse_trajectory(&crlf, p()).unwrap(), t);
        let al = PhonemeAlignment::from_durations(&["aa", "b"], &[0.1, 0.05]).unwrap();
        let crlf = write_alignment(&al).replace('\n', "\r\n");
        assert_eq!(parse_alignment(&crlf, p()).unwrap(), al);
    }

    #[test]
    fn eleven_channels_is_a_channel_count_error() {
        let text = "time_s,UL_x,UL_y,LL_x,LL_y,Jaw_x,Jaw_y,TT_x,TT_y,TB_x,TB_y,TD_x\n0,1,2,3,4,5,6,7,8,9,10,11\n";
        let err = parse_trajectory(text, p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(err.to_string().contains("12 channels"));
    }

    #[test]
    fn non_monotone_time_reports_line() {
        let mut text = write_trajectory(&traj(4, 100.0));
        text = text.replacen("\n0.02,", "\n0.005,", 1);
        let err = parse_trajectory(&text, p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn bad_number_reports_line() {
        let mut text = write_trajectory(&traj(3, 100.0));
        text.push_str("0.03,1,2,3,x,5,6,7,8,9,10,11,12\n");
        let err = parse_trajectory(&text, p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 5, .. }), "{err}");
    }

    #[test]
    fn alignment_errors_carry_lines() {
        let err = parse_alignment("0 0.1 aa\n0.1 0.2 qq\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_alignment("0 0.1 aa\n0.15 0.2 b\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_alignment("0.05 0.1 aa\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_alignment("0 0.1\n", p()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }
}
