use std::fmt::Write as _;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::signal::FluxWaveform;

pub const B_FIELD_FILE: &str = "B_Field.csv";
pub const FREQUENCY_FILE: &str = "Frequency.csv";
pub const TEMPERATURE_FILE: &str = "Temperature.csv";
pub const LOSS_FILE: &str = "Volumetric_Loss.csv";

/// Parses a headerless numeric CSV into rows. Row numbers in errors are
/// 1-based.
fn read_rows(dir: &Path, file: &str) -> Result<Vec<Vec<f64>>> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Data {
            file: file.into(),
            row,
            msg: e.to_string(),
        })?;
        let values = record
            .iter()
            .enumerate()
            .map(|(col, cell)| {
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Data {
                        file: file.into(),
                        row,
                        msg: format!("column {}: {cell:?} is not a finite number", col + 1),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(values);
    }
    Ok(rows)
}

fn read_column(dir: &Path, file: &str) -> Result<Vec<f64>> {
    read_rows(dir, file)?
        .into_iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::Data {
                file: file.into(),
                row: i + 1,
                msg: format!("expected one value, found {}", row.len()),
            }),
        })
        .collect()
}

/// Loads the aligned files of a MagNet-style material directory. The loss
/// file is optional; without it the samples are unlabeled.
/// Waveform rows of any length are resampled to 1024 points; all rows of
/// the flux file must share one length. The directory name becomes the
/// material tag.
pub fn load_magnet_dir(dir: &Path) -> Result<Dataset> {
    let b_rows = read_rows(dir, B_FIELD_FILE)?;
    let freq = read_column(dir, FREQUENCY_FILE)?;
    let temp = read_column(dir, TEMPERATURE_FILE)?;
    let loss = if dir.join(LOSS_FILE).exists() {
        Some(read_column(dir, LOSS_FILE)?)
    } else {
        None
    };
    for (file, n) in [
        (FREQUENCY_FILE, freq.len()),
        (TEMPERATURE_FILE, temp.len()),
        (LOSS_FILE, loss.as_ref().map_or(b_rows.len(), Vec::len)),
    ] {
        if n != b_rows.len() {
            return Err(Error::Dataset(format!(
                "row count mismatch: {B_FIELD_FILE} has {} rows but {file} has {n}",
                b_rows.len()
            )));
        }
    }
    if b_rows.is_empty() {
        return Err(Error::Dataset(format!("{} contains no samples", dir.display())));
    }
    let width = b_rows[0].len();
    let mut samples = Vec::with_capacity(b_rows.len());
    for (i, raw) in b_rows.iter().enumerate() {
        let data_err = |file: &str, msg: String| Error::Data {
            file: file.into(),
            row: i + 1,
            msg,
        };
        if raw.len() != width {
            return Err(data_err(
                B_FIELD_FILE,
                format!("ragged row: {} values where row 1 has {width}", raw.len()),
            ));
        }
        if raw.len() < 2 {
            return Err(data_err(B_FIELD_FILE, "a waveform needs at least 2 samples".into()));
        }
        let w = FluxWaveform::resampled(raw, freq[i], temp[i], loss.as_ref().map(|l| l[i])).map_err(|e| {
            let file = match &e {
                Error::InvalidWaveform(m) if m.contains("frequency") => FREQUENCY_FILE,
                Error::InvalidWaveform(m) if m.contains("temperature") => TEMPERATURE_FILE,
                Error::InvalidWaveform(m) if m.contains("loss") => LOSS_FILE,
                _ => B_FIELD_FILE,
            };
            data_err(file, e.to_string())
        })?;
        samples.push(w);
    }
    let material = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "unknown".into());
    Ok(Dataset::new(material, samples))
}

/// Writes `ds` in the layout read by [`load_magnet_dir`]. Values use the
/// shortest representation that parses back to the same bits.
pub fn write_magnet_dir(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut b = String::new();
    let (mut f, mut t, mut l) = (String::new(), String::new(), String::new());
    for (i, s) in ds.samples().iter().enumerate() {
        let loss = s
            .loss()
            .ok_or_else(|| Error::Dataset(format!("sample {i} has no loss label to write")))?;
        for (j, v) in s.b().iter().enumerate() {
            if j > 0 {
                b.push(',');
            }
            write!(b, "{v:?}").expect("string write");
        }
        b.push('\n');
        writeln!(f, "{:?}", s.freq()).expect("string write");
        writeln!(t, "{:?}", s.temp()).expect("string write");
        writeln!(l, "{loss:?}").expect("string write");
    }
    for (file, body) in [(B_FIELD_FILE, b), (FREQUENCY_FILE, f), (TEMPERATURE_FILE, t), (LOSS_FILE, l)] {
        let path = dir.join(file);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{delta_b, WAVEFORM_LEN};

    fn write(dir: &Path, file: &str, body: &str) {
        std::fs::write(dir.join(file), body).unwrap();
    }

    fn fixture(dir: &Path, width: usize) {
        let row = |amp: f64| {
            (0..width)
                .map(|n| format!("{}", amp * (2.0 * std::f64::consts::PI * n as f64 / width as f64).sin()))
                .collect::<Vec<_>>()
                .join(",")
        };
        write(dir, B_FIELD_FILE, &format!("{}\n{}\n{}\n", row(0.1), row(0.05), row(0.2)));
        write(dir, FREQUENCY_FILE, "50000\n100000\n200000\n");
        write(dir, TEMPERATURE_FILE, "25\n50\n90\n");
        write(dir, LOSS_FILE, "1000.5\n2000\n3.5e4\n");
    }

    #[test]
    fn loads_three_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), WAVEFORM_LEN);
        let ds = load_magnet_dir(dir.path()).unwrap();
        assert_eq!(ds.len(), 3);
        let s = &ds.samples()[1];
        assert_eq!((s.freq(), s.temp(), s.loss()), (100000.0, 50.0, Some(2000.0)));
        assert_eq!(ds.samples()[2].loss(), Some(3.5e4));
        let expected: f64 = format!("{}", 0.05 * (2.0 * std::f64::consts::PI * 3.0 / 1024.0).sin())
            .parse()
            .unwrap();
        assert_eq!(s.b()[3], expected);
        assert_eq!(ds.labels().unwrap(), vec![1000.5, 2000.0, 3.5e4]);
    }

    #[test]
    fn resamples_long_rows() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 8192);
        let ds = load_magnet_dir(dir.path()).unwrap();
        for (s, amp) in ds.samples().iter().zip([0.1, 0.05, 0.2]) {
            assert_eq!(s.b().len(), WAVEFORM_LEN);
            assert!((delta_b(s) / (2.0 * amp) - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn row_count_mismatch_names_both_files() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 16);
        write(dir.path(), TEMPERATURE_FILE, "25\n50\n");
        let msg = load_magnet_dir(dir.path()).unwrap_err().to_string();
        assert!(msg.contains(B_FIELD_FILE) && msg.contains(TEMPERATURE_FILE), "{msg}");
    }

    #[test]
    fn reports_file_and_row() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 16);
        write(dir.path(), FREQUENCY_FILE, "50000\nabc\n200000\n");
        let err = load_magnet_dir(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Data { file, row: 2, .. } if file == FREQUENCY_FILE), "{err}");

        fixture(dir.path(), 16);
        let body = std::fs::read_to_string(dir.path().join(B_FIELD_FILE)).unwrap();
        let mut lines: Vec<String> = body.lines().map(String::from).collect();
        lines[2].push_str(",0.1");
        write(dir.path(), B_FIELD_FILE, &(lines.join("\n") + "\n"));
        let err = load_magnet_dir(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Data { file, row: 3, .. } if file == B_FIELD_FILE), "{err}");

        fixture(dir.path(), 16);
        write(dir.path(), LOSS_FILE, "1\n-2\n3\n");
        let err = load_magnet_dir(dir.path()).unwrap_err();
        assert!(matches!(&err, Error::Data { file, row: 2, .. } if file == LOSS_FILE), "{err}");

        std::fs::remove_file(dir.path().join(LOSS_FILE)).unwrap();
        let unlabeled = load_magnet_dir(dir.path()).unwrap();
        assert!(unlabeled.samples().iter().all(|s| s.loss().is_none()));
        assert!(unlabeled.labels().is_err());

        std::fs::remove_file(dir.path().join(FREQUENCY_FILE)).unwrap();
        let msg = load_magnet_dir(dir.path()).unwrap_err().to_string();
        assert!(msg.contains(FREQUENCY_FILE), "{msg}");
    }

    #[test]
    fn write_then_load_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), WAVEFORM_LEN);
        let ds = load_magnet_dir(dir.path()).unwrap();
        let out = dir.path().join("copy");
        write_magnet_dir(&ds, &out).unwrap();
        let back = load_magnet_dir(&out).unwrap();
        assert_eq!(back.samples(), ds.samples());
        assert_eq!(back.material(), "copy");
    }
}
