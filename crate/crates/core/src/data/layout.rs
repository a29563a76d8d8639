use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray_npy::WriteNpyExt;

use super::{Band, CsiSample, DatasetManifest, Environment, ManifestEntry};
use crate::error::io_err;
use crate::labels::{parse_slot, SlotLabels, ABSENT_TOKEN, USERS};
use crate::{Dtype, Error, Result, Scalar};

pub const CANONICAL_MANIFEST: &str = "manifest.csv";
pub const WIMANS_ANNOTATION: &str = "annotation.csv";
const CANONICAL_ARRAYS: &str = "amplitude";
const WIMANS_ARRAYS: &str = "wifi_csi/amp";

/// Reads the annotation table under `root` and checks every referenced array
/// exists. The canonical layout wins if both tables are present.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let canonical = root.join(CANONICAL_MANIFEST);
    let wimans = root.join(WIMANS_ANNOTATION);
    let (table, layout) = if canonical.is_file() {
        (canonical, Layout::Canonical)
    } else if wimans.is_file() {
        (wimans, Layout::Wimans)
    } else {
        return Err(Error::Table {
            path: root.to_path_buf(),
            message: format!("neither {CANONICAL_MANIFEST} nor {WIMANS_ANNOTATION} found"),
        });
    };
    let entries = read_table(&table, layout)?;
    for e in &entries {
        let path = root.join(&e.locator);
        if !path.is_file() {
            return Err(Error::Ingestion {
                sample_id: e.sample_id.clone(),
                message: format!("amplitude file {} is missing", path.display()),
            });
        }
    }
    DatasetManifest::new(root, entries)
}

#[derive(Clone, Copy)]
enum Layout {
    Canonical,
    Wimans,
}

struct Columns {
    id: usize,
    band: usize,
    environment: usize,
    users: [usize; USERS],
}

fn find(headers: &HashMap<String, usize>, names: &[&str], table: &Path) -> Result<usize> {
    names
        .iter()
        .find_map(|n| headers.get(*n).copied())
        .ok_or_else(|| Error::Table {
            path: table.to_path_buf(),
            message: format!("missing column `{}`", names[0]),
        })
}

fn columns(headers: &csv::StringRecord, layout: Layout, table: &Path) -> Result<Columns> {
    let map: HashMap<String, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
    let (id, band) = match layout {
        Layout::Canonical => (&["sample_id"][..], &["band"][..]),
        Layout::Wimans => (&["label", "sample_id"][..], &["wifi_band", "band"][..]),
    };
    let mut users = [0; USERS];
    for (u, slot) in users.iter_mut().enumerate() {
        let plain = format!("user_{}", u + 1);
        let activity = format!("user_{}_activity", u + 1);
        *slot = match layout {
            Layout::Canonical => find(&map, &[&plain], table)?,
            Layout::Wimans => find(&map, &[&activity, &plain], table)?,
        };
    }
    Ok(Columns {
        id: find(&map, id, table)?,
        band: find(&map, band, table)?,
        environment: find(&map, &["environment"], table)?,
        users,
    })
}

fn read_table(table: &Path, layout: Layout) -> Result<Vec<ManifestEntry>> {
    let bad = |message: String| Error::Table {
        path: table.to_path_buf(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(table)
        .map_err(|e| bad(e.to_string()))?;
    let cols = columns(&reader.headers().map_err(|e| bad(e.to_string()))?.clone(), layout, table)?;
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let sample_id = cell(cols.id).to_string();
        let ingest = |message: String| Error::Ingestion {
            sample_id: sample_id.clone(),
            message,
        };
        let band: Band = cell(cols.band).parse().map_err(ingest)?;
        let environment: Environment = cell(cols.environment).parse().map_err(ingest)?;
        let mut slots = [None; USERS];
        for (u, slot) in slots.iter_mut().enumerate() {
            *slot = parse_slot(cell(cols.users[u]))?;
        }
        let dir = match layout {
            Layout::Canonical => CANONICAL_ARRAYS,
            Layout::Wimans => WIMANS_ARRAYS,
        };
        entries.push(ManifestEntry {
            locator: PathBuf::from(dir).join(format!("{sample_id}.npy")),
            sample_id,
            band,
            environment,
            labels: SlotLabels(slots),
        });
    }
    Ok(entries)
}

/// Writes `samples` in the canonical layout, arrays in `T`'s dtype, and returns
/// the manifest that [`load_manifest`] will read back.
pub fn write_dataset<T: Scalar>(root: &Path, samples: &[CsiSample<T>]) -> Result<DatasetManifest> {
    let arrays = root.join(CANONICAL_ARRAYS);
    fs::create_dir_all(&arrays).map_err(io_err(&arrays))?;
    let table = root.join(CANONICAL_MANIFEST);
    let mut writer = csv::Writer::from_path(&table).map_err(|e| Error::Table {
        path: table.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| Error::Table {
        path: table.clone(),
        message: e.to_string(),
    };
    let mut header = vec!["sample_id".to_string(), "band".into(), "environment".into()];
    header.extend((1..=USERS).map(|u| format!("user_{u}")));
    writer.write_record(&header).map_err(csv_err)?;

    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let mut row = vec![s.sample_id.clone(), s.band.to_string(), s.environment.to_string()];
        row.extend(
            s.annotation
                .slots()
                .iter()
                .map(|slot| slot.map_or(ABSENT_TOKEN.to_string(), |a| a.name().to_string())),
        );
        writer.write_record(&row).map_err(csv_err)?;

        let locator = PathBuf::from(CANONICAL_ARRAYS).join(format!("{}.npy", s.sample_id));
        let path = root.join(&locator);
        let file = std::io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
        let written = match T::DTYPE {
            Dtype::F32 => s.amplitude.mapv(|v| v.to_f32().expect("f32 value")).write_npy(file),
            Dtype::F64 => s.amplitude.mapv(|v| v.to_f64_lossy()).write_npy(file),
        };
        written.map_err(|e| Error::Ingestion {
            sample_id: s.sample_id.clone(),
            message: format!("cannot write {}: {e}", path.display()),
        })?;
        entries.push(ManifestEntry {
            sample_id: s.sample_id.clone(),
            band: s.band,
            environment: s.environment,
            locator,
            labels: s.annotation,
        });
    }
    writer.flush().map_err(io_err(&table))?;
    DatasetManifest::new(root, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Activity;
    use ndarray::Array4;

    #[test]
    fn wimans_layout_is_understood() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(WIMANS_ARRAYS)).unwrap();
        let mut csv = String::from("label,environment,wifi_band,number_of_users");
        for u in 1..=6 {
            csv += &format!(",user_{u}_location,user_{u}_activity");
        }
        csv += "\nact_1_1,classroom,2.4,1,a,walk,,,,,,,,,,\n";
        csv += "act_1_2,meeting_room,5,2,b,nothing,c,lie_down,,,,,,,,\n";
        csv += "act_1_3,empty_room,5,0,,,,,,,,,,,,\n";
        fs::write(root.join(WIMANS_ANNOTATION), csv).unwrap();
        for id in ["act_1_1", "act_1_2", "act_1_3"] {
            let a = Array4::<f32>::ones((7, 3, 3, 30));
            a.write_npy(fs::File::create(root.join(WIMANS_ARRAYS).join(format!("{id}.npy"))).unwrap())
                .unwrap();
        }
        let m = load_manifest(root).unwrap();
        assert_eq!(m.len(), 3);
        let e = m.get("act_1_2").unwrap();
        assert_eq!(e.environment, Environment::Meeting);
        assert_eq!(e.band, Band::GHz5);
        assert_eq!(e.labels.0[0], Some(Activity::Nothing));
        assert_eq!(e.labels.0[1], Some(Activity::LieDown));
        assert_eq!(m.get("act_1_3").unwrap().labels.occupancy(), 0);
        let s = crate::data::load_sample::<f64>(&m, "act_1_1").unwrap();
        assert_eq!(s.amplitude.dim(), (7, 3, 3, 30));

        fs::remove_file(root.join(WIMANS_ARRAYS).join("act_1_3.npy")).unwrap();
        match load_manifest(root).unwrap_err() {
            Error::Ingestion { sample_id, .. } => assert_eq!(sample_id, "act_1_3"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unknown_activity_and_duplicates_are_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(CANONICAL_ARRAYS)).unwrap();
        let header = "sample_id,band,environment,user_1,user_2,user_3,user_4,user_5,user_6\n";
        fs::write(
            root.join(CANONICAL_MANIFEST),
            format!("{header}a,5,classroom,dance,null,null,null,null,null\n"),
        )
        .unwrap();
        assert!(matches!(load_manifest(root), Err(Error::UnknownActivity(v)) if v == "dance"));

        fs::write(
            root.join(CANONICAL_MANIFEST),
            format!("{header}a,5,classroom,walk,null,null,null,null,null\na,5,empty,null,null,null,null,null,null\n"),
        )
        .unwrap();
        let a = Array4::<f32>::ones((2, 3, 3, 30));
        a.write_npy(fs::File::create(root.join(CANONICAL_ARRAYS).join("a.npy")).unwrap())
            .unwrap();
        assert!(matches!(load_manifest(root), Err(Error::DuplicateSample(v)) if v == "a"));
    }
}
