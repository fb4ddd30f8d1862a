//! Dataset manifests.
//!
//! ```json
//! {"classes": ["background", "cell"],
//!  "records": [{"image": "img/a.png", "features": {"sam": "feat/a.fvol"},
//!               "labels": "lbl/a.png", "instances": "ins/a.ins",
//!               "object_labels": "obj/a.csv", "split": "train"}]}
//! ```
//!
//! Relative paths resolve against the manifest's directory. Class indices in
//! label rasters and object tables are 1-based; 0 means unlabeled.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::raster::{read_labels, LabelImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Manifest(format!("unknown split tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image: PathBuf,
    #[serde(default)]
    pub features: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_labels: Option<PathBuf>,
    pub split: Split,
}

impl Record {
    /// Name used in logs and prediction file names: the image file stem.
    pub fn name(&self) -> String {
        self.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
    }

    pub fn feature_path(&self, model: &str) -> Result<&Path> {
        self.features
            .get(model)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::Manifest(format!("record {} has no features for model {model:?}", self.image.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

#[derive(Deserialize)]
struct RawRecord {
    image: PathBuf,
    #[serde(default)]
    features: BTreeMap<String, PathBuf>,
    labels: Option<PathBuf>,
    instances: Option<PathBuf>,
    object_labels: Option<PathBuf>,
    split: String,
}

#[derive(Deserialize)]
struct RawManifest {
    classes: Vec<String>,
    records: Vec<RawRecord>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Parses and validates a manifest held in memory. Paths are resolved
    /// against `base`.
    pub fn from_json(text: &str, base: &Path) -> Result<Self> {
        let raw: RawManifest = serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))?;
        if raw.classes.is_empty() {
            return Err(Error::Manifest("class list is empty".into()));
        }
        if raw.classes.len() > u16::MAX as usize {
            return Err(Error::Manifest(format!("{} classes exceed the u16 label range", raw.classes.len())));
        }
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        let mut records = Vec::with_capacity(raw.records.len());
        for (i, r) in raw.records.into_iter().enumerate() {
            let split = r.split.parse().map_err(|e: Error| Error::Manifest(format!("record {i}: {e}")))?;
            records.push(Record {
                image: resolve(r.image),
                features: r.features.into_iter().map(|(k, p)| (k, resolve(p))).collect(),
                labels: r.labels.map(resolve),
                instances: r.instances.map(resolve),
                object_labels: r.object_labels.map(resolve),
                split,
            });
        }
        let manifest = Self { classes: raw.classes, records };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks that every referenced file exists and that label rasters and
    /// object tables stay within `1..=K`.
    pub fn validate(&self) -> Result<()> {
        let mut missing = Vec::new();
        for r in &self.records {
            let paths = std::iter::once(&r.image)
                .chain(r.features.values())
                .chain(r.labels.iter())
                .chain(r.instances.iter())
                .chain(r.object_labels.iter());
            for p in paths {
                if !p.is_file() {
                    missing.push(p.display().to_string());
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let k = self.num_classes();
        for r in &self.records {
            if let Some(p) = &r.labels {
                let max = read_labels(p)?.max_label() as usize;
                if max > k {
                    return Err(Error::Manifest(format!("{}: class index {max} out of range 1..={k}", p.display())));
                }
            }
            if let Some(p) = &r.object_labels {
                read_object_labels(p, k)?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    DatasetManifest::from_json(&text, base)
}

/// Reads an `instance_id,class_index` table. A header row is optional.
pub fn read_object_labels(path: impl AsRef<Path>, num_classes: usize) -> Result<BTreeMap<u32, u16>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut out = BTreeMap::new();
    for (line, row) in reader.records().enumerate() {
        let row = row?;
        if row.len() != 2 {
            return Err(Error::Manifest(format!("{}:{}: expected 2 columns, got {}", path.display(), line + 1, row.len())));
        }
        let (Ok(id), Ok(class)) = (row[0].parse::<u32>(), row[1].parse::<u16>()) else {
            if line == 0 {
                continue;
            }
            return Err(Error::Manifest(format!("{}:{}: unparsable row {:?}", path.display(), line + 1, row)));
        };
        if class as usize > num_classes {
            return Err(Error::Manifest(format!("{}:{}: class index {class} out of range 1..={num_classes}", path.display(), line + 1)));
        }
        if out.insert(id, class).is_some() {
            return Err(Error::Manifest(format!("{}:{}: duplicate instance id {id}", path.display(), line + 1)));
        }
    }
    Ok(out)
}

pub fn write_object_labels(labels: &BTreeMap<u32, u16>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["instance_id", "class_index"])?;
    for (id, class) in labels {
        w.write_record([id.to_string(), class.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Loads a record's label raster, failing if the record has none.
pub fn record_labels(record: &Record) -> Result<LabelImage> {
    let p = record.labels.as_ref().ok_or_else(|| Error::Manifest(format!("record {} has no label image", record.image.display())))?;
    read_labels(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::raster::write_labels;
    use crate::store::volume::{write_feature_volume, FeatureVolume};

    fn fixture(dir: &Path, label_value: u16) {
        std::fs::write(dir.join("a.png"), []).unwrap();
        for m in ["sam", "sam2", "dino"] {
            write_feature_volume(&FeatureVolume::filled(2, 2, 1, 0.0).unwrap(), dir.join(format!("a_{m}.fvol"))).unwrap();
        }
        write_labels(&LabelImage::new(1, 2, vec![0, label_value]).unwrap(), dir.join("a.lbl")).unwrap();
    }

    const JSON: &str = r#"{"classes": ["x", "y"], "records": [{"image": "a.png",
        "features": {"sam": "a_sam.fvol", "sam2": "a_sam2.fvol", "dino": "a_dino.fvol"},
        "labels": "a.lbl", "split": "train"}]}"#;

    #[test]
    fn minimal_manifest_loads_with_per_model_paths() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 2);
        let m = DatasetManifest::from_json(JSON, dir.path()).unwrap();
        assert_eq!(m.num_classes(), 2);
        for model in ["sam", "sam2", "dino"] {
            assert!(m.records[0].feature_path(model).unwrap().is_file());
        }
        assert!(m.records[0].feature_path("other").is_err());
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 3);
        let err = DatasetManifest::from_json(JSON, dir.path()).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn unknown_split_and_missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 1);
        let bad = JSON.replace("\"train\"", "\"dev\"");
        assert!(DatasetManifest::from_json(&bad, dir.path()).unwrap_err().to_string().contains("unknown split"));
        let missing = JSON.replace("a.lbl", "nope.lbl");
        match DatasetManifest::from_json(&missing, dir.path()) {
            Err(Error::MissingFiles(files)) => assert!(files[0].ends_with("nope.lbl")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn object_label_table_round_trips_and_checks_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.csv");
        let table: BTreeMap<u32, u16> = [(3, 1), (17, 2)].into_iter().collect();
        write_object_labels(&table, &p).unwrap();
        assert_eq!(read_object_labels(&p, 2).unwrap(), table);
        assert!(read_object_labels(&p, 1).is_err());
        std::fs::write(&p, "5,1\n5,2\n").unwrap();
        assert!(read_object_labels(&p, 2).is_err());
    }
}
