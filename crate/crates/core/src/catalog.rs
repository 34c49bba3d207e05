//! Dataset catalogs: `root/<category>/instance_<k>/<descriptor>.jpg` trees or
//! a CSV manifest (`path,category,instance,condition`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const POSES: usize = 24;
pub const POSE_STEP_DEGREES: usize = 15;
pub const WILD_SCENES: usize = 4;
pub const STUDIO_PER_INSTANCE: usize = Lighting::ALL.len() * POSES;
pub const IMAGES_PER_INSTANCE: usize = STUDIO_PER_INSTANCE + WILD_SCENES;

const IMAGE_EXTENSIONS: &[&str] = &["jpg", "jpeg", "png"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lighting {
    Left,
    Right,
    Back,
    Off,
}

impl Lighting {
    pub const ALL: [Lighting; 4] = [Lighting::Left, Lighting::Right, Lighting::Back, Lighting::Off];

    pub fn as_str(self) -> &'static str {
        match self {
            Lighting::Left => "left",
            Lighting::Right => "right",
            Lighting::Back => "back",
            Lighting::Off => "off",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Lighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "left" => Ok(Lighting::Left),
            "right" => Ok(Lighting::Right),
            "back" => Ok(Lighting::Back),
            "off" => Ok(Lighting::Off),
            _ => Err(Error::Invalid(format!("unknown lighting {s:?}"))),
        }
    }
}

/// Capture condition of one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Studio { lighting: Lighting, pose: u8 },
    Wild { scene: u8 },
}

impl Condition {
    pub fn studio(lighting: Lighting, pose: usize) -> Result<Self> {
        if pose >= POSES {
            return Err(Error::Invalid(format!("pose index {pose} out of range")));
        }
        Ok(Condition::Studio {
            lighting,
            pose: pose as u8,
        })
    }

    pub fn wild(scene: usize) -> Result<Self> {
        if scene >= WILD_SCENES {
            return Err(Error::Invalid(format!("wild scene {scene} out of range")));
        }
        Ok(Condition::Wild { scene: scene as u8 })
    }

    /// Parses a file stem such as `left_015` or `wild_2`.
    pub fn parse_descriptor(stem: &str) -> Result<Self> {
        let (head, tail) = stem
            .split_once('_')
            .ok_or_else(|| Error::Invalid(format!("descriptor {stem:?} has no '_'")))?;
        let num: usize = tail
            .parse()
            .map_err(|_| Error::Invalid(format!("descriptor {stem:?}: bad number")))?;
        if head.eq_ignore_ascii_case("wild") {
            return Condition::wild(num);
        }
        let lighting = head.parse()?;
        if tail.len() != 3 || !num.is_multiple_of(POSE_STEP_DEGREES) {
            return Err(Error::Invalid(format!(
                "descriptor {stem:?}: angle must be a 3-digit multiple of {POSE_STEP_DEGREES}"
            )));
        }
        Condition::studio(lighting, num / POSE_STEP_DEGREES)
    }

    pub fn descriptor(&self) -> String {
        match self {
            Condition::Studio { lighting, pose } => {
                format!("{}_{:03}", lighting.as_str(), *pose as usize * POSE_STEP_DEGREES)
            }
            Condition::Wild { scene } => format!("wild_{scene}"),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub category: String,
    pub instance: u32,
    pub condition: Condition,
    pub path: PathBuf,
}

impl ImageRef {
    fn key(&self) -> (&str, u32, Condition) {
        (&self.category, self.instance, self.condition)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Catalog {
    records: Vec<ImageRef>,
    categories: BTreeSet<String>,
    #[serde(skip)]
    warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CatalogSummary {
    pub records: usize,
    pub categories: usize,
    pub instances: usize,
    pub complete_instances: usize,
    pub warnings: usize,
}

impl Catalog {
    /// Canonicalizes records: sorted by (category, instance, condition, path)
    /// with duplicate keys dropped (first wins) and reported.
    pub fn from_records(records: Vec<ImageRef>) -> Self {
        let mut catalog = Catalog::default();
        catalog.extend_canonical(records);
        catalog
    }

    fn extend_canonical(&mut self, mut records: Vec<ImageRef>) {
        records.extend(std::mem::take(&mut self.records));
        records.sort();
        let mut out: Vec<ImageRef> = Vec::with_capacity(records.len());
        for r in records {
            if let Some(prev) = out.last() {
                if prev.key() == r.key() {
                    let msg = format!(
                        "duplicate {}/instance_{}/{}: keeping {}, skipping {}",
                        r.category,
                        r.instance,
                        r.condition,
                        prev.path.display(),
                        r.path.display()
                    );
                    log::warn!("{msg}");
                    self.warnings.push(msg);
                    continue;
                }
            }
            out.push(r);
        }
        self.categories = out.iter().map(|r| r.category.clone()).collect();
        self.records = out;
    }

    pub fn records(&self) -> &[ImageRef] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn get(&self, index: usize) -> &ImageRef {
        &self.records[index]
    }

    /// Index lookup keyed by (category, instance, condition).
    pub fn index(&self) -> BTreeMap<(&str, u32, Condition), usize> {
        self.records.iter().enumerate().map(|(i, r)| (r.key(), i)).collect()
    }

    /// Sorted instance ids present for a category.
    pub fn instances(&self, category: &str) -> Vec<u32> {
        let set: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| r.category == category)
            .map(|r| r.instance)
            .collect();
        set.into_iter().collect()
    }

    pub fn count(&self, category: &str, instance: u32) -> (usize, usize) {
        self.records
            .iter()
            .filter(|r| r.category == category && r.instance == instance)
            .fold((0, 0), |(s, w), r| match r.condition {
                Condition::Studio { .. } => (s + 1, w),
                Condition::Wild { .. } => (s, w + 1),
            })
    }

    pub fn is_complete(&self, category: &str, instance: u32) -> bool {
        self.count(category, instance) == (STUDIO_PER_INSTANCE, WILD_SCENES)
    }

    /// (category, instance) pairs with fewer than the full 96 + 4 images.
    pub fn incomplete(&self) -> Vec<(String, u32)> {
        self.categories
            .iter()
            .flat_map(|c| self.instances(c).into_iter().map(move |i| (c.clone(), i)))
            .filter(|(c, i)| !self.is_complete(c, *i))
            .collect()
    }

    pub fn summary(&self) -> CatalogSummary {
        let instances: Vec<(String, u32)> = self
            .categories
            .iter()
            .flat_map(|c| self.instances(c).into_iter().map(move |i| (c.clone(), i)))
            .collect();
        let complete = instances.iter().filter(|(c, i)| self.is_complete(c, *i)).count();
        CatalogSummary {
            records: self.records.len(),
            categories: self.categories.len(),
            instances: instances.len(),
            complete_instances: complete,
            warnings: self.warnings.len(),
        }
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn parse_instance_dir(name: &str) -> Option<u32> {
    name.strip_prefix("instance_")?.parse().ok().filter(|&k| k >= 1)
}

/// Scans a dataset tree. Image files whose names do not parse are skipped
/// with a warning; files that are not images are ignored.
pub fn load_catalog(root: impl AsRef<Path>) -> Result<Catalog> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut category_dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    category_dirs.sort();
    if category_dirs.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }

    let mut warnings = Vec::new();
    let mut warn = |msg: String| {
        log::warn!("{msg}");
        warnings.push(msg);
    };
    let mut records = Vec::new();
    for cat_dir in category_dirs {
        let category = cat_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        for entry in walkdir::WalkDir::new(&cat_dir)
            .min_depth(1)
            .max_depth(2)
            .sort_by_file_name()
        {
            let entry = entry.map_err(|e| {
                let path = e.path().unwrap_or(&cat_dir).to_path_buf();
                Error::io(path, e.into())
            })?;
            let path = entry.path();
            if entry.depth() == 1 {
                if entry.file_type().is_dir() {
                    if parse_instance_dir(&entry.file_name().to_string_lossy()).is_none() {
                        warn(format!("skipping unrecognized directory {}", path.display()));
                    }
                } else if is_image(path) {
                    warn(format!("skipping image outside instance dir {}", path.display()));
                }
                continue;
            }
            if !entry.file_type().is_file() || !is_image(path) {
                continue;
            }
            let parent = path
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let Some(instance) = parse_instance_dir(parent) else {
                continue;
            };
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            match Condition::parse_descriptor(stem) {
                Ok(condition) => records.push(ImageRef {
                    category: category.clone(),
                    instance,
                    condition,
                    path: path.to_path_buf(),
                }),
                Err(e) => warn(format!("skipping {}: {e}", path.display())),
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut catalog = Catalog {
        warnings,
        ..Catalog::default()
    };
    catalog.extend_canonical(records);
    Ok(catalog)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: PathBuf,
    category: String,
    instance: u32,
    condition: String,
}

/// Loads a CSV manifest with header `path,category,instance,condition`.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Catalog> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let parsed = row.map_err(|e| Error::Invalid(e.to_string())).and_then(|row| {
            if row.instance == 0 {
                return Err(Error::Invalid("instance must be >= 1".into()));
            }
            Ok(ImageRef {
                condition: Condition::parse_descriptor(&row.condition)?,
                category: row.category,
                instance: row.instance,
                path: base.join(row.path),
            })
        });
        match parsed {
            Ok(r) => records.push(r),
            Err(e) => {
                let msg = format!("{} row {}: {e}", path.display(), line + 2);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset(path.to_path_buf()));
    }
    let mut catalog = Catalog {
        warnings,
        ..Catalog::default()
    };
    catalog.extend_canonical(records);
    Ok(catalog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    pub(crate) fn touch_instance(root: &Path, category: &str, instance: u32, wild: bool) {
        let dir = root.join(category).join(format!("instance_{instance}"));
        fs::create_dir_all(&dir).unwrap();
        for l in Lighting::ALL {
            for p in 0..POSES {
                let name = format!("{}_{:03}.jpg", l.as_str(), p * POSE_STEP_DEGREES);
                fs::write(dir.join(name), b"").unwrap();
            }
        }
        if wild {
            for k in 0..WILD_SCENES {
                fs::write(dir.join(format!("wild_{k}.jpg")), b"").unwrap();
            }
        }
    }

    #[test]
    fn descriptors() {
        assert_eq!(
            Condition::parse_descriptor("left_015").unwrap(),
            Condition::Studio {
                lighting: Lighting::Left,
                pose: 1
            }
        );
        assert_eq!(
            Condition::parse_descriptor("off_345").unwrap(),
            Condition::Studio {
                lighting: Lighting::Off,
                pose: 23
            }
        );
        assert_eq!(
            Condition::parse_descriptor("wild_3").unwrap(),
            Condition::Wild { scene: 3 }
        );
        for bad in [
            "wild_4", "left_360", "left_010", "top_000", "left", "left_15", "back_abc",
        ] {
            assert!(Condition::parse_descriptor(bad).is_err(), "{bad}");
        }
        for l in Lighting::ALL {
            for p in 0..POSES {
                let c = Condition::studio(l, p).unwrap();
                assert_eq!(Condition::parse_descriptor(&c.descriptor()).unwrap(), c);
            }
        }
    }

    #[test]
    fn one_pair_two_hundred_records() {
        let tmp = tempfile::tempdir().unwrap();
        touch_instance(tmp.path(), "mug", 1, true);
        touch_instance(tmp.path(), "mug", 2, true);
        let cat = load_catalog(tmp.path()).unwrap();
        assert_eq!(cat.len(), 200);
        assert!(cat.warnings().is_empty());
        assert!(cat.is_complete("mug", 1) && cat.is_complete("mug", 2));
        assert_eq!(cat.summary().complete_instances, 2);
    }

    #[test]
    fn empty_root_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = load_catalog(tmp.path()).unwrap_err();
        assert!(err.to_string().contains("no categories found"), "{err}");
    }

    #[test]
    fn malformed_name_skipped_with_warning() {
        let tmp = tempfile::tempdir().unwrap();
        touch_instance(tmp.path(), "mug", 1, true);
        touch_instance(tmp.path(), "mug", 2, true);
        let bad = tmp.path().join("mug/instance_2/wild_3.jpg");
        fs::rename(&bad, tmp.path().join("mug/instance_2/wilde_3.jpg")).unwrap();
        fs::write(tmp.path().join("mug/instance_1/notes.txt"), b"x").unwrap();
        let cat = load_catalog(tmp.path()).unwrap();
        assert_eq!(cat.len(), 199);
        assert_eq!(cat.warnings().len(), 1);
        assert!(cat.warnings()[0].contains("wilde_3.jpg"));
        assert_eq!(cat.incomplete(), vec![("mug".to_string(), 2)]);
    }

    #[test]
    fn scan_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        touch_instance(tmp.path(), "b", 1, false);
        touch_instance(tmp.path(), "a", 1, true);
        let a = load_catalog(tmp.path()).unwrap();
        let b = load_catalog(tmp.path()).unwrap();
        assert_eq!(a, b);
        let mut shuffled = a.records().to_vec();
        shuffled.reverse();
        assert_eq!(Catalog::from_records(shuffled).records(), a.records());
    }

    #[test]
    fn manifest_loading() {
        let tmp = tempfile::tempdir().unwrap();
        let csv = "path,category,instance,condition\n\
                   img/a.jpg,mug,1,left_000\n\
                   img/b.jpg,mug,2,wild_1\n\
                   img/c.jpg,mug,2,sideways\n";
        let p = tmp.path().join("m.csv");
        fs::write(&p, csv).unwrap();
        let cat = load_manifest(&p).unwrap();
        assert_eq!(cat.len(), 2);
        assert_eq!(cat.warnings().len(), 1);
        assert_eq!(cat.get(0).path, tmp.path().join("img/a.jpg"));
    }
}
