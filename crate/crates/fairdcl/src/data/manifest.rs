use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_image, load_mask, ImageTile, Split};
use crate::error::{FairdclError, Result};

/// One manifest row. Paths are resolved relative to the manifest location.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub group: usize,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    group_names: Vec<String>,
    class_names: Vec<String>,
}

/// Dataset index: CSV rows plus the sidecar naming groups and classes.
/// Pixel data is loaded lazily per entry.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub group_names: Vec<String>,
    pub class_names: Vec<String>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Load one entry's pixels (and mask when present) from disk.
    pub fn load_tile(&self, entry: &ManifestEntry) -> Result<ImageTile> {
        let pixels = load_image(&self.root.join(&entry.image))?;
        let mask = match &entry.mask {
            Some(p) => Some(load_mask(&self.root.join(p))?),
            None => None,
        };
        let tile = ImageTile {
            pixels,
            mask,
            group: entry.group,
            split: entry.split,
            id: entry.id.clone(),
        };
        tile.validate(self.num_groups(), self.num_classes())?;
        Ok(tile)
    }

    /// Load every tile of a split into memory.
    pub fn load_split(&self, split: Split) -> Result<Vec<ImageTile>> {
        self.split_entries(split)
            .into_iter()
            .map(|e| self.load_tile(e))
            .collect()
    }

    /// Persist the manifest CSV and its sidecar next to `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)
            .map_err(|e| FairdclError::Manifest(e.to_string()))?;
        wtr.write_record(["id", "image", "mask", "group", "split"])
            .map_err(|e| FairdclError::Manifest(e.to_string()))?;
        for e in &self.entries {
            wtr.write_record([
                e.id.as_str(),
                &e.image.to_string_lossy(),
                &e.mask
                    .as_ref()
                    .map(|m| m.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                &e.group.to_string(),
                e.split.as_str(),
            ])
            .map_err(|e| FairdclError::Manifest(e.to_string()))?;
        }
        wtr.flush()?;
        let sidecar = Sidecar {
            group_names: self.group_names.clone(),
            class_names: self.class_names.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| FairdclError::Manifest(e.to_string()))?;
        std::fs::write(sidecar_path(path), json)?;
        Ok(())
    }
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("json")
}

/// Parse a manifest CSV (`id,image,mask,group,split`) and its JSON sidecar.
/// Does not touch pixel data.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(FairdclError::Manifest(format!(
            "manifest not found: {}",
            path.display()
        )));
    }
    let sidecar_file = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(&sidecar_file).map_err(|_| {
            FairdclError::Manifest(format!("missing sidecar: {}", sidecar_file.display()))
        })?,
    )
    .map_err(|e| FairdclError::Manifest(format!("bad sidecar: {e}")))?;

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| FairdclError::Manifest(e.to_string()))?;
    {
        let headers = rdr
            .headers()
            .map_err(|e| FairdclError::Manifest(e.to_string()))?;
        let expected = ["id", "image", "mask", "group", "split"];
        if headers.iter().ne(expected) {
            return Err(FairdclError::Manifest(format!(
                "bad header: expected id,image,mask,group,split, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let k = sidecar.group_names.len();
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| FairdclError::Manifest(format!("row {}: {e}", lineno + 2)))?;
        if rec.len() != 5 {
            return Err(FairdclError::Manifest(format!(
                "row {}: expected 5 fields, got {}",
                lineno + 2,
                rec.len()
            )));
        }
        let id = rec[0].to_string();
        if !seen.insert(id.clone()) {
            return Err(FairdclError::Manifest(format!("duplicate id '{id}'")));
        }
        let group: usize = rec[3]
            .parse()
            .map_err(|_| FairdclError::Manifest(format!("row {}: bad group", lineno + 2)))?;
        if group >= k {
            return Err(FairdclError::Manifest(format!(
                "group {group} out of range ({k} groups declared)"
            )));
        }
        entries.push(ManifestEntry {
            id,
            image: PathBuf::from(&rec[1]),
            mask: if rec[2].is_empty() {
                None
            } else {
                Some(PathBuf::from(&rec[2]))
            },
            group,
            split: Split::parse(&rec[4])?,
        });
    }
    Ok(DatasetManifest {
        entries,
        group_names: sidecar.group_names,
        class_names: sidecar.class_names,
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, csv: &str, groups: &[&str]) -> PathBuf {
        let path = dir.join("manifest.csv");
        std::fs::write(&path, csv).unwrap();
        let sidecar = serde_json::json!({
            "group_names": groups,
            "class_names": ["background", "strip", "blob"],
        });
        std::fs::write(dir.join("manifest.json"), sidecar.to_string()).unwrap();
        path
    }

    #[test]
    fn parses_three_row_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "id,image,mask,group,split\n\
             a,imgs/a.png,,0,pretrain\n\
             b,imgs/b.png,masks/b.png,1,finetune\n\
             c,imgs/c.png,,0,test\n",
            &["urban", "rural"],
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.num_groups(), 2);
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.entries[1].mask.as_ref().unwrap().to_str().unwrap(), "masks/b.png");
        assert_eq!(m.split_entries(Split::Pretrain).len(), 1);
    }

    #[test]
    fn group_out_of_range_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "id,image,mask,group,split\na,a.png,,5,pretrain\n",
            &["urban", "rural"],
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "id,image,mask,group,split\na,a.png,,0,pretrain\na,b.png,,1,pretrain\n",
            &["urban", "rural"],
        );
        assert!(load_manifest(&path).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_manifest(Path::new("/nonexistent/manifest.csv")).is_err());
    }

    #[test]
    fn split_counts_match_loveda_style_header_totals() {
        // 11417 pretrain tiles: 5845 urban + 5572 rural.
        let dir = tempfile::tempdir().unwrap();
        let mut csv = String::from("id,image,mask,group,split\n");
        for i in 0..5845 {
            csv.push_str(&format!("u{i},u{i}.png,,0,pretrain\n"));
        }
        for i in 0..5572 {
            csv.push_str(&format!("r{i},r{i}.png,,1,pretrain\n"));
        }
        let path = write_manifest(dir.path(), &csv, &["urban", "rural"]);
        let m = load_manifest(&path).unwrap();
        let pre = m.split_entries(Split::Pretrain);
        assert_eq!(pre.len(), 11417);
        assert_eq!(pre.iter().filter(|e| e.group == 0).count(), 5845);
        assert_eq!(pre.iter().filter(|e| e.group == 1).count(), 5572);
    }

    #[test]
    fn round_trips_through_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "id,image,mask,group,split\na,a.png,a_m.png,0,pretrain\n",
            &["urban", "rural"],
        );
        let m = load_manifest(&path).unwrap();
        let out = dir.path().join("copy.csv");
        m.save(&out).unwrap();
        let m2 = load_manifest(&out).unwrap();
        assert_eq!(m2.entries.len(), 1);
        assert_eq!(m2.group_names, m.group_names);
    }
}
