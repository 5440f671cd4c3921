//! Dataset manifests over `root/subject/session/image` trees.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montage::NORMALIZATION;

pub const INDEX_FILE: &str = "manifest.json";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    /// Paths relative to the manifest root.
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub sessions: Vec<SessionRecord>,
}

impl SubjectRecord {
    pub fn image_count(&self) -> usize {
        self.sessions.iter().map(|s| s.images.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub subjects: Vec<SubjectRecord>,
    pub normalization: String,
    #[serde(default)]
    pub preset: Option<String>,
}

/// One image, addressed by its position in the flattened manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRecord {
    pub index: usize,
    pub subject: usize,
    pub session: usize,
    pub path: PathBuf,
    /// `subject/session/file`, unique within the manifest.
    pub sample_id: String,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, subjects: Vec<SubjectRecord>) -> Self {
        DatasetManifest {
            root: root.into(),
            subjects,
            normalization: NORMALIZATION.to_string(),
            preset: None,
        }
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn num_records(&self) -> usize {
        self.subjects.iter().map(SubjectRecord::image_count).sum()
    }

    /// Every image in subject, session, file order.
    pub fn samples(&self) -> Vec<SampleRecord> {
        let mut out = Vec::with_capacity(self.num_records());
        for (si, subject) in self.subjects.iter().enumerate() {
            for (ti, session) in subject.sessions.iter().enumerate() {
                for rel in &session.images {
                    let file = rel
                        .file_name()
                        .map(|f| f.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    out.push(SampleRecord {
                        index: out.len(),
                        subject: si,
                        session: ti,
                        path: self.root.join(rel),
                        sample_id: format!("{}/{}/{}", subject.subject_id, session.session_id, file),
                    });
                }
            }
        }
        out
    }

    /// Flat sample indices grouped by subject.
    pub fn samples_by_subject(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.subjects.len()];
        for s in self.samples() {
            groups[s.subject].push(s.index);
        }
        groups
    }

    pub fn save_index(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a cached index and check every referenced image still exists.
    pub fn load_index(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        for s in manifest.samples() {
            if !s.path.is_file() {
                return Err(Error::MalformedLayout {
                    path: s.path,
                    reason: "indexed image is missing".into(),
                });
            }
        }
        Ok(manifest)
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            !name.starts_with('.') && name != INDEX_FILE
        })
        .collect();
    entries.sort();
    Ok(entries)
}

fn name_of(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scan `root/subject/session/image` in lexicographic order.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MalformedLayout {
            path: root.to_path_buf(),
            reason: "root is not a directory".into(),
        });
    }
    let mut subjects = Vec::new();
    for subject_dir in sorted_entries(root)? {
        if !subject_dir.is_dir() {
            return Err(Error::MalformedLayout {
                path: subject_dir,
                reason: "expected a subject directory".into(),
            });
        }
        let mut sessions = Vec::new();
        for session_dir in sorted_entries(&subject_dir)? {
            if !session_dir.is_dir() {
                return Err(Error::MalformedLayout {
                    path: session_dir,
                    reason: "expected a session directory".into(),
                });
            }
            let mut images = Vec::new();
            for file in sorted_entries(&session_dir)? {
                if file.is_dir() {
                    return Err(Error::MalformedLayout {
                        path: file,
                        reason: "unexpected nested directory inside a session".into(),
                    });
                }
                if is_image(&file) {
                    images.push(file.strip_prefix(root).unwrap_or(&file).to_path_buf());
                }
            }
            if !images.is_empty() {
                sessions.push(SessionRecord {
                    session_id: name_of(&session_dir),
                    images,
                });
            }
        }
        if !sessions.is_empty() {
            subjects.push(SubjectRecord {
                subject_id: name_of(&subject_dir),
                sessions,
            });
        }
    }
    if subjects.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let manifest = DatasetManifest::new(root, subjects);
    log::info!(
        "manifest {}: {} subjects, {} images",
        root.display(),
        manifest.num_subjects(),
        manifest.num_records()
    );
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_tree(root: &Path, subjects: usize, sessions: usize, images: usize) {
        for s in 0..subjects {
            for t in 0..sessions {
                let dir = root.join(format!("s{s:03}")).join(format!("session{}", t + 1));
                fs::create_dir_all(&dir).unwrap();
                for i in 0..images {
                    fs::write(dir.join(format!("img{i:02}.png")), b"x").unwrap();
                }
            }
        }
    }

    #[test]
    fn counts_records() {
        let dir = tempfile::tempdir().unwrap();
        touch_tree(dir.path(), 2, 2, 5);
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.num_subjects(), 2);
        assert_eq!(m.num_records(), 20);
        let samples = m.samples();
        assert_eq!(samples[0].sample_id, "s000/session1/img00.png");
        assert_eq!(samples[19].sample_id, "s001/session2/img04.png");
        assert_eq!(m.samples_by_subject()[1], (10..20).collect::<Vec<_>>());
    }

    #[test]
    fn full_size_tree() {
        let dir = tempfile::tempdir().unwrap();
        touch_tree(dir.path(), 247, 2, 10);
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.num_records(), 4940);
    }

    #[test]
    fn empty_root() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn stray_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        touch_tree(dir.path(), 1, 1, 1);
        fs::write(dir.path().join("loose.png"), b"x").unwrap();
        assert!(matches!(load_manifest(dir.path()), Err(Error::MalformedLayout { .. })));
    }

    #[test]
    fn index_round_trip_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        touch_tree(dir.path(), 2, 1, 2);
        let m = load_manifest(dir.path()).unwrap();
        let idx = dir.path().join(INDEX_FILE);
        m.save_index(&idx).unwrap();
        assert_eq!(DatasetManifest::load_index(&idx).unwrap(), m);
        fs::remove_file(dir.path().join("s001/session1/img01.png")).unwrap();
        assert!(DatasetManifest::load_index(&idx).is_err());
    }
}
