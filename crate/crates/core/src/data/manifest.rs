//! Tab-separated sample lists: one `rgb_path<TAB>depth_path` per line.

use std::path::{Path, PathBuf};

use crate::data::{pnm, DepthSample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    /// Relative entries are resolved against this directory.
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, PathBuf)>,
}

impl Manifest {
    /// Parses manifest text. Blank lines and `#` comments are skipped; order
    /// is preserved.
    pub fn parse(text: &str, root: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let body = line.trim_end_matches(['\n', '\r']);
            if body.trim().is_empty() || body.trim_start().starts_with('#') {
                continue;
            }
            let mut cols = body.split('\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(rgb), Some(depth), None) if !rgb.is_empty() && !depth.is_empty() => {
                    entries.push((PathBuf::from(rgb), PathBuf::from(depth)));
                }
                _ => {
                    return Err(Error::Parse {
                        offset: start,
                        message: "expected 'rgb_path<TAB>depth_path'".into(),
                    })
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::Contract("manifest has no entries".into()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    /// Reads a manifest file and checks that every listed file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let m = Self::parse(&text, &root)?;
        for (rgb, depth) in m.resolved() {
            for p in [rgb, depth] {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "listed in manifest"),
                    ));
                }
            }
        }
        Ok(m)
    }

    pub fn resolved(&self) -> impl Iterator<Item = (PathBuf, PathBuf)> + '_ {
        self.entries.iter().map(|(a, b)| (self.root.join(a), self.root.join(b)))
    }

    pub fn load_samples(&self) -> Result<Vec<DepthSample>> {
        self.resolved()
            .map(|(rgb, depth)| pnm::load_sample(&rgb, &depth))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(a, b)| format!("{}\t{}\n", a.display(), b.display()))
            .collect()
    }

    /// Writes `samples` as `{stem}{i:05}.ppm/.pgm` under `dir` plus a
    /// `manifest.tsv` listing them; returns the manifest path.
    pub fn export(samples: &[DepthSample], dir: &Path, stem: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let rgb = PathBuf::from(format!("{stem}{i:05}.ppm"));
            let depth = PathBuf::from(format!("{stem}{i:05}.pgm"));
            pnm::save_sample(s, &dir.join(&rgb), &dir.join(&depth))?;
            entries.push((rgb, depth));
        }
        let m = Manifest {
            root: dir.to_path_buf(),
            entries,
        };
        let path = dir.join("manifest.tsv");
        pnm::write(&path, m.to_text().as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_comments_and_errors() {
        let m = Manifest::parse("# header\nb.ppm\tb.pgm\n\na.ppm\ta.pgm\n", Path::new("/d")).unwrap();
        assert_eq!(m.entries[0].0, PathBuf::from("b.ppm"));
        assert_eq!(m.entries[1].1, PathBuf::from("a.pgm"));
        assert_eq!(m.resolved().next().unwrap().0, PathBuf::from("/d/b.ppm"));
        match Manifest::parse("a\tb\nno-tab-here\n", Path::new(".")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(Manifest::parse("# only comments\n", Path::new(".")).is_err());
    }

    #[test]
    fn missing_files_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "x.ppm\tx.pgm\n").unwrap();
        assert!(matches!(Manifest::load(&p), Err(Error::Io { .. })));
    }

    #[test]
    fn export_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let s = DepthSample::new(1, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0], vec![1.5, 0.0]).unwrap();
        let path = Manifest::export(&[s.clone(), s.clone()], dir.path(), "s").unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.load_samples().unwrap()[1], s);
    }
}
