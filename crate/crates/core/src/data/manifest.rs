use std::path::{Path, PathBuf};

use crate::data::{load_pair, Sample};
use crate::error::{Error, Result};

/// Parses `image<TAB>mask` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut pairs = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split('\t');
        match (it.next(), it.next(), it.next()) {
            (Some(i), Some(m), None) if !i.is_empty() && !m.is_empty() => pairs.push((base.join(i), base.join(m))),
            _ => {
                return Err(Error::format(path, format!("line {}: expected `image<TAB>mask`", no + 1)));
            }
        }
    }
    Ok(pairs)
}

pub fn write_manifest(path: impl AsRef<Path>, pairs: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let text: String = pairs.iter().map(|(i, m)| format!("{i}\t{m}\n")).collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every pair of a manifest.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let pairs = read_manifest(&path)?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!("manifest {} lists no samples", path.as_ref().display())));
    }
    pairs.iter().map(|(i, m)| load_pair(i, m)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "# header\na.png\tb.png\n\n/abs/c.png\td.png\n").unwrap();
        let pairs = read_manifest(&p).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].0, dir.path().join("a.png"));
        assert_eq!(pairs[1].0, PathBuf::from("/abs/c.png"));
        std::fs::write(&p, "a.png b.png\n").unwrap();
        assert!(read_manifest(&p).unwrap_err().to_string().contains("line 1"));
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::EmptyDataset(_))));
    }
}
