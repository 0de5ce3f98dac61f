//! Directory-per-class PGM datasets.
//!
//! `root/<class>/<file>.pgm`; classes and files are taken in byte-wise sorted
//! order. An optional `ambiguity.csv` sidecar (`filename,is_ambiguous`) lists
//! files relative to the root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pgm;
use crate::tensor::Tensor;
use crate::trainer::LabeledDataset;

pub const FLAGS_FILE: &str = "ambiguity.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct DiskDataset {
    pub data: LabeledDataset,
    /// Paths relative to the dataset root, `class/file.pgm`.
    pub files: Vec<String>,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn file_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::InvalidArgument(format!("non UTF-8 path {}", path.display())))
}

pub fn read_dataset(root: impl AsRef<Path>) -> Result<DiskDataset> {
    let root = root.as_ref();
    let mut class_names = Vec::new();
    let mut images: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    let mut files = Vec::new();
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let class = class_names.len();
        let class_name = file_name(&dir)?;
        for path in sorted_entries(&dir)? {
            if !path.is_file() || path.extension().and_then(|e| e.to_str()) != Some("pgm") {
                continue;
            }
            let image = pgm::read(&path)?;
            if let Some(first) = images.first() {
                if first.shape() != image.shape() {
                    return Err(Error::Shape(format!(
                        "{} is {:?}, earlier images are {:?}",
                        path.display(),
                        image.shape(),
                        first.shape()
                    )));
                }
            }
            files.push(format!("{class_name}/{}", file_name(&path)?));
            images.push(image);
            labels.push(class);
        }
        class_names.push(class_name);
    }
    if class_names.is_empty() {
        return Err(Error::InvalidArgument(format!("{} has no class directories", root.display())));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument(format!("{} contains no PGM images", root.display())));
    }
    Ok(DiskDataset {
        data: LabeledDataset::new(images, labels, class_names)?,
        files,
    })
}

/// File name for the `index`-th image of a class.
pub fn image_file_name(index: usize) -> String {
    format!("{index:05}.pgm")
}

/// Writes every image under `root/<class>/NNNNN.pgm` and returns the relative
/// paths. Empty classes still get a directory. With `ambiguous` set, the
/// sidecar is written too.
pub fn write_dataset(root: impl AsRef<Path>, data: &LabeledDataset, ambiguous: Option<&[bool]>) -> Result<Vec<String>> {
    let root = root.as_ref();
    if let Some(flags) = ambiguous {
        if flags.len() != data.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ambiguity flags for {} images",
                flags.len(),
                data.len()
            )));
        }
    }
    for name in &data.class_names {
        fs::create_dir_all(root.join(name))?;
    }
    let mut next = vec![0usize; data.class_names.len()];
    let mut files = Vec::with_capacity(data.len());
    for (image, &label) in data.images.iter().zip(&data.labels) {
        let rel = format!("{}/{}", data.class_names[label], image_file_name(next[label]));
        next[label] += 1;
        fs::write(root.join(&rel), pgm::encode(image)?)?;
        files.push(rel);
    }
    if let Some(flags) = ambiguous {
        let mut w = fs::File::create(root.join(FLAGS_FILE))?;
        write_flags(&files, flags, &mut w)?;
        w.sync_all()?;
    }
    Ok(files)
}

pub fn write_flags(files: &[String], flags: &[bool], mut w: impl Write) -> Result<()> {
    writeln!(w, "filename,is_ambiguous")?;
    for (f, &a) in files.iter().zip(flags) {
        writeln!(w, "{f},{}", u8::from(a))?;
    }
    Ok(())
}

pub fn read_flags(r: impl BufRead) -> Result<Vec<(String, bool)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "filename,is_ambiguous" {
                return Err(Error::Parse(format!("unexpected flags header `{line}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (name, flag) = line
            .rsplit_once(',')
            .ok_or_else(|| Error::Parse(format!("flags line {}: expected filename,flag", i + 1)))?;
        let flag = match flag.trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => return Err(Error::Parse(format!("flags line {}: bad flag `{other}`", i + 1))),
        };
        out.push((name.to_string(), flag));
    }
    Ok(out)
}

pub fn read_flags_file(path: impl AsRef<Path>) -> Result<Vec<(String, bool)>> {
    read_flags(BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> LabeledDataset {
        let img = |v: f32| Tensor::filled(&[1, 3, 4], v);
        LabeledDataset::new(
            vec![img(0.0), img(1.0), img(128.0 / 255.0)],
            vec![1, 0, 1],
            vec!["b".into(), "a".into(), "c".into()],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_sorts_classes() {
        let dir = tempfile::tempdir().unwrap();
        let files = write_dataset(dir.path(), &tiny(), Some(&[true, false, false])).unwrap();
        assert_eq!(files, vec!["a/00000.pgm", "b/00000.pgm", "a/00001.pgm"]);
        let back = read_dataset(dir.path()).unwrap();
        // "a" sorts before "b"; empty "c" stays a class.
        assert_eq!(back.data.class_names, vec!["a", "b", "c"]);
        assert_eq!(back.files, vec!["a/00000.pgm", "a/00001.pgm", "b/00000.pgm"]);
        assert_eq!(back.data.labels, vec![0, 0, 1]);
        assert!(back.data.images[1].bit_eq(&Tensor::filled(&[1, 3, 4], 128.0 / 255.0)));
        let flags = read_flags_file(dir.path().join(FLAGS_FILE)).unwrap();
        assert_eq!(flags[0], ("a/00000.pgm".to_string(), true));
        assert_eq!(flags.len(), 3);
    }

    #[test]
    fn mixed_shapes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("x")).unwrap();
        fs::write(dir.path().join("x/a.pgm"), pgm::encode(&Tensor::zeros(&[1, 2, 2])).unwrap()).unwrap();
        fs::write(dir.path().join("x/b.pgm"), pgm::encode(&Tensor::zeros(&[1, 3, 2])).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_root_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(read_dataset(dir.path()).is_err());
        fs::create_dir(dir.path().join("x")).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn flags_parse_errors() {
        assert!(read_flags(&b"name,flag\n"[..]).is_err());
        assert!(read_flags(&b"filename,is_ambiguous\na.pgm,2\n"[..]).is_err());
        assert_eq!(
            read_flags(&b"filename,is_ambiguous\na,b.pgm,1\n"[..]).unwrap(),
            vec![("a,b.pgm".to_string(), true)]
        );
    }
}
