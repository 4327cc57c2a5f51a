use std::fs;
use std::path::Path;

use super::{Image, LabeledImageDataset, Split};
use crate::error::{Error, Result};

/// Loads `root/<class name>/<image>` into a dataset.
///
/// Class directories are sorted by name to fix label order; files inside a
/// class are sorted by file name. Every image is resized to `resolution`
/// square pixels. Hidden entries are ignored.
pub fn load_image_folder(root: &Path, split: Split, resolution: u32) -> Result<LabeledImageDataset> {
    let mut classes = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && !name.starts_with('.') {
            classes.push(name);
        }
    }
    classes.sort();
    if classes.len() < 2 {
        return Err(Error::Data(format!(
            "{} holds {} class directories, need at least 2",
            root.display(),
            classes.len()
        )));
    }
    let mut ds = LabeledImageDataset::new(split, classes.clone());
    for (label, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && !p.file_name().is_some_and(|n| n.to_string_lossy().starts_with('.')))
            .collect();
        files.sort();
        for path in files {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let image = Image::decode(&bytes)
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
                .resized(resolution, resolution);
            ds.push(image, label);
        }
    }
    Ok(ds)
}
