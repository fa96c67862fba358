//! Directory-level helpers: loading a corpus, writing degraded views, replaying a manifest.

use std::path::{Path, PathBuf};

use crate::degrade::{
    apply_degradation, read_manifest, synthesize_view_set, write_manifest, DonorPool, ManifestRecord, SamplingPolicy,
};
use crate::error::{Error, Result};
use crate::fundus::{list_images, load_with_sidecar, mask_sidecar, save_mask_png, save_png, FundusImage, RangeTag};
use crate::seed;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// Corpus id of a file: its path relative to the corpus root, `/`-separated.
pub fn image_id(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Every image under `dir` in unit range, keyed by [`image_id`].
pub fn load_corpus(dir: &Path, manifest: Option<&Path>) -> Result<Vec<(String, FundusImage)>> {
    let files = list_images(dir, manifest)?;
    if files.is_empty() {
        return Err(Error::Config(format!("no PNG or JPEG images under {}", dir.display())));
    }
    files
        .iter()
        .map(|rel| Ok((image_id(rel), load_with_sidecar(&dir.join(rel), RangeTag::Unit)?)))
        .collect()
}

pub fn donor_pool(images: &[(String, FundusImage)]) -> DonorPool {
    let mut pool = DonorPool::new();
    for (id, img) in images {
        pool.insert(id.clone(), img);
    }
    pool
}

/// Output file for view `v` of the image with id `source`.
pub fn view_path(output_dir: &Path, source: &str, view: usize) -> PathBuf {
    let rel = Path::new(source);
    let stem = rel.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    output_dir.join(rel).with_file_name(format!("{stem}_v{view}.png"))
}

fn write_view(output_dir: &Path, record: &ManifestRecord, img: &FundusImage) -> Result<PathBuf> {
    let path = view_path(output_dir, &record.source, record.view);
    save_png(img, &path)?;
    save_mask_png(img.fov_mask.view(), &mask_sidecar(&path))?;
    Ok(path)
}

/// Write `views` degraded copies of every corpus image plus a JSON-lines manifest.
///
/// Image `i` (in sorted order) draws its views from `derive(seed, [i])`.
pub fn synthesize_corpus(
    images: &[(String, FundusImage)],
    output_dir: &Path,
    views: usize,
    seed: u64,
    policy: &SamplingPolicy,
) -> Result<Vec<ManifestRecord>> {
    policy.validate()?;
    let donors = donor_pool(images);
    let mut records = Vec::with_capacity(images.len() * views);
    for (i, (id, img)) in images.iter().enumerate() {
        let set = synthesize_view_set(img, views, seed::derive(seed, &[i as u64]), policy, &donors)?;
        set.check_invariants()?;
        for view in &set.views {
            let record = ManifestRecord::new(id.clone(), &view.spec);
            write_view(output_dir, &record, &view.image)?;
            records.push(record);
        }
    }
    write_manifest(&output_dir.join(MANIFEST_NAME), &records)?;
    Ok(records)
}

/// Re-render every manifest record from the original corpus into `output_dir`.
pub fn replay_manifest(images: &[(String, FundusImage)], manifest: &Path, output_dir: &Path) -> Result<Vec<PathBuf>> {
    let donors = donor_pool(images);
    read_manifest(manifest)?
        .iter()
        .map(|record| {
            let (_, img) = images
                .iter()
                .find(|(id, _)| *id == record.source)
                .ok_or_else(|| Error::Manifest(format!("source `{}` is not in the corpus", record.source)))?;
            let view = apply_degradation(img, &record.spec(), &donors)?;
            write_view(output_dir, record, &view)
        })
        .collect()
}
