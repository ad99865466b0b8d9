use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    generate_phantom, preprocess, read_annotations, read_volume, write_annotations, write_volume, NoduleAnnotation,
    PhantomConfig, Volume,
};
use crate::error::{Error, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Written next to generated phantoms; replaying `config` reproduces them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_seed: u64,
    pub config: PhantomConfig,
    pub volumes: Vec<String>,
}

/// Writes `n_volumes` phantoms, the annotations CSV and the manifest.
pub fn make_phantoms(config: &PhantomConfig, out_dir: &Path) -> Result<Manifest> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Vec<Result<(String, Vec<NoduleAnnotation>)>> = crate::par::map_range(config.n_volumes, |i| {
        let id = format!("phantom_{i:03}");
        let (vol, anns) = generate_phantom(config.volume_seed(i), config, &id)?;
        write_volume(&out_dir.join(format!("{id}.vol3")), &vol)?;
        Ok((id, anns))
    });
    let mut volumes = Vec::new();
    let mut annotations = Vec::new();
    for r in results {
        let (id, anns) = r?;
        volumes.push(format!("{id}.vol3"));
        annotations.extend(anns);
    }
    write_annotations(&out_dir.join(ANNOTATIONS_FILE), &annotations)?;
    let manifest = Manifest { generator_seed: config.seed, config: config.clone(), volumes };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Normalized volumes with their annotations, ordered by scan id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
    pub annotations: Vec<Vec<NoduleAnnotation>>,
}

impl Dataset {
    /// Loads every `*.vol3` in `dir` and `annotations.csv`. Volumes are
    /// preprocessed on load.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "vol3") && !p.to_string_lossy().ends_with(".mask.vol3"))
            .collect();
        paths.sort();
        let anns = read_annotations(&dir.join(ANNOTATIONS_FILE))?;
        let mut by_scan: BTreeMap<String, Vec<NoduleAnnotation>> = BTreeMap::new();
        for a in anns {
            by_scan.entry(a.scan_id.clone()).or_default().push(a);
        }
        let volumes: Vec<Volume> = crate::par::map_range(paths.len(), |i| read_volume(&paths[i]).map(|v| preprocess(&v)))
            .into_iter()
            .collect::<Result<_>>()?;
        let annotations: Vec<Vec<NoduleAnnotation>> = volumes
            .iter()
            .map(|v| {
                let a = by_scan.remove(&v.scan_id).unwrap_or_default();
                a.iter().try_for_each(|a| a.validate(v.dims()))?;
                Ok(a)
            })
            .collect::<Result<_>>()?;
        Dataset::new(volumes, annotations)
    }

    pub fn new(volumes: Vec<Volume>, annotations: Vec<Vec<NoduleAnnotation>>) -> Result<Self> {
        if volumes.len() != annotations.len() {
            return Err(Error::Invalid("one annotation list per volume".into()));
        }
        if volumes.is_empty() || annotations.iter().all(Vec::is_empty) {
            return Err(Error::Invalid("dataset needs at least one annotated volume".into()));
        }
        Ok(Dataset { volumes, annotations })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }
}
