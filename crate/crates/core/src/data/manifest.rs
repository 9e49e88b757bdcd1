use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use indexmap::IndexMap;

use super::image::Image;
use super::synth::DistortionSpec;
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Where a sample's pixels live.
#[derive(Clone, Debug)]
pub enum ImageRef {
    Path(PathBuf),
    Memory { name: String, image: Arc<Image> },
}

impl ImageRef {
    pub fn memory(name: impl Into<String>, image: Arc<Image>) -> Self {
        ImageRef::Memory {
            name: name.into(),
            image,
        }
    }

    /// Identity used for duplicate detection and reporting.
    pub fn key(&self) -> String {
        match self {
            ImageRef::Path(p) => p.display().to_string(),
            ImageRef::Memory { name, .. } => name.clone(),
        }
    }

    pub fn load(&self) -> Result<Arc<Image>> {
        match self {
            ImageRef::Path(p) => Ok(Arc::new(Image::read_pnm(p)?)),
            ImageRef::Memory { image, .. } => Ok(image.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageRef,
    /// Higher is better.
    pub score: f64,
    /// Shared source content; splits never separate a group.
    pub group: String,
    pub distortion: Option<DistortionSpec>,
}

/// Ordered samples with unique image references.
#[derive(Clone, Debug)]
pub struct Manifest {
    samples: Vec<Sample>,
    provenance: String,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            if !s.score.is_finite() {
                return Err(Error::Data(format!("non-finite score for `{}`", s.image.key())));
            }
            if s.group.is_empty() {
                return Err(Error::Data(format!("empty group for `{}`", s.image.key())));
            }
            if !seen.insert(s.image.key()) {
                return Err(Error::Data(format!("duplicate image `{}`", s.image.key())));
            }
        }
        Ok(Manifest {
            samples,
            provenance: provenance.into(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn scores(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.score).collect()
    }

    /// Distinct groups in order of first appearance, with their sample indices.
    pub fn groups(&self) -> IndexMap<&str, Vec<usize>> {
        let mut out: IndexMap<&str, Vec<usize>> = IndexMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            out.entry(s.group.as_str()).or_default().push(i);
        }
        out
    }

    fn subset(&self, mut idx: Vec<usize>, note: &str) -> Manifest {
        idx.sort_unstable();
        Manifest {
            samples: idx.into_iter().map(|i| self.samples[i].clone()).collect(),
            provenance: format!("{} | {note}", self.provenance),
        }
    }

    /// Scores min-max rescaled to `[0, 1]`.
    pub fn normalized(&self) -> Result<Manifest> {
        let (lo, hi) = self
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.score), hi.max(s.score)));
        if !(hi > lo) {
            return Err(Error::Degenerate("cannot normalize constant scores".into()));
        }
        let mut out = self.clone();
        for s in &mut out.samples {
            s.score = (s.score - lo) / (hi - lo);
        }
        Ok(out)
    }

    /// Reads a `path,score,group` CSV; relative paths resolve against the
    /// manifest's directory and an empty group falls back to the path.
    pub fn read_csv(path: &Path) -> Result<Manifest> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?;
        if header.iter().collect::<Vec<_>>() != ["path", "score", "group"] {
            return Err(parse_err(1, "header must be `path,score,group`".into()));
        }
        let mut samples = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            let score: f64 = rec[1]
                .parse()
                .map_err(|_| parse_err(line, format!("bad score `{}`", &rec[1])))?;
            if !score.is_finite() {
                return Err(parse_err(line, format!("non-finite score `{}`", &rec[1])));
            }
            let file = base.join(&rec[0]);
            let group = if rec[2].is_empty() { rec[0].to_string() } else { rec[2].to_string() };
            samples.push(Sample {
                image: ImageRef::Path(file),
                score,
                group,
                distortion: None,
            });
        }
        if samples.is_empty() {
            return Err(parse_err(1, "manifest has no samples".into()));
        }
        Manifest::new(samples, format!("csv {}", path.display()))
    }

    /// Writes every image as PPM under `dir/images/` plus `dir/manifest.csv`,
    /// returning the on-disk manifest.
    pub fn materialize(&self, dir: &Path) -> Result<Manifest> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut rows = Vec::with_capacity(self.len());
        let mut samples = Vec::with_capacity(self.len());
        for s in &self.samples {
            let name = match &s.image {
                ImageRef::Memory { name, .. } => name.clone(),
                ImageRef::Path(p) => p
                    .file_stem()
                    .map(|f| f.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "image".into()),
            };
            let rel = format!("images/{name}.ppm");
            let file = dir.join(&rel);
            s.image.load()?.write_ppm(&file)?;
            rows.push((rel, s.score, s.group.clone()));
            samples.push(Sample {
                image: ImageRef::Path(file),
                ..s.clone()
            });
        }
        write_rows(&dir.join("manifest.csv"), &rows)?;
        Manifest::new(samples, self.provenance.clone())
    }

    /// Writes a CSV with each path relative to `path`'s directory when possible.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let rows: Vec<_> = self
            .samples
            .iter()
            .map(|s| {
                let p = match &s.image {
                    ImageRef::Path(p) => p
                        .strip_prefix(base)
                        .unwrap_or(p)
                        .display()
                        .to_string(),
                    ImageRef::Memory { name, .. } => name.clone(),
                };
                (p, s.score, s.group.clone())
            })
            .collect();
        write_rows(path, &rows)
    }
}

fn write_rows(path: &Path, rows: &[(String, f64, String)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Data(format!("csv encode: {e}"));
    w.write_record(["path", "score", "group"]).map_err(csv_err)?;
    for (p, score, group) in rows {
        w.write_record([p.as_str(), &format!("{score}"), group.as_str()])
            .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv encode: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn shuffled_groups(manifest: &Manifest, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut groups: Vec<Vec<usize>> = manifest.groups().into_values().collect();
    if groups.len() < 2 {
        return Err(Error::Data(format!(
            "split needs at least 2 groups, manifest has {}",
            groups.len()
        )));
    }
    Rng::new(seed).shuffle(&mut groups);
    Ok(groups)
}

fn group_count(frac: f64, groups: usize) -> usize {
    ((frac * groups as f64).round() as usize).clamp(1, groups - 1)
}

/// Group-aware random split; `round(train_frac * groups)` groups (at least
/// one on each side) go to train. Both halves keep manifest order.
pub fn split(manifest: &Manifest, train_frac: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let groups = shuffled_groups(manifest, seed)?;
    let n_train = group_count(train_frac, groups.len());
    let train = groups[..n_train].concat();
    let test = groups[n_train..].concat();
    Ok((
        manifest.subset(train, &format!("train {train_frac} seed {seed}")),
        manifest.subset(test, &format!("test {} seed {seed}", 1.0 - train_frac)),
    ))
}

/// Holds out a fixed `test_frac` of groups, then takes `train_frac` of all
/// groups for training from the remainder. The test side depends only on
/// `(test_frac, seed)`.
pub fn split_fixed_test(
    manifest: &Manifest,
    test_frac: f64,
    train_frac: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if !(test_frac > 0.0 && train_frac > 0.0 && test_frac + train_frac <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "fractions train {train_frac} + test {test_frac} must be positive and sum to at most 1"
        )));
    }
    let groups = shuffled_groups(manifest, seed)?;
    let n_test = group_count(test_frac, groups.len());
    let n_train = ((train_frac * groups.len() as f64).round() as usize).clamp(1, groups.len() - n_test);
    let test = groups[..n_test].concat();
    let train = groups[n_test..n_test + n_train].concat();
    Ok((
        manifest.subset(train, &format!("train {train_frac} seed {seed}")),
        manifest.subset(test, &format!("fixed test {test_frac} seed {seed}")),
    ))
}
