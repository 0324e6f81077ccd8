//! Dataset bundle: materials, rendered views and their descriptor vectors.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pdsc;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaterialId {
    pub id: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ViewRecord {
    pub view_id: String,
    pub material_id: String,
    pub shape_tag: String,
    pub illumination_tag: String,
    pub descriptor_row: usize,
}

/// Row-major matrix of per-view descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DescriptorMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "descriptor matrix".into(),
                expected: rows * cols,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("descriptor row {}, column {}", i / cols.max(1), i % cols.max(1)),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub name: String,
    pub categories: Vec<String>,
    pub materials: Vec<MaterialId>,
    pub views: Vec<ViewRecord>,
    pub descriptors: DescriptorMatrix,
    pub assets_dir: Option<PathBuf>,
}

impl DatasetBundle {
    /// Builds a bundle and checks every structural invariant.
    pub fn new(
        name: impl Into<String>,
        categories: Vec<String>,
        materials: Vec<MaterialId>,
        views: Vec<ViewRecord>,
        descriptors: DescriptorMatrix,
        assets_dir: Option<PathBuf>,
    ) -> Result<Self> {
        let bundle = Self {
            name: name.into(),
            categories,
            materials,
            views,
            descriptors,
            assets_dir,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn validate(&self) -> Result<()> {
        let categories: HashSet<&str> = self.categories.iter().map(String::as_str).collect();
        let mut ids = HashSet::new();
        for (i, m) in self.materials.iter().enumerate() {
            if m.category.is_empty() {
                return Err(Error::invalid(format!("materials[{i}]"), "empty category"));
            }
            if !categories.contains(m.category.as_str()) {
                return Err(Error::invalid(
                    format!("materials[{i}]"),
                    format!("category {:?} is not declared", m.category),
                ));
            }
            if !ids.insert(m.id.as_str()) {
                return Err(Error::invalid(
                    format!("materials[{i}]"),
                    format!("duplicate material id {:?}", m.id),
                ));
            }
        }
        if self.descriptors.rows() != self.views.len() {
            return Err(Error::DimensionMismatch {
                what: "descriptor rows vs view count".into(),
                expected: self.views.len(),
                found: self.descriptors.rows(),
            });
        }
        let mut view_ids = HashSet::new();
        let mut conditions = HashSet::new();
        let mut rows = HashSet::new();
        let mut covered = HashSet::new();
        for (i, v) in self.views.iter().enumerate() {
            let loc = format!("views[{i}]");
            if !ids.contains(v.material_id.as_str()) {
                return Err(Error::invalid(loc, format!("unknown material {:?}", v.material_id)));
            }
            if !view_ids.insert(v.view_id.as_str()) {
                return Err(Error::invalid(loc, format!("duplicate view id {:?}", v.view_id)));
            }
            if !conditions.insert((&v.material_id, &v.shape_tag, &v.illumination_tag)) {
                return Err(Error::invalid(
                    loc,
                    "duplicate (material, shape, illumination) combination",
                ));
            }
            if v.descriptor_row >= self.descriptors.rows() || !rows.insert(v.descriptor_row) {
                return Err(Error::invalid(
                    loc,
                    format!("descriptor_row {} is out of range or reused", v.descriptor_row),
                ));
            }
            covered.insert(v.material_id.as_str());
        }
        if let Some(m) = self.materials.iter().find(|m| !covered.contains(m.id.as_str())) {
            return Err(Error::invalid("materials", format!("material {:?} has no views", m.id)));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn descriptor(&self, view: usize) -> &[f64] {
        self.descriptors.row(self.views[view].descriptor_row)
    }

    pub fn material_index(&self, id: &str) -> Option<usize> {
        self.materials.iter().position(|m| m.id == id)
    }

    /// Map from material id to its index in `materials`.
    pub fn material_lookup(&self) -> HashMap<&str, usize> {
        self.materials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.as_str(), i))
            .collect()
    }

    /// View indices of every material, in material order.
    pub fn views_by_material(&self) -> Vec<Vec<usize>> {
        let lookup = self.material_lookup();
        let mut out = vec![Vec::new(); self.materials.len()];
        for (vi, v) in self.views.iter().enumerate() {
            out[lookup[v.material_id.as_str()]].push(vi);
        }
        out
    }

    pub fn view_index(&self, view_id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.view_id == view_id)
    }

    pub fn shape_tags(&self) -> BTreeSet<&str> {
        self.views.iter().map(|v| v.shape_tag.as_str()).collect()
    }

    /// Sub-bundle restricted to the given views; materials without any kept
    /// view are dropped and descriptor rows are renumbered.
    pub fn select_views(&self, name: impl Into<String>, keep: &[usize]) -> Result<Self> {
        let kept_materials: HashSet<&str> = keep.iter().map(|&i| self.views[i].material_id.as_str()).collect();
        let materials = self
            .materials
            .iter()
            .filter(|m| kept_materials.contains(m.id.as_str()))
            .cloned()
            .collect();
        let mut values = Vec::with_capacity(keep.len() * self.descriptor_dim());
        let mut views = Vec::with_capacity(keep.len());
        for (row, &i) in keep.iter().enumerate() {
            values.extend_from_slice(self.descriptor(i));
            views.push(ViewRecord {
                descriptor_row: row,
                ..self.views[i].clone()
            });
        }
        let descriptors = DescriptorMatrix::new(keep.len(), self.descriptor_dim(), values)?;
        DatasetBundle::new(
            name,
            self.categories.clone(),
            materials,
            views,
            descriptors,
            self.assets_dir.clone(),
        )
    }
}

/// Partitions views by shape tag into a training and a held-out bundle.
pub fn split_views(bundle: &DatasetBundle, holdout_shapes: &[String]) -> Result<(DatasetBundle, DatasetBundle)> {
    let shapes = bundle.shape_tags();
    for s in holdout_shapes {
        if !shapes.contains(s.as_str()) {
            return Err(Error::invalid(
                "holdout",
                format!("shape {s:?} does not occur in the dataset"),
            ));
        }
    }
    let held_set: HashSet<&str> = holdout_shapes.iter().map(String::as_str).collect();
    let (held, train): (Vec<usize>, Vec<usize>) =
        (0..bundle.views.len()).partition(|&i| held_set.contains(bundle.views[i].shape_tag.as_str()));
    if train.is_empty() {
        return Err(Error::invalid(
            "holdout",
            "holding out these shapes would empty the training set",
        ));
    }
    Ok((
        bundle.select_views(format!("{}-train", bundle.name), &train)?,
        bundle.select_views(format!("{}-held", bundle.name), &held)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestView {
    view_id: String,
    material_id: String,
    shape: String,
    illumination: String,
    descriptor_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    name: String,
    descriptor_dim: usize,
    categories: Vec<String>,
    materials: Vec<MaterialId>,
    views: Vec<ManifestView>,
    /// Descriptor file path relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptors: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    assets_dir: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorFormat {
    Binary,
    Csv,
}

impl DescriptorFormat {
    fn file_name(self) -> &'static str {
        match self {
            DescriptorFormat::Binary => "descriptors.pdsc",
            DescriptorFormat::Csv => "descriptors.csv",
        }
    }

    fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DescriptorFormat::Csv,
            _ => DescriptorFormat::Binary,
        }
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        location: format!("{}:{}:{}", manifest_path.display(), e.line(), e.column()),
        message: e.to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let descriptor_path = match &manifest.descriptors {
        Some(rel) => base.join(rel),
        None => [DescriptorFormat::Binary, DescriptorFormat::Csv]
            .iter()
            .map(|f| base.join(f.file_name()))
            .find(|p| p.exists())
            .unwrap_or_else(|| base.join(DescriptorFormat::Binary.file_name())),
    };
    let view_ids: Vec<&str> = {
        let mut by_row = vec![""; manifest.views.len()];
        for v in &manifest.views {
            if let Some(slot) = by_row.get_mut(v.descriptor_row) {
                *slot = &v.view_id;
            }
        }
        by_row
    };
    let descriptors = match DescriptorFormat::from_path(&descriptor_path) {
        DescriptorFormat::Binary => read_descriptors_binary(&descriptor_path)?,
        DescriptorFormat::Csv => read_descriptors_csv(&descriptor_path, &view_ids)?,
    };
    if descriptors.cols() != manifest.descriptor_dim {
        return Err(Error::DimensionMismatch {
            what: format!("{} columns vs manifest descriptor_dim", descriptor_path.display()),
            expected: manifest.descriptor_dim,
            found: descriptors.cols(),
        });
    }
    let views = manifest
        .views
        .into_iter()
        .map(|v| ViewRecord {
            view_id: v.view_id,
            material_id: v.material_id,
            shape_tag: v.shape,
            illumination_tag: v.illumination,
            descriptor_row: v.descriptor_row,
        })
        .collect();
    DatasetBundle::new(
        manifest.name,
        manifest.categories,
        manifest.materials,
        views,
        descriptors,
        manifest.assets_dir.map(|d| base.join(d)),
    )
    .map_err(|e| match e {
        Error::Invalid { location, message } => Error::Invalid {
            location: format!("{}: {location}", manifest_path.display()),
            message,
        },
        other => other,
    })
}

/// Writes `manifest.json` plus a descriptor file into `dir`.
pub fn save_dataset(bundle: &DatasetBundle, dir: impl AsRef<Path>, format: DescriptorFormat) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let descriptor_file = format.file_name();
    let manifest = Manifest {
        name: bundle.name.clone(),
        descriptor_dim: bundle.descriptor_dim(),
        categories: bundle.categories.clone(),
        materials: bundle.materials.clone(),
        views: bundle
            .views
            .iter()
            .map(|v| ManifestView {
                view_id: v.view_id.clone(),
                material_id: v.material_id.clone(),
                shape: v.shape_tag.clone(),
                illumination: v.illumination_tag.clone(),
                descriptor_row: v.descriptor_row,
            })
            .collect(),
        descriptors: Some(descriptor_file.to_string()),
        assets_dir: bundle.assets_dir.as_ref().map(|p| p.display().to_string()),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    let path = dir.join(descriptor_file);
    match format {
        DescriptorFormat::Binary => write_descriptors_binary(&bundle.descriptors, &path)?,
        DescriptorFormat::Csv => {
            let mut ids = vec![String::new(); bundle.views.len()];
            for v in &bundle.views {
                ids[v.descriptor_row] = v.view_id.clone();
            }
            write_descriptors_csv(&bundle.descriptors, &ids, &path)?
        }
    }
    Ok(manifest_path)
}

pub fn read_descriptors_binary(path: &Path) -> Result<DescriptorMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let block = pdsc::read_block(&mut reader)
        .map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?
        .ok_or_else(|| Error::Parse {
            location: path.display().to_string(),
            message: "empty descriptor file".into(),
        })?;
    DescriptorMatrix::new(block.rows, block.cols, block.values).map_err(|e| locate(path, e))
}

pub fn write_descriptors_binary(m: &DescriptorMatrix, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    pdsc::write_block(&mut w, m.rows(), m.cols(), m.values())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Reads a `view_id,c0,...,cN` CSV. `expected_ids[i]` is the view that the
/// manifest assigns to descriptor row `i`.
pub fn read_descriptors_csv(path: &Path, expected_ids: &[&str]) -> Result<DescriptorMatrix> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            location: format!("{}:1", path.display()),
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("view_id") {
        return Err(Error::Parse {
            location: format!("{}:1", path.display()),
            message: "first column must be view_id".into(),
        });
    }
    let cols = headers.len() - 1;
    let mut values = Vec::new();
    let mut rows = 0;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            location: format!("{}:{line}", path.display()),
            message: e.to_string(),
        })?;
        if record.len() != cols + 1 {
            return Err(Error::DimensionMismatch {
                what: format!("{}:{line} column count", path.display()),
                expected: cols + 1,
                found: record.len(),
            });
        }
        if let Some(&expected) = expected_ids.get(rows) {
            if !expected.is_empty() && &record[0] != expected {
                return Err(Error::invalid(
                    format!("{}:{line}", path.display()),
                    format!(
                        "row holds view {:?} but the manifest maps it to {:?}",
                        &record[0], expected
                    ),
                ));
            }
        }
        for (c, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                location: format!("{}:{line}, column c{c}", path.display()),
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("{}:{line}, column c{c}", path.display()),
                });
            }
            values.push(v);
        }
        rows += 1;
    }
    DescriptorMatrix::new(rows, cols, values).map_err(|e| locate(path, e))
}

pub fn write_descriptors_csv(m: &DescriptorMatrix, view_ids: &[String], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["view_id".to_string()];
    header.extend((0..m.cols()).map(|c| format!("c{c}")));
    let to_io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(&header).map_err(to_io)?;
    for r in 0..m.rows() {
        let mut rec = vec![view_ids[r].clone()];
        rec.extend(m.row(r).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn locate(path: &Path, e: Error) -> Error {
    match e {
        Error::NonFinite { location } => Error::NonFinite {
            location: format!("{}: {location}", path.display()),
        },
        other => other,
    }
}
