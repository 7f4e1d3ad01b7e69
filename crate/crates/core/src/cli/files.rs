//! On-disk formats: the model JSON file and the `subpop_id,value` sample CSV.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{FamilyModel, TrainMeta};
use crate::fpca::EigenSystem;
use crate::grid::{Domain, GridFn};
use crate::logmap::LogDensityFn;
use crate::presmooth::SubpopSample;
use crate::tailscale::ScaledModel;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub ids: Vec<String>,
    pub sizes: Vec<usize>,
    pub n_excluded: usize,
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch.
    pub created_unix: u64,
}

/// Everything needed to rebuild a trained family. Floats are written in
/// shortest round-trip decimal form and parsed exactly, so a save/load
/// cycle reproduces every value bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub domain: Domain,
    pub mu: Vec<f64>,
    pub eigvals: Vec<f64>,
    pub eigfns: Vec<Vec<f64>>,
    pub scores: Vec<Vec<f64>>,
    pub presmoothed: Vec<Vec<f64>>,
    pub bandwidth: f64,
    pub log_scale: bool,
    pub delta: Option<f64>,
    pub provenance: Provenance,
}

/// A trained family, optionally wrapped for log-scale data.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Plain(FamilyModel),
    LogScale(ScaledModel),
}

impl Model {
    pub fn family(&self) -> &FamilyModel {
        match self {
            Model::Plain(m) => m,
            Model::LogScale(s) => s.inner(),
        }
    }

    pub fn is_log_scale(&self) -> bool {
        matches!(self, Model::LogScale(_))
    }
}

impl ModelFile {
    pub fn from_model(model: &Model, n_excluded: usize, seed: Option<u64>) -> Self {
        let fam = model.family();
        let sys = fam.sys();
        let meta = fam.meta();
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            format_version: FORMAT_VERSION,
            domain: *fam.domain(),
            mu: sys.mu().values().to_vec(),
            eigvals: sys.eigvals().to_vec(),
            eigfns: sys.eigfns().iter().map(|f| f.values().to_vec()).collect(),
            scores: sys.scores().to_vec(),
            presmoothed: fam.presmoothed().iter().map(|f| f.values().to_vec()).collect(),
            bandwidth: meta.bandwidth,
            log_scale: model.is_log_scale(),
            delta: match model {
                Model::LogScale(s) => Some(s.delta()),
                Model::Plain(_) => None,
            },
            provenance: Provenance { ids: meta.ids.clone(), sizes: meta.sizes.clone(), n_excluded, seed, created_unix },
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported model format version {}", self.format_version)));
        }
        let d = Domain::new(self.domain.lo(), self.domain.hi(), self.domain.n_grid())?;
        let mu = LogDensityFn::from_centred(GridFn::new(d, self.mu.clone())?)?;
        let eigfns = self.eigfns.iter().map(|v| GridFn::new(d, v.clone())).collect::<Result<Vec<_>>>()?;
        let sys = EigenSystem::from_parts(mu, self.eigvals.clone(), eigfns, self.scores.clone())?;
        let pres = self.presmoothed.iter().map(|v| GridFn::new(d, v.clone())).collect::<Result<Vec<_>>>()?;
        let meta = TrainMeta {
            ids: self.provenance.ids.clone(),
            sizes: self.provenance.sizes.clone(),
            bandwidth: self.bandwidth,
        };
        let fam = FamilyModel::from_parts(sys, pres, meta)?;
        if self.log_scale {
            let delta = self.delta.ok_or_else(|| Error::Parse("log-scale model without delta".into()))?;
            Ok(Model::LogScale(ScaledModel::new(fam, delta)?))
        } else {
            Ok(Model::Plain(fam))
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Rows of one subpopulation as read from a sample CSV. Rows with an empty
/// value contribute no observation.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSubpop {
    pub id: String,
    pub obs: Vec<f64>,
}

impl RawSubpop {
    pub fn to_sample(&self) -> Result<SubpopSample> {
        SubpopSample::new(self.id.clone(), self.obs.clone())
    }
}

/// Reads a `subpop_id,value` CSV, grouping rows by id in id order.
pub fn read_samples(path: &Path) -> Result<Vec<RawSubpop>> {
    let file = File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_samples(file, &path.display().to_string())
}

pub(crate) fn parse_samples(reader: impl std::io::Read, name: &str) -> Result<Vec<RawSubpop>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse(format!("{name}: {e}")))?;
    if headers.len() != 2 || &headers[0] != "subpop_id" || &headers[1] != "value" {
        return Err(Error::Parse(format!("{name}: header must be exactly `subpop_id,value`")));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{name}: {e}")))?;
        let id = rec.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(Error::Parse(format!("{name}: empty subpop_id on data row {}", line + 1)));
        }
        let entry = groups.entry(id).or_default();
        let raw = rec.get(1).unwrap_or("");
        if raw.is_empty() {
            continue;
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::Parse(format!("{name}: bad value {raw:?} on data row {}", line + 1)))?;
        if !v.is_finite() {
            return Err(Error::Parse(format!("{name}: non-finite value on data row {}", line + 1)));
        }
        entry.push(v);
    }
    Ok(groups.into_iter().map(|(id, obs)| RawSubpop { id, obs }).collect())
}

pub fn write_samples(path: &Path, samples: &[SubpopSample]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e: std::io::Error| Error::Io(format!("{}: {e}", path.display()));
    writeln!(w, "subpop_id,value").map_err(io)?;
    for s in samples {
        for v in s.obs() {
            writeln!(w, "{},{v}", s.id()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Writes rows to a CSV file with the given header.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(create(path)?);
    let err = |e: csv::Error| Error::Io(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(row.iter().map(|s| s.as_ref())).map_err(err)?;
    }
    w.flush().map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes a density on the grid as `x,density`.
pub fn write_density(path: &Path, xs: &[f64], values: &[f64], x_name: &str) -> Result<()> {
    write_csv(path, &[x_name, "density"], xs.iter().zip(values).map(|(x, v)| vec![x.to_string(), v.to_string()]))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// File-name-safe version of a subpopulation id.
pub fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect()
}
