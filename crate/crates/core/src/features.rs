//! Feature interchange format and in-memory feature sets.
//!
//! A feature set is stored as a file pair:
//!
//! * `<name>.cft1`: binary payload. Magic `b"CFT1"`, then three little-endian
//!   `u32` words (version = 1, `N`, `d`), then `N * d` little-endian IEEE-754
//!   `f32` values in row-major order.
//! * `<name>.json`: manifest with dimensions, role, labels, domain ids,
//!   class and domain names, the normalization flag and the `K x d` text
//!   feature matrix.
//!
//! Values are held as `f64` in memory; writing rounds them to `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CroftError, Result};

pub const CFT1_MAGIC: &[u8; 4] = b"CFT1";
pub const CFT1_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Label stored for every open-set row.
pub const OPEN_SET_LABEL: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    ClosedId,
    ClosedOod,
    OpenOod,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::ClosedId => "closed_id",
            Role::ClosedOod => "closed_ood",
            Role::OpenOod => "open_ood",
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Frozen image and text features for one population.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// `N x d`, one pre-trained image feature per row.
    pub image_features: Array2<f64>,
    /// `K x d`, one pre-trained text feature per closed-set class.
    pub text_features: Array2<f64>,
    pub labels: Vec<i32>,
    pub domain_ids: Vec<u32>,
    pub role: Role,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub normalized: bool,
    /// Free-form manifest entries (model id, prompt template, ...) preserved on round-trip.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d: usize,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub role: Role,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    pub normalization: bool,
    pub labels: Vec<i32>,
    pub domain_ids: Vec<u32>,
    pub text_features: Vec<Vec<f32>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl FeatureSet {
    /// Builds a feature set and checks every invariant.
    pub fn new(
        image_features: Array2<f64>,
        text_features: Array2<f64>,
        labels: Vec<i32>,
        domain_ids: Vec<u32>,
        role: Role,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let fs = FeatureSet {
            image_features,
            text_features,
            labels,
            domain_ids,
            role,
            class_names,
            domain_names: Vec::new(),
            normalized: false,
            metadata: BTreeMap::new(),
        };
        fs.validate()?;
        Ok(fs)
    }

    pub fn with_domain_names(mut self, names: Vec<String>) -> Self {
        self.domain_names = names;
        self
    }

    pub fn n(&self) -> usize {
        self.image_features.nrows()
    }

    pub fn d(&self) -> usize {
        self.image_features.ncols()
    }

    pub fn k(&self) -> usize {
        self.text_features.nrows()
    }

    /// Labels as class indices. Fails for open-set data.
    pub fn class_labels(&self) -> Result<Vec<usize>> {
        if self.role == Role::OpenOod {
            return Err(CroftError::Validation(
                "open_ood feature sets carry no closed-set labels".into(),
            ));
        }
        self.labels
            .iter()
            .map(|&l| {
                if l < 0 || l as usize >= self.k() {
                    Err(CroftError::LabelOutOfRange {
                        label: l as i64,
                        classes: self.k(),
                    })
                } else {
                    Ok(l as usize)
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.image_features.dim();
        let (k, td) = self.text_features.dim();
        if d == 0 {
            return Err(CroftError::Validation("feature dimension d must be > 0".into()));
        }
        if td != d {
            return Err(CroftError::Dimension(format!(
                "image features have {d} columns but text features have {td}"
            )));
        }
        if self.labels.len() != n {
            return Err(CroftError::Dimension(format!(
                "{} labels for {n} image rows",
                self.labels.len()
            )));
        }
        if self.domain_ids.len() != n {
            return Err(CroftError::Dimension(format!(
                "{} domain ids for {n} image rows",
                self.domain_ids.len()
            )));
        }
        if self.class_names.len() != k {
            return Err(CroftError::Dimension(format!(
                "{} class names for {k} text rows",
                self.class_names.len()
            )));
        }
        for &l in &self.labels {
            match self.role {
                Role::OpenOod if l != OPEN_SET_LABEL => {
                    return Err(CroftError::Validation(format!(
                        "open_ood rows must carry label {OPEN_SET_LABEL}, found {l}"
                    )))
                }
                Role::ClosedId | Role::ClosedOod if l < 0 || l as usize >= k => {
                    return Err(CroftError::LabelOutOfRange {
                        label: l as i64,
                        classes: k,
                    })
                }
                _ => {}
            }
        }
        if self
            .image_features
            .iter()
            .chain(self.text_features.iter())
            .any(|v| !v.is_finite())
        {
            return Err(CroftError::Data("non-finite feature value".into()));
        }
        Ok(())
    }

    /// Stacks feature sets that share text features into one set with the given role.
    pub fn concat(sets: &[&FeatureSet], role: Role) -> Result<FeatureSet> {
        let first = sets
            .first()
            .ok_or_else(|| CroftError::Validation("nothing to concatenate".into()))?;
        for s in sets {
            if s.text_features != first.text_features {
                return Err(CroftError::Validation("feature sets disagree on text features".into()));
            }
        }
        let views: Vec<_> = sets.iter().map(|s| s.image_features.view()).collect();
        let image = ndarray::concatenate(Axis(0), &views).map_err(|e| CroftError::Dimension(e.to_string()))?;
        let mut labels = Vec::new();
        let mut domains = Vec::new();
        for s in sets {
            labels.extend_from_slice(&s.labels);
            domains.extend_from_slice(&s.domain_ids);
        }
        let mut out = FeatureSet::new(
            image,
            first.text_features.clone(),
            labels,
            domains,
            role,
            first.class_names.clone(),
        )?;
        out.domain_names = first.domain_names.clone();
        out.normalized = sets.iter().all(|s| s.normalized);
        Ok(out)
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            version: CFT1_VERSION,
            d: self.d(),
            n: self.n(),
            k: self.k(),
            role: self.role,
            class_names: self.class_names.clone(),
            domain_names: self.domain_names.clone(),
            normalization: self.normalized,
            labels: self.labels.clone(),
            domain_ids: self.domain_ids.clone(),
            text_features: self
                .text_features
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v as f32).collect())
                .collect(),
            extra: self.metadata.clone(),
        }
    }
}

/// Resolves `<name>`, `<name>.cft1` or `<name>.json` to the binary and manifest paths.
pub fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("cft1") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut bin = base.clone().into_os_string();
    bin.push(".cft1");
    let mut json = base.into_os_string();
    json.push(".json");
    (PathBuf::from(bin), PathBuf::from(json))
}

/// Encodes a row-major `f32` matrix block with the CFT1 header.
pub fn encode_cft1(rows: usize, cols: usize, values: impl Iterator<Item = f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + rows * cols * 4);
    buf.extend_from_slice(CFT1_MAGIC);
    buf.extend_from_slice(&CFT1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a CFT1 block into `(N, d, values)`.
pub fn decode_cft1(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(CroftError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CFT1_MAGIC {
        return Err(CroftError::Format(format!(
            "bad magic {:?}, expected \"CFT1\"",
            &bytes[..4]
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let version = word(1);
    if version != CFT1_VERSION {
        return Err(CroftError::Format(format!("unsupported version {version}")));
    }
    let (n, d) = (word(2) as usize, word(3) as usize);
    let expected = HEADER_LEN + n * d * 4;
    if bytes.len() != expected {
        return Err(CroftError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((n, d, values))
}

pub fn write_feature_set(fs: &FeatureSet, path: &Path) -> Result<()> {
    fs.validate()?;
    let (bin, json) = file_pair(path);
    let payload = encode_cft1(fs.n(), fs.d(), fs.image_features.iter().map(|&v| v as f32));
    fs::write(&bin, payload).map_err(|e| CroftError::io(&bin, e))?;
    let manifest = serde_json::to_string_pretty(&fs.manifest())?;
    fs::write(&json, manifest).map_err(|e| CroftError::io(&json, e))?;
    Ok(())
}

pub fn read_feature_set(path: &Path) -> Result<FeatureSet> {
    let (bin, json) = file_pair(path);
    let bytes = fs::read(&bin).map_err(|e| CroftError::io(&bin, e))?;
    let text = fs::read_to_string(&json).map_err(|e| CroftError::io(&json, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CFT1_VERSION {
        return Err(CroftError::Format(format!(
            "manifest version {} unsupported",
            manifest.version
        )));
    }
    let (n, d, values) = decode_cft1(&bytes)?;
    if n != manifest.n || d != manifest.d {
        return Err(CroftError::Dimension(format!(
            "payload is {n}x{d} but manifest declares {}x{}",
            manifest.n, manifest.d
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CroftError::Data(format!("non-finite value in {}", bin.display())));
    }
    if manifest.text_features.len() != manifest.k || manifest.text_features.iter().any(|r| r.len() != d) {
        return Err(CroftError::Dimension(format!(
            "manifest text features are not {}x{d}",
            manifest.k
        )));
    }
    let image = Array2::from_shape_vec((n, d), values.into_iter().map(f64::from).collect())
        .map_err(|e| CroftError::Dimension(e.to_string()))?;
    let text = Array2::from_shape_vec(
        (manifest.k, d),
        manifest.text_features.iter().flatten().map(|&v| f64::from(v)).collect(),
    )
    .map_err(|e| CroftError::Dimension(e.to_string()))?;
    let fs = FeatureSet {
        image_features: image,
        text_features: text,
        labels: manifest.labels,
        domain_ids: manifest.domain_ids,
        role: manifest.role,
        class_names: manifest.class_names,
        domain_names: manifest.domain_names,
        normalized: manifest.normalization,
        metadata: manifest.extra,
    };
    fs.validate()?;
    Ok(fs)
}

fn normalize_matrix(m: &mut Array2<f64>, what: &str) -> Result<()> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(CroftError::Degenerate(format!("{what} row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Scales every image and text row to unit L2 norm and sets the normalization flag.
pub fn l2_normalize_rows(fs: &FeatureSet) -> Result<FeatureSet> {
    let mut out = fs.clone();
    normalize_matrix(&mut out.image_features, "image")?;
    normalize_matrix(&mut out.text_features, "text")?;
    out.normalized = true;
    Ok(out)
}
