//! Study data: one record per participant, loaded from a delimited file whose
//! columns are described by a JSON schema.
//!
//! Outcomes of non-survivors are truncated, not missing, and are stored as
//! `None`. A file that carries an outcome for a non-survivor is rejected.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

/// What a covariate column is used for. A column may carry several roles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Distance,
    PrincipalScore,
    OutcomeModel,
    Balance,
    /// Post-treatment covariate (X1). Everything else is pre-treatment (X0).
    PostTreatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    #[serde(default)]
    pub roles: Vec<Role>,
}

impl ColumnMeta {
    pub fn has_role(&self, role: Role) -> bool {
        self.roles.contains(&role)
    }
}

/// Column-role configuration for a data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    #[serde(default)]
    pub id: Option<String>,
    pub treatment: String,
    pub survival: String,
    pub outcome: String,
    pub columns: Vec<ColumnMeta>,
}

impl Schema {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub id: u64,
    /// Pre-treatment covariates, ordered as `Dataset::x0_columns`.
    pub x0: Vec<f64>,
    /// Post-treatment covariates, ordered as `Dataset::x1_columns`.
    pub x1: Vec<f64>,
    pub treated: bool,
    pub survived: bool,
    /// Present if and only if `survived`.
    pub y: Option<f64>,
}

impl UnitRecord {
    pub fn a(&self) -> u8 {
        self.treated as u8
    }

    pub fn s(&self) -> u8 {
        self.survived as u8
    }

    /// Covariate `j` in the concatenated (X0, X1) index space.
    pub fn feature(&self, j: usize) -> f64 {
        if j < self.x0.len() {
            self.x0[j]
        } else {
            self.x1[j - self.x0.len()]
        }
    }

    /// Outcome of a survivor. Panics on a truncated unit, which is always a
    /// caller bug: only survivors enter outcome computations.
    pub fn outcome(&self) -> f64 {
        self.y.expect("outcome requested for a truncated unit")
    }
}

/// An immutable study sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    units: Vec<UnitRecord>,
    schema: Schema,
    x0_columns: Vec<ColumnMeta>,
    x1_columns: Vec<ColumnMeta>,
}

impl Dataset {
    pub fn new(units: Vec<UnitRecord>, schema: Schema) -> Result<Self> {
        let (x0_columns, x1_columns): (Vec<_>, Vec<_>) = schema
            .columns
            .iter()
            .cloned()
            .partition(|c| !c.has_role(Role::PostTreatment));
        for u in &units {
            if u.x0.len() != x0_columns.len() {
                return Err(Error::DimensionMismatch {
                    expected: x0_columns.len(),
                    found: u.x0.len(),
                });
            }
            if u.x1.len() != x1_columns.len() {
                return Err(Error::DimensionMismatch {
                    expected: x1_columns.len(),
                    found: u.x1.len(),
                });
            }
            if u.y.is_some() != u.survived {
                return Err(Error::InvalidValue {
                    row: u.id as usize,
                    column: schema.outcome.clone(),
                    message: "outcome must be present exactly for survivors".into(),
                });
            }
        }
        Ok(Dataset {
            units,
            schema,
            x0_columns,
            x1_columns,
        })
    }

    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    pub fn unit(&self, idx: usize) -> &UnitRecord {
        &self.units[idx]
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn x0_columns(&self) -> &[ColumnMeta] {
        &self.x0_columns
    }

    pub fn x1_columns(&self) -> &[ColumnMeta] {
        &self.x1_columns
    }

    pub fn n_features(&self) -> usize {
        self.x0_columns.len() + self.x1_columns.len()
    }

    /// Column metadata in the concatenated (X0, X1) index space.
    pub fn feature_meta(&self, j: usize) -> &ColumnMeta {
        if j < self.x0_columns.len() {
            &self.x0_columns[j]
        } else {
            &self.x1_columns[j - self.x0_columns.len()]
        }
    }

    /// Feature index of a named covariate.
    pub fn feature_index(&self, name: &str) -> Result<usize> {
        self.x0_columns
            .iter()
            .chain(self.x1_columns.iter())
            .position(|c| c.name == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Feature indices carrying `role`, in schema order. Post-treatment
    /// columns are included only for the `PostTreatment` role itself.
    pub fn role_features(&self, role: Role) -> Vec<usize> {
        let k0 = self.x0_columns.len();
        match role {
            Role::PostTreatment => (k0..k0 + self.x1_columns.len()).collect(),
            _ => self
                .x0_columns
                .iter()
                .enumerate()
                .filter(|(_, c)| c.has_role(role))
                .map(|(j, _)| j)
                .collect(),
        }
    }

    pub fn feature_names(&self, features: &[usize]) -> Vec<String> {
        features.iter().map(|&j| self.feature_meta(j).name.clone()).collect()
    }

    /// Indices of units with the given treatment arm and survival status.
    pub fn cell(&self, treated: bool, survived: bool) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.treated == treated && u.survived == survived)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn survivors(&self, treated: bool) -> Vec<usize> {
        self.cell(treated, true)
    }

    pub fn arm(&self, treated: bool) -> Vec<usize> {
        self.units
            .iter()
            .enumerate()
            .filter(|(_, u)| u.treated == treated)
            .map(|(i, _)| i)
            .collect()
    }

    /// Fails unless both survivor arms are non-empty.
    pub fn require_survivors_in_both_arms(&self) -> Result<()> {
        for treated in [false, true] {
            if self.survivors(treated).is_empty() {
                return Err(Error::EmptyGroup(format!("{{A={},S=1}}", treated as u8)));
            }
        }
        Ok(())
    }

    /// Copy with every observed outcome shifted by `c`.
    pub fn with_shifted_outcomes(&self, c: f64) -> Dataset {
        let mut d = self.clone();
        for u in &mut d.units {
            if let Some(y) = u.y.as_mut() {
                *y += c;
            }
        }
        d
    }

    /// Copy restricted to the given unit indices (order preserved, duplicates kept).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            units: idx.iter().map(|&i| self.units[i].clone()).collect(),
            schema: self.schema.clone(),
            x0_columns: self.x0_columns.clone(),
            x1_columns: self.x1_columns.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let id_col = self.schema.id.clone().unwrap_or_else(|| "id".to_string());
        let mut header = vec![id_col, self.schema.treatment.clone(), self.schema.survival.clone()];
        header.extend(self.x0_columns.iter().chain(&self.x1_columns).map(|c| c.name.clone()));
        header.push(self.schema.outcome.clone());
        wtr.write_record(&header)?;
        for u in &self.units {
            let mut rec = vec![u.id.to_string(), u.a().to_string(), u.s().to_string()];
            rec.extend(u.x0.iter().chain(&u.x1).map(|v| v.to_string()));
            rec.push(u.y.map(|v| v.to_string()).unwrap_or_default());
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }
}

fn parse_binary(raw: &str, row: usize, column: &str) -> Result<bool> {
    match raw.trim() {
        "0" | "0.0" => Ok(false),
        "1" | "1.0" => Ok(true),
        other => Err(Error::InvalidValue {
            row,
            column: column.to_string(),
            message: format!("expected 0 or 1, found `{other}`"),
        }),
    }
}

fn parse_real(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| Error::InvalidValue {
        row,
        column: column.to_string(),
        message: format!("not a number: `{raw}`"),
    })
}

fn is_missing(raw: &str) -> bool {
    matches!(raw.trim(), "" | "NA" | "na" | "NaN" | ".")
}

/// Parse a CSV stream against `schema`. Row numbers in errors are 1-based
/// data rows (the header is row 0).
pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let id_idx = schema.id.as_deref().map(find).transpose()?;
    let a_idx = find(&schema.treatment)?;
    let s_idx = find(&schema.survival)?;
    let y_idx = find(&schema.outcome)?;
    let x0_meta: Vec<&ColumnMeta> = schema.columns.iter().filter(|c| !c.has_role(Role::PostTreatment)).collect();
    let x1_meta: Vec<&ColumnMeta> = schema.columns.iter().filter(|c| c.has_role(Role::PostTreatment)).collect();
    let x0_idx = x0_meta.iter().map(|c| find(&c.name)).collect::<Result<Vec<_>>>()?;
    let x1_idx = x1_meta.iter().map(|c| find(&c.name)).collect::<Result<Vec<_>>>()?;

    let mut units = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = match id_idx {
            Some(i) => get(i).parse::<u64>().map_err(|_| Error::InvalidValue {
                row,
                column: schema.id.clone().unwrap_or_default(),
                message: format!("invalid id `{}`", get(i)),
            })?,
            None => row as u64,
        };
        let treated = parse_binary(get(a_idx), row, &schema.treatment)?;
        let survived = parse_binary(get(s_idx), row, &schema.survival)?;
        let raw_y = get(y_idx);
        let y = match (survived, is_missing(raw_y)) {
            (true, false) => Some(parse_real(raw_y, row, &schema.outcome)?),
            (false, true) => None,
            (true, true) => {
                return Err(Error::InvalidValue {
                    row,
                    column: schema.outcome.clone(),
                    message: "outcome missing for a survivor".into(),
                })
            }
            (false, false) => {
                return Err(Error::InvalidValue {
                    row,
                    column: schema.outcome.clone(),
                    message: "outcome present for a non-survivor (truncated outcomes must be empty)".into(),
                })
            }
        };
        let read_cov = |idx: &[usize], meta: &[&ColumnMeta]| -> Result<Vec<f64>> {
            idx.iter()
                .zip(meta)
                .map(|(&i, m)| match m.kind {
                    ColumnKind::Binary => parse_binary(get(i), row, &m.name).map(|b| b as u8 as f64),
                    ColumnKind::Continuous => parse_real(get(i), row, &m.name),
                })
                .collect()
        };
        units.push(UnitRecord {
            id,
            x0: read_cov(&x0_idx, &x0_meta)?,
            x1: read_cov(&x1_idx, &x1_meta)?,
            treated,
            survived,
            y,
        });
    }
    if units.is_empty() {
        return Err(Error::NoRows);
    }
    Dataset::new(units, schema.clone())
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_dataset(file, schema)
}

/// Treatment-by-survival counts, indexed `[a][s]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossTab {
    pub counts: [[usize; 2]; 2],
}

impl CrossTab {
    pub fn n(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn count(&self, a: u8, s: u8) -> usize {
        self.counts[a as usize][s as usize]
    }

    pub fn proportion(&self, a: u8, s: u8) -> f64 {
        self.count(a, s) as f64 / self.n() as f64
    }

    pub fn row_total(&self, a: u8) -> usize {
        self.counts[a as usize].iter().sum()
    }

    pub fn col_total(&self, s: u8) -> usize {
        self.counts[0][s as usize] + self.counts[1][s as usize]
    }

    pub fn row_proportion(&self, a: u8) -> f64 {
        self.row_total(a) as f64 / self.n() as f64
    }

    pub fn col_proportion(&self, s: u8) -> f64 {
        self.col_total(s) as f64 / self.n() as f64
    }
}

pub fn crosstab_survival(d: &Dataset) -> CrossTab {
    let mut counts = [[0usize; 2]; 2];
    for u in d.units() {
        counts[u.a() as usize][u.s() as usize] += 1;
    }
    CrossTab { counts }
}

/// `(p0, p1)` with `p_a = Pr(S=1 | A=a)`.
pub fn survival_rates(d: &Dataset) -> Result<(f64, f64)> {
    let ct = crosstab_survival(d);
    let mut p = [0.0; 2];
    for a in 0..2u8 {
        let n = ct.row_total(a);
        if n == 0 {
            return Err(Error::EmptyGroup(format!("treatment arm A={a}")));
        }
        p[a as usize] = ct.count(a, 1) as f64 / n as f64;
    }
    Ok((p[0], p[1]))
}

/// The bundled NSW demonstration sample (722 participants) and its roles.
pub mod nsw {
    use super::*;

    pub const CSV: &str = include_str!("../data/nsw.csv");
    pub const ROLES_JSON: &str = include_str!("../data/nsw_roles.json");

    pub fn schema() -> Schema {
        Schema::from_json_str(ROLES_JSON).expect("bundled NSW roles are valid")
    }

    pub fn dataset() -> Dataset {
        read_dataset(CSV.as_bytes(), &schema()).expect("bundled NSW file is valid")
    }
}
