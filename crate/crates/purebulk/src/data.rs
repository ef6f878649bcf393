//! Expression-matrix data model: ingestion, preprocessing, cohort splits.
//!
//! A matrix is dense `n_samples x n_genes` f64 with gene identifiers on the
//! columns and per-sample clinical metadata on the rows. Expression values
//! and metadata travel in a pair of TSV files (see [`ExpressionMatrix::load`]
//! for the exact layout).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gene identifier. Non-empty, no whitespace, unique within a matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GeneId(String);

impl GeneId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidInput("empty gene id".into()));
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidInput(format!(
                "gene id {id:?} contains whitespace"
            )));
        }
        Ok(GeneId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for GeneId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Tumor,
    AdjacentNormal,
}

impl SampleKind {
    /// Token used in the metadata TSV `kind` column.
    pub fn token(self) -> &'static str {
        match self {
            SampleKind::Tumor => "tumor",
            SampleKind::AdjacentNormal => "normal",
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        match token {
            "tumor" => Ok(SampleKind::Tumor),
            "normal" => Ok(SampleKind::AdjacentNormal),
            other => Err(Error::Parse(format!(
                "unknown sample kind {other:?} (expected \"tumor\" or \"normal\")"
            ))),
        }
    }
}

/// Per-sample clinical annotations.
///
/// `survival_time` (months) and `survival_event` are present together or not
/// at all. Grade 0 is reserved for adjacent-normal tissue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub kind: SampleKind,
    pub subtype: Option<String>,
    pub grade: Option<u8>,
    pub survival_time: Option<f64>,
    pub survival_event: Option<bool>,
}

impl SampleMeta {
    pub fn new(sample_id: impl Into<String>, kind: SampleKind) -> Self {
        SampleMeta {
            sample_id: sample_id.into(),
            kind,
            subtype: None,
            grade: None,
            survival_time: None,
            survival_event: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::InvalidInput("empty sample id".into()));
        }
        if self.survival_time.is_some() != self.survival_event.is_some() {
            return Err(Error::InvalidInput(format!(
                "sample {}: survival time and event must be present together",
                self.sample_id
            )));
        }
        if let Some(t) = self.survival_time {
            if !t.is_finite() || t < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "sample {}: survival time must be a non-negative number",
                    self.sample_id
                )));
            }
        }
        if let Some(g) = self.grade {
            if g > 3 {
                return Err(Error::InvalidInput(format!(
                    "sample {}: grade {g} out of range 0-3",
                    self.sample_id
                )));
            }
            if g == 0 && self.kind == SampleKind::Tumor {
                return Err(Error::InvalidInput(format!(
                    "sample {}: grade 0 is reserved for adjacent-normal tissue",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }
}

/// Dense samples-by-genes expression matrix with joined metadata.
///
/// Read-only after construction; all values are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    genes: Vec<GeneId>,
    samples: Vec<SampleMeta>,
    values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Tsv,
    Csv,
}

impl Default for TableFormat {
    fn default() -> Self {
        TableFormat::Tsv
    }
}

impl TableFormat {
    fn delimiter(self) -> char {
        match self {
            TableFormat::Tsv => '\t',
            TableFormat::Csv => ',',
        }
    }
}

/// Which metadata field a stratified split groups on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratifyField {
    Kind,
    Subtype,
    Grade,
}

impl StratifyField {
    pub fn label_of(self, meta: &SampleMeta) -> String {
        match self {
            StratifyField::Kind => meta.kind.token().to_string(),
            StratifyField::Subtype => meta.subtype.clone().unwrap_or_default(),
            StratifyField::Grade => meta.grade.map(|g| g.to_string()).unwrap_or_default(),
        }
    }
}

/// Train/test partition of a cohort, reproducible from its seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSplit {
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
}

impl ExpressionMatrix {
    pub fn new(
        genes: Vec<GeneId>,
        samples: Vec<SampleMeta>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if values.nrows() != samples.len() || values.ncols() != genes.len() {
            return Err(Error::ShapeMismatch(format!(
                "values are {}x{} but there are {} samples and {} genes",
                values.nrows(),
                values.ncols(),
                samples.len(),
                genes.len()
            )));
        }
        let mut seen = HashSet::new();
        for g in &genes {
            if !seen.insert(g.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate gene {g}")));
            }
        }
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate()?;
            if !seen.insert(s.sample_id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate sample {}",
                    s.sample_id
                )));
            }
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("expression value {v}")));
        }
        Ok(ExpressionMatrix {
            genes,
            samples,
            values,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_genes(&self) -> usize {
        self.genes.len()
    }

    pub fn genes(&self) -> &[GeneId] {
        &self.genes
    }

    pub fn samples(&self) -> &[SampleMeta] {
        &self.samples
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn gene_position(&self, gene: &GeneId) -> Option<usize> {
        self.genes.iter().position(|g| g == gene)
    }

    /// Load an expression TSV/CSV plus its metadata sidecar.
    ///
    /// Expression file: header row is the literal `sample_id` followed by one
    /// gene id per column; each subsequent row is a sample id followed by one
    /// decimal value per gene. Metadata file: columns
    /// `sample_id, kind, subtype, grade, surv_time, surv_event` (same
    /// delimiter), empty cell meaning absent; `kind` is `tumor` or `normal`,
    /// `surv_event` is `1`/`0`. Every sample must appear in both files.
    pub fn load(
        expr_path: impl AsRef<Path>,
        format: TableFormat,
        meta_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let expr_path = expr_path.as_ref();
        let meta_path = meta_path.as_ref();
        let expr_text = std::fs::read_to_string(expr_path)
            .map_err(|e| Error::io(expr_path, e))?;
        let meta_text = std::fs::read_to_string(meta_path)
            .map_err(|e| Error::io(meta_path, e))?;
        let (sample_ids, genes, values) = parse_expression(&expr_text, format)?;
        let meta_by_id = parse_metadata(&meta_text, format)?;

        let mut samples = Vec::with_capacity(sample_ids.len());
        for id in &sample_ids {
            let meta = meta_by_id.get(id).ok_or_else(|| {
                Error::InvalidInput(format!("no metadata row for sample {id}"))
            })?;
            samples.push(meta.clone());
        }
        for id in meta_by_id.keys() {
            if !sample_ids.contains(id) {
                return Err(Error::InvalidInput(format!(
                    "metadata sample {id} missing from matrix"
                )));
            }
        }
        ExpressionMatrix::new(genes, samples, values)
    }

    /// Write the expression table. Values are printed with the shortest
    /// representation that parses back to the identical f64.
    pub fn save(&self, expr_path: impl AsRef<Path>, format: TableFormat) -> Result<()> {
        let path = expr_path.as_ref();
        let d = format.delimiter();
        let mut out = String::new();
        out.push_str("sample_id");
        for g in &self.genes {
            out.push(d);
            out.push_str(g.as_str());
        }
        out.push('\n');
        for (i, s) in self.samples.iter().enumerate() {
            out.push_str(&s.sample_id);
            for v in self.values.row(i) {
                out.push(d);
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Write the metadata sidecar.
    pub fn save_metadata(&self, meta_path: impl AsRef<Path>, format: TableFormat) -> Result<()> {
        let path = meta_path.as_ref();
        let d = format.delimiter();
        let mut out = String::new();
        let header = ["sample_id", "kind", "subtype", "grade", "surv_time", "surv_event"];
        out.push_str(&header.join(&d.to_string()));
        out.push('\n');
        for s in &self.samples {
            out.push_str(&s.sample_id);
            out.push(d);
            out.push_str(s.kind.token());
            out.push(d);
            if let Some(st) = &s.subtype {
                out.push_str(st);
            }
            out.push(d);
            if let Some(g) = s.grade {
                let _ = write!(out, "{g}");
            }
            out.push(d);
            if let Some(t) = s.survival_time {
                let _ = write!(out, "{t}");
            }
            out.push(d);
            if let Some(e) = s.survival_event {
                out.push(if e { '1' } else { '0' });
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Replace every value v by log2(v + 1). Apply exactly once: the
    /// transform is not idempotent and nothing marks a matrix as already
    /// transformed.
    pub fn log2_transform(&self) -> Result<ExpressionMatrix> {
        if let Some(v) = self.values.iter().find(|v| **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "log2 transform requires non-negative values, found {v}"
            )));
        }
        let values = self.values.mapv(|v| (v + 1.0).log2());
        ExpressionMatrix::new(self.genes.clone(), self.samples.clone(), values)
    }

    /// Restrict to the given sample indices, in the given order.
    pub fn subset_samples(&self, indices: &[usize]) -> Result<ExpressionMatrix> {
        let mut samples = Vec::with_capacity(indices.len());
        let mut values = Array2::zeros((indices.len(), self.n_genes()));
        for (r, &i) in indices.iter().enumerate() {
            let s = self.samples.get(i).ok_or_else(|| {
                Error::InvalidInput(format!("sample index {i} out of range"))
            })?;
            samples.push(s.clone());
            values.row_mut(r).assign(&self.values.row(i));
        }
        ExpressionMatrix::new(self.genes.clone(), samples, values)
    }

    /// Restrict to the named genes, in the order given.
    pub fn subset_genes(&self, genes: &[GeneId]) -> Result<ExpressionMatrix> {
        let pos: HashMap<&str, usize> = self
            .genes
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let mut cols = Vec::with_capacity(genes.len());
        for g in genes {
            let &i = pos.get(g.as_str()).ok_or_else(|| {
                Error::InvalidInput(format!("gene {g} not present in matrix"))
            })?;
            cols.push(i);
        }
        let mut values = Array2::zeros((self.n_samples(), genes.len()));
        for (c, &i) in cols.iter().enumerate() {
            values.column_mut(c).assign(&self.values.column(i));
        }
        ExpressionMatrix::new(genes.to_vec(), self.samples.clone(), values)
    }

    /// Rows of every adjacent-normal sample, as a pool for mixture synthesis.
    pub fn normal_pool(&self) -> Array2<f64> {
        let idx: Vec<usize> = self
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.kind == SampleKind::AdjacentNormal)
            .map(|(i, _)| i)
            .collect();
        let mut pool = Array2::zeros((idx.len(), self.n_genes()));
        for (r, &i) in idx.iter().enumerate() {
            pool.row_mut(r).assign(&self.values.row(i));
        }
        pool
    }
}

fn parse_expression(
    text: &str,
    format: TableFormat,
) -> Result<(Vec<String>, Vec<GeneId>, Array2<f64>)> {
    let d = format.delimiter();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty expression file".into()))?;
    let mut cells = header.split(d);
    match cells.next() {
        Some("sample_id") => {}
        other => {
            return Err(Error::Parse(format!(
                "expression header must start with \"sample_id\", found {other:?}"
            )))
        }
    }
    let genes: Vec<GeneId> = cells.map(GeneId::new).collect::<Result<_>>()?;
    if genes.is_empty() {
        return Err(Error::Parse("expression header has no genes".into()));
    }

    let mut sample_ids = Vec::new();
    let mut data = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut cells = line.split(d);
        let id = cells
            .next()
            .ok_or_else(|| Error::Parse(format!("row {row}: missing sample id")))?;
        sample_ids.push(id.to_string());
        let mut n = 0usize;
        for (col, cell) in cells.enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!("non-numeric cell at ({row},{col}): {cell:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::Parse(format!(
                    "non-finite cell at ({row},{col}): {cell:?}"
                )));
            }
            data.push(v);
            n += 1;
        }
        if n != genes.len() {
            return Err(Error::Parse(format!(
                "ragged row {row}: {n} values for {} genes",
                genes.len()
            )));
        }
    }
    let values = Array2::from_shape_vec((sample_ids.len(), genes.len()), data)
        .expect("row lengths checked above");
    Ok((sample_ids, genes, values))
}

fn parse_metadata(text: &str, format: TableFormat) -> Result<BTreeMap<String, SampleMeta>> {
    let d = format.delimiter();
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty metadata file".into()))?;
    let expected = ["sample_id", "kind", "subtype", "grade", "surv_time", "surv_event"];
    let got: Vec<&str> = header.split(d).collect();
    if got != expected {
        return Err(Error::Parse(format!(
            "metadata header must be {expected:?}, found {got:?}"
        )));
    }

    let mut by_id = BTreeMap::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(d).collect();
        if cells.len() != expected.len() {
            return Err(Error::Parse(format!(
                "metadata row {row}: expected {} columns, found {}",
                expected.len(),
                cells.len()
            )));
        }
        let opt = |s: &str| if s.is_empty() { None } else { Some(s.to_string()) };
        let meta = SampleMeta {
            sample_id: cells[0].to_string(),
            kind: SampleKind::parse(cells[1])?,
            subtype: opt(cells[2]),
            grade: match cells[3] {
                "" => None,
                g => Some(g.parse().map_err(|_| {
                    Error::Parse(format!("metadata row {row}: bad grade {g:?}"))
                })?),
            },
            survival_time: match cells[4] {
                "" => None,
                t => Some(t.parse().map_err(|_| {
                    Error::Parse(format!("metadata row {row}: bad surv_time {t:?}"))
                })?),
            },
            survival_event: match cells[5] {
                "" => None,
                "1" => Some(true),
                "0" => Some(false),
                e => {
                    return Err(Error::Parse(format!(
                        "metadata row {row}: surv_event must be 1 or 0, found {e:?}"
                    )))
                }
            },
        };
        if by_id.insert(meta.sample_id.clone(), meta).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate sample {} in metadata",
                cells[0]
            )));
        }
    }
    Ok(by_id)
}

/// Restrict all matrices to their common gene set, lexicographically ordered.
///
/// The canonical order makes column positions comparable across runs and
/// cohorts.
pub fn intersect_genes(matrices: &[ExpressionMatrix]) -> Result<Vec<ExpressionMatrix>> {
    if matrices.len() < 2 {
        return Err(Error::InvalidInput(
            "gene intersection needs at least 2 matrices".into(),
        ));
    }
    let mut common: BTreeSet<GeneId> = matrices[0].genes.iter().cloned().collect();
    for m in &matrices[1..] {
        let theirs: HashSet<&GeneId> = m.genes.iter().collect();
        common.retain(|g| theirs.contains(g));
    }
    if common.is_empty() {
        return Err(Error::InvalidInput("empty intersection of gene sets".into()));
    }
    let ordered: Vec<GeneId> = common.into_iter().collect();
    matrices.iter().map(|m| m.subset_genes(&ordered)).collect()
}

/// Subtype label whose carriers are held out of training sets.
pub const TEST_ONLY_SUBTYPE: &str = "Normal-like";

/// Deterministic train/test split.
///
/// `fraction` is the train share. With `stratify_on`, the split is drawn
/// per label value and preserves per-label proportions within one sample.
/// Samples whose subtype is [`TEST_ONLY_SUBTYPE`] always land in the test
/// set and do not count toward stratum sizes.
pub fn split_cohort(
    m: &ExpressionMatrix,
    fraction: f64,
    stratify_on: Option<StratifyField>,
    seed: u64,
) -> Result<CohortSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction must lie in (0,1), got {fraction}"
        )));
    }
    let mut forced_test = Vec::new();
    let mut eligible = Vec::new();
    for (i, s) in m.samples().iter().enumerate() {
        if s.subtype.as_deref() == Some(TEST_ONLY_SUBTYPE) {
            forced_test.push(i);
        } else {
            eligible.push(i);
        }
    }

    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    match stratify_on {
        Some(field) => {
            for &i in &eligible {
                strata
                    .entry(field.label_of(&m.samples()[i]))
                    .or_default()
                    .push(i);
            }
            for (label, members) in &strata {
                if members.len() < 2 {
                    return Err(Error::InvalidInput(format!(
                        "stratum {label:?} has {} sample(s); need at least 2",
                        members.len()
                    )));
                }
            }
        }
        None => {
            strata.insert(String::new(), eligible.clone());
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = forced_test;
    for members in strata.values() {
        if members.is_empty() {
            continue;
        }
        let mut members = members.clone();
        members.shuffle(&mut rng);
        let mut n_train = (fraction * members.len() as f64).round() as usize;
        n_train = n_train.clamp(1, members.len().saturating_sub(1).max(1));
        train.extend_from_slice(&members[..n_train]);
        test.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(CohortSplit {
        train_indices: train,
        test_indices: test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    fn toy_matrix() -> ExpressionMatrix {
        let genes = ["g1", "g2", "g3", "g4"]
            .iter()
            .map(|g| GeneId::new(*g).unwrap())
            .collect();
        let samples = vec![
            SampleMeta::new("s1", SampleKind::Tumor),
            SampleMeta::new("s2", SampleKind::Tumor),
            SampleMeta::new("s3", SampleKind::AdjacentNormal),
        ];
        let values = array![
            [0.0, 1.0, 3.0, 7.0],
            [1.5, 2.5, 3.5, 4.5],
            [0.1, 0.2, 0.3, 0.4],
        ];
        ExpressionMatrix::new(genes, samples, values).unwrap()
    }

    #[test]
    fn load_fixture_shape() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        let meta = dir.path().join("meta.tsv");
        let m = toy_matrix();
        m.save(&expr, TableFormat::Tsv).unwrap();
        m.save_metadata(&meta, TableFormat::Tsv).unwrap();
        let loaded = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap();
        assert_eq!(loaded.n_samples(), 3);
        assert_eq!(loaded.n_genes(), 4);
    }

    #[test]
    fn duplicate_gene_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        let meta = dir.path().join("meta.tsv");
        std::fs::write(&expr, "sample_id\tg1\tg1\ns1\t1\t2\n").unwrap();
        std::fs::write(
            &meta,
            "sample_id\tkind\tsubtype\tgrade\tsurv_time\tsurv_event\ns1\ttumor\t\t\t\t\n",
        )
        .unwrap();
        let err = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap_err();
        assert!(err.to_string().contains("duplicate gene"), "{err}");
    }

    #[test]
    fn non_numeric_cell_names_position() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        let meta = dir.path().join("meta.tsv");
        std::fs::write(&expr, "sample_id\tg1\tg2\ns1\t1\tNA\n").unwrap();
        std::fs::write(
            &meta,
            "sample_id\tkind\tsubtype\tgrade\tsurv_time\tsurv_event\ns1\ttumor\t\t\t\t\n",
        )
        .unwrap();
        let err = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap_err();
        assert!(err.to_string().contains("non-numeric cell at (0,1)"), "{err}");
    }

    #[test]
    fn ragged_row_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        std::fs::write(&expr, "sample_id\tg1\tg2\ns1\t1\n").unwrap();
        let meta = dir.path().join("meta.tsv");
        std::fs::write(
            &meta,
            "sample_id\tkind\tsubtype\tgrade\tsurv_time\tsurv_event\ns1\ttumor\t\t\t\t\n",
        )
        .unwrap();
        let err = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap_err();
        assert!(err.to_string().contains("ragged row"), "{err}");
    }

    #[test]
    fn metadata_sample_missing_from_matrix_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        let meta = dir.path().join("meta.tsv");
        std::fs::write(&expr, "sample_id\tg1\ns1\t1\n").unwrap();
        std::fs::write(
            &meta,
            "sample_id\tkind\tsubtype\tgrade\tsurv_time\tsurv_event\n\
             s1\ttumor\t\t\t\t\n\
             s2\ttumor\t\t\t\t\n",
        )
        .unwrap();
        let err = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap_err();
        assert!(err.to_string().contains("missing from matrix"), "{err}");
    }

    #[test]
    fn save_load_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let expr = dir.path().join("expr.tsv");
        let meta = dir.path().join("meta.tsv");
        // awkward values that stress float formatting
        let genes = vec![GeneId::new("g1").unwrap(), GeneId::new("g2").unwrap()];
        let samples = vec![SampleMeta::new("s1", SampleKind::Tumor)];
        let values = array![[0.1 + 0.2, 1.0 / 3.0]];
        let m = ExpressionMatrix::new(genes, samples, values).unwrap();
        m.save(&expr, TableFormat::Tsv).unwrap();
        m.save_metadata(&meta, TableFormat::Tsv).unwrap();
        let first = std::fs::read(&expr).unwrap();
        let loaded = ExpressionMatrix::load(&expr, TableFormat::Tsv, &meta).unwrap();
        for (a, b) in m.values().iter().zip(loaded.values().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        loaded.save(&expr, TableFormat::Tsv).unwrap();
        let second = std::fs::read(&expr).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn log2_fixture_values() {
        let m = toy_matrix().log2_transform().unwrap();
        assert_eq!(m.values()[[0, 0]], 0.0); // log2(0+1)
        assert_eq!(m.values()[[0, 1]], 1.0); // log2(1+1)
        assert_eq!(m.values()[[0, 2]], 2.0); // log2(3+1)
        assert_eq!(m.values()[[0, 3]], 3.0); // log2(7+1)
    }

    #[test]
    fn log2_rejects_negative() {
        let genes = vec![GeneId::new("g1").unwrap()];
        let samples = vec![SampleMeta::new("s1", SampleKind::Tumor)];
        let m = ExpressionMatrix::new(genes, samples, array![[-0.5]]).unwrap();
        assert!(m.log2_transform().is_err());
    }

    #[test]
    fn log2_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let a: f64 = rng.random::<f64>() * 100.0;
            let b: f64 = rng.random::<f64>() * 100.0;
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!((lo + 1.0).log2() <= (hi + 1.0).log2());
        }
    }

    fn matrix_with_genes(names: &[&str]) -> ExpressionMatrix {
        let genes: Vec<GeneId> = names.iter().map(|g| GeneId::new(*g).unwrap()).collect();
        let samples = vec![SampleMeta::new("s1", SampleKind::Tumor)];
        let values = Array2::from_shape_fn((1, names.len()), |(_, j)| j as f64);
        ExpressionMatrix::new(genes, samples, values).unwrap()
    }

    #[test]
    fn intersect_restricts_to_common_genes() {
        let a = matrix_with_genes(&["A", "B", "C"]);
        let b = matrix_with_genes(&["B", "C", "D"]);
        let out = intersect_genes(&[a, b]).unwrap();
        let names: Vec<&str> = out[0].genes().iter().map(|g| g.as_str()).collect();
        assert_eq!(names, ["B", "C"]);
        let names: Vec<&str> = out[1].genes().iter().map(|g| g.as_str()).collect();
        assert_eq!(names, ["B", "C"]);
        // values follow their columns
        assert_eq!(out[0].values()[[0, 0]], 1.0);
        assert_eq!(out[1].values()[[0, 0]], 0.0);
    }

    #[test]
    fn intersect_identical_lists_reorders_canonically() {
        let a = matrix_with_genes(&["C", "A", "B"]);
        let b = matrix_with_genes(&["C", "A", "B"]);
        let out = intersect_genes(&[a, b]).unwrap();
        let names: Vec<&str> = out[0].genes().iter().map(|g| g.as_str()).collect();
        assert_eq!(names, ["A", "B", "C"]);
    }

    #[test]
    fn intersect_disjoint_errors() {
        let a = matrix_with_genes(&["A", "B"]);
        let b = matrix_with_genes(&["C", "D"]);
        assert!(intersect_genes(&[a, b]).is_err());
    }

    fn cohort(n: usize, subtypes: &[&str]) -> ExpressionMatrix {
        let genes = vec![GeneId::new("g1").unwrap()];
        let samples: Vec<SampleMeta> = (0..n)
            .map(|i| {
                let mut s = SampleMeta::new(format!("s{i}"), SampleKind::Tumor);
                s.subtype = Some(subtypes[i % subtypes.len()].to_string());
                s
            })
            .collect();
        let values = Array2::zeros((n, 1));
        ExpressionMatrix::new(genes, samples, values).unwrap()
    }

    #[test]
    fn split_is_deterministic() {
        let m = cohort(10, &["A"]);
        let a = split_cohort(&m, 0.8, None, 7).unwrap();
        let b = split_cohort(&m, 0.8, None, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train_indices.len(), 8);
        assert_eq!(a.test_indices.len(), 2);
        let mut all = a.train_indices.clone();
        all.extend(&a.test_indices);
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_split_preserves_label_counts() {
        let m = cohort(100, &["A", "B"]);
        let split = split_cohort(&m, 0.8, Some(StratifyField::Subtype), 3).unwrap();
        let count = |idx: &[usize], label: &str| {
            idx.iter()
                .filter(|&&i| m.samples()[i].subtype.as_deref() == Some(label))
                .count()
        };
        assert_eq!(count(&split.train_indices, "A"), 40);
        assert_eq!(count(&split.train_indices, "B"), 40);
    }

    #[test]
    fn zero_fraction_errors() {
        let m = cohort(10, &["A"]);
        assert!(split_cohort(&m, 0.0, None, 1).is_err());
    }

    #[test]
    fn small_stratum_errors() {
        let mut m = cohort(5, &["A"]);
        m.samples[4].subtype = Some("B".into());
        assert!(split_cohort(&m, 0.8, Some(StratifyField::Subtype), 1).is_err());
    }

    #[test]
    fn normal_like_is_forced_into_test() {
        let mut m = cohort(10, &["A"]);
        m.samples[0].subtype = Some(TEST_ONLY_SUBTYPE.into());
        let split = split_cohort(&m, 0.8, None, 5).unwrap();
        assert!(split.test_indices.contains(&0));
        assert!(!split.train_indices.contains(&0));
    }
}
