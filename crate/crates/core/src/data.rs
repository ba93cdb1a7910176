//! Count-matrix representation, file ingestion, gene filtering, and size
//! factors.
//!
//! Two on-disk formats are supported: a dense CSV with cells as rows (header
//! row of gene ids, first column of cell ids) and a Matrix Market integer
//! coordinate file with companion newline-delimited id files (`<path>.rows`
//! for cells, `<path>.cols` for genes).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// N x G matrix of read counts with cell and gene identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    counts: Array2<u32>,
    cell_ids: Vec<String>,
    gene_ids: Vec<String>,
}

impl CountMatrix {
    pub fn new(counts: Array2<u32>, cell_ids: Vec<String>, gene_ids: Vec<String>) -> Result<Self> {
        let (n, g) = counts.dim();
        if n == 0 || g == 0 {
            return Err(Error::Dimension(format!(
                "count matrix must be non-empty, got {n} x {g}"
            )));
        }
        if cell_ids.len() != n {
            return Err(Error::Dimension(format!(
                "{} cell ids for {n} rows",
                cell_ids.len()
            )));
        }
        if gene_ids.len() != g {
            return Err(Error::Dimension(format!(
                "{} gene ids for {g} columns",
                gene_ids.len()
            )));
        }
        // The kernels take contiguous row slices; normalize arrays that
        // arrived in a non-standard layout (e.g. built from a transpose).
        let counts = if counts.as_slice().is_some() {
            counts
        } else {
            Array2::from_shape_vec((n, g), counts.iter().copied().collect())
                .expect("layout normalization")
        };
        Ok(Self {
            counts,
            cell_ids,
            gene_ids,
        })
    }

    /// Build a matrix with generated `cell_<i>` / `gene_<j>` identifiers.
    pub fn with_default_ids(counts: Array2<u32>) -> Result<Self> {
        let (n, g) = counts.dim();
        let cells = (1..=n).map(|i| format!("cell_{i}")).collect();
        let genes = (1..=g).map(|j| format!("gene_{j}")).collect();
        Self::new(counts, cells, genes)
    }

    pub fn n_cells(&self) -> usize {
        self.counts.nrows()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.ncols()
    }

    pub fn counts(&self) -> &Array2<u32> {
        &self.counts
    }

    pub fn cell_ids(&self) -> &[String] {
        &self.cell_ids
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    /// Largest count in the matrix; 0 for an all-zero matrix.
    pub fn max_count(&self) -> u32 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    fn select_genes(&self, keep: &[usize]) -> Result<Self> {
        let n = self.n_cells();
        let mut out = Array2::<u32>::zeros((n, keep.len()));
        for (dst, &src) in keep.iter().enumerate() {
            out.column_mut(dst).assign(&self.counts.column(src));
        }
        let gene_ids = keep.iter().map(|&j| self.gene_ids[j].clone()).collect();
        Self::new(out, self.cell_ids.clone(), gene_ids)
    }
}

/// N x P matrix of known real-valued covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix {
    values: Array2<f64>,
    names: Vec<String>,
}

impl CovariateMatrix {
    pub fn new(values: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != values.ncols() {
            return Err(Error::Dimension(format!(
                "{} covariate names for {} columns",
                names.len(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("covariates must be finite".into()));
        }
        Ok(Self { values, names })
    }

    pub fn n_cells(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_covariates(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Strictly positive per-cell exposures entering the rate through a log link.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeFactors {
    t: Array1<f64>,
}

impl SizeFactors {
    pub fn new(t: Array1<f64>) -> Result<Self> {
        if let Some(bad) = t.iter().find(|v| !v.is_finite() || **v <= 0.0) {
            return Err(Error::Domain(format!(
                "size factors must be finite and > 0, got {bad}"
            )));
        }
        Ok(Self { t })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.t
    }
}

/// A count matrix bundled with optional size factors and covariates, as
/// consumed by the likelihood kernels and the EM engine.
///
/// Missing size factors mean T_n = 1 for every cell; missing covariates mean
/// P = 0.
#[derive(Debug, Clone, Copy)]
pub struct EmData<'a> {
    pub counts: &'a CountMatrix,
    pub size_factors: Option<&'a SizeFactors>,
    pub covariates: Option<&'a CovariateMatrix>,
}

impl<'a> EmData<'a> {
    pub fn new(counts: &'a CountMatrix) -> Self {
        Self {
            counts,
            size_factors: None,
            covariates: None,
        }
    }

    pub fn with_size_factors(mut self, sf: &'a SizeFactors) -> Self {
        self.size_factors = Some(sf);
        self
    }

    pub fn with_covariates(mut self, x: &'a CovariateMatrix) -> Self {
        self.covariates = Some(x);
        self
    }

    pub fn n_cells(&self) -> usize {
        self.counts.n_cells()
    }

    pub fn n_genes(&self) -> usize {
        self.counts.n_genes()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.map_or(0, |x| x.n_covariates())
    }

    /// Log size factors (zeros when size factors are absent).
    pub fn log_offsets(&self) -> Array1<f64> {
        match self.size_factors {
            Some(sf) => sf.values().mapv(f64::ln),
            None => Array1::zeros(self.n_cells()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(sf) = self.size_factors {
            if sf.len() != self.n_cells() {
                return Err(Error::Dimension(format!(
                    "{} size factors for {} cells",
                    sf.len(),
                    self.n_cells()
                )));
            }
        }
        if let Some(x) = self.covariates {
            if x.n_cells() != self.n_cells() {
                return Err(Error::Dimension(format!(
                    "covariate matrix has {} rows for {} cells",
                    x.n_cells(),
                    self.n_cells()
                )));
            }
        }
        Ok(())
    }
}

/// On-disk count formats understood by [`load_counts`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountFormat {
    DenseCsv,
    MatrixMarketTriplet,
}

/// Read a count matrix from `path` in the given format.
pub fn load_counts(path: impl AsRef<Path>, format: CountFormat) -> Result<CountMatrix> {
    let path = path.as_ref();
    match format {
        CountFormat::DenseCsv => load_dense_csv(path),
        CountFormat::MatrixMarketTriplet => load_matrix_market(path),
    }
}

fn parse_count(token: &str, context: &str) -> Result<u32> {
    let token = token.trim();
    if let Ok(v) = token.parse::<i64>() {
        if v < 0 {
            return Err(Error::Domain(format!("negative count {v} {context}")));
        }
        return u32::try_from(v)
            .map_err(|_| Error::Domain(format!("count {v} too large {context}")));
    }
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= f64::from(u32::MAX) => {
            Ok(v as u32)
        }
        Ok(v) => Err(Error::Domain(format!(
            "count must be a non-negative integer, got {v} {context}"
        ))),
        Err(_) => Err(Error::Parse(format!(
            "unreadable count token '{token}' {context}"
        ))),
    }
}

fn load_dense_csv(path: &Path) -> Result<CountMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = match lines.next() {
        Some(line) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Parse(format!("{}: empty file", path.display()))),
    };
    let mut fields = header.split(',');
    fields.next(); // corner token above the cell-id column
    let gene_ids: Vec<String> = fields.map(|s| s.trim().to_string()).collect();
    if gene_ids.is_empty() || gene_ids.iter().any(|s| s.is_empty()) {
        return Err(Error::Parse(format!(
            "{}: header must list one or more gene ids",
            path.display()
        )));
    }
    let g = gene_ids.len();

    let mut cell_ids = Vec::new();
    let mut values: Vec<u32> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = line.split(',');
        let cell = toks
            .next()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .ok_or_else(|| {
                Error::Parse(format!("{}: row {} lacks a cell id", path.display(), i + 2))
            })?;
        let row_start = values.len();
        for tok in toks {
            values.push(parse_count(
                tok,
                &format!("at {}:{}", path.display(), i + 2),
            )?);
        }
        if values.len() - row_start != g {
            return Err(Error::Parse(format!(
                "{}: row {} has {} counts, expected {g}",
                path.display(),
                i + 2,
                values.len() - row_start
            )));
        }
        cell_ids.push(cell);
    }
    let n = cell_ids.len();
    if n == 0 {
        return Err(Error::Parse(format!("{}: no data rows", path.display())));
    }
    let counts =
        Array2::from_shape_vec((n, g), values).map_err(|e| Error::Dimension(e.to_string()))?;
    CountMatrix::new(counts, cell_ids, gene_ids)
}

fn read_id_file(path: &Path, expected: usize, what: &str) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let id = line.trim();
        if !id.is_empty() {
            ids.push(id.to_string());
        }
    }
    if ids.len() != expected {
        return Err(Error::Dimension(format!(
            "{}: {} {what} ids, matrix declares {expected}",
            path.display(),
            ids.len()
        )));
    }
    Ok(ids)
}

fn load_matrix_market(path: &Path) -> Result<CountMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut counts: Option<Array2<u32>> = None;
    let mut seen = 0usize;
    let mut first_line = true;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if first_line && trimmed.starts_with("%%MatrixMarket") {
            let lowered = trimmed.to_ascii_lowercase();
            if !lowered.contains("coordinate") || !lowered.contains("integer") {
                return Err(Error::Parse(format!(
                    "{}: banner must declare 'coordinate integer', got '{trimmed}'",
                    path.display()
                )));
            }
            first_line = false;
            continue;
        }
        first_line = false;
        if trimmed.is_empty() || trimmed.starts_with('%') {
            continue;
        }
        let toks: Vec<&str> = trimmed.split_whitespace().collect();
        if dims.is_none() {
            if toks.len() != 3 {
                return Err(Error::Parse(format!(
                    "{}:{}: size line must be 'rows cols nnz'",
                    path.display(),
                    lineno + 1
                )));
            }
            let parse = |s: &str| -> Result<usize> {
                s.parse::<usize>().map_err(|_| {
                    Error::Parse(format!(
                        "{}:{}: bad size token '{s}'",
                        path.display(),
                        lineno + 1
                    ))
                })
            };
            let (n, g, nnz) = (parse(toks[0])?, parse(toks[1])?, parse(toks[2])?);
            if n == 0 || g == 0 {
                return Err(Error::Parse(format!(
                    "{}: declared dimensions {n} x {g} are empty",
                    path.display()
                )));
            }
            dims = Some((n, g, nnz));
            counts = Some(Array2::zeros((n, g)));
            continue;
        }
        let (n, g, _) = dims.unwrap();
        if toks.len() != 3 {
            return Err(Error::Parse(format!(
                "{}:{}: entry must be 'row col value'",
                path.display(),
                lineno + 1
            )));
        }
        let idx = |s: &str, bound: usize, axis: &str| -> Result<usize> {
            let v: usize = s.parse().map_err(|_| {
                Error::Parse(format!(
                    "{}:{}: bad {axis} index '{s}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            if v == 0 || v > bound {
                return Err(Error::Parse(format!(
                    "{}:{}: {axis} index {v} outside 1..={bound}",
                    path.display(),
                    lineno + 1
                )));
            }
            Ok(v - 1)
        };
        let r = idx(toks[0], n, "row")?;
        let c = idx(toks[1], g, "column")?;
        let v = parse_count(toks[2], &format!("at {}:{}", path.display(), lineno + 1))?;
        let slot = &mut counts.as_mut().unwrap()[[r, c]];
        if seen > 0 && *slot != 0 && v != 0 {
            // A non-zero slot can only be hit twice by a duplicate entry.
            return Err(Error::Parse(format!(
                "{}:{}: duplicate entry for ({}, {})",
                path.display(),
                lineno + 1,
                r + 1,
                c + 1
            )));
        }
        *slot = v;
        seen += 1;
    }

    let (n, g, nnz) =
        dims.ok_or_else(|| Error::Parse(format!("{}: missing size header line", path.display())))?;
    if seen != nnz {
        return Err(Error::Parse(format!(
            "{}: {seen} entries read, header declares {nnz}",
            path.display()
        )));
    }
    let rows_path = sibling(path, "rows");
    let cols_path = sibling(path, "cols");
    let cell_ids = read_id_file(&rows_path, n, "cell")?;
    let gene_ids = read_id_file(&cols_path, g, "gene")?;
    CountMatrix::new(counts.unwrap(), cell_ids, gene_ids)
}

fn sibling(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    std::path::PathBuf::from(s)
}

/// Write a matrix as dense CSV in the layout accepted by [`load_counts`].
pub fn write_dense_csv(m: &CountMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |w: &mut BufWriter<File>, s: String| -> Result<()> {
        w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    };
    emit(&mut w, format!("cell_id,{}\n", m.gene_ids().join(",")))?;
    for (i, cell) in m.cell_ids().iter().enumerate() {
        let mut line = String::with_capacity(m.n_genes() * 3 + cell.len() + 2);
        line.push_str(cell);
        for v in m.counts().row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        emit(&mut w, line)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a matrix as Matrix Market coordinate integer, plus `.rows`/`.cols`
/// id files.
pub fn write_matrix_market(m: &CountMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let nnz = m.counts().iter().filter(|&&v| v != 0).count();
    write!(
        w,
        "%%MatrixMarket matrix coordinate integer general\n{} {} {}\n",
        m.n_cells(),
        m.n_genes(),
        nnz
    )
    .map_err(|e| Error::io(path, e))?;
    for ((r, c), &v) in m.counts().indexed_iter() {
        if v != 0 {
            writeln!(w, "{} {} {}", r + 1, c + 1, v).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    std::fs::write(sibling(path, "rows"), m.cell_ids().join("\n") + "\n")
        .map_err(|e| Error::io(path, e))?;
    std::fs::write(sibling(path, "cols"), m.gene_ids().join("\n") + "\n")
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Interquartile range of a sample, with Q1/Q3 the 25th/75th percentiles of
/// the sorted sample under linear interpolation between adjacent order
/// statistics (the convention used for gene filtering throughout).
pub fn iqr(sample: &[u32]) -> f64 {
    let mut sorted: Vec<f64> = sample.iter().map(|&v| f64::from(v)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    percentile_sorted(&sorted, 0.75) - percentile_sorted(&sorted, 0.25)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = lo.min(n - 2) + 1;
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Keep the genes whose count IQR across cells exceeds `threshold`.
///
/// Returns the reduced matrix and the kept gene indices (original order).
pub fn filter_genes_iqr(m: &CountMatrix, threshold: f64) -> Result<(CountMatrix, Vec<usize>)> {
    let mut keep = Vec::new();
    let mut buf = vec![0u32; m.n_cells()];
    for j in 0..m.n_genes() {
        for (i, v) in m.counts().column(j).iter().enumerate() {
            buf[i] = *v;
        }
        if iqr(&buf) > threshold {
            keep.push(j);
        }
    }
    if keep.is_empty() {
        return Err(Error::EmptySelection(format!(
            "no gene has IQR > {threshold}"
        )));
    }
    Ok((m.select_genes(&keep)?, keep))
}

fn column_sd(col: ndarray::ArrayView1<u32>) -> f64 {
    let n = col.len();
    if n < 2 {
        return 0.0;
    }
    let mean = col.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    let ss = col
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>();
    (ss / (n as f64 - 1.0)).sqrt()
}

/// Keep the `n_top` genes with the largest sample standard deviation across
/// cells; ties break toward the lower original index, and the surviving genes
/// stay in their original relative order.
pub fn select_top_sd(m: &CountMatrix, n_top: usize) -> Result<(CountMatrix, Vec<usize>)> {
    let g = m.n_genes();
    if n_top == 0 || n_top > g {
        return Err(Error::Dimension(format!("n_top = {n_top} outside 1..={g}")));
    }
    let mut order: Vec<usize> = (0..g).collect();
    let sds: Vec<f64> = (0..g).map(|j| column_sd(m.counts().column(j))).collect();
    order.sort_by(|&a, &b| sds[b].partial_cmp(&sds[a]).unwrap().then_with(|| a.cmp(&b)));
    let mut keep: Vec<usize> = order[..n_top].to_vec();
    keep.sort_unstable();
    Ok((m.select_genes(&keep)?, keep))
}

/// Per-cell totals T_n = sum_g y_ng, computed on the pre-filtering matrix.
pub fn compute_size_factors(m_raw: &CountMatrix) -> Result<SizeFactors> {
    let mut t = Array1::<f64>::zeros(m_raw.n_cells());
    for (i, row) in m_raw.counts().rows().into_iter().enumerate() {
        let total: u64 = row.iter().map(|&v| u64::from(v)).sum();
        if total == 0 {
            return Err(Error::DegenerateCell { cell: i });
        }
        t[i] = total as f64;
    }
    SizeFactors::new(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "zimclust-data-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn write_file(path: &Path, content: &str) {
        let mut f = File::create(path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
    }

    #[test]
    fn dense_csv_round_trip_values() {
        let dir = tmpdir();
        let path = dir.join("tiny.csv");
        write_file(&path, "cell_id,g1,g2\nc1,0,3\nc2,1,0\n");
        let m = load_counts(&path, CountFormat::DenseCsv).unwrap();
        assert_eq!(m.counts(), &array![[0, 3], [1, 0]]);
        assert_eq!(m.cell_ids(), ["c1", "c2"]);
        assert_eq!(m.gene_ids(), ["g1", "g2"]);
    }

    #[test]
    fn dense_csv_rejects_fractional_counts() {
        let dir = tmpdir();
        let path = dir.join("frac.csv");
        write_file(&path, "cell_id,g1\nc1,2.5\n");
        match load_counts(&path, CountFormat::DenseCsv) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected Domain error, got {other:?}"),
        }
    }

    #[test]
    fn dense_csv_rejects_negative_and_garbage() {
        let dir = tmpdir();
        let neg = dir.join("neg.csv");
        write_file(&neg, "cell_id,g1\nc1,-2\n");
        assert!(matches!(
            load_counts(&neg, CountFormat::DenseCsv),
            Err(Error::Domain(_))
        ));
        let garbage = dir.join("garbage.csv");
        write_file(&garbage, "cell_id,g1\nc1,abc\n");
        assert!(matches!(
            load_counts(&garbage, CountFormat::DenseCsv),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn matrix_market_fills_unspecified_entries_with_zero() {
        let dir = tmpdir();
        let path = dir.join("tri.mtx");
        write_file(
            &path,
            "%%MatrixMarket matrix coordinate integer general\n3 2 2\n1 1 5\n3 2 7\n",
        );
        write_file(&sibling(&path, "rows"), "a\nb\nc\n");
        write_file(&sibling(&path, "cols"), "g1\ng2\n");
        let m = load_counts(&path, CountFormat::MatrixMarketTriplet).unwrap();
        assert_eq!(m.counts(), &array![[5, 0], [0, 0], [0, 7]]);
    }

    #[test]
    fn matrix_market_id_file_mismatch_is_dimension_error() {
        let dir = tmpdir();
        let path = dir.join("bad_ids.mtx");
        write_file(
            &path,
            "%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 4\n",
        );
        write_file(&sibling(&path, "rows"), "a\nb\nc\n");
        write_file(&sibling(&path, "cols"), "g1\ng2\n");
        assert!(matches!(
            load_counts(&path, CountFormat::MatrixMarketTriplet),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matrix_market_malformed_header_is_parse_error() {
        let dir = tmpdir();
        let path = dir.join("bad_header.mtx");
        write_file(&path, "%%MatrixMarket matrix array real general\n2 2 0\n");
        assert!(matches!(
            load_counts(&path, CountFormat::MatrixMarketTriplet),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn both_formats_agree_on_the_same_logical_matrix() {
        let dir = tmpdir();
        let m = CountMatrix::new(
            array![[0, 3, 1], [1, 0, 0], [2, 2, 9]],
            vec!["c1".into(), "c2".into(), "c3".into()],
            vec!["g1".into(), "g2".into(), "g3".into()],
        )
        .unwrap();
        let csv_path = dir.join("eq.csv");
        let mtx_path = dir.join("eq.mtx");
        write_dense_csv(&m, &csv_path).unwrap();
        write_matrix_market(&m, &mtx_path).unwrap();
        let from_csv = load_counts(&csv_path, CountFormat::DenseCsv).unwrap();
        let from_mtx = load_counts(&mtx_path, CountFormat::MatrixMarketTriplet).unwrap();
        assert_eq!(from_csv, from_mtx);
        assert_eq!(from_csv, m);
    }

    #[test]
    fn iqr_filter_drops_constant_genes_and_keeps_spread() {
        // gene 0 constant at 4 (IQR 0); gene 1 is {0,0,2,8}: Q1 = 0,
        // Q3 = 2 + 0.25 * 6 = 3.5 under linear interpolation, so IQR 3.5.
        let m = CountMatrix::with_default_ids(array![[4, 0], [4, 0], [4, 2], [4, 8]]).unwrap();
        let (filtered, keep) = filter_genes_iqr(&m, 1.0).unwrap();
        assert_eq!(keep, vec![1]);
        assert_eq!(filtered.n_genes(), 1);
        assert!((iqr(&[0, 0, 2, 8]) - 3.5).abs() < 1e-12);
    }

    #[test]
    fn iqr_filter_negative_threshold_keeps_everything() {
        let m = CountMatrix::with_default_ids(array![[4, 0], [4, 1]]).unwrap();
        let (_, keep) = filter_genes_iqr(&m, -1.0).unwrap();
        assert_eq!(keep, vec![0, 1]);
    }

    #[test]
    fn iqr_filter_can_empty_the_selection() {
        let m = CountMatrix::with_default_ids(array![[4], [4]]).unwrap();
        assert!(matches!(
            filter_genes_iqr(&m, 1.0),
            Err(Error::EmptySelection(_))
        ));
    }

    #[test]
    fn top_sd_selects_by_spread() {
        let m = CountMatrix::with_default_ids(array![[0, 0], [0, 10], [0, 0], [0, 10]]).unwrap();
        let (sel, keep) = select_top_sd(&m, 1).unwrap();
        assert_eq!(keep, vec![1]);
        assert_eq!(sel.gene_ids(), ["gene_2"]);
        // n_top = G keeps everything in original order.
        let (_, all) = select_top_sd(&m, 2).unwrap();
        assert_eq!(all, vec![0, 1]);
        assert!(matches!(select_top_sd(&m, 3), Err(Error::Dimension(_))));
    }

    #[test]
    fn top_sd_matches_sort_oracle() {
        use rand::Rng;
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        use rand::SeedableRng;
        let counts = Array2::from_shape_fn((12, 5), |_| rng.random_range(0..30u32));
        let m = CountMatrix::with_default_ids(counts).unwrap();
        let (_, keep) = select_top_sd(&m, 2).unwrap();
        // Independent oracle: compute sds directly and take the two largest.
        let mut sd_idx: Vec<(f64, usize)> = (0..5)
            .map(|j| {
                let col: Vec<f64> = m.counts().column(j).iter().map(|&v| f64::from(v)).collect();
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                let var =
                    col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
                (var.sqrt(), j)
            })
            .collect();
        sd_idx.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut expect: Vec<usize> = sd_idx[..2].iter().map(|&(_, j)| j).collect();
        expect.sort_unstable();
        assert_eq!(keep, expect);
    }

    #[test]
    fn filter_then_top_sd_is_order_stable() {
        let m = CountMatrix::with_default_ids(array![
            [0, 5, 1, 9],
            [9, 5, 2, 0],
            [3, 5, 1, 7],
            [8, 5, 2, 1]
        ])
        .unwrap();
        let (stage1, keep1) = filter_genes_iqr(&m, 0.5).unwrap();
        let (stage2, keep2) = select_top_sd(&stage1, 2).unwrap();
        let surviving: Vec<&str> = stage2.gene_ids().iter().map(|s| s.as_str()).collect();
        let original: Vec<&str> = keep2
            .iter()
            .map(|&j| m.gene_ids()[keep1[j]].as_str())
            .collect();
        assert_eq!(surviving, original);
        assert!(keep2.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn non_standard_layout_counts_are_normalized() {
        use ndarray::ShapeBuilder;
        // Column-major input: rows are not contiguous before normalization.
        let fortran =
            Array2::from_shape_vec((2, 3).f(), vec![1u32, 2, 3, 4, 5, 6]).unwrap();
        assert!(fortran.as_slice().is_none());
        let m = CountMatrix::with_default_ids(fortran).unwrap();
        assert_eq!(m.counts().row(0).as_slice(), Some(&[1u32, 3, 5][..]));
        let data = EmData::new(&m);
        let params = crate::params::ModelParams::Zip(crate::params::ZipParams {
            pi: ndarray::Array1::from_elem(1, 1.0),
            phi: ndarray::Array1::zeros(1),
            lambda: Array2::from_elem((1, 3), 2.0),
        });
        assert!(crate::kernels::mixture_loglik(&params, &data).is_ok());
    }

    #[test]
    fn size_factors_are_row_sums() {
        let m = CountMatrix::with_default_ids(array![[1, 2, 3], [1, 2, 3]]).unwrap();
        let sf = compute_size_factors(&m).unwrap();
        assert_eq!(sf.values().to_vec(), vec![6.0, 6.0]);
    }

    #[test]
    fn size_factors_match_row_sum_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let counts = Array2::from_shape_fn((10, 4), |_| rng.random_range(0..50u32) + 1);
        let m = CountMatrix::with_default_ids(counts.clone()).unwrap();
        let sf = compute_size_factors(&m).unwrap();
        for i in 0..10 {
            let oracle: f64 = (0..4).map(|j| f64::from(counts[[i, j]])).sum();
            assert_eq!(sf.values()[i], oracle);
        }
    }

    #[test]
    fn all_zero_cell_is_degenerate() {
        let m = CountMatrix::with_default_ids(array![[1, 2], [0, 0]]).unwrap();
        assert!(matches!(
            compute_size_factors(&m),
            Err(Error::DegenerateCell { cell: 1 })
        ));
    }
}
