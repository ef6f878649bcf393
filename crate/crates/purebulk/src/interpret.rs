//! Embedding interpretation: per-dimension gene correlation rankings, the
//! `.rnk` export consumed by preranked enrichment tools, top/bottom gene
//! signatures, and a dimension-uniqueness score with an empirical
//! permutation test.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExpressionMatrix, GeneId};
use crate::error::{Error, Result};

/// One embedding dimension's genes ordered by correlation, descending.
/// Ties in r break by gene ID, ascending, so the order is total.
#[derive(Debug, Clone, PartialEq)]
pub struct PrerankedList {
    pub dimension: usize,
    pub entries: Vec<(GeneId, f64)>,
    /// Genes whose expression was constant; their r is pinned to 0.
    pub constant_genes: Vec<GeneId>,
    /// True when the embedding dimension itself was constant, which pins
    /// every r in this list to 0.
    pub constant_dimension: bool,
}

/// Uniqueness of one dimension's extreme-gene set, with its empirical
/// p-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessResult {
    pub dimension: usize,
    pub uniqueness: f64,
    pub p_value: f64,
    pub n_permutations: usize,
    pub top_n: usize,
    pub seed: u64,
}

/// Extreme genes of one dimension: `top` holds the highest-r genes in rank
/// order, `bottom` the lowest-r genes starting from the most negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signature {
    pub dimension: usize,
    pub top: Vec<GeneId>,
    pub bottom: Vec<GeneId>,
}

/// Pearson correlation of every (embedding dimension, gene) pair, one
/// ranked list per dimension. A constant gene (or a constant dimension)
/// has no defined correlation; those r are set to 0 and flagged.
pub fn dim_gene_correlation(
    embedding: ArrayView2<'_, f64>,
    data: &ExpressionMatrix,
) -> Result<Vec<PrerankedList>> {
    let n = data.n_samples();
    if embedding.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} rows, expression matrix has {n} samples",
            embedding.nrows()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "correlation needs at least 3 samples, got {n}"
        )));
    }
    let nf = n as f64;
    let x = data.values();

    // center once; a zero sum of squares marks a constant column
    let gene_center: Vec<(Vec<f64>, f64)> = (0..data.n_genes())
        .map(|g| {
            let col = x.column(g);
            let mean = col.sum() / nf;
            let c: Vec<f64> = col.iter().map(|v| v - mean).collect();
            let ss = c.iter().map(|v| v * v).sum::<f64>();
            (c, ss)
        })
        .collect();
    let constant_genes: Vec<GeneId> = gene_center
        .iter()
        .enumerate()
        .filter(|(_, (_, ss))| *ss == 0.0)
        .map(|(g, _)| data.genes()[g].clone())
        .collect();

    let mut lists = Vec::with_capacity(embedding.ncols());
    for k in 0..embedding.ncols() {
        let dim = embedding.column(k);
        let mean = dim.sum() / nf;
        let d: Vec<f64> = dim.iter().map(|v| v - mean).collect();
        let d_ss = d.iter().map(|v| v * v).sum::<f64>();
        let constant_dimension = d_ss == 0.0;
        let mut entries: Vec<(GeneId, f64)> = gene_center
            .iter()
            .enumerate()
            .map(|(g, (c, ss))| {
                let r = if constant_dimension || *ss == 0.0 {
                    0.0
                } else {
                    let num: f64 = d.iter().zip(c).map(|(a, b)| a * b).sum();
                    num / (d_ss * ss).sqrt()
                };
                (data.genes()[g].clone(), r)
            })
            .collect();
        entries.sort_by(|(ga, ra), (gb, rb)| {
            rb.partial_cmp(ra)
                .expect("correlations are finite")
                .then_with(|| ga.cmp(gb))
        });
        lists.push(PrerankedList {
            dimension: k,
            entries,
            constant_genes: constant_genes.clone(),
            constant_dimension,
        });
    }
    Ok(lists)
}

/// Write the list in the two-column tab-separated `.rnk` convention:
/// `gene<TAB>score`, descending, no header.
pub fn export_rnk(list: &PrerankedList, path: &Path) -> Result<()> {
    for window in list.entries.windows(2) {
        if window[1].1 > window[0].1 {
            return Err(Error::InvalidInput(
                "list is not sorted descending by score".into(),
            ));
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (gene, score) in &list.entries {
        let id = gene.as_str();
        if id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidInput(format!(
                "illegal character in gene ID {id:?}"
            )));
        }
        if !score.is_finite() {
            return Err(Error::NonFinite(format!("score for gene {id}")));
        }
        writeln!(out, "{id}\t{score}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a `.rnk` file back as ordered (gene, score) pairs.
pub fn import_rnk(path: &Path) -> Result<Vec<(GeneId, f64)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(id), Some(score), None) = (fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Parse(format!(
                "{}:{}: expected exactly two tab-separated fields",
                path.display(),
                lineno + 1
            )));
        };
        let gene = GeneId::new(id)?;
        let score: f64 = score.parse().map_err(|_| {
            Error::Parse(format!(
                "{}:{}: bad score {score:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!(
                "{}:{}: score",
                path.display(),
                lineno + 1
            )));
        }
        if !seen.insert(gene.clone()) {
            return Err(Error::Parse(format!(
                "{}:{}: duplicate gene {}",
                path.display(),
                lineno + 1,
                gene.as_str()
            )));
        }
        entries.push((gene, score));
    }
    Ok(entries)
}

/// Extremes of one ranking: the first `n_top` and last `n_bottom` genes.
/// The two blocks must not overlap, so the list needs at least
/// `n_top + n_bottom` genes.
pub fn signature_genes(
    list: &PrerankedList,
    n_top: usize,
    n_bottom: usize,
) -> Result<Signature> {
    let len = list.entries.len();
    if len < n_top + n_bottom {
        return Err(Error::InvalidInput(format!(
            "list of {len} genes is too short for a {n_top}+{n_bottom} signature"
        )));
    }
    let top = list.entries[..n_top]
        .iter()
        .map(|(g, _)| g.clone())
        .collect();
    let bottom = list.entries[len - n_bottom..]
        .iter()
        .rev()
        .map(|(g, _)| g.clone())
        .collect();
    Ok(Signature {
        dimension: list.dimension,
        top,
        bottom,
    })
}

/// Deduplicated union of several signatures' genes, sorted by ID.
pub fn signature_union(signatures: &[Signature]) -> Vec<GeneId> {
    let mut set = BTreeSet::new();
    for s in signatures {
        set.extend(s.top.iter().cloned());
        set.extend(s.bottom.iter().cloned());
    }
    set.into_iter().collect()
}

/// The extreme-gene set of one list: indices of the `top_n` highest-r plus
/// `top_n` lowest-r genes, as positions in a shared gene index.
fn extreme_set(
    list: &PrerankedList,
    top_n: usize,
    index_of: &std::collections::HashMap<&GeneId, usize>,
) -> Vec<usize> {
    let len = list.entries.len();
    let mut set: Vec<usize> = Vec::with_capacity(2 * top_n);
    for (g, _) in list.entries[..top_n]
        .iter()
        .chain(&list.entries[len - top_n..])
    {
        set.push(index_of[g]);
    }
    set
}

/// Uniqueness of membership-index sets: the fraction of each set not found
/// in any other set.
fn uniqueness_of_sets(sets: &[Vec<usize>], universe: usize) -> Vec<f64> {
    let mut counts = vec![0u32; universe];
    for s in sets {
        for &g in s {
            counts[g] += 1;
        }
    }
    sets.iter()
        .map(|s| {
            let unique = s.iter().filter(|&&g| counts[g] == 1).count();
            unique as f64 / s.len() as f64
        })
        .collect()
}

fn check_lists(lists: &[PrerankedList], top_n: usize) -> Result<usize> {
    if lists.len() < 2 {
        return Err(Error::InvalidInput(
            "uniqueness needs at least 2 dimensions".into(),
        ));
    }
    let n_genes = lists[0].entries.len();
    if lists.iter().any(|l| l.entries.len() != n_genes) {
        return Err(Error::ShapeMismatch(
            "rankings cover different gene universes".into(),
        ));
    }
    if top_n == 0 || 2 * top_n > n_genes {
        return Err(Error::InvalidInput(format!(
            "top_n = {top_n} needs 2*top_n <= {n_genes} genes"
        )));
    }
    Ok(n_genes)
}

/// Per-dimension uniqueness: with S_k the set of the `top_n` highest plus
/// `top_n` lowest correlated genes of dimension k, u_k is the fraction of
/// S_k appearing in no other dimension's set.
pub fn uniqueness_scores(lists: &[PrerankedList], top_n: usize) -> Result<Vec<f64>> {
    let n_genes = check_lists(lists, top_n)?;
    let index_of: std::collections::HashMap<&GeneId, usize> = lists[0]
        .entries
        .iter()
        .enumerate()
        .map(|(i, (g, _))| (g, i))
        .collect();
    if index_of.len() != n_genes {
        return Err(Error::InvalidInput("duplicate gene in ranking".into()));
    }
    let sets: Vec<Vec<usize>> = lists
        .iter()
        .map(|l| extreme_set(l, top_n, &index_of))
        .collect();
    Ok(uniqueness_of_sets(&sets, n_genes))
}

/// Empirical test of each observed u_k against a null where every
/// dimension's extreme set is an independent uniform draw of the same size.
///
/// Each permutation yields one null uniqueness value (the first drawn
/// set's, exchangeable with any other); every dimension's observed u_k is
/// counted against this shared null sample, which makes p monotone
/// non-increasing in u_k by construction. p_k = (1 + #{null u >= u_k}) /
/// (n_perm + 1). Permutations run on independent RNG streams keyed by their
/// index, so the result is identical under any parallel schedule.
pub fn uniqueness_permutation_test(
    lists: &[PrerankedList],
    top_n: usize,
    n_perm: usize,
    seed: u64,
) -> Result<Vec<UniquenessResult>> {
    if n_perm < 1 {
        return Err(Error::InvalidInput("need at least 1 permutation".into()));
    }
    let n_genes = check_lists(lists, top_n)?;
    let observed = uniqueness_scores(lists, top_n)?;
    let d = lists.len();
    let set_size = 2 * top_n;

    let null_u: Vec<f64> = (0..n_perm as u64)
        .into_par_iter()
        .map(|perm| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(perm);
            let sets: Vec<Vec<usize>> = (0..d)
                .map(|_| rand::seq::index::sample(&mut rng, n_genes, set_size).into_vec())
                .collect();
            uniqueness_of_sets(&sets, n_genes)[0]
        })
        .collect();

    Ok(observed
        .iter()
        .enumerate()
        .map(|(k, &u)| {
            let exceed = null_u.iter().filter(|&&nu| nu >= u).count();
            UniquenessResult {
                dimension: k,
                uniqueness: u,
                p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
                n_permutations: n_perm,
                top_n,
                seed,
            }
        })
        .collect())
}
