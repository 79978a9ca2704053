//! Homogeneous item-item graphs: the content graph built from latent
//! feature similarity, the collaborative graph built from co-occurrence
//! counts, and their per-item soft-attention fusion.
//!
//! Both source graphs are row-normalized before fusion so that the fused
//! rows are convex combinations and downstream propagation is a weighted
//! neighborhood average.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::data::InteractionTable;
use crate::error::{Error, Result};
use crate::mat::{norm2, DenseMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Content,
    Collaborative,
    Fused,
}

impl GraphKind {
    fn name(self) -> &'static str {
        match self {
            GraphKind::Content => "content",
            GraphKind::Collaborative => "collaborative",
            GraphKind::Fused => "fused",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "content" => Some(GraphKind::Content),
            "collaborative" => Some(GraphKind::Collaborative),
            "fused" => Some(GraphKind::Fused),
            _ => None,
        }
    }
}

/// Row-indexed weighted item-item adjacency. Rows hold `(neighbor, weight)`
/// entries sorted by neighbor index; no self-loops; weights non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseItemGraph {
    pub n: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub kind: GraphKind,
}

impl SparseItemGraph {
    pub fn empty(n: usize, kind: GraphKind) -> Self {
        Self {
            n,
            rows: vec![Vec::new(); n],
            kind,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].iter().map(|&(_, w)| w).sum()
    }
}

/// Dense pairwise cosine similarity between rows of `z`. Zero-norm rows
/// yield zero similarity everywhere; the diagonal of nonzero rows is 1.
pub fn cosine_rows(z: &DenseMatrix) -> DenseMatrix {
    let n = z.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm2(z.row(i))).collect();
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        if norms[i] == 0.0 {
            continue;
        }
        let zi = z.row(i);
        for j in i..n {
            if norms[j] == 0.0 {
                continue;
            }
            let v = crate::mat::dot(zi, z.row(j)) / (norms[i] * norms[j]);
            m.row_mut(i)[j] = v;
            m.row_mut(j)[i] = v;
        }
    }
    m
}

/// Orders candidate columns by similarity descending, ties toward the
/// lower column index.
fn rank_desc(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.partial_cmp(&a.1)
        .expect("similarity values must be finite")
        .then(a.0.cmp(&b.0))
}

/// Keeps the k most similar off-diagonal entries per row, clamps kept
/// weights at zero and drops the non-positive ones.
pub fn topk_sparsify(m: &DenseMatrix, k: usize) -> Result<SparseItemGraph> {
    let n = m.rows();
    if k == 0 || k + 1 > n {
        return Err(Error::BadNeighborCount { k, n });
    }
    let mut g = SparseItemGraph::empty(n, GraphKind::Content);
    for i in 0..n {
        let mut cands: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, m.row(i)[j]))
            .collect();
        cands.sort_unstable_by(rank_desc);
        let mut row: Vec<(usize, f64)> = cands
            .into_iter()
            .take(k)
            .filter(|&(_, w)| w > 0.0)
            .collect();
        row.sort_unstable_by_key(|&(j, _)| j);
        g.rows[i] = row;
    }
    Ok(g)
}

/// Top-k neighbor supports from latent features, processing row blocks so
/// the dense similarity matrix never fully materializes. Selection is
/// identical to [`topk_sparsify`] over [`cosine_rows`].
pub fn topk_support(z: &DenseMatrix, k: usize, block: usize) -> Result<Vec<Vec<usize>>> {
    let n = z.rows();
    if k == 0 || k + 1 > n {
        return Err(Error::BadNeighborCount { k, n });
    }
    let norms: Vec<f64> = (0..n).map(|i| norm2(z.row(i))).collect();
    let mut support = vec![Vec::new(); n];
    let block = block.max(1);
    for start in (0..n).step_by(block) {
        let end = (start + block).min(n);
        for i in start..end {
            if norms[i] == 0.0 {
                continue;
            }
            let zi = z.row(i);
            let mut cands: Vec<(usize, f64)> = Vec::with_capacity(n - 1);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let sim = if norms[j] == 0.0 {
                    0.0
                } else {
                    crate::mat::dot(zi, z.row(j)) / (norms[i] * norms[j])
                };
                cands.push((j, sim));
            }
            if cands.len() > k {
                cands.select_nth_unstable_by(k - 1, rank_desc);
                cands.truncate(k);
            }
            let mut sel: Vec<usize> = cands
                .into_iter()
                .filter(|&(_, w)| w > 0.0)
                .map(|(j, _)| j)
                .collect();
            sel.sort_unstable();
            support[i] = sel;
        }
    }
    Ok(support)
}

/// Recomputes clamped cosine weights on a fixed support. Entries whose
/// similarity is not strictly positive are dropped; gradients through the
/// clamp are zero there anyway.
pub fn content_weights(z: &DenseMatrix, support: &[Vec<usize>]) -> SparseItemGraph {
    let n = z.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm2(z.row(i))).collect();
    let mut g = SparseItemGraph::empty(n, GraphKind::Content);
    for (i, neigh) in support.iter().enumerate() {
        if norms[i] == 0.0 {
            continue;
        }
        let zi = z.row(i);
        let row: Vec<(usize, f64)> = neigh
            .iter()
            .filter(|&&j| norms[j] > 0.0)
            .map(|&j| (j, crate::mat::dot(zi, z.row(j)) / (norms[i] * norms[j])))
            .filter(|&(_, w)| w > 0.0)
            .collect();
        g.rows[i] = row;
    }
    g
}

/// Backward of [`content_weights`]: pushes gradients on the retained edge
/// weights through the cosine onto the latent features.
pub fn content_weights_backward(
    z: &DenseMatrix,
    raw: &SparseItemGraph,
    grad_raw: &[Vec<f64>],
    grad_z: &mut DenseMatrix,
) {
    let n = z.rows();
    let norms: Vec<f64> = (0..n).map(|i| norm2(z.row(i))).collect();
    for i in 0..n {
        for (&(j, w), &g) in raw.rows[i].iter().zip(&grad_raw[i]) {
            if g == 0.0 {
                continue;
            }
            let (ni, nj) = (norms[i], norms[j]);
            let inv = 1.0 / (ni * nj);
            for d in 0..z.cols() {
                let zi = z.row(i)[d];
                let zj = z.row(j)[d];
                grad_z.row_mut(i)[d] += g * (zj * inv - w * zi / (ni * ni));
                grad_z.row_mut(j)[d] += g * (zi * inv - w * zj / (nj * nj));
            }
        }
    }
}

/// Collaborative item graph: edge weight is the co-occurrence count
/// (users interacting with both items) normalized by the global maximum.
pub fn co_occurrence(train: &InteractionTable, n_items: usize) -> SparseItemGraph {
    let n_users = train.pairs.iter().map(|&(u, _)| u + 1).max().unwrap_or(0);
    let by_user = train.items_by_user(n_users);

    let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
    for items in &by_user {
        for (a, &i) in items.iter().enumerate() {
            for &j in &items[a + 1..] {
                if i == j {
                    continue;
                }
                let key = if i < j { (i, j) } else { (j, i) };
                *counts.entry(key).or_insert(0) += 1;
            }
        }
    }

    let c_max = counts.values().copied().max().unwrap_or(0);
    let mut g = SparseItemGraph::empty(n_items, GraphKind::Collaborative);
    if c_max == 0 {
        return g;
    }
    for (&(i, j), &c) in &counts {
        let w = c as f64 / c_max as f64;
        g.rows[i].push((j, w));
        g.rows[j].push((i, w));
    }
    for row in &mut g.rows {
        row.sort_unstable_by_key(|&(j, _)| j);
    }
    g
}

/// Divides each nonempty row by its sum; empty rows stay empty.
pub fn row_normalize(g: &SparseItemGraph) -> SparseItemGraph {
    let mut out = g.clone();
    for row in &mut out.rows {
        let s: f64 = row.iter().map(|&(_, w)| w).sum();
        if s > 0.0 {
            for (_, w) in row.iter_mut() {
                *w /= s;
            }
        }
    }
    out
}

/// Backward of [`row_normalize`] onto the raw weights.
pub fn row_normalize_backward(raw: &SparseItemGraph, grad_norm: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut grad_raw: Vec<Vec<f64>> = raw
        .rows
        .iter()
        .map(|row| vec![0.0; row.len()])
        .collect();
    for i in 0..raw.n {
        let row = &raw.rows[i];
        if row.is_empty() {
            continue;
        }
        let s: f64 = row.iter().map(|&(_, w)| w).sum();
        if s <= 0.0 {
            continue;
        }
        let weighted: f64 = grad_norm[i]
            .iter()
            .zip(row)
            .map(|(&g, &(_, w))| g * w / s)
            .sum();
        for (out, &g) in grad_raw[i].iter_mut().zip(&grad_norm[i]) {
            *out = (g - weighted) / s;
        }
    }
    grad_raw
}

/// Per-item two-way softmax over trainable logits; column 0 weighs the
/// content source, column 1 the collaborative source.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub logits: DenseMatrix,
}

impl AttentionParams {
    pub fn zeros(n_items: usize) -> Self {
        Self {
            logits: DenseMatrix::zeros(n_items, 2),
        }
    }

    pub fn n_items(&self) -> usize {
        self.logits.rows()
    }

    /// `(content weight, collaborative weight)` for item `i`.
    pub fn weights(&self, i: usize) -> (f64, f64) {
        let row = self.logits.row(i);
        softmax2(row[0], row[1])
    }
}

pub fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

fn fuse_rows(
    em: &SparseItemGraph,
    ec: &SparseItemGraph,
    weight_of: impl Fn(usize) -> (f64, f64),
) -> Result<SparseItemGraph> {
    if em.n != ec.n {
        return Err(Error::ShapeMismatch(format!(
            "content graph has {} items, collaborative graph has {}",
            em.n, ec.n
        )));
    }
    let mut out = SparseItemGraph::empty(em.n, GraphKind::Fused);
    for i in 0..em.n {
        let m_row = &em.rows[i];
        let c_row = &ec.rows[i];
        out.rows[i] = match (m_row.is_empty(), c_row.is_empty()) {
            (true, true) => Vec::new(),
            // one empty source: attention mass collapses onto the other,
            // keeping the row stochastic
            (false, true) => m_row.clone(),
            (true, false) => c_row.clone(),
            (false, false) => {
                let (am, ac) = weight_of(i);
                merge_weighted(m_row, c_row, am, ac)
            }
        };
    }
    Ok(out)
}

/// Weighted union-support merge of two sorted sparse rows.
fn merge_weighted(a: &[(usize, f64)], b: &[(usize, f64)], wa: f64, wb: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut x, mut y) = (0, 0);
    while x < a.len() || y < b.len() {
        match (a.get(x), b.get(y)) {
            (Some(&(ja, va)), Some(&(jb, vb))) => {
                if ja == jb {
                    out.push((ja, wa * va + wb * vb));
                    x += 1;
                    y += 1;
                } else if ja < jb {
                    out.push((ja, wa * va));
                    x += 1;
                } else {
                    out.push((jb, wb * vb));
                    y += 1;
                }
            }
            (Some(&(ja, va)), None) => {
                out.push((ja, wa * va));
                x += 1;
            }
            (None, Some(&(jb, vb))) => {
                out.push((jb, wb * vb));
                y += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    out
}

/// Soft-attention fusion of the row-normalized content and collaborative
/// graphs: per item, a learned convex combination of the two rows.
pub fn attention_fuse(
    em: &SparseItemGraph,
    ec: &SparseItemGraph,
    params: &AttentionParams,
) -> Result<SparseItemGraph> {
    fuse_rows(em, ec, |i| params.weights(i))
}

/// Fixed equal-weight fusion used by the no-attention ablation.
pub fn equal_fuse(em: &SparseItemGraph, ec: &SparseItemGraph) -> Result<SparseItemGraph> {
    fuse_rows(em, ec, |_| (0.5, 0.5))
}

/// Backward of [`attention_fuse`] / [`equal_fuse`].
///
/// `grad_fused[i]` aligns with `fused.rows[i]`. Returns gradients aligned
/// with `em.rows`; when `params`/`grad_logits` are given, also accumulates
/// attention-logit gradients through the softmax.
pub fn fuse_backward(
    em: &SparseItemGraph,
    ec: &SparseItemGraph,
    fused: &SparseItemGraph,
    grad_fused: &[Vec<f64>],
    params: Option<&AttentionParams>,
    mut grad_logits: Option<&mut DenseMatrix>,
) -> Vec<Vec<f64>> {
    let mut grad_em: Vec<Vec<f64>> = em.rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for i in 0..em.n {
        let m_row = &em.rows[i];
        let c_row = &ec.rows[i];
        let f_row = &fused.rows[i];
        let g_row = &grad_fused[i];
        match (m_row.is_empty(), c_row.is_empty()) {
            (true, _) => {}
            (false, true) => {
                // fused row is the content row verbatim
                grad_em[i].copy_from_slice(g_row);
            }
            (false, false) => {
                let (am, ac) = match params {
                    Some(p) => p.weights(i),
                    None => (0.5, 0.5),
                };
                // walk the union row once, tracking positions in both sources
                let (mut x, mut y) = (0, 0);
                let mut g_am = 0.0;
                let mut g_ac = 0.0;
                for (&(j, _), &g) in f_row.iter().zip(g_row) {
                    if x < m_row.len() && m_row[x].0 == j {
                        grad_em[i][x] += am * g;
                        g_am += g * m_row[x].1;
                        x += 1;
                    }
                    if y < c_row.len() && c_row[y].0 == j {
                        g_ac += g * c_row[y].1;
                        y += 1;
                    }
                }
                if params.is_some() {
                    if let Some(gl) = grad_logits.as_deref_mut() {
                        let s = am * g_am + ac * g_ac;
                        gl.row_mut(i)[0] += am * (g_am - s);
                        gl.row_mut(i)[1] += ac * (g_ac - s);
                    }
                }
            }
        }
    }
    grad_em
}

/// Writes the debug dump format: a `# kind=<tag> n=<n>` header followed by
/// one `i<TAB>j<TAB>weight` line per edge.
pub fn write_graph_dump(g: &SparseItemGraph, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "# kind={} n={}", g.kind.name(), g.n)?;
    for (i, row) in g.rows.iter().enumerate() {
        for &(j, weight) in row {
            writeln!(w, "{i}\t{j}\t{weight}")?;
        }
    }
    Ok(())
}

pub fn read_graph_dump(r: impl BufRead) -> Result<SparseItemGraph> {
    let mut lines = r.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::GraphDump {
        line: 1,
        reason: "missing header".into(),
    })?;
    let header = header.map_err(|e| Error::GraphDump {
        line: 1,
        reason: e.to_string(),
    })?;
    let parse_header = || -> Option<(GraphKind, usize)> {
        let rest = header.strip_prefix("# kind=")?;
        let (kind, n) = rest.split_once(" n=")?;
        Some((GraphKind::from_name(kind)?, n.parse().ok()?))
    };
    let (kind, n) = parse_header().ok_or(Error::GraphDump {
        line: 1,
        reason: format!("bad header: {header}"),
    })?;

    let mut g = SparseItemGraph::empty(n, kind);
    for (idx, line) in lines {
        let line = line.map_err(|e| Error::GraphDump {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if line.is_empty() {
            continue;
        }
        let mut it = line.split('\t');
        let bad = || Error::GraphDump {
            line: idx + 1,
            reason: format!("bad edge line: {line}"),
        };
        let i: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let j: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let w: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if i >= n || j >= n {
            return Err(bad());
        }
        g.rows[i].push((j, w));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
        DenseMatrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn cosine_basics() {
        let z = DenseMatrix::from_vec(
            3,
            2,
            vec![
                1.0, 0.0, //
                2.0, 0.0, // same direction
                0.0, 3.0, // orthogonal
            ],
        );
        let m = cosine_rows(&z);
        assert!((m.row(0)[1] - 1.0).abs() < 1e-12);
        assert!(m.row(0)[2].abs() < 1e-12);
        assert!((m.row(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_rows_give_zero_similarity() {
        let z = DenseMatrix::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let m = cosine_rows(&z);
        assert_eq!(m.row(0), &[0.0, 0.0]);
        assert_eq!(m.row(1)[0], 0.0);
    }

    #[test]
    fn cosine_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_matrix(&mut rng, 6, 4);
        let m = cosine_rows(&z);
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = (0..4).map(|d| z.row(i)[d] * z.row(j)[d]).sum();
                let ni = (0..4).map(|d| z.row(i)[d].powi(2)).sum::<f64>().sqrt();
                let nj = (0..4).map(|d| z.row(j)[d].powi(2)).sum::<f64>().sqrt();
                assert!((m.row(i)[j] - dot / (ni * nj)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn topk_direct_selection() {
        let m = DenseMatrix::from_vec(
            3,
            3,
            vec![
                1.0, 0.9, 0.5, //
                0.9, 1.0, 0.1, //
                0.5, 0.1, 1.0,
            ],
        );
        let g = topk_sparsify(&m, 2).unwrap();
        assert_eq!(g.rows[0], vec![(1, 0.9), (2, 0.5)]);
        assert_eq!(g.rows[1], vec![(0, 0.9), (2, 0.1)]);
    }

    #[test]
    fn topk_tie_breaks_toward_lower_index() {
        let m = DenseMatrix::from_vec(
            3,
            3,
            vec![
                1.0, 0.5, 0.5, //
                0.5, 1.0, 0.5, //
                0.5, 0.5, 1.0,
            ],
        );
        let g = topk_sparsify(&m, 1).unwrap();
        assert_eq!(g.rows[0], vec![(1, 0.5)]);
        assert_eq!(g.rows[1], vec![(0, 0.5)]);
        assert_eq!(g.rows[2], vec![(0, 0.5)]);
    }

    #[test]
    fn topk_clamps_negatives() {
        let m = DenseMatrix::from_vec(2, 2, vec![1.0, -0.4, -0.4, 1.0]);
        let g = topk_sparsify(&m, 1).unwrap();
        assert!(g.rows[0].is_empty());
        assert!(g.rows[1].is_empty());
    }

    #[test]
    fn topk_out_of_range_k() {
        let m = DenseMatrix::zeros(3, 3);
        assert!(matches!(
            topk_sparsify(&m, 0),
            Err(Error::BadNeighborCount { .. })
        ));
        assert!(matches!(
            topk_sparsify(&m, 3),
            Err(Error::BadNeighborCount { .. })
        ));
    }

    #[test]
    fn topk_matches_full_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let z = random_matrix(&mut rng, 20, 5);
        let m = cosine_rows(&z);
        let k = 10;
        let g = topk_sparsify(&m, k).unwrap();
        for i in 0..20 {
            // brute-force selector: sort all off-diagonal entries
            let mut all: Vec<(usize, f64)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| (j, m.row(i)[j]))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let mut expect: Vec<(usize, f64)> = all
                .into_iter()
                .take(k)
                .filter(|&(_, w)| w > 0.0)
                .collect();
            expect.sort_by_key(|&(j, _)| j);
            assert_eq!(g.rows[i], expect, "row {i}");
        }
    }

    #[test]
    fn blocked_support_matches_dense_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z = random_matrix(&mut rng, 33, 7);
        let dense = topk_sparsify(&cosine_rows(&z), 6).unwrap();
        for block in [1, 4, 33, 100] {
            let support = topk_support(&z, 6, block).unwrap();
            for i in 0..33 {
                let expect: Vec<usize> = dense.rows[i].iter().map(|&(j, _)| j).collect();
                assert_eq!(support[i], expect, "row {i}, block {block}");
            }
        }
    }

    #[test]
    fn content_weights_recompute_cosines_on_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_matrix(&mut rng, 12, 4);
        let support = topk_support(&z, 5, 4).unwrap();
        let g = content_weights(&z, &support);
        let m = cosine_rows(&z);
        for i in 0..12 {
            for &(j, w) in &g.rows[i] {
                assert!((w - m.row(i)[j]).abs() < 1e-12);
                assert!(w > 0.0);
            }
        }
    }

    #[test]
    fn co_occurrence_toy() {
        // two users both consuming items 0 and 1
        let table = InteractionTable {
            pairs: vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)],
            split: Split::Train,
        };
        let g = co_occurrence(&table, 3);
        assert_eq!(g.rows[0], vec![(1, 1.0)]);
        assert_eq!(g.rows[1], vec![(0, 1.0)]);
        assert!(g.rows[2].is_empty());
    }

    #[test]
    fn co_occurrence_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut table = InteractionTable::new(Split::Train);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let u = rng.random_range(0..30usize);
            let i = rng.random_range(0..15usize);
            if seen.insert((u, i)) {
                table.pairs.push((u, i));
            }
        }
        let g = co_occurrence(&table, 15);

        // brute-force count over all (user, i, j) combinations
        let mut counts = vec![vec![0u64; 15]; 15];
        for u in 0..30 {
            for i in 0..15 {
                for j in 0..15 {
                    if i != j && seen.contains(&(u, i)) && seen.contains(&(u, j)) {
                        counts[i][j] += 1;
                    }
                }
            }
        }
        let c_max = counts.iter().flatten().copied().max().unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let got = g.rows[i]
                    .iter()
                    .find(|&&(jj, _)| jj == j)
                    .map(|&(_, w)| w)
                    .unwrap_or(0.0);
                let expect = if counts[i][j] == 0 {
                    0.0
                } else {
                    counts[i][j] as f64 / c_max as f64
                };
                assert!((got - expect).abs() < 1e-12, "({i},{j})");
            }
        }
        // symmetry and unit maximum
        let mut max_w: f64 = 0.0;
        for i in 0..15 {
            for &(j, w) in &g.rows[i] {
                let back = g.rows[j].iter().find(|&&(jj, _)| jj == i).unwrap().1;
                assert_eq!(w, back);
                max_w = max_w.max(w);
            }
        }
        assert_eq!(max_w, 1.0);
    }

    #[test]
    fn row_normalize_basics() {
        let mut g = SparseItemGraph::empty(3, GraphKind::Content);
        g.rows[0] = vec![(1, 2.0), (2, 2.0)];
        let n = row_normalize(&g);
        assert_eq!(n.rows[0], vec![(1, 0.5), (2, 0.5)]);
        assert!(n.rows[1].is_empty());
    }

    #[test]
    fn row_normalize_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut g = SparseItemGraph::empty(40, GraphKind::Content);
        for i in 0..40 {
            for j in 0..40 {
                if i != j && rng.random_range(0.0..1.0) < 0.2 {
                    g.rows[i].push((j, rng.random_range(0.01..5.0)));
                }
            }
        }
        let n = row_normalize(&g);
        for i in 0..40 {
            if !n.rows[i].is_empty() {
                assert!((n.row_sum(i) - 1.0).abs() < 1e-9);
            }
        }
    }

    fn random_row_stochastic(rng: &mut ChaCha8Rng, n: usize, kind: GraphKind) -> SparseItemGraph {
        let mut g = SparseItemGraph::empty(n, kind);
        for i in 0..n {
            for j in 0..n {
                if i != j && rng.random_range(0.0..1.0) < 0.3 {
                    g.rows[i].push((j, rng.random_range(0.01..1.0)));
                }
            }
        }
        row_normalize(&g)
    }

    #[test]
    fn attention_equal_logits_is_half_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let em = random_row_stochastic(&mut rng, 10, GraphKind::Content);
        let ec = random_row_stochastic(&mut rng, 10, GraphKind::Collaborative);
        let params = AttentionParams::zeros(10);
        let fused = attention_fuse(&em, &ec, &params).unwrap();
        let equal = equal_fuse(&em, &ec).unwrap();
        assert_eq!(fused, equal);
    }

    #[test]
    fn attention_empty_collaborative_passes_content_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let em = random_row_stochastic(&mut rng, 8, GraphKind::Content);
        let ec = SparseItemGraph::empty(8, GraphKind::Collaborative);
        let params = AttentionParams::zeros(8);
        let fused = attention_fuse(&em, &ec, &params).unwrap();
        assert_eq!(fused.rows, em.rows);
    }

    #[test]
    fn attention_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let em = random_row_stochastic(&mut rng, 25, GraphKind::Content);
        let ec = random_row_stochastic(&mut rng, 25, GraphKind::Collaborative);
        let mut params = AttentionParams::zeros(25);
        for v in params.logits.as_mut_slice() {
            *v = rng.random_range(-2.0..2.0);
        }
        let fused = attention_fuse(&em, &ec, &params).unwrap();
        for i in 0..25 {
            let empty = em.rows[i].is_empty() && ec.rows[i].is_empty();
            if !empty {
                assert!((fused.row_sum(i) - 1.0).abs() < 1e-9, "row {i}");
            }
        }
    }

    #[test]
    fn attention_softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let em = random_row_stochastic(&mut rng, 12, GraphKind::Content);
        let ec = random_row_stochastic(&mut rng, 12, GraphKind::Collaborative);
        let mut params = AttentionParams::zeros(12);
        for v in params.logits.as_mut_slice() {
            *v = rng.random_range(-1.0..1.0);
        }
        let fused = attention_fuse(&em, &ec, &params).unwrap();
        let mut shifted = params.clone();
        for i in 0..12 {
            let row = shifted.logits.row_mut(i);
            row[0] += 3.25;
            row[1] += 3.25;
        }
        let fused_shifted = attention_fuse(&em, &ec, &shifted).unwrap();
        for i in 0..12 {
            for (a, b) in fused.rows[i].iter().zip(&fused_shifted.rows[i]) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_dense_combination_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 15;
        let em = random_row_stochastic(&mut rng, n, GraphKind::Content);
        let ec = random_row_stochastic(&mut rng, n, GraphKind::Collaborative);
        let mut params = AttentionParams::zeros(n);
        for v in params.logits.as_mut_slice() {
            *v = rng.random_range(-2.0..2.0);
        }
        let fused = attention_fuse(&em, &ec, &params).unwrap();

        // dense oracle
        let to_dense = |g: &SparseItemGraph| {
            let mut d = DenseMatrix::zeros(n, n);
            for i in 0..n {
                for &(j, w) in &g.rows[i] {
                    d.row_mut(i)[j] = w;
                }
            }
            d
        };
        let dm = to_dense(&em);
        let dc = to_dense(&ec);
        for i in 0..n {
            let (am, ac) = params.weights(i);
            let m_empty = em.rows[i].is_empty();
            let c_empty = ec.rows[i].is_empty();
            for j in 0..n {
                let expect = match (m_empty, c_empty) {
                    (true, true) => 0.0,
                    (false, true) => dm.row(i)[j],
                    (true, false) => dc.row(i)[j],
                    (false, false) => am * dm.row(i)[j] + ac * dc.row(i)[j],
                };
                let got = fused.rows[i]
                    .iter()
                    .find(|&&(jj, _)| jj == j)
                    .map(|&(_, w)| w)
                    .unwrap_or(0.0);
                assert!((got - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn attention_size_mismatch_rejected() {
        let em = SparseItemGraph::empty(3, GraphKind::Content);
        let ec = SparseItemGraph::empty(4, GraphKind::Collaborative);
        assert!(matches!(
            attention_fuse(&em, &ec, &AttentionParams::zeros(3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// FD check of the full content-graph gradient chain: latent features
    /// -> clamped cosine weights on a fixed support -> row normalization
    /// -> attention fusion -> scalar loss.
    #[test]
    fn graph_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 7;
        let d = 4;
        let z0 = random_matrix(&mut rng, n, d);
        let support = topk_support(&z0, 3, 2).unwrap();
        let ec = random_row_stochastic(&mut rng, n, GraphKind::Collaborative);
        let mut params = AttentionParams::zeros(n);
        for v in params.logits.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
        let c = random_matrix(&mut rng, n, n); // loss coefficients

        let loss = |z: &DenseMatrix, p: &AttentionParams| -> f64 {
            let raw = content_weights(z, &support);
            let em = row_normalize(&raw);
            let fused = attention_fuse(&em, &ec, p).unwrap();
            let mut l = 0.0;
            for i in 0..n {
                for &(j, w) in &fused.rows[i] {
                    l += c.row(i)[j] * w;
                }
            }
            l
        };

        // analytic gradients
        let raw = content_weights(&z0, &support);
        let em = row_normalize(&raw);
        let fused = attention_fuse(&em, &ec, &params).unwrap();
        let grad_fused: Vec<Vec<f64>> = fused
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().map(|&(j, _)| c.row(i)[j]).collect())
            .collect();
        let mut grad_logits = DenseMatrix::zeros(n, 2);
        let grad_em = fuse_backward(&em, &ec, &fused, &grad_fused, Some(&params), Some(&mut grad_logits));
        let grad_raw = row_normalize_backward(&raw, &grad_em);
        let mut grad_z = DenseMatrix::zeros(n, d);
        content_weights_backward(&z0, &raw, &grad_raw, &mut grad_z);

        let h = 1e-6;
        let mut z = z0.clone();
        for idx in 0..n * d {
            let orig = z.as_slice()[idx];
            z.as_mut_slice()[idx] = orig + h;
            let up = loss(&z, &params);
            z.as_mut_slice()[idx] = orig - h;
            let down = loss(&z, &params);
            z.as_mut_slice()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad_z.as_slice()[idx];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "z[{idx}]: analytic {a} vs fd {fd}"
            );
        }
        let mut p = params.clone();
        for idx in 0..n * 2 {
            let orig = p.logits.as_slice()[idx];
            p.logits.as_mut_slice()[idx] = orig + h;
            let up = loss(&z0, &p);
            p.logits.as_mut_slice()[idx] = orig - h;
            let down = loss(&z0, &p);
            p.logits.as_mut_slice()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grad_logits.as_slice()[idx];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4,
                "logit[{idx}]: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn graph_dump_roundtrip() {
        let mut g = SparseItemGraph::empty(4, GraphKind::Fused);
        g.rows[0] = vec![(1, 0.25), (3, 0.75)];
        g.rows[2] = vec![(0, 1.0)];
        let mut buf = Vec::new();
        write_graph_dump(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# kind=fused n=4\n"));
        let back = read_graph_dump(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back, g);
    }
}
