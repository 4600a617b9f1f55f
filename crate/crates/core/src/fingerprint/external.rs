//! Agreement between a clustering and ground-truth classes. Reporting only.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExternalValidity {
    pub ari: f64,
    pub ami: f64,
    pub v_measure: f64,
}

struct Contingency {
    n: usize,
    table: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn relabel<T: Ord + Clone>(v: &[T]) -> Vec<usize> {
    let mut map = BTreeMap::new();
    for x in v {
        let next = map.len();
        map.entry(x.clone()).or_insert(next);
    }
    v.iter().map(|x| map[x]).collect()
}

fn contingency<T: Ord + Clone, U: Ord + Clone>(truth: &[T], pred: &[U]) -> Result<Contingency> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::data("external validity on zero samples"));
    }
    let t = relabel(truth);
    let p = relabel(pred);
    let r = t.iter().max().unwrap() + 1;
    let c = p.iter().max().unwrap() + 1;
    let mut table = vec![vec![0usize; c]; r];
    for (&a, &b) in t.iter().zip(&p) {
        table[a][b] += 1;
    }
    let rows = table.iter().map(|row| row.iter().sum()).collect();
    let cols = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    Ok(Contingency {
        n: truth.len(),
        table,
        rows,
        cols,
    })
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

fn mutual_information(ct: &Contingency) -> f64 {
    let n = ct.n as f64;
    let mut mi = 0.0;
    for (i, row) in ct.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij > 0 {
                let nij = nij as f64;
                mi += nij / n * (n * nij / (ct.rows[i] as f64 * ct.cols[j] as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

fn ari(ct: &Contingency) -> f64 {
    let index: f64 = ct.table.iter().flatten().map(|&v| comb2(v)).sum();
    let a: f64 = ct.rows.iter().map(|&v| comb2(v)).sum();
    let b: f64 = ct.cols.iter().map(|&v| comb2(v)).sum();
    let expected = a * b / comb2(ct.n);
    let max = 0.5 * (a + b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Expected mutual information under the hypergeometric model.
fn expected_mi(ct: &Contingency) -> f64 {
    let n = ct.n;
    let mut lnfact = vec![0.0f64; n + 1];
    for i in 1..=n {
        lnfact[i] = lnfact[i - 1] + (i as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &a in &ct.rows {
        for &b in &ct.cols {
            let lo = (a + b).saturating_sub(n).max(1);
            let hi = a.min(b);
            for nij in lo..=hi {
                let x = nij as f64;
                let term = x / nf * (nf * x / (a as f64 * b as f64)).ln();
                let log_p = lnfact[a] + lnfact[b] + lnfact[n - a] + lnfact[n - b]
                    - lnfact[n]
                    - lnfact[nij]
                    - lnfact[a - nij]
                    - lnfact[b - nij]
                    - lnfact[n + nij - a - b];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

fn ami(ct: &Contingency) -> f64 {
    if (ct.rows.len() == 1 && ct.cols.len() == 1) || (ct.rows.len() == ct.n && ct.cols.len() == ct.n) {
        return 1.0;
    }
    let mi = mutual_information(ct);
    let emi = expected_mi(ct);
    let norm = 0.5 * (entropy(&ct.rows, ct.n) + entropy(&ct.cols, ct.n));
    let mut denom = norm - emi;
    if denom < 0.0 {
        denom = denom.min(-f64::EPSILON);
    } else {
        denom = denom.max(f64::EPSILON);
    }
    (mi - emi) / denom
}

fn v_measure(ct: &Contingency) -> f64 {
    let h_c = entropy(&ct.rows, ct.n);
    let h_k = entropy(&ct.cols, ct.n);
    let mi = mutual_information(ct);
    let homogeneity = if h_c == 0.0 { 1.0 } else { mi / h_c };
    let completeness = if h_k == 0.0 { 1.0 } else { mi / h_k };
    if homogeneity + completeness == 0.0 {
        0.0
    } else {
        2.0 * homogeneity * completeness / (homogeneity + completeness)
    }
}

pub fn external_validity<T: Ord + Clone, U: Ord + Clone>(pred: &[U], truth: &[T]) -> Result<ExternalValidity> {
    let ct = contingency(truth, pred)?;
    Ok(ExternalValidity {
        ari: ari(&ct),
        ami: ami(&ct),
        v_measure: v_measure(&ct),
    })
}

pub fn adjusted_rand_index<T: Ord + Clone, U: Ord + Clone>(pred: &[U], truth: &[T]) -> Result<f64> {
    Ok(ari(&contingency(truth, pred)?))
}
