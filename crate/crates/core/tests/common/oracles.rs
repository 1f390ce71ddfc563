//! Slow reference implementations that the production code is checked against.

use std::collections::HashMap;

/// Best total of an injective row-to-column assignment, by exhaustive search.
pub fn best_by_permutation(m: &[Vec<u64>]) -> u64 {
    fn go(m: &[Vec<u64>], row: usize, used: &mut [bool]) -> u64 {
        if row == m.len() {
            return 0;
        }
        // The row may also stay unmatched.
        let mut best = go(m, row + 1, used);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.max(m[row][c] + go(m, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(m, 0, &mut vec![false; m[0].len()])
}

/// Edit distance straight from its recursive definition, memoized on the
/// prefix lengths.
pub fn recursive_levenshtein(a: &[usize], b: &[usize]) -> usize {
    fn go(a: &[usize], b: &[usize], memo: &mut HashMap<(usize, usize), usize>) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        if let Some(&d) = memo.get(&(a.len(), b.len())) {
            return d;
        }
        let (ra, rb) = (&a[..a.len() - 1], &b[..b.len() - 1]);
        let sub = go(ra, rb, memo) + usize::from(a[a.len() - 1] != b[b.len() - 1]);
        let d = sub.min(go(ra, b, memo) + 1).min(go(a, rb, memo) + 1);
        memo.insert((a.len(), b.len()), d);
        d
    }
    go(a, b, &mut HashMap::new())
}

/// Index of the nearest row of `protos`, first one on ties.
pub fn nearest(x: &[f64], protos: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, p) in protos.iter().enumerate() {
        let d: f64 = x.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Base-2 Jensen-Shannon distance of two probability vectors, times 100.
pub fn js_distance_direct(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let kl = |a: &[f64]| -> f64 { a.iter().zip(&m).filter(|(x, _)| **x > 0.0).map(|(x, y)| x * (x / y).log2()).sum() };
    100.0 * (0.5 * kl(p) + 0.5 * kl(q)).sqrt()
}

/// Number of maximum-size matchings that reach the best total. A count of
/// one means the optimal assignment is unique.
pub fn optimal_matchings(m: &[Vec<u64>]) -> usize {
    let size = m.len().min(m[0].len());
    let mut found: Vec<u64> = Vec::new();
    fn go(m: &[Vec<u64>], row: usize, used: &mut [bool], pairs: usize, total: u64, size: usize, found: &mut Vec<u64>) {
        if row == m.len() {
            if pairs == size {
                found.push(total);
            }
            return;
        }
        if m.len() - row > size - pairs {
            go(m, row + 1, used, pairs, total, size, found);
        }
        for c in 0..used.len() {
            if !used[c] && pairs < size {
                used[c] = true;
                go(m, row + 1, used, pairs + 1, total + m[row][c], size, found);
                used[c] = false;
            }
        }
    }
    go(m, 0, &mut vec![false; m[0].len()], 0, 0, size, &mut found);
    let best = found.iter().copied().max().unwrap_or(0);
    found.iter().filter(|&&t| t == best).count()
}
