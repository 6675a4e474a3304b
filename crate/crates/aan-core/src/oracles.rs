//! Straight-line reference implementations of the classical models the
//! cells collapse to on special tree shapes. Everything here is plain
//! `Vec<f64>` arithmetic with no tape, no cells and no tree types, so the
//! equivalence checks compare two genuinely independent code paths.
//!
//! Dot products accumulate left to right over the concatenated input, the
//! same association order the tensor ops use, so chain equivalences hold
//! bitwise and not just to rounding.

/// `w` rows by columns, one dot per output unit, then tanh.
fn affine_tanh(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            acc.tanh()
        })
        .collect()
}

/// Elman recurrence `h_t = tanh(W [x_t, h_{t-1}])` from `h_0 = 0`,
/// returning the final state. `w` rows have width `x_width + state_width`.
pub fn rnn_forward(w: &[Vec<f64>], xs: &[Vec<f64>]) -> Vec<f64> {
    let state_width = w.len();
    let mut h = vec![0.0; state_width];
    for x in xs {
        let mut joint = x.clone();
        joint.extend_from_slice(&h);
        h = affine_tanh(w, &joint);
    }
    h
}

/// Feed-forward stack: `h = tanh(W_in x)`, then `h = tanh(W h)` per hidden
/// layer weight.
pub fn mlp_forward(w_in: &[Vec<f64>], hidden: &[Vec<Vec<f64>>], x: &[f64]) -> Vec<f64> {
    let mut h = affine_tanh(w_in, x);
    for w in hidden {
        h = affine_tanh(w, &h);
    }
    h
}

/// Column-wise max over rows; earliest row wins ties. Also reports the
/// winning row per column.
pub fn colmax(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let width = rows[0].len();
    let mut vals = rows[0].clone();
    let mut idx = vec![0usize; width];
    for (i, row) in rows.iter().enumerate().skip(1) {
        for j in 0..width {
            if row[j] > vals[j] {
                vals[j] = row[j];
                idx[j] = i;
            }
        }
    }
    (vals, idx)
}

/// A plain recursive tree for the recursive-network oracle.
pub struct RecTree {
    pub x: Vec<f64>,
    pub children: Vec<RecTree>,
}

/// Recursive network with a shared weight and column-max child combiner:
/// `h = tanh(W [x, colmax(children)])`, zero combiner at leaves.
pub fn recursive_forward(w: &[Vec<f64>], state_width: usize, t: &RecTree) -> Vec<f64> {
    let combined = if t.children.is_empty() {
        vec![0.0; state_width]
    } else {
        let rows: Vec<Vec<f64>> = t
            .children
            .iter()
            .map(|c| recursive_forward(w, state_width, c))
            .collect();
        colmax(&rows).0
    };
    let mut joint = t.x.clone();
    joint.extend_from_slice(&combined);
    affine_tanh(w, &joint)
}

/// Symmetric degree normalization with self-loops over a 0/1 adjacency.
pub fn normalized(adj: &[Vec<u8>]) -> Vec<Vec<f64>> {
    let n = adj.len();
    let mut tilde = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            tilde[i][j] = f64::from(adj[i][j]);
        }
        tilde[i][i] += 1.0;
    }
    let dinv: Vec<f64> = tilde
        .iter()
        .map(|row| 1.0 / row.iter().sum::<f64>().sqrt())
        .collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            out[i][j] = dinv[i] * tilde[i][j] * dinv[j];
        }
    }
    out
}

/// One graph-convolution block over a star of siblings: per-row encoder
/// `tanh(W_leaf x_i)`, normalized-adjacency mixing, column-max pooling,
/// then the output map `tanh(W_out g)`.
pub fn gcn_star_forward(
    w_leaf: &[Vec<f64>],
    w_out: &[Vec<f64>],
    xs: &[Vec<f64>],
    adj: &[Vec<u8>],
) -> Vec<f64> {
    let h: Vec<Vec<f64>> = xs.iter().map(|x| affine_tanh(w_leaf, x)).collect();
    let norm = normalized(adj);
    let n = xs.len();
    let width = h[0].len();
    let mut mixed = vec![vec![0.0; width]; n];
    for i in 0..n {
        for k in 0..n {
            for j in 0..width {
                mixed[i][j] += norm[i][k] * h[k][j];
            }
        }
    }
    let g = colmax(&mixed).0;
    affine_tanh(w_out, &g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rnn_single_step_is_tanh_of_input_block() {
        // one unit, x width 1: h1 = tanh(w0 * x + w1 * 0)
        let w = vec![vec![0.5, 2.0]];
        let h = rnn_forward(&w, &[vec![0.8]]);
        assert_eq!(h, vec![(0.5f64 * 0.8).tanh()]);
    }

    #[test]
    fn colmax_breaks_ties_toward_the_first_row() {
        let (vals, idx) = colmax(&[vec![1.0, 5.0], vec![1.0, 2.0]]);
        assert_eq!(vals, vec![1.0, 5.0]);
        assert_eq!(idx, vec![0, 0]);
    }

    #[test]
    fn recursive_leaf_uses_zero_combiner() {
        let w = vec![vec![1.0, 3.0], vec![-1.0, 7.0]];
        let t = RecTree {
            x: vec![0.25],
            children: vec![],
        };
        let h = recursive_forward(&w, 2, &t);
        assert_eq!(h, vec![(0.25f64).tanh(), (-0.25f64).tanh()]);
    }

    #[test]
    fn normalized_matches_worked_example() {
        let n = normalized(&[vec![0, 1, 0], vec![1, 0, 0], vec![0, 0, 0]]);
        let want = [
            vec![0.5, 0.5, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        for (row, wrow) in n.iter().zip(&want) {
            for (a, b) in row.iter().zip(wrow) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn mlp_composes_layers() {
        let w_in = vec![vec![1.0], vec![-1.0]];
        let w_h = vec![vec![1.0, 1.0], vec![0.0, 2.0]];
        let got = mlp_forward(&w_in, &[w_h], &[0.3]);
        let h0 = [(0.3f64).tanh(), (-0.3f64).tanh()];
        let want = [(h0[0] + h0[1]).tanh(), (2.0 * h0[1]).tanh()];
        assert_eq!(got, want.to_vec());
    }
}
