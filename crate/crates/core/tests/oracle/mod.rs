//! Naive reference implementations, written from the textbook equations
//! with plain nested loops and no code shared with the library.

/// `[batch][row][col][channel]`
pub type Grid = Vec<Vec<Vec<Vec<f64>>>>;

pub fn zeros(b: usize, r: usize, c: usize, ch: usize) -> Grid {
    vec![vec![vec![vec![0.0; ch]; c]; r]; b]
}

/// Kernel `[ki][kj][cin][cout]` applied as cross-correlation with zero
/// padding of one.
pub fn conv3x3(x: &Grid, w: &[Vec<Vec<Vec<f64>>>], cout: usize) -> Grid {
    let (b, r, c) = (x.len(), x[0].len(), x[0][0].len());
    let cin = x[0][0][0].len();
    let mut y = zeros(b, r, c, cout);
    for n in 0..b {
        for i in 0..r {
            for j in 0..c {
                for o in 0..cout {
                    let mut acc = 0.0;
                    for (di, wrow) in w.iter().enumerate() {
                        for (dj, wk) in wrow.iter().enumerate() {
                            let (ii, jj) = (i as isize + di as isize - 1, j as isize + dj as isize - 1);
                            if ii < 0 || jj < 0 || ii >= r as isize || jj >= c as isize {
                                continue;
                            }
                            for k in 0..cin {
                                acc += x[n][ii as usize][jj as usize][k] * wk[k][o];
                            }
                        }
                    }
                    y[n][i][j][o] = acc;
                }
            }
        }
    }
    y
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Plain peephole convolutional LSTM cell (single grid).
pub struct PeepholeConvLstm {
    pub channels: usize,
    /// Per gate `i, f, c, o`: input kernel, recurrent kernel, bias.
    pub wx: [Vec<Vec<Vec<Vec<f64>>>>; 4],
    pub wh: [Vec<Vec<Vec<Vec<f64>>>>; 4],
    pub b: [Vec<f64>; 4],
    /// Peepholes on `i`, `f` (previous cell) and `o` (new cell).
    pub p_i: Vec<f64>,
    pub p_f: Vec<f64>,
    pub p_o: Vec<f64>,
}

impl PeepholeConvLstm {
    /// One step: returns `(h', c')`.
    pub fn step(&self, x: &Grid, h: &Grid, c: &Grid) -> (Grid, Grid) {
        let ch = self.channels;
        let pre: Vec<Grid> = (0..4)
            .map(|g| {
                let a = conv3x3(x, &self.wx[g], ch);
                let r = conv3x3(h, &self.wh[g], ch);
                let mut s = a;
                for n in 0..s.len() {
                    for i in 0..s[0].len() {
                        for j in 0..s[0][0].len() {
                            for k in 0..ch {
                                s[n][i][j][k] += r[n][i][j][k] + self.b[g][k];
                            }
                        }
                    }
                }
                s
            })
            .collect();
        let (bn, rn, cn) = (x.len(), x[0].len(), x[0][0].len());
        let mut h2 = zeros(bn, rn, cn, ch);
        let mut c2 = zeros(bn, rn, cn, ch);
        for n in 0..bn {
            for i in 0..rn {
                for j in 0..cn {
                    for k in 0..ch {
                        let cp = c[n][i][j][k];
                        let ig = sigmoid(pre[0][n][i][j][k] + self.p_i[k] * cp);
                        let fg = sigmoid(pre[1][n][i][j][k] + self.p_f[k] * cp);
                        let cand = pre[2][n][i][j][k].tanh();
                        let cn_ = fg * cp + ig * cand;
                        let og = sigmoid(pre[3][n][i][j][k] + self.p_o[k] * cn_);
                        c2[n][i][j][k] = cn_;
                        h2[n][i][j][k] = og * cn_.tanh();
                    }
                }
            }
        }
        (h2, c2)
    }
}
