//! Chambolle–Pock primal–dual solver for the TV problems, used as an
//! independent reference. Works on explicit dense matrices only.

pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| self.data[i * self.cols + j] * x[j])
                    .sum()
            })
            .collect()
    }

    pub fn mul_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += self.data[i * self.cols + j] * y[i];
            }
        }
        out
    }
}

/// Forward differences plus a mean row, built independently of the library.
pub fn gradient_matrix(n: usize) -> Dense {
    let mut data = vec![0.0; n * n];
    for i in 0..n - 1 {
        data[i * n + i] = -1.0;
        data[i * n + i + 1] = 1.0;
    }
    for j in 0..n {
        data[(n - 1) * n + j] = 1.0 / n as f64;
    }
    Dense {
        rows: n,
        cols: n,
        data,
    }
}

pub enum Fit {
    /// `‖Ax − y‖ ≤ eta`
    Ball(f64),
    /// `lambda‖Dx‖₁ + ‖Ax − y‖²`
    Penalty(f64),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn op_norm(d: &Dense, a: &Dense) -> f64 {
    let mut x = vec![1.0; d.cols];
    let mut s = 0.0;
    for _ in 0..500 {
        let mut k = d.mul_t(&d.mul(&x));
        let ka = a.mul_t(&a.mul(&x));
        for (ki, kai) in k.iter_mut().zip(&ka) {
            *ki += kai;
        }
        s = norm(&k);
        x = k.iter().map(|v| v / s).collect();
    }
    s.sqrt()
}

pub fn solve(d: &Dense, a: &Dense, y: &[f64], fit: Fit, iters: usize) -> Vec<f64> {
    let n = d.cols;
    let l = op_norm(d, a);
    let tau = 0.99 / l;
    let sigma = 0.99 / l;
    let mut x = vec![0.0; n];
    let mut xbar = x.clone();
    let mut p = vec![0.0; d.rows];
    let mut q = vec![0.0; a.rows];
    for _ in 0..iters {
        let dx = d.mul(&xbar);
        let ax = a.mul(&xbar);
        let scale = match fit {
            Fit::Ball(_) => 1.0,
            Fit::Penalty(lambda) => lambda,
        };
        for (pi, di) in p.iter_mut().zip(&dx) {
            *pi = (*pi + sigma * di).clamp(-scale, scale);
        }
        let t: Vec<f64> = q.iter().zip(&ax).map(|(qi, ai)| qi + sigma * ai).collect();
        match fit {
            Fit::Ball(eta) => {
                // Moreau: prox of sigma f* = t - sigma * P_ball(t / sigma)
                let c: Vec<f64> = t.iter().zip(y).map(|(ti, yi)| ti / sigma - yi).collect();
                let nc = norm(&c);
                let s = if nc > eta { eta / nc } else { 1.0 };
                for i in 0..q.len() {
                    q[i] = t[i] - sigma * (y[i] + s * c[i]);
                }
            }
            Fit::Penalty(_) => {
                // f(w) = ‖w − y‖², f*(q) = ‖q‖²/4 + ⟨q, y⟩
                for i in 0..q.len() {
                    q[i] = (t[i] - sigma * y[i]) / (1.0 + sigma / 2.0);
                }
            }
        }
        let kt: Vec<f64> = d
            .mul_t(&p)
            .iter()
            .zip(a.mul_t(&q))
            .map(|(u, v)| u + v)
            .collect();
        let x_new: Vec<f64> = x.iter().zip(&kt).map(|(xi, ki)| xi - tau * ki).collect();
        for i in 0..n {
            xbar[i] = 2.0 * x_new[i] - x[i];
        }
        x = x_new;
    }
    x
}
