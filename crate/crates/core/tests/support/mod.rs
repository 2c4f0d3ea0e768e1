#![allow(dead_code)]

use ddm_core::flowexperts::{Expert, ExpertEnsemble};
use ddm_core::numcore::{DenseNet, Mat};
use ddm_core::router::Router;
use ddm_core::system::DdmSystem;

/// Largest eigenvalue of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_max_eigenvalue(a: &[Vec<f64>]) -> f64 {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).fold(f64::NEG_INFINITY, f64::max)
}

/// Largest singular value of a dense matrix through its Gram matrix.
pub fn oracle_sigma_max(a: &Mat) -> f64 {
    let gram: Vec<Vec<f64>> = (0..a.cols)
        .map(|i| (0..a.cols).map(|j| (0..a.rows).map(|r| a.get(r, i) * a.get(r, j)).sum()).collect())
        .collect();
    jacobi_max_eigenvalue(&gram).max(0.0).sqrt()
}

/// Column `j` of the Jacobian of `f` by central differences.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], step: f64) -> Vec<Vec<f64>> {
    (0..x.len())
        .map(|j| {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let (fp, fm) = (f(&xp), f(&xm));
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect()
        })
        .collect()
}

/// Directional derivative of `f` along `u` by central differences.
pub fn fd_directional(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], u: &[f64], step: f64) -> Vec<f64> {
    let xp: Vec<f64> = x.iter().zip(u).map(|(a, b)| a + step * b).collect();
    let xm: Vec<f64> = x.iter().zip(u).map(|(a, b)| a - step * b).collect();
    f(&xp).iter().zip(f(&xm)).map(|(a, b)| (a - b) / (2.0 * step)).collect()
}

/// Straight-line forward pass written out layer by layer from raw tensors.
pub fn straight_line_forward(net: &DenseNet, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    let layers = net.weights().len();
    for l in 0..layers {
        let w = &net.weights()[l];
        let b = &net.biases()[l];
        let mut next = Vec::new();
        for i in 0..w.rows {
            let mut s = b[i];
            for j in 0..w.cols {
                s += w.data[i * w.cols + j] * h[j];
            }
            next.push(if l + 1 < layers { s.tanh() } else { s });
        }
        h = next;
    }
    h
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

/// An untrained system with Glorot-initialised experts and router.
pub fn random_system(k: usize, d: usize, m: usize, hidden: usize, seed: u64) -> DdmSystem {
    let input = d + 2 * m;
    let experts = (0..k)
        .map(|i| {
            let net = DenseNet::init(&[input, hidden, hidden, d], seed.wrapping_add(100 + i as u64)).unwrap();
            Expert::new(net, i, m, 0).unwrap()
        })
        .collect();
    let mut router_net = DenseNet::init(&[input, hidden, k], seed.wrapping_add(7)).unwrap();
    // spread the logits so the router is not near-uniform
    for w in router_net.weights_mut().last_mut().unwrap().data.iter_mut() {
        *w *= 3.0;
    }
    let router = Router::new(router_net, m).unwrap();
    DdmSystem::new(ExpertEnsemble::new(experts).unwrap(), router).unwrap()
}
