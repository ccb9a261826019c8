//! Independent recount oracles shared by the metric tests and the acceptance suite.
#![allow(dead_code)]

use advseg::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random binary mask; one in six is all background, one in six all mass.
pub fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> Tensor {
    let density: f64 = match rng.random_range(0..6) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random(),
    };
    let data = (0..side * side).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect();
    Tensor::new(&[side, side], data).unwrap()
}

pub fn brute_dice(p: &[f64], t: &[f64]) -> f64 {
    let inter = p.iter().zip(t).filter(|(a, b)| **a == 1.0 && **b == 1.0).count();
    let sum = p.iter().filter(|&&v| v == 1.0).count() + t.iter().filter(|&&v| v == 1.0).count();
    if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    }
}

/// Band membership by checking every pixel against every boundary pixel.
pub fn brute_trimap(p: &[f64], t: &[f64], side: usize, width: usize) -> Option<f64> {
    let n = side as i64;
    let at = |y: i64, x: i64| t[(y * n + x) as usize];
    let mut edges = Vec::new();
    for y in 0..n {
        for x in 0..n {
            let opposite = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| {
                let (yy, xx) = (y + dy, x + dx);
                (0..n).contains(&yy) && (0..n).contains(&xx) && at(yy, xx) != at(y, x)
            });
            if opposite {
                edges.push((y, x));
            }
        }
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for y in 0..n {
        for x in 0..n {
            let near = edges.iter().any(|&(by, bx)| (((y - by).pow(2) + (x - bx).pow(2)) as f64).sqrt() <= width as f64);
            if near {
                total += 1;
                let i = (y * n + x) as usize;
                correct += (p[i] == t[i]) as usize;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}
