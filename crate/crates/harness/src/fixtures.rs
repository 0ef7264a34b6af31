//! Synthetic CSV datasets.

use std::fmt::Write;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const WEIGHTS: [f64; 3] = [1.5, -2.0, 0.75];
const BIAS: f64 = 0.25;

fn row(rng: &mut StdRng, out: &mut String) -> f64 {
    let x: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let y = WEIGHTS.iter().zip(&x).map(|(w, x)| w * x).sum::<f64>() + BIAS + rng.gen_range(-0.05..0.05);
    write!(out, "{:.6},{:.6},{:.6},", x[0], x[1], x[2]).unwrap();
    y
}

/// Noisy linear regression data with three features.
pub fn regression_csv(rows: usize, seed: u64) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = String::from("x1,x2,x3,y\n");
    for _ in 0..rows {
        let y = row(&mut rng, &mut out);
        writeln!(out, "{y:.6}").unwrap();
    }
    out.into_bytes()
}

/// Regression data padded with rows until it is at least `bytes` long.
pub fn regression_csv_of_size(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 64);
    out.push_str("x1,x2,x3,y\n");
    while out.len() < bytes {
        let y = row(&mut rng, &mut out);
        writeln!(out, "{y:.6}").unwrap();
    }
    out.into_bytes()
}

/// Linearly separable 0/1 labels.
pub fn classification_csv(rows: usize, seed: u64) -> Vec<u8> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = String::from("x1,x2,x3,label\n");
    for _ in 0..rows {
        let y = row(&mut rng, &mut out);
        writeln!(out, "{}", u8::from(y > BIAS)).unwrap();
    }
    out.into_bytes()
}

/// Flips every 0/1 label. The result is well-formed but semantically poisoned.
pub fn flip_labels(csv: &[u8]) -> Vec<u8> {
    let text = std::str::from_utf8(csv).expect("fixture CSV is UTF-8");
    let mut lines = text.lines();
    let mut out = String::new();
    if let Some(header) = lines.next() {
        out.push_str(header);
        out.push('\n');
    }
    for line in lines {
        let (head, label) = line.rsplit_once(',').expect("fixture rows have a label");
        let flipped = if label == "0" { "1" } else { "0" };
        writeln!(out, "{head},{flipped}").unwrap();
    }
    out.into_bytes()
}
