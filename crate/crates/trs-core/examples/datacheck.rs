//! Scratch data inspection.
use trs_core::data::{generate_synthetic, SyntheticKind};

fn main() {
    let d = generate_synthetic(SyntheticKind::TwoMoons, 200, 0.08, 11).unwrap();
    // 1-NN leave-one-out agreement: how separable is the data?
    let mut agree = 0;
    for i in 0..d.len() {
        let mut best = (f64::INFINITY, 0usize);
        for j in 0..d.len() {
            if i == j { continue; }
            let dist = d.inputs[i].sub(&d.inputs[j]).unwrap().norm_l2();
            if dist < best.0 { best = (dist, j); }
        }
        if d.labels[best.1] == d.labels[i] { agree += 1; }
    }
    println!("1-NN agreement: {}", agree as f64 / d.len() as f64);
    for i in 0..8 {
        println!("x={:?} y={}", d.inputs[i].data(), d.labels[i]);
    }
    // class geometry summary
    for c in 0..2 {
        let xs: Vec<f64> = d.inputs.iter().zip(&d.labels).filter(|(_, &y)| y == c).map(|(t, _)| t.data()[0]).collect();
        let ys: Vec<f64> = d.inputs.iter().zip(&d.labels).filter(|(_, &y)| y == c).map(|(t, _)| t.data()[1]).collect();
        println!("class {c}: x[{:.2},{:.2}] y[{:.2},{:.2}]",
            xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            ys.iter().cloned().fold(f64::INFINITY, f64::min), ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
}
