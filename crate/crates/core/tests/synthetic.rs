//! The generator's planted gender signal must be recoverable from the
//! connectivity features by a plain logistic probe.

use tagat_core::graph::build_all;
use tagat_core::*;

fn features(g: &LabeledGraph) -> Vec<f64> {
    let f = &g.graph.node_features;
    let n = f.rows();
    let mut v = vec![1.0];
    for a in 0..n {
        for b in (a + 1)..n {
            v.push(f[(a, b)]);
        }
    }
    v
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn planted_gender_signal_is_linearly_decodable() {
    let pop = generate_population(&SynthConfig {
        gender_effect: 2.0,
        ..Default::default()
    })
    .unwrap();
    let graphs = build_all(&pop.scans, &GraphOptions::default()).unwrap();
    let (train, test): (Vec<_>, Vec<_>) = graphs.iter().partition(|g| pop.partitions[&g.subject_id] != 1);
    let xs: Vec<Vec<f64>> = train.iter().map(|g| features(g)).collect();
    let mut w = vec![0.0; xs[0].len()];
    for _ in 0..2000 {
        let mut grad = vec![0.0; w.len()];
        for (x, g) in xs.iter().zip(&train) {
            let p = sigmoid(x.iter().zip(&w).map(|(a, b)| a * b).sum());
            let r = p - f64::from(g.gender);
            grad.iter_mut().zip(x).for_each(|(d, a)| *d += r * a);
        }
        let k = 0.5 / xs.len() as f64;
        w.iter_mut().zip(&grad).for_each(|(p, d)| *p -= k * d + 1e-4 * *p);
    }
    let correct = test
        .iter()
        .filter(|g| {
            let s: f64 = features(g).iter().zip(&w).map(|(a, b)| a * b).sum();
            u8::from(s > 0.0) == g.gender
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.9, "probe accuracy {acc}");
}

#[test]
fn gender_effect_only_touches_label_one_scans() {
    let base = SynthConfig { seed: 3, gender_effect: 0.0, ..Default::default() };
    let a = generate_population(&base).unwrap();
    let b = generate_population(&SynthConfig { gender_effect: 2.0, ..base }).unwrap();
    for (x, y) in a.scans.iter().zip(&b.scans) {
        assert_eq!(x.data == y.data, x.gender == 0);
    }
}
