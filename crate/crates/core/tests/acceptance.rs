//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs under `cargo test` with its own harness so the lines are
//! always shown.

#![allow(clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, DiscreteCDF};

use tagat_core::graph::{build_all, build_graph, edge_count, GraphOptions, TaskSet};
use tagat_core::io::{to_canonical_json, Checkpoint, CheckpointMeta, RngState};
use tagat_core::losses::{ce_loss, mse_loss, ortho_loss, total_loss};
use tagat_core::math::{argmax, softmax};
use tagat_core::model::GraphInput;
use tagat_core::train::{
    evaluate, evaluate_fold, lr_at, model_grad_check, train_fold, FoldReport, MODEL_GRADCHECK_EPS,
};
use tagat_core::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("gradient correctness", ac1_gradient),
        ("loss oracles", ac2_losses),
        ("scale invariance", ac3_scale),
        ("permutation invariance", ac4_permutation),
        ("graph construction", ac5_graph),
        ("lr schedule", ac6_schedule),
        ("protocol integrity", ac7_protocol),
        ("memory-bank gradient flow", ac8_bank),
        ("end-to-end synthetic learning", ac9_learning),
        ("determinism", ac10_determinism),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] AC{:<2} {name}: {detail} ({secs:.1}s)", k + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] AC{:<2} {name}: {detail} ({secs:.1}s)", k + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ac1_gradient() -> Outcome {
    let start = Instant::now();
    let r = model_grad_check(0, MODEL_GRADCHECK_EPS).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(r.max_rel_error <= 1e-5, format!("max rel error {:.3e} > 1e-5 ({r:?})", r.max_rel_error))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "max rel error {:.2e} over {} coordinates (N=6, d_h=4, M=3)",
        r.max_rel_error, r.coordinates
    ))
}

fn ac2_losses() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    ensure(close(ce_loss(&[0.5], &[1]).map_err(err)?, -(0.5f64).ln()), "ce y=1 ŷ=0.5")?;
    let expected = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
    ensure(close(ce_loss(&[0.9, 0.2], &[1, 0]).map_err(err)?, expected), "ce batch")?;
    ensure(ce_loss(&[1.0], &[1]).map_err(err)? <= 1e-9, "ce perfect")?;
    ensure(close(mse_loss(&[1.0, 1.0], &[0.0, 1.0]).map_err(err)?, 0.5), "mse")?;
    ensure(mse_loss(&[0.2, 0.7], &[0.2, 0.7]).map_err(err)? == 0.0, "mse zero")?;
    let bank = |rows: &[Vec<f64>]| Matrix::from_rows(rows).map_err(err);
    ensure(ortho_loss(&bank(&[vec![1.0, 0.0], vec![0.0, 1.0]])?).map_err(err)?.abs() <= 1e-9, "ortho orthogonal")?;
    ensure(close(ortho_loss(&bank(&[vec![2.0, 1.0], vec![2.0, 1.0]])?).map_err(err)?, 1.0), "ortho equal")?;
    let third = ortho_loss(&bank(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]])?).map_err(err)?;
    ensure(close(third, 1.0 / 3.0), format!("ortho 3-row bank {third}"))?;
    ensure(close(total_loss(0.7, 0.01, 0.1, &LossWeights::default()), 1.3), "total")?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let m = rng.random_range(2..10);
        let d = rng.random_range(1..8);
        let b = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let v = ortho_loss(&b).map_err(err)?;
        ensure(
            v >= -1.0 / (m as f64 - 1.0) - 1e-12 && v <= 1.0 + 1e-12,
            format!("ortho {v} outside bound for M={m}"),
        )?;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(format!("all examples within 1e-9; 1000 random banks in bound (range {lo:.3}..{hi:.3})"))
}

fn ac3_scale() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let m = rng.random_range(2..8);
        let b = Matrix::from_fn(m, 5, |_, _| rng.random_range(-1.0..1.0));
        let mut scaled = b.clone();
        for k in 0..m {
            let c = 10f64.powf(rng.random_range(-3.0..3.0));
            scaled.row_mut(k).iter_mut().for_each(|v| *v *= c);
        }
        let diff = (ortho_loss(&b).map_err(err)? - ortho_loss(&scaled).map_err(err)?).abs();
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-12, format!("ortho changed by {worst:e}"))?;
    for _ in 0..500 {
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        ensure(
            argmax(&softmax(&logits)) == argmax(&softmax(&shifted)),
            "softmax argmax moved under shift",
        )?;
    }
    Ok(format!("ortho max change {worst:.1e} under per-row rescaling; softmax argmax stable under 500 shifts"))
}

fn ac4_permutation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = TaGat::<f64>::new(ModelConfig {
        seed: 4,
        ..ModelConfig::toy(8, 3)
    })
    .map_err(err)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let x = Matrix::from_fn(8, 8, |_, _| rng.random_range(-1.0..1.0));
        let mut edges = Vec::new();
        for i in 0..8 {
            for j in (i + 1)..8 {
                if rng.random_bool(0.3) {
                    edges.push((i, j, rng.random_range(0.05..1.0)));
                }
            }
        }
        let mut perm: Vec<usize> = (0..8).collect();
        for i in (1..8).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut inv = [0; 8];
        for (k, &old) in perm.iter().enumerate() {
            inv[old] = k;
        }
        let px = Matrix::from_fn(8, 8, |k, c| x[(perm[k], c)]);
        let pe: Vec<_> = edges.iter().map(|&(i, j, w)| (inv[i], inv[j], w)).collect();
        let a = model.embed(&GraphInput::new(x, &edges).map_err(err)?).map_err(err)?;
        let b = model.embed(&GraphInput::new(px, &pe).map_err(err)?).map_err(err)?;
        worst = worst.max(a.max_abs_diff(&b).unwrap_or(f64::INFINITY));
    }
    ensure(worst <= 1e-10, format!("embedding moved by {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e} over 100 permutations of random 8-node graphs"))
}

/// Independent N=3 pipeline: explicit sums and a cofactor inverse.
fn brute_force_three(data: &Matrix<f64>) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let t = data.rows();
    let mean: Vec<f64> = (0..3).map(|j| (0..t).map(|i| data[(i, j)]).sum::<f64>() / t as f64).collect();
    let mut cov = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            cov[a][b] = (0..t)
                .map(|i| (data[(i, a)] - mean[a]) * (data[(i, b)] - mean[b]))
                .sum::<f64>()
                / (t as f64 - 1.0);
        }
    }
    let mut corr = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            corr[a][b] = cov[a][b] / (cov[a][a] * cov[b][b]).sqrt();
        }
    }
    let eps = 1e-3 * (cov[0][0] + cov[1][1] + cov[2][2]) / 3.0;
    let mut m = cov;
    for (k, row) in m.iter_mut().enumerate() {
        row[k] += eps;
    }
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut p = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            let (r0, r1) = ((b + 1) % 3, (b + 2) % 3);
            let (c0, c1) = ((a + 1) % 3, (a + 2) % 3);
            p[a][b] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    let mut pc = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            pc[a][b] = -p[a][b] / (p[a][a] * p[b][b]).sqrt();
        }
    }
    (corr, pc)
}

fn ac5_graph() -> Outcome {
    for n in 3..=268usize {
        let pairs = n * (n - 1) / 2;
        for (num, den) in [(1usize, 100usize), (5, 100), (20, 100)] {
            let exact = (num * pairs).div_ceil(den);
            let got = edge_count(n, num as f64 / den as f64);
            ensure(got == exact, format!("edge_count({n}, {num}%) = {got}, expected {exact}"))?;
        }
    }

    let pop = generate_population(&SynthConfig {
        n_subjects: 2,
        n_tasks: 2,
        n_rois: 268,
        timepoints: 120,
        ..Default::default()
    })
    .map_err(err)?;
    let graphs = build_all(&pop.scans, &GraphOptions::default()).map_err(err)?;
    for g in &graphs {
        ensure(g.graph.edges.len() == 1789, format!("{} edges at N=268", g.graph.edges.len()))?;
        ensure(g.graph.edges.iter().all(|e| e.w > 0.0), "non-positive weight retained")?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut data = Matrix::zeros(100, 3);
    for i in 0..100 {
        let common: f64 = rng.random_range(-1.0..1.0);
        data[(i, 0)] = common + 0.5 * rng.random_range(-1.0..1.0);
        data[(i, 1)] = common + 0.5 * rng.random_range(-1.0..1.0);
        data[(i, 2)] = rng.random_range(-1.0..1.0) - 0.3 * data[(i, 0)];
    }
    let task = TaskSet::canonical(1).map_err(err)?.by_index(1).map_err(err)?;
    let scan = ScanTimeSeries::new("s", task.clone(), data.clone(), 0, 0.5).map_err(err)?;
    let g = build_graph(&scan, &GraphOptions::default()).map_err(err)?;
    let (corr, pc) = brute_force_three(&data);
    let mut worst = 0.0f64;
    for a in 0..3 {
        for b in 0..3 {
            worst = worst.max((g.node_features[(a, b)] - corr[a][b]).abs());
        }
    }
    let mut best = (0, 1, f64::NEG_INFINITY);
    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
        if pc[a][b] > best.2 {
            best = (a, b, pc[a][b]);
        }
    }
    ensure(g.edges.len() == 1, format!("{} edges at N=3", g.edges.len()))?;
    let e = g.edges[0];
    ensure((e.i, e.j) == (best.0, best.1), format!("edge {:?} vs oracle {best:?}", e))?;
    worst = worst.max((e.w - best.2).abs());
    ensure(worst <= 1e-8, format!("N=3 oracle deviation {worst:e}"))?;

    let dense = GraphOptions {
        density: 0.99,
        ..Default::default()
    };
    ensure(
        matches!(build_graph(&scan, &dense), Err(Error::NonPositiveEdgeWeight { .. })),
        "negative partial correlation retained without error",
    )?;
    Ok(format!(
        "edge counts exact for N=3..268 at 1/5/20%; N=268 → 1789 positive edges; N=3 oracle within {worst:.1e}; forced non-positive edge is a hard error"
    ))
}

fn ac6_schedule() -> Outcome {
    let c = TrainConfig::default();
    let mut expected = c.lr0;
    let mut plateaus = BTreeSet::new();
    for epoch in 0..100 {
        if epoch > 0 && epoch % 10 == 0 {
            expected *= 0.4;
        }
        let lr = lr_at(epoch, &c);
        ensure(
            (lr - expected).abs() <= 1e-14 * expected,
            format!("epoch {epoch}: {lr} vs {expected}"),
        )?;
        plateaus.insert(lr.to_bits());
    }
    ensure(lr_at(0, &c) == 4e-6, "epoch 0")?;
    ensure((lr_at(10, &c) - 1.6e-6).abs() <= 1e-18, "epoch 10")?;
    ensure(plateaus.len() == 10, format!("{} plateaus", plateaus.len()))?;
    Ok(format!(
        "100 epochs match closed form; lr(0)={:e}, lr(10)={:e}, lr(99)={:.4e}, 10 plateaus",
        lr_at(0, &c),
        lr_at(10, &c),
        lr_at(99, &c)
    ))
}

fn small_setup(seed: u64) -> Result<(Population, Vec<Example<f64>>, ModelConfig), String> {
    let pop = generate_population(&SynthConfig {
        n_subjects: 20,
        n_tasks: 3,
        n_rois: 10,
        timepoints: 60,
        seed,
        ..Default::default()
    })
    .map_err(err)?;
    let graphs = build_all(&pop.scans, &GraphOptions { density: 0.1, ..Default::default() }).map_err(err)?;
    let examples = Example::prepare(&graphs).map_err(err)?;
    let model = ModelConfig {
        seed,
        ..ModelConfig::toy(10, 3)
    };
    Ok((pop, examples, model))
}

fn quick_train(lambda2: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr0: 0.05,
        epochs,
        batch_size: 8,
        weights: LossWeights {
            lambda1: 50.0,
            lambda2,
        },
        precision: DType::F64,
        ..Default::default()
    }
}

fn ac7_protocol() -> Outcome {
    let (pop, examples, model) = small_setup(7)?;
    let train_cfg = quick_train(1.0, 3);
    let mut folds = 0;
    for held_out in pop.tasks.iter() {
        for p in 1..=5u8 {
            let fold = FoldSpec {
                held_out: held_out.clone(),
                test_partition: p,
                partitions: pop.partitions.clone(),
            };
            let run = train_fold(&examples, &fold, &model, &train_cfg, None).map_err(err)?;
            let exposure = &run.state.exposure;
            let test: BTreeSet<&str> = pop
                .partitions
                .iter()
                .filter(|(_, &q)| q == p)
                .map(|(s, _)| s.as_str())
                .collect();
            ensure(exposure.task_count(&held_out) == 0, format!("held-out {} seen in fold {p}", held_out.name))?;
            ensure(
                exposure.subjects.iter().all(|s| !test.contains(s.as_str())),
                format!("test subject trained on in fold {p}"),
            )?;
            let expected_train = examples
                .iter()
                .filter(|e| e.task != held_out && pop.partitions[&e.subject_id] != p)
                .count();
            ensure(
                exposure.task_counts.values().sum::<usize>() == expected_train * train_cfg.epochs,
                "instrumentation did not record every training scan",
            )?;
            ensure(
                run.integrity.held_out_exposures == 0 && run.integrity.subject_overlap == 0,
                "integrity counters non-zero",
            )?;
            let cells = evaluate_fold(&run.model, &examples, &pop.tasks, &fold).map_err(err)?;
            let unseen = cells.iter().filter(|c| c.kind == train::CellKind::Unseen).count();
            ensure(cells.len() == 3 && unseen == 1, "fold report is not 2 known + 1 unseen cells")?;
            folds += 1;
        }
    }
    Ok(format!(
        "{folds} folds (every task held out × 5 partitions): 0 held-out exposures, 0 subject overlap"
    ))
}

fn ac8_bank() -> Outcome {
    let (pop, examples, model) = small_setup(8)?;
    let held_out = pop.tasks.by_index(3).map_err(err)?;
    let fold = FoldSpec {
        held_out: held_out.clone(),
        test_partition: 1,
        partitions: pop.partitions.clone(),
    };
    let init = TaGat::<f64>::new(model.clone()).map_err(err)?;
    let row = held_out.index - 1;
    let with = train_fold(&examples, &fold, &model, &quick_train(1.0, 5), None).map_err(err)?;
    let without = train_fold(&examples, &fold, &model, &quick_train(0.0, 5), None).map_err(err)?;
    let bits = |m: &TaGat<f64>| m.bank().row(row).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(with.integrity.held_out_row_shift > 0.0, "row did not move with λ2=1")?;
    ensure(bits(&without.model) == bits(&init), "row changed with λ2=0")?;
    let known_moved = (0..2).all(|k| without.model.bank().row(k) != init.bank().row(k));
    ensure(known_moved, "known-task rows did not train")?;
    Ok(format!(
        "λ2=1 shift {:.3e}; λ2=0 row bit-identical to init (known rows still trained)",
        with.integrity.held_out_row_shift
    ))
}

fn ac9_learning() -> Outcome {
    let start = Instant::now();
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut worst_p = 0.0f64;
    for seed in 0..5u64 {
        let pop = generate_population(&SynthConfig {
            n_subjects: 60,
            n_tasks: 3,
            n_rois: 20,
            timepoints: 100,
            gender_effect: 2.0,
            cog_effect: 2.0,
            task_effect: 2.0,
            noise_std: 1.0,
            seed,
        })
        .map_err(err)?;
        let graphs = build_all(&pop.scans, &GraphOptions::default()).map_err(err)?;
        let examples = Example::<f64>::prepare(&graphs).map_err(err)?;
        let model = ModelConfig {
            d_in: 20,
            d_h: 16,
            d_mem: 16,
            d_proj: 16,
            num_tasks: 3,
            heads: 1,
            mlp_hidden: vec![32, 16, 8],
            dropout: 0.2,
            negative_slope: 0.2,
            seed,
        };
        let fold = FoldSpec {
            held_out: pop.tasks.by_index(3).map_err(err)?,
            test_partition: 1,
            partitions: pop.partitions.clone(),
        };
        let mut unseen = [0.0; 2];
        for (slot, lambda2) in [1.0, 0.0].into_iter().enumerate() {
            let cfg = TrainConfig {
                lr0: 0.3,
                step_epochs: 10,
                gamma: 0.8,
                epochs: 150,
                batch_size: 16,
                weights: LossWeights { lambda1: 50.0, lambda2 },
                seed,
                precision: DType::F64,
                ..Default::default()
            };
            let run = train_fold(&examples, &fold, &model, &cfg, None).map_err(err)?;
            let split = fold.split(&examples).map_err(err)?;
            let known = evaluate(&run.model, &split.known_test).map_err(err)?;
            unseen[slot] = evaluate(&run.model, &split.unseen_test).map_err(err)?.accuracy;
            if slot == 0 {
                let n = known.n as u64;
                let k = (known.accuracy / 100.0 * n as f64).round() as u64;
                let binom = Binomial::new(0.5, n).map_err(err)?;
                let p = if k == 0 { 1.0 } else { binom.sf(k - 1) };
                worst_p = worst_p.max(p);
                ensure(p < 0.01, format!("seed {seed}: known accuracy {k}/{n}, p = {p:.3e}"))?;
                lines.push(format!("seed {seed}: known {k}/{n} (p={p:.1e})"));
            }
        }
        if unseen[0] >= unseen[1] {
            wins += 1;
        }
        lines.push(format!("unseen λ2=1 {:.1}% vs λ2=0 {:.1}%", unseen[0], unseen[1]));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(wins >= 3, format!("λ2=1 ≥ λ2=0 on unseen task for only {wins}/5 seeds; {}", lines.join("; ")))?;
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!(
        "worst binomial p {worst_p:.1e} < 0.01 on all 5 seeds; unseen λ2=1 ≥ λ2=0 on {wins}/5 seeds [{}]",
        lines.join("; ")
    ))
}

fn ac10_determinism() -> Outcome {
    let run = || -> Result<(Vec<u8>, String), String> {
        let (pop, examples, model) = small_setup(10)?;
        let fold = FoldSpec {
            held_out: pop.tasks.by_index(2).map_err(err)?,
            test_partition: 3,
            partitions: pop.partitions.clone(),
        };
        let cfg = quick_train(1.0, 4);
        let r = train_fold(&examples, &fold, &model, &cfg, None).map_err(err)?;
        let meta = CheckpointMeta {
            model: model.clone(),
            train: cfg.clone(),
            dtype: DType::F64,
            rng: RngState {
                seed: cfg.seed,
                next_epoch: r.state.next_epoch,
            },
            tasks: pop.tasks.clone(),
            held_out_task: fold.held_out.name.clone(),
            test_partition: fold.test_partition,
            exposure: r.state.exposure.clone(),
            integrity: Some(r.integrity.clone()),
        };
        let ckpt = Checkpoint::capture(meta, &r.model, &r.state).encode().map_err(err)?;
        let report = FoldReport {
            held_out_task: fold.held_out.name.clone(),
            test_partition: fold.test_partition,
            cells: evaluate_fold(&r.model, &examples, &pop.tasks, &fold).map_err(err)?,
            integrity: r.integrity,
            final_epoch: r.history.last().copied(),
        };
        Ok((ckpt, to_canonical_json(&report).map_err(err)?))
    };
    let (c1, r1) = run()?;
    let (c2, r2) = run()?;
    ensure(c1 == c2, "checkpoints differ")?;
    ensure(r1 == r2, "reports differ")?;
    Ok(format!(
        "two runs: identical {}-byte checkpoints and {}-byte reports",
        c1.len(),
        r1.len()
    ))
}
