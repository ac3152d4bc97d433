#![allow(dead_code)]

use std::collections::BTreeSet;

use delta_embed::model::{backward, ClassifierParams, Example, GradientBundle};
use delta_embed::{ComposedEmbedding, DeltaTable, EmbeddingMatrix};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so coordinates whose true
/// gradient is ~0 are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-8;

pub fn normal(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Cross-entropy of a softmax over `W·mean(rows[ids]) + b`, written out
/// directly from the definition.
pub fn oracle_loss(w: &[f64], b: &[f64], rows: &[Vec<f64>], ids: &[usize], label: usize) -> f64 {
    let k = b.len();
    let d = rows[0].len();
    let mut x = vec![0.0; d];
    for &id in ids {
        for j in 0..d {
            x[j] += rows[id][j];
        }
    }
    for v in &mut x {
        *v /= ids.len() as f64;
    }
    let z: Vec<f64> = (0..k)
        .map(|c| b[c] + (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>())
        .collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[label]
}

pub struct GradInstance {
    pub params: ClassifierParams,
    pub base: EmbeddingMatrix,
    pub delta: DeltaTable,
    pub example: Example,
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> GradInstance {
    let d = rng.gen_range(1..=8);
    let k = rng.gen_range(1..=3);
    let v = rng.gen_range(2..=7);
    let base = EmbeddingMatrix::from_flat(normal(rng, v * d, 1.0), d).unwrap();
    let mut delta = DeltaTable::new(d);
    for id in 0..v {
        if rng.gen_bool(0.5) {
            delta.insert(id, normal(rng, d, 0.3)).unwrap();
        }
    }
    let mut params = ClassifierParams::zeros(k, d);
    params.weights = normal(rng, k * d, 0.7);
    params.bias = normal(rng, k, 0.3);
    let len = rng.gen_range(1..=6);
    let ids = (0..len).map(|_| rng.gen_range(0..v)).collect();
    let example = Example {
        ids,
        label: rng.gen_range(0..k),
    };
    GradInstance {
        params,
        base,
        delta,
        example,
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Largest relative error over every gradient coordinate, and the number of
/// coordinates checked.
pub fn check_gradient(inst: &GradInstance) -> Result<(f64, usize), String> {
    let GradInstance {
        params,
        base,
        delta,
        example,
    } = inst;
    let emb = ComposedEmbedding::new(base, delta).unwrap();
    let (loss, grad): (f64, GradientBundle) =
        backward(params, &emb, example).map_err(|e| e.to_string())?;

    let d = base.dim();
    let rows: Vec<Vec<f64>> = (0..base.rows())
        .map(|id| {
            let mut r = base.row(id).to_vec();
            if let Some(dr) = delta.row(id) {
                r.iter_mut().zip(dr).for_each(|(a, b)| *a += b);
            }
            r
        })
        .collect();
    let (w, b, ids, y) = (&params.weights, &params.bias, &example.ids, example.label);
    let l0 = oracle_loss(w, b, &rows, ids, y);
    if (l0 - loss).abs() > 1e-12 * l0.abs().max(1.0) {
        return Err(format!("loss {loss} vs oracle {l0}"));
    }

    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let mut note = |a: f64, n: f64| {
        worst = worst.max(rel_err(a, n));
        count += 1;
    };
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += h;
        wm[i] -= h;
        let n =
            (oracle_loss(&wp, b, &rows, ids, y) - oracle_loss(&wm, b, &rows, ids, y)) / (2.0 * h);
        note(grad.weights[i], n);
    }
    for i in 0..b.len() {
        let (mut bp, mut bm) = (b.clone(), b.clone());
        bp[i] += h;
        bm[i] -= h;
        let n =
            (oracle_loss(w, &bp, &rows, ids, y) - oracle_loss(w, &bm, &rows, ids, y)) / (2.0 * h);
        note(grad.bias[i], n);
    }
    let distinct: BTreeSet<usize> = ids.iter().copied().collect();
    let keys: BTreeSet<usize> = grad.delta.keys().copied().collect();
    if distinct != keys {
        return Err(format!(
            "delta gradient rows {keys:?}, example words {distinct:?}"
        ));
    }
    for &id in &distinct {
        for j in 0..d {
            let (mut rp, mut rm) = (rows.clone(), rows.clone());
            rp[id][j] += h;
            rm[id][j] -= h;
            let n = (oracle_loss(w, b, &rp, ids, y) - oracle_loss(w, b, &rm, ids, y)) / (2.0 * h);
            note(grad.delta[&id][j], n);
        }
    }
    Ok((worst, count))
}
