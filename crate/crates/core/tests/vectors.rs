//! Task-vector and subspace-similarity tests. The similarity path is checked
//! against two independent routes: nalgebra's SVD (a different algorithm)
//! and, for S = 2, a grid-search maximization of the first principal cosine
//! with the second recovered from the alignment determinant.

use proptest::prelude::*;
use rainmerge_core::calibration::{orthonormal_columns, random_checkpoint};
use rainmerge_core::linalg::Mat;
use rainmerge_core::tensorstore::ModelConfig;
use rainmerge_core::vectors::{
    apply_delta, extract_task_vector, principal_subspace_similarity, SubmoduleId, SubmoduleKind,
    TaskVector,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig::new(1, 2, 6, 4, 12, 8).unwrap()
}

fn rand_tv(seed: u64, config: &ModelConfig) -> TaskVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tv = TaskVector::zeros(config);
    for delta in tv.deltas.values_mut() {
        for v in &mut delta.data {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    tv
}

#[test]
fn extract_of_identical_checkpoints_is_zero() {
    let config = small_config();
    let ckpt = random_checkpoint(5, &config).unwrap();
    let tv = extract_task_vector(&ckpt, &ckpt).unwrap();
    for delta in tv.deltas.values() {
        assert!(delta.data.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn extract_from_zero_base_equals_task_weights() {
    let config = small_config();
    let task = random_checkpoint(7, &config).unwrap();
    let base = rainmerge_core::tensorstore::Checkpoint::zeros(config.clone());
    let tv = extract_task_vector(&task, &base).unwrap();
    for (id, delta) in &tv.deltas {
        let w = task.tensor(&id.kind.tensor_name(id.layer)).unwrap().to_mat();
        assert_eq!(delta.data, w.data);
    }
}

#[test]
fn extract_then_apply_reproduces_task_on_merged_kinds() {
    let config = small_config();
    let base = random_checkpoint(11, &config).unwrap();
    let task = random_checkpoint(13, &config).unwrap();
    let tv = extract_task_vector(&task, &base).unwrap();
    let merged = apply_delta(&base, &tv, 1.0).unwrap();
    for id in SubmoduleId::enumerate(&config) {
        let name = id.kind.tensor_name(id.layer);
        let got = &merged.tensor(&name).unwrap().data;
        let want = &task.tensor(&name).unwrap().data;
        for (g, w) in got.iter().zip(want) {
            assert_eq!(g.to_bits(), w.to_bits(), "{name}");
        }
    }
    // Non-merged tensors stay at the anchor's values.
    assert_eq!(
        merged.tensor("embed.tok").unwrap().data,
        base.tensor("embed.tok").unwrap().data
    );
}

#[test]
fn apply_with_zero_scale_is_bit_identical_to_anchor() {
    let config = small_config();
    let anchor = random_checkpoint(17, &config).unwrap();
    let tv = rand_tv(19, &config);
    let merged = apply_delta(&anchor, &tv, 0.0).unwrap();
    for (name, t) in &anchor.tensors {
        let got = &merged.tensor(name).unwrap().data;
        for (g, w) in got.iter().zip(&t.data) {
            assert_eq!(g.to_bits(), w.to_bits());
        }
    }
}

#[test]
fn apply_then_unapply_returns_within_one_relative_ulp() {
    let config = small_config();
    let anchor = random_checkpoint(23, &config).unwrap();
    let tv = rand_tv(29, &config);
    let lambda = 0.73;
    let merged = apply_delta(&anchor, &tv, lambda).unwrap();
    let merged_tv = extract_task_vector(&merged, &anchor).unwrap();
    // Return: merged + (−1)·(merged − anchor) == anchor up to storage
    // rounding of the intermediate.
    let back = apply_delta(&merged, &merged_tv, -1.0).unwrap();
    for (name, t) in &anchor.tensors {
        for (b, a) in back.tensor(name).unwrap().data.iter().zip(&t.data) {
            let tol = a.abs().max(b.abs()) * f32::EPSILON;
            assert!((b - a).abs() <= tol, "{name}: {b} vs {a}");
        }
    }
}

#[test]
fn identical_nonzero_deltas_have_similarity_one() {
    let config = small_config();
    let tv = rand_tv(31, &config);
    let report = principal_subspace_similarity(&tv, &tv, 2).unwrap();
    assert!(report.skipped.is_empty());
    for (id, e) in &report.entries {
        assert!((e.mean_cosine - 1.0).abs() < 1e-6, "{id}: {}", e.mean_cosine);
    }
}

#[test]
fn constructed_orthogonal_subspaces_have_similarity_zero() {
    let config = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut a = TaskVector::zeros(&config);
    let mut b = TaskVector::zeros(&config);
    for id in SubmoduleId::enumerate(&config) {
        let (d_out, d_in) = id.kind.dims(&config);
        let frame = orthonormal_columns(&mut rng, d_out, 4);
        let va = orthonormal_columns(&mut rng, d_in, 2);
        let vb = orthonormal_columns(&mut rng, d_in, 2);
        let mut da = Mat::zeros(d_out, d_in);
        let mut db = Mat::zeros(d_out, d_in);
        for j in 0..2 {
            da.rank1_update(&frame.col(j), &va.col(j), 1.0 - 0.1 * j as f64);
            db.rank1_update(&frame.col(2 + j), &vb.col(j), 1.0 - 0.1 * j as f64);
        }
        a.deltas.insert(id, da);
        b.deltas.insert(id, db);
    }
    let report = principal_subspace_similarity(&a, &b, 2).unwrap();
    for (id, e) in &report.entries {
        assert!(e.mean_cosine.abs() < 1e-6, "{id}: {}", e.mean_cosine);
    }
}

/// Independent oracle: top-s left bases from nalgebra's SVD, alignment
/// singular values from nalgebra again.
fn nalgebra_mean_cosine(a: &Mat, b: &Mat, s: usize) -> f64 {
    let top_basis = |m: &Mat| -> nalgebra::DMatrix<f64> {
        let na = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
        let svd = na.svd(true, false);
        let u = svd.u.unwrap();
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&i, &j| {
            svd.singular_values[j]
                .partial_cmp(&svd.singular_values[i])
                .unwrap()
        });
        let mut out = nalgebra::DMatrix::zeros(m.rows, s);
        for (new_j, &old_j) in order.iter().take(s).enumerate() {
            out.set_column(new_j, &u.column(old_j));
        }
        out
    };
    let ua = top_basis(a);
    let ub = top_basis(b);
    let align = ua.transpose() * ub;
    let sv = align.svd(false, false).singular_values;
    let mut vals: Vec<f64> = sv.iter().cloned().collect();
    vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    vals.iter().take(s).sum::<f64>() / s as f64
}

/// Second independent route for s = 2: grid-search the first principal
/// cosine over both subspace circles, recover the second from |det|.
fn grid_mean_cosine_s2(a: &Mat, b: &Mat) -> f64 {
    let ua = {
        let na = nalgebra::DMatrix::from_row_slice(a.rows, a.cols, &a.data);
        na.svd(true, false).u.unwrap()
    };
    let ub = {
        let nb = nalgebra::DMatrix::from_row_slice(b.rows, b.cols, &b.data);
        nb.svd(true, false).u.unwrap()
    };
    // nalgebra orders singular values descending for these dense cases; the
    // caller uses matrices with well-separated spectra.
    let col = |m: &nalgebra::DMatrix<f64>, j: usize| -> Vec<f64> {
        m.column(j).iter().cloned().collect()
    };
    let (a1, a2) = (col(&ua, 0), col(&ua, 1));
    let (b1, b2) = (col(&ub, 0), col(&ub, 1));
    let dot = |x: &[f64], y: &[f64]| -> f64 { x.iter().zip(y).map(|(p, q)| p * q).sum() };
    let steps = 6283usize; // 1e-3 radian grid
    let mut sigma1: f64 = 0.0;
    for i in 0..steps {
        let pa = i as f64 * 1e-3;
        let va: Vec<f64> = a1
            .iter()
            .zip(&a2)
            .map(|(x, y)| pa.cos() * x + pa.sin() * y)
            .collect();
        // For fixed va, the best vector in span(b1,b2) has cosine
        // sqrt((va·b1)² + (va·b2)²).
        let c1 = dot(&va, &b1);
        let c2 = dot(&va, &b2);
        sigma1 = sigma1.max((c1 * c1 + c2 * c2).sqrt());
    }
    let det = dot(&a1, &b1) * dot(&a2, &b2) - dot(&a1, &b2) * dot(&a2, &b1);
    let sigma2 = det.abs() / sigma1.max(1e-300);
    (sigma1 + sigma2.min(sigma1)) / 2.0
}

#[test]
fn random_deltas_match_brute_force_principal_angles() {
    let config = small_config();
    let a = rand_tv(41, &config);
    let b = rand_tv(43, &config);
    let report = principal_subspace_similarity(&a, &b, 2).unwrap();
    for (id, e) in &report.entries {
        let oracle = nalgebra_mean_cosine(a.delta(id).unwrap(), b.delta(id).unwrap(), 2);
        assert!(
            (e.mean_cosine - oracle).abs() < 1e-9,
            "{id}: {} vs oracle {oracle}",
            e.mean_cosine
        );
    }
    // Grid-search route on the 6x6 attention deltas.
    for kind in [SubmoduleKind::Q, SubmoduleKind::K, SubmoduleKind::V, SubmoduleKind::O] {
        let id = SubmoduleId::new(0, kind);
        let got = report.entries[&id].mean_cosine;
        let grid = grid_mean_cosine_s2(a.delta(&id).unwrap(), b.delta(&id).unwrap());
        assert!((got - grid).abs() < 1e-4, "{id}: {got} vs grid {grid}");
    }
}

#[test]
fn zero_delta_is_flagged_absent_not_zero() {
    let config = small_config();
    let a = rand_tv(47, &config);
    let mut b = rand_tv(53, &config);
    let dead = SubmoduleId::new(0, SubmoduleKind::V);
    b.deltas.get_mut(&dead).unwrap().data.fill(0.0);
    let report = principal_subspace_similarity(&a, &b, 2).unwrap();
    assert!(report.skipped.contains(&dead));
    assert!(!report.entries.contains_key(&dead));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn similarity_is_symmetric_scale_free_and_in_range(
        seed_a in 0u64..500,
        seed_b in 500u64..1000,
        scale in prop::sample::select(vec![-2.5f64, 0.125, 3.0, 1e-3]),
    ) {
        let config = small_config();
        let a = rand_tv(seed_a, &config);
        let b = rand_tv(seed_b, &config);
        let ab = principal_subspace_similarity(&a, &b, 2).unwrap();
        let ba = principal_subspace_similarity(&b, &a, 2).unwrap();
        let mut scaled = a.clone();
        for d in scaled.deltas.values_mut() {
            d.scale(scale);
        }
        let sb = principal_subspace_similarity(&scaled, &b, 2).unwrap();
        for (id, e) in &ab.entries {
            prop_assert!(e.mean_cosine >= 0.0 && e.mean_cosine <= 1.0);
            prop_assert!((e.mean_cosine - ba.entries[id].mean_cosine).abs() < 1e-9);
            prop_assert!((e.mean_cosine - sb.entries[id].mean_cosine).abs() < 1e-9);
        }
    }
}
