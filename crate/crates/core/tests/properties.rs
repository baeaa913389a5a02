use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spda_core::attention::{AttentionHead, HeadOptions};
use spda_core::eval::components::{components, Connectivity};
use spda_core::eval::{
    self, auc_roc, average_precision, dsc, extract_candidates, nearest_rank_percentile,
    ScoredDetection,
};
use spda_core::gradcheck::{check_gradients, project, random_tensor, CheckOptions};
use spda_core::linalg::{qr_orthonormalize, sym_eig, sym_matrix_function, SpectralFn};
use spda_core::optim::{stiefel_step, StiefelParam};
use spda_core::{spd, synth};
use spda_core::{
    AttentionConfig, AttentionVariant, Graph, Matrix, ParamStore, SynthConfig, Tensor,
};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        random_tensor(&[rows, cols], seed).data().to_vec(),
    )
}

fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    qr_orthonormalize(&random_matrix(n, n, seed)).unwrap()
}

/// Q diag(λ) Qᵀ.
fn with_spectrum(q: &Matrix, eigenvalues: &[f64]) -> Matrix {
    q.matmul(&Matrix::from_diag(eigenvalues))
        .matmul(&q.transpose())
        .sym()
}

fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).frobenius_norm() / b.frobenius_norm().max(1e-300)
}

fn batch(m: &Matrix) -> Tensor {
    Tensor::new(vec![1, m.rows, m.cols], m.data.clone()).unwrap()
}

fn as_matrix(t: &Tensor) -> Matrix {
    let n = t.shape()[1];
    Matrix::from_vec(n, n, t.data().to_vec())
}

fn reeig_value(x: &Matrix, eps: f64) -> Matrix {
    let mut g = Graph::new();
    let v = g.constant(batch(x));
    let y = spd::reeig(&mut g, v, eps).unwrap();
    as_matrix(g.value(y))
}

fn spectrum(m: &Matrix) -> Vec<f64> {
    sym_eig(m).unwrap().eigenvalues
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn fan_out_equals_doubling(seed in any::<u64>(), n in 1usize..40) {
        let x = random_tensor(&[n], seed).with_grad();
        let grad = |twice: bool| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let y = if twice { g.add(v, v).unwrap() } else { g.scale(v, 2.0) };
            let p = project(&mut g, y, seed).unwrap();
            g.backward(p).unwrap();
            g.grad(v).unwrap().to_vec()
        };
        prop_assert_eq!(grad(true), grad(false));
    }

    #[test]
    fn forward_and_gradients_are_bit_reproducible(seed in any::<u64>()) {
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(random_tensor(&[1, 4, 2, 2, 2], seed).with_grad());
            let p = spd::spd_pool(&mut g, x).unwrap();
            let r = spd::reeig(&mut g, p, 1e-4).unwrap();
            let l = spd::logeig(&mut g, r).unwrap();
            let v = spd::upper_triangle_vec(&mut g, l, true).unwrap();
            let s = project(&mut g, v, 7).unwrap();
            let value = g.value(s).item();
            g.backward(s).unwrap();
            (value.to_bits(), g.grad(x).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn eig_reconstruct_is_idempotent(seed in any::<u64>(), n in 1usize..9) {
        let x = random_matrix(n, n, seed).sym();
        let once = sym_eig(&x).unwrap().reconstruct();
        let twice = sym_eig(&once).unwrap().reconstruct();
        prop_assert!(twice.sub(&once).frobenius_norm() <= 1e-9 * once.frobenius_norm().max(1.0));
        prop_assert!(once.sub(&x).frobenius_norm() <= 1e-9 * x.frobenius_norm().max(1.0));
    }

    #[test]
    fn exp_of_log_round_trips(seed in any::<u64>(), n in 2usize..9, logs in proptest::collection::vec(-2.0f64..2.0, 8)) {
        // Eigenvalues in [1e-2, 1e2], so the condition number is at most 1e4.
        let eigenvalues: Vec<f64> = logs[..n].iter().map(|l| 10f64.powf(*l)).collect();
        let x = with_spectrum(&random_orthogonal(n, seed), &eigenvalues);
        let (log_x, _) = sym_matrix_function(&x, SpectralFn::Log).unwrap();
        let (back, _) = sym_matrix_function(&log_x, SpectralFn::Exp).unwrap();
        prop_assert!(rel_frobenius(&back, &x) <= 1e-8);
    }

    #[test]
    fn log_backward_near_degenerate_pair(seed in any::<u64>(), base in 0.5f64..2.0) {
        let q = random_orthogonal(4, seed);
        let x = with_spectrum(&q, &[base + 1.0, base + 1e-8, base, base + 0.5]);
        let input = batch(&x).with_grad();
        let report = check_gradients(
            "logeig_near_degenerate",
            &[input],
            &ParamStore::new(),
            |g, _, v| {
                let l = spd::logeig(g, v[0])?;
                project(g, l, seed)
            },
            &CheckOptions::default(),
        )
        .unwrap();
        prop_assert!(report.passed, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn spd_pool_is_symmetric_with_jitter_floor(seed in any::<u64>(), c in 1usize..7, n in 1usize..12) {
        let f = random_tensor(&[1, c, n], seed);
        let mut g = Graph::new();
        let v = g.constant(f);
        let p = spd::spd_pool(&mut g, v).unwrap();
        let m = as_matrix(g.value(p));
        for i in 0..c {
            for j in 0..c {
                prop_assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
            }
        }
        let gamma = 1e-5 * (m.trace() / c as f64 / (1.0 + 1e-5)).max(1e-12);
        let lmin = *spectrum(&m).last().unwrap();
        prop_assert!(lmin >= gamma * (1.0 - 1e-9), "λ_min {lmin:e} < γ {gamma:e}");
    }

    #[test]
    fn reeig_is_idempotent(seed in any::<u64>(), n in 1usize..8, eps in 1e-4f64..0.5) {
        let x = random_matrix(n, n, seed).sym();
        let once = reeig_value(&x, eps);
        let twice = reeig_value(&once, eps);
        prop_assert!(twice.sub(&once).frobenius_norm() <= 1e-9 * once.frobenius_norm().max(1.0));
    }

    #[test]
    fn reeig_is_orthogonally_equivariant(seed in any::<u64>(), n in 2usize..8, eps in 1e-4f64..0.5) {
        let x = random_matrix(n, n, seed).sym();
        let q = random_orthogonal(n, seed.wrapping_add(1));
        let conj = |m: &Matrix| q.matmul(m).matmul(&q.transpose()).sym();
        let lhs = spectrum(&reeig_value(&conj(&x), eps));
        let rhs = spectrum(&conj(&reeig_value(&x, eps)));
        for (a, b) in lhs.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
        }
    }

    #[test]
    fn upper_triangle_vec_is_frobenius_isometry(seed in any::<u64>(), n in 1usize..8) {
        let x = random_matrix(n, n, seed).sym();
        let mut g = Graph::new();
        let v = g.constant(batch(&x));
        let u = spd::upper_triangle_vec(&mut g, v, true).unwrap();
        let norm2: f64 = g.value(u).data().iter().map(|a| a * a).sum();
        prop_assert!((norm2.sqrt() - x.frobenius_norm()).abs() <= 1e-12 * x.frobenius_norm().max(1.0));
        prop_assert_eq!(g.shape(u), &[1, n * (n + 1) / 2][..]);
    }

    #[test]
    fn stiefel_steps_stay_on_manifold(seed in any::<u64>(), n in 2usize..9, p in 1usize..9) {
        prop_assume!(p <= n);
        let mut a = StiefelParam::new(qr_orthonormalize(&random_matrix(n, p, seed)).unwrap()).unwrap();
        for k in 0..200 {
            let grad = random_matrix(n, p, seed ^ k);
            stiefel_step(&mut a, &grad, 0.1).unwrap();
        }
        prop_assert!(a.matrix().orthonormality_residual() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn alpha_is_inside_unit_interval(seed in any::<u64>(), scale in 1e-3f64..10.0, v in 0usize..3) {
        let variant = [AttentionVariant::Foa, AttentionVariant::Soa, AttentionVariant::Soga][v];
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = AttentionHead::new(&mut store, "h", 8, &AttentionConfig::with_variant(variant), &mut rng).unwrap();
        let mut fe = random_tensor(&[2, 8, 2, 2, 2], seed ^ 1);
        fe.data_mut().iter_mut().for_each(|x| *x *= scale);
        let fd = random_tensor(&[2, 8, 2, 2, 2], seed ^ 2);
        let mut g = Graph::new();
        let (e, d) = (g.constant(fe), g.constant(fd));
        let out = head.forward(&mut g, &store, e, d, HeadOptions::default()).unwrap();
        prop_assert!(g.value(out.alpha).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn lesion_records_match_mask_components(seed in any::<u64>()) {
        let cfg = SynthConfig { n_cases: 1, prevalence: 1.0, seed, ..SynthConfig::default() };
        let case = synth::generate_case(&cfg, 0).unwrap();
        let mask: Vec<bool> = case.mask.data().iter().map(|&m| m != 0.0).collect();
        let mut found: Vec<usize> = components(&mask, case.shape(), Connectivity::TwentySix).iter().map(Vec::len).collect();
        let mut recorded: Vec<usize> = case.lesions.iter().map(|l| l.voxels).collect();
        found.sort();
        recorded.sort();
        prop_assert_eq!(found, recorded);
        let volumes: Vec<f64> = case.lesions.iter().map(|l| l.voxels as f64 * case.voxel_volume_mm3).collect();
        prop_assert!(eval::stratify_by_size(&volumes, eval::StratifyMode::Percentile).is_ok());
    }
}

fn detections(conf: &[f64], tp: &[bool]) -> Vec<ScoredDetection> {
    conf.iter()
        .zip(tp)
        .enumerate()
        .map(|(i, (&c, &t))| ScoredDetection {
            confidence: c,
            case_id: i % 3,
            index: i / 3,
            true_positive: t,
        })
        .collect()
}

proptest! {
    #![proptest_config(cases(256))]

    #[test]
    fn ap_depends_only_on_rank(
        raw in proptest::collection::vec((0u8..20, any::<bool>()), 0..15),
        extra_gt in 0usize..4,
    ) {
        let conf: Vec<f64> = raw.iter().map(|(c, _)| (*c as f64 + 1.0) / 21.0).collect();
        let tp: Vec<bool> = raw.iter().map(|(_, t)| *t).collect();
        let n_gt = tp.iter().filter(|&&t| t).count() + extra_gt;
        let base = average_precision(&detections(&conf, &tp), n_gt);
        let cubed: Vec<f64> = conf.iter().map(|c| c.powi(3)).collect();
        let shifted: Vec<f64> = conf.iter().map(|c| (5.0 * c).exp() - 100.0).collect();
        prop_assert_eq!(base, average_precision(&detections(&cubed, &tp), n_gt));
        prop_assert_eq!(base, average_precision(&detections(&shifted, &tp), n_gt));
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn dsc_is_symmetric(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
        let (a, b): (Vec<bool>, Vec<bool>) = bits.into_iter().unzip();
        prop_assert_eq!(dsc(&a, &b).unwrap().to_bits(), dsc(&b, &a).unwrap().to_bits());
    }

    #[test]
    fn auc_label_flip_complements(raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..20)) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let labels: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auc_roc(&scores, &labels).unwrap() + auc_roc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn candidates_are_disjoint(seed in any::<u64>(), steps in 2usize..25, sparsity in 0.0f64..0.9) {
        let shape = [4, 5, 6];
        let probs: Vec<f64> = random_tensor(&[120], seed)
            .data()
            .iter()
            .map(|v| if (v + 1.0) / 2.0 < sparsity { 0.0 } else { (v + 1.0) / 2.0 })
            .collect();
        let cands = extract_candidates(&probs, shape, steps).unwrap();
        let mut owner = vec![usize::MAX; probs.len()];
        for (k, c) in cands.iter().enumerate() {
            prop_assert!(!c.voxels.is_empty());
            for &v in &c.voxels {
                prop_assert_eq!(owner[v], usize::MAX);
                owner[v] = k;
                prop_assert!(probs[v] >= 1.0 / steps as f64 - 1e-15);
            }
            let peak = c.voxels.iter().map(|&v| probs[v]).fold(0.0, f64::max);
            prop_assert_eq!(c.confidence, peak);
        }
        for w in cands.windows(2) {
            prop_assert!(w[0].confidence >= w[1].confidence);
        }
    }

    #[test]
    fn nearest_rank_matches_sorted_oracle(values in proptest::collection::vec(0.0f64..1e4, 1..40), p in 1u32..=100) {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        // Smallest value with at least p% of the data at or below it.
        let oracle = *sorted.iter().enumerate().find(|(i, _)| 100 * (i + 1) >= p as usize * n).unwrap().1;
        prop_assert_eq!(nearest_rank_percentile(&values, p).unwrap(), oracle);
    }
}
