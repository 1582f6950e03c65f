use std::path::Path;

use nalgebra::DMatrix;
use proptest::prelude::*;

use partial_bayes::dist::{
    sample, scaled_chisq_logpdf, std_normal_cdf, stream, t_survival, DegreesOfFreedom, Law,
};
use partial_bayes::mtp::{bh_adjust, bh_reject, storey_pi0, storey_reject};
use partial_bayes::npmle::{
    fit_npmle_s2, log_marginal_likelihood_s2, Algorithm, DiscretePrior, GridConfig, SolverConfig, KKT_CERTIFICATE,
    PRUNE_THRESHOLD,
};
use partial_bayes::pvalues::{fit_limma, limma_pvalue, ttest_pvalue, PvalueMethod};
use partial_bayes::simbench::{monte_carlo, run_methods, sample_dataset, SimSetting};
use partial_bayes::summarize::{read_pairs_from, summarize_contrast, write_pairs, SummaryDataset, SummaryPair};

fn df(nu: f64) -> DegreesOfFreedom {
    DegreesOfFreedom::sampling(nu).unwrap()
}

/// Solves `A x = b` by Gaussian elimination with full pivoting.
fn full_pivot_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut col_of: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (r, row) in a.iter().enumerate().skip(k) {
            for (c, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    (pr, pc, best) = (r, c, v.abs());
                }
            }
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        col_of.swap(k, pc);
        let (upper, lower) = a.split_at_mut(k + 1);
        let pivot = &upper[k];
        for (row, r) in lower.iter_mut().zip(k + 1..) {
            let f = row[k] / pivot[k];
            for (x, p) in row[k..].iter_mut().zip(&pivot[k..]) {
                *x -= f * p;
            }
            b[r] -= f * b[k];
        }
    }
    let mut y = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a[k][c] * y[c]).sum();
        y[k] = (b[k] - s) / a[k][k];
    }
    let mut x = vec![0.0; n];
    for (k, &c) in col_of.iter().enumerate() {
        x[c] = y[k];
    }
    x
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs().max(1.0)
}

fn contrast_instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=4)
        .prop_flat_map(|p| (Just(p), p + 1..=12))
        .prop_flat_map(|(p, k)| {
            (
                Just(p),
                Just(k),
                prop::collection::vec(-2.0f64..2.0, k * p),
                prop::collection::vec(-5.0f64..5.0, k),
                prop::collection::vec(-1.0f64..1.0, p),
            )
        })
        .prop_filter("nonzero contrast", |(_, _, _, _, c)| c.iter().any(|v| v.abs() > 0.05))
}

proptest! {
    #[test]
    fn normal_cdf_reflection(x in -40.0f64..40.0) {
        prop_assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn t_survival_reflection(t in -60.0f64..60.0, nu in 0.3f64..500.0) {
        let s = t_survival(t, nu).unwrap() + t_survival(-t, nu).unwrap();
        prop_assert!((s - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn contrast_matches_normal_equations((p, k, x, y, c) in contrast_instance()) {
        let design = DMatrix::from_row_slice(k, p, &x);
        let got = match summarize_contrast(&y, &design, &c) {
            Ok(s) => s,
            // Near-singular draws are rejected, which is the documented behavior.
            Err(_) => return Ok(()),
        };
        let xtx: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..p).map(|j| (0..k).map(|r| x[r * p + i] * x[r * p + j]).sum()).collect())
            .collect();
        let xty: Vec<f64> = (0..p).map(|i| (0..k).map(|r| x[r * p + i] * y[r]).sum()).collect();
        let beta = full_pivot_solve(xtx.clone(), xty);
        let w = full_pivot_solve(xtx, c.clone());
        let rss: f64 = (0..k)
            .map(|r| {
                let fitted: f64 = (0..p).map(|j| x[r * p + j] * beta[j]).sum();
                (y[r] - fitted).powi(2)
            })
            .sum();
        let z: f64 = c.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let s2 = c.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() * rss / (k - p) as f64;
        prop_assert!(close(got.z, z, 1e-10), "z {} vs {}", got.z, z);
        prop_assert!(close(got.s2, s2, 1e-10), "s2 {} vs {}", got.s2, s2);
        prop_assert_eq!(got.nu, (k - p) as f64);
    }

    #[test]
    fn pairs_csv_round_trip_is_bit_exact(
        values in prop::collection::vec((prop::num::f64::NORMAL | prop::num::f64::ZERO, 1e-300f64..1e300), 1..40),
        nu in 2.0f64..100.0,
    ) {
        let pairs: Vec<SummaryPair> = values
            .iter()
            .enumerate()
            .map(|(i, &(z, s2))| SummaryPair::new(format!("unit_{i}"), z, s2).unwrap())
            .collect();
        let data = SummaryDataset::new(pairs, df(nu)).unwrap();
        let mut buf = Vec::new();
        write_pairs(&mut buf, &data).unwrap();
        let back = read_pairs_from(buf.as_slice(), Path::new("mem"), df(nu)).unwrap();
        for (a, b) in back.pairs().iter().zip(data.pairs()) {
            prop_assert_eq!(&a.id, &b.id);
            prop_assert_eq!(a.z.to_bits(), b.z.to_bits());
            prop_assert_eq!(a.s2.to_bits(), b.s2.to_bits());
        }
    }

    #[test]
    fn pvalues_lie_in_unit_interval_and_are_monotone(
        atoms in prop::collection::vec((0.05f64..20.0, 0.05f64..1.0), 1..5),
        z in -12.0f64..12.0,
        dz in 0.0f64..3.0,
        s2 in 0.01f64..30.0,
        ratio in 1.0f64..5.0,
        nu in prop::sample::select(vec![2.0, 3.0, 4.0, 8.0, 16.0]),
    ) {
        let prior = DiscretePrior::from_atoms(atoms).unwrap();
        let nu = df(nu);
        let limma = fit_limma(&[0.3, 1.0, 2.5, 0.7, 4.0], nu).unwrap();
        for method in [PvalueMethod::Npmle(prior), PvalueMethod::Limma(limma), PvalueMethod::TTest] {
            let p = method.pvalue(z, s2, nu).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
            prop_assert_eq!(method.pvalue(0.0, s2, nu).unwrap(), 1.0);
            prop_assert!((method.pvalue(-z, s2, nu).unwrap() - p).abs() <= 1e-14);
            prop_assert!(method.pvalue(z.abs() + dz, s2, nu).unwrap() <= p + 1e-12);
            prop_assert!(method.pvalue(z, s2 * ratio, nu).unwrap() >= p - 1e-12);
        }
    }

    #[test]
    fn point_mass_prior_gives_z_test(c in 0.01f64..50.0, z in -10.0f64..10.0, s2 in 0.001f64..100.0, nu in 2.0f64..40.0) {
        let p = PvalueMethod::Npmle(DiscretePrior::point_mass(c).unwrap()).pvalue(z, s2, df(nu)).unwrap();
        let exact = 2.0 * std_normal_cdf(-z.abs() / c.sqrt());
        prop_assert!((p - exact).abs() <= 1e-12, "{} vs {}", p, exact);
    }

    #[test]
    fn bh_is_consistent_with_adjusted_pvalues(p in prop::collection::vec(0.0f64..=1.0, 1..60), alpha in 0.001f64..0.5) {
        let r = bh_reject(&p, alpha).unwrap();
        let adj = bh_adjust(&p).unwrap();
        for ((&a, &rej), &pi) in adj.iter().zip(&r.rejected).zip(&p) {
            prop_assert!(a >= pi && a <= 1.0);
            prop_assert_eq!(rej, a <= alpha * (1.0 + 1e-12), "adj {} alpha {}", a, alpha);
        }
        prop_assert_eq!(r.count(), r.k_star);
    }

    #[test]
    fn bh_is_permutation_equivariant(
        p in prop::collection::vec(0.0f64..=1.0, 1..40),
        seed in any::<u64>(),
        alpha in 0.01f64..0.3,
    ) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..p.len()).collect();
        perm.shuffle(&mut stream(seed, 0));
        let q: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let (rp, rq) = (bh_reject(&p, alpha).unwrap(), bh_reject(&q, alpha).unwrap());
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(rq.rejected[k], rp.rejected[i]);
        }
        prop_assert_eq!(rp.threshold, rq.threshold);
    }

    #[test]
    fn rejections_are_nested_in_alpha(p in prop::collection::vec(0.0f64..=1.0, 1..50), a in 0.001f64..0.5, b in 0.001f64..0.5) {
        let (lo, hi) = (a.min(b), a.max(b));
        let (small, large) = (bh_reject(&p, lo).unwrap(), bh_reject(&p, hi).unwrap());
        prop_assert!(small.rejected.iter().zip(&large.rejected).all(|(s, l)| !s || *l));
        let pi0 = storey_pi0(&p, 0.5).unwrap();
        prop_assert!(pi0 > 0.0 && pi0 <= 1.0);
        let storey = storey_reject(&p, lo, 0.5).unwrap();
        prop_assert!(small.rejected.iter().zip(&storey.rejected).all(|(s, l)| !s || *l));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn npmle_fits_are_certified_bounded_and_beat_limma(
        seed in any::<u64>(),
        n in 60usize..400,
        nu in prop::sample::select(vec![2.0, 3.0, 4.0, 8.0]),
        v1 in 0.1f64..3.0,
        spread in 1.0f64..20.0,
        w in 0.1f64..0.9,
        algorithm in prop::sample::select(vec![Algorithm::ConstrainedNewton, Algorithm::Em]),
    ) {
        let truth = DiscretePrior::two_point(v1, v1 * spread, w).unwrap();
        let mut rng = stream(seed, 0);
        let s2: Vec<f64> = (0..n)
            .map(|_| sample(&mut rng, Law::Discrete(&truth)).unwrap() * sample(&mut rng, Law::ChiSquared { nu }).unwrap() / nu)
            .collect();
        let nu = df(nu);
        let solver = SolverConfig { algorithm, ..SolverConfig::default() };
        let grid = GridConfig { grid_size: 80, ..GridConfig::default() };
        let fit = fit_npmle_s2(&s2, nu, &grid, &solver).unwrap();

        // EM may run out of iterations, but then it must say so.
        if algorithm == Algorithm::ConstrainedNewton {
            prop_assert!(fit.converged);
        }
        if fit.converged {
            prop_assert!(fit.kkt_gap <= KKT_CERTIFICATE, "gap {:e}", fit.kkt_gap);
        }
        let (lo, hi) = (fit.grid[0], *fit.grid.last().unwrap());
        prop_assert!(fit.prior.support().iter().all(|&v| v >= lo && v <= hi));
        prop_assert!(fit.prior.weights().iter().all(|&v| v >= PRUNE_THRESHOLD));
        prop_assert!((fit.prior.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for pair in fit.trace.windows(2) {
            prop_assert!(pair[1] >= pair[0] - 1e-12 * pair[0].abs(), "{} then {}", pair[0], pair[1]);
        }

        // The limma prior restricted to the same grid cannot do better.
        let limma = fit_limma(&s2, nu).unwrap();
        let projected = if limma.is_point_mass() {
            let j = (0..fit.grid.len())
                .min_by(|&a, &b| (fit.grid[a] - limma.s0sq()).abs().total_cmp(&(fit.grid[b] - limma.s0sq()).abs()))
                .unwrap();
            DiscretePrior::point_mass(fit.grid[j]).unwrap()
        } else {
            let mass: Vec<f64> = fit.grid.iter().map(|&g| limma.density(g)).collect();
            DiscretePrior::from_atoms(fit.grid.iter().copied().zip(mass).filter(|(_, m)| *m > 0.0)).unwrap()
        };
        let ll_fit = log_marginal_likelihood_s2(&fit.prior, &s2, nu);
        let ll_limma = log_marginal_likelihood_s2(&projected, &s2, nu);
        prop_assert!(ll_fit >= ll_limma - 1e-9 * ll_fit.abs(), "{} < {}", ll_fit, ll_limma);
    }
}

#[test]
fn scaled_chisq_density_integrates_to_one() {
    // Trapezoid rule in log s² on a wide, fine grid.
    for sigma2 in [0.1, 1.0, 10.0] {
        for nu in [2.0, 3.0, 4.0, 16.0, 64.0] {
            let (a, b, m) = ((sigma2 * 1e-12f64).ln(), (sigma2 * 60.0f64).ln(), 400_000);
            let h = (b - a) / m as f64;
            let total: f64 = (0..=m)
                .map(|k| {
                    let u = a + h * k as f64;
                    let weight = if k == 0 || k == m { 0.5 } else { 1.0 };
                    weight * (scaled_chisq_logpdf(u.exp(), sigma2, df(nu)).unwrap() + u).exp()
                })
                .sum::<f64>()
                * h;
            assert!((total - 1.0).abs() < 1e-8, "sigma2 {sigma2} nu {nu}: {total}");
        }
    }
}

#[test]
fn scaled_inverse_chisq_mean_over_a_million_draws() {
    let mut rng = stream(77, 0);
    let n = 1_000_000;
    let mean = (0..n)
        .map(|_| sample(&mut rng, Law::ScaledInvChiSquared { nu0: 6.0, s0sq: 1.0 }).unwrap())
        .sum::<f64>()
        / n as f64;
    assert!((mean - 1.5).abs() < 0.01, "{mean}");
}

#[test]
fn t_survival_matches_normal_for_huge_df() {
    for k in 0..=100 {
        let t = -5.0 + 0.1 * k as f64;
        let diff = t_survival(t, 1e6).unwrap() - (1.0 - std_normal_cdf(t));
        assert!(diff.abs() <= 1e-5, "t {t}: {diff}");
    }
}

#[test]
fn ttest_is_inflated_among_smallest_sample_variances() {
    let mut setting = SimSetting::preset("scaled_inv_chisq", 4.0).unwrap();
    setting.n = 100_000;
    setting.null_prop = 1.0;
    let (data, _) = sample_dataset(&setting, &mut stream(31, 0)).unwrap();
    let mut units: Vec<_> = data.pairs().iter().collect();
    units.sort_by(|a, b| a.s2.total_cmp(&b.s2));
    let bottom = &units[..units.len() / 100];
    let hits = bottom
        .iter()
        .filter(|u| ttest_pvalue(u.z, u.s2, data.nu()).unwrap() <= 0.2)
        .count();
    let frac = hits as f64 / bottom.len() as f64;
    assert!(frac > 0.5, "{frac}");
}

#[test]
fn bh_fdr_matches_null_fraction_times_alpha() {
    // 900 uniform nulls, 100 strong alternatives; FDR = α n₀/n = 0.09.
    let (reps, n, n0, alpha) = (2000, 1000, 900, 0.1);
    let mut total = 0.0;
    for r in 0..reps {
        let mut rng = stream(2024, r);
        let p: Vec<f64> = (0..n)
            .map(|i| {
                let z = sample(&mut rng, Law::StandardNormal).unwrap() + if i < n0 { 0.0 } else { 3.0 };
                if i < n0 {
                    std_normal_cdf(z)
                } else {
                    2.0 * std_normal_cdf(-z.abs())
                }
            })
            .collect();
        let rej = bh_reject(&p, alpha).unwrap();
        let false_hits = rej.rejected[..n0].iter().filter(|&&x| x).count();
        total += false_hits as f64 / rej.count().max(1) as f64;
    }
    let fdr = total / reps as f64;
    assert!((fdr - 0.09).abs() <= 0.01, "{fdr}");
}

#[test]
fn pooled_null_npmle_pvalues_average_one_half() {
    let mut setting = SimSetting::preset("scaled_inv_chisq", 4.0).unwrap();
    setting.n = 5000;
    let (mut sum, mut count) = (0.0, 0usize);
    for r in 0..8 {
        let (data, truth) = sample_dataset(&setting, &mut stream(404, r)).unwrap();
        let outcomes = run_methods(&data, &setting).unwrap();
        let npmle = outcomes.iter().find(|o| o.method.name() == "npmle_bh").unwrap();
        for (p, &null) in npmle.pvalues.iter().zip(&truth.null_mask) {
            if null {
                sum += p;
                count += 1;
            }
        }
    }
    let mean = sum / count as f64;
    assert!((mean - 0.5).abs() <= 0.01, "{mean}");
}

#[test]
fn oracle_storey_controls_fdr_under_random_ordering() {
    for (name, nu) in [("scaled_inv_chisq", 4.0), ("two_point", 4.0)] {
        let mut setting = SimSetting::preset(name, nu).unwrap();
        setting.n = 2000;
        let report = monte_carlo(&setting, 60, 8, None).unwrap();
        let storey = report.methods.iter().find(|m| m.method.name() == "oracle_storey").unwrap();
        assert!(
            storey.fdr.estimate <= setting.alpha + 2.0 * storey.fdr.stderr,
            "{name}: {} ± {}",
            storey.fdr.estimate,
            storey.fdr.stderr
        );
    }
}

#[test]
fn limma_pvalue_reduces_to_normal_for_infinite_prior_df() {
    let prior = partial_bayes::pvalues::LimmaPrior::point_mass(2.0).unwrap();
    for z in [0.0, 0.5, 2.0, 6.0] {
        let p = limma_pvalue(&prior, z, 7.0, df(4.0)).unwrap();
        assert!((p - 2.0 * std_normal_cdf(-z / 2f64.sqrt())).abs() < 1e-14);
    }
}
