//! Exact rational rank versus the SVD rank used by `solve`.

use nalgebra::DMatrix;
use num_rational::BigRational;
use num_traits::Zero;
use sdfl_core::adversary::{assemble_system, solve, GroupSumPolicy};
use sdfl_core::aggregate::AdmmConfig;
use sdfl_core::simnet::{peer_view, run_simulation};
use sdfl_core::{generate_schedule, ParamVector, SearchBudget};

fn exact_rank(m: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<BigRational>> = (0..m.nrows())
        .map(|r| {
            (0..m.ncols())
                .map(|c| BigRational::from_float(m[(r, c)]).expect("finite entry"))
                .collect()
        })
        .collect();
    let mut rank = 0;
    for col in 0..m.ncols() {
        let Some(pivot) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, pivot);
        let p = rows[rank][col].clone();
        for r in 0..rows.len() {
            if r != rank && !rows[r][col].is_zero() {
                let f = &rows[r][col] / &p;
                for c in col..m.ncols() {
                    let delta = &f * &rows[rank][c];
                    rows[r][c] -= delta;
                }
            }
        }
        rank += 1;
    }
    rank
}

fn inputs(n: usize) -> Vec<ParamVector<f64>> {
    (0..n)
        .map(|k| ParamVector::from_vec(vec![k as f64 * 0.75 - 2.0, (k * k) as f64 / 8.0]).unwrap())
        .collect()
}

#[test]
fn exact_rank_sanity() {
    let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.5, 0.0, 1.0]);
    assert_eq!(exact_rank(&m), 2);
}

#[test]
fn grouped_svd_rank_matches_exact_rank() {
    let schedule = generate_schedule(9, 3, 5, SearchBudget::default()).unwrap();
    assert_eq!(schedule.gap(), 4);
    let cfg = AdmmConfig::new(1.0, 8).grouped(schedule.clone()).allow_unsafe(true);
    let (_, tr) = run_simulation(&inputs(9), &cfg, 11).unwrap();
    for observer in [0, 4] {
        let view = peer_view(&tr, observer).unwrap();
        for target in (0..9).filter(|&t| t != observer) {
            for horizon in 1..=8 {
                for policy in [GroupSumPolicy::Auto, GroupSumPolicy::Always, GroupSumPolicy::Never] {
                    let sys = assemble_system(&view, target, horizon, policy).unwrap();
                    let res = solve(&sys).unwrap();
                    assert_eq!(
                        res.rank,
                        exact_rank(&sys.matrix),
                        "observer {observer} target {target} T={horizon} {policy:?}"
                    );
                    let met = schedule.meetings(observer, target, horizon).len();
                    assert_eq!(res.is_unique(), met >= 2, "observer {observer} target {target} T={horizon}");
                }
            }
        }
    }
}

#[test]
fn all_to_all_svd_rank_matches_exact_rank() {
    for rho in [0.5, 1.0, 2.0] {
        let (_, tr) = run_simulation(&inputs(5), &AdmmConfig::new(rho, 3), 2).unwrap();
        let view = peer_view(&tr, 1).unwrap();
        for horizon in 1..=3 {
            let sys = assemble_system(&view, 3, horizon, GroupSumPolicy::Auto).unwrap();
            let res = solve(&sys).unwrap();
            assert_eq!(res.rank, exact_rank(&sys.matrix));
            assert_eq!(res.is_unique(), horizon >= 2);
        }
    }
}
