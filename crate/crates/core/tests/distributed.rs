//! Cross-module properties of the distributed kernels.

use monc_core::decomp::{decompose, gather_global, halo_exchange, run_ranks, Field3D, GlobalGrid};
use monc_core::fft::solve_pressure_fft;
use monc_core::krylov::dense;
use monc_core::solver::SolverConfig;
use monc_core::Precision;
use proptest::prelude::*;

fn value(k: usize, j: usize, i: usize) -> f64 {
    (k * 10_000 + j * 100 + i) as f64
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn halo_matches_periodic_neighbours(nz in 1usize..4, ny in 2usize..9, nx in 2usize..9, w in 1usize..5) {
        let g = GlobalGrid::unit(nz, ny, nx).unwrap();
        let Ok(layouts) = decompose(g, w) else { return Ok(()) };
        let bad = run_ranks(w, |mut comm| {
            let l = &layouts[comm.rank()];
            let mut f = Field3D::from_global_fn(l, value);
            halo_exchange(&mut f, l, &mut comm).unwrap();
            let mut bad = 0;
            for jl in -1..=l.y.size as isize {
                for il in -1..=l.x.size as isize {
                    let j = (l.y.start as isize + jl).rem_euclid(ny as isize) as usize;
                    let i = (l.x.start as isize + il).rem_euclid(nx as isize) as usize;
                    for k in 0..nz {
                        if f.get(k, jl, il) != value(k, j, i) {
                            bad += 1;
                        }
                    }
                }
            }
            bad
        });
        prop_assert_eq!(bad.iter().sum::<usize>(), 0);
    }

    #[test]
    fn gather_inverts_scatter(nz in 1usize..4, ny in 1usize..9, nx in 1usize..9, w in 1usize..5) {
        let g = GlobalGrid::unit(nz, ny, nx).unwrap();
        let Ok(layouts) = decompose(g, w) else { return Ok(()) };
        let global: Vec<f64> = (0..g.points()).map(|n| n as f64 * 0.5).collect();
        let out = run_ranks(w, |mut comm| {
            let l = &layouts[comm.rank()];
            gather_global(&Field3D::from_global(l, &global), l, &mut comm, 0).unwrap()
        });
        prop_assert_eq!(out[0].as_ref(), Some(&global));
        prop_assert!(out[1..].iter().all(Option::is_none));
    }

    #[test]
    fn fft_inverts_the_stencil(n in prop::sample::select(vec![4usize, 6, 8]), w in prop::sample::select(vec![1usize, 2, 4]), seed in any::<u64>()) {
        let g = GlobalGrid::new(n, n, n, 0.5, 1.0, 2.0).unwrap();
        let layouts = decompose(g, w).unwrap();
        let mut state = seed | 1;
        let mut rhs: Vec<f64> = (0..g.points())
            .map(|_| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state % 2001) as f64 / 1000.0 - 1.0
            })
            .collect();
        let mean = rhs.iter().sum::<f64>() / rhs.len() as f64;
        rhs.iter_mut().for_each(|x| *x -= mean);
        let p = run_ranks(w, |mut comm| {
            let l = &layouts[comm.rank()];
            let cfg = SolverConfig::new(1e-10, Precision::Double);
            let p = solve_pressure_fft(&Field3D::from_global(l, &rhs), l, &mut comm, &cfg).unwrap();
            gather_global(&p, l, &mut comm, 0).unwrap()
        })
        .swap_remove(0)
        .unwrap();
        let ap = dense::apply_stencil(&g, &p);
        let scale = rhs.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in ap.iter().zip(&rhs) {
            prop_assert!((a - b).abs() <= 1e-10 * scale);
        }
    }
}
