mod common;

use common::{crossing, fit_line, plane_wave, run, DX, N};
use deap_core::dataset::CorpusSpec;
use deap_core::phase::{compute_phase, dominant_track, find_singularities};
use deap_core::tissue::{make_heterogeneity, ModelParams, Region, StimulusProtocol, TissueGrid};

#[test]
fn plane_wave_propagates_at_constant_speed() {
    let ep = plane_wave(500);
    let vm = &ep.vm;
    let cols: Vec<usize> = (16..112).collect();
    let mut seg_speed = vec![Vec::new(); 4];
    for row in (48..80).step_by(4) {
        let t: Vec<f64> = cols
            .iter()
            .map(|&c| crossing(vm, vm.grid.index(row, c), 0.5, 0).expect("activated"))
            .collect();
        assert!(t.windows(2).all(|w| w[1] > w[0]), "row {row} not strictly increasing");
        for (s, chunk) in cols.chunks(24).enumerate() {
            let x: Vec<f64> = chunk.iter().map(|&c| c as f64 * DX).collect();
            let (slope, _) = fit_line(&x, &t[s * 24..(s + 1) * 24]);
            seg_speed[s].push(1.0 / slope);
        }
    }
    let speeds: Vec<f64> = seg_speed.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
    let mean = speeds.iter().sum::<f64>() / 4.0;
    for v in &speeds {
        assert!((v - mean).abs() / mean < 0.05, "segment speeds {speeds:?}");
    }
    assert!(mean > 0.05 && mean < 0.2, "speed {mean} mm/ms");
}

#[test]
fn speed_grows_with_diffusivity() {
    let speed = |d0: f64| {
        let p = ModelParams {
            d0,
            ..Default::default()
        };
        let ep = deap_core::tissue::run_episode(
            "d",
            &StimulusProtocol::s1_plane(N, N),
            &p,
            TissueGrid::new(N, N, DX).unwrap(),
            0,
            500,
        )
        .unwrap();
        let row = N / 2;
        let t0 = crossing(&ep.vm, ep.vm.grid.index(row, 32), 0.5, 0).unwrap();
        let t1 = crossing(&ep.vm, ep.vm.grid.index(row, 96), 0.5, 0).unwrap();
        64.0 * DX / (t1 - t0)
    };
    let base = ModelParams::default().d0;
    let (slow, fast) = (speed(base), speed(2.0 * base));
    assert!(fast > slow);
    // Speed scales with the square root of diffusivity.
    assert!((fast / slow - 2f64.sqrt()).abs() < 0.1, "{}", fast / slow);
}

#[test]
fn same_seed_gives_identical_movies() {
    let spec = CorpusSpec {
        duration_ms: 500,
        ..Default::default()
    };
    let p = ModelParams::default();
    let a = spec.simulate(3, &p).unwrap();
    let b = spec.simulate(3, &p).unwrap();
    assert_eq!(a.meta, b.meta);
    assert!(a.vm.data == b.vm.data);
    let c = spec.simulate(4, &p).unwrap();
    assert!(a.vm.data != c.vm.data);
}

#[test]
fn cross_field_stimulus_sustains_a_rotor() {
    let ep = run(&StimulusProtocol::s1s2_default(N, N), TissueGrid::new(N, N, DX).unwrap(), 1000);
    let phase = compute_phase(&ep.vm, None).unwrap();
    let (_, tracks) = find_singularities(&phase);
    let dom = dominant_track(&tracks).expect("at least one singularity");
    assert!(dom.lifetime() as f64 * ep.vm.dt_ms >= 300.0, "lifetime {}", dom.lifetime());
}

#[test]
fn patchy_tissue_slows_the_wave() {
    assert!(make_heterogeneity(5, 8, 0.0, N, N).unwrap().iter().all(|&d| d == 1.0));
    let map = make_heterogeneity(5, 8, 0.9, N, N).unwrap();
    assert_eq!(map, make_heterogeneity(5, 8, 0.9, N, N).unwrap());
    let arrival = |grid: TissueGrid| {
        let ep = run(&StimulusProtocol::s1_plane(N, N), grid, 600);
        let col = N - 4;
        let times: Vec<f64> = (0..N)
            .filter_map(|r| crossing(&ep.vm, ep.vm.grid.index(r, col), 0.5, 0))
            .collect();
        assert!(!times.is_empty());
        times.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    };
    let uniform = arrival(TissueGrid::new(N, N, DX).unwrap());
    let patchy = arrival(TissueGrid::new(N, N, DX).unwrap().with_diffusion(map).unwrap());
    assert!(patchy > uniform, "patchy {patchy} vs uniform {uniform}");
}

/// Largest activation-time jump between cells less than 1 mm apart, per
/// paced beat.
fn max_block_jump(vm: &deap_core::VmMovie, onsets: &[f64]) -> f64 {
    let g = vm.grid;
    let reach = (1.0 / g.dx_mm).ceil() as isize - 1;
    let mut worst: f64 = 0.0;
    for &t0 in onsets {
        let from = (t0 / vm.dt_ms) as usize;
        let act: Vec<Option<f64>> = (0..g.len())
            .map(|cell| crossing(vm, cell, 0.5, from).filter(|&t| t < t0 + 400.0))
            .collect();
        for row in 0..g.ny {
            for col in 0..g.nx {
                let Some(a) = act[g.index(row, col)] else { continue };
                for d in 1..=reach {
                    for (r2, c2) in [(row as isize, col as isize + d), (row as isize + d, col as isize)] {
                        if r2 as usize >= g.ny || c2 as usize >= g.nx {
                            continue;
                        }
                        if let Some(b) = act[g.index(r2 as usize, c2 as usize)] {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
        }
    }
    worst
}

#[test]
fn burst_pacing_on_fibrotic_tissue_blocks() {
    let map = make_heterogeneity(11, 8, 0.9, N, N).unwrap();
    let grid = TissueGrid::new(N, N, DX).unwrap().with_diffusion(map).unwrap();
    let site = Region::Rect {
        row0: 0,
        row1: N,
        col0: 0,
        col1: 3,
    };
    let cycle = 110.0;
    let protocol = StimulusProtocol::burst(site, 0.0, cycle, 6);
    let ep = run(&protocol, grid, 800);
    let onsets: Vec<f64> = (0..6).map(|k| k as f64 * cycle).collect();
    let jump = max_block_jump(&ep.vm, &onsets);
    assert!(jump > 30.0, "largest sub-millimetre jump {jump} ms");

    // Uniform tissue paced the same way conducts smoothly.
    let smooth = run(&protocol, TissueGrid::new(N, N, DX).unwrap(), 800);
    assert!(max_block_jump(&smooth.vm, &onsets[..1]) < 30.0);
}
