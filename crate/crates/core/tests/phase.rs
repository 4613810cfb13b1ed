mod common;

use std::f64::consts::PI;

use common::{crossing, fit_line, run, DX, N};
use deap_core::phase::{
    compute_phase, dominant_track, find_singularities, isochronal_map, phase_variance_index, DEFAULT_PVI_RADIUS,
};
use deap_core::tissue::{run_episode_after, ModelParams, StimulusProtocol, TissueGrid};

#[test]
fn paced_plane_waves_give_one_phase_cycle_per_beat() {
    let n = 64;
    let cycle = 250.0;
    let ep = run(
        &StimulusProtocol::paced_plane(n, n, cycle, 1500.0),
        TissueGrid::new(n, n, DX).unwrap(),
        1500,
    );
    let vm = &ep.vm;
    let phase = compute_phase(vm, None).unwrap();
    let (v0, v1) = phase.valid;
    let g = vm.grid;
    let half = cycle / 2.0;
    for cell in (0..g.len()).step_by(37) {
        let acts: Vec<f64> = {
            let mut out = Vec::new();
            let mut from = 0;
            while let Some(t) = crossing(vm, cell, 0.5, from) {
                out.push(t);
                from = t as usize + 2;
            }
            out
        };
        let wraps: Vec<f64> = (v0 + 1..v1)
            .filter(|&t| phase.frame(t)[cell] - phase.frame(t - 1)[cell] < -PI)
            .map(|t| t as f64 * vm.dt_ms)
            .collect();
        let interior: Vec<f64> = acts
            .iter()
            .copied()
            .filter(|&t| t - half > v0 as f64 && t + half < v1 as f64)
            .collect();
        assert!(interior.len() >= 3, "cell {cell}: {acts:?}");
        for &t in &interior {
            let k = wraps.iter().filter(|&&w| w > t - half && w <= t + half).count();
            assert_eq!(k, 1, "cell {cell}, beat at {t}: wraps {wraps:?}");
        }
    }
}

fn stable_spiral(duration_ms: usize) -> deap_core::tissue::Episode {
    run_episode_after(
        "spiral",
        &StimulusProtocol::s1s2_default(N, N),
        &ModelParams::default(),
        TissueGrid::new(N, N, DX).unwrap(),
        0,
        500,
        duration_ms,
    )
    .unwrap()
}

#[test]
fn pvi_peaks_at_the_rotor_core() {
    let ep = stable_spiral(1000);
    let phase = compute_phase(&ep.vm, None).unwrap();
    let (_, tracks) = find_singularities(&phase);
    let dom = dominant_track(&tracks).expect("spiral has a core");
    assert!(dom.lifetime() >= 300);
    let (r, c) = dom.mean_position();
    let pvi = phase_variance_index(&phase, DEFAULT_PVI_RADIUS, None).unwrap();
    let (pr, pc) = pvi.argmax(None).unwrap();
    let d = (pr as f64 - r).hypot(pc as f64 - c);
    assert!(d <= 5.0, "pvi peak ({pr}, {pc}) vs core ({r:.1}, {c:.1})");
}

#[test]
fn plane_wave_isochrones_are_parallel_and_evenly_spaced() {
    let ep = run(&StimulusProtocol::s1_plane(N, N), TissueGrid::new(N, N, DX).unwrap(), 500);
    let vm = &ep.vm;
    let g = vm.grid;
    let step = 20.0;
    let iso = isochronal_map(vm, (20.0, 300.0), step, None).unwrap();
    // Speed from the activation times on the centre row.
    let row = N / 2;
    let x: Vec<f64> = (16..112).map(|c| c as f64 * DX).collect();
    let t: Vec<f64> = (16..112).map(|c| iso.activation_ms[g.index(row, c)]).collect();
    let cv = 1.0 / fit_line(&x, &t).0;
    // Parallel: one band index per column across the central rows.
    for col in 16..112 {
        let bands: Vec<u32> = (16..112).filter_map(|r| iso.bands[g.index(r, col)]).collect();
        let (lo, hi) = (bands.iter().min().unwrap(), bands.iter().max().unwrap());
        assert!(hi - lo <= 1, "column {col} spans bands {lo}..{hi}");
    }
    // Spacing: columns where the band index changes along the centre row.
    let edges: Vec<f64> = (17..112)
        .filter(|&c| iso.bands[g.index(row, c)] != iso.bands[g.index(row, c - 1)])
        .map(|c| c as f64 * DX)
        .collect();
    assert!(edges.len() >= 3, "{edges:?}");
    let spacing = (edges[edges.len() - 1] - edges[0]) / (edges.len() - 1) as f64;
    assert!((spacing / cv - step).abs() / step < 0.1, "spacing {spacing} mm, cv {cv} mm/ms");
}

#[test]
fn spiral_isochrones_wind_around_the_core() {
    let ep = stable_spiral(600);
    let vm = &ep.vm;
    let phase = compute_phase(vm, None).unwrap();
    let (_, tracks) = find_singularities(&phase);
    let (r0, c0) = dominant_track(&tracks).unwrap().mean_position();
    let iso = isochronal_map(vm, (100.0, 260.0), 10.0, None).unwrap();
    let g = vm.grid;
    let radius = 16.0;
    let samples: Vec<f64> = (0..72)
        .filter_map(|k| {
            let a = (k as f64 * 5.0).to_radians();
            let (r, c) = (r0 + radius * a.sin(), c0 + radius * a.cos());
            if r < 0.0 || c < 0.0 || r >= g.ny as f64 - 0.5 || c >= g.nx as f64 - 0.5 {
                return None;
            }
            let t = iso.activation_ms[g.index(r.round() as usize, c.round() as usize)];
            t.is_finite().then_some(t)
        })
        .collect();
    assert!(samples.len() >= 54, "circle leaves the sheet");
    let steps: Vec<f64> = samples.windows(2).map(|w| w[1] - w[0]).collect();
    let up = steps.iter().filter(|&&d| d > 0.0).count();
    let down = steps.iter().filter(|&&d| d < 0.0).count();
    let winding_deg = up.max(down) as f64 * 5.0;
    assert!(winding_deg >= 270.0, "activation time advances over only {winding_deg} deg");
}
