//! One function per subcommand. Each reads verified upstream artifacts and
//! writes its own stage directory plus manifest.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use deap_core::baseline::{activation_movie, detect_activations, interpolate_elapsed, ActivationField};
use deap_core::container::{self, FrameHeader};
use deap_core::dataset::{build_dataset, prepare_episode, CorpusSpec, EpisodeSample};
use deap_core::eval::{compare_pipelines, infer_movie, infer_roi, ComparisonReport, EstimateSource};
use deap_core::nn::{Model, ModelManifest, MANIFEST_FILE, WEIGHTS_FILE};
use deap_core::phase::{analyze as phase_analyze, compute_phase, dominant_track, find_singularities, PsTrack};
use deap_core::sensing::{forward_egm, EgmMeta, EgmRecording};
use deap_core::tissue::{run_episode, Episode, EpisodeLabel, EpisodeMeta, StimulusProtocol, TissueGrid};
use deap_core::train::{train as train_model, TrainHistory};
use deap_core::{DeapError, GridSpec, VmMovie};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{Protocol, RunConfig};
use crate::figures;
use crate::manifest::{git_describe, upstream, Manifest, StageWriter, MANIFEST_NAME};
use crate::CliError;

/// Tracks at least this long count as sustained rotors.
const SUSTAINED_MS: f64 = 300.0;
/// Episodes rendered as frame strips and panels in the report.
const REPORT_EPISODES: usize = 3;
const STRIP_FRAMES: usize = 6;
const STRIP_SPACING_MS: f64 = 20.0;

type Res<T> = Result<T, CliError>;

fn write_movie(path: &Path, movie: &VmMovie) -> Res<()> {
    let header = FrameHeader {
        nx: movie.grid.nx as u32,
        ny: movie.grid.ny as u32,
        n_frames: movie.n_frames as u32,
        dt_ms: movie.dt_ms as f32,
        dx_mm: movie.grid.dx_mm as f32,
    };
    container::save_frames(path, &header, &movie.data)?;
    Ok(())
}

fn read_movie(path: &Path, grid: GridSpec, t0_ms: f64) -> Res<VmMovie> {
    let (h, data) = container::load_frames(path)?;
    if h.nx as usize != grid.nx || h.ny as usize != grid.ny {
        return Err(DeapError::Format {
            context: path.display().to_string(),
            reason: format!("expected a {}x{} grid, found {}x{}", grid.nx, grid.ny, h.nx, h.ny),
        }
        .into());
    }
    Ok(VmMovie::new(grid, h.n_frames as usize, h.dt_ms as f64, t0_ms, data)?)
}

fn write_map(path: &Path, grid: &GridSpec, values: &[f64]) -> Res<()> {
    let data: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    write_movie(path, &VmMovie::new(*grid, 1, 1.0, 0.0, data)?)
}

fn read_map(path: &Path) -> Res<Vec<f64>> {
    let (_, data) = container::load_frames(path)?;
    Ok(data.into_iter().map(f64::from).collect())
}

fn create(path: &Path) -> Res<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_text(path: &Path, text: &str) -> Res<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn has_stage(root: &Path, stage: &str) -> bool {
    root.join(stage).join(MANIFEST_NAME).exists()
}

fn load_sample(root: &Path, id: &str, grid_cells: usize) -> Res<EpisodeSample> {
    let ep = Episode::load(&root.join("simulate"), id)?;
    let rec = EgmRecording::load(&root.join("sense"), id)?;
    Ok(prepare_episode(&ep, rec, grid_cells)?)
}

fn roi_of(root: &Path, id: &str, grid_cells: usize) -> Res<GridSpec> {
    let meta: EgmMeta = container::load_json(&root.join("sense").join(format!("{id}.egm.json")))?;
    Ok(meta.array.roi(grid_cells))
}

fn load_model(root: &Path) -> Res<Model> {
    Ok(Model::load(&root.join("train"))?)
}

/// Keeps `wanted` ids that are present in `available`, in `wanted` order.
fn restrict(wanted: &[String], available: &[String]) -> Vec<String> {
    wanted.iter().filter(|id| available.contains(id)).cloned().collect()
}

#[derive(Debug, Serialize)]
struct PsStats {
    n_tracks: usize,
    sustained_tracks: usize,
    max_lifetime_ms: f64,
    mean_lifetime_ms: f64,
    median_lifetime_ms: f64,
}

fn ps_stats(tracks: &[PsTrack], dt_ms: f64) -> PsStats {
    let mut life: Vec<f64> = tracks.iter().map(|t| t.lifetime() as f64 * dt_ms).collect();
    life.sort_by(f64::total_cmp);
    let n = life.len();
    PsStats {
        n_tracks: n,
        sustained_tracks: life.iter().filter(|&&l| l >= SUSTAINED_MS).count(),
        max_lifetime_ms: life.last().copied().unwrap_or(0.0),
        mean_lifetime_ms: if n == 0 { 0.0 } else { life.iter().sum::<f64>() / n as f64 },
        median_lifetime_ms: match n {
            0 => 0.0,
            _ if n % 2 == 1 => life[n / 2],
            _ => 0.5 * (life[n / 2 - 1] + life[n / 2]),
        },
    }
}

#[derive(Debug, Serialize)]
struct EpisodeSummary {
    id: String,
    label: EpisodeLabel,
    cycle_length_ms: Option<f64>,
    non_capture: bool,
    ps: Option<PsStats>,
}

fn simulate_one(config: &RunConfig, corpus: &CorpusSpec, i: usize) -> Res<Episode> {
    let s = &config.simulate;
    let id = corpus.episode_id(i);
    let seed = corpus.episode_seed(i);
    let protocol = match s.protocol {
        Protocol::Fibrillation => return Ok(corpus.simulate(i, &s.params)?),
        Protocol::S1s2 => StimulusProtocol::s1s2_default(s.nx, s.ny),
        Protocol::Plane => StimulusProtocol::s1_plane(s.nx, s.ny),
        Protocol::Paced => StimulusProtocol::paced_plane(s.nx, s.ny, s.paced_cycle_ms, s.duration_ms as f64),
        Protocol::Rest => StimulusProtocol::none(),
    };
    let grid = TissueGrid::new(s.nx, s.ny, s.dx_mm)?;
    Ok(run_episode(id, &protocol, &s.params, grid, seed, s.duration_ms)?)
}

pub fn simulate(config: &RunConfig, root: &Path) -> Res<()> {
    let corpus = config.corpus();
    let mut w = StageWriter::new(root, "simulate")?;
    let dir = w.dir.clone();
    let with_ps = config.simulate.protocol == Protocol::S1s2;
    let results: Vec<(EpisodeSummary, f64)> = (0..corpus.n_episodes)
        .into_par_iter()
        .map(|i| -> Res<(EpisodeSummary, f64)> {
            let start = Instant::now();
            let ep = simulate_one(config, &corpus, i)?;
            ep.save(&dir)?;
            let ps = if with_ps {
                let phase = compute_phase(&ep.vm, None)?;
                let (_, tracks) = find_singularities(&phase);
                Some(ps_stats(&tracks, ep.vm.dt_ms))
            } else {
                None
            };
            let summary = EpisodeSummary {
                id: ep.meta.id.clone(),
                label: ep.meta.label,
                cycle_length_ms: ep.meta.cycle_length_ms,
                non_capture: ep.meta.non_capture,
                ps,
            };
            Ok((summary, start.elapsed().as_secs_f64()))
        })
        .collect::<Res<_>>()?;
    let mut episodes = Vec::new();
    for (s, secs) in results {
        w.record(&s.id, &format!("{}.bin", s.id))?;
        w.record(&s.id, &format!("{}.json", s.id))?;
        w.time(&s.id, secs);
        eprintln!("{}  {:?}  CL {:?} ms", s.id, s.label, s.cycle_length_ms.map(|c| c.round()));
        episodes.push(s);
    }
    w.finish(
        config,
        json!({ "protocol": config.simulate.protocol, "episodes": episodes }),
    )?;
    Ok(())
}

pub fn sense(config: &RunConfig, root: &Path, csv: bool) -> Res<()> {
    let (sim, inputs) = upstream(root, "simulate")?;
    let ids = sim.ids_with_suffix(".bin");
    let mut w = StageWriter::new(root, "sense")?;
    w.inputs(inputs);
    let array = config.array.build()?;
    let noise = config.noise.spec();
    let (sim_dir, dir) = (root.join("simulate"), w.dir.clone());
    let start = Instant::now();
    ids.par_iter()
        .map(|id| -> Res<()> {
            let ep = Episode::load(&sim_dir, id)?;
            let rec = forward_egm(id, &ep.vm, &array, &noise, ep.meta.seed ^ 0xE6)?;
            rec.save(&dir)?;
            if csv {
                rec.write_csv(create(&dir.join(format!("{id}.egm.csv")))?)?;
            }
            Ok(())
        })
        .collect::<Res<()>>()?;
    w.time("sense", start.elapsed().as_secs_f64());
    for id in &ids {
        w.record(id, &format!("{id}.egm.bin"))?;
        w.record(id, &format!("{id}.egm.json"))?;
        if csv {
            w.record(id, &format!("{id}.egm.csv"))?;
        }
    }
    w.finish(config, json!({ "recordings": ids, "array": array, "noise": noise }))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct BaselineSummary {
    id: String,
    activations: usize,
    silent_channels: usize,
    unsupported_frames: usize,
}

pub fn baseline(config: &RunConfig, root: &Path) -> Res<()> {
    let (sen, inputs) = upstream(root, "sense")?;
    let ids = sen.ids_with_suffix(".egm.bin");
    let mut w = StageWriter::new(root, "baseline")?;
    w.inputs(inputs);
    let (sense_dir, dir) = (root.join("sense"), w.dir.clone());
    let g = config.dataset.grid;
    let start = Instant::now();
    let summaries: Vec<BaselineSummary> = ids
        .par_iter()
        .map(|id| -> Res<BaselineSummary> {
            let rec = EgmRecording::load(&sense_dir, id)?;
            let field: ActivationField = detect_activations(&rec)?;
            field.write_csv(create(&dir.join(format!("{id}.activations.csv")))?)?;
            container::save_json(&dir.join(format!("{id}.activations.json")), &field)?;
            let roi = rec.meta.array.roi(g);
            let dt = 1000.0 / rec.meta.fs_hz;
            let n = rec.n_samples();
            let mut elapsed = Vec::with_capacity(n * roi.len());
            let mut unsupported = 0;
            for k in 0..n {
                match interpolate_elapsed(&field, &roi, k as f64 * dt) {
                    Ok(map) => elapsed.extend(map.iter().map(|&v| v as f32)),
                    Err(DeapError::InsufficientSupport { .. }) => {
                        unsupported += 1;
                        elapsed.extend(std::iter::repeat_n(f32::NAN, roi.len()));
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            write_movie(
                &dir.join(format!("{id}.elapsed.bin")),
                &VmMovie::new(roi, n, dt, 0.0, elapsed)?,
            )?;
            let pseudo = activation_movie(&field, &config.eval.template, &roi, 0.0, dt, n)?;
            write_movie(&dir.join(format!("{id}.pseudo.bin")), &pseudo)?;
            Ok(BaselineSummary {
                id: id.clone(),
                activations: field.times_ms.iter().map(Vec::len).sum(),
                silent_channels: field.silent.iter().filter(|&&s| s).count(),
                unsupported_frames: unsupported,
            })
        })
        .collect::<Res<_>>()?;
    w.time("baseline", start.elapsed().as_secs_f64());
    for id in &ids {
        for ext in ["activations.csv", "activations.json", "elapsed.bin", "pseudo.bin"] {
            w.record(id, &format!("{id}.{ext}"))?;
        }
    }
    w.finish(config, json!({ "grid": g, "episodes": summaries }))?;
    Ok(())
}

pub fn train(config: &RunConfig, root: &Path) -> Res<()> {
    let (_, mut inputs) = upstream(root, "simulate")?;
    let (sen, more) = upstream(root, "sense")?;
    inputs.extend(more);
    let ids = sen.ids_with_suffix(".egm.bin");
    let mut w = StageWriter::new(root, "train")?;
    w.inputs(inputs);
    let start = Instant::now();
    let samples: Vec<EpisodeSample> = ids
        .par_iter()
        .map(|id| load_sample(root, id, config.dataset.grid))
        .collect::<Res<_>>()?;
    w.time("load", start.elapsed().as_secs_f64());
    let data = build_dataset(samples, config.dataset.split_seed, config.model.window)?;
    eprintln!(
        "split: {} train, {} val, {} test, {} excluded",
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        data.split.excluded.len()
    );
    let mut model = Model::new(config.model.clone(), config.train.seed)?;
    let start = Instant::now();
    let history: TrainHistory = train_model(&mut model, &data, &config.train, |r| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  ({:.1} s)",
            r.epoch, r.train_loss, r.val_loss, r.seconds
        );
    })?;
    w.time("train", start.elapsed().as_secs_f64());
    eprintln!("best epoch {} (val {:.5})", history.best_epoch, history.best_val_loss);
    model.save(&w.dir, &git_describe())?;
    container::save_json(&w.path("history.json"), &history)?;
    container::save_json(&w.path("split.json"), &data.split)?;
    for name in [WEIGHTS_FILE, MANIFEST_FILE, "history.json", "split.json"] {
        w.record("model", name)?;
    }
    w.finish(
        config,
        json!({
            "n_params": model.n_params(),
            "best_epoch": history.best_epoch,
            "best_val_loss": history.best_val_loss,
            "initial_val_loss": history.initial_val_loss,
            "stopped_early": history.stopped_early,
            "split": data.split,
        }),
    )?;
    Ok(())
}

pub fn infer(config: &RunConfig, root: &Path, all: bool, tissue: bool) -> Res<()> {
    let (_, mut inputs) = upstream(root, "train")?;
    let (sen, more) = upstream(root, "sense")?;
    inputs.extend(more);
    if tissue {
        inputs.extend(upstream(root, "simulate")?.1);
    }
    let model = load_model(root)?;
    let available = sen.ids_with_suffix(".egm.bin");
    let ids = if all {
        available
    } else {
        restrict(&model.training.test_ids, &available)
    };
    let mut w = StageWriter::new(root, "infer")?;
    w.inputs(inputs);
    let dir = w.dir.clone();
    let start = Instant::now();
    ids.par_iter()
        .map(|id| -> Res<()> {
            let mut m = model.clone();
            let rec = EgmRecording::load(&root.join("sense"), id)?;
            write_movie(&dir.join(format!("{id}.deap.bin")), &infer_roi(&mut m, &rec)?)?;
            if tissue {
                let meta: EpisodeMeta = container::load_json(&root.join("simulate").join(format!("{id}.json")))?;
                write_movie(
                    &dir.join(format!("{id}.deap_tissue.bin")),
                    &infer_movie(&mut m, &rec, &meta.grid)?,
                )?;
            }
            Ok(())
        })
        .collect::<Res<()>>()?;
    w.time("infer", start.elapsed().as_secs_f64());
    for id in &ids {
        w.record(id, &format!("{id}.deap.bin"))?;
        if tissue {
            w.record(id, &format!("{id}.deap_tissue.bin"))?;
        }
    }
    let first_ms = (model.config.window / 2) as f64;
    w.finish(config, json!({ "episodes": ids, "first_frame_ms": first_ms, "window": model.config.window }))?;
    Ok(())
}

/// Truth and whichever estimates exist, aligned to the network's output
/// frames on the ROI grid.
fn aligned_movies(root: &Path, sample: &EpisodeSample, window: usize, with_deap: bool, with_baseline: bool) -> Res<Vec<(&'static str, VmMovie)>> {
    let id = &sample.id;
    let first = window / 2;
    let n = sample.recording.n_samples().checked_sub(window - 1).filter(|&n| n > 0).ok_or_else(|| {
        DeapError::Precondition(format!("episode {id} is shorter than one window"))
    })?;
    let roi = sample.roi();
    let dt = sample.target.dt_ms;
    let mut out = vec![("truth", sample.target.slice(first, first + n)?)];
    if with_deap {
        let path = root.join("infer").join(format!("{id}.deap.bin"));
        if path.exists() {
            out.push(("deap", read_movie(&path, roi, first as f64 * dt)?));
        }
    }
    if with_baseline {
        let path = root.join("baseline").join(format!("{id}.pseudo.bin"));
        out.push(("baseline", read_movie(&path, roi, 0.0)?.slice(first, first + n)?));
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct SourceSummary {
    id: String,
    source: String,
    n_tracks: usize,
    dominant_lifetime_ms: Option<f64>,
    dominant_position_cells: Option<(f64, f64)>,
    pvi_peak_cell: Option<(usize, usize)>,
    activated_cells: usize,
}

pub fn analyze(config: &RunConfig, root: &Path, iso_window: (f64, f64), iso_step: f64) -> Res<()> {
    let (_, mut inputs) = upstream(root, "simulate")?;
    let (sen, more) = upstream(root, "sense")?;
    inputs.extend(more);
    let with_deap = has_stage(root, "infer");
    let with_baseline = has_stage(root, "baseline");
    let mut window = config.model.window;
    let mut ids = sen.ids_with_suffix(".egm.bin");
    if with_deap {
        let (inf, more) = upstream(root, "infer")?;
        inputs.extend(more);
        window = inf.config.model.window;
        ids = inf.ids_with_suffix(".deap.bin");
    }
    if with_baseline {
        inputs.extend(upstream(root, "baseline")?.1);
    }
    let mut w = StageWriter::new(root, "analyze")?;
    w.inputs(inputs);
    let dir = w.dir.clone();
    let radius = config.eval.pvi_radius;
    let start = Instant::now();
    let per_episode: Vec<Vec<SourceSummary>> = ids
        .par_iter()
        .map(|id| -> Res<Vec<SourceSummary>> {
            let sample = load_sample(root, id, config.dataset.grid)?;
            let mut out = Vec::new();
            for (src, movie) in aligned_movies(root, &sample, window, with_deap, with_baseline)? {
                let p = phase_analyze(&movie, Some(&sample.mask), radius, Some(iso_window), iso_step)?;
                write_map(&dir.join(format!("{id}.{src}.pvi.bin")), &movie.grid, &p.pvi.values)?;
                let iso = p.isochrones.expect("window requested");
                write_map(&dir.join(format!("{id}.{src}.iso.bin")), &movie.grid, &iso.activation_ms)?;
                container::save_json(&dir.join(format!("{id}.{src}.ps.json")), &p.ps_tracks)?;
                let dom = dominant_track(&p.ps_tracks);
                out.push(SourceSummary {
                    id: id.clone(),
                    source: src.to_string(),
                    n_tracks: p.ps_tracks.len(),
                    dominant_lifetime_ms: dom.map(|t| t.lifetime() as f64 * movie.dt_ms),
                    dominant_position_cells: dom.map(PsTrack::mean_position),
                    pvi_peak_cell: p.pvi.argmax(Some(&sample.mask)),
                    activated_cells: iso.activation_ms.iter().filter(|v| v.is_finite()).count(),
                });
            }
            Ok(out)
        })
        .collect::<Res<_>>()?;
    w.time("analyze", start.elapsed().as_secs_f64());
    for rows in &per_episode {
        for s in rows {
            for ext in ["pvi.bin", "iso.bin", "ps.json"] {
                w.record(&s.id, &format!("{}.{}.{ext}", s.id, s.source))?;
            }
        }
    }
    w.finish(
        config,
        json!({
            "pvi_radius": radius,
            "isochrone_window_ms": iso_window,
            "isochrone_step_ms": iso_step,
            "window": window,
            "episodes": per_episode.into_iter().flatten().collect::<Vec<_>>(),
        }),
    )?;
    Ok(())
}

pub fn eval(config: &RunConfig, root: &Path, truth_as_estimate: bool, all: bool) -> Res<()> {
    let (_, mut inputs) = upstream(root, "simulate")?;
    let (sen, more) = upstream(root, "sense")?;
    inputs.extend(more);
    let trained = has_stage(root, "train");
    let model = if trained || !truth_as_estimate {
        inputs.extend(upstream(root, "train")?.1);
        load_model(root)?
    } else {
        // Truth-as-estimate never runs the network; it only fixes the window.
        Model::new(config.model.clone(), 0)?
    };
    let available = sen.ids_with_suffix(".egm.bin");
    let ids = if all || model.training.test_ids.is_empty() {
        available
    } else {
        restrict(&model.training.test_ids, &available)
    };
    let mut w = StageWriter::new(root, "eval")?;
    w.inputs(inputs);
    let start = Instant::now();
    let samples: Vec<EpisodeSample> = ids
        .par_iter()
        .map(|id| load_sample(root, id, config.dataset.grid))
        .collect::<Res<_>>()?;
    let source = if truth_as_estimate {
        EstimateSource::Truth
    } else {
        EstimateSource::Pipelines
    };
    let report = compare_pipelines(&model, &samples, &config.eval, source);
    w.time("eval", start.elapsed().as_secs_f64());
    report.save_json(&w.path("report.json"))?;
    report.write_csv(create(&w.path("report.csv"))?)?;
    w.record("report", "report.json")?;
    w.record("report", "report.csv")?;
    let s = &report.summary;
    println!("episodes          {} ({} failed)", s.n_rows, s.n_failed);
    println!("pvi-SSIM network  {:.4}", s.mean_ssim_deap);
    println!("pvi-SSIM baseline {:.4}", s.mean_ssim_baseline);
    println!("network win rate  {:.3}", s.win_rate);
    for r in report.rows.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", r.id, r.error.as_deref().unwrap_or_default());
    }
    w.finish(config, serde_json::to_value(&report.summary).map_err(DeapError::from)?)?;
    Ok(())
}

pub fn report(config: &RunConfig, root: &Path) -> Res<()> {
    let (_, mut inputs) = upstream(root, "eval")?;
    for stage in ["train", "infer", "baseline", "analyze"] {
        if has_stage(root, stage) {
            inputs.extend(upstream(root, stage)?.1);
        }
    }
    let eval: ComparisonReport = container::load_json(&root.join("eval").join("report.json"))?;
    let mut w = StageWriter::new(root, "report")?;
    w.inputs(inputs);
    let mut html = Vec::new();

    let scored: Vec<(f64, f64)> = eval
        .rows
        .iter()
        .filter_map(|r| Some((r.baseline.as_ref()?.pvi_ssim, r.deap.as_ref()?.pvi_ssim)))
        .collect();
    write_text(
        &w.path("scatter.svg"),
        &figures::scatter_svg(&scored, "baseline pvi-SSIM", "network pvi-SSIM", "Per-episode pvi-SSIM"),
    )?;
    w.record("scatter", "scatter.svg")?;
    write_text(
        &w.path("ssim_box.svg"),
        &figures::box_svg(
            &[
                ("network", scored.iter().map(|p| p.1).collect()),
                ("baseline", scored.iter().map(|p| p.0).collect()),
            ],
            "pvi-SSIM",
            "pvi-SSIM distribution",
        ),
    )?;
    w.record("ssim_box", "ssim_box.svg")?;
    html.push(r#"<h2>Scores</h2><img src="scatter.svg"><img src="ssim_box.svg">"#.to_string());

    let history = root.join("train").join("history.json");
    if has_stage(root, "train") {
        if let Ok(h) = container::load_json::<TrainHistory>(&history) {
            let pts = |f: fn(&deap_core::train::EpochRecord) -> f64| h.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect();
            write_text(
                &w.path("training.svg"),
                &figures::curves_svg(
                    &[
                        ("train", "#1f77b4", pts(|e| e.train_loss)),
                        ("validation", "#d62728", pts(|e| e.val_loss)),
                    ],
                    "epoch",
                    "MSE",
                    "Training curve",
                ),
            )?;
            w.record("training", "training.svg")?;
            html.push(r#"<h2>Training</h2><img src="training.svg">"#.to_string());
        }
    }

    let mut ids: Vec<String> = eval.rows.iter().filter(|r| r.error.is_none()).map(|r| r.id.clone()).collect();
    ids.sort();
    ids.truncate(REPORT_EPISODES);
    let window = match container::load_json::<ModelManifest>(&root.join("train").join(MANIFEST_FILE)) {
        Ok(m) => m.config.window,
        Err(_) => config.model.window,
    };
    let g = config.dataset.grid;
    for id in &ids {
        html.push(format!("<h2>{}</h2>", figures::escape(id)));
        if has_stage(root, "baseline") {
            let sample = load_sample(root, id, g)?;
            let movies = aligned_movies(root, &sample, window, has_stage(root, "infer"), true)?;
            let n = movies[0].1.n_frames;
            let frames: Vec<usize> = (0..STRIP_FRAMES)
                .map(|k| ((k as f64 * STRIP_SPACING_MS / movies[0].1.dt_ms) as usize).min(n - 1))
                .collect();
            let rows: Vec<Vec<Vec<f64>>> = movies
                .iter()
                .map(|(_, m)| {
                    frames
                        .iter()
                        .map(|&t| {
                            m.frame(t)
                                .iter()
                                .zip(&sample.mask)
                                .map(|(&v, &inside)| if inside { v as f64 } else { f64::NAN })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let name = format!("{id}.strip.png");
            figures::tiles_png(&w.path(&name), &rows, g, g, (0.0, 1.0), 4)?;
            w.record(id, &name)?;
            let labels: Vec<&str> = movies.iter().map(|m| m.0).collect();
            html.push(format!(
                r#"<p>Frames every {STRIP_SPACING_MS} ms; rows: {}</p><img src="{name}">"#,
                labels.join(", ")
            ));
        }
        if has_stage(root, "analyze") {
            let adir = root.join("analyze");
            let sources: Vec<&str> = ["truth", "deap", "baseline"]
                .into_iter()
                .filter(|s| adir.join(format!("{id}.{s}.pvi.bin")).exists())
                .collect();
            if sources.is_empty() {
                continue;
            }
            let roi = roi_of(root, id, g)?;
            let pvi: Vec<Vec<f64>> = sources
                .iter()
                .map(|s| read_map(&adir.join(format!("{id}.{s}.pvi.bin"))))
                .collect::<Res<_>>()?;
            let hi = pvi.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-6);
            let name = format!("{id}.pvi.png");
            figures::tiles_png(&w.path(&name), &[pvi], roi.nx, roi.ny, (0.0, hi), 6)?;
            w.record(id, &name)?;
            let am: Manifest = Manifest::load(root, "analyze")?;
            let iso_window = serde_json::from_value::<(f64, f64)>(am.summary["isochrone_window_ms"].clone())
                .map_err(DeapError::from)?;
            let iso_step = am.summary["isochrone_step_ms"].as_f64().unwrap_or(10.0);
            let panels: Vec<(&str, Vec<f64>)> = sources
                .iter()
                .map(|s| Ok((*s, read_map(&adir.join(format!("{id}.{s}.iso.bin")))?)))
                .collect::<Res<_>>()?;
            let iso_name = format!("{id}.iso.svg");
            write_text(
                &w.path(&iso_name),
                &figures::isochrone_svg(&panels, roi.nx, roi.ny, iso_window, iso_step),
            )?;
            w.record(id, &iso_name)?;
            html.push(format!(
                r#"<p>Phase variance ({}; scale 0 to {hi:.3}) and isochrones</p><img src="{name}"><img src="{iso_name}">"#,
                sources.join(", ")
            ));
        }
    }

    let s = &eval.summary;
    let mut table = String::from("<table><tr><th>episode</th><th>network</th><th>baseline</th><th>note</th></tr>");
    for r in &eval.rows {
        let f = |e: &Option<deap_core::eval::EstimateScore>| e.as_ref().map_or("-".into(), |e| format!("{:.3}", e.pvi_ssim));
        table.push_str(&format!(
            "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
            figures::escape(&r.id),
            f(&r.deap),
            f(&r.baseline),
            figures::escape(r.error.as_deref().unwrap_or(""))
        ));
    }
    table.push_str("</table>");
    let page = format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>Mapping report</title>\
<style>body{{font-family:sans-serif;margin:2em}}img{{margin:4px;vertical-align:top}}td,th{{padding:2px 8px}}</style></head><body>\n\
<h1>Mapping report</h1>\n<p>Scoring: {:?}; PVI radius {} cells; {} episodes, {} failed. Mean pvi-SSIM network {:.3}, baseline {:.3}; network wins {:.0}%.</p>\n{}\n{}\n</body></html>\n",
        eval.source,
        eval.pvi_radius,
        s.n_rows,
        s.n_failed,
        s.mean_ssim_deap,
        s.mean_ssim_baseline,
        100.0 * s.win_rate,
        table,
        html.join("\n")
    );
    write_text(&w.path("index.html"), &page)?;
    w.record("index", "index.html")?;
    w.finish(config, json!({ "episodes": ids }))?;
    Ok(())
}
