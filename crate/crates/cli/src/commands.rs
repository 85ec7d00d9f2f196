use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gatelab::depth::{depth_metrics, mean_metrics, Alignment, DepthFrame, DepthMetrics};
use gatelab::horizon::{frame_variation_stats, horizon_report, pooled_beta_stats, Histogram, HISTOGRAM_BINS};
use gatelab::probes::{profile_traces, run_redundancy_probe, sweep_fixed_alpha, sweep_tau};
use gatelab::report::{csv_preamble, fmt_f64, to_json_pretty, write_json, Envelope};
use gatelab::state_model::Model;
use gatelab::trajectory::{ate, parse_kitti, parse_tum, rpe_rotation, Trajectory};
use gatelab::update_rules::UpdatePolicy;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;

fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model).context("stage model: building the decoder")
}

fn prepare_out(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out).with_context(|| format!("stage output: creating {}", cfg.out.display()))?;
    Ok(&cfg.out)
}

/// File-name-safe policy label.
pub fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '-' })
        .collect()
}

fn write_csv_file(
    path: &Path,
    cfg: &RunConfig,
    body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> Result<()> {
    let mut buf = csv_preamble(cfg)?.into_bytes();
    body(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("stage output: writing {}", path.display()))
}

pub fn profile_beta(cfg: &RunConfig) -> Result<()> {
    let model = build_model(cfg)?;
    let traces = profile_traces(&model, &cfg.stream, cfg.profile_sequences).context("stage profile: running TTT3R")?;
    let stats = pooled_beta_stats(&traces).context("stage statistics: pooled beta")?;
    let variation = traces
        .iter()
        .map(frame_variation_stats)
        .collect::<gatelab::Result<Vec<_>>>()
        .context("stage statistics: frame variation")?;
    let horizon = horizon_report(stats.mean, 1.0).context("stage horizon")?;
    let hist = Histogram::of_traces(&traces);

    let out = prepare_out(cfg)?;
    write_json(
        &out.join("beta_stats.json"),
        &Envelope::new(
            "profile-beta",
            cfg,
            json!({
                "beta_stats": stats,
                "variation": variation,
                "horizon": horizon,
                "histogram_bins": HISTOGRAM_BINS,
            }),
        ),
    )?;
    write_csv_file(&out.join("beta_hist.csv"), cfg, |w| hist.write_csv(w))
}

pub fn probe_redundancy(cfg: &RunConfig) -> Result<()> {
    let model = build_model(cfg)?;
    let policies = cfg.parsed_policies()?;
    let reports = run_redundancy_probe(&cfg.stream, &policies, &model, cfg.tau).context("stage probe: redundancy injection")?;

    let out = prepare_out(cfg)?;
    for r in &reports {
        let label = sanitize(&r.policy);
        write_csv_file(&out.join(format!("probe_{label}.csv")), cfg, |w| r.write_csv(w))?;
        write_csv_file(&out.join(format!("trace_{label}.csv")), cfg, |w| r.trace.write_csv(w))?;
        write_json(
            &out.join(format!("trace_{label}.json")),
            &Envelope::new("gate-trace", cfg, json!({ "policy": r.policy, "trace": r.trace })),
        )?;
    }
    let summaries: Vec<_> = reports
        .iter()
        .map(|r| json!({ "policy": r.policy, "summary": r.summary }))
        .collect();
    let (start, end) = reports
        .first()
        .map(|r| (r.inject_start, r.inject_end))
        .context("stage probe: no reports")?;
    write_json(
        &out.join("probe_summary.json"),
        &Envelope::new(
            "probe-redundancy",
            cfg,
            json!({ "inject_start": start, "inject_end": end, "reports": summaries }),
        ),
    )?;
    Ok(())
}

pub fn horizon(cfg: &RunConfig) -> Result<()> {
    let report = horizon_report(cfg.beta_bar, cfg.alpha_min).context("stage horizon")?;
    let out = prepare_out(cfg)?;
    write_json(&out.join("horizon.json"), &Envelope::new("horizon", cfg, json!({ "horizon": report })))?;
    Ok(())
}

pub fn sweep_tau_cmd(cfg: &RunConfig) -> Result<()> {
    let model = build_model(cfg)?;
    let base = cfg
        .parsed_policies()?
        .into_iter()
        .find(|p| matches!(p, UpdatePolicy::Afg { .. }))
        .context("stage sweep-tau: the policy list has no adaptive gate to sweep")?;
    let rows = sweep_tau(&cfg.taus, &cfg.stream, &base, &model).context("stage sweep-tau")?;

    let out = prepare_out(cfg)?;
    write_csv_file(&out.join("sweep_tau.csv"), cfg, |w| {
        writeln!(w, "tau,alpha_min_on_duplicates,alpha_mean_on_duplicates,alpha_mean_on_prefix,drift_at_end,suppression_ratio")?;
        for r in &rows {
            let cells = [
                r.tau,
                r.alpha_min_on_duplicates,
                r.alpha_mean_on_duplicates,
                r.alpha_mean_on_prefix,
                r.drift_at_end,
                r.suppression_ratio,
            ];
            writeln!(w, "{}", cells.map(fmt_f64).join(","))?;
        }
        Ok(())
    })?;
    write_json(
        &out.join("sweep_tau.json"),
        &Envelope::new("sweep-tau", cfg, json!({ "policy": base.label(), "rows": rows })),
    )?;
    Ok(())
}

pub fn sweep_alpha_cmd(cfg: &RunConfig) -> Result<()> {
    let model = build_model(cfg)?;
    let rows = sweep_fixed_alpha(&cfg.fixed_alphas, &cfg.stream, &model, cfg.tau).context("stage sweep-alpha")?;

    let out = prepare_out(cfg)?;
    write_csv_file(&out.join("sweep_alpha.csv"), cfg, |w| {
        writeln!(w, "label,alpha,alpha_mean_on_duplicates,mean_update_norm_on_duplicates,drift_at_end,suppression_ratio")?;
        for r in &rows {
            let cells = [
                r.alpha_mean_on_duplicates,
                r.mean_update_norm_on_duplicates,
                r.drift_at_end,
                r.suppression_ratio,
            ];
            writeln!(
                w,
                "{},{},{}",
                r.label,
                r.alpha.map(fmt_f64).unwrap_or_default(),
                cells.map(fmt_f64).join(",")
            )?;
        }
        Ok(())
    })?;
    write_json(&out.join("sweep_alpha.json"), &Envelope::new("sweep-alpha", cfg, json!({ "rows": rows })))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TrajFormat {
    Auto,
    Tum,
    Kitti,
}

/// 8 numbers on the first data line means TUM, 12 means KITTI.
fn sniff_format(path: &Path) -> Result<TrajFormat> {
    let text = fs::read_to_string(path).with_context(|| format!("stage input: reading {}", path.display()))?;
    let fields = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .map_or(0, |l| l.split_whitespace().count());
    match fields {
        8 => Ok(TrajFormat::Tum),
        12 => Ok(TrajFormat::Kitti),
        n => bail!("stage input: cannot tell the format of {} ({n} fields per line)", path.display()),
    }
}

fn load_trajectory(path: &Path, format: TrajFormat) -> Result<Trajectory> {
    let format = match format {
        TrajFormat::Auto => sniff_format(path)?,
        f => f,
    };
    let traj = match format {
        TrajFormat::Kitti => parse_kitti(path),
        _ => parse_tum(path),
    };
    traj.with_context(|| format!("stage input: parsing {}", path.display()))
}

#[derive(Debug, Serialize)]
struct TrajEvalConfig<'a> {
    est: &'a Path,
    gt: &'a Path,
    delta: usize,
    format: TrajFormat,
}

pub fn eval_traj(est: &Path, gt: &Path, format: TrajFormat, delta: usize, csv: bool) -> Result<String> {
    let est_traj = load_trajectory(est, format)?;
    let gt_traj = load_trajectory(gt, format)?;
    let ate_report = ate(&est_traj, &gt_traj).context("stage ate")?;
    let rpe = rpe_rotation(&est_traj, &gt_traj, delta).context("stage rpe")?;
    if csv {
        return Ok(format!(
            "ate_m,rpe_rot_deg,matches,scale\n{},{},{},{}\n",
            fmt_f64(ate_report.rmse),
            fmt_f64(rpe),
            ate_report.matches,
            fmt_f64(ate_report.alignment.scale)
        ));
    }
    let cfg = TrajEvalConfig { est, gt, delta, format };
    Ok(to_json_pretty(&Envelope::new(
        "eval-traj",
        &cfg,
        json!({
            "ate_m": ate_report.rmse,
            "rpe_rot_deg": rpe,
            "matches": ate_report.matches,
            "alignment": ate_report.alignment,
        }),
    ))?)
}

fn is_depth_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("dpth") || e.eq_ignore_ascii_case("csv"))
}

#[derive(Debug, Serialize)]
struct DepthEvalConfig<'a> {
    pred_dir: &'a Path,
    gt_dir: &'a Path,
    alignment: Alignment,
}

#[derive(Debug, Serialize)]
struct FrameResult {
    name: String,
    #[serde(flatten)]
    metrics: DepthMetrics,
}

/// Frames are paired by file name; every ground-truth frame needs a prediction.
pub fn eval_depth(pred_dir: &Path, gt_dir: &Path, alignment: Alignment, csv: bool) -> Result<String> {
    let mut gt_files: Vec<PathBuf> = fs::read_dir(gt_dir)
        .with_context(|| format!("stage input: listing {}", gt_dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    gt_files.retain(|p| is_depth_file(p));
    gt_files.sort();
    if gt_files.is_empty() {
        bail!("stage input: no .dpth or .csv frames in {}", gt_dir.display());
    }

    let mut frames = Vec::with_capacity(gt_files.len());
    for gt_path in &gt_files {
        let name = gt_path.file_name().expect("listed file").to_string_lossy().into_owned();
        let pred_path = pred_dir.join(&name);
        let pred = DepthFrame::load(&pred_path).with_context(|| format!("stage input: prediction for {name}"))?;
        let gt = DepthFrame::load(gt_path).with_context(|| format!("stage input: ground truth {name}"))?;
        let metrics = depth_metrics(&pred, &gt, alignment).with_context(|| format!("stage metrics: {name}"))?;
        frames.push(FrameResult { name, metrics });
    }
    let all: Vec<DepthMetrics> = frames.iter().map(|f| f.metrics).collect();
    let mean = mean_metrics(&all)?;

    if csv {
        let mut s = String::from("frame,abs_rel,rmse,delta_1_25,n_pixels,scale,shift\n");
        for (name, m) in frames.iter().map(|f| (f.name.as_str(), &f.metrics)).chain([("mean", &mean)]) {
            s.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                fmt_f64(m.abs_rel),
                fmt_f64(m.rmse),
                fmt_f64(m.delta_1_25),
                m.n_pixels,
                fmt_f64(m.scale),
                fmt_f64(m.shift)
            ));
        }
        return Ok(s);
    }
    let cfg = DepthEvalConfig {
        pred_dir,
        gt_dir,
        alignment,
    };
    Ok(to_json_pretty(&Envelope::new(
        "eval-depth",
        &cfg,
        json!({ "mean": mean, "frames": frames }),
    ))?)
}
