//! Experiment entry point and result files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::boundary::{BoundaryConfig, BoundaryVariant};
use crate::error::{Error, Result};
use crate::hyperband::write_schedule_csv;
use crate::nes::{NesConfig, NesVariant};
use crate::tensorimg::save_image;
use crate::trace::{csv_err, write_boundary_csv, write_nes_csv};
use crate::whitebox::{whitebox_sweep, write_sweep_csv, CwConfig, SweepRow};

use super::batch::{run_batch, AttackSpec, RunOutcome, RunRecord};
use super::config::{BenchFamily, ExperimentConfig};
use super::sphere::{sphere_sweep, SphereSweepResult};
use super::stats::{histogram, mean_curve, summarize, AttackSummary, CurvePoint, HistogramBin};
use super::{load_images, run_jobs, AttackImage, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SphereSweep,
    Boundary,
    Nes,
    Hyperband,
    Whitebox,
    Bench,
}

/// LF-versus-RGB comparison of one attack family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub family: String,
    pub lf_attack: String,
    pub rgb_attack: String,
    pub lf_median_queries: f64,
    pub rgb_median_queries: f64,
    /// `rgb / lf`, with failures counted as infinitely expensive.
    pub speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub experiment: Experiment,
    pub runs: usize,
    pub errors: usize,
    pub summaries: Vec<AttackSummary>,
    pub comparisons: Vec<Comparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sphere: Option<SphereSweepResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub whitebox: Option<Vec<SweepRow>>,
    pub output_dir: PathBuf,
}

impl ExperimentReport {
    /// Every run ended in an error.
    pub fn all_failed(&self) -> bool {
        self.runs > 0 && self.errors == self.runs
    }
}

#[derive(Serialize)]
struct JsonSummary<'a> {
    config: &'a ExperimentConfig,
    #[serde(flatten)]
    report: &'a ExperimentReport,
}

/// Builds the target, draws the images, runs the experiment and writes its
/// result files under `config.output_dir`.
pub fn run_experiment(kind: Experiment, config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let target = Target::build(&config.model, config.defense)?;
    let images = load_images(config, &target)?;
    run_experiment_on(kind, config, &target, &images)
}

/// Like [`run_experiment`] with the target and images supplied.
pub fn run_experiment_on(
    kind: Experiment,
    config: &ExperimentConfig,
    target: &Target,
    images: &[AttackImage],
) -> Result<ExperimentReport> {
    let out = &config.output_dir;
    fs::create_dir_all(out)?;
    if config.write_images {
        fs::create_dir_all(out.join("images"))?;
        for img in images {
            save_image(&img.image, out.join("images").join(format!("original_img{}.{}", img.index, ext(img))))?;
        }
    }
    let mut report = ExperimentReport {
        experiment: kind,
        runs: 0,
        errors: 0,
        summaries: Vec::new(),
        comparisons: Vec::new(),
        sphere: None,
        whitebox: None,
        output_dir: out.clone(),
    };
    match kind {
        Experiment::SphereSweep => {
            let s = &config.sphere_sweep;
            let predict = |img: &crate::tensorimg::ImageTensor| target.predict(img);
            let result = sphere_sweep(predict, images, &s.radii, &s.ratios, s.samples, s.clip, config.seed, config.workers)?;
            write_csv(&out.join("sphere.csv"), &result.rows)?;
            write_csv(&out.join("sphere_auc.csv"), &result.auc)?;
            report.sphere = Some(result);
        }
        Experiment::Whitebox => {
            let model = target
                .classifier()
                .ok_or_else(|| Error::Config("model.kind: the white-box sweep needs a local model".into()))?;
            if config.defense != crate::oracle::DefenseTransform::Identity {
                log::warn!("the white-box sweep attacks the undefended model");
            }
            let pairs: Vec<_> = images.iter().map(|i| (i.image.clone(), i.label)).collect();
            let ratios = &config.whitebox.ratios;
            let attack: &CwConfig = &config.whitebox.attack;
            let rows = run_jobs(config.workers, ratios.len(), |i| {
                whitebox_sweep(model.as_ref(), &pairs, &ratios[i..=i], attack).map(|mut r| r.remove(0))
            })?
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            write_sweep_csv(&rows, BufWriter::new(File::create(out.join("whitebox.csv"))?))?;
            report.runs = ratios.len() * images.len();
            report.whitebox = Some(rows);
        }
        Experiment::Boundary | Experiment::Nes | Experiment::Hyperband | Experiment::Bench => {
            let specs = attack_specs(kind, config);
            let mut records = Vec::new();
            let mut hist = Vec::new();
            let mut curve = Vec::new();
            for spec in &specs {
                let outcomes = run_batch(
                    target,
                    spec,
                    images,
                    config.repetitions,
                    config.seed,
                    config.workers,
                    config.write_traces || config.write_images,
                )?;
                let name = spec.name();
                write_run_files(config, spec, images, &outcomes)?;
                let recs: Vec<&RunRecord> = outcomes.iter().map(|o| &o.record).collect();
                report.summaries.push(summarize(&name, &recs));
                hist.extend(histogram(&name, &recs, spec.max_queries(), config.histogram_bins));
                let refs: Vec<&RunOutcome> = outcomes.iter().collect();
                curve.extend(mean_curve(&name, &refs, spec.max_queries()));
                records.extend(outcomes.into_iter().map(|o| o.record));
            }
            report.runs = records.len();
            report.errors = records.iter().filter(|r| r.error.is_some()).count();
            report.comparisons = comparisons(&report.summaries);
            write_csv(&out.join("runs.csv"), &records)?;
            write_csv(&out.join("summary.csv"), &report.summaries)?;
            write_csv::<HistogramBin>(&out.join("histogram.csv"), &hist)?;
            write_csv::<CurvePoint>(&out.join("curve.csv"), &curve)?;
            if kind == Experiment::Bench {
                write_csv(&out.join("comparison.csv"), &report.comparisons)?;
            }
        }
    }
    let json = JsonSummary { config, report: &report };
    let text = serde_json::to_string_pretty(&json).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("summary.json"), text + "\n")?;
    Ok(report)
}

/// The attacks an experiment runs, in output order.
pub fn attack_specs(kind: Experiment, config: &ExperimentConfig) -> Vec<AttackSpec> {
    match kind {
        Experiment::Boundary => vec![AttackSpec::Boundary(config.boundary.clone())],
        Experiment::Nes => vec![AttackSpec::Nes(config.nes.clone())],
        Experiment::Hyperband => vec![AttackSpec::Hyperband(config.hyperband.clone())],
        Experiment::Bench => {
            let mut specs = Vec::new();
            for family in &config.bench.families {
                match family {
                    BenchFamily::Boundary => {
                        let lf = BoundaryConfig {
                            variant: BoundaryVariant::LowFreq { ratio: config.bench.boundary_ratio },
                            ..config.boundary.clone()
                        };
                        let rgb = BoundaryConfig {
                            variant: BoundaryVariant::Rgb,
                            delta: BoundaryConfig::rgb().delta,
                            ..config.boundary.clone()
                        };
                        specs.push(AttackSpec::Boundary(lf));
                        specs.push(AttackSpec::Boundary(rgb));
                    }
                    BenchFamily::Nes => {
                        let lf = NesConfig {
                            variant: NesVariant::LowFreq { ratio: config.bench.nes_ratio },
                            learning_rate: config.bench.lf_nes_learning_rate.unwrap_or(config.nes.learning_rate),
                            ..config.nes.clone()
                        };
                        let rgb = NesConfig {
                            variant: NesVariant::Rgb,
                            learning_rate: config.bench.rgb_nes_learning_rate.unwrap_or(config.nes.learning_rate),
                            ..config.nes.clone()
                        };
                        specs.push(AttackSpec::Nes(lf));
                        specs.push(AttackSpec::Nes(rgb));
                    }
                }
            }
            specs
        }
        Experiment::SphereSweep | Experiment::Whitebox => Vec::new(),
    }
}

fn comparisons(summaries: &[AttackSummary]) -> Vec<Comparison> {
    let find = |name: &str| summaries.iter().find(|s| s.attack == name);
    [("boundary", "lf-ba", "rgb-ba"), ("nes", "lf-nes", "rgb-nes")]
        .iter()
        .filter_map(|&(family, lf, rgb)| {
            let (l, r) = (find(lf)?, find(rgb)?);
            Some(Comparison {
                family: family.into(),
                lf_attack: lf.into(),
                rgb_attack: rgb.into(),
                lf_median_queries: l.median_queries_all,
                rgb_median_queries: r.median_queries_all,
                speedup: r.median_queries_all / l.median_queries_all,
            })
        })
        .collect()
}

fn ext(img: &AttackImage) -> &'static str {
    if img.image.channels() == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

fn write_run_files(config: &ExperimentConfig, spec: &AttackSpec, images: &[AttackImage], outcomes: &[RunOutcome]) -> Result<()> {
    let out = &config.output_dir;
    let name = spec.name();
    if config.write_traces {
        fs::create_dir_all(out.join("traces"))?;
    }
    for o in outcomes {
        let r = &o.record;
        let stem = format!("{name}_img{}_rep{}", r.image, r.repetition);
        let Some(trace) = &o.trace else { continue };
        if config.write_traces {
            let file = BufWriter::new(File::create(out.join("traces").join(format!("{stem}.csv")))?);
            match spec {
                AttackSpec::Nes(_) => write_nes_csv(trace, file)?,
                _ => write_boundary_csv(trace, file)?,
            }
            if let Some(schedule) = &o.schedule {
                let file = BufWriter::new(File::create(out.join("traces").join(format!("{stem}_schedule.csv")))?);
                write_schedule_csv(schedule, file)?;
            }
        }
        if config.write_images {
            let img = images.iter().find(|i| i.index == r.image).expect("image of the run");
            save_image(&trace.final_image, out.join("images").join(format!("{stem}.{}", ext(img))))?;
        }
    }
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
