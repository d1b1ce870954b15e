//! One function per subcommand. Each writes its artifacts, a snapshot of
//! the resolved configuration, and a manifest listing every file it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use candi_core::checkpoint::{write_json, Checkpoint};
use candi_core::data::{load_csv, MultivariateSeries};
use candi_core::metrics::{export_curves, LabeledScores};
use candi_core::pipeline::{ablation_table, prepare, run_ablation_grid, run_stream};
use candi_core::report::{parse_report, RunReport};
use candi_core::synth::{generate_shift_scenario, ScenarioManifest};
use candi_core::{Error, Result};
use serde::Serialize;

use crate::config::{Config, Overrides};

/// 2: unreadable input or configuration; 3: non-finite numerics;
/// 4: artifacts that do not fit together.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Mismatch(_) => 4,
        _ => 1,
    }
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.apply(overrides);
    Ok(cfg)
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
}

/// Collects written paths for the closing manifest.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: PathBuf, command: &'static str, cfg: &Config) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut o = Self {
            dir,
            command,
            written: Vec::new(),
        };
        let snapshot = format!("{command}.config.toml");
        o.text(&snapshot, &cfg.to_toml())?;
        Ok(o)
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        self.written.push(write_json(self.dir.join(name), value)?);
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let name = format!("{}.manifest.json", self.command);
        let manifest_path = self.dir.join(&name);
        self.written.push(manifest_path.clone());
        let entries = self
            .written
            .iter()
            .map(|p| {
                let bytes = if *p == manifest_path {
                    0
                } else {
                    fs::metadata(p).map_err(|e| Error::io(p, e))?.len()
                };
                Ok(ManifestEntry {
                    path: p.display().to_string(),
                    bytes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(manifest_path, &entries)?;
        log::info!("wrote {} files to {}", entries.len(), self.dir.display());
        Ok(())
    }
}

struct Dataset {
    train: MultivariateSeries,
    test: MultivariateSeries,
    scenario: Option<ScenarioManifest>,
}

fn load_data(cfg: &Config) -> Result<Dataset> {
    match (&cfg.data.train, &cfg.data.test) {
        (Some(train), Some(test)) => Ok(Dataset {
            train: load_csv(train)?,
            test: load_csv(test)?,
            scenario: None,
        }),
        (None, None) => {
            let g = generate_shift_scenario(&cfg.synth)?;
            let scenario = Some(g.manifest(&cfg.synth));
            Ok(Dataset {
                train: g.train,
                test: g.test,
                scenario,
            })
        }
        _ => Err(Error::Config("data.train and data.test must be given together".into())),
    }
}

pub fn synth(cfg: &Config) -> Result<()> {
    let g = generate_shift_scenario(&cfg.synth)?;
    let mut out = Outputs::new(cfg.out_dir(), "synth", cfg)?;
    for (name, series) in [("train.csv", &g.train), ("test.csv", &g.test)] {
        let path = out.dir.join(name);
        series.write_csv(&path)?;
        out.written.push(path);
    }
    out.json("scenario.json", &g.manifest(&cfg.synth))?;
    out.finish()
}

pub fn pretrain(cfg: &Config) -> Result<()> {
    let data = load_data(cfg)?;
    let bb = cfg.backbone_config(data.train.dims());
    let p = prepare(&data.train, &data.test, &cfg.split, bb, &cfg.pretrain, cfg.curation)?;
    if let (Some(first), Some(last)) = (p.log.train_loss.first(), p.log.train_loss.last()) {
        log::info!(
            "pretraining loss {first:.6} -> {last:.6} over {} epochs",
            p.log.train_loss.len()
        );
    }
    let ck = Checkpoint::from_prepared(&p, cfg.pretrain, cfg.split);
    let mut out = Outputs::new(cfg.checkpoint_dir(), "pretrain", cfg)?;
    out.written.extend(ck.save(&out.dir)?);
    if let Some(m) = &data.scenario {
        out.json("scenario.json", m)?;
    }
    out.finish()
}

/// Loads the checkpoint and the test windows it applies to, refusing a
/// checkpoint whose shapes disagree with the configuration.
fn stream_inputs(cfg: &Config) -> Result<(Checkpoint, candi_core::data::WindowSet)> {
    let ck = Checkpoint::load(cfg.checkpoint_dir())?;
    let data = load_data(cfg)?;
    ck.ensure_matches(&cfg.backbone_config(data.test.dims()))?;
    let test = ck.test_windows(&data.test)?;
    Ok((ck, test))
}

fn write_report(out: &mut Outputs, prefix: &str, report: &RunReport) -> Result<()> {
    out.text(&format!("{prefix}report.txt"), &report.to_text())?;
    out.text(&format!("{prefix}scores.csv"), &report.scores_csv())?;
    out.text(&format!("{prefix}events.jsonl"), &report.events_jsonl()?)?;
    Ok(())
}

pub fn run(cfg: &Config) -> Result<()> {
    let (ck, test) = stream_inputs(cfg)?;
    let rc = cfg.run_config();
    let report = run_stream(&test, &ck.backbone, &ck.calibration, &rc)?;
    let mut out = Outputs::new(cfg.out_dir().join(rc.mode.as_str()), "run", cfg)?;
    write_report(&mut out, "", &report)?;
    if let Some(labels) = report.records.iter().map(|r| r.label).collect::<Option<Vec<u8>>>() {
        if report.metrics.is_some() {
            let ls = LabeledScores::new(report.scores(), labels)?;
            out.written.extend(export_curves(&ls, &out.dir)?);
        }
    }
    print!("mode={}\n{}", report.mode, report.summary_text());
    out.finish()
}

pub fn eval(reports: &[PathBuf]) -> Result<()> {
    for path in reports {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parsed = parse_report(&text)?;
        let metrics = parsed.verify_summary()?;
        println!("# {}", path.display());
        print!("{metrics}");
    }
    Ok(())
}

pub fn ablate(cfg: &Config) -> Result<()> {
    let (ck, test) = stream_inputs(cfg)?;
    let cells = run_ablation_grid(&test, &ck.backbone, &ck.calibration, &cfg.run_config())?;
    let mut out = Outputs::new(cfg.out_dir().join("ablation"), "ablate", cfg)?;
    for c in &cells {
        let prefix = format!("{}-{}.", c.selection.as_str(), c.target.as_str());
        write_report(&mut out, &prefix, &c.report)?;
    }
    let table = ablation_table(&cells);
    out.text("ablation.csv", &table)?;
    print!("{table}");
    out.finish()
}
