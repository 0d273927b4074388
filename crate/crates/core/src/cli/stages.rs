//! Pipeline stages. Each stage reads the artifacts of earlier stages from the
//! run directory and runs them first when they are missing.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{seed_offset, RunConfig};
use super::CliError;
use crate::dataset::{
    build_fusion_dataset, build_timeseries_dataset, FusionBuildConfig, FusionDataset, PilotRatio, TimeseriesDataset,
};
use crate::dtcloop::{
    build_channel_map, run_loop, BeamCodebook, GptLoopPredictor, LoopPredictor, LoopSetup, LoopSummary,
    LoopThresholds, OraclePredictor,
};
use crate::experiments::report::{curve_rows, format_table2, write_curve_csv, write_line_svg, write_table2_csv};
use crate::experiments::{
    generalization_table, horizon_sweep, relative_degradation, train_fusion, train_gpt, train_mlp, FusionMethod,
    FusionModel, GptSequence, LinearAr, MetricsReport, MlpSequence, SequencePredictor, Table2Row, TrainConfig,
    TrainReport,
};
use crate::neural::GptConfig;
use crate::raytrace::{simulate_along_trajectory, simulate_at_positions, ArrayOrientation, ChannelSnapshot, RadioConfig};
use crate::records::{load_snapshots, save_snapshots, SnapshotMeta};
use crate::scene::{
    generate_urban_scene, load_scene, road_positions, save_scene, street_route, AntennaArray, Scene, Trajectory,
    Transceiver,
};

/// Which models `train` fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainTask {
    All,
    Timeseries,
    Fusion,
    Loop,
}

/// A resolved configuration bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
}

const SCENE: &str = "scene.json";
const SCENE_NEW: &str = "scene_new.json";
const RESOLVED: &str = "resolved_config.toml";
/// Wall-clock seconds per trained model.
const TRAIN_SECONDS: &str = "models/train_seconds.json";

fn segment_trajectory(seg: &[f64; 4], speed: f64, slot: f64) -> Result<Trajectory, CliError> {
    Ok(Trajectory::new(
        street_route(&[[seg[0], seg[1]], [seg[2], seg[3]]]),
        speed,
        slot,
    )?)
}

fn upa(dims: [usize; 2]) -> Result<AntennaArray, CliError> {
    Ok(if dims[0] * dims[1] == 1 {
        AntennaArray::single()
    } else {
        AntennaArray::upa(dims[0], dims[1], 0.5)?
    })
}

/// Base station on the scene's rooftop site.
pub fn base_station(scene: &Scene, array: AntennaArray, tx_power_dbm: f64) -> Result<Transceiver, CliError> {
    let position = scene
        .rooftop_site()
        .ok_or_else(|| CliError::Stage("simulate".into(), "scene has no building for the base station".into()))?;
    Ok(Transceiver {
        position,
        array,
        tx_power_dbm,
    })
}

impl Run {
    pub fn new(config: RunConfig, out: impl Into<PathBuf>) -> Self {
        Run {
            config,
            out: out.into(),
            quiet: false,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn seed(&self, offset: u64) -> u64 {
        self.config.seed.wrapping_add(offset)
    }

    fn mkdir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        fs::create_dir_all(&p)?;
        Ok(p)
    }

    /// Writes the resolved configuration next to the artifacts.
    pub fn echo_config(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.path(RESOLVED), self.config.to_toml()?)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), CliError> {
        fs::write(self.path(rel), serde_json::to_vec_pretty(value)?)?;
        Ok(())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T, CliError> {
        Ok(serde_json::from_slice(&fs::read(self.path(rel))?)?)
    }

    // Scenes.

    pub fn scene_gen(&self) -> Result<(Scene, Scene), CliError> {
        let spec = &self.config.scene;
        let origin = generate_urban_scene(self.seed(0), spec)?;
        let new = generate_urban_scene(self.seed(seed_offset::NEW_SCENE), spec)?;
        fs::create_dir_all(&self.out)?;
        save_scene(&origin, self.path(SCENE))?;
        save_scene(&new, self.path(SCENE_NEW))?;
        self.note(format!("scene-gen: origin {} new {}", origin.id(), new.id()));
        Ok((origin, new))
    }

    pub fn scenes(&self) -> Result<(Scene, Scene), CliError> {
        if !self.path(SCENE).exists() || !self.path(SCENE_NEW).exists() {
            return self.scene_gen();
        }
        Ok((load_scene(self.path(SCENE))?, load_scene(self.path(SCENE_NEW))?))
    }

    // Simulation.

    fn save_snaps(
        &self,
        rel: &str,
        scene: &Scene,
        tx: &Transceiver,
        radio: &RadioConfig,
        snaps: &[ChannelSnapshot],
    ) -> Result<(), CliError> {
        let meta = SnapshotMeta {
            radio: *radio,
            array: tx.array,
            orientation: ArrayOrientation::default(),
            scene_id: scene.id(),
        };
        save_snapshots(self.path(rel), &meta, snaps)?;
        Ok(())
    }

    fn timeseries_snaps_rel(i: usize) -> String {
        format!("snapshots/timeseries_{i:02}.dtcr")
    }

    fn loop_snaps_rel(u: usize) -> String {
        format!("snapshots/loop_user_{u:02}.dtcr")
    }

    pub fn simulate(&self) -> Result<(), CliError> {
        let t0 = Instant::now();
        let (origin, new) = self.scenes()?;
        self.mkdir("snapshots")?;
        let c = &self.config;
        let orient = ArrayOrientation::default();

        let ts = &c.timeseries;
        let tx = base_station(&origin, AntennaArray::single(), c.tx_power_dbm)?;
        for (i, seg) in ts.segments.iter().enumerate() {
            let traj = segment_trajectory(seg, ts.speed, ts.slot_duration)?;
            let snaps = simulate_along_trajectory(&origin, &tx, orient, &traj, ts.n_slots, &ts.radio, c.max_order)?;
            self.save_snaps(&Self::timeseries_snaps_rel(i), &origin, &tx, &ts.radio, &snaps)?;
        }

        let fu = &c.fusion;
        for (rel, scene, n, off) in [
            ("snapshots/fusion_origin.dtcr", &origin, fu.n_origin, 0),
            ("snapshots/fusion_new.dtcr", &new, fu.n_new, 1),
        ] {
            let tx = base_station(scene, upa(fu.array)?, c.tx_power_dbm)?;
            let positions = road_positions(scene, n, self.seed(seed_offset::POSITIONS + off))?;
            let snaps = simulate_at_positions(scene, &tx, orient, &positions, &fu.radio, c.max_order)?;
            self.save_snaps(rel, scene, &tx, &fu.radio, &snaps)?;
        }

        let lp = &c.dtc;
        let tx = base_station(&origin, upa(lp.array)?, c.tx_power_dbm)?;
        for (u, route) in lp.routes.iter().enumerate() {
            let traj = segment_trajectory(route, lp.speed, lp.slot_duration)?;
            let n = lp.train_slots + lp.n_slots;
            let snaps = simulate_along_trajectory(&origin, &tx, orient, &traj, n, &lp.radio, c.max_order)?;
            self.save_snaps(&Self::loop_snaps_rel(u), &origin, &tx, &lp.radio, &snaps)?;
        }
        self.note(format!("simulate: {:.1} s", t0.elapsed().as_secs_f64()));
        Ok(())
    }

    fn snaps(&self, rel: &str) -> Result<Vec<ChannelSnapshot>, CliError> {
        if !self.path(rel).exists() {
            self.simulate()?;
        }
        Ok(load_snapshots(self.path(rel))?.1)
    }

    // Datasets.

    pub fn dataset(&self) -> Result<(), CliError> {
        let t0 = Instant::now();
        let c = &self.config;
        let (origin, new) = self.scenes()?;

        let ts = &c.timeseries;
        let mut parts = Vec::new();
        for i in 0..ts.segments.len() {
            let snaps = self.snaps(&Self::timeseries_snaps_rel(i))?;
            parts.push(build_timeseries_dataset(&snaps, ts.history, ts.horizon, &origin.id())?);
        }
        TimeseriesDataset::merge(parts)?.save(self.path("datasets/timeseries"))?;

        let fu = &c.fusion;
        for (rel, dir, scene, off) in [
            ("snapshots/fusion_origin.dtcr", "datasets/fusion_origin", &origin, 0),
            ("snapshots/fusion_new.dtcr", "datasets/fusion_new", &new, 1),
        ] {
            let cfg = FusionBuildConfig {
                mask_seed: self.seed(seed_offset::MASK + off),
                split_seed: self.seed(seed_offset::SPLIT + off),
                ratio: PilotRatio {
                    num: fu.pilot_ratio[0],
                    den: fu.pilot_ratio[1],
                },
                n_views: fu.n_views,
                resolution: fu.resolution,
                ..Default::default()
            };
            build_fusion_dataset(&self.snaps(rel)?, scene, &cfg)?.save(self.path(dir))?;
        }

        let lp = &c.dtc;
        let mut parts = Vec::new();
        for u in 0..lp.routes.len() {
            let snaps = self.snaps(&Self::loop_snaps_rel(u))?;
            let head = &snaps[..lp.train_slots.min(snaps.len())];
            parts.push(build_timeseries_dataset(head, lp.history, 1, &origin.id())?);
        }
        TimeseriesDataset::merge(parts)?.save(self.path("datasets/loop"))?;
        self.note(format!("dataset: {:.1} s", t0.elapsed().as_secs_f64()));
        Ok(())
    }

    fn timeseries_data(&self) -> Result<TimeseriesDataset, CliError> {
        self.load_or_build("datasets/timeseries", TimeseriesDataset::load)
    }

    fn fusion_data(&self, which: &str) -> Result<FusionDataset, CliError> {
        self.load_or_build(&format!("datasets/fusion_{which}"), FusionDataset::load)
    }

    fn loop_data(&self) -> Result<TimeseriesDataset, CliError> {
        self.load_or_build("datasets/loop", TimeseriesDataset::load)
    }

    fn load_or_build<T, E>(&self, rel: &str, load: impl Fn(PathBuf) -> Result<T, E>) -> Result<T, CliError>
    where
        CliError: From<E>,
    {
        if !self.path(rel).join("manifest.json").exists() {
            self.dataset()?;
        }
        Ok(load(self.path(rel))?)
    }

    // Training.

    fn gpt_config(base: &GptConfig, width: usize, context: usize) -> GptConfig {
        GptConfig {
            feature_width: width,
            context: base.context.max(context),
            ..*base
        }
    }

    fn train_config(&self, base: &TrainConfig, offset: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seed(seed_offset::TRAIN + offset),
            ..base.clone()
        }
    }

    pub fn train(&self, task: TrainTask) -> Result<BTreeMap<String, TrainReport>, CliError> {
        let c = &self.config;
        self.mkdir("models")?;
        let mut reports: BTreeMap<String, TrainReport> = if self.path("models/training.json").exists() {
            self.read_json("models/training.json")?
        } else {
            BTreeMap::new()
        };
        let mut seconds: BTreeMap<String, f64> = if self.path(TRAIN_SECONDS).exists() {
            self.read_json(TRAIN_SECONDS)?
        } else {
            BTreeMap::new()
        };
        let wants = |t: TrainTask| task == TrainTask::All || task == t;

        if wants(TrainTask::Timeseries) {
            let data = self.timeseries_data()?;
            let ts = &c.timeseries;
            let w = data.width();
            let t0 = Instant::now();
            let cfg = Self::gpt_config(&ts.gpt, w, ts.history + ts.horizon);
            let (gpt, rep) = train_gpt(cfg, self.seed(seed_offset::INIT), &data, &self.train_config(&ts.gpt_train, 0))?;
            gpt.save(self.path("models/gpt.ckpt"))?;
            self.note(format!("train gpt: {:.1} s, best val {:?}", t0.elapsed().as_secs_f64(), rep.best_val));
            seconds.insert("gpt".into(), t0.elapsed().as_secs_f64());
            reports.insert("gpt".into(), rep);

            let ar = LinearAr::fit_select(&data, ts.ar_max_order, ts.horizon)?;
            ar.save(self.path("models/linear_ar.json"))?;
            self.note(format!("train linear_ar: order {}", ar.order()));

            let t0 = Instant::now();
            let (mlp, rep) = train_mlp(ts.mlp, self.seed(seed_offset::INIT + 1), &data, &self.train_config(&ts.mlp_train, 1))?;
            mlp.save(self.path("models/mlp.ckpt"))?;
            self.note(format!("train mlp: {:.1} s, best val {:?}", t0.elapsed().as_secs_f64(), rep.best_val));
            seconds.insert("mlp".into(), t0.elapsed().as_secs_f64());
            reports.insert("mlp".into(), rep);
        }

        if wants(TrainTask::Fusion) {
            let data = self.fusion_data("origin")?;
            let fu = &c.fusion;
            let base = fu.model_config();
            for (i, m) in FusionMethod::ALL.into_iter().enumerate() {
                let t0 = Instant::now();
                let (model, rep) = train_fusion(
                    m.config(&base),
                    self.seed(seed_offset::INIT + 2),
                    &data,
                    &self.train_config(&fu.train, 2 + i as u64),
                )?;
                model.save(self.path(&format!("models/{}.ckpt", m.name())))?;
                self.note(format!(
                    "train {}: {:.1} s, best val {:?}",
                    m.name(),
                    t0.elapsed().as_secs_f64(),
                    rep.best_val
                ));
                seconds.insert(m.name().into(), t0.elapsed().as_secs_f64());
                reports.insert(m.name().into(), rep);
            }
        }

        if wants(TrainTask::Loop) {
            let data = self.loop_data()?;
            let lp = &c.dtc;
            let t0 = Instant::now();
            let cfg = Self::gpt_config(&lp.gpt, data.width(), lp.history + 1);
            let (gpt, rep) = train_gpt(cfg, self.seed(seed_offset::INIT + 5), &data, &self.train_config(&lp.train, 5))?;
            gpt.save(self.path("models/loop_gpt.ckpt"))?;
            self.note(format!("train loop_gpt: {:.1} s, best val {:?}", t0.elapsed().as_secs_f64(), rep.best_val));
            seconds.insert("loop_gpt".into(), t0.elapsed().as_secs_f64());
            reports.insert("loop_gpt".into(), rep);
        }

        self.write_json("models/training.json", &reports)?;
        self.write_json(TRAIN_SECONDS, &seconds)?;
        let curves: Vec<(String, Vec<f64>)> = reports
            .iter()
            .map(|(k, r)| (k.clone(), r.epochs.iter().map(|e| e.val_score).collect()))
            .collect();
        write_line_svg(
            self.path("training_curves.svg"),
            "Validation NMSE per epoch",
            "epoch",
            "validation NMSE (normalized)",
            &curves,
        )?;
        Ok(reports)
    }

    fn ensure_model(&self, rel: &str, task: TrainTask) -> Result<PathBuf, CliError> {
        let p = self.path(rel);
        if !p.exists() {
            self.train(task)?;
        }
        Ok(p)
    }

    fn sequence_models(&self) -> Result<(GptSequence, LinearAr, MlpSequence), CliError> {
        let gpt = GptSequence::load(self.ensure_model("models/gpt.ckpt", TrainTask::Timeseries)?)?;
        let ar = LinearAr::load(self.ensure_model("models/linear_ar.json", TrainTask::Timeseries)?)?;
        let mlp = MlpSequence::load(self.ensure_model("models/mlp.ckpt", TrainTask::Timeseries)?)?;
        Ok((gpt, ar, mlp))
    }

    fn fusion_models(&self) -> Result<Vec<(FusionMethod, FusionModel)>, CliError> {
        FusionMethod::ALL
            .into_iter()
            .map(|m| {
                let p = self.ensure_model(&format!("models/{}.ckpt", m.name()), TrainTask::Fusion)?;
                Ok((m, FusionModel::load(p)?))
            })
            .collect()
    }

    // Evaluation.

    /// Test-split metrics of every trained model, written to `eval.json`.
    pub fn eval(&self) -> Result<EvalSummary, CliError> {
        let data = self.timeseries_data()?;
        let (gpt, ar, mlp) = self.sequence_models()?;
        let w = data.width();
        let preds: Vec<&dyn SequencePredictor> = vec![&crate::experiments::IdentityHold, &ar, &mlp, &gpt];
        let one_step: BTreeMap<String, f64> = horizon_sweep(&preds, &data.test, w, 1)?
            .into_iter()
            .map(|(n, c)| (n, c[0]))
            .collect();
        let origin = self.fusion_data("origin")?;
        let mut fusion = BTreeMap::new();
        for (m, model) in self.fusion_models()? {
            let (nmse, cosine) = model.evaluate(&origin.test)?;
            fusion.insert(m.name().to_string(), [nmse, cosine]);
        }
        let loop_data = self.loop_data()?;
        let loop_gpt = GptSequence::load(self.ensure_model("models/loop_gpt.ckpt", TrainTask::Loop)?)?;
        let loop_nmse = horizon_sweep(&[&loop_gpt], &loop_data.test, loop_data.width(), 1)?[0].1[0];
        let summary = EvalSummary {
            one_step_nmse: one_step,
            fusion_test: fusion,
            loop_gpt_one_step_nmse: loop_nmse,
        };
        self.write_json("eval.json", &summary)?;
        self.note(format!("eval: {}", serde_json::to_string(&summary)?));
        Ok(summary)
    }

    /// Horizon sweep over the test split: `curve.csv` and `curve.svg`.
    pub fn sweep(&self) -> Result<Vec<(String, Vec<f64>)>, CliError> {
        let data = self.timeseries_data()?;
        let (gpt, ar, mlp) = self.sequence_models()?;
        let preds: Vec<&dyn SequencePredictor> = vec![&gpt, &crate::experiments::IdentityHold, &ar, &mlp];
        let curves = horizon_sweep(&preds, &data.test, data.width(), self.config.timeseries.horizon)?;
        write_curve_csv(self.path("curve.csv"), &curve_rows(&curves))?;
        write_line_svg(self.path("curve.svg"), "NMSE versus prediction horizon", "slots", "NMSE", &curves)?;
        self.note(format!("sweep: {} models -> curve.csv", curves.len()));
        Ok(curves)
    }

    /// Origin/new-scene table: `table2.csv` and `table2.txt`.
    pub fn table2(&self) -> Result<Vec<Table2Row>, CliError> {
        let origin = self.fusion_data("origin")?;
        let new = self.fusion_data("new")?;
        let models = self.fusion_models()?;
        let refs: Vec<(FusionMethod, &FusionModel)> = models.iter().map(|(m, f)| (*m, f)).collect();
        let rows = generalization_table(&refs, &origin, &new)?;
        write_table2_csv(self.path("table2.csv"), &rows)?;
        let text = format_table2(&rows);
        fs::write(self.path("table2.txt"), &text)?;
        self.note(format!("table2:\n{text}"));
        Ok(rows)
    }

    // Closed loop.

    fn loop_setup(&self) -> Result<LoopSetup, CliError> {
        let lp = &self.config.dtc;
        Ok(LoopSetup {
            codebook: BeamCodebook::dft(upa(lp.array)?, lp.oversampling)?,
            total_power_dbm: self.config.tx_power_dbm,
            noise_power_dbm: lp.radio.noise_power_dbm(),
            history: lp.history,
        })
    }

    fn loop_users(&self) -> Result<Vec<Vec<ChannelSnapshot>>, CliError> {
        let lp = &self.config.dtc;
        (0..lp.routes.len())
            .map(|u| {
                let snaps = self.snaps(&Self::loop_snaps_rel(u))?;
                let start = lp.train_slots.saturating_sub(lp.history);
                Ok(snaps[start.min(snaps.len())..].to_vec())
            })
            .collect()
    }

    /// Runs the loop with the trained predictor and with the oracle:
    /// `loop_log.jsonl`, `loop_oracle_log.jsonl` and `loop_summary.json`.
    pub fn dtc_run(&self) -> Result<LoopReport, CliError> {
        let lp = &self.config.dtc;
        let setup = self.loop_setup()?;
        let users = self.loop_users()?;
        let data = self.loop_data()?;

        let mut oracle_corpus = Vec::new();
        let oracle = run_loop(
            &mut OraclePredictor,
            &users,
            &setup,
            lp.n_slots,
            &LoopThresholds::default(),
            &mut oracle_corpus,
        )?;
        oracle.write_log(self.path("loop_oracle_log.jsonl"))?;

        let model = GptSequence::load(self.ensure_model("models/loop_gpt.ckpt", TrainTask::Loop)?)?;
        let mut predictor = GptLoopPredictor {
            model,
            train: self.train_config(&lp.train, 6),
        };
        let mut corpus = data.train.clone();
        let run = run_loop(&mut predictor, &users, &setup, lp.n_slots, &lp.thresholds, &mut corpus)?;
        run.write_log(self.path("loop_log.jsonl"))?;
        let report = LoopReport {
            predictor: run.summary,
            oracle: oracle.summary,
        };
        self.write_json("loop_summary.json", &report)?;
        self.note(format!(
            "dtc-run: {} mean gain ratio {:.4}, nmse {:.4}, recollect {}, retrain {}",
            predictor.name(),
            report.predictor.mean_gain_ratio,
            report.predictor.mean_nmse,
            report.predictor.n_recollect,
            report.predictor.n_retrain
        ));
        Ok(report)
    }

    /// Coverage map of the origin scene: `channel_map.csv`.
    pub fn map(&self) -> Result<crate::dtcloop::ChannelMap, CliError> {
        let (origin, _) = self.scenes()?;
        let lp = &self.config.dtc;
        let tx = base_station(&origin, upa(lp.array)?, self.config.tx_power_dbm)?;
        let codebook = BeamCodebook::dft(tx.array, lp.oversampling)?;
        let map = build_channel_map(
            &origin,
            &tx,
            ArrayOrientation::default(),
            self.config.map.resolution,
            &lp.radio,
            &codebook,
            self.config.max_order,
        )?;
        fs::create_dir_all(&self.out)?;
        map.write_csv(self.path("channel_map.csv"))?;
        self.note(format!("map: {}x{} cells, {} outage", map.nx, map.ny, map.n_outage()));
        Ok(map)
    }

    /// Every stage from scratch, then `report.json`.
    pub fn reproduce(&self) -> Result<MetricsReport, CliError> {
        let t0 = Instant::now();
        for rel in ["models/training.json", TRAIN_SECONDS] {
            let stale = self.path(rel);
            if stale.exists() {
                std::fs::remove_file(stale)?;
            }
        }
        let stage = |name: &str, r: Result<(), CliError>| r.map_err(|e| CliError::Stage(name.into(), e.to_string()));
        stage("scene-gen", self.scene_gen().map(|_| ()))?;
        stage("simulate", self.simulate())?;
        stage("dataset", self.dataset())?;
        let training = self.train(TrainTask::All).map_err(|e| CliError::Stage("train".into(), e.to_string()))?;
        let curves = self.sweep().map_err(|e| CliError::Stage("sweep".into(), e.to_string()))?;
        let table = self.table2().map_err(|e| CliError::Stage("table2".into(), e.to_string()))?;
        let lp = self.dtc_run().map_err(|e| CliError::Stage("dtc-run".into(), e.to_string()))?;
        stage("map", self.map().map(|_| ()))?;
        let eval = self.eval().map_err(|e| CliError::Stage("eval".into(), e.to_string()))?;

        let c = &self.config;
        let mut report = MetricsReport {
            horizon_nmse: curves.into_iter().collect(),
            training,
            wall_clock_s: 0.0,
            ..Default::default()
        };
        report.table2 = table;
        for (k, v) in [
            ("gpt", self.train_config(&c.timeseries.gpt_train, 0)),
            ("mlp", self.train_config(&c.timeseries.mlp_train, 1)),
            ("fusion", self.train_config(&c.fusion.train, 2)),
            ("loop_gpt", self.train_config(&c.dtc.train, 5)),
        ] {
            report.train_configs.insert(k.into(), serde_json::to_value(v)?);
        }
        let (gpt, _, mlp) = self.sequence_models()?;
        let loop_gpt = GptSequence::load(self.path("models/loop_gpt.ckpt"))?;
        report.model_configs.insert("gpt".into(), serde_json::to_value(gpt.model.config)?);
        report.model_configs.insert("mlp".into(), serde_json::to_value(mlp.model.config)?);
        report.model_configs.insert("fusion".into(), serde_json::to_value(c.fusion.model_config())?);
        report.model_configs.insert("loop_gpt".into(), serde_json::to_value(loop_gpt.model.config)?);
        for (k, dir) in [
            ("timeseries", "datasets/timeseries"),
            ("fusion_origin", "datasets/fusion_origin"),
            ("fusion_new", "datasets/fusion_new"),
            ("loop", "datasets/loop"),
        ] {
            let m: crate::dataset::DatasetManifest = self.read_json(&format!("{dir}/manifest.json"))?;
            report.dataset_hashes.insert(k.into(), m.hash());
        }
        let (origin, new) = self.scenes()?;
        report.scene_ids.insert("origin".into(), origin.id());
        report.scene_ids.insert("new".into(), new.id());
        for m in [FusionMethod::RsWowei, FusionMethod::RsWwei, FusionMethod::Fusion] {
            if let Some(d) = relative_degradation(&report.table2, m) {
                report
                    .extra
                    .insert(format!("relative_degradation_{}", m.name()), serde_json::json!(d));
            }
        }
        report.extra.insert("loop".into(), serde_json::to_value(&lp)?);
        report.extra.insert("eval".into(), serde_json::to_value(&eval)?);
        let seconds: serde_json::Value = self.read_json(TRAIN_SECONDS)?;
        report.extra.insert("train_seconds".into(), seconds);
        report.wall_clock_s = t0.elapsed().as_secs_f64();
        report.write(self.path("report.json"))?;
        self.note(format!("reproduce: {:.1} s", report.wall_clock_s));
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    /// One-step test NMSE per sequence model.
    pub one_step_nmse: BTreeMap<String, f64>,
    /// Origin test `[nmse, cosine]` per fusion method.
    pub fusion_test: BTreeMap<String, [f64; 2]>,
    pub loop_gpt_one_step_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub predictor: LoopSummary,
    pub oracle: LoopSummary,
}
