//! Subcommand dispatch and artifact layout for one run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SearchMethod, SourceKind};
use crate::data::{generate_synthetic, load_cifar10_binary, make_splits, Normalizer, SplitSet};
use crate::error::{Error, Result};
use crate::evaluator::{
    build_fixed_views, evolutionary_search, traversal_search, FixedViewSet, RatingMeta,
    RatingTable, PREFIX_POLICY,
};
use crate::ranking::{
    convergence_track, correlate, oracle_batch, records_from_csv, records_to_csv,
    CorrelationReport, OracleRecord, TrackPoint, UNDEFINED,
};
use crate::space::{sample_architectures, Architecture};
use crate::substrate::checkpoint::{checkpoint_paths, read_checkpoint, write_checkpoint};
use crate::trainer::{train_supernet, EpochLog, SiameseState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Train,
    Search,
    Oracle,
    Correlate,
    Track,
    Report,
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Command::Train,
            "search" => Command::Search,
            "oracle" => Command::Oracle,
            "correlate" => Command::Correlate,
            "track" => Command::Track,
            "report" => Command::Report,
            _ => {
                return Err(Error::Config {
                    path: "command".into(),
                    reason: format!("unknown command `{s}`"),
                })
            }
        })
    }
}

/// Where every artifact of a configuration lives.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub root: PathBuf,
    pub digest: String,
    pub train_dir: PathBuf,
    pub oracle_digest: String,
}

impl RunPaths {
    pub fn new(config: &RunConfig) -> Result<Self> {
        let root = config.output_dir.clone();
        Ok(RunPaths {
            train_dir: root.join(format!("train-{}", config.train_digest()?)),
            digest: config.digest()?,
            oracle_digest: config.oracle_digest()?,
            root,
        })
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.train_dir.join(format!("epoch_{epoch:03}"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.train_dir.join("train_log.csv")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(format!("config-{}.toml", self.digest))
    }

    pub fn ratings(&self) -> PathBuf {
        self.root.join(format!("ratings-{}.csv", self.digest))
    }

    pub fn best(&self) -> PathBuf {
        self.root.join(format!("best-{}.json", self.digest))
    }

    pub fn oracle(&self) -> PathBuf {
        self.root.join(format!("oracle-{}.csv", self.oracle_digest))
    }

    pub fn correlation(&self) -> PathBuf {
        self.root.join(format!("correlation-{}.json", self.digest))
    }

    pub fn track_csv(&self) -> PathBuf {
        self.root.join(format!("track-{}.csv", self.digest))
    }

    pub fn track_json(&self) -> PathBuf {
        self.root.join(format!("track-{}.json", self.digest))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join(format!("report-{}.json", self.digest))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

/// Builds the four splits and the standardization constants of `nas-train`.
pub fn load_data(config: &RunConfig) -> Result<(SplitSet, Normalizer)> {
    let d = &config.data;
    let source = match d.source {
        SourceKind::Synthetic => {
            generate_synthetic(config.sub_seed("data"), d.synthetic_count, &d.synthetic)?
        }
        SourceKind::Cifar10 => load_cifar10_binary(&d.cifar10_paths)?,
    };
    let splits = make_splits(&source, &d.splits, config.sub_seed("splits"))?;
    let normalizer = Normalizer::fit(&splits.nas_train);
    Ok((splits, normalizer))
}

/// The seeded architecture sample that is rated and oracle-trained.
pub fn oracle_architectures(config: &RunConfig) -> Vec<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.sub_seed("sample"));
    sample_architectures(&config.space_def(), config.oracle.architectures, &mut rng)
}

pub fn oracle_seeds(config: &RunConfig) -> Vec<u64> {
    (0..config.oracle.seeds)
        .map(|i| config.sub_seed(&format!("oracle-{i}")))
        .collect()
}

pub fn load_state(config: &RunConfig, stem: &Path) -> Result<SiameseState> {
    let (_, entries) = read_checkpoint(stem)?;
    let mut state = SiameseState::new(&config.space_def(), config.sub_seed("init"))?;
    state.load_named(&entries)?;
    Ok(state)
}

fn fixed_views(config: &RunConfig, splits: &SplitSet) -> Result<FixedViewSet> {
    let s = config.eval_settings()?;
    build_fixed_views(&splits.nas_val, &s.augment, s.view_seed, s.val_subset)
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(path.to_path_buf())
}

fn train_log_csv(log: &[EpochLog], digest: &str) -> String {
    let mut s = format!("# digest={digest}\nepoch,block,mean_loss,lr,tau\n");
    for l in log {
        let _ = writeln!(
            s,
            "{},{},{:?},{:?},{:?}",
            l.epoch, l.block, l.mean_loss, l.lr, l.tau
        );
    }
    s
}

/// Structured summary of the selected architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestDocument {
    pub architecture: String,
    pub method: String,
    pub block_losses: Vec<f64>,
    pub total: f64,
    pub checkpoint: String,
    pub view_seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationDocument {
    pub config_digest: String,
    pub checkpoint: String,
    pub report: CorrelationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackDocument {
    pub config_digest: String,
    pub series: Vec<TrackPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub config_digest: String,
    pub space: String,
    pub epochs: usize,
    pub final_block_losses: Vec<f64>,
    pub best: Option<BestDocument>,
    pub correlation: Option<CorrelationReport>,
    pub track: Option<Vec<TrackPoint>>,
}

fn final_checkpoint_name(config: &RunConfig) -> String {
    format!("epoch_{:03}", config.trainer.epochs)
}

fn train(config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let (splits, normalizer) = load_data(config)?;
    let mut state = SiameseState::new(&config.space_def(), config.sub_seed("init"))?;
    let mut written = vec![write(&paths.config(), &config.to_toml()?)?];
    let digest = &paths.digest;
    let log = train_supernet(
        &mut state,
        &config.trainer,
        &splits.nas_train,
        &normalizer,
        config.sub_seed("paths"),
        |epoch, s| {
            written.extend(write_checkpoint(
                &paths.checkpoint(epoch),
                digest,
                &s.named_tensors(),
            )?);
            Ok(())
        },
    )?;
    written.push(write(&paths.train_log(), &train_log_csv(&log, digest))?);
    Ok(written)
}

fn search(config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let stem = paths.checkpoint(config.trainer.epochs);
    require(&checkpoint_paths(&stem).0)?;
    let (splits, normalizer) = load_data(config)?;
    let state = load_state(config, &stem)?;
    let views = fixed_views(config, &splits)?;
    let settings = config.eval_settings()?;
    let traversal = traversal_search(&state, &views, &normalizer, &settings)?;
    let (best, method) = match config.evaluator.method {
        SearchMethod::Traversal => (traversal.best.clone(), "traversal"),
        SearchMethod::Evolution => (
            evolutionary_search(&state, &views, &normalizer, &settings)?.best,
            "evolution",
        ),
    };
    let mut archs = oracle_architectures(config);
    let best_rateable = traversal
        .blocks
        .iter()
        .zip(&best.blocks)
        .all(|(b, p)| b.loss_of(p).is_some());
    if best_rateable && !archs.contains(&best) {
        archs.push(best.clone());
    }
    let checkpoint = final_checkpoint_name(config);
    let meta = RatingMeta {
        checkpoint: checkpoint.clone(),
        view_seed: views.seed,
        prefix_policy: PREFIX_POLICY.to_string(),
        lambda: settings.lambda_for(config.space_def().block_count())?,
        config_digest: paths.digest.clone(),
    };
    let table = RatingTable::from_block_ratings(&traversal.blocks, &archs, meta)?;
    let row = table.architectures.iter().position(|a| *a == best.encode());
    let doc = BestDocument {
        architecture: best.encode(),
        method: method.into(),
        block_losses: row
            .map(|r| table.block_losses[r].clone())
            .unwrap_or_default(),
        total: row.map_or(f64::NAN, |r| table.totals[r]),
        checkpoint,
        view_seed: views.seed,
        config_digest: paths.digest.clone(),
    };
    Ok(vec![
        write(&paths.ratings(), &table.to_csv())?,
        write(&paths.best(), &serde_json::to_string_pretty(&doc)?)?,
    ])
}

fn oracle(config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let (splits, normalizer) = load_data(config)?;
    let records = oracle_batch(
        &config.space_def(),
        &oracle_architectures(config),
        &oracle_seeds(config),
        &splits.oracle_train,
        &splits.oracle_test,
        &normalizer,
        &config.oracle,
    )?;
    Ok(vec![write(
        &paths.oracle(),
        &records_to_csv(&records, &paths.oracle_digest),
    )?])
}

fn read_oracle(paths: &RunPaths) -> Result<Vec<OracleRecord>> {
    require(&paths.oracle())?;
    records_from_csv(&fs::read_to_string(paths.oracle())?)
}

fn correlate_cmd(_config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let table = RatingTable::read(&paths.ratings())?;
    let records = read_oracle(paths)?;
    let doc = CorrelationDocument {
        config_digest: paths.digest.clone(),
        checkpoint: table.meta.checkpoint.clone(),
        report: correlate(&table, &records)?,
    };
    Ok(vec![write(
        &paths.correlation(),
        &serde_json::to_string_pretty(&doc)?,
    )?])
}

fn coefficient(v: Option<f64>) -> String {
    v.map_or(UNDEFINED.to_string(), |x| format!("{x:?}"))
}

fn track(config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    let records = read_oracle(paths)?;
    let checkpoints: Vec<String> = (0..=config.trainer.epochs)
        .map(|e| paths.checkpoint(e))
        .filter(|s| checkpoint_paths(s).0.exists())
        .map(|s| s.file_name().expect("stem").to_string_lossy().into_owned())
        .collect();
    if checkpoints.is_empty() {
        return Err(Error::MissingArtifact(
            checkpoint_paths(&paths.checkpoint(0)).0,
        ));
    }
    let (splits, normalizer) = load_data(config)?;
    let views = fixed_views(config, &splits)?;
    let settings = config.eval_settings()?;
    let series = convergence_track(
        &checkpoints,
        |name| load_state(config, &paths.train_dir.join(name)),
        &oracle_architectures(config),
        &views,
        &normalizer,
        &settings,
        &records,
    )?;
    let mut csv = format!(
        "# digest={}\ncheckpoint,n,kendall_tau_b,spearman_rho,pearson_r\n",
        paths.digest
    );
    for p in &series {
        let r = &p.report;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            p.checkpoint,
            r.n,
            coefficient(r.kendall_tau_b),
            coefficient(r.spearman_rho),
            coefficient(r.pearson_r)
        );
    }
    let doc = TrackDocument {
        config_digest: paths.digest.clone(),
        series,
    };
    Ok(vec![
        write(&paths.track_csv(), &csv)?,
        write(&paths.track_json(), &serde_json::to_string_pretty(&doc)?)?,
    ])
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn report(config: &RunConfig, paths: &RunPaths) -> Result<Vec<PathBuf>> {
    require(&paths.train_log())?;
    let text = fs::read_to_string(paths.train_log())?;
    let mut final_block_losses = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.first().and_then(|c| c.parse::<usize>().ok()) == Some(config.trainer.epochs) {
            if let Some(v) = cells.get(2).and_then(|c| c.parse::<f64>().ok()) {
                final_block_losses.push(v);
            }
        }
    }
    let doc = ReportDocument {
        config_digest: paths.digest.clone(),
        space: config.space.to_string(),
        epochs: config.trainer.epochs,
        final_block_losses,
        best: read_json(&paths.best())?,
        correlation: read_json::<CorrelationDocument>(&paths.correlation())?.map(|d| d.report),
        track: read_json::<TrackDocument>(&paths.track_json())?.map(|d| d.series),
    };
    Ok(vec![write(
        &paths.report(),
        &serde_json::to_string_pretty(&doc)?,
    )?])
}

/// Runs one subcommand and returns the artifacts it wrote.
pub fn dispatch(command: Command, config: &RunConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let paths = RunPaths::new(config)?;
    let run = || match command {
        Command::Train => train(config, &paths),
        Command::Search => search(config, &paths),
        Command::Oracle => oracle(config, &paths),
        Command::Correlate => correlate_cmd(config, &paths),
        Command::Track => track(config, &paths),
        Command::Report => report(config, &paths),
    };
    if config.workers == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config {
            path: "workers".into(),
            reason: e.to_string(),
        })?
        .install(run)
}
