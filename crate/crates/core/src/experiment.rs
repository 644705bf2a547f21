//! End-to-end runs: load data, train one model per seed, evaluate, and
//! expert ablations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataio::manifest::{Manifest, Split};
use crate::dataio::synth::generate;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig};
use crate::params::ParamStore;
use crate::record::VideoRecord;
use crate::report::{evaluate_model, EvalReport, MultiSeedReport};
use crate::training::{TrainingSet, Trainer};

/// Records of the training and evaluation splits.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<VideoRecord<f64>>,
    pub eval: Vec<VideoRecord<f64>>,
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let split = |all: &dyn Fn(Split) -> Result<Vec<VideoRecord<f64>>>| -> Result<Dataset> {
        let train = all(cfg.data.train_split)?;
        let eval = if cfg.data.eval_split == cfg.data.train_split {
            train.clone()
        } else {
            all(cfg.data.eval_split)?
        };
        Ok(Dataset { train, eval })
    };
    match (&cfg.data.synthetic, &cfg.data.manifest) {
        (Some(spec), None) => {
            let data = generate(spec)?;
            split(&|s| Ok(data.split(s)))
        }
        (None, Some(path)) => {
            let manifest = Manifest::read(path)?;
            split(&|s| manifest.load::<f64>(&cfg.model, s))
        }
        _ => Err(Error::Config("data: exactly one of `manifest` or `synthetic` is required".into())),
    }
}

/// Records with at least one of `cfg`'s experts, and how many were dropped.
pub fn encodable(records: &[VideoRecord<f64>], cfg: &ModelConfig) -> (Vec<VideoRecord<f64>>, usize) {
    let keep: Vec<_> = records
        .iter()
        .filter(|r| cfg.experts.iter().any(|e| r.expert(&e.name).is_some()))
        .cloned()
        .collect();
    let dropped = records.len() - keep.len();
    (keep, dropped)
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_LOG: &str = "losses.jsonl";

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub seed: u64,
    pub params: ParamStore<f64>,
    pub losses: Vec<f64>,
    /// Step the run resumed from, if any.
    pub resumed_from: Option<usize>,
}

/// Trains one seed. With `out`, checkpoints go to `out/checkpoint` every
/// `checkpoint_every` steps and at the end, the loss log to
/// `out/losses.jsonl`; with `resume`, training continues from an existing
/// checkpoint there.
pub fn train_seed(
    cfg: &RunConfig,
    model: &ModelConfig,
    train: &[VideoRecord<f64>],
    seed: u64,
    out: Option<&Path>,
    resume: bool,
) -> Result<TrainOutcome> {
    let set = TrainingSet::new(train, model)?;
    let mut run_cfg = cfg.clone();
    run_cfg.model = model.clone();
    let hash = run_cfg.training_hash(seed)?;
    let ckpt_dir = out.map(|o| o.join(CHECKPOINT_DIR));

    let mut resumed_from = None;
    let mut trainer = match &ckpt_dir {
        Some(dir) if resume && dir.join(checkpoint::HEADER_FILE).exists() => {
            let like = init_params(model, seed)?;
            let (_, state) = checkpoint::load(dir, Some(&hash), &like)?;
            resumed_from = Some(state.losses.len());
            Trainer::resume(model.clone(), cfg.training, cfg.optim, &set, seed, state)?
        }
        _ => Trainer::new(model.clone(), cfg.training, cfg.optim, &set, seed)?,
    };
    let save = |t: &Trainer<'_>| -> Result<()> {
        match &ckpt_dir {
            Some(dir) => checkpoint::save(dir, &hash, seed, &t.state()),
            None => Ok(()),
        }
    };
    trainer.run(save)?;
    if let Some(o) = out {
        save(&trainer)?;
        write_loss_log(&o.join(LOSS_LOG), &trainer.losses)?;
    }
    Ok(TrainOutcome {
        seed,
        params: trainer.params,
        losses: trainer.losses,
        resumed_from,
    })
}

fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    #[derive(Serialize)]
    struct Line {
        step: usize,
        loss: f64,
    }
    let mut text = String::new();
    for (i, &loss) in losses.iter().enumerate() {
        text.push_str(&serde_json::to_string(&Line { step: i + 1, loss })?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn eval_seed(
    cfg: &RunConfig,
    model: &ModelConfig,
    params: &ParamStore<f64>,
    records: &[VideoRecord<f64>],
    seed: u64,
) -> Result<EvalReport> {
    let (t2v, v2t) = evaluate_model(model, params, records, &cfg.eval.ks)?;
    Ok(EvalReport {
        seed,
        variant: model.variant,
        experts: model.expert_names().iter().map(|s| s.to_string()).collect(),
        split: cfg.data.eval_split,
        text_to_video: t2v,
        video_to_text: v2t,
    })
}

/// Train and evaluate every configured seed for `model`.
pub fn run_seeds(cfg: &RunConfig, model: &ModelConfig, data: &Dataset, out: Option<&Path>) -> Result<MultiSeedReport> {
    let (train, _) = encodable(&data.train, model);
    let (eval, _) = encodable(&data.eval, model);
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let dir: Option<PathBuf> = out.map(|o| o.join(format!("seed_{seed}")));
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let trained = train_seed(cfg, model, &train, seed, dir.as_deref(), false)?;
        runs.push(eval_seed(cfg, model, &trained.params, &eval, seed)?);
    }
    MultiSeedReport::new(runs)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Exactly the listed experts.
    Subset(Vec<String>),
    /// Row k uses the first k configured experts.
    Cumulative,
    /// The first expert paired with each other expert in turn.
    Pairwise,
}

impl AblationMode {
    /// `cumulative`, `pairwise`, or a `+`/`,`-separated expert list.
    pub fn parse(s: &str) -> AblationMode {
        match s {
            "cumulative" => AblationMode::Cumulative,
            "pairwise" => AblationMode::Pairwise,
            list => AblationMode::Subset(
                list.split(['+', ','])
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(str::to_string)
                    .collect(),
            ),
        }
    }
}

/// The expert sets evaluated by `mode`, one per report row.
pub fn ablation_rows(mode: &AblationMode, cfg: &ModelConfig) -> Result<Vec<Vec<String>>> {
    let names: Vec<String> = cfg.expert_names().iter().map(|s| s.to_string()).collect();
    match mode {
        AblationMode::Subset(list) => {
            if list.is_empty() {
                return Err(Error::Config("empty expert subset".into()));
            }
            let refs: Vec<&str> = list.iter().map(String::as_str).collect();
            cfg.with_experts(&refs)?;
            Ok(vec![list.clone()])
        }
        AblationMode::Cumulative => Ok((1..=names.len()).map(|k| names[..k].to_vec()).collect()),
        AblationMode::Pairwise => {
            if names.len() < 2 {
                return Err(Error::Config("pairwise ablation needs at least two experts".into()));
            }
            Ok(names[1..].iter().map(|x| vec![names[0].clone(), x.clone()]).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experts: Vec<String>,
    /// Videos left out because none of these experts is available for them.
    pub dropped_train: usize,
    pub dropped_eval: usize,
    pub report: MultiSeedReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One line per row with text→video mean ± std for every metric.
    pub fn to_table(&self) -> String {
        use crate::metrics::Direction;
        let Some(first) = self.rows.first() else {
            return String::new();
        };
        let header: Vec<String> = first
            .report
            .summary
            .iter()
            .filter(|s| s.direction == Direction::TextToVideo)
            .map(|s| s.metric.clone())
            .collect();
        let rows: Vec<(String, Vec<String>)> = self
            .rows
            .iter()
            .map(|r| {
                let cells = r
                    .report
                    .summary
                    .iter()
                    .filter(|s| s.direction == Direction::TextToVideo)
                    .map(|s| format!("{:.2} ± {:.2}", s.mean, s.std))
                    .collect();
                (r.experts.join("+"), cells)
            })
            .collect();
        format!("text->video\n{}", crate::report::aligned(&header, &rows))
    }
}

pub fn ablate(cfg: &RunConfig, data: &Dataset, mode: &AblationMode, out: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for experts in ablation_rows(mode, &cfg.model)? {
        let refs: Vec<&str> = experts.iter().map(String::as_str).collect();
        let model = cfg.model.with_experts(&refs)?;
        let (_, dropped_train) = encodable(&data.train, &model);
        let (_, dropped_eval) = encodable(&data.eval, &model);
        let dir = out.map(|o| o.join(experts.join("+")));
        let report = run_seeds(cfg, &model, data, dir.as_deref())?;
        rows.push(AblationRow {
            experts,
            dropped_train,
            dropped_eval,
            report,
        });
    }
    Ok(AblationReport {
        mode: mode.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::small_config;
    use crate::model::Variant;

    #[test]
    fn ladder_shapes() {
        let cfg = small_config(Variant::Ce);
        let cum = ablation_rows(&AblationMode::Cumulative, &cfg).unwrap();
        assert_eq!(cum, vec![vec!["scene"], vec!["scene", "audio"], vec!["scene", "audio", "face"]]);
        let pair = ablation_rows(&AblationMode::Pairwise, &cfg).unwrap();
        assert_eq!(pair, vec![vec!["scene", "audio"], vec!["scene", "face"]]);
        let one = ablation_rows(&AblationMode::parse("face"), &cfg).unwrap();
        assert_eq!(one.len(), 1);
        let err = ablation_rows(&AblationMode::parse("scene+speech"), &cfg).unwrap_err();
        assert!(err.to_string().contains("valid experts: scene, audio, face"), "{err}");
    }
}
