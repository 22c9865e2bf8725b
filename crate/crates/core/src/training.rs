//! Cross-validated training, evaluation and ablation sweeps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandgen::build_combination;
use crate::data::{accuracy_stats, kfold_split, stratified_kfold, Dataset, FoldPlan};
use crate::error::{invalid_arg, Result};
use crate::model::{ModelConfig, ModelParams, Network, Variant};
use crate::nn::{
    softmax_cross_entropy, softmax_cross_entropy_backward, AdamConfig, AdamState, Checkpoint, Grid, Mode,
};
use crate::rng::{derive_seed, seeded};
use crate::signal::{welch_psd, WelchConfig};
use crate::Error;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5AFF;
const DROPOUT_STREAM: u64 = 0xD209;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seed of parameter initialisation, shuffling and dropout.
    pub seed: u64,
    pub folds: usize,
    /// Seed of the fold plan.
    pub fold_seed: u64,
    pub stratified: bool,
    /// Call the epoch hook every this many epochs (0 disables it).
    pub report_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 39,
            lr: 1e-4,
            seed: 0,
            folds: 10,
            fold_seed: 0,
            stratified: true,
            report_every: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for the desk-scale synthetic preset.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 50,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid_arg!("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid_arg!("batch size must be at least 2 for batch normalisation"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid_arg!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if self.folds < 2 {
            return Err(invalid_arg!("need at least 2 folds"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..Default::default()
        }
    }

    pub fn fold_plan(&self, dataset: &Dataset) -> Result<FoldPlan> {
        if self.stratified {
            stratified_kfold(&dataset.labels(), self.folds, self.fold_seed)
        } else {
            kfold_split(dataset.trials.len(), self.folds, self.fold_seed)
        }
    }
}

/// Unnormalised per-trial network inputs (`C × K` band combinations or
/// `C × P` spectra) with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Grid>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub uses_bands: bool,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.features.first().map_or((0, 0), |g| (g.rows(), g.cols()))
    }
}

/// Welch spectra, then band combinations when `cfg` uses the band
/// generator. Label-free, so computing it once for all folds cannot leak.
pub fn extract_features(dataset: &Dataset, cfg: &ModelConfig, welch: &WelchConfig) -> Result<FeatureSet> {
    dataset.validate()?;
    if dataset.channels != cfg.channels || dataset.n_classes != cfg.n_classes {
        return Err(invalid_arg!(
            "model expects C = {} and {} classes, dataset has C = {} and {} classes",
            cfg.channels,
            cfg.n_classes,
            dataset.channels,
            dataset.n_classes
        ));
    }
    let uses_bands = cfg.variant.uses_bands();
    let features = dataset
        .trials
        .par_iter()
        .map(|t| {
            let psd = welch_psd(t, welch)?;
            if psd.bins() != cfg.psd_bins {
                return Err(invalid_arg!("Welch grid has {} bins, model expects {}", psd.bins(), cfg.psd_bins));
            }
            if uses_bands {
                Ok(build_combination(&psd, &cfg.bands)?.s)
            } else {
                Ok(psd.values)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureSet {
        features,
        labels: dataset.labels(),
        n_classes: dataset.n_classes,
        uses_bands,
    })
}

/// `log(1 + x)` followed by a per-feature z-score fitted on training trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Features whose training spread is below this are only centred.
    pub const MIN_STD: f64 = 1e-12;

    pub fn fit(features: &[Grid], indices: &[usize]) -> Result<Self> {
        let first = indices
            .first()
            .map(|&i| &features[i])
            .ok_or_else(|| invalid_arg!("cannot fit a normaliser on zero trials"))?;
        let d = first.len();
        let mut mean = vec![0.0; d];
        for &i in indices {
            for (m, x) in mean.iter_mut().zip(features[i].as_slice()) {
                *m += x.ln_1p();
            }
        }
        let n = indices.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in indices {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(features[i].as_slice()) {
                let e = x.ln_1p() - m;
                *v += e * e;
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < Self::MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, x: &Grid) -> Grid {
        let data = x
            .as_slice()
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v.ln_1p() - m) / s)
            .collect();
        Grid::from_vec(x.shape(), data).expect("shape preserved")
    }
}

/// Stacks normalised trials into a `[b, 1, C, W]` network input.
fn batch_input(features: &[Grid], norm: &Normalizer, idx: &[usize]) -> Grid {
    let (c, w) = (features[idx[0]].rows(), features[idx[0]].cols());
    let mut data = Vec::with_capacity(idx.len() * c * w);
    for &i in idx {
        data.extend(norm.apply(&features[i]).into_vec());
    }
    Grid::from_vec(&[idx.len(), 1, c, w], data).expect("batch shape")
}

/// Minibatches of the shuffled order; a trailing batch of one trial is
/// folded into its predecessor so batch norm always sees two samples.
pub fn minibatches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    if out.len() >= 2 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * batch_size;
        out[n - 1] = &order[start..];
    }
    out
}

/// Everything a fold produces. Parameters are large, so [`run_cv`] hands
/// each outcome to a sink and keeps only the [`FoldReport`].
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub model: ModelConfig,
    pub params: ModelParams,
    pub initial: ModelParams,
    pub adam: AdamState,
    pub normalizer: Normalizer,
    pub train_indices: Vec<usize>,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
}

pub type EpochHook<'a> = &'a (dyn Fn(usize, usize, f64) + Sync);

/// Trains one model on every fold but `fold` and scores it on `fold`.
pub fn train_fold(
    features: &FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: Option<EpochHook<'_>>,
) -> Result<FoldOutcome> {
    train_fold_impl(features, plan, fold, model_cfg, train_cfg, on_epoch).map_err(|e| e.in_fold(fold))
}

fn train_fold_impl(
    features: &FeatureSet,
    plan: &FoldPlan,
    fold: usize,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    on_epoch: Option<EpochHook<'_>>,
) -> Result<FoldOutcome> {
    train_cfg.validate()?;
    if plan.n_trials() != features.len() || fold >= plan.k {
        return Err(invalid_arg!(
            "fold {fold} of a {}-fold plan over {} trials does not fit {} trials",
            plan.k,
            plan.n_trials(),
            features.len()
        ));
    }
    if features.uses_bands != model_cfg.variant.uses_bands() {
        return Err(invalid_arg!("features were extracted for a different variant"));
    }
    let train = plan.training(fold);
    if train.len() < 2 {
        return Err(invalid_arg!("fold {fold} leaves fewer than two training trials"));
    }
    let valid = plan.validation(fold);
    let normalizer = Normalizer::fit(&features.features, &train)?;

    let init_seed = derive_seed(train_cfg.seed, &[INIT_STREAM, fold as u64]);
    let mut net = Network::build(model_cfg.clone(), init_seed)?;
    let initial = net.params.clone();
    let mut adam = AdamState::new(train_cfg.adam(), net.params.trainable().into_iter().map(|(_, g)| g));
    let mut dropout_rng = seeded(train_cfg.seed, &[DROPOUT_STREAM, fold as u64]);

    let mut loss_curve = Vec::with_capacity(train_cfg.epochs);
    let mut order = train.clone();
    for epoch in 0..train_cfg.epochs {
        order.copy_from_slice(&train);
        rand::seq::SliceRandom::shuffle(
            order.as_mut_slice(),
            &mut seeded(train_cfg.seed, &[SHUFFLE_STREAM, fold as u64, epoch as u64]),
        );
        let mut total = 0.0;
        for batch in minibatches(&order, train_cfg.batch_size) {
            let x = batch_input(&features.features, &normalizer, batch);
            let targets: Vec<usize> = batch.iter().map(|&i| features.labels[i]).collect();
            let logits = net.forward(&x, Mode::Train, &mut dropout_rng)?;
            let (loss, probs) = softmax_cross_entropy(&logits, &targets)?;
            total += loss * batch.len() as f64;
            let grads = net.backward(&softmax_cross_entropy_backward(&probs, &targets))?;
            let grad_refs: Vec<&Grid> = grads.trainable().into_iter().map(|(_, g)| g).collect();
            adam.update(&mut net.params.trainable_mut(), &grad_refs)?;
        }
        let mean_loss = total / train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {}", epoch + 1)));
        }
        loss_curve.push(mean_loss);
        if let Some(hook) = on_epoch {
            if train_cfg.report_every > 0 && (epoch + 1) % train_cfg.report_every == 0 {
                hook(fold, epoch + 1, mean_loss);
            }
        }
    }

    let predictions = predict_indices(&net, &features.features, &normalizer, valid)?;
    let correct = predictions
        .iter()
        .zip(valid)
        .filter(|&(&p, &i)| p == features.labels[i])
        .count();
    Ok(FoldOutcome {
        fold,
        model: model_cfg.clone(),
        params: net.params,
        initial,
        adam,
        normalizer,
        train_indices: train,
        predictions,
        accuracy: correct as f64 / valid.len() as f64,
        loss_curve,
    })
}

/// Eval-mode arg-max class of each indexed trial.
pub fn predict_indices(net: &Network, features: &[Grid], norm: &Normalizer, idx: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = net.logits_eval(&batch_input(features, norm, chunk))?;
        for r in 0..logits.rows() {
            let row = logits.row(r);
            out.push((0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best }));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub accuracy: f64,
    pub loss_curve: Vec<f64>,
    /// Artifact written by the fold sink, if any.
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub folds: Vec<FoldReport>,
    pub mean: f64,
    pub std: f64,
    pub plan: FoldPlan,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: serde_json::Value,
    /// Excluded from every serialised form so that outputs stay
    /// reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

pub const REPORT_CSV_HEADER: &str = "variant,fold,n_train,n_validation,accuracy,final_loss";

impl RunReport {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    /// Per-fold rows followed by `mean` and `std` summary rows, without the
    /// header.
    pub fn csv_rows(&self) -> String {
        let v = self.variant.name();
        let mut out = String::new();
        for f in &self.folds {
            let loss = f.loss_curve.last().map_or(String::new(), |l| l.to_string());
            out.push_str(&format!("{v},{},{},{},{},{loss}\n", f.fold, f.n_train, f.n_validation, f.accuracy));
        }
        out.push_str(&format!("{v},mean,,,{},\n", self.mean));
        out.push_str(&format!("{v},std,,,{},\n", self.std));
        out
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}", self.csv_rows())
    }

    /// Epoch-by-epoch training loss, one column per fold.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch");
        for f in &self.folds {
            out.push_str(&format!(",fold{}", f.fold));
        }
        out.push('\n');
        let epochs = self.folds.iter().map(|f| f.loss_curve.len()).max().unwrap_or(0);
        for e in 0..epochs {
            out.push_str(&(e + 1).to_string());
            for f in &self.folds {
                out.push(',');
                if let Some(l) = f.loss_curve.get(e) {
                    out.push_str(&l.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn manifest(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serialises")
    }
}

/// Side-by-side CSV of several reports sharing one header.
pub fn reports_csv(reports: &[RunReport]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

/// Called once per finished fold; may persist the outcome and return the
/// path it wrote.
pub type FoldSink<'a> = &'a (dyn Fn(&FoldOutcome) -> Result<Option<String>> + Sync);

#[derive(Clone, Copy, Default)]
pub struct Hooks<'a> {
    pub on_fold: Option<FoldSink<'a>>,
    pub on_epoch: Option<EpochHook<'a>>,
}

/// k-fold cross-validation of one variant. Folds train in parallel; the
/// result does not depend on the thread count.
pub fn run_cv(dataset: &Dataset, model_cfg: &ModelConfig, train_cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<RunReport> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    let plan = train_cfg.fold_plan(dataset)?;
    let features = extract_features(dataset, model_cfg, &WelchConfig::default())?;
    run_cv_with(&features, &plan, dataset, model_cfg, train_cfg, hooks)
}

/// [`run_cv`] on precomputed features and a given plan.
pub fn run_cv_with(
    features: &FeatureSet,
    plan: &FoldPlan,
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    hooks: Hooks<'_>,
) -> Result<RunReport> {
    let started = std::time::Instant::now();
    let folds = (0..plan.k)
        .into_par_iter()
        .map(|fold| {
            let outcome = train_fold(features, plan, fold, model_cfg, train_cfg, hooks.on_epoch)?;
            let checkpoint = match hooks.on_fold {
                Some(sink) => sink(&outcome).map_err(|e| e.in_fold(fold))?,
                None => None,
            };
            Ok(FoldReport {
                fold,
                n_train: outcome.train_indices.len(),
                n_validation: plan.validation(fold).len(),
                accuracy: outcome.accuracy,
                loss_curve: outcome.loss_curve,
                checkpoint,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
    let (mean, std) = accuracy_stats(&accs)?;
    Ok(RunReport {
        variant: model_cfg.variant,
        folds,
        mean,
        std,
        plan: plan.clone(),
        model: model_cfg.clone(),
        train: train_cfg.clone(),
        dataset: dataset.manifest(),
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Runs all three variants on the same folds and seeds. `model_cfg.variant`
/// is ignored.
pub fn run_ablation(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    hooks: Hooks<'_>,
) -> Result<Vec<RunReport>> {
    train_cfg.validate()?;
    let plan = train_cfg.fold_plan(dataset)?;
    let welch = WelchConfig::default();
    let mut reports = Vec::with_capacity(3);
    for variant in Variant::ALL {
        let cfg = ModelConfig { variant, ..model_cfg.clone() };
        cfg.validate()?;
        let features = extract_features(dataset, &cfg, &welch)?;
        reports.push(run_cv_with(&features, &plan, dataset, &cfg, train_cfg, hooks)?);
    }
    Ok(reports)
}

pub const CHECKPOINT_KIND: &str = "oescn-fold";

/// JSON manifest stored inside a fold checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub kind: String,
    pub fold: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub n_trials: usize,
    pub validation: Vec<usize>,
    pub accuracy: f64,
}

impl FoldOutcome {
    /// Parameters, batch-norm buffers, normaliser and optimizer state in
    /// the checkpoint container.
    pub fn checkpoint(&self, plan: &FoldPlan, train_cfg: &TrainConfig) -> Checkpoint {
        let manifest = FoldManifest {
            kind: CHECKPOINT_KIND.into(),
            fold: self.fold,
            model: self.model.clone(),
            train: train_cfg.clone(),
            n_trials: plan.n_trials(),
            validation: plan.validation(self.fold).to_vec(),
            accuracy: self.accuracy,
        };
        let mut grids = self.params.named_grids();
        let d = self.normalizer.mean.len();
        for (name, v) in [("normalizer.mean", &self.normalizer.mean), ("normalizer.std", &self.normalizer.std)] {
            grids.push((name.to_string(), Grid::from_vec(&[d], v.clone()).expect("vector grid")));
        }
        Checkpoint {
            manifest: serde_json::to_string(&manifest).expect("manifest serialises"),
            grids,
            adam: Some(self.adam.clone()),
        }
    }
}

/// A trained fold restored from its checkpoint.
pub struct RestoredFold {
    pub manifest: FoldManifest,
    pub network: Network,
    pub normalizer: Normalizer,
}

pub fn restore_fold(ck: &Checkpoint) -> Result<RestoredFold> {
    let manifest: FoldManifest = serde_json::from_str(&ck.manifest)
        .map_err(|e| Error::InvalidData(format!("checkpoint manifest: {e}")))?;
    if manifest.kind != CHECKPOINT_KIND {
        return Err(Error::InvalidData(format!("checkpoint kind {:?} is not a fold checkpoint", manifest.kind)));
    }
    let params = ModelParams::from_checkpoint(&manifest.model, ck)?;
    let network = Network::new(manifest.model.clone(), params)?;
    let vector = |name: &str| -> Result<Vec<f64>> {
        ck.grid(name)
            .map(|g| g.as_slice().to_vec())
            .ok_or_else(|| Error::InvalidData(format!("checkpoint is missing {name}")))
    };
    let normalizer = Normalizer {
        mean: vector("normalizer.mean")?,
        std: vector("normalizer.std")?,
    };
    let width = manifest.model.channels * manifest.model.input_width()?;
    if normalizer.mean.len() != width || normalizer.std.len() != width {
        return Err(Error::InvalidData("normaliser does not match the model input".into()));
    }
    Ok(RestoredFold {
        manifest,
        network,
        normalizer,
    })
}
