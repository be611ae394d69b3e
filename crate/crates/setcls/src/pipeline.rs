//! Training loop, evaluation metrics, score fusion, and tracklet
//! re-classification, plus the `key = value` config-file format the CLI
//! consumes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{sampling_probs, RoiPool, SamplerConfig, Tracklet, TrackletGenerator};
use crate::diffcore::{Optimizer, OptimizerConfig, OptimizerKind, Tensor};
use crate::losses::{cluster_loss, instance_loss, set_loss, total_loss, LossWeights};
use crate::model::{
    argmax_lowest, subsample_indices, SetClassifierConfig, SetClassifierModel, MAX_TRACKLET_LEN,
};
use crate::synthdata::{frequency_groups, EvalTracklet, FrequencyGroups, GroupedAccuracy};
use crate::{Error, Result};

/// Everything needed to run training except the data and the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub sampler: SamplerConfig,
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub feedforward_dim: usize,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    /// Evaluate on the held-out set every this many iterations; 0 disables.
    pub eval_interval: usize,
    /// Fraction of each batch drawn from the auxiliary pool when one is
    /// given; the remainder comes from the primary pool.
    pub aux_pool_ratio: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sampler: SamplerConfig::default(),
            model_dim: 512,
            heads: 8,
            encoder_layers: 3,
            feedforward_dim: 2048,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            iterations: 5000,
            eval_interval: 500,
            aux_pool_ratio: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.weights.validate()?;
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.aux_pool_ratio) {
            return Err(Error::Config("aux_pool_ratio must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> SetClassifierConfig {
        SetClassifierConfig {
            input_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            num_classes,
            feedforward_dim: self.feedforward_dim,
        }
    }

    /// Parses the `key = value` config format: UTF-8 text, one pair per
    /// line, `#` starts a comment, blank lines ignored, unknown keys are
    /// errors. Unmentioned keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!("line {}: invalid {what} value {value:?}", lineno + 1))
            };
            match key {
                "exponent" => cfg.sampler.exponent = value.parse().map_err(|_| bad(key))?,
                "length_min" => cfg.sampler.length_min = value.parse().map_err(|_| bad(key))?,
                "length_max" => {
                    cfg.sampler.length_max_exclusive = value.parse().map_err(|_| bad(key))?
                }
                "tracklets_per_batch" => {
                    cfg.sampler.tracklets_per_batch = value.parse().map_err(|_| bad(key))?
                }
                "allow_multi_identity" => {
                    cfg.sampler.allow_multi_identity = parse_bool(value).ok_or_else(|| bad(key))?
                }
                "allow_multi_class" => {
                    cfg.sampler.allow_multi_class = parse_bool(value).ok_or_else(|| bad(key))?
                }
                "model_dim" => cfg.model_dim = value.parse().map_err(|_| bad(key))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad(key))?,
                "encoder_layers" => cfg.encoder_layers = value.parse().map_err(|_| bad(key))?,
                "feedforward_dim" => cfg.feedforward_dim = value.parse().map_err(|_| bad(key))?,
                "w_sc" => cfg.weights.w_sc = value.parse().map_err(|_| bad(key))?,
                "w_ins" => cfg.weights.w_ins = value.parse().map_err(|_| bad(key))?,
                "w_cluster" => cfg.weights.w_cluster = value.parse().map_err(|_| bad(key))?,
                "optimizer" => {
                    cfg.optimizer.kind = match value {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => return Err(bad(key)),
                    }
                }
                "learning_rate" => {
                    cfg.optimizer.learning_rate = value.parse().map_err(|_| bad(key))?
                }
                "momentum" => cfg.optimizer.momentum = value.parse().map_err(|_| bad(key))?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad(key))?,
                "eval_interval" => cfg.eval_interval = value.parse().map_err(|_| bad(key))?,
                "aux_pool_ratio" => cfg.aux_pool_ratio = value.parse().map_err(|_| bad(key))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown config key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Some(true),
        "false" | "off" | "0" | "no" => Some(false),
        _ => None,
    }
}

/// One periodic held-out evaluation during training.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalPoint {
    pub iteration: usize,
    pub accuracy: GroupedAccuracy,
}

pub struct TrainResult {
    pub model: SetClassifierModel,
    /// Mean batch loss per iteration, in order.
    pub loss_history: Vec<f64>,
    pub eval_history: Vec<EvalPoint>,
}

/// Trains a fresh set classifier on augmented tracklet batches. When an
/// auxiliary pool is given, each batch mixes tracklets from both pools
/// according to `aux_pool_ratio`. Single-threaded on purpose: runs with the
/// same seed produce bit-identical parameters.
pub fn train(
    pool: &RoiPool,
    aux_pool: Option<&RoiPool>,
    cfg: &TrainConfig,
    seed: u64,
    eval_set: Option<&[EvalTracklet]>,
    verbose: bool,
) -> Result<TrainResult> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(pool.feature_dim(), pool.num_classes());
    let mut model = SetClassifierModel::new(model_cfg, seed)?;
    let generator = TrackletGenerator::new(pool, cfg.sampler.clone())?;
    let aux_generator = match aux_pool {
        Some(aux) => {
            if aux.feature_dim() != pool.feature_dim()
                || aux.num_classes() != pool.num_classes()
            {
                return Err(Error::Data(
                    "auxiliary pool dimensions do not match the primary pool".into(),
                ));
            }
            Some(TrackletGenerator::new(aux, cfg.sampler.clone())?)
        }
        None => None,
    };
    let mut opt = Optimizer::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(0x5e7c1a55));
    let groups = frequency_groups(pool.class_counts());

    let mut loss_history = Vec::with_capacity(cfg.iterations);
    let mut eval_history = Vec::new();
    let batch_size = cfg.sampler.tracklets_per_batch;
    for iter in 1..=cfg.iterations {
        // draw each tracklet's source pool first so the mix is unbiased
        let sources: Vec<bool> = (0..batch_size)
            .map(|_| aux_generator.is_some() && rng.random::<f64>() < cfg.aux_pool_ratio)
            .collect();
        let mut batch_loss = 0.0;
        model.params.zero_grads();
        for &from_aux in &sources {
            let (gen, src_pool) = if from_aux {
                (aux_generator.as_ref().unwrap(), aux_pool.unwrap())
            } else {
                (&generator, pool)
            };
            let tracklet = gen.generate_tracklet(&mut rng)?;
            let loss = tracklet_loss(&mut model, src_pool, &tracklet, &cfg.weights, batch_size)?;
            batch_loss += loss / batch_size as f64;
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "batch loss became {batch_loss} at iteration {iter}"
            )));
        }
        opt.step(&mut model.params)?;
        loss_history.push(batch_loss);

        let do_eval = cfg.eval_interval > 0
            && (iter % cfg.eval_interval == 0 || iter == cfg.iterations);
        if do_eval {
            if let Some(test) = eval_set {
                let accuracy = evaluate(&model, test, &groups)?.accuracy;
                eval_history.push(EvalPoint { iteration: iter, accuracy });
                if verbose {
                    eprintln!(
                        "iter {iter}: loss {batch_loss:.4}, overall {:.3}, rare {}",
                        accuracy.overall.accuracy().unwrap_or(f64::NAN),
                        accuracy
                            .rare
                            .accuracy()
                            .map_or("n/a".into(), |a| format!("{a:.3}")),
                    );
                }
            } else if verbose {
                eprintln!("iter {iter}: loss {batch_loss:.4}");
            }
        }
    }
    Ok(TrainResult { model, loss_history, eval_history })
}

/// Forward + all three objectives for one tracklet; accumulates parameter
/// gradients scaled by `1 / batch_size` and returns the weighted loss value.
fn tracklet_loss(
    model: &mut SetClassifierModel,
    pool: &RoiPool,
    tracklet: &Tracklet,
    weights: &LossWeights,
    batch_size: usize,
) -> Result<f64> {
    let items = tracklet.items(pool);
    let din = pool.feature_dim();
    let mut data = Vec::with_capacity(items.len() * din);
    let mut cats = Vec::with_capacity(items.len());
    let mut idents = Vec::with_capacity(items.len());
    for rec in &items {
        data.extend_from_slice(&rec.feature);
        cats.push(rec.category);
        idents.push(rec.identity);
    }
    let features = Tensor::matrix(items.len(), din, data)?;
    let mut pass = model.forward(&features)?;
    let l_sc = set_loss(&mut pass.tape, pass.output.set_logits, &tracklet.soft_label)?;
    let l_ins = instance_loss(&mut pass.tape, &cats, pass.output.instance_logits)?;
    let l_cluster = cluster_loss(&mut pass.tape, &cats, &idents, pass.output.cluster_logits)?;
    let (total, report) = total_loss(&mut pass.tape, l_sc, l_ins, l_cluster, weights)?;
    pass.accumulate_grads(total, &mut model.params, 1.0 / batch_size as f64)?;
    Ok(report.total)
}

/// Set-classifier probabilities for one view sequence; sequences longer
/// than the token cap are evenly subsampled first.
pub fn classify_views(model: &SetClassifierModel, views: &[Vec<f64>]) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::Data("empty tracklet".into()));
    }
    let din = model.config.input_dim;
    let picks = subsample_indices(views.len(), MAX_TRACKLET_LEN);
    let mut data = Vec::with_capacity(picks.len() * din);
    for &i in &picks {
        if views[i].len() != din {
            return Err(Error::Shape(format!(
                "view dim {} != model input dim {din}",
                views[i].len()
            )));
        }
        data.extend_from_slice(&views[i]);
    }
    let pass = model.forward(&Tensor::matrix(picks.len(), din, data)?)?;
    Ok(SetClassifierModel::predict_set_probs(&pass))
}

/// Accuracy plus confusion counts; `confusion[label][prediction]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: GroupedAccuracy,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    /// Aligned text table of the per-group accuracies.
    pub fn to_text_table(&self) -> String {
        let mut out = String::from(
            "group     correct    total  accuracy\n\
             --------  -------  -------  --------\n",
        );
        let rows = [
            ("overall", self.accuracy.overall),
            ("rare", self.accuracy.rare),
            ("common", self.accuracy.common),
            ("frequent", self.accuracy.frequent),
        ];
        for (name, stat) in rows {
            let acc = stat.accuracy().map_or("     n/a".into(), |a| format!("{a:8.4}"));
            out.push_str(&format!(
                "{name:<8}  {:>7}  {:>7}  {acc}\n",
                stat.correct, stat.total
            ));
        }
        out
    }
}

pub fn evaluate(
    model: &SetClassifierModel,
    test: &[EvalTracklet],
    groups: &FrequencyGroups,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let c = model.config.num_classes;
    let mut accuracy = GroupedAccuracy::default();
    let mut confusion = vec![vec![0u64; c]; c];
    for tracklet in test {
        if tracklet.label >= c {
            return Err(Error::Data(format!("label {} out of range 0..{c}", tracklet.label)));
        }
        let probs = classify_views(model, &tracklet.views)?;
        let prediction = argmax_lowest(&probs);
        accuracy.tally(tracklet.label, prediction, groups);
        confusion[tracklet.label][prediction] += 1;
    }
    Ok(EvalReport { accuracy, confusion })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda_c: f64,
    pub lambda_s: f64,
    /// Multiply fused scores by the tracklet length.
    pub length_penalty: bool,
    /// Use the scalar max class probability in place of the per-class
    /// vector; the predicted label then comes from the probabilities alone.
    pub scalar_set_score: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            lambda_c: 1.0 / 3.0,
            lambda_s: 2.0 / 3.0,
            length_penalty: true,
            scalar_set_score: false,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_c < 0.0 || self.lambda_s < 0.0 {
            return Err(Error::Config("fusion exponents must be >= 0".into()));
        }
        Ok(())
    }
}

/// `pow` that is exact at exponents 0 and 1 so the fusion identities hold
/// bit-for-bit.
fn fuse_pow(base: f64, exponent: f64) -> f64 {
    if exponent == 0.0 {
        1.0
    } else if exponent == 1.0 {
        base
    } else {
        base.powf(exponent)
    }
}

/// Per class: `c_k^lambda_c * s^lambda_s`, then times the length when the
/// penalty is on.
pub fn fuse_scores(
    set_probs: &[f64],
    tracker_score: f64,
    length: usize,
    cfg: &FusionConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if set_probs.is_empty() || length == 0 {
        return Err(Error::Invalid("fusion needs class scores and length >= 1".into()));
    }
    if set_probs.iter().any(|&p| p < 0.0) {
        return Err(Error::Invalid("negative class score".into()));
    }
    let sum: f64 = set_probs.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("class scores sum to {sum}, not 1")));
    }
    if !(0.0..=1.0).contains(&tracker_score) {
        return Err(Error::Invalid(format!("tracker score {tracker_score} outside [0, 1]")));
    }
    let s_part = fuse_pow(tracker_score, cfg.lambda_s);
    let len_part = if cfg.length_penalty { length as f64 } else { 1.0 };
    Ok(set_probs
        .iter()
        .map(|&c| {
            let c_part = if cfg.scalar_set_score {
                fuse_pow(set_probs.iter().cloned().fold(0.0, f64::max), cfg.lambda_c)
            } else {
                fuse_pow(c, cfg.lambda_c)
            };
            c_part * s_part * len_part
        })
        .collect())
}

/// An upstream tracklet awaiting re-classification: raw views, the
/// tracker's scalar confidence, and passthrough geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedTracklet {
    pub views: Vec<Vec<f64>>,
    pub score: f64,
    #[serde(default)]
    pub identity: u64,
    #[serde(default)]
    pub boxes: Vec<[f64; 4]>,
}

/// Output row: a new label and fused scores; boxes and identity are copied
/// through untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclassifiedTracklet {
    pub identity: u64,
    pub label: usize,
    pub fused: Vec<f64>,
    pub set_probs: Vec<f64>,
    pub score: f64,
    pub length: usize,
    pub boxes: Vec<[f64; 4]>,
}

pub fn reclassify(
    model: &SetClassifierModel,
    tracklets: &[PredictedTracklet],
    cfg: &FusionConfig,
) -> Result<Vec<ReclassifiedTracklet>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(tracklets.len());
    for t in tracklets {
        let set_probs = classify_views(model, &t.views)?;
        // the penalty uses the original length, not the subsampled one
        let fused = fuse_scores(&set_probs, t.score, t.views.len(), cfg)?;
        let label = if cfg.scalar_set_score {
            argmax_lowest(&set_probs)
        } else {
            argmax_lowest(&fused)
        };
        out.push(ReclassifiedTracklet {
            identity: t.identity,
            label,
            fused,
            set_probs,
            score: t.score,
            length: t.views.len(),
            boxes: t.boxes.clone(),
        });
    }
    Ok(out)
}

pub fn read_predicted_tracklets(path: &Path) -> Result<Vec<PredictedTracklet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: PredictedTracklet = serde_json::from_str(&line)?;
        if t.views.is_empty() {
            return Err(Error::Data("tracklet with no views".into()));
        }
        if !(0.0..=1.0).contains(&t.score) {
            return Err(Error::Data(format!("tracker score {} outside [0, 1]", t.score)));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no tracklets in {}", path.display())));
    }
    Ok(out)
}

pub fn write_reclassified(path: &Path, rows: &[ReclassifiedTracklet]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Checks every model parameter's reverse-mode gradient of the full
/// three-part objective against central finite differences on a random
/// tracklet. `entries_per_param` probes per tensor (0 = every entry).
pub fn check_model_gradients(
    config: SetClassifierConfig,
    tracklet_len: usize,
    entries_per_param: usize,
    tolerance: f64,
    seed: u64,
) -> Result<crate::diffcore::gradcheck::GradCheckReport> {
    use crate::diffcore::gradcheck::{check_param_grads, DEFAULT_FD_STEP};
    config.validate()?;
    let model = SetClassifierModel::new(config, seed)?;
    let c = config.num_classes;
    let l = tracklet_len;
    let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(1));
    let features = Tensor::matrix(
        l,
        config.input_dim,
        (0..l * config.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let cats: Vec<usize> = (0..l).map(|_| rng.random_range(0..c)).collect();
    let idents: Vec<u64> = (0..l).map(|_| rng.random_range(0..3u64)).collect();
    let mut soft = vec![0.0; c];
    for &cat in &cats {
        soft[cat] += 1.0 / l as f64;
    }
    let weights = LossWeights::default();

    // analytic gradients once, into a standalone parameter store
    let mut params = {
        let mut pass = model.forward(&features)?;
        let l_sc = set_loss(&mut pass.tape, pass.output.set_logits, &soft)?;
        let l_ins = instance_loss(&mut pass.tape, &cats, pass.output.instance_logits)?;
        let l_cl = cluster_loss(&mut pass.tape, &cats, &idents, pass.output.cluster_logits)?;
        let (total, _) = total_loss(&mut pass.tape, l_sc, l_ins, l_cl, &weights)?;
        let mut store = model.params.clone();
        store.zero_grads();
        pass.accumulate_grads(total, &mut store, 1.0)?;
        store
    };

    let mut loss_fn = |ps: &crate::diffcore::ParamSet| -> Result<f64> {
        let probe = model.with_params(ps.clone())?;
        let mut pass = probe.forward(&features)?;
        let l_sc = set_loss(&mut pass.tape, pass.output.set_logits, &soft)?;
        let l_ins = instance_loss(&mut pass.tape, &cats, pass.output.instance_logits)?;
        let l_cl = cluster_loss(&mut pass.tape, &cats, &idents, pass.output.cluster_logits)?;
        let (_, report) = total_loss(&mut pass.tape, l_sc, l_ins, l_cl, &weights)?;
        Ok(report.total)
    };
    check_param_grads(&mut params, &mut loss_fn, DEFAULT_FD_STEP, entries_per_param, tolerance)
}

/// Analytic vs empirical record-draw distribution for one pool/exponent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleStats {
    pub draws: usize,
    pub l1_record: f64,
    pub l1_class: f64,
    pub analytic_class: Vec<f64>,
    pub empirical_class: Vec<f64>,
}

pub fn sample_stats(
    pool: &RoiPool,
    exponent: f64,
    draws: usize,
    seed: u64,
) -> Result<SampleStats> {
    if draws == 0 {
        return Err(Error::Invalid("draws must be >= 1".into()));
    }
    let probs = sampling_probs(pool, exponent)?;
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for &p in &probs {
        acc += p;
        cumulative.push(acc);
    }
    let total = acc;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut hits = vec![0u64; probs.len()];
    for _ in 0..draws {
        let dart = rng.random::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c <= dart).min(probs.len() - 1);
        hits[idx] += 1;
    }
    let l1_record: f64 = hits
        .iter()
        .zip(&probs)
        .map(|(&h, &p)| (h as f64 / draws as f64 - p).abs())
        .sum();
    let c = pool.num_classes();
    let mut analytic_class = vec![0.0; c];
    let mut empirical_class = vec![0.0; c];
    for (i, rec) in pool.records().iter().enumerate() {
        analytic_class[rec.category] += probs[i];
        empirical_class[rec.category] += hits[i] as f64 / draws as f64;
    }
    let l1_class: f64 = analytic_class
        .iter()
        .zip(&empirical_class)
        .map(|(a, e)| (a - e).abs())
        .sum();
    Ok(SampleStats { draws, l1_record, l1_class, analytic_class, empirical_class })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, GroupStat, SynthConfig};

    fn small_synth(seed: u64) -> crate::synthdata::SynthDataset {
        generate_dataset(&SynthConfig {
            num_classes: 5,
            feature_dim: 6,
            total_instances: 40,
            views_per_instance: 6,
            zipf_exponent: 0.5,
            test_instances_per_class: 2,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn small_train_config() -> TrainConfig {
        TrainConfig {
            sampler: SamplerConfig {
                length_min: 4,
                length_max_exclusive: 7,
                tracklets_per_batch: 4,
                ..SamplerConfig::default()
            },
            model_dim: 8,
            heads: 2,
            encoder_layers: 1,
            feedforward_dim: 16,
            iterations: 1,
            eval_interval: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_parse_roundtrip_and_defaults() {
        let text = "\
# sampler
exponent = 0.75
length_min = 8
length_max = 16   # exclusive
allow_multi_class = off

model_dim = 64
heads = 4
optimizer = sgd
learning_rate = 0.01
iterations = 100
";
        let cfg = TrainConfig::parse(text).unwrap();
        assert_eq!(cfg.sampler.exponent, 0.75);
        assert_eq!(cfg.sampler.length_min, 8);
        assert_eq!(cfg.sampler.length_max_exclusive, 16);
        assert!(!cfg.sampler.allow_multi_class);
        assert!(cfg.sampler.allow_multi_identity); // untouched default
        assert_eq!(cfg.model_dim, 64);
        assert_eq!(cfg.heads, 4);
        assert!(matches!(cfg.optimizer.kind, OptimizerKind::Sgd));
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.iterations, 100);
        assert_eq!(cfg.weights.w_sc, 0.05); // untouched default
    }

    #[test]
    fn config_parse_rejects_unknown_keys_and_garbage() {
        assert!(TrainConfig::parse("no_such_key = 1").is_err());
        assert!(TrainConfig::parse("iterations").is_err());
        assert!(TrainConfig::parse("iterations = soon").is_err());
        assert!(TrainConfig::parse("iterations = 0").is_err());
        assert!(TrainConfig::parse("allow_multi_identity = maybe").is_err());
    }

    #[test]
    fn one_iteration_train_writes_loadable_checkpoint() {
        let ds = small_synth(1);
        let cfg = small_train_config();
        let result = train(&ds.pool, None, &cfg, 3, None, false).unwrap();
        assert_eq!(result.loss_history.len(), 1);
        assert!(result.loss_history[0].is_finite());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sckp");
        result.model.save(&path).unwrap();
        let loaded = SetClassifierModel::load(&path).unwrap();
        assert_eq!(loaded.config, result.model.config);
    }

    #[test]
    fn training_loss_trends_downward() {
        let ds = small_synth(2);
        let cfg = TrainConfig {
            iterations: 40,
            optimizer: OptimizerConfig { learning_rate: 3e-3, ..Default::default() },
            ..small_train_config()
        };
        let result = train(&ds.pool, None, &cfg, 5, None, false).unwrap();
        // best-fit slope of loss against iteration index is negative
        let n = result.loss_history.len() as f64;
        let mean_x = (n - 1.0) / 2.0;
        let mean_y: f64 = result.loss_history.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in result.loss_history.iter().enumerate() {
            num += (i as f64 - mean_x) * (y - mean_y);
            den += (i as f64 - mean_x) * (i as f64 - mean_x);
        }
        assert!(num / den < 0.0, "loss slope {} not negative", num / den);
    }

    #[test]
    fn same_seed_training_is_bit_identical() {
        let ds = small_synth(3);
        let cfg = TrainConfig { iterations: 3, ..small_train_config() };
        let a = train(&ds.pool, None, &cfg, 11, None, false).unwrap();
        let b = train(&ds.pool, None, &cfg, 11, None, false).unwrap();
        for (pa, pb) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(pa.value.data(), pb.value.data(), "param {} differs", pa.name);
        }
        let c = train(&ds.pool, None, &cfg, 12, None, false).unwrap();
        let differs = a
            .model
            .params
            .iter()
            .zip(c.model.params.iter())
            .any(|(pa, pc)| pa.value.data() != pc.value.data());
        assert!(differs);
    }

    #[test]
    fn mixed_pool_training_runs() {
        let ds = small_synth(4);
        let aux = small_synth(40);
        let cfg = TrainConfig { iterations: 2, ..small_train_config() };
        let result = train(&ds.pool, Some(&aux.pool), &cfg, 1, None, false).unwrap();
        assert_eq!(result.loss_history.len(), 2);

        // dimension mismatch is rejected
        let bad = generate_dataset(&SynthConfig {
            num_classes: 5,
            feature_dim: 7,
            total_instances: 30,
            views_per_instance: 2,
            zipf_exponent: 0.0,
            test_instances_per_class: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(train(&ds.pool, Some(&bad.pool), &cfg, 1, None, false).is_err());
    }

    #[test]
    fn fusion_identities() {
        let cfg = FusionConfig::default();
        // equal class and tracker score with exponents summing to one
        let fused = fuse_scores(&[0.8, 0.2], 0.8, 10, &cfg).unwrap();
        assert!((fused[0] - 8.0).abs() < 1e-12);
        // analytic cube roots
        let cube = fuse_scores(&[0.512, 0.488], 1.0, 1, &cfg).unwrap();
        assert!((cube[0] - 0.8).abs() < 1e-12);
        let two_thirds =
            fuse_scores(&[1.0, 0.0], 0.512, 1, &FusionConfig { ..Default::default() }).unwrap();
        assert!((two_thirds[0] - 0.64).abs() < 1e-12);
    }

    #[test]
    fn fusion_validates_inputs() {
        let cfg = FusionConfig::default();
        assert!(fuse_scores(&[0.5, 0.5], 1.5, 1, &cfg).is_err());
        assert!(fuse_scores(&[0.7, 0.7], 0.5, 1, &cfg).is_err());
        assert!(fuse_scores(&[1.5, -0.5], 0.5, 1, &cfg).is_err());
        assert!(fuse_scores(&[1.0], 0.5, 0, &cfg).is_err());
        assert!(
            fuse_scores(&[1.0], 0.5, 1, &FusionConfig { lambda_c: -1.0, ..Default::default() })
                .is_err()
        );
    }

    #[test]
    fn fusion_passthrough_and_length_invariance() {
        // lambda_c=1, lambda_s=0, penalty off: fused equals the probabilities
        let cfg = FusionConfig {
            lambda_c: 1.0,
            lambda_s: 0.0,
            length_penalty: false,
            scalar_set_score: false,
        };
        let probs = [0.3, 0.120000000000000004, 0.58];
        let fused = fuse_scores(&probs, 0.7, 5, &cfg).unwrap();
        assert_eq!(fused, probs.to_vec());

        // length penalty scales every class equally: argmax unchanged
        let on = fuse_scores(&[0.2, 0.5, 0.3], 0.9, 77, &FusionConfig::default()).unwrap();
        let off = fuse_scores(
            &[0.2, 0.5, 0.3],
            0.9,
            77,
            &FusionConfig { length_penalty: false, ..Default::default() },
        )
        .unwrap();
        assert_eq!(argmax_lowest(&on), argmax_lowest(&off));
        for (a, b) in on.iter().zip(&off) {
            assert!((a / b - 77.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_class_exponent_degenerates_to_tie_break() {
        let cfg = FusionConfig { lambda_c: 0.0, ..Default::default() };
        let fused = fuse_scores(&[0.1, 0.2, 0.7], 0.5, 4, &cfg).unwrap();
        assert!(fused.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(argmax_lowest(&fused), 0);
    }

    #[test]
    fn reclassify_caps_long_tracklets_and_keeps_boxes() {
        let ds = small_synth(6);
        let cfg = TrainConfig { iterations: 1, ..small_train_config() };
        let model = train(&ds.pool, None, &cfg, 2, None, false).unwrap().model;

        let long_views: Vec<Vec<f64>> =
            (0..200).map(|i| vec![(i % 7) as f64 * 0.1; 6]).collect();
        let boxes: Vec<[f64; 4]> = (0..200).map(|i| [0.0, 0.0, 1.0 + i as f64, 2.0]).collect();
        let input = PredictedTracklet {
            views: long_views,
            score: 0.9,
            identity: 42,
            boxes: boxes.clone(),
        };
        let out = reclassify(&model, &[input], &FusionConfig::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].length, 200);
        assert_eq!(out[0].boxes, boxes);
        assert_eq!(out[0].identity, 42);
        assert!(out[0].fused.iter().all(|v| v.is_finite()));
        // the fused argmax matches a recomputation from exported parts
        let recomputed =
            fuse_scores(&out[0].set_probs, out[0].score, out[0].length, &FusionConfig::default())
                .unwrap();
        assert_eq!(out[0].label, argmax_lowest(&recomputed));

        // empty tracklet is rejected
        let empty = PredictedTracklet { views: vec![], score: 0.5, identity: 0, boxes: vec![] };
        assert!(reclassify(&model, &[empty], &FusionConfig::default()).is_err());
    }

    #[test]
    fn evaluate_hand_fixture() {
        // an untrained model is deterministic: build a fixture from its own
        // predictions, then check tally arithmetic against a perfect and a
        // corrupted label assignment
        let ds = small_synth(8);
        let cfg = small_train_config();
        let model = train(&ds.pool, None, &cfg, 7, None, false).unwrap().model;
        let groups = frequency_groups(ds.pool.class_counts());

        let preds: Vec<usize> = ds
            .test
            .iter()
            .map(|t| argmax_lowest(&classify_views(&model, &t.views).unwrap()))
            .collect();
        // label every tracklet with the model's own prediction: perfect score
        let agree: Vec<EvalTracklet> = ds
            .test
            .iter()
            .zip(&preds)
            .map(|(t, &p)| EvalTracklet { views: t.views.clone(), label: p, identity: t.identity })
            .collect();
        let report = evaluate(&model, &agree, &groups).unwrap();
        assert_eq!(report.accuracy.overall.accuracy(), Some(1.0));
        let diag: u64 = (0..5).map(|c| report.confusion[c][c]).sum();
        assert_eq!(diag as usize, ds.test.len());

        assert!(evaluate(&model, &[], &groups).is_err());
    }

    #[test]
    fn evaluation_is_stable_across_runs() {
        let ds = small_synth(9);
        let cfg = small_train_config();
        let model = train(&ds.pool, None, &cfg, 1, None, false).unwrap().model;
        let groups = frequency_groups(ds.pool.class_counts());
        let a = evaluate(&model, &ds.test, &groups).unwrap();
        let b = evaluate(&model, &ds.test, &groups).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.confusion, b.confusion);
    }

    #[test]
    fn text_table_is_aligned_and_complete() {
        let report = EvalReport {
            accuracy: GroupedAccuracy {
                overall: GroupStat { correct: 3, total: 4 },
                rare: GroupStat { correct: 1, total: 2 },
                common: GroupStat { correct: 1, total: 1 },
                frequent: GroupStat { correct: 1, total: 1 },
            },
            confusion: vec![],
        };
        let table = report.to_text_table();
        assert!(table.contains("overall"));
        assert!(table.contains("0.7500"));
        assert!(table.contains("0.5000"));
        let widths: Vec<usize> = table.lines().map(|l| l.len()).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "ragged table:\n{table}");

        let empty_group = EvalReport {
            accuracy: GroupedAccuracy::default(),
            confusion: vec![],
        };
        assert!(empty_group.to_text_table().contains("n/a"));
    }

    #[test]
    fn whole_model_gradient_check_passes_on_tiny_config() {
        let cfg = SetClassifierConfig {
            input_dim: 5,
            model_dim: 8,
            heads: 2,
            encoder_layers: 1,
            num_classes: 4,
            feedforward_dim: 16,
        };
        let report = check_model_gradients(cfg, 3, 2, 1e-5, 17).unwrap();
        assert!(report.passed(), "worst rel err {}", report.worst_rel_err);
        assert!(report.entries_checked > 0);
    }

    #[test]
    fn sample_stats_converge_with_draws() {
        let ds = small_synth(10);
        let coarse = sample_stats(&ds.pool, 0.5, 2_000, 1).unwrap();
        let fine = sample_stats(&ds.pool, 0.5, 200_000, 1).unwrap();
        assert!(fine.l1_class < coarse.l1_class);
        assert!(fine.l1_class < 0.01, "class L1 {}", fine.l1_class);
        let a_sum: f64 = fine.analytic_class.iter().sum();
        let e_sum: f64 = fine.empirical_class.iter().sum();
        assert!((a_sum - 1.0).abs() < 1e-9);
        assert!((e_sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn predicted_tracklets_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.jsonl");
        let rows = vec![PredictedTracklet {
            views: vec![vec![0.1, 0.2], vec![0.3, 0.4]],
            score: 0.75,
            identity: 5,
            boxes: vec![[0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]],
        }];
        let mut out = BufWriter::new(File::create(&path).unwrap());
        for r in &rows {
            serde_json::to_writer(&mut out, r).unwrap();
            out.write_all(b"\n").unwrap();
        }
        out.flush().unwrap();
        drop(out);
        assert_eq!(read_predicted_tracklets(&path).unwrap(), rows);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        // raising one class score never lowers that class's fused score,
        // and raising the tracker score never lowers any fused score
        #[test]
        fn fusion_is_monotone(
            base in 0.05f64..0.9,
            bump in 0.0f64..0.1,
            s in 0.1f64..0.9,
            ds in 0.0f64..0.1,
            len in 1usize..50,
        ) {
            let rest = (1.0 - base) / 2.0;
            let rest_bumped = (1.0 - base - bump) / 2.0;
            let cfg = FusionConfig::default();
            let lo = fuse_scores(&[base, rest, rest], s, len, &cfg).unwrap();
            let hi = fuse_scores(&[base + bump, rest_bumped, rest_bumped], s, len, &cfg).unwrap();
            proptest::prop_assert!(hi[0] >= lo[0] - 1e-15);

            let s_hi = fuse_scores(&[base, rest, rest], (s + ds).min(1.0), len, &cfg).unwrap();
            for (a, b) in s_hi.iter().zip(&lo) {
                proptest::prop_assert!(a >= &(b - 1e-15));
            }
        }
    }
}
