//! Synthetic long-tailed multi-view benchmark generator.
//!
//! Each class gets a Gaussian prototype; each instance a center near its
//! prototype; each view a noisy draw around the center, occasionally swapped
//! for a view of a different instance to mimic occlusions and distractors.
//! Single views are information-limited by construction, so aggregating a
//! tracklet's views recovers accuracy a per-view classifier cannot reach.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{RoiPool, RoiRecord};
use crate::diffcore::{Optimizer, OptimizerConfig, Tape, Tensor};
use crate::losses::instance_loss;
use crate::model::{argmax_lowest, softmax_vec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Zipf rank exponent for instance frequencies; 0 is uniform.
    pub zipf_exponent: f64,
    /// Training instances, split across classes by the Zipf profile.
    pub total_instances: usize,
    pub views_per_instance: usize,
    pub view_noise_sigma: f64,
    pub occlusion_prob: f64,
    pub prototype_sigma: f64,
    pub instance_sigma: f64,
    /// Held-out single-identity tracklets generated per class.
    pub test_instances_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 50,
            feature_dim: 32,
            zipf_exponent: 1.5,
            total_instances: 2000,
            views_per_instance: 24,
            view_noise_sigma: 0.5,
            occlusion_prob: 0.3,
            prototype_sigma: 1.0,
            instance_sigma: 0.25,
            test_instances_per_class: 4,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.feature_dim == 0 || self.views_per_instance == 0 {
            return Err(Error::Config("feature_dim and views_per_instance must be >= 1".into()));
        }
        if self.view_noise_sigma < 0.0 || self.prototype_sigma < 0.0 || self.instance_sigma < 0.0
        {
            return Err(Error::Config("sigmas must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_prob) {
            return Err(Error::Config("occlusion_prob must be in [0, 1]".into()));
        }
        if self.zipf_exponent < 0.0 {
            return Err(Error::Config("zipf_exponent must be >= 0".into()));
        }
        Ok(())
    }
}

/// Splits `total` instances across classes with rank-`r` share proportional
/// to `r^-s`, using largest-remainder rounding. Class 0 is the most
/// frequent rank.
pub fn zipf_instance_counts(num_classes: usize, exponent: f64, total: usize) -> Result<Vec<u64>> {
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be >= 1".into()));
    }
    let weights: Vec<f64> =
        (0..num_classes).map(|c| ((c + 1) as f64).powf(-exponent)).collect();
    let norm: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / norm).collect();
    let mut counts: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let assigned: u64 = counts.iter().sum();
    let mut order: Vec<usize> = (0..num_classes).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &c in order.iter().take(total - assigned as usize) {
        counts[c] += 1;
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::Config(format!(
            "instance budget {total} leaves some of the {num_classes} classes empty"
        )));
    }
    Ok(counts)
}

/// A held-out single-identity tracklet with its ground-truth label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTracklet {
    pub views: Vec<Vec<f64>>,
    pub label: usize,
    pub identity: u64,
}

pub fn write_eval_tracklets(path: &Path, tracklets: &[EvalTracklet]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tracklets {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_eval_tracklets(path: &Path) -> Result<Vec<EvalTracklet>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: EvalTracklet = serde_json::from_str(&line)?;
        if t.views.is_empty() {
            return Err(Error::Data("test tracklet with no views".into()));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no tracklets in {}", path.display())));
    }
    Ok(out)
}

/// Ground truth for one generated training instance.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthInstance {
    pub class: usize,
    pub center: Vec<f64>,
}

pub struct SynthDataset {
    /// Training pool; its class counts are per-class *instance* counts.
    pub pool: RoiPool,
    pub test: Vec<EvalTracklet>,
    /// Train instances in identity order; record identity `i` indexes here.
    pub instances: Vec<SynthInstance>,
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let counts = zipf_instance_counts(cfg.num_classes, cfg.zipf_exponent, cfg.total_instances)?;

    let gauss = |rng: &mut ChaCha20Rng, mean: &[f64], sigma: f64| -> Vec<f64> {
        let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
        mean.iter().map(|&m| m + normal.sample(rng)).collect()
    };
    let zero = vec![0.0; cfg.feature_dim];
    let prototypes: Vec<Vec<f64>> =
        (0..cfg.num_classes).map(|_| gauss(&mut rng, &zero, cfg.prototype_sigma)).collect();

    // Train instance centers first: occlusion swaps need the full list.
    let mut centers = Vec::with_capacity(cfg.total_instances);
    let mut center_class = Vec::with_capacity(cfg.total_instances);
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            centers.push(gauss(&mut rng, &prototypes[class], cfg.instance_sigma));
            center_class.push(class);
        }
    }

    // A view of `center` unless occluded, in which case a view of a
    // uniformly random other train instance.
    let view = |rng: &mut ChaCha20Rng,
                    centers: &[Vec<f64>],
                    own: Option<usize>,
                    center: &[f64],
                    sigma: f64,
                    occl: f64|
     -> Vec<f64> {
        let occluded = rng.random::<f64>() < occl;
        let src: &[f64] = if occluded {
            let pick = match own {
                // uniform over the other instances
                Some(own) => {
                    let p = rng.random_range(0..centers.len() - 1);
                    if p >= own {
                        p + 1
                    } else {
                        p
                    }
                }
                None => rng.random_range(0..centers.len()),
            };
            &centers[pick]
        } else {
            center
        };
        gauss(rng, src, sigma)
    };
    let bbox = |rng: &mut ChaCha20Rng| -> [f64; 4] {
        let x1 = rng.random_range(0.0..100.0);
        let y1 = rng.random_range(0.0..100.0);
        let w = rng.random_range(5.0..20.0);
        let h = rng.random_range(5.0..20.0);
        [x1, y1, x1 + w, y1 + h]
    };

    let mut records = Vec::with_capacity(cfg.total_instances * cfg.views_per_instance);
    for (inst, center) in centers.iter().enumerate() {
        for frame in 0..cfg.views_per_instance {
            let feature = view(
                &mut rng,
                &centers,
                Some(inst),
                center,
                cfg.view_noise_sigma,
                cfg.occlusion_prob,
            );
            records.push(RoiRecord {
                feature,
                bbox: bbox(&mut rng),
                category: center_class[inst],
                identity: inst as u64,
                frame: frame as u64,
                source: String::new(),
            });
        }
    }

    // Held-out instances are fresh draws from the same class prototypes;
    // their occluded views borrow from train instances only.
    let mut test = Vec::with_capacity(cfg.num_classes * cfg.test_instances_per_class);
    let mut next_identity = centers.len() as u64;
    for class in 0..cfg.num_classes {
        for _ in 0..cfg.test_instances_per_class {
            let center = gauss(&mut rng, &prototypes[class], cfg.instance_sigma);
            let views = (0..cfg.views_per_instance)
                .map(|_| {
                    view(
                        &mut rng,
                        &centers,
                        None,
                        &center,
                        cfg.view_noise_sigma,
                        cfg.occlusion_prob,
                    )
                })
                .collect();
            test.push(EvalTracklet { views, label: class, identity: next_identity });
            next_identity += 1;
        }
    }

    let instances = centers
        .into_iter()
        .zip(center_class)
        .map(|(center, class)| SynthInstance { class, center })
        .collect();
    Ok(SynthDataset { pool: RoiPool::new(records, counts)?, test, instances })
}

/// Frequency groups split by per-class training-instance counts:
/// rare < 10, common 10..=99, frequent >= 100. Classes with zero
/// instances belong to no group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Rare,
    Common,
    Frequent,
}

#[derive(Clone, Debug)]
pub struct FrequencyGroups {
    per_class: Vec<Option<Group>>,
}

impl FrequencyGroups {
    pub fn group_of(&self, class: usize) -> Option<Group> {
        self.per_class.get(class).copied().flatten()
    }

    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        (0..self.per_class.len()).filter(|&c| self.per_class[c] == Some(group)).collect()
    }
}

pub fn frequency_groups(instance_counts: &[u64]) -> FrequencyGroups {
    let per_class = instance_counts
        .iter()
        .map(|&n| match n {
            0 => None,
            1..=9 => Some(Group::Rare),
            10..=99 => Some(Group::Common),
            _ => Some(Group::Frequent),
        })
        .collect();
    FrequencyGroups { per_class }
}

/// Correct/total tallies for one group of classes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupStat {
    pub correct: usize,
    pub total: usize,
}

impl GroupStat {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

/// Top-1 accuracy overall and per frequency group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedAccuracy {
    pub overall: GroupStat,
    pub rare: GroupStat,
    pub common: GroupStat,
    pub frequent: GroupStat,
}

impl GroupedAccuracy {
    pub fn tally(&mut self, label: usize, prediction: usize, groups: &FrequencyGroups) {
        let hit = (prediction == label) as usize;
        self.overall.correct += hit;
        self.overall.total += 1;
        let stat = match groups.group_of(label) {
            Some(Group::Rare) => &mut self.rare,
            Some(Group::Common) => &mut self.common,
            Some(Group::Frequent) => &mut self.frequent,
            None => return,
        };
        stat.correct += hit;
        stat.total += 1;
    }
}

pub fn grouped_accuracy(
    predictions: &[usize],
    labels: &[usize],
    groups: &FrequencyGroups,
) -> Result<GroupedAccuracy> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut acc = GroupedAccuracy::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        acc.tally(l, p, groups);
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Hidden width of the embedding head; matches the set classifier's.
    pub model_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { model_dim: 64, steps: 1500, batch_size: 64, learning_rate: 1e-3, seed: 0 }
    }
}

/// Accuracy of the per-view classifier under both aggregation rules.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BaselineReport {
    /// Tracklet label = argmax of the mean per-view softmax.
    pub mean_softmax: GroupedAccuracy,
    /// Tracklet label = most common per-view argmax.
    pub majority_vote: GroupedAccuracy,
}

/// Trains a per-view classifier (the set classifier's embedding head plus a
/// linear layer) on uniformly sampled pool records, then classifies each
/// test tracklet by aggregating its independent per-view predictions.
pub fn perframe_baseline(
    pool: &RoiPool,
    test: &[EvalTracklet],
    cfg: &BaselineConfig,
) -> Result<BaselineReport> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let din = pool.feature_dim();
    let num_classes = pool.num_classes();
    let d = cfg.model_dim;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let xavier = |rng: &mut ChaCha20Rng, fan_in: usize, fan_out: usize| -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        Tensor::matrix(fan_in, fan_out, data).expect("xavier shape")
    };

    let mut params = crate::diffcore::ParamSet::new();
    params.add("fc1.weight", xavier(&mut rng, din, d))?;
    params.add("fc1.bias", Tensor::zeros(vec![d]))?;
    params.add("fc2.weight", xavier(&mut rng, d, d))?;
    params.add("fc2.bias", Tensor::zeros(vec![d]))?;
    params.add("head.weight", xavier(&mut rng, d, num_classes))?;
    params.add("head.bias", Tensor::zeros(vec![num_classes]))?;

    let forward = |params: &crate::diffcore::ParamSet,
                   features: Tensor|
     -> Result<(Tape, Vec<crate::diffcore::Var>, crate::diffcore::Var)> {
        let mut tape = Tape::new();
        let vars: Vec<_> = params
            .iter()
            .map(|p| tape.leaf(p.value.clone()))
            .collect::<Result<_>>()?;
        let x = tape.leaf(features)?;
        let h1 = crate::diffcore::nn::linear(&mut tape, x, vars[0], vars[1])?;
        let h1 = tape.relu(h1)?;
        let emb = crate::diffcore::nn::linear(&mut tape, h1, vars[2], vars[3])?;
        let logits = crate::diffcore::nn::linear(&mut tape, emb, vars[4], vars[5])?;
        Ok((tape, vars, logits))
    };

    let mut opt = Optimizer::new(
        OptimizerConfig { learning_rate: cfg.learning_rate, ..OptimizerConfig::default() },
        &params,
    );
    let records = pool.records();
    for _ in 0..cfg.steps {
        let picks: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.random_range(0..records.len())).collect();
        let mut data = Vec::with_capacity(cfg.batch_size * din);
        let mut cats = Vec::with_capacity(cfg.batch_size);
        for &i in &picks {
            data.extend_from_slice(&records[i].feature);
            cats.push(records[i].category);
        }
        let (mut tape, vars, logits) = forward(&params, Tensor::matrix(cfg.batch_size, din, data)?)?;
        let loss = instance_loss(&mut tape, &cats, logits)?;
        let loss_val = tape.value(loss).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("baseline loss became {loss_val}")));
        }
        params.zero_grads();
        let grads = tape.backward(loss)?;
        for (idx, var) in vars.iter().enumerate() {
            if let Some(g) = grads.get(var.index()).and_then(|g| g.as_ref()) {
                params.get_mut(idx).grad.axpy(1.0, g)?;
            }
        }
        opt.step(&mut params)?;
    }

    let mut mean_softmax = GroupedAccuracy::default();
    let mut majority_vote = GroupedAccuracy::default();
    let groups = frequency_groups(pool.class_counts());
    for tracklet in test {
        let l = tracklet.views.len();
        if l == 0 {
            return Err(Error::Data("test tracklet with no views".into()));
        }
        let flat: Vec<f64> = tracklet.views.iter().flatten().cloned().collect();
        let (tape, _, logits) = forward(&params, Tensor::matrix(l, din, flat)?)?;
        let logits = tape.value(logits);

        let mut mean = vec![0.0; num_classes];
        let mut votes = vec![0usize; num_classes];
        for row in 0..l {
            let probs = softmax_vec(logits.row(row));
            for (m, p) in mean.iter_mut().zip(&probs) {
                *m += p / l as f64;
            }
            votes[argmax_lowest(&probs)] += 1;
        }
        mean_softmax.tally(tracklet.label, argmax_lowest(&mean), &groups);
        let vote_counts: Vec<f64> = votes.iter().map(|&v| v as f64).collect();
        majority_vote.tally(tracklet.label, argmax_lowest(&vote_counts), &groups);
    }

    Ok(BaselineReport { mean_softmax, majority_vote })
}
