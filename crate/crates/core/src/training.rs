//! Adam optimization with per-parameter-group learning rates, the epoch
//! loop, and the finite-difference oracle that certifies every analytic
//! gradient.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::losses::{
    batch_loss_planned, plan_batch, AntonymList, GradAccumulator, LossBreakdown, LossWeights,
};
use crate::model::{ModelParams, PairId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: GradAccumulator,
    pub v: GradAccumulator,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: GradAccumulator::zeros_like(params),
            v: GradAccumulator::zeros_like(params),
            t: 0,
        }
    }
}

/// Named configuration presets for epochs and loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 800 epochs, auxiliary loss weighted 1000, other regularizers 1.
    MitLike,
    /// 1000 epochs, all regularizers weighted equally.
    ZapposLike,
    /// Desk-scale: 300 epochs, all weights 1.
    Synthetic,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "mit-like" => Some(Preset::MitLike),
            "zappos-like" => Some(Preset::ZapposLike),
            "synthetic" => Some(Preset::Synthetic),
            _ => None,
        }
    }

    pub fn epochs(self) -> usize {
        match self {
            Preset::MitLike => 800,
            Preset::ZapposLike => 1000,
            Preset::Synthetic => 300,
        }
    }

    pub fn weights(self) -> LossWeights {
        match self {
            Preset::MitLike => LossWeights {
                w_aux: 1000.0,
                ..Default::default()
            },
            Preset::ZapposLike | Preset::Synthetic => LossWeights::default(),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_attr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub deterministic: bool,
    pub freeze_objects: bool,
    pub detach_inverse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_main: 1e-4,
            lr_attr: 1e-5,
            batch_size: 512,
            epochs: Preset::Synthetic.epochs(),
            weights: LossWeights::default(),
            seed: 0,
            deterministic: false,
            freeze_objects: false,
            detach_inverse: false,
        }
    }
}

impl TrainConfig {
    pub fn from_preset(preset: Preset) -> Self {
        TrainConfig {
            epochs: preset.epochs(),
            weights: preset.weights(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0) || !(self.lr_attr > 0.0) {
            return Err(Error::validation("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        self.weights.validate()
    }
}

/// Per-epoch loss means and wall-clock time.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

impl TrainStats {
    /// CSV with header `epoch,total,triplet,aux,inv,comm,ant,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,total,triplet,aux,inv,comm,ant,seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}\n",
                e.epoch,
                e.loss.total,
                e.loss.triplet,
                e.loss.aux,
                e.loss.inv,
                e.loss.comm,
                e.loss.ant,
                e.seconds
            ));
        }
        out
    }
}

fn adam_update_slice(
    name: &str,
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    bc1: f64,
    bc2: f64,
) -> Result<()> {
    for i in 0..param.len() {
        let g = grad[i];
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient for {name}")));
        }
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// One Adam step with bias correction. Attribute operators use `lr_attr`,
/// all other tensors `lr_main`; object vectors are skipped entirely when
/// `freeze_objects` is set.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &GradAccumulator,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);

    if !cfg.freeze_objects {
        for (i, vec) in params.objects.vectors.iter_mut().enumerate() {
            adam_update_slice(
                &format!("object vector {}", params.vocab.objects[i]),
                &mut vec.data,
                &grads.objects[i].data,
                &mut state.m.objects[i].data,
                &mut state.v.objects[i].data,
                cfg.lr_main,
                bc1,
                bc2,
            )?;
        }
    }
    for (i, op) in params.attrs.operators.iter_mut().enumerate() {
        adam_update_slice(
            &format!("attribute operator {}", params.vocab.attributes[i]),
            &mut op.data,
            &grads.operators[i].data,
            &mut state.m.operators[i].data,
            &mut state.v.operators[i].data,
            cfg.lr_attr,
            bc1,
            bc2,
        )?;
    }
    adam_update_slice(
        "embedder weight",
        &mut params.embedder.weight.data,
        &grads.emb_weight.data,
        &mut state.m.emb_weight.data,
        &mut state.v.emb_weight.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    adam_update_slice(
        "embedder bias",
        &mut params.embedder.bias.data,
        &grads.emb_bias.data,
        &mut state.m.emb_bias.data,
        &mut state.v.emb_bias.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    adam_update_slice(
        "attribute head weight",
        &mut params.aux.attr_weight.data,
        &grads.attr_weight.data,
        &mut state.m.attr_weight.data,
        &mut state.v.attr_weight.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    adam_update_slice(
        "attribute head bias",
        &mut params.aux.attr_bias.data,
        &grads.attr_bias.data,
        &mut state.m.attr_bias.data,
        &mut state.v.attr_bias.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    adam_update_slice(
        "object head weight",
        &mut params.aux.obj_weight.data,
        &grads.obj_weight.data,
        &mut state.m.obj_weight.data,
        &mut state.v.obj_weight.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    adam_update_slice(
        "object head bias",
        &mut params.aux.obj_bias.data,
        &grads.obj_bias.data,
        &mut state.m.obj_bias.data,
        &mut state.v.obj_bias.data,
        cfg.lr_main,
        bc1,
        bc2,
    )?;
    Ok(())
}

/// Uniform draw from `seen_pairs` excluding `current` (by value).
pub fn sample_negative(seen_pairs: &[PairId], current: PairId, rng: &mut ChaCha8Rng) -> PairId {
    assert!(
        seen_pairs.iter().any(|p| *p != current),
        "sample_negative: need at least one pair different from the current one"
    );
    loop {
        let cand = seen_pairs[rng.gen_range(0..seen_pairs.len())];
        if cand != current {
            return cand;
        }
    }
}

/// Shuffle stream and sampling stream, both derived from the master seed.
fn derive_rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    (
        ChaCha8Rng::seed_from_u64(seed),
        ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15),
    )
}

/// Run the full training loop: seeded shuffling into mini-batches, the
/// combined batch objective, and one Adam step per batch.
///
/// With the deterministic flag and a fixed seed the returned parameters and
/// stats are bitwise reproducible (the wall-clock column is zeroed so the
/// stats CSV is too).
pub fn train(
    mut params: ModelParams,
    data: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainStats)> {
    cfg.validate()?;
    data.validate()?;

    let antonyms = data.antonyms.clone().unwrap_or_default();
    let weights = if data.antonyms.is_none() {
        // no antonym list: the term has nothing to evaluate
        LossWeights {
            w_ant: 0.0,
            ..cfg.weights
        }
    } else {
        cfg.weights
    };

    let (mut shuffle_rng, mut sample_rng) = derive_rngs(cfg.seed);
    let mut state = AdamState::new(&params);
    let mut stats = TrainStats::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = std::time::Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut seen = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (data.train[i].feat.clone(), data.train[i].pair))
                .collect();
            let negatives: Vec<PairId> = batch
                .iter()
                .map(|(_, p)| sample_negative(&data.seen_pairs, *p, &mut sample_rng))
                .collect();
            let plan = plan_batch(&batch, params.vocab.num_attrs(), &weights, &mut sample_rng);
            let (bd, grads) = batch_loss_planned(
                &params,
                &batch,
                &negatives,
                &plan,
                &weights,
                &antonyms,
                cfg.detach_inverse,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => {
                    Error::NonFinite(format!("{what} at epoch {epoch}"))
                }
                other => other,
            })?;
            adam_step(&mut params, &grads, &mut state, cfg)?;

            let w = batch.len() as f64;
            epoch_loss.total += bd.total * w;
            epoch_loss.triplet += bd.triplet * w;
            epoch_loss.aux += bd.aux * w;
            epoch_loss.inv += bd.inv * w;
            epoch_loss.comm += bd.comm * w;
            epoch_loss.ant += bd.ant * w;
            seen += batch.len();
        }

        let n = seen.max(1) as f64;
        epoch_loss.total /= n;
        epoch_loss.triplet /= n;
        epoch_loss.aux /= n;
        epoch_loss.inv /= n;
        epoch_loss.comm /= n;
        epoch_loss.ant /= n;
        stats.epochs.push(EpochStats {
            epoch,
            loss: epoch_loss,
            seconds: if cfg.deterministic {
                0.0
            } else {
                started.elapsed().as_secs_f64()
            },
        });
    }

    Ok((params, stats))
}

/// Central-difference numeric gradient of the planned batch objective,
/// one entry per flattened parameter.
pub fn numeric_gradient(
    params: &ModelParams,
    batch: &[(crate::linalg::Vector, PairId)],
    negatives: &[PairId],
    plan: &crate::losses::BatchPlan,
    weights: &LossWeights,
    antonyms: &AntonymList,
    eps: f64,
) -> Result<Vec<f64>> {
    let flat = params.flatten();
    let mut scratch = params.clone();
    let mut out = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += eps;
        scratch.unflatten(&plus);
        let (bp, _) =
            batch_loss_planned(&scratch, batch, negatives, plan, weights, antonyms, false)?;
        let mut minus = flat.clone();
        minus[i] -= eps;
        scratch.unflatten(&minus);
        let (bm, _) =
            batch_loss_planned(&scratch, batch, negatives, plan, weights, antonyms, false)?;
        out.push((bp.total - bm.total) / (2.0 * eps));
    }
    Ok(out)
}

/// Maximum entry-wise relative error.
///
/// The denominator is floored at 1e-4 of the gradient's largest entry (and
/// at 1e-8 absolutely): entries orders of magnitude below the gradient
/// scale agree with central differences only up to truncation noise, which
/// would otherwise dominate the relative view without saying anything
/// about correctness.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (1e-4 * scale).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Perturb every scalar parameter ±ε and compare central differences
/// against the analytic gradient of the combined objective.
pub fn finite_diff_check(
    params: &ModelParams,
    batch: &[(crate::linalg::Vector, PairId)],
    negatives: &[PairId],
    antonyms: &AntonymList,
    weights: &LossWeights,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    assert!(
        (1e-7..=1e-3).contains(&eps),
        "finite_diff_check: eps {eps} outside [1e-7, 1e-3]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_batch(batch, params.vocab.num_attrs(), weights, &mut rng);
    let (_, grads) =
        batch_loss_planned(params, batch, negatives, &plan, weights, antonyms, false)?;
    let analytic = grads.flatten();
    let numeric = numeric_gradient(params, batch, negatives, &plan, weights, antonyms, eps)?;
    Ok(max_rel_error(&analytic, &numeric))
}

/// Helpers for gradient certification runs, shared by the CLI `gradcheck`
/// command and the test suite.
pub mod gradcheck {
    use super::*;
    use crate::linalg::Vector;
    use crate::model::{init_params, Vocab};

    fn vocab(na: usize, no: usize) -> Vocab {
        Vocab::new(
            (0..na).map(|i| format!("a{i}")).collect(),
            (0..no).map(|i| format!("o{i}")).collect(),
        )
        .unwrap()
    }

    /// Random parameters: near-identity operators (so they stay invertible),
    /// randomized everything else.
    pub fn random_params(dim: usize, na: usize, no: usize, seed: u64) -> ModelParams {
        let mut p = init_params(vocab(na, no), dim, dim, None, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
        for m in &mut p.attrs.operators {
            for r in 0..dim {
                for c in 0..dim {
                    let base = if r == c { 1.0 } else { 0.0 };
                    m.set(r, c, base + 0.3 * rng.gen_range(-1.0..1.0));
                }
            }
        }
        p
    }

    /// A small batch hitting several attribute/object combinations with a
    /// margin large enough to keep every hinge active (and hence
    /// differentiable) under the ±ε perturbations.
    pub const CHECK_MARGIN: f64 = 5.0;

    pub fn random_batch(p: &ModelParams, seed: u64) -> (Vec<(Vector, PairId)>, Vec<PairId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let na = p.vocab.num_attrs();
        let no = p.vocab.num_objs();
        let batch: Vec<(Vector, PairId)> = (0..4)
            .map(|i| {
                let feat = Vector::new(
                    (0..p.feat_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                );
                (
                    feat,
                    PairId {
                        attr: i % na,
                        obj: i % no,
                    },
                )
            })
            .collect();
        let negatives = (0..4)
            .map(|i| PairId {
                attr: (i + 1) % na,
                obj: (i + 2) % no,
            })
            .collect();
        (batch, negatives)
    }

    /// Run the certification over `n_seeds` consecutive seeds and return the
    /// worst max relative error. All five loss weights are set per `weights`.
    pub fn run(
        dim: usize,
        na: usize,
        no: usize,
        weights: &LossWeights,
        eps: f64,
        base_seed: u64,
        n_seeds: u64,
    ) -> Result<f64> {
        assert!(na >= 2, "gradcheck needs at least 2 attributes");
        let mut worst = 0.0f64;
        for s in 0..n_seeds {
            let seed = base_seed.wrapping_add(s);
            let p = random_params(dim, na, no, seed);
            let (batch, negatives) = random_batch(&p, seed.wrapping_add(1000));
            let antonyms = AntonymList::new(vec![(0, 1)], na)?;
            let err = finite_diff_check(&p, &batch, &negatives, &antonyms, weights, eps, seed)?;
            worst = worst.max(err);
        }
        Ok(worst)
    }
}

pub const AUX_WEIGHT_GRID: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

/// Auto-tune the auxiliary-classifier weight on a held-out validation split.
///
/// Holds out 20% of the *training pairs* (not images): instances of the
/// held-out pairs become a pseudo-unseen test set, and the candidate from
/// `AUX_WEIGHT_GRID` with the best open-world top-1 on them wins (ties go to
/// the smaller weight). The split is resampled until every attribute and
/// object still appears in a kept pair.
pub fn tune_aux_weight(
    params: &ModelParams,
    data: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<(f64, f64)>)> {
    data.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA0B1C2D3);
    let n_held = ((data.seen_pairs.len() as f64) * 0.2).round().max(1.0) as usize;
    if data.seen_pairs.len() - n_held < 2 {
        return Err(Error::validation(
            "too few seen pairs to hold out a 20% validation split",
        ));
    }
    let mut split = None;
    for _ in 0..1000 {
        let mut shuffled = data.seen_pairs.clone();
        shuffled.shuffle(&mut rng);
        let (held, kept) = shuffled.split_at(n_held);
        let covered = (0..data.vocab.num_attrs()).all(|a| kept.iter().any(|p| p.attr == a))
            && (0..data.vocab.num_objs()).all(|o| kept.iter().any(|p| p.obj == o));
        if covered {
            let mut held = held.to_vec();
            let mut kept = kept.to_vec();
            held.sort();
            kept.sort();
            split = Some((kept, held));
            break;
        }
    }
    let (kept, held) = split.ok_or_else(|| {
        Error::validation("could not find a covering validation split in 1000 attempts")
    })?;

    let held_set: Vec<PairId> = held.clone();
    let sub_bundle = DatasetBundle {
        vocab: data.vocab.clone(),
        feat_dim: data.feat_dim,
        train: data
            .train
            .iter()
            .filter(|i| kept.contains(&i.pair))
            .cloned()
            .collect(),
        test: data
            .train
            .iter()
            .filter(|i| held_set.contains(&i.pair))
            .cloned()
            .collect(),
        seen_pairs: kept,
        unseen_pairs: held,
        antonyms: data.antonyms.clone(),
        object_vectors: data.object_vectors.clone(),
    };
    sub_bundle.validate()?;
    let val: Vec<(crate::linalg::Vector, PairId)> = sub_bundle
        .test
        .iter()
        .map(|i| (i.feat.clone(), i.pair))
        .collect();

    let mut scores = Vec::with_capacity(AUX_WEIGHT_GRID.len());
    let mut best = (AUX_WEIGHT_GRID[0], f64::NEG_INFINITY);
    for &w in &AUX_WEIGHT_GRID {
        let mut candidate = cfg.clone();
        candidate.weights.w_aux = w;
        let (trained, _) = train(params.clone(), &sub_bundle, &candidate)?;
        let report = crate::evaluation::evaluate(
            &trained,
            &val,
            &sub_bundle.seen_pairs,
            &sub_bundle.unseen_pairs,
        )?;
        scores.push((w, report.open_top1));
        if report.open_top1 > best.1 {
            best = (w, report.open_top1);
        }
    }
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;
    use crate::model::init_params;
    use crate::model::Vocab;

    fn vocab(na: usize, no: usize) -> Vocab {
        Vocab::new(
            (0..na).map(|i| format!("a{i}")).collect(),
            (0..no).map(|i| format!("o{i}")).collect(),
        )
        .unwrap()
    }

    fn tiny_params() -> ModelParams {
        init_params(vocab(2, 2), 3, 3, None, 1).unwrap()
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = tiny_params();
        let before = p.embedder.bias.data[0];
        let mut grads = GradAccumulator::zeros_like(&p);
        grads.emb_bias.data[0] = 1.0;
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        let delta = before - p.embedder.bias.data[0];
        // first Adam step moves by ~ lr * 1/(1 + eps)
        let expected = 1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((delta - expected).abs() <= 1e-12);
    }

    #[test]
    fn adam_zero_gradients_leave_params_unchanged() {
        let mut p = tiny_params();
        let before = p.clone();
        let grads = GradAccumulator::zeros_like(&p);
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn adam_two_steps_match_scalar_reference_oracle() {
        let mut p = tiny_params();
        let x0 = p.embedder.bias.data[1];
        let g = 0.7;
        let mut grads = GradAccumulator::zeros_like(&p);
        grads.emb_bias.data[1] = g;
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();

        // independent scalar Adam
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 1e-4);
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1f64(b1, t));
            let vh = v / (1.0 - b1f64(b2, t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p.embedder.bias.data[1] - x).abs() <= 1e-12);
    }

    fn b1f64(b: f64, t: u32) -> f64 {
        b.powi(t as i32)
    }

    #[test]
    fn adam_per_group_learning_rate_ratio_on_first_step() {
        let mut p = tiny_params();
        let op_before = p.attrs.operators[0].data[1];
        let emb_before = p.embedder.weight.data[0];
        let mut grads = GradAccumulator::zeros_like(&p);
        grads.operators[0].data[1] = 0.3;
        grads.emb_weight.data[0] = 0.3;
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig::default();
        adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        let d_op = (op_before - p.attrs.operators[0].data[1]).abs();
        let d_emb = (emb_before - p.embedder.weight.data[0]).abs();
        let ratio = d_op / d_emb;
        assert!((ratio - cfg.lr_attr / cfg.lr_main).abs() <= 1e-9);
    }

    #[test]
    fn adam_frozen_objects_untouched() {
        let mut p = tiny_params();
        let before = p.objects.vectors.clone();
        let mut grads = GradAccumulator::zeros_like(&p);
        for g in &mut grads.objects {
            g.data.iter_mut().for_each(|x| *x = 1.0);
        }
        let mut state = AdamState::new(&p);
        let cfg = TrainConfig {
            freeze_objects: true,
            ..Default::default()
        };
        for _ in 0..5 {
            adam_step(&mut p, &grads, &mut state, &cfg).unwrap();
        }
        assert_eq!(p.objects.vectors, before);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = tiny_params();
        let mut grads = GradAccumulator::zeros_like(&p);
        grads.operators[1].data[0] = f64::NAN;
        let mut state = AdamState::new(&p);
        let err = adam_step(&mut p, &grads, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(err.to_string().contains("a1"));
    }

    #[test]
    fn sample_negative_forced_choice() {
        let pairs = vec![PairId { attr: 0, obj: 0 }, PairId { attr: 1, obj: 1 }];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            assert_eq!(sample_negative(&pairs, pairs[0], &mut rng), pairs[1]);
        }
    }

    #[test]
    fn sample_negative_uniformity_chi_square() {
        let pairs: Vec<PairId> = (0..5).map(|i| PairId { attr: i, obj: 0 }).collect();
        let current = pairs[2];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 5];
        let draws = 10_000;
        for _ in 0..draws {
            let p = sample_negative(&pairs, current, &mut rng);
            counts[p.attr] += 1;
        }
        assert_eq!(counts[2], 0);
        let expected = draws as f64 / 4.0;
        let sigma = (expected * (1.0 - 0.25)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            if i == 2 {
                continue;
            }
            assert!(
                (c as f64 - expected).abs() <= 5.0 * sigma,
                "pair {i} count {c} outside 5 sigma of {expected}"
            );
        }
    }

    #[test]
    fn sample_negative_current_absent_is_uniform_over_all() {
        let pairs: Vec<PairId> = (0..3).map(|i| PairId { attr: i, obj: 0 }).collect();
        let outside = PairId { attr: 9, obj: 9 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut hit = [false; 3];
        for _ in 0..200 {
            hit[sample_negative(&pairs, outside, &mut rng).attr] = true;
        }
        assert!(hit.iter().all(|h| *h));
    }

    #[test]
    fn finite_diff_check_zero_weights_is_zero_error() {
        let p = tiny_params();
        let weights = LossWeights {
            w_triplet: 0.0,
            w_aux: 0.0,
            w_inv: 0.0,
            w_comm: 0.0,
            w_ant: 0.0,
            ..Default::default()
        };
        let batch = vec![(Vector::new(vec![0.1, 0.2, 0.3]), PairId { attr: 0, obj: 0 })];
        let negatives = vec![PairId { attr: 1, obj: 1 }];
        let err = finite_diff_check(
            &p,
            &batch,
            &negatives,
            &AntonymList::default(),
            &weights,
            1e-5,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_check_detects_corrupted_gradient() {
        let p = gradcheck::random_params(6, 4, 5, 77);
        let (batch, negatives) = gradcheck::random_batch(&p, 78);
        let antonyms = AntonymList::new(vec![(0, 1)], 4).unwrap();
        let weights = LossWeights {
            margin: 5.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let plan = plan_batch(&batch, 4, &weights, &mut rng);
        let (_, grads) =
            batch_loss_planned(&p, &batch, &negatives, &plan, &weights, &antonyms, false).unwrap();
        let mut analytic = grads.flatten();
        // sabotage one substantial entry
        let idx = analytic
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap()
            .0;
        analytic[idx] *= 2.0;
        let numeric =
            numeric_gradient(&p, &batch, &negatives, &plan, &weights, &antonyms, 1e-5).unwrap();
        assert!(max_rel_error(&analytic, &numeric) > 0.1);
    }

    #[test]
    fn gradcheck_gate_20_seeds_all_terms() {
        // the repo's gating test: all five weights active
        let weights = LossWeights {
            margin: gradcheck::CHECK_MARGIN,
            ..Default::default()
        };
        let worst = gradcheck::run(6, 4, 5, &weights, 1e-5, 0, 20).unwrap();
        assert!(worst <= 1e-4, "max rel error {worst}");
    }

    #[test]
    fn gradcheck_tighter_bound_without_inverse_term() {
        let weights = LossWeights {
            w_inv: 0.0,
            margin: gradcheck::CHECK_MARGIN,
            ..Default::default()
        };
        let worst = gradcheck::run(6, 4, 5, &weights, 1e-5, 0, 20).unwrap();
        assert!(worst <= 1e-5, "max rel error {worst}");
    }

    #[test]
    fn train_zero_epochs_returns_params_unchanged() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let (bundle, _) = generate_synthetic(&SyntheticSpec {
            num_attrs: 3,
            num_objs: 4,
            dim: 4,
            images_per_pair: 2,
            unseen_fraction: 0.25,
            noise_sigma: 0.0,
            operator_perturbation: 0.1,
            misspecified: false,
            seed: 7,
        })
        .unwrap();
        let p = init_params(bundle.vocab.clone(), 4, 4, None, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (out, stats) = train(p.clone(), &bundle, &cfg).unwrap();
        assert_eq!(out, p);
        assert!(stats.epochs.is_empty());
    }

    #[test]
    fn train_is_deterministic_for_fixed_seed() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let (bundle, _) = generate_synthetic(&SyntheticSpec {
            num_attrs: 3,
            num_objs: 4,
            dim: 4,
            images_per_pair: 3,
            unseen_fraction: 0.25,
            noise_sigma: 0.01,
            operator_perturbation: 0.1,
            misspecified: false,
            seed: 8,
        })
        .unwrap();
        let p = init_params(bundle.vocab.clone(), 4, 4, None, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            deterministic: true,
            seed: 7,
            ..Default::default()
        };
        let (out1, stats1) = train(p.clone(), &bundle, &cfg).unwrap();
        let (out2, stats2) = train(p, &bundle, &cfg).unwrap();
        assert_eq!(out1, out2);
        assert_eq!(stats1, stats2);
        assert_eq!(stats1.to_csv(), stats2.to_csv());
    }

    #[test]
    fn train_epoch_loss_matches_independent_reevaluation() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let (bundle, _) = generate_synthetic(&SyntheticSpec {
            num_attrs: 3,
            num_objs: 4,
            dim: 4,
            images_per_pair: 3,
            unseen_fraction: 0.25,
            noise_sigma: 0.01,
            operator_perturbation: 0.1,
            misspecified: false,
            seed: 9,
        })
        .unwrap();
        let p0 = init_params(bundle.vocab.clone(), 4, 4, None, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            deterministic: true,
            seed: 11,
            ..Default::default()
        };
        let (_, stats) = train(p0.clone(), &bundle, &cfg).unwrap();

        // replay epoch 0 with the same seed streams and a fresh optimizer
        let weights = if bundle.antonyms.is_none() {
            LossWeights {
                w_ant: 0.0,
                ..cfg.weights
            }
        } else {
            cfg.weights
        };
        let antonyms = bundle.antonyms.clone().unwrap_or_default();
        let (mut shuffle_rng, mut sample_rng) = derive_rngs(cfg.seed);
        let mut order: Vec<usize> = (0..bundle.train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut params = p0;
        let mut state = AdamState::new(&params);
        let mut total = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (bundle.train[i].feat.clone(), bundle.train[i].pair))
                .collect();
            let negatives: Vec<PairId> = batch
                .iter()
                .map(|(_, p)| sample_negative(&bundle.seen_pairs, *p, &mut sample_rng))
                .collect();
            let plan = plan_batch(&batch, params.vocab.num_attrs(), &weights, &mut sample_rng);
            let (bd, grads) = batch_loss_planned(
                &params, &batch, &negatives, &plan, &weights, &antonyms, false,
            )
            .unwrap();
            adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
            total += bd.total * batch.len() as f64;
            seen += batch.len();
        }
        total /= seen as f64;
        assert!((stats.epochs[0].loss.total - total).abs() <= 1e-15);
    }

    #[test]
    fn preset_values() {
        assert_eq!(Preset::parse("mit-like"), Some(Preset::MitLike));
        assert_eq!(Preset::MitLike.epochs(), 800);
        assert_eq!(Preset::MitLike.weights().w_aux, 1000.0);
        assert_eq!(Preset::ZapposLike.epochs(), 1000);
        assert_eq!(Preset::Synthetic.epochs(), 300);
        assert_eq!(Preset::Synthetic.weights(), LossWeights::default());
    }

    #[test]
    fn frozen_object_training_leaves_vectors_bitwise_unchanged() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let (bundle, _) = generate_synthetic(&SyntheticSpec {
            num_attrs: 3,
            num_objs: 4,
            dim: 4,
            images_per_pair: 2,
            unseen_fraction: 0.25,
            noise_sigma: 0.0,
            operator_perturbation: 0.1,
            misspecified: false,
            seed: 10,
        })
        .unwrap();
        let p = init_params(bundle.vocab.clone(), 4, 4, None, 4).unwrap();
        let before = p.objects.vectors.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            freeze_objects: true,
            deterministic: true,
            ..Default::default()
        };
        let (out, _) = train(p, &bundle, &cfg).unwrap();
        assert_eq!(out.objects.vectors, before);
    }

    #[test]
    fn aux_weight_tuning_picks_from_grid_and_is_deterministic() {
        use crate::data::{generate_synthetic, SyntheticSpec};
        let (bundle, _) = generate_synthetic(&SyntheticSpec {
            num_attrs: 4,
            num_objs: 6,
            dim: 6,
            images_per_pair: 3,
            unseen_fraction: 0.2,
            noise_sigma: 0.0,
            operator_perturbation: 0.1,
            misspecified: false,
            seed: 11,
        })
        .unwrap();
        let params = init_params(bundle.vocab.clone(), 6, 6, None, 11).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            deterministic: true,
            seed: 11,
            ..Default::default()
        };
        let (w1, scores1) = tune_aux_weight(&params, &bundle, &cfg).unwrap();
        let (w2, scores2) = tune_aux_weight(&params, &bundle, &cfg).unwrap();
        assert!(AUX_WEIGHT_GRID.contains(&w1));
        assert_eq!(scores1.len(), AUX_WEIGHT_GRID.len());
        assert_eq!(w1, w2);
        assert_eq!(scores1, scores2);
        // The winner must actually achieve the best held-out score, with ties
        // broken toward the smaller weight.
        let best_score = scores1.iter().fold(f64::NEG_INFINITY, |m, &(_, s)| m.max(s));
        let first_best = scores1
            .iter()
            .find(|&&(_, s)| s == best_score)
            .map(|&(w, _)| w)
            .unwrap();
        assert_eq!(w1, first_best);
    }
}
