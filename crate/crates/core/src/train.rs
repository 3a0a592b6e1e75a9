//! Learning-rate schedule, Adam, the training loop and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_pipeline, AugmentConfig};
use crate::config::{TrainConfig, INPUT_MULTIPLE};
use crate::data::{Batch, DepthSample};
use crate::error::{Error, Result};
use crate::kernels;
use crate::metrics::{aggregate, compute_metrics, EvalConfig, MetricsReport};
use crate::model::GlpDepth;
use crate::nn::{Graph, Mode, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Learning rate at training progress `t ∈ [0, 1]`: a power-curve rise
/// from `lr_low` to `lr_high` over the first half, a power-curve fall after.
pub fn lr_at_progress(t: f64, cfg: &TrainConfig) -> f64 {
    let frac = if t < 0.5 {
        (t / 0.5).powf(cfg.poly_power)
    } else {
        1.0 - ((t - 0.5) / 0.5).powf(cfg.poly_power)
    };
    // written as a two-sided lerp so both endpoints are hit exactly
    cfg.lr_low * (1.0 - frac) + cfg.lr_high * frac
}

pub fn one_cycle_lr(step: usize, total: usize, cfg: &TrainConfig) -> Result<f64> {
    if total == 0 || step > total {
        return Err(Error::Contract(format!("lr step {step} outside 0..={total}")));
    }
    Ok(lr_at_progress(step as f64 / total as f64, cfg))
}

/// Bias-corrected Adam. Moment buffers are indexed by parameter id and
/// left empty for non-trainable entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let mut a = Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        };
        a.reset(store);
        a
    }

    /// Zeroes the moments and the step count.
    pub fn reset(&mut self, store: &ParamStore) {
        let zeros = |id: ParamId| match store.kind(id) {
            ParamKind::Trainable => vec![0.0; store.get(id).numel()],
            ParamKind::Buffer => Vec::new(),
        };
        self.m = store.ids().map(zeros).collect();
        self.v = store.ids().map(zeros).collect();
        self.step = 0;
    }

    /// One update; trainable parameters absent from `grads` see a zero
    /// gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut by_id: Vec<Option<&[f32]>> = vec![None; store.len()];
        for (id, g) in grads {
            if g.len() != store.get(*id).numel() {
                return Err(Error::dim("adam", store.get(*id).shape(), &[g.len()]));
            }
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let g = by_id[id.index()].map_or(0.0, |g| g[i]) as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let delta = lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p[i] = (p[i] as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded partition into `(train, validation)` index lists, each sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED)));
    let n_val = ((n as f64 * fraction).round() as usize).min(n);
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Fixed split used by the CLI and the acceptance runs. The partition does
/// not depend on the training seed, so runs with different seeds share one
/// validation set.
pub fn holdout(samples: &[DepthSample], fraction: f64) -> (Vec<DepthSample>, Vec<DepthSample>) {
    let (ti, vi) = split_validation(samples.len(), fraction, 0);
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| samples[i].clone()).collect();
    (pick(ti), pick(vi))
}

/// One optimizer step on `batch`; returns the loss before the update.
pub fn train_step(model: &mut GlpDepth, adam: &mut Adam, batch: &Batch, lr: f64, lambda: f32) -> Result<f32> {
    let (loss, grads, bn) = {
        let mut g = Graph::new(model.params(), Mode::Train, true);
        let x = g.input(batch.images.clone());
        let y = model.forward(&mut g, x)?;
        let l = g.tape.silog(y, &batch.depth, &batch.valid, lambda)?;
        let loss = g.tape.value(l).item()?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        g.tape.backward(l)?;
        let grads: Vec<(ParamId, Vec<f32>)> = g.param_grads().into_iter().map(|(id, gr)| (id, gr.to_vec())).collect();
        (loss, grads, g.take_bn_updates())
    };
    adam.update(model.params_mut(), &grads, lr)?;
    for u in &bn {
        u.apply(model.params_mut());
    }
    Ok(loss)
}

/// Training-mode loss on `batch` (batch statistics in BN) with no update.
pub fn batch_loss(model: &GlpDepth, batch: &Batch, lambda: f32) -> Result<f32> {
    let mut g = Graph::new(model.params(), Mode::Train, false);
    let x = g.input(batch.images.clone());
    let y = model.forward(&mut g, x)?;
    let l = g.tape.silog(y, &batch.depth, &batch.valid, lambda)?;
    g.tape.value(l).item()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub step_losses: Vec<f32>,
    pub step_lrs: Vec<f64>,
    /// Mean step loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Validation metrics after each epoch (empty without a validation set).
    pub val_reports: Vec<MetricsReport>,
}

/// Progress callback payload.
#[derive(Clone, Copy, Debug)]
pub enum Event<'a> {
    /// After the update; `model` is the freshly updated network.
    Step {
        step: usize,
        total: usize,
        loss: f32,
        lr: f64,
        model: &'a GlpDepth,
    },
    Epoch {
        epoch: usize,
        mean_loss: f64,
        val: Option<&'a MetricsReport>,
    },
}

pub fn train(
    model: &mut GlpDepth,
    train_set: &[DepthSample],
    val_set: &[DepthSample],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    let mut adam = Adam::new(model.params(), cfg);
    train_with(
        model,
        &mut adam,
        train_set,
        val_set,
        cfg,
        |s, t| one_cycle_lr(s, t, cfg),
        |_| {},
    )
}

/// The training loop with an explicit schedule and progress callback.
/// Shuffling and augmentation are seeded from `cfg.seed`, per epoch and
/// per sample, so runs are reproducible.
pub fn train_with(
    model: &mut GlpDepth,
    adam: &mut Adam,
    train_set: &[DepthSample],
    val_set: &[DepthSample],
    cfg: &TrainConfig,
    schedule: impl Fn(usize, usize) -> Result<f64>,
    mut on_event: impl FnMut(Event),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let aug = AugmentConfig::from_configs(cfg, &model.config);
    let eval = EvalConfig {
        min_depth: cfg.min_depth,
        max_depth: model.config.max_depth,
        crop: None,
    };
    let per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * per_epoch;
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1 + epoch as u64)));
        let mut epoch_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let stream = ((epoch as u64) << 32) | i as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed ^ 0xA5A5, stream));
                    augment_pipeline(&train_set[i], &mut rng, &aug)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = Batch::stack(&samples)?;
            let lr = schedule(step, total)?;
            let loss = train_step(model, adam, &batch, lr, cfg.silog_lambda)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            on_event(Event::Step {
                step,
                total,
                loss,
                lr,
                model: &*model,
            });
            log.step_losses.push(loss);
            log.step_lrs.push(lr);
            epoch_sum += loss as f64;
            step += 1;
        }
        let mean_loss = epoch_sum / per_epoch as f64;
        log.epoch_losses.push(mean_loss);
        if !val_set.is_empty() {
            let report = evaluate(model, val_set, &eval, cfg.eval_resize_up)?;
            log.val_reports.push(report);
        }
        on_event(Event::Epoch {
            epoch,
            mean_loss,
            val: log.val_reports.last().filter(|_| !val_set.is_empty()),
        });
    }
    Ok(log)
}

/// Size fed to the network for an `n`-pixel edge.
pub fn inference_edge(n: usize, up: bool) -> usize {
    let m = INPUT_MULTIPLE;
    if up {
        n.div_ceil(m).max(1) * m
    } else {
        (n / m).max(1) * m
    }
}

/// Eval-mode depth for one sample at its own resolution. Sizes off the
/// 32-pixel ladder are resized for inference and the output resized back.
pub fn predict_sample(model: &GlpDepth, sample: &DepthSample, resize_up: bool) -> Result<Vec<f32>> {
    let (h, w) = (sample.height, sample.width);
    let (ih, iw) = (inference_edge(h, resize_up), inference_edge(w, resize_up));
    let planar = sample.rgb_planar();
    let input = if (ih, iw) == (h, w) {
        planar
    } else {
        kernels::bilinear_forward(3, (h, w), (ih, iw), &planar)
    };
    let out = model.predict(&Tensor::new(&[1, 3, ih, iw], input)?)?;
    Ok(if (ih, iw) == (h, w) {
        out.into_data()
    } else {
        kernels::bilinear_forward(1, (ih, iw), (h, w), out.data())
    })
}

pub fn evaluate_each(
    model: &GlpDepth,
    samples: &[DepthSample],
    eval: &EvalConfig,
    resize_up: bool,
) -> Result<Vec<MetricsReport>> {
    samples
        .iter()
        .map(|s| {
            let pred = predict_sample(model, s, resize_up)?;
            compute_metrics(&pred, &s.depth, s.height, s.width, eval)
        })
        .collect()
}

/// Per-image metrics, averaged.
pub fn evaluate(
    model: &GlpDepth,
    samples: &[DepthSample],
    eval: &EvalConfig,
    resize_up: bool,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    aggregate(&evaluate_each(model, samples, eval, resize_up)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth::synth_dataset;
    use proptest::prelude::*;

    #[test]
    fn schedule_endpoints_are_exact() {
        let cfg = TrainConfig::default();
        for total in [2, 10, 1000, 12345 * 2] {
            assert_eq!(one_cycle_lr(0, total, &cfg).unwrap(), 3e-5);
            assert_eq!(one_cycle_lr(total / 2, total, &cfg).unwrap(), 1e-4);
            assert_eq!(one_cycle_lr(total, total, &cfg).unwrap(), 3e-5);
        }
        assert!(one_cycle_lr(11, 10, &cfg).is_err());
        assert!(one_cycle_lr(0, 0, &cfg).is_err());
        let below = lr_at_progress(0.5 - 1e-15, &cfg);
        assert!((below - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.register("w", Tensor::scalar(1.0), ParamKind::Trainable);
        let twin = store.register("u", Tensor::scalar(1.0), ParamKind::Trainable);
        let mut adam = Adam::new(&store, &TrainConfig::default());
        adam.update(&mut store, &[(id, vec![0.3]), (twin, vec![0.3])], 1e-3)
            .unwrap();
        let moved = 1.0 - store.get(id).data()[0] as f64;
        assert!((moved - 1e-3).abs() < 1e-7, "{moved}");
        assert_eq!(store.get(id), store.get(twin));
        let before = store.get(id).clone();
        let mut fresh = Adam::new(&store, &TrainConfig::default());
        fresh.update(&mut store, &[(id, vec![0.0])], 1e-3).unwrap();
        assert_eq!(store.get(id), &before);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn validation_split_is_a_seeded_partition() {
        let (t, v) = split_validation(50, 0.1, 3);
        assert_eq!((t.len(), v.len()), (45, 5));
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_validation(50, 0.1, 3), (t, v.clone()));
        assert_ne!(split_validation(50, 0.1, 4).1, v);
    }

    fn tiny() -> (GlpDepth, Vec<DepthSample>, TrainConfig) {
        let model = GlpDepth::new(
            ModelConfig {
                stage_depths: [1, 1, 1, 1],
                ..ModelConfig::toy()
            },
            0,
        )
        .unwrap();
        let data = synth_dataset(1, 3, 32, 32).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::toy()
        };
        (model, data, cfg)
    }

    #[test]
    fn zero_lr_leaves_weights_alone() {
        let (mut model, data, cfg) = tiny();
        let before = model.clone();
        let mut adam = Adam::new(model.params(), &cfg);
        train_with(&mut model, &mut adam, &data[..1], &[], &cfg, |_, _| Ok(0.0), |_| {}).unwrap();
        for ((id, a), (_, b)) in model.params().trainable().zip(before.params().trainable()) {
            assert_eq!(a, b, "{}", model.params().name(id));
        }
    }

    #[test]
    fn identical_seeds_identical_curves() {
        let (model, data, cfg) = tiny();
        let (mut a, mut b) = (model.clone(), model);
        let la = train(&mut a, &data, &data[..1], &cfg).unwrap();
        let lb = train(&mut b, &data, &data[..1], &cfg).unwrap();
        assert_eq!(la, lb);
        for ((_, _, x), (_, _, y)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn evaluate_is_pure_and_handles_odd_sizes() {
        let (model, data, _) = tiny();
        let snapshot = model.clone();
        let eval = EvalConfig::default();
        let r1 = evaluate(&model, &data, &eval, true).unwrap();
        let r2 = evaluate(&model, &data, &eval, true).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(
            evaluate(&model, &data[..1], &eval, true).unwrap(),
            evaluate_each(&model, &data[..1], &eval, true).unwrap()[0]
        );
        for ((_, _, x), (_, _, y)) in model.params().iter().zip(snapshot.params().iter()) {
            assert_eq!(x, y);
        }
        let odd = crate::augment::crop(&data[0], 0, 0, 30, 20).unwrap();
        assert_eq!(predict_sample(&model, &odd, true).unwrap().len(), 600);
        assert_eq!(predict_sample(&model, &odd, false).unwrap().len(), 600);
        assert_eq!(
            (
                inference_edge(30, true),
                inference_edge(70, false),
                inference_edge(64, true)
            ),
            (32, 64, 64)
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_context() {
        let (mut model, data, cfg) = tiny();
        let mut adam = Adam::new(model.params(), &cfg);
        let err = train_with(&mut model, &mut adam, &data, &[], &cfg, |_, _| Ok(f64::NAN), |_| {}).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, lr } => {
                assert_eq!(step, 1);
                assert!(lr.is_nan());
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn schedule_rises_then_falls_within_bounds(step in 0usize..1000) {
            let cfg = TrainConfig::default();
            let lr = one_cycle_lr(step, 1000, &cfg).unwrap();
            let next = one_cycle_lr(step + 1, 1000, &cfg).unwrap();
            prop_assert!((3e-5..=1e-4).contains(&lr));
            if step < 500 {
                prop_assert!(next > lr);
            } else {
                prop_assert!(next < lr);
            }
        }
    }
}
