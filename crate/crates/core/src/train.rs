//! Adam with decoupled weight decay, per-image training, and the collective
//! shared-then-separate schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gat::{init_params, GatModel, ModelConfig};
use crate::graph::PreparedGraph;
use crate::io::FeatureMatrix;
use crate::objective::{loss, Assignment};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    #[default]
    PerImage,
    Collective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs for per-image mode.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub tau: f64,
    pub mode: TrainMode,
    /// Shared epochs in collective mode.
    pub t0: usize,
    /// Per-image epochs after the fork in collective mode.
    pub t1: usize,
    /// Start each per-image phase with fresh Adam moments.
    pub reset_optimizer_at_fork: bool,
    /// Worker threads for independent images; results do not depend on it.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-2,
            epochs: 60,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            tau: 0.3,
            mode: TrainMode::PerImage,
            t0: 15,
            t1: 55,
            reset_optimizer_at_fork: true,
            jobs: 1,
        }
    }
}

impl TrainConfig {
    /// Dermoscopy schedule: 300 per-image epochs, or 5 shared + 5 separate.
    pub fn isic2018() -> Self {
        Self {
            epochs: 300,
            t0: 5,
            t1: 5,
            ..Self::default()
        }
    }

    /// Colonoscopy schedule: 60 per-image epochs, or 15 shared + 55 separate.
    pub fn colondb() -> Self {
        Self {
            epochs: 60,
            t0: 15,
            t1: 55,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("learning rate must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return fail("Adam epsilon must be positive");
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return fail("tau must lie in (0, 1)");
        }
        if self.jobs == 0 {
            return fail("jobs must be at least 1");
        }
        match self.mode {
            TrainMode::PerImage if self.epochs == 0 => fail("epochs must be at least 1"),
            TrainMode::Collective if self.t0 + self.t1 == 0 => fail("collective mode needs t0 + t1 >= 1"),
            _ => Ok(()),
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_shapes<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    pub fn for_model(model: &GatModel<T>) -> Self {
        let params = model.parameters();
        Self::for_shapes(params.iter().map(|(_, t)| t.shape()))
    }
}

/// One Adam update with bias correction. Weight decay is decoupled and
/// applied as `p <- p - lr * wd * p` before the moment step.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam_step got {} parameters, {} gradients and {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() || g.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: params[i].shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, wd, eps) = (T::lit(cfg.lr), T::lit(cfg.weight_decay), T::lit(cfg.eps));
    let one = T::one();
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *p -= lr * wd * *p;
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss and parameter gradients of `model` on one image.
pub fn loss_and_grads<T: Scalar>(model: &GatModel<T>, image: &PreparedGraph<T>) -> Result<(T, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let params = model.push_params(&mut tape);
    let x = tape.constant(image.features.clone());
    let c = model.forward_on_tape(&mut tape, &params, x, &image.neighborhoods)?;
    let l = loss(&mut tape, &image.modularity, c)?;
    tape.backward(l)?;
    let value = tape.value(l).item();
    Ok((value, params.iter().map(|&p| tape.grad(p)).collect()))
}

/// Forward, loss, backward and one Adam step. Returns the pre-step loss.
pub fn train_step<T: Scalar>(
    model: &mut GatModel<T>,
    state: &mut AdamState<T>,
    image: &PreparedGraph<T>,
    cfg: &TrainConfig,
) -> Result<T> {
    let (value, grads) = loss_and_grads(model, image)?;
    let names = model.parameter_names();
    adam_step(&mut model.parameters_mut(), &grads, &names, state, cfg)?;
    Ok(value)
}

/// Result of training on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub model: GatModel<T>,
    /// Assignment produced by the final parameters.
    pub assignment: Assignment<T>,
    /// Loss at each epoch, evaluated before that epoch's step.
    pub losses: Vec<T>,
}

fn run_epochs<T: Scalar>(
    mut model: GatModel<T>,
    mut state: AdamState<T>,
    image: &PreparedGraph<T>,
    cfg: &TrainConfig,
    epochs: usize,
    mut losses: Vec<T>,
) -> Result<TrainOutcome<T>> {
    for epoch in 0..epochs {
        let l = train_step(&mut model, &mut state, image, cfg)?;
        log::debug!("epoch {epoch}: loss {l}");
        losses.push(l);
    }
    let assignment = model.forward(&image.features, &image.neighborhoods)?;
    Ok(TrainOutcome {
        model,
        assignment,
        losses,
    })
}

/// Fresh initialization from `mcfg.seed`, then `cfg.epochs` full-graph steps.
pub fn train_prepared<T: Scalar>(
    image: &PreparedGraph<T>,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = init_params(mcfg, image.features.cols())?;
    let state = AdamState::for_model(&model);
    run_epochs(model, state, image, cfg, cfg.epochs, Vec::with_capacity(cfg.epochs))
}

pub fn train_per_image<T: Scalar>(
    fm: &FeatureMatrix<T>,
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let image = PreparedGraph::from_features(&fm.features, T::lit(cfg.tau))?;
    train_prepared(&image, cfg, mcfg)
}

/// Independent per-image training over many images, `cfg.jobs` at a time.
pub fn train_many_prepared<T: Scalar>(
    images: &[PreparedGraph<T>],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    cfg.validate()?;
    with_pool(cfg.jobs, || images.par_iter().map(|img| train_prepared(img, cfg, mcfg)).collect())
}

/// Shared parameters for `t0` epochs (one step per image per epoch, in input
/// order), then a deep copy per image trained alone for `t1` epochs.
pub fn train_collective_prepared<T: Scalar>(
    images: &[PreparedGraph<T>],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    let cfg = TrainConfig {
        mode: TrainMode::Collective,
        ..cfg.clone()
    };
    cfg.validate()?;
    let first = images.first().ok_or(Error::Empty("collective training needs at least one image"))?;
    let c_in = first.features.cols();
    if let Some((i, img)) = images.iter().enumerate().find(|(_, img)| img.features.cols() != c_in) {
        return Err(Error::Config(format!(
            "image {i} has feature dimension {} but image 0 has {c_in}",
            img.features.cols()
        )));
    }
    let mut shared = init_params(mcfg, c_in)?;
    let mut state = AdamState::for_model(&shared);
    let mut histories: Vec<Vec<T>> = vec![Vec::with_capacity(cfg.t0 + cfg.t1); images.len()];
    for epoch in 0..cfg.t0 {
        for (img, hist) in images.iter().zip(histories.iter_mut()) {
            hist.push(train_step(&mut shared, &mut state, img, &cfg)?);
        }
        log::debug!("shared epoch {epoch} done");
    }
    let t1 = cfg.t1;
    let work: Vec<(usize, Vec<T>)> = histories.into_iter().enumerate().collect();
    with_pool(cfg.jobs, || {
        work.into_par_iter()
            .map(|(i, hist)| {
                let fork_state = if cfg.reset_optimizer_at_fork {
                    AdamState::for_model(&shared)
                } else {
                    state.clone()
                };
                run_epochs(shared.clone(), fork_state, &images[i], &cfg, t1, hist)
            })
            .collect()
    })
}

pub fn train_collective<T: Scalar>(
    fms: &[FeatureMatrix<T>],
    cfg: &TrainConfig,
    mcfg: &ModelConfig,
) -> Result<Vec<TrainOutcome<T>>> {
    if let Some(first) = fms.first() {
        let c_in = first.feature_dim();
        if let Some((i, fm)) = fms.iter().enumerate().find(|(_, f)| f.feature_dim() != c_in) {
            return Err(Error::Config(format!(
                "image {i} has feature dimension {} but image 0 has {c_in}",
                fm.feature_dim()
            )));
        }
    }
    let images = fms
        .iter()
        .map(|fm| PreparedGraph::from_features(&fm.features, T::lit(cfg.tau)))
        .collect::<Result<Vec<_>>>()?;
    train_collective_prepared(&images, cfg, mcfg)
}

fn with_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {jobs}-thread pool ({e}); running on the global pool");
            f()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Tensor::from_rows(&[vec![0.5, -1.5]]);
        let before = p.clone();
        let mut state = AdamState::for_shapes([p.shape()]);
        for _ in 0..3 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[1, 2])], &names(1), &mut state, &cfg).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(state.step, 3);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = Tensor::scalar(0.0f64);
        let mut state = AdamState::for_shapes([p.shape()]);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &names(1), &mut state, &cfg).unwrap();
        let expected = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.item() - expected).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let cfg = TrainConfig::default();
        let mut a = Tensor::scalar(1.0f64);
        let mut b = Tensor::scalar(1.0f64);
        let mut state = AdamState::for_shapes([a.shape(), b.shape()]);
        let err = adam_step(
            &mut [&mut a, &mut b],
            &[Tensor::scalar(0.0), Tensor::scalar(f64::NAN)],
            &names(2),
            &mut state,
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p1"));
        assert_eq!(a.item(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        let coll = TrainConfig {
            mode: TrainMode::Collective,
            t0: 0,
            t1: 0,
            ..TrainConfig::default()
        };
        assert!(coll.validate().is_err());
        assert!(TrainConfig { t1: 1, ..coll }.validate().is_ok());
    }

    #[test]
    fn presets() {
        let isic = TrainConfig::isic2018();
        assert_eq!((isic.epochs, isic.t0, isic.t1), (300, 5, 5));
        let colon = TrainConfig::colondb();
        assert_eq!((colon.epochs, colon.t0, colon.t1), (60, 15, 55));
        assert_eq!((colon.lr, colon.weight_decay, colon.tau), (1e-3, 1e-2, 0.3));
    }
}
