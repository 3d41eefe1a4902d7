use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoise::{
    check_response, Concurrency, Conditions, Denoiser, DenoiserRequest, FeaturePack,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::LatentField;
use crate::latentopt::{optimization_event, update_locks, OptimizerConfig, PairRecord};
use crate::scene::{Track, ViewRig};
use crate::schedule::{ddim_step, predict_original, Schedule};
use crate::warpfield::{transport_signal, Codec};

use super::{
    apply_upper_body_replacement, blend_predictions, cg_noise, BlendInput, BlendPlan,
    SamplingPolicy, WarpBank,
};

/// One view's sampling state. All views of a run share the timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewState {
    pub view_id: usize,
    pub latent: LatentField,
    pub locked: bool,
    pub track: Track,
    pub timestep: usize,
}

/// Seeded standard-normal starting latents, drawn view by view.
pub fn initial_latents(n: usize, shape: (usize, usize, usize), seed: u64) -> Vec<LatentField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let data = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng));
            LatentField::latent(data)
        })
        .collect()
}

pub fn initial_states(
    latents: Vec<LatentField>,
    tracks: &[Track],
    timestep: usize,
) -> Vec<ViewState> {
    latents
        .into_iter()
        .enumerate()
        .map(|(i, latent)| ViewState {
            view_id: i,
            latent,
            locked: false,
            track: tracks.get(i).copied().unwrap_or(Track::FullBody),
            timestep,
        })
        .collect()
}

/// Intermediate tensors of one step, kept when a run is observed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub timestep: usize,
    pub guided: bool,
    pub predicted: Vec<LatentField>,
    /// Blended predictions; empty on original steps.
    pub blended: Vec<LatentField>,
    pub noise: Vec<LatentField>,
}

/// Everything a multi-view step needs besides the states.
pub struct Sampler<'a> {
    pub schedule: &'a Schedule,
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn Codec,
    pub plan: &'a BlendPlan,
    pub bank: &'a WarpBank,
    pub policy: &'a SamplingPolicy,
    /// Per-view conditions; may be empty.
    pub conditions: &'a [Conditions],
    /// Attention reference view per view; empty disables the hook.
    pub references: &'a [usize],
    pub prompt: Option<&'a str>,
    pub exec: Execution,
}

fn as_denoiser_error(e: Error, view_id: usize, timestep: usize) -> Error {
    match e {
        Error::Denoiser { .. } | Error::Config { .. } | Error::Numerical { .. } => e,
        other => Error::Denoiser {
            view_id,
            timestep,
            reason: other.to_string(),
        },
    }
}

impl<'a> Sampler<'a> {
    fn denoise_exec(&self) -> Execution {
        match self.denoiser.concurrency() {
            Concurrency::ConcurrentSafe => self.exec,
            Concurrency::SerialOnly => Execution::Sequential,
        }
    }

    fn request<'r>(&'r self, states: &'r [ViewState], i: usize, t: usize) -> DenoiserRequest<'r> {
        let mut req =
            DenoiserRequest::new(states[i].view_id, t, &states[i].latent).with_prompt(self.prompt);
        if let Some(c) = self.conditions.get(i) {
            req = req.with_conditions(c);
        }
        req
    }

    fn reference_features(
        &self,
        states: &[ViewState],
        t: usize,
    ) -> Result<Vec<Option<FeaturePack>>> {
        let n = states.len();
        if !self.policy.reference_attention || self.references.is_empty() {
            return Ok(vec![None; n]);
        }
        if self.references.len() != n {
            return Err(Error::contract("reference list does not match views"));
        }
        let mut refs: Vec<usize> = self.references.to_vec();
        refs.sort_unstable();
        refs.dedup();
        let feats = self.denoise_exec().try_map(refs.len(), |k| {
            let r = refs[k];
            if r >= n {
                return Err(Error::contract(format!("reference view {r} out of range")));
            }
            self.denoiser
                .reference_features(&self.request(states, r, t), self.schedule)
                .map_err(|e| as_denoiser_error(e, states[r].view_id, t))
        })?;
        Ok(self
            .references
            .iter()
            .map(|r| feats[refs.binary_search(r).expect("deduplicated")].clone())
            .collect())
    }

    /// Advances every view from `t` to `t - 1`. Nothing is committed unless
    /// all views succeed.
    pub fn step(
        &self,
        states: &[ViewState],
        t: usize,
        record: bool,
    ) -> Result<(Vec<ViewState>, Option<StepRecord>)> {
        let s = self.schedule;
        s.check_step(t)?;
        if states.iter().any(|v| v.timestep != t) {
            return Err(Error::contract(format!(
                "views are not all at timestep {t}"
            )));
        }
        let n = states.len();
        let features = self.reference_features(states, t)?;
        let noise = self.denoise_exec().try_map(n, |i| {
            let req = self
                .request(states, i, t)
                .with_reference(features[i].as_ref());
            let resp = self
                .denoiser
                .denoise(&req, s)
                .map_err(|e| as_denoiser_error(e, states[i].view_id, t))?;
            check_response(&req, &resp)?;
            Ok::<_, Error>(resp.eps)
        })?;

        let guided = self.policy.is_cg_step(t, s) && n > 0;
        let advance = |latents: Vec<LatentField>| {
            states
                .iter()
                .zip(latents)
                .map(|(st, latent)| ViewState {
                    latent,
                    timestep: t - 1,
                    ..st.clone()
                })
                .collect::<Vec<_>>()
        };

        if !guided {
            let next = self
                .exec
                .try_map(n, |i| ddim_step(&states[i].latent, &noise[i], t, s))?;
            let rec = record
                .then(|| -> Result<StepRecord> {
                    Ok(StepRecord {
                        timestep: t,
                        guided: false,
                        predicted: (0..n)
                            .map(|i| predict_original(&states[i].latent, &noise[i], t, s))
                            .collect::<Result<_>>()?,
                        blended: Vec::new(),
                        noise: noise.clone(),
                    })
                })
                .transpose()?;
            return Ok((advance(next), rec));
        }

        self.plan.validate(n, {
            let (_, h, w) = states[0].latent.shape();
            (h, w)
        })?;
        let sa = s.alpha_bar(t).sqrt();
        let predicted = self
            .exec
            .try_map(n, |i| predict_original(&states[i].latent, &noise[i], t, s))?;
        let means: Vec<LatentField> = states.iter().map(|st| st.latent.map(|v| v / sa)).collect();

        let results =
            self.exec
                .try_map(n, |i| -> Result<(LatentField, LatentField, LatentField)> {
                    let target = &self.plan.targets[i];
                    let transported = target
                        .entries
                        .iter()
                        .map(|e| {
                            let k = e.source;
                            match self.bank.get(k, i)? {
                                None => Ok((predicted[k].clone(), means[k].clone())),
                                Some(w) => Ok((
                                    transport_signal(&predicted[k], self.codec, w)?.0,
                                    transport_signal(&means[k], self.codec, w)?.0,
                                )),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let inputs: Vec<BlendInput<'_>> = transported
                        .iter()
                        .zip(&target.entries)
                        .map(|((x, mu), e)| BlendInput {
                            x,
                            mu,
                            weight: &e.weight,
                        })
                        .collect();
                    let blended = blend_predictions(&predicted[i], &inputs)?;
                    let closeup = target
                        .closeup
                        .filter(|_| self.policy.upper_body_replacement)
                        .map(|c| (&transported[c].0, &target.entries[c].weight));
                    let (blended, eps, next) = match closeup {
                        Some((x, w)) if self.policy.replace_after_noise => {
                            let eps = cg_noise(&states[i].latent, &blended, t, s)?;
                            let replaced = apply_upper_body_replacement(&blended, x, w)?;
                            let (pa, pb) =
                                (s.alpha_bar(t - 1).sqrt(), (1.0 - s.alpha_bar(t - 1)).sqrt());
                            let next = replaced.zip_map(&eps, |x0, e| pa * x0 + pb * e)?;
                            (replaced, eps, next)
                        }
                        Some((x, w)) => {
                            let replaced = apply_upper_body_replacement(&blended, x, w)?;
                            let eps = cg_noise(&states[i].latent, &replaced, t, s)?;
                            let next = ddim_step(&states[i].latent, &eps, t, s)?;
                            (replaced, eps, next)
                        }
                        None => {
                            let eps = cg_noise(&states[i].latent, &blended, t, s)?;
                            let next = ddim_step(&states[i].latent, &eps, t, s)?;
                            (blended, eps, next)
                        }
                    };
                    Ok((blended, eps, next))
                })?;

        let mut blended = Vec::with_capacity(n);
        let mut eps = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        for (b, e, x) in results {
            blended.push(b);
            eps.push(e);
            next.push(x);
        }
        let rec = record.then(|| StepRecord {
            timestep: t,
            guided: true,
            predicted,
            blended,
            noise: eps,
        });
        Ok((advance(next), rec))
    }
}

/// One lockstep multi-view step from `t` to `t - 1`.
pub fn multiview_step(
    states: &[ViewState],
    sampler: &Sampler<'_>,
    t: usize,
) -> Result<Vec<ViewState>> {
    Ok(sampler.step(states, t, false)?.0)
}

/// Latent optimization attached to a sampling run.
pub struct Optimization<'a> {
    pub config: &'a OptimizerConfig,
    pub phase1: Vec<(usize, usize)>,
    pub phase2: Vec<(usize, usize)>,
    /// Rig used to resolve front/back/side locks; without one the initial
    /// lock flags are kept.
    pub rig: Option<&'a ViewRig>,
}

#[derive(Debug, Clone)]
pub struct SamplingOutput {
    pub states: Vec<ViewState>,
    pub loss_trace: Vec<PairRecord>,
}

/// Full `T -> 0` rollout with optional optimization events and a per-step
/// observer.
/// Callback invoked after every sampling step.
pub type StepObserver<'a> = &'a mut dyn FnMut(&StepRecord) -> Result<()>;

pub fn run_sampling(
    sampler: &Sampler<'_>,
    init: Vec<ViewState>,
    optimization: Option<&Optimization<'_>>,
    mut observer: Option<StepObserver<'_>>,
) -> Result<SamplingOutput> {
    sampler.policy.validate()?;
    let s = sampler.schedule;
    let mut states = init;
    let mut loss_trace = Vec::new();
    for t in (1..=s.num_steps()).rev() {
        let (next, rec) = sampler
            .step(&states, t, observer.is_some())
            .map_err(|e| e.at("consistency", format!("step t={t}")))?;
        states = next;
        if let (Some(obs), Some(rec)) = (observer.as_mut(), rec.as_ref()) {
            obs(rec)?;
        }
        let Some(opt) = optimization else { continue };
        if !sampler.policy.is_optimization_step(t) {
            continue;
        }
        let mut locks: Vec<bool> = states.iter().map(|v| v.locked).collect();
        if let Some(rig) = opt.rig {
            update_locks(
                &mut locks,
                rig,
                s.elapsed_fraction(t),
                sampler.policy.lock_front_back_early,
                sampler.policy.side_lock_fraction,
            );
        }
        let latents: Vec<LatentField> = states.iter().map(|v| v.latent.clone()).collect();
        let (updated, trace) = optimization_event(
            &latents,
            &locks,
            &opt.phase1,
            &opt.phase2,
            sampler.bank,
            sampler.codec,
            opt.config,
            t,
        )
        .map_err(|e| e.at("latentopt", format!("event t={t}")))?;
        for ((st, latent), lock) in states.iter_mut().zip(updated).zip(locks) {
            debug_assert!(!st.locked || st.latent == latent);
            st.latent = latent;
            st.locked = lock;
        }
        loss_trace.extend(trace);
    }
    Ok(SamplingOutput { states, loss_trace })
}
