//! Phase one: supervised training from scripted demonstrations.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{render, ActionKind, ActionSpec, Catalog, Instruction, Observation, PageKind, Session};
use crate::error::ShopError;
use crate::model::{encode_context, ContextEncoding, SeqModel};
use crate::nn::{Adam, AdamConfig, GradStore, Tape, Val};
use crate::scalar::Scalar;
use crate::text::Vocabulary;

/// A full expert trajectory with the observation seen before each action.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub instruction: Instruction,
    pub steps: Vec<(Observation, ActionSpec)>,
    pub final_reward: f64,
    pub source_category: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BCConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub adam_eps: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
}

impl Default for BCConfig {
    fn default() -> Self {
        BCConfig {
            epochs: 10,
            learning_rate: 2e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            batch_size: 32,
            adam_eps: 1e-8,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
        }
    }
}

impl BCConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_eps,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
        }
    }
}

/// Scripted expert: search for the target's type tokens, page forward until
/// the target is listed, open it, select every required option, buy.
pub fn oracle_demonstrate(
    catalog: &Arc<Catalog>,
    instruction: &Instruction,
    horizon: usize,
) -> Result<Demonstration, ShopError> {
    if instruction.target_product as usize >= catalog.len() {
        return Err(ShopError::Contract("target product not in catalog".into()));
    }
    let target = catalog.product(instruction.target_product);
    let mut session = Session::reset(catalog.clone(), instruction.clone(), horizon);
    let mut steps = Vec::new();

    let mut act = |session: &mut Session, action: ActionSpec| -> Result<(f64, bool), ShopError> {
        let obs = session.observe();
        let result = session.step(&action)?;
        steps.push((obs, action));
        Ok((result.reward, result.done))
    };

    act(&mut session, ActionSpec::query(instruction.target_type.clone()))?;

    // Page forward until the target resolves on the current results page.
    loop {
        let obs = session.observe();
        let title_click = obs
            .actions
            .iter()
            .find(|a| a.kind == ActionKind::Click && a.surface == target.title)
            .cloned();
        if let Some(click) = title_click {
            // With duplicate titles the first match on the page wins; only
            // click when that first match is the target itself.
            let crate::env::Page::Results { page_index, ranked, .. } = &session.state().page else {
                return Err(ShopError::Contract("oracle expected a results page".into()));
            };
            let start = (page_index - 1) * crate::env::RESULTS_PER_PAGE;
            let slice = &ranked[start..(start + crate::env::RESULTS_PER_PAGE).min(ranked.len())];
            let first_match = slice
                .iter()
                .copied()
                .find(|id| catalog.product(*id).title == target.title);
            if first_match == Some(target.id) {
                act(&mut session, click)?;
                break;
            }
        }
        let next = render::next_button();
        if obs.actions.contains(&next) {
            let (_, done) = act(&mut session, next)?;
            if done {
                return Err(ShopError::Contract(
                    "oracle hit the horizon while paging to the target".into(),
                ));
            }
        } else {
            return Err(ShopError::Contract(
                "oracle exhausted the result pages without resolving the target".into(),
            ));
        }
    }

    for value in instruction.required_options.values() {
        let (_, done) = act(
            &mut session,
            ActionSpec { kind: ActionKind::Click, surface: vec![value.clone()] },
        )?;
        if done {
            return Err(ShopError::Contract("oracle hit the horizon selecting options".into()));
        }
    }

    let (reward, done) = act(&mut session, render::buy_now())?;
    if !done {
        return Err(ShopError::Contract("purchase did not end the episode".into()));
    }

    Ok(Demonstration {
        instruction: instruction.clone(),
        steps,
        final_reward: reward,
        source_category: instruction.source_category.clone(),
    })
}

/// One demonstration step prepared for scoring: the model context, the
/// concrete action set (query slot substituted with the demonstrated query),
/// and the index of the demonstrated action.
pub struct DemoStepView {
    pub ctx: ContextEncoding,
    pub actions: Vec<ActionSpec>,
    pub target_index: usize,
}

pub fn demo_step_views(
    vocab: &Vocabulary,
    demo: &Demonstration,
    obs_history: u8,
    context_limit: usize,
) -> Result<Vec<DemoStepView>, ShopError> {
    let goal = &demo.instruction.goal_text;
    let mut last_query: Vec<String> = demo.instruction.target_type.clone();
    let mut views = Vec::with_capacity(demo.steps.len());
    for (t, (obs, action)) in demo.steps.iter().enumerate() {
        if action.kind == ActionKind::SearchQuery {
            last_query = action.surface.clone();
        }
        let mut actions = Vec::with_capacity(obs.actions.len());
        for a in &obs.actions {
            match a.kind {
                ActionKind::SearchQuery => actions.push(ActionSpec::query(last_query.clone())),
                ActionKind::Click => actions.push(a.clone()),
            }
        }
        let target_index = actions.iter().position(|a| a == action).ok_or_else(|| {
            ShopError::Contract(format!(
                "demonstrated action {:?} not in the action set at step {t}",
                action.surface_text()
            ))
        })?;
        let prev = if obs_history >= 2 && t > 0 {
            Some(demo.steps[t - 1].0.text.as_slice())
        } else {
            None
        };
        let ctx = encode_context(vocab, goal, prev, &obs.text, context_limit);
        views.push(DemoStepView { ctx, actions, target_index });
    }
    Ok(views)
}

/// Behavioral-cloning loss on the tape: the sum over steps of the negative
/// log of the softmax-normalized probability of the demonstrated action.
pub fn bc_loss_on_tape<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    tape: &mut Tape<S>,
    demo: &Demonstration,
) -> Result<Val, ShopError> {
    let views = demo_step_views(vocab, demo, model.cfg.obs_history, model.cfg.context_limit)?;
    let mut step_losses = Vec::with_capacity(views.len());
    for view in &views {
        let summary = model.encode(tape, &view.ctx);
        let mut scores = Vec::with_capacity(view.actions.len());
        for action in &view.actions {
            let ids = vocab.encode(&action.surface);
            scores.push(model.action_score(tape, summary, &ids)?);
        }
        let stacked = tape.stack(&scores);
        let logp = tape.log_softmax(stacked);
        let chosen = tape.pick(logp, view.target_index);
        step_losses.push(tape.neg(chosen));
    }
    let all = tape.stack(&step_losses);
    let mean = tape.mean(all);
    // Sum over steps = mean * number of steps.
    Ok(tape.scale(mean, S::from_f64_c(step_losses.len() as f64)))
}

/// Inference-only loss value.
pub fn bc_loss<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    demo: &Demonstration,
) -> Result<f64, ShopError> {
    let mut tape = Tape::inference();
    let loss = bc_loss_on_tape(model, vocab, &mut tape, demo)?;
    Ok(tape.scalar_value(loss).to_f64_c())
}

/// Token-level negative log-likelihood of the demonstrated search queries.
///
/// The set-normalized loss only constrains scores relative to the other
/// presented actions; queries are generated token by token at inference, so
/// training also fits the raw sequence likelihood of the demonstrated query.
pub fn query_generation_loss_on_tape<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    tape: &mut Tape<S>,
    demo: &Demonstration,
) -> Result<Option<Val>, ShopError> {
    let mut losses = Vec::new();
    for (t, (obs, action)) in demo.steps.iter().enumerate() {
        if action.kind != ActionKind::SearchQuery {
            continue;
        }
        let prev = if model.cfg.obs_history >= 2 && t > 0 {
            Some(demo.steps[t - 1].0.text.as_slice())
        } else {
            None
        };
        let ctx = encode_context(
            vocab,
            &demo.instruction.goal_text,
            prev,
            &obs.text,
            model.cfg.context_limit,
        );
        let summary = model.encode(tape, &ctx);
        let ids = vocab.encode(&action.surface);
        let mean_logprob = model.action_score(tape, summary, &ids)?;
        // Mean over |tokens| + terminator back to a summed NLL.
        let n_terms = (ids.len() + 1) as f64;
        losses.push(tape.scale(mean_logprob, S::from_f64_c(-n_terms)));
    }
    if losses.is_empty() {
        return Ok(None);
    }
    let stacked = tape.stack(&losses);
    let mean = tape.mean(stacked);
    Ok(Some(tape.scale(mean, S::from_f64_c(losses.len() as f64))))
}

/// Gradient of the mean demonstration loss over a batch; per-demo gradients
/// are computed in parallel and reduced in index order so results do not
/// depend on scheduling.
fn batch_gradients<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    batch: &[&Demonstration],
) -> Result<(GradStore<S>, f64), ShopError> {
    let per_demo: Result<Vec<(GradStore<S>, f64)>, ShopError> = batch
        .par_iter()
        .map(|demo| {
            let mut tape = Tape::recording();
            let set_loss = bc_loss_on_tape(model, vocab, &mut tape, demo)?;
            let loss = match query_generation_loss_on_tape(model, vocab, &mut tape, demo)? {
                Some(query_nll) => tape.add(set_loss, query_nll),
                None => set_loss,
            };
            let grads = tape.backward(loss, &model.params)?;
            Ok((grads, tape.scalar_value(loss).to_f64_c()))
        })
        .collect();
    let per_demo = per_demo?;

    let mut grads = GradStore::zeros_like(&model.params);
    let mut total = 0.0;
    for (g, l) in &per_demo {
        grads.add_from(g);
        total += l;
    }
    grads.scale(S::from_f64_c(1.0 / batch.len() as f64));
    Ok((grads, total / batch.len() as f64))
}

/// Train with shuffled minibatches; returns the per-epoch mean training loss.
pub fn train_bc<S: Scalar>(
    model: &mut SeqModel<S>,
    vocab: &Vocabulary,
    demos: &[Demonstration],
    cfg: &BCConfig,
    seed: u64,
) -> Result<Vec<f64>, ShopError> {
    if demos.is_empty() {
        return Err(ShopError::Contract("no demonstrations to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(cfg.adam(), &model.params);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..demos.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Demonstration> = chunk.iter().map(|i| &demos[*i]).collect();
            let (grads, loss) = batch_gradients(model, vocab, &batch)?;
            if !loss.is_finite() {
                return Err(ShopError::Numeric(format!(
                    "non-finite loss in epoch {epoch} after {n_batches} batches"
                )));
            }
            adam.step(&mut model.params, &grads)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        curve.push(epoch_loss / n_batches as f64);
    }
    Ok(curve)
}

/// Fraction of demonstration steps where the model's argmax action equals
/// the demonstrated one.
pub fn next_action_agreement<S: Scalar>(
    model: &SeqModel<S>,
    vocab: &Vocabulary,
    demos: &[Demonstration],
) -> Result<f64, ShopError> {
    let counts: Result<Vec<(usize, usize)>, ShopError> = demos
        .par_iter()
        .map(|demo| {
            let views = demo_step_views(vocab, demo, model.cfg.obs_history, model.cfg.context_limit)?;
            let mut hits = 0;
            for view in &views {
                let set = crate::actions::action_distribution(
                    model,
                    vocab,
                    &view.ctx,
                    &view.actions,
                    crate::actions::QuerySource::Substitute(&view.actions[view.target_index].surface),
                )?;
                if crate::actions::select_argmax(&set) == view.target_index {
                    hits += 1;
                }
            }
            Ok((hits, views.len()))
        })
        .collect();
    let counts = counts?;
    let hits: usize = counts.iter().map(|(h, _)| h).sum();
    let total: usize = counts.iter().map(|(_, n)| n).sum();
    Ok(hits as f64 / total.max(1) as f64)
}

pub fn filter_by_category(demos: &[Demonstration], category: &str) -> Vec<Demonstration> {
    demos.iter().filter(|d| d.source_category == category).cloned().collect()
}

#[derive(Serialize, Deserialize)]
struct DemoRecord {
    instruction: Instruction,
    steps: Vec<(PageKind, ActionKind, Vec<String>)>,
    final_reward: f64,
    source_category: String,
}

/// Rendered pages are self-identifying by their leading token.
pub fn page_kind_of(obs: &Observation) -> PageKind {
    match obs.text.first().map(|t| t.as_str()) {
        Some("goal") => PageKind::Search,
        Some("results") => PageKind::Results,
        Some("item") => PageKind::Item,
        _ => PageKind::ItemSub,
    }
}

pub fn save_demonstrations(demos: &[Demonstration], path: &Path) -> Result<(), ShopError> {
    let mut f = std::fs::File::create(path)?;
    for demo in demos {
        let record = DemoRecord {
            instruction: demo.instruction.clone(),
            steps: demo
                .steps
                .iter()
                .map(|(obs, action)| (page_kind_of(obs), action.kind, action.surface.clone()))
                .collect(),
            final_reward: demo.final_reward,
            source_category: demo.source_category.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// Load and replay each trajectory; the replay must reproduce the recorded
/// final reward (and implicitly, legal observations) exactly.
pub fn load_demonstrations(catalog: &Arc<Catalog>, path: &Path, horizon: usize) -> Result<Vec<Demonstration>, ShopError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DemoRecord = serde_json::from_str(&line)?;
        let mut session = Session::reset(catalog.clone(), record.instruction.clone(), horizon);
        let mut steps = Vec::with_capacity(record.steps.len());
        let mut final_reward = 0.0;
        for (page, kind, surface) in &record.steps {
            let obs = session.observe();
            if session.state().page.kind() != *page {
                return Err(ShopError::Format(format!(
                    "demonstration on line {} replays onto a {:?} page but records {:?}",
                    lineno + 1,
                    session.state().page.kind(),
                    page
                )));
            }
            let action = ActionSpec { kind: *kind, surface: surface.clone() };
            let result = session.step(&action).map_err(|e| {
                ShopError::Format(format!("demonstration on line {} fails to replay: {e}", lineno + 1))
            })?;
            final_reward = result.reward;
            steps.push((obs, action));
        }
        if (final_reward - record.final_reward).abs() > 0.0 {
            return Err(ShopError::Format(format!(
                "demonstration on line {} replays to reward {} but records {}",
                lineno + 1,
                final_reward,
                record.final_reward
            )));
        }
        out.push(Demonstration {
            instruction: record.instruction,
            steps,
            final_reward,
            source_category: record.source_category,
        });
    }
    Ok(out)
}
