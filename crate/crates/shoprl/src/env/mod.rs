//! Miniature goal-conditioned shopping environment.
//!
//! An episode starts on the search page, walks a deterministic page state
//! machine with a per-page action set, and pays a single reward when the
//! agent buys a product (or zero when the step horizon runs out).

pub mod catalog;
pub mod instruction;
pub mod ranking;
pub mod render;
pub mod reward;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::ShopError;
pub use catalog::{generate_catalog, Catalog, Product};
pub use instruction::{Instruction, InstructionSampler};
pub use ranking::rank_products;
pub use reward::compute_reward;

pub const RESULTS_PER_PAGE: usize = 5;
pub const DEFAULT_HORIZON: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    SearchQuery,
    Click,
}

/// One selectable action: a button label, or query text for a search.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionSpec {
    pub kind: ActionKind,
    pub surface: Vec<String>,
}

impl ActionSpec {
    pub fn click(tokens: &[&str]) -> Self {
        ActionSpec {
            kind: ActionKind::Click,
            surface: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    pub fn query(tokens: Vec<String>) -> Self {
        ActionSpec {
            kind: ActionKind::SearchQuery,
            surface: tokens,
        }
    }

    pub fn surface_text(&self) -> String {
        self.surface.join(" ")
    }
}

/// Rendered page plus its dynamic action set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub text: Vec<String>,
    pub actions: Vec<ActionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubPage {
    Description,
    Features,
    Reviews,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PageKind {
    Search,
    Results,
    Item,
    ItemSub,
}

/// Page state. Item pages carry the results context they were opened from so
/// `prev` can restore it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Page {
    Search,
    Results {
        query: Vec<String>,
        page_index: usize,
        ranked: Vec<u32>,
    },
    Item {
        product: u32,
        selected: BTreeMap<String, String>,
        query: Vec<String>,
        page_index: usize,
        ranked: Vec<u32>,
    },
    ItemSub {
        product: u32,
        selected: BTreeMap<String, String>,
        sub: SubPage,
        query: Vec<String>,
        page_index: usize,
        ranked: Vec<u32>,
    },
}

impl Page {
    pub fn kind(&self) -> PageKind {
        match self {
            Page::Search => PageKind::Search,
            Page::Results { .. } => PageKind::Results,
            Page::Item { .. } => PageKind::Item,
            Page::ItemSub { .. } => PageKind::ItemSub,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub instruction: Instruction,
    pub page: Page,
    pub last_query: Vec<String>,
    pub step_count: usize,
    pub done: bool,
    pub purchased: Option<(u32, BTreeMap<String, String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// One live episode over a shared immutable catalog.
#[derive(Debug, Clone)]
pub struct Session {
    catalog: Arc<Catalog>,
    state: EpisodeState,
    horizon: usize,
}

impl Session {
    pub fn reset(catalog: Arc<Catalog>, instruction: Instruction, horizon: usize) -> Session {
        Session {
            catalog,
            state: EpisodeState {
                instruction,
                page: Page::Search,
                last_query: Vec::new(),
                step_count: 0,
                done: false,
                purchased: None,
            },
            horizon,
        }
    }

    pub fn catalog(&self) -> &Arc<Catalog> {
        &self.catalog
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn instruction(&self) -> &Instruction {
        &self.state.instruction
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_done(&self) -> bool {
        self.state.done
    }

    /// Render the current page. Pure: identical state renders identically.
    pub fn observe(&self) -> Observation {
        render::render(&self.state.page, &self.state.instruction, &self.catalog)
    }

    /// Apply one action. Illegal actions leave the episode unchanged.
    pub fn step(&mut self, action: &ActionSpec) -> Result<StepResult, ShopError> {
        if self.state.done {
            return Err(ShopError::Contract("step on a finished episode".into()));
        }
        let obs = self.observe();
        let legal = match action.kind {
            ActionKind::SearchQuery => {
                obs.actions.iter().any(|a| a.kind == ActionKind::SearchQuery)
                    && !action.surface.is_empty()
            }
            ActionKind::Click => obs.actions.contains(action),
        };
        if !legal {
            return Err(ShopError::IllegalAction(format!(
                "{:?} {:?} on {:?} page",
                action.kind,
                action.surface_text(),
                self.state.page.kind()
            )));
        }

        let mut reward = 0.0;
        match action.kind {
            ActionKind::SearchQuery => {
                self.state.last_query = action.surface.clone();
                self.enter_results(action.surface.clone());
            }
            ActionKind::Click => reward = self.apply_click(&action.surface),
        }

        self.state.step_count += 1;
        if !self.state.done && self.state.step_count >= self.horizon {
            self.state.done = true;
        }

        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.state.done,
        })
    }

    fn enter_results(&mut self, query: Vec<String>) {
        // An empty search browses the whole catalog in id order.
        let ranked = if query.is_empty() {
            (0..self.catalog.len() as u32).collect()
        } else {
            rank_products(&self.catalog, &query)
        };
        self.state.page = Page::Results {
            query,
            page_index: 1,
            ranked,
        };
    }

    fn apply_click(&mut self, surface: &[String]) -> f64 {
        let back = render::back_to_search();
        let prev = render::prev_button();
        let next = render::next_button();
        let buy = render::buy_now();
        let search = render::search_button();

        if surface == back.surface.as_slice() {
            self.state.page = Page::Search;
            return 0.0;
        }

        match std::mem::replace(&mut self.state.page, Page::Search) {
            Page::Search => {
                // Only the search button clicks here; it re-runs the last query.
                debug_assert_eq!(surface, search.surface.as_slice());
                self.enter_results(self.state.last_query.clone());
                0.0
            }
            Page::Results { query, page_index, ranked } => {
                if surface == next.surface.as_slice() {
                    self.state.page = Page::Results { query, page_index: page_index + 1, ranked };
                    return 0.0;
                }
                if surface == prev.surface.as_slice() {
                    self.state.page = Page::Results { query, page_index: page_index - 1, ranked };
                    return 0.0;
                }
                // A product title: focus the first matching product on this page.
                let start = (page_index - 1) * RESULTS_PER_PAGE;
                let slice = &ranked[start.min(ranked.len())..(start + RESULTS_PER_PAGE).min(ranked.len())];
                let product = slice
                    .iter()
                    .copied()
                    .find(|id| self.catalog.product(*id).title == surface)
                    .expect("legality check guarantees a matching title");
                self.state.page = Page::Item {
                    product,
                    selected: BTreeMap::new(),
                    query,
                    page_index,
                    ranked,
                };
                0.0
            }
            Page::Item { product, mut selected, query, page_index, ranked } => {
                if surface == buy.surface.as_slice() {
                    let r = compute_reward(
                        self.catalog.product(product),
                        &selected,
                        &self.state.instruction,
                    );
                    self.state.done = true;
                    self.state.purchased = Some((product, selected.clone()));
                    self.state.page = Page::Item { product, selected, query, page_index, ranked };
                    return r;
                }
                if surface == prev.surface.as_slice() {
                    self.state.page = Page::Results { query, page_index, ranked };
                    return 0.0;
                }
                let sub = match surface {
                    s if s == [String::from("description")] => Some(SubPage::Description),
                    s if s == [String::from("features")] => Some(SubPage::Features),
                    s if s == [String::from("reviews")] => Some(SubPage::Reviews),
                    _ => None,
                };
                if let Some(sub) = sub {
                    self.state.page = Page::ItemSub { product, selected, sub, query, page_index, ranked };
                    return 0.0;
                }
                // An option value: record it under the first option name that
                // offers this value (value pools are disjoint by construction).
                let value = &surface[0];
                let name = self
                    .catalog
                    .product(product)
                    .options
                    .iter()
                    .find(|(_, values)| values.contains(value))
                    .map(|(name, _)| name.clone())
                    .expect("legality check guarantees a defined option value");
                selected.insert(name, value.clone());
                self.state.page = Page::Item { product, selected, query, page_index, ranked };
                0.0
            }
            Page::ItemSub { product, selected, query, page_index, ranked, .. } => {
                debug_assert_eq!(surface, prev.surface.as_slice());
                self.state.page = Page::Item { product, selected, query, page_index, ranked };
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (Arc<Catalog>, Instruction) {
        let catalog = Arc::new(generate_catalog(1, 50, 5).unwrap());
        let mut sampler = InstructionSampler::new(0, 42);
        let inst = sampler.sample(&catalog);
        (catalog, inst)
    }

    #[test]
    fn reset_starts_on_search_page() {
        let (catalog, inst) = fixture();
        let session = Session::reset(catalog, inst.clone(), DEFAULT_HORIZON);
        assert_eq!(session.state().page.kind(), PageKind::Search);
        assert_eq!(session.state().step_count, 0);
        let obs = session.observe();
        for tok in &inst.goal_text {
            assert!(obs.text.contains(tok), "goal token {tok} missing");
        }
        let slots = obs
            .actions
            .iter()
            .filter(|a| a.kind == ActionKind::SearchQuery)
            .count();
        assert_eq!(slots, 1);
    }

    #[test]
    fn search_then_back_returns_to_search() {
        let (catalog, inst) = fixture();
        let mut session = Session::reset(catalog.clone(), inst, DEFAULT_HORIZON);
        let query = catalog.product(0).title.clone();
        let r = session.step(&ActionSpec::query(query)).unwrap();
        assert_eq!(session.state().page.kind(), PageKind::Results);
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
        let first_title = r
            .observation
            .actions
            .iter()
            .find(|a| a.surface.len() > 1 && a.surface != render::back_to_search().surface)
            .unwrap()
            .clone();
        session.step(&first_title).unwrap();
        assert_eq!(session.state().page.kind(), PageKind::Item);
        let r = session.step(&render::back_to_search()).unwrap();
        assert_eq!(session.state().page.kind(), PageKind::Search);
        assert_eq!(r.reward, 0.0);
        assert!(!r.done);
    }

    #[test]
    fn buying_the_target_with_everything_matched_pays_one() {
        let (catalog, _) = fixture();
        // Build an instruction over product 0 that requires one attribute,
        // one option, and a generous cap.
        let p = catalog.product(0).clone();
        let (opt_name, opt_values) = p.options.iter().next().unwrap();
        let inst = Instruction {
            id: 1,
            goal_text: vec![],
            required_attributes: vec![p.attributes.iter().next().unwrap().clone()],
            required_options: [(opt_name.clone(), opt_values[0].clone())].into_iter().collect(),
            price_cap: p.price + 10.0,
            target_type: p.product_type.clone(),
            source_category: p.category.clone(),
            target_product: p.id,
        };
        let mut session = Session::reset(catalog.clone(), inst, DEFAULT_HORIZON);
        session.step(&ActionSpec::query(p.title.clone())).unwrap();
        session
            .step(&ActionSpec { kind: ActionKind::Click, surface: p.title.clone() })
            .unwrap();
        session
            .step(&ActionSpec { kind: ActionKind::Click, surface: vec![opt_values[0].clone()] })
            .unwrap();
        let r = session.step(&render::buy_now()).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done);
        assert!(session.state().purchased.is_some());
    }

    #[test]
    fn exact_title_query_puts_target_in_top_five() {
        let (catalog, _) = fixture();
        // Brute-force oracle: score every product by token overlap and check
        // the claim for each product used as its own query.
        for p in catalog.products.iter().step_by(11) {
            let ranked = rank_products(&catalog, &p.title);
            let pos = ranked.iter().position(|id| *id == p.id).unwrap();
            assert!(pos < RESULTS_PER_PAGE, "product {} at position {pos}", p.id);
        }
    }

    #[test]
    fn illegal_actions_leave_the_episode_unchanged() {
        let (catalog, inst) = fixture();
        let mut session = Session::reset(catalog, inst, DEFAULT_HORIZON);
        let before = session.state().clone();
        let err = session.step(&render::buy_now());
        assert!(matches!(err, Err(ShopError::IllegalAction(_))));
        assert_eq!(session.state(), &before);
    }

    #[test]
    fn every_offered_action_is_accepted_everywhere() {
        let (catalog, inst) = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        // Random-walk the state machine; every offered action must step.
        for episode in 0..20 {
            let mut sampler = InstructionSampler::new(1, episode);
            let inst = sampler.sample(&catalog);
            let mut session = Session::reset(catalog.clone(), inst, DEFAULT_HORIZON);
            while !session.is_done() {
                let obs = session.observe();
                assert!(!obs.actions.is_empty());
                let pick = rng.gen_range(0..obs.actions.len());
                let mut action = obs.actions[pick].clone();
                if action.kind == ActionKind::SearchQuery {
                    action = ActionSpec::query(vec!["olive".into(), "oil".into()]);
                }
                session.step(&action).unwrap();
            }
        }
        let _ = inst;
    }

    #[test]
    fn horizon_truncates_with_zero_reward() {
        let (catalog, inst) = fixture();
        let mut session = Session::reset(catalog, inst, 3);
        let back = render::back_to_search();
        session.step(&ActionSpec::query(vec!["tea".into()])).unwrap();
        session.step(&back).unwrap();
        let r = session.step(&ActionSpec::query(vec!["tea".into()])).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 0.0);
        assert!(session.state().purchased.is_none());
    }

    #[test]
    fn transitions_are_deterministic() {
        let (catalog, inst) = fixture();
        let mut a = Session::reset(catalog.clone(), inst.clone(), DEFAULT_HORIZON);
        let mut b = Session::reset(catalog, inst, DEFAULT_HORIZON);
        let q = ActionSpec::query(vec!["green".into(), "tea".into()]);
        assert_eq!(a.step(&q).unwrap(), b.step(&q).unwrap());
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn search_button_with_no_query_browses_the_catalog() {
        let (catalog, inst) = fixture();
        let mut session = Session::reset(catalog.clone(), inst, DEFAULT_HORIZON);
        let r = session.step(&render::search_button()).unwrap();
        assert_eq!(session.state().page.kind(), PageKind::Results);
        // First browse page lists the five lowest ids.
        let first = catalog.product(0).title.clone();
        assert!(r.observation.actions.iter().any(|a| a.surface == first));
        let Page::Results { ranked, .. } = &session.state().page else { panic!() };
        assert_eq!(ranked.len(), catalog.len());
    }
}
