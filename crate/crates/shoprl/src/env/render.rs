//! Page rendering: pure functions from page state to observation tokens.

use crate::env::catalog::Catalog;
use crate::env::instruction::Instruction;
use crate::env::{ActionSpec, Observation, Page, SubPage, RESULTS_PER_PAGE};

/// Every literal phrase a page or goal rendering can emit; the vocabulary
/// builder tokenizes these so rendered text never leaves the vocabulary.
pub const TEMPLATE_LITERALS: &[&str] = &[
    "find me a and with price lower than dollars",
    "goal search page type a query or press search",
    "results page of for no results",
    "item price type attributes options selected",
    "description this is",
    "features",
    "reviews rated of",
    "back to search",
    "prev",
    "next",
    "buy now",
    "query",
];

pub fn back_to_search() -> ActionSpec {
    ActionSpec::click(&["back", "to", "search"])
}

pub fn prev_button() -> ActionSpec {
    ActionSpec::click(&["prev"])
}

pub fn next_button() -> ActionSpec {
    ActionSpec::click(&["next"])
}

pub fn buy_now() -> ActionSpec {
    ActionSpec::click(&["buy", "now"])
}

pub fn search_button() -> ActionSpec {
    ActionSpec::click(&["search"])
}

/// The open query slot; its placeholder surface is replaced by the policy's
/// generated query before scoring.
pub fn query_slot() -> ActionSpec {
    ActionSpec {
        kind: crate::env::ActionKind::SearchQuery,
        surface: vec!["query".to_string()],
    }
}

pub fn render(page: &Page, instruction: &Instruction, catalog: &Catalog) -> Observation {
    match page {
        Page::Search => render_search(instruction),
        Page::Results { query, page_index, ranked } => {
            render_results(catalog, query, *page_index, ranked)
        }
        Page::Item { product, selected, .. } => render_item(catalog, *product, selected),
        Page::ItemSub { product, sub, .. } => render_item_sub(catalog, *product, *sub),
    }
}

fn render_search(instruction: &Instruction) -> Observation {
    let mut text: Vec<String> = vec!["goal".into()];
    text.extend(instruction.goal_text.iter().cloned());
    text.extend(["search".to_string(), "page".to_string()]);
    Observation {
        text,
        actions: vec![query_slot(), search_button()],
    }
}

fn render_results(catalog: &Catalog, query: &[String], page_index: usize, ranked: &[u32]) -> Observation {
    let total_pages = ranked.len().div_ceil(RESULTS_PER_PAGE);
    let start = (page_index - 1) * RESULTS_PER_PAGE;
    let slice = &ranked[start.min(ranked.len())..(start + RESULTS_PER_PAGE).min(ranked.len())];

    let mut text: Vec<String> = vec![
        "results".into(),
        "page".into(),
        page_index.to_string(),
        "of".into(),
        total_pages.to_string(),
        "for".into(),
    ];
    text.extend(query.iter().cloned());
    let mut actions = Vec::new();
    if slice.is_empty() {
        text.extend(["no".to_string(), "results".to_string()]);
    }
    for id in slice {
        let p = catalog.product(*id);
        text.extend(p.title.iter().cloned());
        text.push(format!("{}", p.price as u64));
        text.push("dollars".into());
        actions.push(ActionSpec {
            kind: crate::env::ActionKind::Click,
            surface: p.title.clone(),
        });
    }
    if start + RESULTS_PER_PAGE < ranked.len() {
        actions.push(next_button());
    }
    if page_index > 1 {
        actions.push(prev_button());
    }
    actions.push(back_to_search());
    Observation { text, actions }
}

fn render_item(
    catalog: &Catalog,
    product: u32,
    selected: &std::collections::BTreeMap<String, String>,
) -> Observation {
    let p = catalog.product(product);
    let mut text: Vec<String> = vec!["item".into()];
    text.extend(p.title.iter().cloned());
    text.extend(["price".to_string(), format!("{}", p.price as u64), "dollars".to_string()]);
    text.push("type".into());
    text.extend(p.product_type.iter().cloned());
    text.push("attributes".into());
    text.extend(p.attributes.iter().cloned());
    text.push("options".into());
    for (name, values) in &p.options {
        text.push(name.clone());
        text.extend(values.iter().cloned());
    }
    if !selected.is_empty() {
        text.push("selected".into());
        for (name, value) in selected {
            text.push(name.clone());
            text.push(value.clone());
        }
    }

    let mut actions = vec![
        back_to_search(),
        prev_button(),
        ActionSpec::click(&["description"]),
        ActionSpec::click(&["features"]),
        ActionSpec::click(&["reviews"]),
        buy_now(),
    ];
    for values in p.options.values() {
        for v in values {
            actions.push(ActionSpec {
                kind: crate::env::ActionKind::Click,
                surface: vec![v.clone()],
            });
        }
    }
    Observation { text, actions }
}

fn render_item_sub(catalog: &Catalog, product: u32, sub: SubPage) -> Observation {
    let p = catalog.product(product);
    let mut text: Vec<String> = Vec::new();
    match sub {
        SubPage::Description => {
            text.push("description".into());
            text.extend(p.title.iter().cloned());
            text.push("this".into());
            text.extend(p.product_type.iter().cloned());
            text.push("is".into());
            text.extend(p.attributes.iter().cloned());
        }
        SubPage::Features => {
            text.push("features".into());
            text.extend(p.title.iter().cloned());
            text.extend(p.attributes.iter().cloned());
            text.extend(p.options.keys().cloned());
        }
        SubPage::Reviews => {
            text.push("reviews".into());
            text.extend(p.title.iter().cloned());
            text.extend([
                "rated".to_string(),
                format!("{}", 1 + p.id % 5),
                "of".to_string(),
                "5".to_string(),
            ]);
        }
    }
    Observation {
        text,
        actions: vec![prev_button(), back_to_search()],
    }
}
