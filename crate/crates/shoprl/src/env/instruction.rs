//! Goal sampling and rendering.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::catalog::{Catalog, PRICE_STEP};
use crate::error::ShopError;

pub const GOAL_TEMPLATE_VERSION: &str = "goal-v1";

/// Largest amount added to the product price when forming a satisfiable cap.
pub const MAX_CAP_SLACK: u32 = 30;

const SATISFIABLE_CAP_PROB: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    /// Unique across sampler namespaces; used for train/eval isolation checks.
    pub id: u64,
    pub goal_text: Vec<String>,
    pub required_attributes: Vec<String>,
    pub required_options: BTreeMap<String, String>,
    pub price_cap: f64,
    pub target_type: Vec<String>,
    pub source_category: String,
    pub target_product: u32,
}

/// Draws instructions with ids namespaced by purpose, so a training stream
/// and an evaluation set can never collide.
pub struct InstructionSampler {
    rng: ChaCha8Rng,
    namespace: u32,
    counter: u32,
}

impl InstructionSampler {
    pub fn new(namespace: u32, seed: u64) -> Self {
        InstructionSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            namespace,
            counter: 0,
        }
    }

    pub fn sample(&mut self, catalog: &Catalog) -> Instruction {
        let inst = sample_instruction(catalog, &mut self.rng, ((self.namespace as u64) << 32) | self.counter as u64);
        self.counter += 1;
        inst
    }

    /// Restrict target products to one category.
    pub fn sample_in_category(&mut self, catalog: &Catalog, category: &str) -> Instruction {
        loop {
            let inst = self.sample(catalog);
            if inst.source_category == category {
                return inst;
            }
        }
    }
}

/// Pick a target product and derive a goal from it. The cap sits at or above
/// the target price with probability 0.9, so most goals admit full reward.
pub fn sample_instruction(catalog: &Catalog, rng: &mut ChaCha8Rng, id: u64) -> Instruction {
    assert!(!catalog.is_empty(), "catalog must be non-empty");
    let target = &catalog.products[rng.gen_range(0..catalog.len())];

    let n_req = rng.gen_range(1..=3.min(target.attributes.len()));
    let mut required_attributes: Vec<String> = target
        .attributes
        .iter()
        .cloned()
        .collect::<Vec<_>>()
        .choose_multiple(rng, n_req)
        .cloned()
        .collect();
    required_attributes.sort();

    let mut required_options = BTreeMap::new();
    for (name, values) in &target.options {
        if rng.gen_bool(0.5) {
            let v = values[rng.gen_range(0..values.len())].clone();
            required_options.insert(name.clone(), v);
        }
    }

    let price = target.price as u32;
    let price_cap = if rng.gen_bool(SATISFIABLE_CAP_PROB) {
        let slack_steps = MAX_CAP_SLACK / PRICE_STEP;
        price + PRICE_STEP * rng.gen_range(0..=slack_steps)
    } else {
        // Strictly below the price; prices start high enough that this
        // remains positive.
        price - PRICE_STEP * rng.gen_range(1..=2.min(price / PRICE_STEP - 1).max(1))
    };

    let mut inst = Instruction {
        id,
        goal_text: Vec::new(),
        required_attributes,
        required_options,
        price_cap: price_cap as f64,
        target_type: target.product_type.clone(),
        source_category: target.category.clone(),
        target_product: target.id,
    };
    inst.goal_text = render_goal_text(&inst);
    inst
}

/// Fixed template: the goal text is a pure function of the other fields.
pub fn render_goal_text(inst: &Instruction) -> Vec<String> {
    let mut out: Vec<String> = vec!["find".into(), "me".into(), "a".into()];
    for (i, attr) in inst.required_attributes.iter().enumerate() {
        if i > 0 {
            out.push("and".into());
        }
        out.push(attr.clone());
    }
    out.extend(inst.target_type.iter().cloned());
    for (name, value) in &inst.required_options {
        out.push("with".into());
        out.push(name.clone());
        out.push(value.clone());
    }
    out.extend([
        "price".to_string(),
        "lower".to_string(),
        "than".to_string(),
        format!("{}", inst.price_cap as u64),
        "dollars".to_string(),
    ]);
    out
}

pub fn save_instructions(instructions: &[Instruction], path: &Path) -> Result<(), ShopError> {
    let mut f = std::fs::File::create(path)?;
    for inst in instructions {
        writeln!(f, "{}", serde_json::to_string(inst)?)?;
    }
    Ok(())
}

pub fn load_instructions(path: &Path) -> Result<Vec<Instruction>, ShopError> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::catalog::generate_catalog;

    #[test]
    fn sampling_is_deterministic() {
        let catalog = generate_catalog(1, 50, 5).unwrap();
        let mut a = InstructionSampler::new(7, 123);
        let mut b = InstructionSampler::new(7, 123);
        for _ in 0..20 {
            assert_eq!(a.sample(&catalog), b.sample(&catalog));
        }
    }

    #[test]
    fn required_attributes_come_from_target() {
        let catalog = generate_catalog(1, 50, 5).unwrap();
        let mut s = InstructionSampler::new(0, 9);
        for _ in 0..200 {
            let inst = s.sample(&catalog);
            let target = catalog.product(inst.target_product);
            assert!(!inst.required_attributes.is_empty());
            assert!(inst.required_attributes.len() <= 3);
            for a in &inst.required_attributes {
                assert!(target.attributes.contains(a));
            }
            for (name, value) in &inst.required_options {
                assert!(target.options[name].contains(value));
            }
            assert!(inst.price_cap > 0.0);
            assert_eq!(inst.goal_text, render_goal_text(&inst));
        }
    }

    #[test]
    fn cap_satisfiable_rate_is_near_nine_tenths() {
        let catalog = generate_catalog(1, 50, 5).unwrap();
        let mut s = InstructionSampler::new(0, 4242);
        let n = 1000;
        let mut satisfiable = 0;
        for _ in 0..n {
            let inst = s.sample(&catalog);
            if inst.price_cap >= catalog.product(inst.target_product).price {
                satisfiable += 1;
            }
        }
        let frac = satisfiable as f64 / n as f64;
        assert!((0.85..=0.95).contains(&frac), "satisfiable fraction {frac}");
    }

    #[test]
    fn namespaces_keep_ids_disjoint() {
        let catalog = generate_catalog(1, 20, 2).unwrap();
        let mut train = InstructionSampler::new(1, 5);
        let mut eval = InstructionSampler::new(2, 5);
        let train_ids: Vec<u64> = (0..50).map(|_| train.sample(&catalog).id).collect();
        let eval_ids: Vec<u64> = (0..50).map(|_| eval.sample(&catalog).id).collect();
        for id in &eval_ids {
            assert!(!train_ids.contains(id));
        }
    }

    #[test]
    fn instructions_roundtrip_through_file() {
        let catalog = generate_catalog(1, 20, 2).unwrap();
        let mut s = InstructionSampler::new(3, 77);
        let instructions: Vec<Instruction> = (0..10).map(|_| s.sample(&catalog)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("goals.jsonl");
        save_instructions(&instructions, &path).unwrap();
        assert_eq!(load_instructions(&path).unwrap(), instructions);
    }
}
