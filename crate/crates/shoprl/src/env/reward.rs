//! Goal-conditioned purchase reward.

use std::collections::BTreeMap;

use crate::env::catalog::Product;
use crate::env::instruction::Instruction;

/// Type-match factor: the fraction of the instruction's type tokens present
/// in the purchased product's title maps onto a small ladder, so buying a
/// wrong-type product with coincidentally matching attributes earns little.
pub fn type_match_factor(product: &Product, instruction: &Instruction) -> f64 {
    let total = instruction.target_type.len();
    if total == 0 {
        return 0.0;
    }
    let present = instruction
        .target_type
        .iter()
        .filter(|t| product.title.contains(*t))
        .count();
    let f = present as f64 / total as f64;
    if f >= 0.75 {
        1.0
    } else if f >= 0.5 {
        0.5
    } else if f > 0.0 {
        0.1
    } else {
        0.0
    }
}

/// r = r_type * (matched attributes + matched options + price-under-cap) /
/// (required attributes + required options + 1).
pub fn compute_reward(
    product: &Product,
    selected_options: &BTreeMap<String, String>,
    instruction: &Instruction,
) -> f64 {
    let matched_attrs = instruction
        .required_attributes
        .iter()
        .filter(|a| product.attributes.contains(*a))
        .count();
    let matched_opts = instruction
        .required_options
        .iter()
        .filter(|(name, value)| selected_options.get(*name) == Some(value))
        .count();
    let price_ok = usize::from(product.price <= instruction.price_cap);

    let numerator = (matched_attrs + matched_opts + price_ok) as f64;
    let denominator =
        (instruction.required_attributes.len() + instruction.required_options.len() + 1) as f64;
    type_match_factor(product, instruction) * (numerator / denominator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn product(attrs: &[&str], price: f64) -> Product {
        Product {
            id: 0,
            category: "beauty".into(),
            title: vec!["premium".into(), "face".into(), "cream".into(), "pro".into()],
            product_type: vec!["face".into(), "cream".into()],
            attributes: attrs.iter().map(|a| a.to_string()).collect::<BTreeSet<_>>(),
            options: [("color".to_string(), vec!["red".to_string(), "blue".to_string()])]
                .into_iter()
                .collect(),
            price,
        }
    }

    fn instruction(attrs: &[&str], opts: &[(&str, &str)], cap: f64) -> Instruction {
        Instruction {
            id: 0,
            goal_text: vec![],
            required_attributes: attrs.iter().map(|a| a.to_string()).collect(),
            required_options: opts
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            price_cap: cap,
            target_type: vec!["face".into(), "cream".into()],
            source_category: "beauty".into(),
            target_product: 0,
        }
    }

    #[test]
    fn full_match_is_one() {
        let p = product(&["organic", "vegan"], 20.0);
        let inst = instruction(&["organic", "vegan"], &[("color", "red")], 25.0);
        let selected = [("color".to_string(), "red".to_string())].into_iter().collect();
        assert_eq!(compute_reward(&p, &selected, &inst), 1.0);
    }

    #[test]
    fn half_match_worked_example() {
        // Two required attributes with one matched, one required option with
        // none matched, price under cap: (1 + 0 + 1) / (2 + 1 + 1) = 0.5.
        let p = product(&["organic"], 20.0);
        let inst = instruction(&["organic", "vegan"], &[("color", "red")], 25.0);
        let selected = BTreeMap::new();
        assert_eq!(compute_reward(&p, &selected, &inst), 0.5);
    }

    #[test]
    fn zero_numerator_is_zero() {
        let p = product(&["scented"], 90.0);
        let inst = instruction(&["organic"], &[], 25.0);
        assert_eq!(compute_reward(&p, &BTreeMap::new(), &inst), 0.0);
    }

    #[test]
    fn type_factor_ladder() {
        let mut p = product(&["organic"], 20.0);
        let inst = instruction(&["organic"], &[], 25.0);
        assert_eq!(type_match_factor(&p, &inst), 1.0);
        p.title = vec!["premium".into(), "face".into(), "soap".into()];
        assert_eq!(type_match_factor(&p, &inst), 0.5);
        p.title = vec!["premium".into(), "bath".into(), "soap".into()];
        assert_eq!(type_match_factor(&p, &inst), 0.0);
    }

    #[test]
    fn adding_a_matched_attribute_never_decreases_reward() {
        let inst = instruction(&["organic", "vegan", "gentle"], &[("color", "red")], 25.0);
        let selected = BTreeMap::new();
        let mut prev = -1.0;
        for matched in [&[][..], &["organic"][..], &["organic", "vegan"][..], &["organic", "vegan", "gentle"][..]] {
            let r = compute_reward(&product(matched, 20.0), &selected, &inst);
            assert!(r >= prev);
            prev = r;
        }
    }
}
