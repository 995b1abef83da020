//! Token-overlap search ranking behind the results page.

use crate::env::catalog::{Catalog, Product};

/// Query-token overlap score: one point per query token found in the title,
/// two more per query token found in the product type. Query tokens count
/// with multiplicity.
pub fn product_score(product: &Product, query: &[String]) -> u32 {
    let mut score = 0;
    for tok in query {
        if product.title.contains(tok) {
            score += 1;
        }
        if product.product_type.contains(tok) {
            score += 2;
        }
    }
    score
}

/// All product ids ordered by descending score, ties by ascending id.
/// An empty query yields no results.
pub fn rank_products(catalog: &Catalog, query: &[String]) -> Vec<u32> {
    if query.is_empty() {
        return Vec::new();
    }
    let mut scored: Vec<(u32, u32)> = catalog
        .products
        .iter()
        .map(|p| (product_score(p, query), p.id))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::catalog::generate_catalog;

    fn tokens(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn exact_title_ranks_first_by_brute_force() {
        let catalog = generate_catalog(11, 50, 5).unwrap();
        for p in catalog.products.iter().step_by(7) {
            let ranked = rank_products(&catalog, &p.title);
            let best_score = catalog
                .products
                .iter()
                .map(|q| product_score(q, &p.title))
                .max()
                .unwrap();
            // Everything ranked above the queried product must genuinely
            // out-score or tie-with-lower-id it.
            let own_score = product_score(p, &p.title);
            assert_eq!(own_score, best_score);
            let pos = ranked.iter().position(|id| *id == p.id).unwrap();
            for id in &ranked[..pos] {
                let other = catalog.product(*id);
                let s = product_score(other, &p.title);
                assert!(s > own_score || (s == own_score && other.id < p.id));
            }
        }
    }

    #[test]
    fn identical_titles_break_ties_by_id() {
        let mut catalog = generate_catalog(1, 10, 2).unwrap();
        let title = tokens("twin olive oil max");
        catalog.products[7].title = title.clone();
        catalog.products[7].product_type = tokens("olive oil");
        catalog.products[2].title = title.clone();
        catalog.products[2].product_type = tokens("olive oil");
        let ranked = rank_products(&catalog, &title);
        let pos2 = ranked.iter().position(|id| *id == 2).unwrap();
        let pos7 = ranked.iter().position(|id| *id == 7).unwrap();
        assert!(pos2 < pos7);
    }

    #[test]
    fn unknown_tokens_rank_by_ascending_id() {
        let catalog = generate_catalog(1, 12, 3).unwrap();
        let ranked = rank_products(&catalog, &tokens("zzz qqq"));
        let ids: Vec<u32> = (0..12).collect();
        assert_eq!(ranked, ids);
    }

    #[test]
    fn empty_query_yields_empty_ranking() {
        let catalog = generate_catalog(1, 12, 3).unwrap();
        assert!(rank_products(&catalog, &[]).is_empty());
    }
}
