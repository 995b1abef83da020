//! Synthetic product catalog.
//!
//! Naming pools are versioned constants: regenerating any catalog from the
//! same seed yields the same products, so test fixtures stay stable.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ShopError;
use crate::text::{tokenize, Vocabulary};

pub const CATALOG_TEMPLATE_VERSION: &str = "catalog-v1";

/// Fraction of each category's attributes that must be category-unique.
pub const UNIQUE_ATTRIBUTE_FLOOR: f64 = 0.85;

pub(crate) struct CategoryPool {
    pub name: &'static str,
    pub types: &'static [&'static str],
    pub attributes: &'static [&'static str],
}

pub(crate) const CATEGORY_POOLS: &[CategoryPool] = &[
    CategoryPool {
        name: "beauty",
        types: &["face cream", "hand cream", "hair serum", "skin serum", "bath soap"],
        attributes: &[
            "organic", "scented", "hypoallergenic", "vegan", "moisturizing", "gentle",
            "soothing", "herbal", "nourishing", "brightening", "exfoliating", "silky",
            "refreshing", "floral", "creamy", "unscented",
        ],
    },
    CategoryPool {
        name: "garden",
        types: &["garden hose", "garden rake", "plant pot", "herb pot", "watering can"],
        attributes: &[
            "weatherproof", "foldable", "rustproof", "ergonomic", "expandable", "sturdy",
            "galvanized", "decorative", "selfwatering", "sharpened", "telescopic", "drainable",
            "coated", "reinforced", "stackable", "balanced",
        ],
    },
    CategoryPool {
        name: "grocery",
        types: &["olive oil", "sesame oil", "green tea", "mint tea", "trail mix"],
        attributes: &[
            "glutenfree", "sugarfree", "roasted", "unsalted", "caffeinated", "wholegrain",
            "nutty", "bittersweet", "coldpressed", "infused", "crunchy", "fruity",
            "savory", "smoky", "zesty", "mellow",
        ],
    },
    CategoryPool {
        name: "electronics",
        types: &["wireless headphones", "wired headphones", "usb charger", "solar charger", "gaming mouse"],
        attributes: &[
            "rechargeable", "waterproof", "noisecancelling", "programmable", "backlit",
            "adjustable", "magnetic", "fastcharging", "foldaway", "curved", "silent",
            "calibrated", "ultralight", "shielded", "dimmable", "bluetooth",
        ],
    },
    CategoryPool {
        name: "fashion",
        types: &["denim jacket", "wool jacket", "cotton shirt", "linen shirt", "leather belt"],
        attributes: &[
            "slimfit", "breathable", "stretchy", "insulated", "tailored", "casual",
            "vintage", "washed", "embroidered", "quilted", "reversible", "cropped",
            "relaxed", "patterned", "buttoned", "layered",
        ],
    },
    CategoryPool {
        name: "sports",
        types: &["yoga mat", "gym mat", "water flask", "steel flask", "jump rope"],
        attributes: &[
            "nonslip", "cushioned", "weighted", "aerodynamic", "gripped", "ventilated",
            "shockproof", "laced", "padded", "springy", "contoured", "thermal",
            "stitched", "flexible", "matte", "ribbed",
        ],
    },
];

/// Attributes that may appear in any category.
pub(crate) const SHARED_ATTRIBUTES: &[&str] = &["durable", "portable"];

const ADJECTIVES: &[&str] = &["premium", "classic", "deluxe", "compact", "modern", "basic", "sleek", "rustic"];
const VARIANTS: &[&str] = &["pro", "max", "mini", "plus", "lite", "prime", "ultra", "neo", "go", "air"];

/// Option names with disjoint value pools, so a value click is unambiguous.
pub(crate) const OPTION_POOLS: &[(&str, &[&str])] = &[
    ("color", &["red", "blue", "green", "black", "white", "silver"]),
    ("size", &["small", "medium", "large", "xl"]),
    ("material", &["cotton", "steel", "wood", "plastic", "glass"]),
    ("pack", &["single", "double", "triple", "quad"]),
];

pub const MIN_PRICE: u32 = 15;
pub const MAX_PRICE: u32 = 95;
pub const PRICE_STEP: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: u32,
    pub category: String,
    pub title: Vec<String>,
    pub product_type: Vec<String>,
    pub attributes: BTreeSet<String>,
    pub options: BTreeMap<String, Vec<String>>,
    pub price: f64,
}

impl Product {
    pub fn title_text(&self) -> String {
        self.title.join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub version: String,
    pub products: Vec<Product>,
}

impl Catalog {
    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn product(&self, id: u32) -> &Product {
        &self.products[id as usize]
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self
            .products
            .iter()
            .map(|p| p.category.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        cats.sort();
        cats
    }

    /// Per-category fraction of attributes that occur in no other category.
    pub fn unique_attribute_fractions(&self) -> BTreeMap<String, f64> {
        let mut used: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for p in &self.products {
            used.entry(p.category.as_str())
                .or_default()
                .extend(p.attributes.iter().map(|a| a.as_str()));
        }
        let mut out = BTreeMap::new();
        for (cat, attrs) in &used {
            let unique = attrs
                .iter()
                .filter(|a| {
                    used.iter().all(|(other, set)| other == cat || !set.contains(**a))
                })
                .count();
            out.insert(cat.to_string(), unique as f64 / attrs.len() as f64);
        }
        out
    }

    /// Every token a rendered page or goal can contain.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut raw: Vec<String> = Vec::new();
        for p in &self.products {
            raw.extend(p.title.iter().cloned());
            raw.extend(p.product_type.iter().cloned());
            raw.extend(p.attributes.iter().cloned());
            for (name, values) in &p.options {
                raw.push(name.clone());
                raw.extend(values.iter().cloned());
            }
            raw.push(p.category.clone());
        }
        for phrase in crate::env::render::TEMPLATE_LITERALS {
            raw.extend(tokenize(phrase));
        }
        // Price and cap tokens (multiples of the price step, with cap slack),
        // page indices, and the small integers used by review blurbs.
        let max_cap = MAX_PRICE + crate::env::instruction::MAX_CAP_SLACK;
        let mut v = PRICE_STEP;
        while v <= max_cap {
            raw.push(v.to_string());
            v += PRICE_STEP;
        }
        let pages = self.len().div_ceil(crate::env::RESULTS_PER_PAGE) + 1;
        for i in 0..=pages.max(5) {
            raw.push(i.to_string());
        }
        Vocabulary::build(raw)
    }

    /// One JSON record per line.
    pub fn save(&self, path: &Path) -> Result<(), ShopError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{}", serde_json::to_string(&self.version)?)?;
        for p in &self.products {
            writeln!(f, "{}", serde_json::to_string(p)?)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ShopError> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let version: String = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(ShopError::Format("empty catalog file".into())),
        };
        let mut products = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            products.push(serde_json::from_str(&line)?);
        }
        Ok(Catalog { version, products })
    }
}

/// Deterministic synthetic catalog. Products are assigned to categories
/// round-robin; titles are unique within the catalog while the naming pools
/// allow it.
pub fn generate_catalog(seed: u64, n_products: usize, n_categories: usize) -> Result<Catalog, ShopError> {
    if n_products == 0 {
        return Err(ShopError::Contract("n_products must be positive".into()));
    }
    if n_categories == 0 || n_categories > n_products {
        return Err(ShopError::Contract(
            "need 1 <= n_categories <= n_products".into(),
        ));
    }
    if n_categories > CATEGORY_POOLS.len() {
        return Err(ShopError::Contract(format!(
            "at most {} categories are defined",
            CATEGORY_POOLS.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used_titles: BTreeSet<Vec<String>> = BTreeSet::new();
    let mut products = Vec::with_capacity(n_products);

    for id in 0..n_products {
        let pool = &CATEGORY_POOLS[id % n_categories];
        let type_tokens: Vec<String> = tokenize(pool.types[rng.gen_range(0..pool.types.len())]);

        let mut title = Vec::new();
        for _ in 0..64 {
            let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
            let var = VARIANTS[rng.gen_range(0..VARIANTS.len())];
            let mut t = vec![adj.to_string()];
            t.extend(type_tokens.iter().cloned());
            t.push(var.to_string());
            if !used_titles.contains(&t) {
                title = t;
                break;
            }
        }
        if title.is_empty() {
            // Pools exhausted; accept a duplicate title (ids still disambiguate).
            let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
            let var = VARIANTS[rng.gen_range(0..VARIANTS.len())];
            title = vec![adj.to_string()];
            title.extend(type_tokens.iter().cloned());
            title.push(var.to_string());
        }
        used_titles.insert(title.clone());

        let n_attrs = rng.gen_range(3..=5);
        let mut attrs: BTreeSet<String> = pool
            .attributes
            .choose_multiple(&mut rng, n_attrs)
            .map(|a| a.to_string())
            .collect();
        if rng.gen_bool(0.25) {
            attrs.insert(SHARED_ATTRIBUTES[rng.gen_range(0..SHARED_ATTRIBUTES.len())].to_string());
        }

        let n_options = rng.gen_range(1..=3);
        let mut options = BTreeMap::new();
        for (name, values) in OPTION_POOLS.choose_multiple(&mut rng, n_options) {
            let n_values = rng.gen_range(2..=4.min(values.len()));
            let mut chosen: Vec<String> = values
                .choose_multiple(&mut rng, n_values)
                .map(|v| v.to_string())
                .collect();
            chosen.sort();
            options.insert(name.to_string(), chosen);
        }

        let steps = (MAX_PRICE - MIN_PRICE) / PRICE_STEP;
        let price = MIN_PRICE + PRICE_STEP * rng.gen_range(0..=steps);

        products.push(Product {
            id: id as u32,
            category: pool.name.to_string(),
            title,
            product_type: type_tokens,
            attributes: attrs,
            options,
            price: price as f64,
        });
    }

    let mut catalog = Catalog {
        version: CATALOG_TEMPLATE_VERSION.to_string(),
        products,
    };
    enforce_unique_attribute_floor(&mut catalog);
    Ok(catalog)
}

/// Swap shared-pool attributes for private ones until every category clears
/// the uniqueness floor. Private pools are disjoint, so only shared
/// attributes can be non-unique.
fn enforce_unique_attribute_floor(catalog: &mut Catalog) {
    loop {
        let fractions = catalog.unique_attribute_fractions();
        let Some((worst_cat, _)) = fractions
            .iter()
            .filter(|(_, f)| **f < UNIQUE_ATTRIBUTE_FLOOR)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        else {
            return;
        };
        let worst_cat = worst_cat.clone();
        let pool = CATEGORY_POOLS
            .iter()
            .find(|p| p.name == worst_cat)
            .expect("category pool");
        let mut fixed = false;
        for p in catalog.products.iter_mut().filter(|p| p.category == worst_cat) {
            let shared = p
                .attributes
                .iter()
                .find(|a| SHARED_ATTRIBUTES.contains(&a.as_str()))
                .cloned();
            if let Some(attr) = shared {
                p.attributes.remove(&attr);
                if let Some(replacement) = pool
                    .attributes
                    .iter()
                    .find(|a| !p.attributes.contains(**a))
                {
                    p.attributes.insert(replacement.to_string());
                }
                fixed = true;
                break;
            }
        }
        if !fixed {
            return;
        }
    }
}
