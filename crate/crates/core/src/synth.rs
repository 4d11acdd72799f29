//! Synthetic grocery corpus: templated catalog, an engagement log with controllable
//! cross-category noise, and rater rows whose agreed labels are the ground truth.
//!
//! Categories are hand-written; a few are planted in pairs that share a surface token
//! ("milk" in plain milk and milk chocolate, "wine" in red and white wine) so keyword
//! matching alone confuses them. Each category also has query-only spellings (synonyms and
//! misspellings that never occur in product text); those show up only as rare tail queries.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    normalize_query, write_catalog, write_engagement, write_rater_rows, EngagementRecord, Product,
    RaterRow, RelevanceLevel,
};
use crate::encoder::words;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub department: String,
    /// Leaf category name.
    pub name: String,
    /// Core product nouns; also the heads of generated queries.
    pub heads: Vec<String>,
    pub modifiers: Vec<String>,
    pub brands: Vec<String>,
    /// Query-only spellings that never appear in product text.
    pub alternates: Vec<String>,
    pub products: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryTier {
    Head,
    Torso,
    Tail,
}

/// A query pattern over `{head}`, `{modifier}`, `{brand}` and `{alt}` slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTemplate {
    pub pattern: String,
    pub tier: QueryTier,
    pub weight: f64,
}

/// Searches per query (log-uniform within the tier's range) and converted products per query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserCountDistribution {
    pub head_users: (u32, u32),
    pub torso_users: (u32, u32),
    pub tail_users: (u32, u32),
    pub head_products: (usize, usize),
    pub torso_products: (usize, usize),
    pub tail_products: (usize, usize),
}

impl Default for UserCountDistribution {
    fn default() -> Self {
        Self {
            head_users: (300, 2000),
            torso_users: (10, 150),
            tail_users: (3, 8),
            head_products: (25, 50),
            torso_products: (3, 12),
            tail_products: (1, 3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub categories: Vec<CategorySpec>,
    /// Leaf-category pairs that share at least one product-text token.
    pub trap_pairs: Vec<(String, String)>,
    pub templates: Vec<QueryTemplate>,
    pub queries_per_category: usize,
    /// Probability that a converted pair is cross-category.
    pub noise_rate: f64,
    /// Share of noise pairs drawn from the trap partner, when one exists.
    pub trap_noise_share: f64,
    pub users: UserCountDistribution,
    /// Per-impression conversion rate ranges for same-category and noise pairs.
    pub relevant_conversion: (f64, f64),
    pub noise_conversion: (f64, f64),
    pub retailers: Vec<String>,
    pub carry_probability: f64,
    pub unavailable_rate: f64,
    pub attributes: Vec<String>,
    pub sizes: Vec<String>,
    /// Queries given human labels.
    pub label_queries: usize,
    /// Random cross-category products labeled per query, besides trap-partner products.
    pub label_negatives: usize,
    pub raters: usize,
    pub rater_accuracy: f64,
}

const CATEGORY_TABLE: &[(&str, &str, &str, &str, &str)] = &[
    // department, leaf, heads, modifiers, alternates
    (
        "Dairy",
        "Milk",
        "milk|milk gallon",
        "whole|skim|reduced fat|lowfat|organic|lactose free|vitamin d|ultra pasteurized",
        "mlik|millk",
    ),
    (
        "Dairy",
        "Butter",
        "butter|butter sticks",
        "salted|unsalted|sweet cream|organic|whipped|european style",
        "buttr|beurre",
    ),
    (
        "Dairy",
        "Yogurt",
        "yogurt|yogurt cups",
        "greek|vanilla|strawberry|plain|nonfat|blueberry|honey",
        "yoghurt|yogourt",
    ),
    (
        "Dairy",
        "Cheddar",
        "cheddar cheese|cheddar",
        "sharp|mild|extra sharp|shredded|sliced|aged|white",
        "chedder|chedar",
    ),
    (
        "Dairy",
        "Eggs",
        "eggs|egg carton",
        "large|brown|cage free|pasture raised|organic|jumbo|free range",
        "eggz|hen eggs",
    ),
    (
        "Dairy",
        "Cream Cheese",
        "cream cheese|cream cheese spread",
        "whipped|plain|chive|strawberry|light|garden vegetable",
        "schmear|creamcheese",
    ),
    (
        "Frozen",
        "Ice Cream",
        "ice cream|ice cream pint",
        "vanilla bean|mint chip|cookie dough|strawberry|salted caramel|pistachio|rocky road",
        "icecream|gelato",
    ),
    (
        "Frozen",
        "Frozen Pizza",
        "frozen pizza|pizza",
        "pepperoni|margherita|supreme|four cheese|thin crust|rising crust",
        "za|pizzza",
    ),
    (
        "Frozen",
        "Popsicles",
        "popsicles|ice pops",
        "fruit|cherry|grape|sugar free|lime|tropical",
        "ice lollies|freezer pops",
    ),
    (
        "Produce",
        "Bananas",
        "bananas|banana bunch",
        "organic|ripe|green|baby|fair trade",
        "bananna|banannas",
    ),
    (
        "Produce",
        "Apples",
        "apples|apple bag",
        "honeycrisp|gala|fuji|granny smith|pink lady|organic",
        "appels|aples",
    ),
    (
        "Produce",
        "Oranges",
        "oranges|navel orange|orange bag",
        "navel|cara cara|blood|mandarin|organic|valencia",
        "ornages|oranjes",
    ),
    (
        "Produce",
        "Eggplant",
        "eggplant",
        "globe|japanese|italian|graffiti|organic",
        "aubergine|brinjal",
    ),
    (
        "Produce",
        "Zucchini",
        "zucchini|zucchini squash",
        "green|yellow|organic|baby",
        "courgette|zuchini",
    ),
    (
        "Produce",
        "Cilantro",
        "cilantro|cilantro bunch",
        "fresh|organic|bunched",
        "coriander|chinese parsley",
    ),
    (
        "Produce",
        "Arugula",
        "arugula|baby arugula",
        "organic|wild|baby|clamshell",
        "rocket|roquette",
    ),
    (
        "Produce",
        "Bell Peppers",
        "bell peppers|bell pepper",
        "red|green|yellow|mini|organic|sweet",
        "capsicum|capsicums",
    ),
    (
        "Produce",
        "Scallions",
        "scallions|green onions",
        "organic|fresh|bunched",
        "spring onion|salad onions",
    ),
    (
        "Meat",
        "Chicken Breast",
        "chicken breast|chicken breasts",
        "boneless|skinless|organic|air chilled|thin sliced|family pack",
        "chiken breast|chicken fillets",
    ),
    (
        "Meat",
        "Ground Beef",
        "ground beef",
        "lean|80 20|90 10|grass fed|organic|angus",
        "mince|minced beef",
    ),
    (
        "Seafood",
        "Shrimp",
        "shrimp|jumbo shrimp",
        "raw|cooked|peeled|deveined|wild caught|tail on",
        "prawns|prawn",
    ),
    (
        "Pantry",
        "Peanut Butter",
        "peanut butter",
        "creamy|crunchy|natural|organic|honey roasted|no stir",
        "pb|penut butter",
    ),
    (
        "Pantry",
        "Chicken Broth",
        "chicken broth|chicken stock",
        "low sodium|organic|bone|free range",
        "chiken broth|bouillon",
    ),
    (
        "Pantry",
        "Pasta",
        "pasta|spaghetti|penne",
        "whole wheat|gluten free|organic|thin|bronze cut",
        "noodles|pastaa",
    ),
    (
        "Pantry",
        "Rice",
        "rice|jasmine rice|basmati rice",
        "long grain|brown|white|organic|sushi",
        "arroz|ryce",
    ),
    (
        "Pantry",
        "Garbanzo Beans",
        "garbanzo beans|canned garbanzo",
        "organic|low sodium|no salt added",
        "chickpeas|chick peas",
    ),
    (
        "Pantry",
        "Jam",
        "jam|fruit spread",
        "strawberry|grape|raspberry|apricot|seedless|low sugar",
        "preserves|jelly",
    ),
    (
        "Pantry",
        "Cereal",
        "cereal|breakfast cereal",
        "honey|frosted|whole grain|oat|bran|cinnamon",
        "cerial|cereals",
    ),
    (
        "Snacks",
        "Chocolate",
        "milk chocolate|chocolate bar|milk chocolate bar",
        "almond|sea salt|caramel|hazelnut|organic|toffee",
        "chocolat|choclate",
    ),
    (
        "Snacks",
        "Chips",
        "potato chips|chips",
        "sea salt|barbecue|ranch|kettle cooked|salt and vinegar|jalapeno",
        "crisps|potato crisps",
    ),
    (
        "Snacks",
        "Cookies",
        "cookies|cookie pack",
        "oatmeal raisin|snickerdoodle|sugar|shortbread|ginger|lemon",
        "biscuits|bikkies",
    ),
    (
        "Snacks",
        "Candy",
        "candy|gummy bears|sour candy",
        "fruity|sour|sugar free|assorted|chewy",
        "sweets|lollies",
    ),
    (
        "Snacks",
        "Popcorn",
        "popcorn|microwave popcorn",
        "lightly salted|kettle|movie theater|caramel|sea salt",
        "pop corn|popcorm",
    ),
    (
        "Beverages",
        "Orange Juice",
        "orange juice",
        "pulp free|no pulp|calcium|organic|fresh squeezed|with pulp",
        "oj|orange jus",
    ),
    (
        "Beverages",
        "Apple Juice",
        "apple juice",
        "organic|unfiltered|no sugar added|sparkling|cloudy",
        "apple jus|aj",
    ),
    (
        "Beverages",
        "Soda",
        "soda|cola|soda cans",
        "diet|zero sugar|cherry|lemon lime|caffeine free|ginger",
        "pop|fizzy drink",
    ),
    (
        "Beverages",
        "Coffee",
        "coffee|ground coffee|coffee beans",
        "dark roast|medium roast|decaf|espresso|french roast|colombian",
        "joe|cofee",
    ),
    (
        "Beverages",
        "Coffee Creamer",
        "coffee creamer|creamer",
        "french vanilla|hazelnut|oat|sweet cream|sugar free|caramel",
        "whitener|lightener",
    ),
    (
        "Wine",
        "Red Wine",
        "red wine|cabernet sauvignon|pinot noir",
        "dry|california|reserve|organic|bold",
        "vino tinto|cab",
    ),
    (
        "Wine",
        "White Wine",
        "white wine|chardonnay|sauvignon blanc",
        "dry|crisp|california|reserve|sweet",
        "vino blanco|chard",
    ),
    (
        "Household",
        "Paper Towels",
        "paper towels|paper towel rolls",
        "select a size|double roll|mega roll|recycled",
        "serviettes|napkins",
    ),
    (
        "Household",
        "Trash Bags",
        "trash bags|garbage bags",
        "tall kitchen|drawstring|heavy duty|scented|compostable",
        "bin liners|bin bags",
    ),
    (
        "Baby",
        "Diapers",
        "diapers|baby diapers",
        "size 1|size 2|newborn|overnight|sensitive",
        "nappies|nappys",
    ),
];

const TRAP_TABLE: &[(&str, &str)] = &[
    ("Milk", "Chocolate"),
    ("Butter", "Peanut Butter"),
    ("Oranges", "Orange Juice"),
    ("Apples", "Apple Juice"),
    ("Chicken Breast", "Chicken Broth"),
    ("Red Wine", "White Wine"),
    ("Coffee", "Coffee Creamer"),
    ("Cream Cheese", "Ice Cream"),
];

const BRAND_STEMS: &[&str] = &[
    "North", "Blue", "Sun", "Harbor", "Green", "Oak", "River", "Maple", "Golden", "Pine", "Silver",
    "Stone", "Willow", "Heron", "Red", "Cedar", "Meadow", "Bright", "Clear", "Wild",
];
const BRAND_SUFFIXES: &[&str] = &[
    "field", "barn", "vale", "bay", "acre", "hollow", "crest", "ridge", "creek", "gate", "farm",
    "mill",
];

fn split(s: &str) -> Vec<String> {
    s.split('|').map(str::to_string).collect()
}

impl SyntheticCorpusSpec {
    /// The built-in grocery corpus with roughly `products` products and `queries` queries.
    pub fn grocery(products: usize, queries: usize) -> Self {
        let n = CATEGORY_TABLE.len();
        let categories = CATEGORY_TABLE
            .iter()
            .enumerate()
            .map(|(i, (dept, leaf, heads, modifiers, alts))| {
                // three brands per category, deterministic but spread over the name space
                let brands = (0..3)
                    .map(|j| {
                        let s = BRAND_STEMS[(i * 7 + j * 3) % BRAND_STEMS.len()];
                        let t = BRAND_SUFFIXES[(i * 5 + j * 7 + 1) % BRAND_SUFFIXES.len()];
                        format!("{s}{t}")
                    })
                    .collect();
                CategorySpec {
                    department: dept.to_string(),
                    name: leaf.to_string(),
                    heads: split(heads),
                    modifiers: split(modifiers),
                    brands,
                    alternates: split(alts),
                    products: products / n + usize::from(i < products % n),
                }
            })
            .collect();
        let t = |pattern: &str, tier, weight| QueryTemplate {
            pattern: pattern.into(),
            tier,
            weight,
        };
        Self {
            categories,
            trap_pairs: TRAP_TABLE
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
            templates: vec![
                t("{head}", QueryTier::Head, 1.0),
                t("{modifier} {head}", QueryTier::Torso, 4.0),
                t("{brand} {head}", QueryTier::Torso, 2.0),
                t("{brand} {modifier} {head}", QueryTier::Tail, 2.0),
                t("{modifier} {modifier} {head}", QueryTier::Tail, 2.0),
                t("{alt}", QueryTier::Tail, 1.0),
                t("{modifier} {alt}", QueryTier::Tail, 1.5),
            ],
            queries_per_category: queries.div_ceil(n),
            noise_rate: 0.15,
            trap_noise_share: 0.5,
            users: UserCountDistribution::default(),
            relevant_conversion: (0.3, 0.9),
            noise_conversion: (0.05, 0.3),
            retailers: vec!["store-a".into(), "store-b".into(), "store-c".into()],
            carry_probability: 0.7,
            unavailable_rate: 0.05,
            attributes: split("organic|kosher|gluten free|vegan|non gmo|low sodium|sugar free"),
            sizes: split("8 oz|12 oz|16 oz|32 oz|1 lb|2 lb|1 gal|half gal|6 ct|12 ct|24 ct"),
            label_queries: 200,
            label_negatives: 20,
            raters: 3,
            rater_accuracy: 0.9,
        }
    }

    pub fn with_noise_rate(mut self, noise_rate: f64) -> Self {
        self.noise_rate = noise_rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise_rate must lie in [0, 0.5), got {}",
                self.noise_rate
            )));
        }
        if self.categories.len() < 2 {
            return Err(Error::Config("at least two categories are required".into()));
        }
        let mut names = HashSet::new();
        for c in &self.categories {
            if !names.insert(c.name.as_str()) {
                return Err(Error::DuplicateId(c.name.clone()));
            }
            if c.heads.is_empty() || c.brands.is_empty() || c.products == 0 {
                return Err(Error::Config(format!(
                    "category `{}` needs heads, brands and products",
                    c.name
                )));
            }
        }
        for (a, b) in &self.trap_pairs {
            let (ca, cb) = (self.category(a)?, self.category(b)?);
            let tokens = |c: &CategorySpec| -> BTreeSet<String> {
                c.heads
                    .iter()
                    .flat_map(|h| words(h).collect::<Vec<_>>())
                    .collect()
            };
            if tokens(ca).is_disjoint(&tokens(cb)) {
                return Err(Error::Config(format!(
                    "trap pair `{a}`/`{b}` shares no head token"
                )));
            }
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !(t.weight > 0.0)) {
            return Err(Error::Config(
                "query templates need positive weights".into(),
            ));
        }
        if self.retailers.is_empty() {
            return Err(Error::Config("at least one retailer is required".into()));
        }
        if self.raters == 0 || !(0.0..=1.0).contains(&self.rater_accuracy) {
            return Err(Error::Config(
                "raters must be positive and rater_accuracy in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn category(&self, name: &str) -> Result<&CategorySpec> {
        self.categories
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Config(format!("unknown category `{name}`")))
    }

    /// Trap partner of a leaf category, if it has one.
    pub fn trap_partner(&self, name: &str) -> Option<&str> {
        self.trap_pairs.iter().find_map(|(a, b)| {
            if a == name {
                Some(b.as_str())
            } else if b == name {
                Some(a.as_str())
            } else {
                None
            }
        })
    }
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self::grocery(5000, 2000)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuery {
    pub query: String,
    pub category: String,
    pub tier: QueryTier,
    pub frequency: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub catalog: Vec<Product>,
    pub engagement: Vec<EngagementRecord>,
    pub rater_rows: Vec<RaterRow>,
    pub queries: Vec<GeneratedQuery>,
}

impl SyntheticCorpus {
    pub fn category_of(&self, product_id: &str) -> Option<&str> {
        self.catalog
            .iter()
            .find(|p| p.id == product_id)
            .map(|p| p.leaf_category())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (u32, u32)) -> u32 {
    let (lo, hi) = (f64::from(lo.max(1)), f64::from(hi.max(lo.max(1))));
    (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln()))
        .exp()
        .round() as u32
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [String]) -> Option<&'a str> {
    xs.choose(rng).map(String::as_str)
}

fn title_case(s: &str) -> String {
    s.split(' ')
        .map(|w| {
            let mut c = w.chars();
            match c.next() {
                Some(f) => f.to_uppercase().chain(c).collect(),
                None => String::new(),
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn render(template: &QueryTemplate, c: &CategorySpec, rng: &mut ChaCha8Rng) -> Option<String> {
    let mut used_modifier: Option<&str> = None;
    let mut out = Vec::new();
    for part in template.pattern.split(' ') {
        let word = match part {
            "{head}" => pick(rng, &c.heads)?,
            "{brand}" => pick(rng, &c.brands)?,
            "{alt}" => pick(rng, &c.alternates)?,
            "{modifier}" => {
                let choices: Vec<&String> = c
                    .modifiers
                    .iter()
                    .filter(|m| Some(m.as_str()) != used_modifier)
                    .collect();
                let m = choices.choose(rng)?.as_str();
                used_modifier = Some(m);
                m
            }
            literal => literal,
        };
        out.push(word.to_lowercase());
    }
    Some(out.join(" "))
}

fn make_products(
    spec: &SyntheticCorpusSpec,
    rng: &mut ChaCha8Rng,
) -> (Vec<Product>, BTreeMap<String, Vec<usize>>) {
    let mut products = Vec::new();
    let mut by_category: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for c in &spec.categories {
        for _ in 0..c.products {
            let idx = products.len();
            let head = pick(rng, &c.heads).unwrap_or("item");
            let mut name = title_case(head);
            if rng.gen_bool(0.8) {
                if let Some(m) = pick(rng, &c.modifiers) {
                    name = format!("{} {name}", title_case(m));
                }
            }
            let brand = pick(rng, &c.brands).unwrap_or_default().to_string();
            let size_info = pick(rng, &spec.sizes).unwrap_or_default().to_string();
            let mut attributes: Vec<String> = spec
                .attributes
                .iter()
                .filter(|_| rng.gen_bool(0.15))
                .cloned()
                .collect();
            attributes.sort();
            let mut retailer_ids: Vec<String> = spec
                .retailers
                .iter()
                .filter(|_| rng.gen_bool(spec.carry_probability))
                .cloned()
                .collect();
            if retailer_ids.is_empty() {
                retailer_ids.push(spec.retailers[rng.gen_range(0..spec.retailers.len())].clone());
            }
            let available = retailer_ids
                .iter()
                .filter(|_| rng.gen_bool(spec.unavailable_rate))
                .map(|r| (r.clone(), false))
                .collect();
            products.push(Product {
                id: format!("P{:05}", idx + 1),
                name,
                brand,
                size_info,
                categories: vec![c.department.clone(), c.name.clone()],
                attributes,
                retailer_ids,
                available,
            });
            by_category.entry(c.name.clone()).or_default().push(idx);
        }
    }
    (products, by_category)
}

fn make_queries(spec: &SyntheticCorpusSpec, rng: &mut ChaCha8Rng) -> Vec<GeneratedQuery> {
    let total_weight: f64 = spec.templates.iter().map(|t| t.weight).sum();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for c in &spec.categories {
        let mut made = 0;
        // every head query exists; the rest are drawn by template weight
        for head in &c.heads {
            if made >= spec.queries_per_category {
                break;
            }
            let q = normalize_query(head);
            if seen.insert(q.clone()) {
                out.push((q, c.name.clone(), QueryTier::Head));
                made += 1;
            }
        }
        let mut attempts = 0;
        while made < spec.queries_per_category && attempts < spec.queries_per_category * 50 {
            attempts += 1;
            let mut x = rng.gen::<f64>() * total_weight;
            let template = spec
                .templates
                .iter()
                .find(|t| {
                    x -= t.weight;
                    x < 0.0
                })
                .unwrap_or(&spec.templates[spec.templates.len() - 1]);
            let Some(q) = render(template, c, rng).map(|q| normalize_query(&q)) else {
                continue;
            };
            if !q.is_empty() && seen.insert(q.clone()) {
                out.push((q, c.name.clone(), template.tier));
                made += 1;
            }
        }
    }
    out.into_iter()
        .map(|(query, category, tier)| {
            let range = match tier {
                QueryTier::Head => spec.users.head_users,
                QueryTier::Torso => spec.users.torso_users,
                QueryTier::Tail => spec.users.tail_users,
            };
            GeneratedQuery {
                query,
                category,
                tier,
                frequency: log_uniform(rng, range),
            }
        })
        .collect()
}

fn make_engagement(
    spec: &SyntheticCorpusSpec,
    queries: &[GeneratedQuery],
    by_category: &BTreeMap<String, Vec<usize>>,
    products: &[Product],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EngagementRecord>> {
    let names: Vec<&String> = by_category.keys().collect();
    let mut records = Vec::new();
    for q in queries {
        let (lo, hi) = match q.tier {
            QueryTier::Head => spec.users.head_products,
            QueryTier::Torso => spec.users.torso_products,
            QueryTier::Tail => spec.users.tail_products,
        };
        let own = &by_category[&q.category];
        let m = rng.gen_range(lo..=hi.max(lo)).min(own.len()).max(1);
        let mut intra = own.clone();
        intra.shuffle(rng);
        let mut intra = intra.into_iter();
        let mut chosen = HashSet::new();
        for _ in 0..m {
            let noisy = rng.gen_bool(spec.noise_rate);
            let (pid, rate) = if noisy {
                let partner = spec
                    .trap_partner(&q.category)
                    .filter(|_| rng.gen_bool(spec.trap_noise_share));
                let cat = match partner {
                    Some(p) => p.to_string(),
                    None => loop {
                        let c = names[rng.gen_range(0..names.len())];
                        if *c != q.category {
                            break c.clone();
                        }
                    },
                };
                let pool = &by_category[&cat];
                (pool[rng.gen_range(0..pool.len())], spec.noise_conversion)
            } else {
                match intra.next() {
                    Some(p) => (p, spec.relevant_conversion),
                    None => break,
                }
            };
            if !chosen.insert(pid) {
                continue;
            }
            let impressions =
                ((f64::from(q.frequency) * rng.gen_range(0.2..=1.0)).round() as u32).max(1);
            let r = rng.gen_range(rate.0..=rate.1);
            let conversions = ((f64::from(impressions) * r).round() as u32).clamp(1, impressions);
            records.push(EngagementRecord::new(
                &q.query,
                products[pid].id.clone(),
                conversions,
                impressions,
                q.frequency,
            )?);
        }
    }
    Ok(records)
}

fn make_labels(
    spec: &SyntheticCorpusSpec,
    queries: &[GeneratedQuery],
    by_category: &BTreeMap<String, Vec<usize>>,
    products: &[Product],
    rng: &mut ChaCha8Rng,
) -> Vec<RaterRow> {
    let mut order: Vec<usize> = (0..queries.len()).collect();
    order.shuffle(rng);
    order.truncate(spec.label_queries);
    order.sort_unstable();
    let mut rows = Vec::new();
    for qi in order {
        let q = &queries[qi];
        let mut judged: BTreeMap<usize, RelevanceLevel> = BTreeMap::new();
        for &p in &by_category[&q.category] {
            judged.insert(p, RelevanceLevel::StronglyRelevant);
        }
        if let Some(partner) = spec.trap_partner(&q.category) {
            for &p in &by_category[partner] {
                judged.insert(p, RelevanceLevel::NotRelevant);
            }
        }
        let mut added = 0;
        let mut attempts = 0;
        while added < spec.label_negatives && attempts < spec.label_negatives * 20 {
            attempts += 1;
            let p = rng.gen_range(0..products.len());
            if let std::collections::btree_map::Entry::Vacant(e) = judged.entry(p) {
                e.insert(RelevanceLevel::NotRelevant);
                added += 1;
            }
        }
        for (p, truth) in judged {
            let raters = (0..spec.raters)
                .map(|_| {
                    if rng.gen_bool(spec.rater_accuracy) {
                        truth
                    } else {
                        let others: Vec<RelevanceLevel> = RelevanceLevel::ALL
                            .iter()
                            .copied()
                            .filter(|l| *l != truth)
                            .collect();
                        others[rng.gen_range(0..others.len())]
                    }
                })
                .collect();
            rows.push(RaterRow {
                query: q.query.clone(),
                product_id: products[p].id.clone(),
                raters,
            });
        }
    }
    rows
}

/// Generates catalog, engagement log and rater rows; identical for identical `(spec, seed)`.
pub fn generate_synthetic_corpus(spec: &SyntheticCorpusSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (catalog, by_category) = make_products(spec, &mut rng);
    let queries = make_queries(spec, &mut rng);
    let engagement = make_engagement(spec, &queries, &by_category, &catalog, &mut rng)?;
    let rater_rows = make_labels(spec, &queries, &by_category, &catalog, &mut rng);
    Ok(SyntheticCorpus {
        catalog,
        engagement,
        rater_rows,
        queries,
    })
}

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const ENGAGEMENT_FILE: &str = "engagement.tsv";
pub const LABELS_FILE: &str = "labels.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusFiles {
    pub catalog: PathBuf,
    pub engagement: PathBuf,
    pub labels: PathBuf,
}

pub fn write_corpus(corpus: &SyntheticCorpus, dir: impl AsRef<Path>) -> Result<CorpusFiles> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CorpusFiles {
        catalog: dir.join(CATALOG_FILE),
        engagement: dir.join(ENGAGEMENT_FILE),
        labels: dir.join(LABELS_FILE),
    };
    write_catalog(&files.catalog, &corpus.catalog)?;
    write_engagement(&files.engagement, &corpus.engagement)?;
    write_rater_rows(&files.labels, &corpus.rater_rows)?;
    Ok(files)
}
