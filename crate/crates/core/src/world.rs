//! A seeded synthetic sponsored-search world: latent intents grouped into
//! families, queries and keywords whose words are drawn from their intent,
//! click logs whose CTR follows relevance, and a teacher that scores pairs
//! from intent similarity.
//!
//! Two regimes are planted on purpose. Rare items never reach the
//! impression threshold, so they have no click neighbors of their own, and
//! many of them are "opaque": their text carries only a two-word cluster
//! brand and filler, so the intent is visible only through the graph. Intents in one
//! family share words while the teacher treats them as unrelated, which
//! gives encoder-only models a misleading overlap to trip on.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Normal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{write_click_log, ClickLogEntry};
use crate::model::Side;
use crate::pairs::{write_pairs, PairRow, PairTarget};
use crate::tokenize::fnv1a64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_families: usize,
    pub intents_per_family: usize,
    pub n_queries: usize,
    pub n_keywords: usize,
    /// Size of the shared filler-word pool.
    pub vocab_size: usize,
    pub tokens_per_intent: usize,
    pub tokens_per_family: usize,
    pub cluster_size: usize,
    pub zipf_exponent: f64,
    pub base_ctr: f64,
    pub noise_ctr: f64,
    pub impression_threshold: u64,
    pub rare_fraction: f64,
    /// Chance that a rare item's text hides its intent.
    pub rare_opaque_fraction: f64,
    /// Chance that a popular item's text hides its intent.
    pub popular_opaque_fraction: f64,
    pub partners_per_item: usize,
    pub teacher_noise: f64,
    pub label_noise: f64,
    pub n_train_pairs: usize,
    pub n_finetune_pairs: usize,
    pub n_eval_pairs: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_families: 6,
            intents_per_family: 4,
            n_queries: 800,
            n_keywords: 1200,
            vocab_size: 200,
            tokens_per_intent: 6,
            tokens_per_family: 3,
            cluster_size: 4,
            zipf_exponent: 1.1,
            base_ctr: 0.25,
            noise_ctr: 0.02,
            impression_threshold: 50,
            rare_fraction: 0.5,
            rare_opaque_fraction: 0.6,
            popular_opaque_fraction: 0.1,
            partners_per_item: 3,
            teacher_noise: 0.25,
            label_noise: 0.3,
            n_train_pairs: 4000,
            n_finetune_pairs: 1000,
            n_eval_pairs: 1000,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn n_intents(&self) -> usize {
        self.n_families * self.intents_per_family
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_families", self.n_families),
            ("intents_per_family", self.intents_per_family),
            ("n_queries", self.n_queries),
            ("n_keywords", self.n_keywords),
            ("vocab_size", self.vocab_size),
            ("tokens_per_intent", self.tokens_per_intent),
            ("tokens_per_family", self.tokens_per_family),
            ("cluster_size", self.cluster_size),
            ("partners_per_item", self.partners_per_item),
            ("n_train_pairs", self.n_train_pairs),
            ("n_eval_pairs", self.n_eval_pairs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.impression_threshold < 2 {
            return Err(Error::Config("impression_threshold must be at least 2".into()));
        }
        if !(0.0 < self.noise_ctr && self.noise_ctr < self.base_ctr && self.base_ctr <= 1.0) {
            return Err(Error::Config("need 0 < noise_ctr < base_ctr <= 1".into()));
        }
        for (name, v) in [
            ("rare_fraction", self.rare_fraction),
            ("rare_opaque_fraction", self.rare_opaque_fraction),
            ("popular_opaque_fraction", self.popular_opaque_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.zipf_exponent > 0.0) || self.teacher_noise < 0.0 || self.label_noise < 0.0 {
            return Err(Error::Config("zipf_exponent must be positive and noise levels non-negative".into()));
        }
        if self.n_queries < self.n_intents() || self.n_keywords < self.n_intents() {
            return Err(Error::Config("need at least one query and one keyword per intent".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Item {
    pub text: String,
    pub side: Side,
    pub intent: usize,
    pub cluster: usize,
    /// Length of the item's private offset from its intent direction.
    pub jitter: f64,
    pub rare: bool,
    pub opaque: bool,
}

/// Relevance teacher: `sigmoid(8·(cos − 0.5) + noise)` where `cos` is the
/// similarity of the two items' latent vectors and `noise` is a bounded,
/// per-pair deterministic offset.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleTeacher {
    seed: u64,
    intents_per_family: usize,
    noise: f64,
    queries: HashMap<String, (usize, f64)>,
    keywords: HashMap<String, (usize, f64)>,
}

/// Cosine between two intents in the same family; intents in different
/// families are orthogonal.
pub const FAMILY_COSINE: f64 = 0.3;
const TEACHER_SCALE: f64 = 8.0;

impl OracleTeacher {
    fn intent_cos(&self, a: usize, b: usize) -> f64 {
        if a == b {
            1.0
        } else if a / self.intents_per_family == b / self.intents_per_family {
            FAMILY_COSINE
        } else {
            0.0
        }
    }

    fn pair_noise(&self, q: &str, k: &str) -> f64 {
        let h = fnv1a64(format!("{}\t{q}\t{k}", self.seed).as_bytes());
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.noise * (2.0 * u - 1.0)
    }

    fn lookup(&self, side: Side, text: &str) -> Result<(usize, f64)> {
        let map = match side {
            Side::Query => &self.queries,
            Side::Keyword => &self.keywords,
        };
        map.get(text)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("unknown {} {text:?}", side.as_str())))
    }

    /// Latent cosine between a query and a keyword.
    pub fn cosine(&self, query: &str, keyword: &str) -> Result<f64> {
        let (qi, qj) = self.lookup(Side::Query, query)?;
        let (ki, kj) = self.lookup(Side::Keyword, keyword)?;
        Ok(self.intent_cos(qi, ki) / ((1.0 + qj * qj).sqrt() * (1.0 + kj * kj).sqrt()))
    }

    pub fn logit(&self, query: &str, keyword: &str) -> Result<f64> {
        Ok(TEACHER_SCALE * (self.cosine(query, keyword)? - 0.5) + self.pair_noise(query, keyword))
    }

    pub fn score(&self, query: &str, keyword: &str) -> Result<f64> {
        Ok(sigmoid(self.logit(query, keyword)?))
    }

    /// Score of an item against itself: the maximum-similarity case.
    pub fn self_score(&self, side: Side, text: &str) -> Result<f64> {
        self.lookup(side, text)?;
        Ok(sigmoid(TEACHER_SCALE * 0.5 + self.pair_noise(text, text)))
    }
}

pub fn oracle_score(query: &str, keyword: &str, teacher: &OracleTeacher) -> Result<f64> {
    teacher.score(query, keyword)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Five relevance grades from a score, best first.
pub fn grade(score: f64) -> &'static str {
    if score >= 0.9 {
        "excellent"
    } else if score >= 0.75 {
        "perfect"
    } else if score >= 0.6 {
        "good"
    } else if score >= 0.4 {
        "fair"
    } else {
        "bad"
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub cfg: WorldConfig,
    pub queries: Vec<Item>,
    pub keywords: Vec<Item>,
    pub click_log: Vec<ClickLogEntry>,
    pub train: Vec<PairRow>,
    pub finetune: Vec<PairRow>,
    pub eval: Vec<PairRow>,
    pub teacher: OracleTeacher,
}

pub const CLICK_LOG_FILE: &str = "click_log.tsv";
pub const TRAIN_FILE: &str = "train_pairs.tsv";
pub const FINETUNE_FILE: &str = "finetune_pairs.tsv";
pub const EVAL_FILE: &str = "eval_pairs.tsv";
pub const ITEMS_FILE: &str = "items.tsv";

impl World {
    pub fn items(&self, side: Side) -> &[Item] {
        match side {
            Side::Query => &self.queries,
            Side::Keyword => &self.keywords,
        }
    }

    pub fn item(&self, side: Side, text: &str) -> Option<&Item> {
        self.items(side).iter().find(|it| it.text == text)
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_click_log(BufWriter::new(fs::File::create(dir.join(CLICK_LOG_FILE))?), &self.click_log)?;
        write_pairs(BufWriter::new(fs::File::create(dir.join(TRAIN_FILE))?), &self.train)?;
        write_pairs(BufWriter::new(fs::File::create(dir.join(FINETUNE_FILE))?), &self.finetune)?;
        write_pairs(BufWriter::new(fs::File::create(dir.join(EVAL_FILE))?), &self.eval)?;
        let mut items = String::from("side\ttext\tintent\tcluster\trare\topaque\n");
        for it in self.queries.iter().chain(&self.keywords) {
            items.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                it.side.as_str(),
                it.text,
                it.intent,
                it.cluster,
                u8::from(it.rare),
                u8::from(it.opaque)
            ));
        }
        fs::write(dir.join(ITEMS_FILE), items)?;
        Ok(())
    }
}

const CONSONANTS: &[u8] = b"bcdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn fresh_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut HashSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Lexicon {
    family: Vec<Vec<String>>,
    intent: Vec<Vec<String>>,
    filler: Vec<String>,
}

fn make_items(
    cfg: &WorldConfig,
    side: Side,
    n: usize,
    lex: &Lexicon,
    taken: &mut HashSet<String>,
    cluster_base: &mut usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Item> {
    let n_intents = cfg.n_intents();
    let mut by_intent: Vec<Vec<usize>> = vec![Vec::new(); n_intents];
    for i in 0..n {
        by_intent[i % n_intents].push(i);
    }
    // cluster id and whether the item heads its cluster
    let first_cluster = *cluster_base;
    let mut cluster = vec![0; n];
    let mut head = vec![false; n];
    for members in &by_intent {
        for chunk in members.chunks(cfg.cluster_size) {
            for (j, &i) in chunk.iter().enumerate() {
                cluster[i] = *cluster_base;
                head[i] = j == 0;
            }
            *cluster_base += 1;
        }
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| !head[i]).collect();
    candidates.shuffle(rng);
    let n_rare = ((cfg.rare_fraction * n as f64).round() as usize).min(candidates.len());
    let mut rare = vec![false; n];
    for &i in &candidates[..n_rare] {
        rare[i] = true;
    }

    let cluster_words = fresh_words(rng, 2 * (*cluster_base - first_cluster), taken);
    let mut texts = HashSet::new();
    (0..n)
        .map(|i| {
            let intent = i % n_intents;
            let family = intent / cfg.intents_per_family;
            let opaque = !head[i]
                && rng.random_bool(if rare[i] {
                    cfg.rare_opaque_fraction
                } else {
                    cfg.popular_opaque_fraction
                });
            loop {
                let c = cluster[i] - first_cluster;
                let brand = format!("{} {}", cluster_words[2 * c], cluster_words[2 * c + 1]);
                let mut words = Vec::new();
                if opaque {
                    words.push(lex.filler.choose(rng).unwrap().clone());
                } else {
                    words.extend(lex.intent[intent].choose_multiple(rng, 2).cloned());
                    words.push(lex.family[family].choose(rng).unwrap().clone());
                    if rng.random_bool(0.5) {
                        words.push(lex.filler.choose(rng).unwrap().clone());
                    }
                }
                words.shuffle(rng);
                words.insert(rng.random_range(0..=words.len()), brand);
                let text = words.join(" ");
                if texts.insert(text.clone()) {
                    return Item {
                        text,
                        side,
                        intent,
                        cluster: cluster[i],
                        jitter: rng.random_range(0.0..0.6),
                        rare: rare[i],
                        opaque,
                    };
                }
            }
        })
        .collect()
}

/// Picks a query for `keyword`: same intent, same family, or anywhere.
fn pick_query(rng: &mut ChaCha8Rng, intent: usize, cfg: &WorldConfig, by_intent: &[Vec<usize>], n_queries: usize) -> usize {
    let r: f64 = rng.random();
    let target = if r < 0.45 {
        intent
    } else if r < 0.7 {
        let family = intent / cfg.intents_per_family;
        family * cfg.intents_per_family + rng.random_range(0..cfg.intents_per_family)
    } else {
        return rng.random_range(0..n_queries);
    };
    *by_intent[target].choose(rng).unwrap()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let lex = Lexicon {
        family: (0..cfg.n_families)
            .map(|_| fresh_words(&mut rng, cfg.tokens_per_family, &mut taken))
            .collect(),
        intent: (0..cfg.n_intents())
            .map(|_| fresh_words(&mut rng, cfg.tokens_per_intent.max(2), &mut taken))
            .collect(),
        filler: fresh_words(&mut rng, cfg.vocab_size, &mut taken),
    };
    let mut cluster_base = 0;
    let queries = make_items(cfg, Side::Query, cfg.n_queries, &lex, &mut taken, &mut cluster_base, &mut rng);
    let keywords = make_items(cfg, Side::Keyword, cfg.n_keywords, &lex, &mut taken, &mut cluster_base, &mut rng);

    let teacher = OracleTeacher {
        seed: cfg.seed,
        intents_per_family: cfg.intents_per_family,
        noise: cfg.teacher_noise,
        queries: queries.iter().map(|q| (q.text.clone(), (q.intent, q.jitter))).collect(),
        keywords: keywords.iter().map(|k| (k.text.clone(), (k.intent, k.jitter))).collect(),
    };

    let click_log = click_log(cfg, &queries, &keywords, &teacher, &mut rng)?;

    let n_intents = cfg.n_intents();
    let mut q_by_intent = vec![Vec::new(); n_intents];
    for (i, q) in queries.iter().enumerate() {
        q_by_intent[q.intent].push(i);
    }

    // Rare keywords held out for evaluation appear in no training pair.
    let n_rare_eval = (cfg.rare_fraction * cfg.n_eval_pairs as f64).round() as usize;
    let mut rare_kw: Vec<usize> = (0..keywords.len()).filter(|&i| keywords[i].rare).collect();
    rare_kw.shuffle(&mut rng);
    let held_out: BTreeSet<usize> = rare_kw.iter().take(n_rare_eval).copied().collect();
    let popular_kw: Vec<usize> = (0..keywords.len()).filter(|&i| !keywords[i].rare).collect();
    let mut ranks: Vec<usize> = (1..=popular_kw.len()).collect();
    ranks.shuffle(&mut rng);
    let popularity = WeightedIndex::new(ranks.iter().map(|&r| (r as f64).powf(-cfg.zipf_exponent)))
        .map_err(|e| Error::Config(format!("popularity weights: {e}")))?;

    let trainable: Vec<usize> = (0..keywords.len()).filter(|i| !held_out.contains(i)).collect();
    let mut used = HashSet::new();
    let sample_rows = |rng: &mut ChaCha8Rng, n: usize, binary: bool, used: &mut HashSet<(usize, usize)>| -> Result<Vec<PairRow>> {
        let mut rows = Vec::with_capacity(n);
        let mut attempts = 0;
        while rows.len() < n {
            attempts += 1;
            if attempts > 50 * n + 1000 {
                return Err(Error::Config("world too small for the requested number of pairs".into()));
            }
            let k = trainable[rng.random_range(0..trainable.len())];
            let q = pick_query(rng, keywords[k].intent, cfg, &q_by_intent, queries.len());
            if !used.insert((q, k)) {
                continue;
            }
            let (qt, kt) = (&queries[q].text, &keywords[k].text);
            let target = if binary {
                PairTarget::Binary(noisy_grade(&teacher, qt, kt, cfg.label_noise, rng)? != "bad")
            } else {
                PairTarget::Teacher(teacher.score(qt, kt)?)
            };
            rows.push(PairRow {
                query: qt.clone(),
                keyword: kt.clone(),
                target,
            });
        }
        Ok(rows)
    };
    let train = sample_rows(&mut rng, cfg.n_train_pairs, false, &mut used)?;
    let finetune = sample_rows(&mut rng, cfg.n_finetune_pairs, true, &mut used)?;

    let mut eval = Vec::with_capacity(cfg.n_eval_pairs);
    let rare_slots: Vec<usize> = if rare_kw.is_empty() {
        Vec::new()
    } else {
        (0..n_rare_eval).map(|i| rare_kw[i % rare_kw.len()]).collect()
    };
    let mut slots: Vec<usize> = rare_slots;
    while slots.len() < cfg.n_eval_pairs {
        if popular_kw.is_empty() {
            return Err(Error::Config("no popular keywords to evaluate".into()));
        }
        slots.push(popular_kw[popularity.sample(&mut rng)]);
    }
    slots.shuffle(&mut rng);
    for k in slots {
        let mut q = pick_query(&mut rng, keywords[k].intent, cfg, &q_by_intent, queries.len());
        for _ in 0..100 {
            if used.insert((q, k)) {
                break;
            }
            q = pick_query(&mut rng, keywords[k].intent, cfg, &q_by_intent, queries.len());
        }
        let (qt, kt) = (&queries[q].text, &keywords[k].text);
        eval.push(PairRow {
            query: qt.clone(),
            keyword: kt.clone(),
            target: PairTarget::Grade(noisy_grade(&teacher, qt, kt, cfg.label_noise, &mut rng)?.to_string()),
        });
    }

    Ok(World {
        cfg: cfg.clone(),
        queries,
        keywords,
        click_log,
        train,
        finetune,
        eval,
        teacher,
    })
}

fn noisy_grade(teacher: &OracleTeacher, q: &str, k: &str, sigma: f64, rng: &mut ChaCha8Rng) -> Result<&'static str> {
    let eps = if sigma > 0.0 {
        Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?.sample(rng)
    } else {
        0.0
    };
    Ok(grade(sigmoid(teacher.logit(q, k)? + eps)))
}

fn click_log(
    cfg: &WorldConfig,
    queries: &[Item],
    keywords: &[Item],
    teacher: &OracleTeacher,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ClickLogEntry>> {
    let zipf = Zipf::new(1000.0, cfg.zipf_exponent).map_err(|e| Error::Config(e.to_string()))?;
    let popular = |items: &[Item], intent: Option<usize>| -> Vec<usize> {
        (0..items.len())
            .filter(|&i| !items[i].rare && intent.is_none_or(|t| items[i].intent == t))
            .collect()
    };
    let n_intents = cfg.n_intents();
    let pop_q: Vec<Vec<usize>> = (0..n_intents).map(|t| popular(queries, Some(t))).collect();
    let pop_k: Vec<Vec<usize>> = (0..n_intents).map(|t| popular(keywords, Some(t))).collect();
    let all_q = popular(queries, None);
    let all_k = popular(keywords, None);
    let all_q_by_intent: Vec<Vec<usize>> = (0..n_intents)
        .map(|t| (0..queries.len()).filter(|&i| queries[i].intent == t).collect())
        .collect();
    let all_k_by_intent: Vec<Vec<usize>> = (0..n_intents)
        .map(|t| (0..keywords.len()).filter(|&i| keywords[i].intent == t).collect())
        .collect();

    // (query, keyword) → impressions; both popular, or a rare one with a
    // deliberately small count.
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let popular_imp = |rng: &mut ChaCha8Rng| cfg.impression_threshold + (zipf.sample(rng) as u64 - 1) * 10;
    for (side, items, partners, all_partners) in [
        (Side::Query, queries, &pop_k, &all_k),
        (Side::Keyword, keywords, &pop_q, &all_q),
    ] {
        for (i, item) in items.iter().enumerate() {
            let key = |j: usize| if side == Side::Query { (i, j) } else { (j, i) };
            if item.rare {
                let pool = if side == Side::Query {
                    &all_k_by_intent[item.intent]
                } else {
                    &all_q_by_intent[item.intent]
                };
                for &j in pool.choose_multiple(rng, 2) {
                    let imp = rng.random_range(1..cfg.impression_threshold);
                    pairs.entry(key(j)).or_insert(imp);
                }
                continue;
            }
            for &j in partners[item.intent].choose_multiple(rng, cfg.partners_per_item) {
                let imp = popular_imp(rng);
                pairs.entry(key(j)).or_insert(imp);
            }
            if let Some(&j) = all_partners.choose(rng) {
                let imp = popular_imp(rng);
                pairs.entry(key(j)).or_insert(imp);
            }
        }
    }

    let mut out = Vec::with_capacity(pairs.len());
    for ((q, k), imp) in pairs {
        let (qt, kt) = (&queries[q].text, &keywords[k].text);
        let ctr = cfg.noise_ctr + (cfg.base_ctr - cfg.noise_ctr) * teacher.score(qt, kt)?;
        let clicks = Binomial::new(imp, ctr).map_err(|e| Error::Config(e.to_string()))?.sample(rng);
        // Split each pair over a couple of log rows, as daily logs would be.
        let first = rng.random_range(0..=imp);
        let first_clicks = clicks.min(first);
        for (i, c) in [(first, first_clicks), (imp - first, clicks - first_clicks)] {
            if i > 0 {
                out.push(ClickLogEntry {
                    query: qt.clone(),
                    keyword: kt.clone(),
                    impressions: i,
                    clicks: c,
                });
            }
        }
    }
    Ok(out)
}
