//! Synthetic news corpora and impression logs with known latent structure.
//!
//! Each topic owns a word pool and a category label. Each news article is
//! drawn from one topic; each user prefers a primary and a secondary
//! topic. Clicks follow a logistic model over the user-topic affinity.
//! The per-channel click weights control how much of the topic signal is
//! observable in each channel: the title/body word mix and the chance the
//! category label is reported correctly scale with the normalized weight,
//! so zeroing a channel's weight makes that channel pure noise.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, Impression, RawNews};
use crate::error::ConfigError;

/// Affinity threshold of the click sigmoid.
pub const CLICK_BIAS: f64 = 0.85;
/// User affinity for their primary / secondary topic (others get 0).
pub const PREF_PRIMARY: f64 = 1.0;
pub const PREF_SECONDARY: f64 = 0.7;
/// Probability that a candidate slot is forced to the user's primary
/// (resp. secondary) topic, mimicking a lightly personalized feed.
const ENRICH_PRIMARY: f64 = 0.025;
const ENRICH_SECONDARY: f64 = 0.025;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_topics: usize,
    pub n_users: usize,
    pub n_news: usize,
    pub vocab_size: usize,
    pub title_len_range: (usize, usize),
    pub body_len_range: (usize, usize),
    pub n_impressions_per_user: usize,
    pub candidates_per_impression: usize,
    pub w_title: f64,
    pub w_body: f64,
    pub w_cat: f64,
    pub topic_word_concentration: f64,
    pub noise_temperature: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_topics: 20,
            n_users: 200,
            n_news: 2000,
            vocab_size: 5000,
            title_len_range: (4, 8),
            body_len_range: (20, 40),
            n_impressions_per_user: 15,
            candidates_per_impression: 20,
            w_title: 1.0,
            w_body: 1.0,
            w_cat: 1.0,
            topic_word_concentration: 0.9,
            noise_temperature: 0.12,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("n_topics", self.n_topics),
            ("n_users", self.n_users),
            ("n_news", self.n_news),
            ("vocab_size", self.vocab_size),
            ("n_impressions_per_user", self.n_impressions_per_user),
            ("candidates_per_impression", self.candidates_per_impression),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.candidates_per_impression > self.n_news {
            return Err(ConfigError::Invalid(format!(
                "candidates_per_impression ({}) exceeds n_news ({})",
                self.candidates_per_impression, self.n_news
            )));
        }
        if self.vocab_size < self.n_topics {
            return Err(ConfigError::Invalid("vocab_size must cover every topic pool".into()));
        }
        if self.w_title < 0.0 || self.w_body < 0.0 || self.w_cat < 0.0 {
            return Err(ConfigError::Invalid("click weights must be nonnegative".into()));
        }
        if self.w_title + self.w_body + self.w_cat == 0.0 {
            return Err(ConfigError::Invalid("click weights must not all be zero".into()));
        }
        if self.title_len_range.0 > self.title_len_range.1 || self.title_len_range.0 == 0 {
            return Err(ConfigError::Invalid("bad title_len_range".into()));
        }
        if self.body_len_range.0 > self.body_len_range.1 {
            return Err(ConfigError::Invalid("bad body_len_range".into()));
        }
        if !(0.0..=1.0).contains(&self.topic_word_concentration) {
            return Err(ConfigError::Invalid("topic_word_concentration must be in [0,1]".into()));
        }
        if self.noise_temperature < 0.0 {
            return Err(ConfigError::Invalid("noise_temperature must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Latent variables behind a generated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub click_bias: f64,
    /// news_id -> topic
    pub news_topics: BTreeMap<String, usize>,
    /// user_id -> (primary topic, secondary topic)
    pub user_prefs: BTreeMap<String, (usize, usize)>,
}

pub struct GeneratedData {
    pub news: Vec<RawNews>,
    pub impressions: Vec<Impression>,
    pub ground_truth: GroundTruth,
}

fn affinity(prefs: (usize, usize), topic: usize) -> f64 {
    if topic == prefs.0 {
        PREF_PRIMARY
    } else if topic == prefs.1 {
        PREF_SECONDARY
    } else {
        0.0
    }
}

/// Click probability for a given affinity. Zero temperature collapses to a
/// deterministic threshold at `CLICK_BIAS`.
pub fn click_probability(affinity: f64, temperature: f64) -> f64 {
    if temperature < 1e-9 {
        return if affinity > CLICK_BIAS { 1.0 } else { 0.0 };
    }
    let z = (affinity - CLICK_BIAS) / temperature;
    1.0 / (1.0 + (-z).exp())
}

pub fn generate(spec: &SyntheticSpec) -> Result<GeneratedData, ConfigError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let wmax = spec.w_title.max(spec.w_body).max(spec.w_cat);
    let obs_title = spec.w_title / wmax;
    let obs_body = spec.w_body / wmax;
    let obs_cat = spec.w_cat / wmax;

    let pool = spec.vocab_size / spec.n_topics;
    let topic_word = |rng: &mut ChaCha8Rng, topic: usize, obs: f64, spec: &SyntheticSpec| -> String {
        let on_topic = rng.gen::<f64>() < spec.topic_word_concentration * obs;
        let w = if on_topic && pool > 0 {
            topic * pool + rng.gen_range(0..pool)
        } else {
            rng.gen_range(0..spec.vocab_size)
        };
        format!("w{w:05}")
    };

    // News corpus.
    let mut news = Vec::with_capacity(spec.n_news);
    let mut news_topics = BTreeMap::new();
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); spec.n_topics];
    for j in 0..spec.n_news {
        let topic = rng.gen_range(0..spec.n_topics);
        let title_len = rng.gen_range(spec.title_len_range.0..=spec.title_len_range.1);
        let body_len = rng.gen_range(spec.body_len_range.0..=spec.body_len_range.1);
        let title: Vec<String> = (0..title_len)
            .map(|_| topic_word(&mut rng, topic, obs_title, spec))
            .collect();
        let body: Vec<String> = (0..body_len)
            .map(|_| topic_word(&mut rng, topic, obs_body, spec))
            .collect();
        let cat_topic = if rng.gen::<f64>() < obs_cat {
            topic
        } else {
            rng.gen_range(0..spec.n_topics)
        };
        let news_id = format!("n{j:05}");
        news_topics.insert(news_id.clone(), topic);
        by_topic[topic].push(j);
        news.push(RawNews {
            news_id,
            title: title.join(" "),
            body: body.join(" "),
            category: format!("cat{cat_topic}"),
            // Subcategories are deliberately uninformative noise labels.
            subcategory: format!("sub{}", rng.gen_range(0..spec.n_topics)),
        });
    }

    // Users and impressions.
    let mut impressions = Vec::new();
    let mut user_prefs = BTreeMap::new();
    let mut timestamp = 0u64;
    for ui in 0..spec.n_users {
        let primary = rng.gen_range(0..spec.n_topics);
        let mut secondary = rng.gen_range(0..spec.n_topics);
        if spec.n_topics > 1 {
            while secondary == primary {
                secondary = rng.gen_range(0..spec.n_topics);
            }
        }
        let user_id = format!("u{ui:04}");
        user_prefs.insert(user_id.clone(), (primary, secondary));

        let mut history: Vec<String> = Vec::new();
        for ii in 0..spec.n_impressions_per_user {
            let mut chosen: Vec<usize> = Vec::with_capacity(spec.candidates_per_impression);
            while chosen.len() < spec.candidates_per_impression {
                let roll: f64 = rng.gen();
                let from = if roll < ENRICH_PRIMARY && !by_topic[primary].is_empty() {
                    &by_topic[primary]
                } else if roll < ENRICH_PRIMARY + ENRICH_SECONDARY && !by_topic[secondary].is_empty() {
                    &by_topic[secondary]
                } else {
                    // uniform over the corpus
                    let j = rng.gen_range(0..spec.n_news);
                    if !chosen.contains(&j) {
                        chosen.push(j);
                    }
                    continue;
                };
                let j = from[rng.gen_range(0..from.len())];
                if !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            let candidates: Vec<Candidate> = chosen
                .iter()
                .map(|&j| {
                    let topic = news_topics[&news[j].news_id];
                    let p = click_probability(affinity((primary, secondary), topic), spec.noise_temperature);
                    let clicked = u8::from(rng.gen::<f64>() < p);
                    Candidate { news_id: news[j].news_id.clone(), clicked }
                })
                .collect();
            let imp = Impression {
                impression_id: format!("u{ui:04}-i{ii:03}"),
                user_id: user_id.clone(),
                history: history.clone(),
                candidates,
                timestamp,
            };
            timestamp += 1;
            for c in &imp.candidates {
                if c.clicked != 0 {
                    history.push(c.news_id.clone());
                }
            }
            impressions.push(imp);
        }
    }

    Ok(GeneratedData {
        news,
        impressions,
        ground_truth: GroundTruth {
            spec: spec.clone(),
            click_bias: CLICK_BIAS,
            news_topics,
            user_prefs,
        },
    })
}

/// Observed vs expected click counts for one affinity class.
#[derive(Debug, Clone, Serialize)]
pub struct ClassStat {
    pub affinity: f64,
    pub expected_p: f64,
    pub n: usize,
    pub clicks: usize,
    /// |observed − expected| in binomial standard deviations
    /// (infinite deviation if a deterministic class disagrees).
    pub deviation_sigmas: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub classes: Vec<ClassStat>,
    pub ok: bool,
}

/// Recompute click probabilities from the ground truth and check the
/// empirical click rates per affinity class within 3 binomial sigmas.
pub fn verify_ground_truth(impressions: &[Impression], truth: &GroundTruth) -> VerifyReport {
    let mut per_class: BTreeMap<u64, (f64, f64, usize, usize)> = BTreeMap::new();
    for imp in impressions {
        let prefs = truth.user_prefs[&imp.user_id];
        for c in &imp.candidates {
            let topic = truth.news_topics[&c.news_id];
            let a = affinity(prefs, topic);
            let p = click_probability(a, truth.spec.noise_temperature);
            let entry = per_class.entry(a.to_bits()).or_insert((a, p, 0, 0));
            entry.2 += 1;
            entry.3 += usize::from(c.clicked != 0);
        }
    }
    let mut classes: Vec<ClassStat> = per_class
        .into_values()
        .map(|(affinity, p, n, clicks)| {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (clicks as f64 - n as f64 * p).abs();
            let deviation_sigmas = if sigma > 0.0 {
                dev / sigma
            } else if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            ClassStat { affinity, expected_p: p, n, clicks, deviation_sigmas }
        })
        .collect();
    classes.sort_by(|a, b| a.affinity.partial_cmp(&b.affinity).unwrap());
    let ok = classes.iter().all(|c| c.deviation_sigmas <= 3.0);
    VerifyReport { classes, ok }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            n_topics: 5,
            n_users: 20,
            n_news: 100,
            vocab_size: 250,
            n_impressions_per_user: 4,
            candidates_per_impression: 10,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(serde_json::to_string(&a.news[0]).unwrap(), serde_json::to_string(&b.news[0]).unwrap());
        assert_eq!(a.impressions.len(), b.impressions.len());
        for (x, y) in a.impressions.iter().zip(&b.impressions) {
            assert_eq!(serde_json::to_string(x).unwrap(), serde_json::to_string(y).unwrap());
        }
    }

    #[test]
    fn clicked_news_are_candidates_and_history_accumulates() {
        let data = generate(&small_spec()).unwrap();
        for imp in &data.impressions {
            for c in &imp.candidates {
                assert!(imp.candidates.iter().any(|x| x.news_id == c.news_id));
            }
        }
        // history of a later impression contains earlier clicks for that user
        let user = &data.impressions[0].user_id;
        let mut clicked_so_far: Vec<String> = Vec::new();
        for imp in data.impressions.iter().filter(|i| &i.user_id == user) {
            assert_eq!(imp.history, clicked_so_far);
            for c in &imp.candidates {
                if c.clicked != 0 {
                    clicked_so_far.push(c.news_id.clone());
                }
            }
        }
    }

    #[test]
    fn candidates_are_distinct_within_impression() {
        let data = generate(&small_spec()).unwrap();
        for imp in &data.impressions {
            let mut ids: Vec<&str> = imp.candidates.iter().map(|c| c.news_id.as_str()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), imp.candidates.len());
        }
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = SyntheticSpec { candidates_per_impression: 101, n_news: 100, ..small_spec() };
        assert!(generate(&spec).is_err());
        let spec = SyntheticSpec { w_title: 0.0, w_body: 0.0, w_cat: 0.0, ..small_spec() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn verify_accepts_generated_data() {
        let data = generate(&SyntheticSpec { seed: 3, ..small_spec() }).unwrap();
        let report = verify_ground_truth(&data.impressions, &data.ground_truth);
        assert!(report.ok, "report: {report:?}");
    }

    #[test]
    fn zero_noise_clicks_are_deterministic() {
        let spec = SyntheticSpec { noise_temperature: 0.0, ..small_spec() };
        let data = generate(&spec).unwrap();
        for imp in &data.impressions {
            let prefs = data.ground_truth.user_prefs[&imp.user_id];
            for c in &imp.candidates {
                let topic = data.ground_truth.news_topics[&c.news_id];
                let expected = u8::from(affinity(prefs, topic) > CLICK_BIAS);
                assert_eq!(c.clicked, expected);
            }
        }
        let report = verify_ground_truth(&data.impressions, &data.ground_truth);
        assert!(report.ok);
    }

    #[test]
    fn corrupted_labels_are_flagged() {
        let mut data = generate(&small_spec()).unwrap();
        for imp in data.impressions.iter_mut() {
            for c in imp.candidates.iter_mut() {
                c.clicked = 1 - c.clicked;
            }
        }
        let report = verify_ground_truth(&data.impressions, &data.ground_truth);
        assert!(!report.ok);
    }

    #[test]
    fn default_spec_class_ratio_echo() {
        let data = generate(&SyntheticSpec::default()).unwrap();
        let mut pos = 0usize;
        let mut neg = 0usize;
        for imp in &data.impressions {
            for c in &imp.candidates {
                if c.clicked != 0 {
                    pos += 1;
                } else {
                    neg += 1;
                }
            }
        }
        let ratio = neg as f64 / pos as f64;
        // target is roughly 13.6 negatives per positive, within 20%
        assert!(
            ratio > 13.6 * 0.8 && ratio < 13.6 * 1.2,
            "neg:pos ratio {ratio:.2}"
        );
    }
}
