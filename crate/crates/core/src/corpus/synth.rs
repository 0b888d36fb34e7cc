//! Deterministic synthetic corpus generation.
//!
//! Generates category-structured profiles and proposals with ground-truth
//! skill overlap driving the interaction labels. Languages are token-remap
//! dialects of one shared latent vocabulary: every latent word gets a
//! per-language surface form, and the generator emits the id-level alias map
//! that folds dialect tokens back onto their latent ids.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    Corpus, CorpusError, Document, DocumentKind, Interaction, Label, SectionRegistry, Tokenizer, DEFAULT_VOCAB_SIZE,
};

const N_ROLES: usize = 4;
const N_FILLERS: usize = 64;

/// Knobs of the synthetic generator. All fields have defaults, so a config
/// file may specify any subset; unknown keys are rejected so a typo cannot
/// silently fall back to a default.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_categories: usize,
    pub skills_per_category: usize,
    pub n_freelancers: usize,
    pub n_projects: usize,
    pub skills_per_profile: usize,
    pub proposal_mandatory_skills: usize,
    pub proposal_bonus_skills: usize,
    pub positives_per_project: usize,
    pub negatives_per_project: usize,
    pub n_languages: usize,
    pub description_words: usize,
    pub base_timestamp: i64,
    pub vocab_size: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_categories: 8,
            skills_per_category: 30,
            n_freelancers: 2000,
            n_projects: 200,
            skills_per_profile: 8,
            proposal_mandatory_skills: 5,
            proposal_bonus_skills: 3,
            positives_per_project: 2,
            negatives_per_project: 2,
            n_languages: 1,
            description_words: 12,
            base_timestamp: 1_600_000_000,
            vocab_size: DEFAULT_VOCAB_SIZE,
        }
    }
}

/// Result of generation: the surface corpus, the same corpus expressed in the
/// shared latent dialect, and the token-id alias map (dialect id → latent id).
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub corpus: Corpus,
    pub latent_corpus: Corpus,
    pub token_aliases: BTreeMap<u32, u32>,
}

/// Per-language surface forms for every latent word, chosen so that folding
/// surface token ids through the alias map reproduces the latent token ids
/// exactly (hash collisions are dodged by renaming).
struct Surfacer {
    forms: BTreeMap<(usize, String), String>,
    aliases: BTreeMap<u32, u32>,
}

impl Surfacer {
    fn new(tokenizer: &Tokenizer, latent_words: &BTreeSet<String>, n_languages: usize) -> Self {
        let latent_ids: BTreeSet<u32> = latent_words.iter().map(|w| tokenizer.token_id(w)).collect();
        let mut forms = BTreeMap::new();
        let mut aliases: BTreeMap<u32, u32> = BTreeMap::new();
        for lang in 1..n_languages {
            for word in latent_words {
                let target = tokenizer.token_id(word);
                let mut attempt = 0usize;
                let surface = loop {
                    let candidate = if attempt == 0 {
                        format!("{word}q{lang}")
                    } else {
                        format!("{word}q{lang}r{attempt}")
                    };
                    let id = tokenizer.token_id(&candidate);
                    let clashes_latent = latent_ids.contains(&id);
                    let clashes_alias = aliases.get(&id).is_some_and(|&t| t != target);
                    if !clashes_latent && !clashes_alias {
                        aliases.insert(id, target);
                        break candidate;
                    }
                    attempt += 1;
                };
                forms.insert((lang, word.clone()), surface);
            }
        }
        Surfacer { forms, aliases }
    }

    fn surface(&self, word: &str, lang: usize) -> String {
        if lang == 0 {
            word.to_string()
        } else {
            self.forms
                .get(&(lang, word.to_string()))
                .cloned()
                .unwrap_or_else(|| word.to_string())
        }
    }

    fn render(&self, words: &[String], lang: usize) -> String {
        words.iter().map(|w| self.surface(w, lang)).collect::<Vec<_>>().join(" ")
    }
}

fn validate(config: &SynthConfig) -> Result<(), CorpusError> {
    let fail = |msg: String| Err(CorpusError::InfeasibleConfig(msg));
    if config.n_categories == 0 || config.n_projects == 0 || config.n_languages == 0 {
        return fail("category, project, and language counts must be positive".to_string());
    }
    if config.n_freelancers < config.n_categories {
        return fail(format!(
            "{} freelancers cannot cover {} categories",
            config.n_freelancers, config.n_categories
        ));
    }
    if config.skills_per_profile > config.skills_per_category {
        return fail(format!(
            "profiles need {} skills but each category pool has only {}",
            config.skills_per_profile, config.skills_per_category
        ));
    }
    if config.proposal_mandatory_skills > config.skills_per_profile {
        return fail(format!(
            "proposals require {} mandatory skills but ideal profiles hold only {}",
            config.proposal_mandatory_skills, config.skills_per_profile
        ));
    }
    if config.proposal_bonus_skills > config.skills_per_category - config.proposal_mandatory_skills {
        return fail(format!(
            "bonus skills ({}) exceed the pool left after mandatory ones",
            config.proposal_bonus_skills
        ));
    }
    if config.positives_per_project == 0 {
        return fail("at least one positive per project is required".to_string());
    }
    let min_category_size = config.n_freelancers / config.n_categories;
    if config.positives_per_project + config.negatives_per_project > min_category_size {
        return fail(format!(
            "{} positives + {} negatives per project exceed the smallest category ({} freelancers)",
            config.positives_per_project, config.negatives_per_project, min_category_size
        ));
    }
    Ok(())
}

/// Generates a corpus, its latent-dialect twin, and the dialect token alias
/// map. Fully deterministic for a given config and seed.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SynthOutput, CorpusError> {
    validate(config)?;
    let tokenizer = Tokenizer::new(config.vocab_size, 4)?; // only token_id is used here
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Latent vocabulary.
    let skills: Vec<Vec<String>> = (0..config.n_categories)
        .map(|c| (0..config.skills_per_category).map(|j| format!("sk{c}x{j}")).collect())
        .collect();
    let mut latent_words: BTreeSet<String> = BTreeSet::new();
    for (c, cat_skills) in skills.iter().enumerate() {
        latent_words.insert(format!("cat{c}"));
        latent_words.insert(format!("fam{c}"));
        for r in 0..N_ROLES {
            latent_words.insert(format!("role{c}x{r}"));
        }
        latent_words.extend(cat_skills.iter().cloned());
    }
    for m in 0..N_FILLERS {
        latent_words.insert(format!("fill{m}"));
    }
    let surfacer = Surfacer::new(&tokenizer, &latent_words, config.n_languages);

    let registry = SectionRegistry::default();
    let mut corpus = Corpus {
        registry: registry.clone(),
        documents: BTreeMap::new(),
        interactions: Vec::new(),
    };
    let mut latent_corpus = Corpus {
        registry,
        documents: BTreeMap::new(),
        interactions: Vec::new(),
    };

    let fillers = |rng: &mut ChaCha8Rng, n: usize| -> Vec<String> {
        (0..n).map(|_| format!("fill{}", rng.gen_range(0..N_FILLERS))).collect()
    };
    let sample_sorted = |rng: &mut ChaCha8Rng, pool: &[String], n: usize| -> Vec<String> {
        let mut idx = rand::seq::index::sample(rng, pool.len(), n).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };

    // Freelancer profiles, categories assigned round-robin.
    let mut freelancer_skills: Vec<Vec<String>> = Vec::with_capacity(config.n_freelancers);
    let insert_both = |corpus: &mut Corpus,
                           latent_corpus: &mut Corpus,
                           id: String,
                           kind: DocumentKind,
                           category: String,
                           lang: usize,
                           latent_sections: Vec<(&str, Vec<String>)>|
     -> Result<(), CorpusError> {
        let mut sections = BTreeMap::new();
        let mut latent = BTreeMap::new();
        for (label, words) in latent_sections {
            sections.insert(label.to_string(), surfacer.render(&words, lang));
            latent.insert(label.to_string(), words.join(" "));
        }
        corpus.insert_document(corpus.normalize_document(
            Document {
                id: id.clone(),
                kind,
                category: category.clone(),
                language: format!("lang{lang}"),
                sections,
            },
            0,
        )?)?;
        latent_corpus.insert_document(latent_corpus.normalize_document(
            Document {
                id,
                kind,
                category,
                language: "lang0".to_string(),
                sections: latent,
            },
            0,
        )?)?;
        Ok(())
    };

    for n in 0..config.n_freelancers {
        let c = n % config.n_categories;
        let lang = rng.gen_range(0..config.n_languages);
        let own = sample_sorted(&mut rng, &skills[c], config.skills_per_profile);
        let role = format!("role{c}x{}", rng.gen_range(0..N_ROLES));
        let desc = fillers(&mut rng, config.description_words);
        insert_both(
            &mut corpus,
            &mut latent_corpus,
            format!("f{n:05}"),
            DocumentKind::Profile,
            format!("cat{c}"),
            lang,
            vec![
                ("job_title", vec![role]),
                ("description", desc),
                ("job_family", vec![format!("fam{c}")]),
                ("job_category", vec![format!("cat{c}")]),
                ("skills", own.clone()),
            ],
        )?;
        freelancer_skills.push(own);
    }

    // Proposals plus labelled interactions.
    let mut ts_index = 0i64;
    for m in 0..config.n_projects {
        let c = m % config.n_categories;
        let lang = rng.gen_range(0..config.n_languages);
        let members: Vec<usize> = (0..config.n_freelancers).filter(|n| n % config.n_categories == c).collect();
        let ideal = members[rng.gen_range(0..members.len())];
        let mandatory = sample_sorted(&mut rng, &freelancer_skills[ideal], config.proposal_mandatory_skills);
        let remaining: Vec<String> = skills[c].iter().filter(|s| !mandatory.contains(s)).cloned().collect();
        let bonus = sample_sorted(&mut rng, &remaining, config.proposal_bonus_skills);
        let role = format!("role{c}x{}", rng.gen_range(0..N_ROLES));
        let desc = fillers(&mut rng, config.description_words);
        let mut title = vec![role.clone()];
        title.extend(fillers(&mut rng, 2));
        let project_id = format!("p{m:05}");
        insert_both(
            &mut corpus,
            &mut latent_corpus,
            project_id.clone(),
            DocumentKind::Proposal,
            format!("cat{c}"),
            lang,
            vec![
                ("mission_title", title),
                ("job_title", vec![role]),
                ("description", desc),
                ("job_family", vec![format!("fam{c}")]),
                ("job_category", vec![format!("cat{c}")]),
                ("mandatory_skills", mandatory.clone()),
                ("bonus_skills", bonus.clone()),
            ],
        )?;

        let wanted: BTreeSet<&String> = mandatory.iter().chain(bonus.iter()).collect();
        let mut ranked: Vec<(usize, usize)> = members
            .iter()
            .map(|&n| {
                let overlap = freelancer_skills[n].iter().filter(|s| wanted.contains(s)).count();
                (n, overlap)
            })
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut emit = |n: usize, label: Label, ts_index: &mut i64| {
            corpus.interactions.push(Interaction {
                project_id: project_id.clone(),
                freelancer_id: format!("f{n:05}"),
                label,
                ts: config.base_timestamp + *ts_index * 3600,
            });
            *ts_index += 1;
        };
        for &(n, _) in ranked.iter().take(config.positives_per_project) {
            emit(n, Label::Positive, &mut ts_index);
        }
        for &(n, _) in ranked.iter().rev().take(config.negatives_per_project) {
            emit(n, Label::Negative, &mut ts_index);
        }
    }
    latent_corpus.interactions = corpus.interactions.clone();

    Ok(SynthOutput {
        corpus,
        latent_corpus,
        token_aliases: surfacer.aliases,
    })
}
