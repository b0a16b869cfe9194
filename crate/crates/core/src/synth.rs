//! Synthetic planted-keyword datasets.
//!
//! Each class owns a small set of discriminative characters; every example
//! embeds one or two occurrences of one of its class's keywords in random
//! filler text. Filler characters are shared across classes and never
//! include any keyword, so the dataset is separable by a keyword lookup.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example, LabelMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Total distinct characters in the generated alphabet.
    pub vocab_size: usize,
    pub per_class_train: usize,
    pub per_class_dev: usize,
    pub per_class_test: usize,
    pub keywords_per_class: usize,
    /// Text length bounds in characters.
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            vocab_size: 200,
            per_class_train: 500,
            per_class_dev: 125,
            per_class_test: 125,
            keywords_per_class: 3,
            min_len: 10,
            max_len: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub labels: LabelMap,
    /// Keyword characters per class, disjoint across classes and from the
    /// filler alphabet.
    pub keywords: Vec<Vec<char>>,
    pub filler: Vec<char>,
}

impl SynthData {
    /// Classifies a text by scanning for planted keywords; `None` when no
    /// class keyword occurs.
    pub fn keyword_lookup(&self, text: &str) -> Option<usize> {
        for ch in text.chars() {
            for (class, kws) in self.keywords.iter().enumerate() {
                if kws.contains(&ch) {
                    return Some(class);
                }
            }
        }
        None
    }
}

/// Generates balanced train/dev/test splits. Deterministic given the config.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.classes < 2 {
        return Err(Error::Config(
            "synthetic dataset needs at least 2 classes".into(),
        ));
    }
    if cfg.keywords_per_class < 1 {
        return Err(Error::Config(
            "keywords_per_class must be at least 1".into(),
        ));
    }
    let n_keywords = cfg.classes * cfg.keywords_per_class;
    if cfg.vocab_size < n_keywords + 10 {
        return Err(Error::Config(format!(
            "vocab_size {} too small for {} keywords plus filler",
            cfg.vocab_size, n_keywords
        )));
    }
    if cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(Error::Config("need 2 <= min_len <= max_len".into()));
    }
    if cfg.per_class_train == 0 || cfg.per_class_dev == 0 || cfg.per_class_test == 0 {
        return Err(Error::Config(
            "every split needs at least one example per class".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut alphabet: Vec<char> = (0..cfg.vocab_size as u32)
        .map(|i| char::from_u32(0x4E00 + i).expect("CJK block is contiguous"))
        .collect();
    alphabet.shuffle(&mut rng);
    let keywords: Vec<Vec<char>> = (0..cfg.classes)
        .map(|c| alphabet[c * cfg.keywords_per_class..(c + 1) * cfg.keywords_per_class].to_vec())
        .collect();
    let filler: Vec<char> = alphabet[n_keywords..].to_vec();

    let labels = LabelMap::new((0..cfg.classes).map(|c| format!("class_{c}")).collect())?;

    let make_example = |class: usize, rng: &mut ChaCha8Rng| -> Example {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut chars: Vec<char> = (0..len)
            .map(|_| filler[rng.gen_range(0..filler.len())])
            .collect();
        let occurrences = rng.gen_range(1..=2usize).min(len);
        let mut positions: Vec<usize> = (0..len).collect();
        positions.shuffle(rng);
        for &pos in positions.iter().take(occurrences) {
            let kw = keywords[class][rng.gen_range(0..cfg.keywords_per_class)];
            chars[pos] = kw;
        }
        Example {
            text: chars.into_iter().collect(),
            label: class,
        }
    };

    let make_split = |per_class: usize, rng: &mut ChaCha8Rng| -> Dataset {
        let mut examples = Vec::with_capacity(per_class * cfg.classes);
        for class in 0..cfg.classes {
            for _ in 0..per_class {
                examples.push(make_example(class, rng));
            }
        }
        Dataset { examples }
    };

    let train = make_split(cfg.per_class_train, &mut rng);
    let dev = make_split(cfg.per_class_dev, &mut rng);
    let test = make_split(cfg.per_class_test, &mut rng);

    Ok(SynthData {
        train,
        dev,
        test,
        labels,
        keywords,
        filler,
    })
}
