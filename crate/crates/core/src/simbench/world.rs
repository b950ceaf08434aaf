//! Latent-competence simulator.
//!
//! Each instance carries a competence (probability the simulated model knows
//! the answer) and a latent confidence. The regime decides how the two relate:
//!
//! * `in_distribution`: bimodal competence, confidence tracks competence.
//! * `out_of_distribution`: half of the well-known instances get a low
//!   confidence (correct but unsure).
//! * `adversarial`: lower, unimodal competence and half of the poorly-known
//!   instances get a high confidence (wrong but sure).
//!
//! Answers to generated rephrasings agree with the original answer with
//! probability `competence^gamma`. All randomness is derived from SHA-256 of
//! `(seed, instance, request)`, so the simulator is a pure function.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{hash_u64, unit_interval};
use crate::domain::{normalize_answer, ImageRef, VisualQuestionInstance};

/// Image root used for simulated datasets.
pub const SIM_IMAGE_ROOT: &str = "sim://images/";

/// Fixed answer vocabulary. Doubles as the candidate list of every instance.
pub const ANSWER_VOCAB: [&str; 30] = [
    "yes", "no", "1", "2", "3", "4", "white", "black", "red", "blue", "green", "brown", "gray",
    "dog", "cat", "horse", "pizza", "frisbee", "tennis", "baseball", "skiing", "surfing",
    "kitchen", "bathroom", "grass", "water", "table", "train", "bus", "umbrella",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("world size must be at least 1")]
    EmptyWorld,
    #[error("unknown image_uri {0:?}")]
    UnknownImage(String),
    #[error("unknown regime {0:?}")]
    UnknownRegime(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    InDistribution,
    #[serde(alias = "ood")]
    OutOfDistribution,
    Adversarial,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::InDistribution => "in_distribution",
            Regime::OutOfDistribution => "out_of_distribution",
            Regime::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "in_distribution" | "id" => Ok(Regime::InDistribution),
            "out_of_distribution" | "ood" => Ok(Regime::OutOfDistribution),
            "adversarial" | "adv" => Ok(Regime::Adversarial),
            other => Err(SimError::UnknownRegime(other.to_owned())),
        }
    }
}

/// Free knobs of the generative model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Rephrasing agreement probability is `competence^gamma`.
    pub gamma: f64,
    /// Raw scores are `latent confidence * raw_scale`, mimicking the
    /// truncated score range of autoregressive rank classification.
    pub raw_scale: f64,
    /// Std-dev of the confidence noise around competence.
    pub confidence_noise: f64,
    /// Fraction of eligible instances whose confidence is shifted by the regime.
    pub shift_fraction: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            raw_scale: 0.07,
            confidence_noise: 0.08,
            shift_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimInstance {
    pub instance: VisualQuestionInstance,
    pub question_id: u64,
    pub image_id: u64,
    pub true_answer: String,
    pub competence: f64,
    /// Latent confidence minus competence.
    pub confidence_bias: f64,
}

impl SimInstance {
    pub fn latent_confidence(&self) -> f64 {
        (self.competence + self.confidence_bias).clamp(0.01, 1.0)
    }

    fn family_token(&self) -> String {
        format!("qf{}", self.question_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimWorld {
    pub seed: u64,
    pub regime: Regime,
    pub params: SimParams,
    pub instances: Vec<SimInstance>,
    by_image: HashMap<String, usize>,
}

/// Dataset name used for simulated worlds; prefixes every instance id.
pub fn sim_dataset_name(regime: Regime, seed: u64) -> String {
    format!("sim-{}-{seed}", regime.as_str())
}

/// Conventional COCO val2014 file name for an image id.
pub fn coco_image_name(image_id: u64) -> String {
    format!("COCO_val2014_{image_id:012}.jpg")
}

pub fn make_world(seed: u64, n: usize, regime: Regime) -> Result<SimWorld, SimError> {
    make_world_with(seed, n, regime, SimParams::default())
}

pub fn make_world_with(
    seed: u64,
    n: usize,
    regime: Regime,
    params: SimParams,
) -> Result<SimWorld, SimError> {
    if n == 0 {
        return Err(SimError::EmptyWorld);
    }
    let name = sim_dataset_name(regime, seed);
    let candidates: Vec<String> = ANSWER_VOCAB.iter().map(|s| s.to_string()).collect();
    let instances: Vec<SimInstance> = (0..n as u64)
        .map(|i| sim_instance(seed, regime, &params, &name, &candidates, i))
        .collect();
    let by_image = instances
        .iter()
        .enumerate()
        .map(|(i, s)| (s.instance.image.uri.clone(), i))
        .collect();
    Ok(SimWorld {
        seed,
        regime,
        params,
        instances,
        by_image,
    })
}

fn sim_instance(
    seed: u64,
    regime: Regime,
    params: &SimParams,
    dataset: &str,
    candidates: &[String],
    index: u64,
) -> SimInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_u64(&[
        b"sim-instance",
        &seed.to_le_bytes(),
        regime.as_str().as_bytes(),
        &index.to_le_bytes(),
    ]));
    let (alpha, beta) = match regime {
        Regime::InDistribution => (0.6, 0.25),
        Regime::OutOfDistribution => (0.5, 0.4),
        Regime::Adversarial => (1.0, 1.6),
    };
    let competence: f64 = Beta::new(alpha, beta).expect("valid beta").sample(&mut rng);
    let noise = Normal::new(0.0, params.confidence_noise).expect("valid normal");
    let mut confidence = competence + noise.sample(&mut rng);
    let shift_roll: f64 = rng.random();
    match regime {
        Regime::InDistribution => {}
        Regime::OutOfDistribution => {
            if competence > 0.5 && shift_roll < params.shift_fraction {
                confidence = competence * rng.random_range(0.15..0.45);
            }
        }
        Regime::Adversarial => {
            if competence < 0.5 && shift_roll < params.shift_fraction {
                confidence = rng.random_range(0.7..1.0);
            }
        }
    }
    let confidence = confidence.clamp(0.01, 1.0);

    let true_idx = rng.random_range(0..candidates.len());
    let true_answer = candidates[true_idx].clone();
    let distractors = rng.random_range(0..=3usize);
    let mut annotations = vec![true_answer.clone(); 10 - distractors];
    for _ in 0..distractors {
        let mut j = rng.random_range(0..candidates.len() - 1);
        if j >= true_idx {
            j += 1;
        }
        annotations.push(candidates[j].clone());
    }

    let question_id = index;
    let image_id = index;
    let instance = VisualQuestionInstance {
        instance_id: format!("{dataset}/{question_id}"),
        image: ImageRef::new(format!("{SIM_IMAGE_ROOT}{}", coco_image_name(image_id)))
            .expect("non-empty uri"),
        question: format!("what is shown in image {image_id} qf{question_id}"),
        annotations,
        candidates: candidates.to_vec(),
    };
    SimInstance {
        instance,
        question_id,
        image_id,
        true_answer,
        competence,
        confidence_bias: confidence - competence,
    }
}

impl SimWorld {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// The public side of the world: instances as a dataset loader would see them.
    pub fn dataset(&self) -> Vec<VisualQuestionInstance> {
        self.instances.iter().map(|s| s.instance.clone()).collect()
    }

    pub fn lookup(&self, image_uri: &str) -> Result<(usize, &SimInstance), SimError> {
        self.by_image
            .get(image_uri)
            .map(|&i| (i, &self.instances[i]))
            .ok_or_else(|| SimError::UnknownImage(image_uri.to_owned()))
    }

    fn roll(&self, index: usize, parts: &[&[u8]]) -> u64 {
        let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 3);
        let seed = self.seed.to_le_bytes();
        let idx = (index as u64).to_le_bytes();
        all.push(&seed);
        all.push(self.regime.as_str().as_bytes());
        all.push(&idx);
        all.extend_from_slice(parts);
        hash_u64(&all)
    }

    /// A vocabulary answer different from `avoid`, picked by `h`.
    fn other_answer(avoid: &str, h: u64) -> String {
        let others: Vec<&str> = ANSWER_VOCAB
            .iter()
            .copied()
            .filter(|a| *a != avoid)
            .collect();
        others[(h % others.len() as u64) as usize].to_owned()
    }

    /// What the simulated model answers to the instance's original question.
    pub fn original_answer(&self, index: usize) -> String {
        let inst = &self.instances[index];
        if unit_interval(self.roll(index, &[b"original"])) < inst.competence {
            inst.true_answer.clone()
        } else {
            Self::other_answer(&inst.true_answer, self.roll(index, &[b"original-wrong"]))
        }
    }

    /// Raw per-candidate scores for one question about one image.
    pub fn sim_answer(
        &self,
        image_uri: &str,
        question: &str,
        candidates: &[String],
    ) -> Result<Vec<f64>, SimError> {
        let (index, inst) = self.lookup(image_uri)?;
        let q = question.as_bytes();
        let (target, confidence) = if question == inst.instance.question {
            (self.original_answer(index), inst.latent_confidence())
        } else {
            let jitter = (unit_interval(self.roll(index, &[b"jitter", q])) - 0.5) * 0.1;
            let conf = (inst.latent_confidence() + jitter).clamp(0.01, 1.0);
            if question
                .split_whitespace()
                .any(|t| t == inst.family_token())
            {
                let original = self.original_answer(index);
                let agree = inst.competence.powf(self.params.gamma);
                if unit_interval(self.roll(index, &[b"agree", q])) < agree {
                    (original, conf)
                } else {
                    (
                        Self::other_answer(&original, self.roll(index, &[b"disagree", q])),
                        conf,
                    )
                }
            } else {
                // Not a question about this image's family: answer arbitrarily.
                let h = self.roll(index, &[b"foreign", q]);
                (
                    ANSWER_VOCAB[(h % ANSWER_VOCAB.len() as u64) as usize].to_owned(),
                    0.01 + 0.3 * unit_interval(h.rotate_left(17)),
                )
            }
        };
        let top = confidence * self.params.raw_scale;
        let target_norm = normalize_answer(&target);
        let target_idx = candidates
            .iter()
            .position(|c| normalize_answer(c) == target_norm)
            .unwrap_or_else(|| {
                (self.roll(index, &[b"fallback", q]) % candidates.len().max(1) as u64) as usize
            });
        Ok(candidates
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == target_idx {
                    top
                } else {
                    top * 0.9 * unit_interval(self.roll(index, &[b"score", q, c.as_bytes()]))
                }
            })
            .collect())
    }

    /// `k` generated questions, each embedding the answer, sample index,
    /// seed and the source instance's question-family token.
    pub fn sim_rephrase(
        &self,
        image_uri: &str,
        answer: &str,
        k: u32,
        _top_p: f64,
        seed: u64,
    ) -> Result<Vec<String>, SimError> {
        let (_, inst) = self.lookup(image_uri)?;
        let family = inst.family_token();
        Ok((0..k)
            .map(|i| format!("{answer} question {i} seed {seed} {family}"))
            .collect())
    }
}
