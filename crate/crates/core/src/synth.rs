//! Two-modality toy retrieval tasks.
//!
//! A hidden unit key is rendered as a query (quantized tokens from one fixed
//! projection) and as a document (continuous patches plus quantized tokens
//! from other fixed projections). Hard negatives are keys rotated by a fixed
//! angle away from the positive's key.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, keyed_rng};
use crate::sequence::{Element, TokenSequence};
use crate::vocab;

/// Projected coordinates are clipped to this many standard deviations
/// before quantization.
const QUANT_RANGE: f32 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default = "defaults::d_latent")]
    pub d_latent: usize,
    #[serde(default = "defaults::text_len")]
    pub text_len: usize,
    #[serde(default = "defaults::n_patches")]
    pub n_patches: usize,
    /// Width of each continuous patch; must equal the model width.
    #[serde(default = "defaults::patch_dim")]
    pub patch_dim: usize,
    #[serde(default = "defaults::noise_std")]
    pub noise_std: f32,
    #[serde(default = "defaults::hard_negative_angle")]
    pub hard_negative_angle: f64,
    pub seed: u64,
}

mod defaults {
    pub fn d_latent() -> usize {
        16
    }
    pub fn text_len() -> usize {
        12
    }
    pub fn n_patches() -> usize {
        8
    }
    pub fn patch_dim() -> usize {
        128
    }
    pub fn noise_std() -> f32 {
        0.1
    }
    pub fn hard_negative_angle() -> f64 {
        0.35
    }
}

impl TaskConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            d_latent: defaults::d_latent(),
            text_len: defaults::text_len(),
            n_patches: defaults::n_patches(),
            patch_dim: defaults::patch_dim(),
            noise_std: defaults::noise_std(),
            hard_negative_angle: defaults::hard_negative_angle(),
            seed,
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("{path}.{field}"), msg));
        if self.d_latent < 2 {
            return bad("d_latent", "must be at least 2");
        }
        if self.text_len == 0 {
            return bad("text_len", "must be at least 1");
        }
        if self.patch_dim == 0 {
            return bad("patch_dim", "must be at least 1");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std", "must be finite and non-negative");
        }
        let a = self.hard_negative_angle;
        if !(a > 0.0 && a <= std::f64::consts::FRAC_PI_2) {
            return bad("hard_negative_angle", "must lie in (0, pi/2]");
        }
        Ok(())
    }

    pub fn query_len(&self) -> usize {
        1 + self.text_len
    }

    pub fn doc_len(&self) -> usize {
        self.n_patches + self.text_len
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentKey {
    pub vector: Vec<f64>,
    pub class_id: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    pub query: TokenSequence,
    pub positive: TokenSequence,
    pub hard_negative: TokenSequence,
}

/// Queries, a shared document corpus, and per-query candidate pools
/// (indices into the corpus) with the position of the relevant document.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    pub queries: Vec<TokenSequence>,
    pub corpus: Vec<TokenSequence>,
    pub pools: Vec<Vec<u32>>,
    pub targets: Vec<usize>,
}

impl EvalSet {
    pub fn pool_size(&self) -> usize {
        self.pools.first().map_or(0, Vec::len)
    }
}

/// Fixed random projections shared by every instance of a task.
#[derive(Clone, Debug)]
pub struct World {
    cfg: TaskConfig,
    query_proj: Vec<f64>,
    doc_proj: Vec<f64>,
    patch_proj: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn apply(m: &[f64], rows: usize, z: &[f64]) -> Vec<f64> {
    let d = z.len();
    (0..rows).map(|r| m[r * d..(r + 1) * d].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
}

fn quantize(x: f32) -> u32 {
    let t = ((x + QUANT_RANGE) / (2.0 * QUANT_RANGE) * vocab::LEVELS as f32).floor();
    t.clamp(0.0, (vocab::LEVELS - 1) as f32) as u32
}

impl World {
    pub fn new(cfg: &TaskConfig) -> Result<Self> {
        cfg.validate("task")?;
        let mut rng = keyed_rng(cfg.seed, domain::WORLD, 0);
        let d = cfg.d_latent;
        // unit-variance rows for unit keys
        Ok(Self {
            cfg: cfg.clone(),
            query_proj: gaussian(&mut rng, cfg.text_len * d),
            doc_proj: gaussian(&mut rng, cfg.text_len * d),
            patch_proj: gaussian(&mut rng, cfg.n_patches * cfg.patch_dim * d),
        })
    }

    pub fn config(&self) -> &TaskConfig {
        &self.cfg
    }

    pub fn sample_key(&self, rng: &mut ChaCha8Rng, class_id: u64) -> LatentKey {
        LatentKey {
            vector: unit(gaussian(rng, self.cfg.d_latent)),
            class_id,
        }
    }

    /// Key at exactly `hard_negative_angle` from `key`, in a random direction.
    pub fn rotate(&self, key: &LatentKey, rng: &mut ChaCha8Rng) -> LatentKey {
        let z = &key.vector;
        let mut u = gaussian(rng, z.len());
        let proj: f64 = u.iter().zip(z).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(z).for_each(|(a, b)| *a -= proj * b);
        let u = unit(u);
        let (s, c) = self.cfg.hard_negative_angle.sin_cos();
        LatentKey {
            vector: z.iter().zip(&u).map(|(a, b)| c * a + s * b).collect(),
            class_id: key.class_id,
        }
    }

    fn noisy_tokens(&self, proj: &[f64], z: &[f64], base: u32, rng: &mut ChaCha8Rng) -> Vec<Element> {
        apply(proj, self.cfg.text_len, z)
            .into_iter()
            .map(|x| {
                let e: f32 = rng.sample(StandardNormal);
                Element::Token(base + quantize(x as f32 + self.cfg.noise_std * e))
            })
            .collect()
    }

    pub fn render_query(&self, key: &LatentKey, rng: &mut ChaCha8Rng) -> TokenSequence {
        let mut el = vec![Element::Token(vocab::QUERY_TASK)];
        el.extend(self.noisy_tokens(&self.query_proj, &key.vector, vocab::QUERY_TEXT_BASE, rng));
        TokenSequence::new(el)
    }

    pub fn render_doc(&self, key: &LatentKey, rng: &mut ChaCha8Rng) -> TokenSequence {
        let p = self.cfg.patch_dim;
        let flat = apply(&self.patch_proj, self.cfg.n_patches * p, &key.vector);
        let mut el: Vec<Element> = flat
            .chunks(p)
            .map(|c| {
                Element::Vector(
                    c.iter()
                        .map(|&x| x as f32 + self.cfg.noise_std * rng.sample::<f32, _>(StandardNormal))
                        .collect(),
                )
            })
            .collect();
        el.extend(self.noisy_tokens(&self.doc_proj, &key.vector, vocab::DOC_TEXT_BASE, rng));
        TokenSequence::new(el)
    }

    /// Training instance `index`; depends only on (seed, index).
    pub fn instance(&self, index: u64) -> TrainingInstance {
        let mut rng = keyed_rng(self.cfg.seed, domain::TRAIN, index);
        let key = self.sample_key(&mut rng, index);
        let neg = self.rotate(&key, &mut rng);
        TrainingInstance {
            query: self.render_query(&key, &mut rng),
            positive: self.render_doc(&key, &mut rng),
            hard_negative: self.render_doc(&neg, &mut rng),
        }
    }

    /// Held-out pools. A `hard_fraction` share of each query's distractors
    /// (rounded) sits at the hard-negative angle; the rest are relevant
    /// documents of other queries or fresh random documents.
    pub fn eval_set(&self, n_queries: usize, pool_size: usize, hard_fraction: f64) -> Result<EvalSet> {
        if pool_size < 2 {
            return Err(Error::config("pool_size", "must be at least 2"));
        }
        if n_queries == 0 {
            return Err(Error::config("n_eval_queries", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&hard_fraction) {
            return Err(Error::config("hard_fraction", "must lie in [0, 1]"));
        }
        let n_hard = ((pool_size - 1) as f64 * hard_fraction).round() as usize;
        let n_rand = pool_size - 1 - n_hard;
        let mut queries = Vec::with_capacity(n_queries);
        let mut keys = Vec::with_capacity(n_queries);
        let mut corpus = Vec::new();
        for i in 0..n_queries {
            let mut rng = keyed_rng(self.cfg.seed, domain::EVAL, i as u64);
            let key = self.sample_key(&mut rng, i as u64);
            queries.push(self.render_query(&key, &mut rng));
            corpus.push(self.render_doc(&key, &mut rng));
            keys.push(key);
        }
        // fresh random documents when other queries' positives run short
        let extra = n_rand.saturating_sub(n_queries - 1);
        for e in 0..extra {
            let mut rng = keyed_rng(self.cfg.seed, domain::EVAL, (n_queries + e) as u64);
            let key = self.sample_key(&mut rng, (n_queries + e) as u64);
            corpus.push(self.render_doc(&key, &mut rng));
        }
        let shared = corpus.len();
        let mut pools = Vec::with_capacity(n_queries);
        let mut targets = Vec::with_capacity(n_queries);
        for (i, key) in keys.iter().enumerate() {
            let mut rng = keyed_rng(self.cfg.seed, domain::EVAL, (1u64 << 40) + i as u64);
            let mut pool: Vec<u32> = Vec::with_capacity(pool_size);
            for _ in 0..n_hard {
                let k = self.rotate(key, &mut rng);
                pool.push(corpus.len() as u32);
                corpus.push(self.render_doc(&k, &mut rng));
            }
            // distinct shared documents other than this query's own
            for j in sample(&mut rng, shared - 1, n_rand) {
                pool.push(if j >= i { j + 1 } else { j } as u32);
            }
            let target = rng.random_range(0..pool_size);
            pool.insert(target, i as u32);
            pools.push(pool);
            targets.push(target);
        }
        Ok(EvalSet {
            queries,
            corpus,
            pools,
            targets,
        })
    }
}
