use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CatalogMatrix, ExposureLog, GroundTruth, ItemCatalog, TaskSet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub latent_dim: usize,
    pub requests_per_user: usize,
    pub items_per_request: usize,
    /// Log-normal inter-request gap: mean and std of ln(seconds).
    pub gap_log_mean: f64,
    pub gap_log_std: f64,
    pub task_names: Vec<String>,
    /// Per-task logit offsets; missing entries default to 0.
    pub task_biases: Vec<f64>,
    pub drift_rate: f64,
    pub recency_bonus: f64,
    pub similarity_threshold: f64,
    /// Items are grouped into clusters sharing a centroid direction.
    pub num_clusters: usize,
    pub cluster_spread: f64,
    /// Scale applied to item latent vectors.
    pub item_scale: f64,
    /// Norm scale of the preference direction every user starts near.
    pub global_preference: f64,
    /// Probability a served item comes from the cluster of an item in the
    /// previous request.
    pub same_cluster_rate: f64,
    /// Width of the frozen side embedding; 0 disables it.
    pub side_dim: usize,
    pub side_noise: f64,
    pub start_ts: i64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_users: 500,
            num_items: 1000,
            latent_dim: 8,
            requests_per_user: 50,
            items_per_request: 4,
            gap_log_mean: 7.0,
            gap_log_std: 1.5,
            task_names: TaskSet::default().names().to_vec(),
            task_biases: vec![0.0, -1.5],
            drift_rate: 0.02,
            recency_bonus: 1.5,
            similarity_threshold: 0.8,
            num_clusters: 32,
            cluster_spread: 0.3,
            item_scale: 1.0,
            global_preference: 1.0,
            same_cluster_rate: 0.5,
            side_dim: 0,
            side_noise: 0.5,
            start_ts: 1_700_000_000,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<TaskSet> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_users == 0 {
            return fail("num_users must be positive");
        }
        if self.num_items == 0 {
            return fail("num_items must be positive");
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be positive");
        }
        if self.items_per_request == 0 {
            return fail("items_per_request must be positive");
        }
        if self.requests_per_user == 0 {
            return fail("requests_per_user must be positive");
        }
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return fail("drift_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.same_cluster_rate) {
            return fail("same_cluster_rate must lie in [0, 1]");
        }
        if self.num_clusters == 0 {
            return fail("num_clusters must be positive");
        }
        if self.gap_log_std < 0.0 || !self.gap_log_std.is_finite() {
            return fail("gap_log_std must be finite and non-negative");
        }
        TaskSet::new(self.task_names.iter().cloned())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    fn task_bias(&self, k: usize) -> f64 {
        self.task_biases.get(k).copied().unwrap_or(0.0)
    }
}

pub struct GeneratedData {
    pub tasks: TaskSet,
    pub logs: Vec<ExposureLog>,
    pub truth: Vec<GroundTruth>,
    pub catalog: ItemCatalog,
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Catalog64 {
    latents: Vec<Vec<f64>>,
    norms: Vec<f64>,
    global_preference: Vec<f64>,
}

impl Catalog64 {
    fn cosine(&self, a: usize, b: usize) -> f64 {
        let denom = self.norms[a] * self.norms[b];
        if denom == 0.0 {
            return 0.0;
        }
        dot(&self.latents[a], &self.latents[b]) / denom
    }
}

fn build_catalog(config: &GeneratorConfig) -> (Catalog64, ItemCatalog) {
    let dim = config.latent_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0));
    let centroids: Vec<Vec<f64>> = (0..config.num_clusters).map(|_| gaussian(&mut rng, dim)).collect();
    let scale = config.item_scale / (dim as f64).sqrt();
    let latents: Vec<Vec<f64>> = (0..config.num_items)
        .map(|i| {
            let c = &centroids[i % config.num_clusters];
            let z = gaussian(&mut rng, dim);
            c.iter()
                .zip(&z)
                .map(|(c, z)| scale * (c + config.cluster_spread * z))
                .collect()
        })
        .collect();
    let norms = latents.iter().map(|v| dot(v, v).sqrt()).collect();
    let global_preference = gaussian(&mut rng, dim)
        .into_iter()
        .map(|g| g * config.global_preference)
        .collect();

    let mut latent_matrix = CatalogMatrix::zeros(config.num_items, dim);
    for (i, v) in latents.iter().enumerate() {
        for (o, x) in latent_matrix.row_mut(i).iter_mut().zip(v) {
            *o = *x as f32;
        }
    }

    let side = (config.side_dim > 0).then(|| {
        let proj: Vec<Vec<f64>> = (0..config.side_dim)
            .map(|_| gaussian(&mut rng, dim).into_iter().map(|g| g / scale.max(1e-12) / (dim as f64).sqrt()).collect())
            .collect();
        let mut side = CatalogMatrix::zeros(config.num_items, config.side_dim);
        for (i, v) in latents.iter().enumerate() {
            let noise = gaussian(&mut rng, config.side_dim);
            for (s, (row, n)) in side.row_mut(i).iter_mut().zip(proj.iter().zip(&noise)) {
                *s = (dot(row, v) + config.side_noise * n) as f32;
            }
        }
        side
    });

    (
        Catalog64 {
            latents,
            norms,
            global_preference,
        },
        ItemCatalog {
            latents: latent_matrix,
            side,
        },
    )
}

fn draw_item(
    rng: &mut ChaCha8Rng,
    config: &GeneratorConfig,
    previous: &[usize],
) -> usize {
    if !previous.is_empty() && rng.random::<f64>() < config.same_cluster_rate {
        let anchor = previous[rng.random_range(0..previous.len())];
        let cluster = anchor % config.num_clusters;
        let members = (config.num_items - cluster).div_ceil(config.num_clusters);
        cluster + config.num_clusters * rng.random_range(0..members)
    } else {
        rng.random_range(0..config.num_items)
    }
}

struct UserStream {
    logs: Vec<ExposureLog>,
    truth: Vec<GroundTruth>,
}

fn generate_user(config: &GeneratorConfig, catalog: &Catalog64, tasks: usize, user: usize) -> Result<UserStream> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, user as u64 + 1));
    let dim = config.latent_dim;
    let gap = LogNormal::new(config.gap_log_mean, config.gap_log_std)
        .map_err(|e| Error::Config(format!("inter-request gap: {e}")))?;

    let mut latent: Vec<f64> = gaussian(&mut rng, dim)
        .iter()
        .zip(&catalog.global_preference)
        .map(|(z, g)| z + g)
        .collect();
    let mut ts = config.start_ts + rng.random_range(0..86_400);
    let mut previous: Vec<(usize, Vec<u8>)> = Vec::new();
    let mut out = UserStream {
        logs: Vec::with_capacity(config.requests_per_user * config.items_per_request),
        truth: Vec::with_capacity(config.requests_per_user * config.items_per_request),
    };

    for r in 0..config.requests_per_user {
        if r > 0 {
            // Mean-reverting walk around the shared preference: the
            // deviation stays standard normal at every request.
            let keep = 1.0 - config.drift_rate;
            let fresh = (1.0 - keep * keep).sqrt();
            let eps = gaussian(&mut rng, dim);
            for ((u, e), g) in latent.iter_mut().zip(&eps).zip(&catalog.global_preference) {
                *u = g + keep * (*u - g) + fresh * e;
            }
            let g: f64 = gap.sample(&mut rng);
            ts += (g.round() as i64).max(1);
        }
        let request_id = (user * config.requests_per_user + r) as u64;
        let previous_items: Vec<usize> = previous.iter().map(|(i, _)| *i).collect();
        let mut current = Vec::with_capacity(config.items_per_request);
        for _ in 0..config.items_per_request {
            let item = draw_item(&mut rng, config, &previous_items);
            let affinity = dot(&latent, &catalog.latents[item]);
            let mut probs = Vec::with_capacity(tasks);
            let mut labels = Vec::with_capacity(tasks);
            for k in 0..tasks {
                let recent = previous.iter().any(|(j, l)| {
                    l[k] == 1 && catalog.cosine(*j, item) > config.similarity_threshold
                });
                let bonus = if recent { config.recency_bonus } else { 0.0 };
                let p = sigmoid(affinity + config.task_bias(k) + bonus);
                probs.push(p);
                labels.push(u8::from(rng.random::<f64>() < p));
            }
            out.logs.push(ExposureLog {
                user_id: user as u64,
                request_id,
                ts,
                item_id: item as u64,
                labels: labels.clone(),
            });
            out.truth.push(GroundTruth {
                user_id: user as u64,
                request_id,
                item_id: item as u64,
                probs,
            });
            current.push((item, labels));
        }
        previous = current;
    }
    Ok(out)
}

/// Draws the full dataset. Output depends only on `config` (including its
/// seed); users are generated from independent seeded streams and emitted
/// in ascending user id order.
pub fn generate_logs(config: &GeneratorConfig) -> Result<GeneratedData> {
    let tasks = config.validate()?;
    let (catalog64, catalog) = build_catalog(config);
    let mut logs = Vec::with_capacity(config.num_users * config.requests_per_user * config.items_per_request);
    let mut truth = Vec::with_capacity(logs.capacity());
    for user in 0..config.num_users {
        let stream = generate_user(config, &catalog64, tasks.len(), user)?;
        logs.extend(stream.logs);
        truth.extend(stream.truth);
    }
    Ok(GeneratedData {
        tasks,
        logs,
        truth,
        catalog,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            num_users: 10,
            num_items: 50,
            requests_per_user: 6,
            items_per_request: 3,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_empty_population() {
        let mut c = small();
        c.num_users = 0;
        assert!(matches!(generate_logs(&c), Err(Error::Config(_))));
        let mut c = small();
        c.num_items = 0;
        assert!(matches!(generate_logs(&c), Err(Error::Config(_))));
    }

    #[test]
    fn neutral_model_gives_half() {
        let c = GeneratorConfig {
            task_names: vec!["click".into()],
            task_biases: vec![0.0],
            drift_rate: 0.0,
            recency_bonus: 0.0,
            item_scale: 0.0,
            ..small()
        };
        let data = generate_logs(&c).unwrap();
        assert!(data.truth.iter().all(|t| t.probs == vec![0.5]));
    }

    #[test]
    fn counts_and_request_ids() {
        let c = GeneratorConfig {
            num_users: 100,
            requests_per_user: 50,
            items_per_request: 4,
            ..small()
        };
        let data = generate_logs(&c).unwrap();
        assert_eq!(data.logs.len(), 20_000);
        let requests: HashSet<u64> = data.logs.iter().map(|l| l.request_id).collect();
        assert_eq!(requests.len(), 5_000);
        super::super::validate_logs(&data.logs, &data.tasks).unwrap();
    }

    #[test]
    fn same_seed_same_output() {
        let a = generate_logs(&small()).unwrap();
        let b = generate_logs(&small()).unwrap();
        assert_eq!(a.logs, b.logs);
        assert_eq!(a.truth, b.truth);
        let mut other = small();
        other.seed = 4;
        assert_ne!(generate_logs(&other).unwrap().logs, a.logs);
    }

    #[test]
    fn side_embeddings_have_catalog_rows() {
        let c = GeneratorConfig { side_dim: 6, ..small() };
        let data = generate_logs(&c).unwrap();
        let side = data.catalog.side.unwrap();
        assert_eq!((side.rows, side.dim), (50, 6));
        assert_eq!(data.catalog.latents.rows, 50);
    }
}
