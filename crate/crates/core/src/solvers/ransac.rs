use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SolverError;

/// A model that can be fitted to minimal samples and scored per datum.
pub trait Estimator<D> {
    type Model: Clone;

    /// Minimal number of data needed by [`Estimator::fit`].
    fn sample_size(&self) -> usize;

    /// Fit a hypothesis to a minimal sample.
    fn fit(&self, sample: &[&D]) -> Option<Self::Model>;

    /// Refit on a consensus set, starting from the best hypothesis.
    fn refit(&self, inliers: &[&D], previous: &Self::Model) -> Option<Self::Model> {
        let _ = previous;
        self.fit(inliers)
    }

    /// Residual of a datum under a model, in the units of the inlier threshold.
    fn residual(&self, model: &Self::Model, datum: &D) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            inlier_threshold: 2.0,
            confidence: 0.99,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacResult<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub num_inliers: usize,
    pub iterations: usize,
}

/// Hypothesize-and-verify with an adaptive iteration count.
///
/// Hypotheses are drawn without replacement from a ChaCha stream seeded by
/// `cfg.seed`; the first hypothesis with the strictly largest inlier count
/// wins. The final model is refit on its inliers and the mask recomputed.
pub fn ransac<D, E: Estimator<D>>(
    estimator: &E,
    data: &[D],
    cfg: &RansacConfig,
) -> Result<RansacResult<E::Model>, SolverError> {
    let s = estimator.sample_size();
    if data.len() < s {
        return Err(SolverError::InsufficientData {
            needed: s,
            got: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(E::Model, usize)> = None;
    let mut needed = cfg.max_iterations.max(1);
    let mut iterations = 0;
    while iterations < needed {
        iterations += 1;
        let idx = sample(&mut rng, data.len(), s);
        let picked: Vec<&D> = idx.iter().map(|i| &data[i]).collect();
        let Some(model) = estimator.fit(&picked) else {
            continue;
        };
        let count = count_inliers(estimator, &model, data, cfg.inlier_threshold);
        if best.as_ref().map_or(true, |b| count > b.1) {
            best = Some((model, count));
            needed = needed.min(adaptive_iterations(
                count as f64 / data.len() as f64,
                s,
                cfg.confidence,
                cfg.max_iterations.max(1),
            ));
        }
    }
    let Some((model, count)) = best else {
        return Err(SolverError::NoConsensus);
    };
    if count < s {
        return Err(SolverError::NoConsensus);
    }
    let mask = inlier_mask(estimator, &model, data, cfg.inlier_threshold);
    let inliers: Vec<&D> = data.iter().zip(&mask).filter(|(_, &m)| m).map(|(d, _)| d).collect();
    let (model, mask) = match estimator.refit(&inliers, &model) {
        Some(refined) => {
            let refined_mask = inlier_mask(estimator, &refined, data, cfg.inlier_threshold);
            if refined_mask.iter().filter(|&&m| m).count() >= count {
                (refined, refined_mask)
            } else {
                (model, mask)
            }
        }
        None => (model, mask),
    };
    let num_inliers = mask.iter().filter(|&&m| m).count();
    Ok(RansacResult {
        model,
        inliers: mask,
        num_inliers,
        iterations,
    })
}

fn count_inliers<D, E: Estimator<D>>(est: &E, model: &E::Model, data: &[D], thr: f64) -> usize {
    data.iter().filter(|d| est.residual(model, d) <= thr).count()
}

fn inlier_mask<D, E: Estimator<D>>(est: &E, model: &E::Model, data: &[D], thr: f64) -> Vec<bool> {
    data.iter().map(|d| est.residual(model, d) <= thr).collect()
}

/// `log(1 - confidence) / log(1 - w^s)`, capped.
fn adaptive_iterations(inlier_ratio: f64, s: usize, confidence: f64, cap: usize) -> usize {
    let ws = inlier_ratio.powi(s as i32);
    if ws >= 1.0 {
        return 1;
    }
    if ws <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - ws).ln();
    if !n.is_finite() {
        return cap;
    }
    (n.ceil() as usize).clamp(1, cap)
}
