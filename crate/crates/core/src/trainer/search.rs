use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{resolve_config, train, TrainConfig};
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, D_FF_CHOICES, D_MODEL_CHOICES, FC_DROPOUT_CHOICES};
use crate::patching::CANDIDATE_PATCH_SIZES;

const MAX_REJECTIONS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub index: usize,
    pub config: ModelConfig,
    pub lr: f64,
    /// `None` when training diverged.
    pub val_mse: Option<f64>,
    pub test_mse: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: usize,
}

impl SearchResult {
    pub fn best_trial(&self) -> &Trial {
        &self.trials[self.best]
    }
}

/// Draws one point of the search space on top of `base`: log-uniform
/// learning rate, uniform dropout, and uniform choices for the rest.
pub fn sample_config<R: Rng>(base: &ModelConfig, rng: &mut R) -> (ModelConfig, f64) {
    let lr = 10f64.powf(rng.gen_range(-4.0..=-2.0));
    let config = ModelConfig {
        d_model: *D_MODEL_CHOICES.choose(rng).expect("non-empty"),
        d_ff: *D_FF_CHOICES.choose(rng).expect("non-empty"),
        dropout: rng.gen_range(0.4..=0.9),
        e_layers: rng.gen_range(1..=5),
        fc_dropout: *FC_DROPOUT_CHOICES.choose(rng).expect("non-empty"),
        levels: rng.gen_range(1..=5),
        patch_coarse: *CANDIDATE_PATCH_SIZES.choose(rng).expect("non-empty"),
        patch_fine: None,
        ..base.clone()
    };
    (config, lr)
}

/// Rejection-samples `n_trials` valid configurations, trains each and
/// returns them with the index of the lowest validation MSE.
pub fn random_search(
    bundle: &DatasetBundle,
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    n_trials: usize,
    seed: u64,
) -> Result<SearchResult> {
    if n_trials == 0 {
        return Err(Error::Usage("search needs at least one trial".into()));
    }
    let base = resolve_config(base, bundle)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = Vec::with_capacity(n_trials);
    for index in 0..n_trials {
        let (config, lr) = (0..MAX_REJECTIONS)
            .map(|_| sample_config(&base, &mut rng))
            .find(|(c, _)| c.validate().is_ok())
            .ok_or_else(|| Error::Config("no valid configuration in the search space for this base config".into()))?;
        let cfg = TrainConfig {
            lr,
            ..train_cfg.clone()
        };
        let (val_mse, test_mse) = match train(&config, &cfg, bundle) {
            Ok(run) => (Some(run.best_val_mse()), Some(run.test.mse)),
            Err(e @ Error::Diverged(_)) => {
                warn!("trial {index}: {e}");
                (None, None)
            }
            Err(e) => return Err(e),
        };
        info!("trial {index}: lr {lr:.2e}, val mse {val_mse:?}");
        trials.push(Trial {
            index,
            config,
            lr,
            val_mse,
            test_mse,
        });
    }
    let best = trials
        .iter()
        .filter_map(|t| t.val_mse.map(|v| (t.index, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Diverged("every search trial diverged".into()))?;
    Ok(SearchResult { trials, best })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "diverged".to_string(), |x| x.to_string())
}

pub fn write_trial_log(path: &Path, result: &SearchResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "trial", "lr", "d_model", "d_ff", "dropout", "e_layers", "fc_dropout", "levels", "patch_coarse", "val_mse",
        "test_mse", "best",
    ])?;
    for t in &result.trials {
        let c = &t.config;
        w.write_record([
            t.index.to_string(),
            t.lr.to_string(),
            c.d_model.to_string(),
            c.d_ff.to_string(),
            c.dropout.to_string(),
            c.e_layers.to_string(),
            c.fc_dropout.to_string(),
            c.levels.to_string(),
            c.patch_coarse.to_string(),
            opt(t.val_mse),
            opt(t.test_mse),
            (t.index == result.best).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
