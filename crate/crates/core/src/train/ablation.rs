//! The four cumulative component configurations, trained and scored side by side.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ProbeClip, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::{ComponentToggles, StbnConfig, StbnModel};
use crate::videodata::{NoiseModel, VideoSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    /// Base architecture; its component toggles are overridden per row.
    pub model: StbnConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// One trained model scored on the evaluation clips.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub row: String,
    pub toggles: ComponentToggles,
    pub seed: u64,
    pub psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: ComponentToggles,
    pub mean_psnr: f64,
    pub per_seed_psnr: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub noisy_psnr: f64,
    pub rows: Vec<AblationRow>,
    pub entries: Vec<AblationEntry>,
}

impl AblationTable {
    /// `baseline <= +bsa <= +srfe` and `+flow_refine >= +srfe`, each up to `tolerance_db`.
    pub fn ordering_holds(&self, tolerance_db: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].mean_psnr >= w[0].mean_psnr - tolerance_db)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| configuration | mean PSNR (dB) | per seed |\n|---|---|---|\n");
        s += &alloc::format!("| noisy input | {:.3} | |\n", self.noisy_psnr);
        for r in &self.rows {
            let per: Vec<String> = r.per_seed_psnr.iter().map(|p| alloc::format!("{p:.3}")).collect();
            s += &alloc::format!("| {} | {:.3} | {} |\n", r.name, r.mean_psnr, per.join(", "));
        }
        s
    }
}

/// Trains every row for every seed on `train_clips` and scores each model by
/// the mean PSNR over `eval_clips`. `progress` sees each entry as it finishes.
pub fn run_ablation(
    settings: &AblationSettings,
    train_clips: &[VideoSequence],
    noise: &NoiseModel,
    eval_clips: &[ProbeClip],
    mut progress: impl FnMut(&AblationEntry),
) -> Result<AblationTable> {
    if settings.seeds.is_empty() || eval_clips.is_empty() {
        return Err(Error::Input("ablation needs at least one seed and one evaluation clip".into()));
    }
    let score = |m: &StbnModel| -> Result<f64> {
        Ok(eval_clips.iter().map(|c| c.psnr(m, noise)).sum::<Result<f64>>()? / eval_clips.len() as f64)
    };
    let noisy_psnr = eval_clips.iter().map(ProbeClip::noisy_psnr).sum::<Result<f64>>()? / eval_clips.len() as f64;
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (name, toggles) in ComponentToggles::ablation_rows() {
        let mut per_seed = Vec::with_capacity(settings.seeds.len());
        for &seed in &settings.seeds {
            let model = StbnModel::new(settings.model.clone().with_components(toggles), seed)?;
            let cfg = TrainConfig {
                seed,
                ..settings.train.clone()
            };
            let mut trainer = Trainer::new(model, train_clips.to_vec(), *noise, cfg)?;
            trainer.run(|_, _| Ok(()))?;
            let psnr = score(trainer.model())?;
            let entry = AblationEntry {
                row: name.to_string(),
                toggles,
                seed,
                psnr,
            };
            progress(&entry);
            per_seed.push(psnr);
            entries.push(entry);
        }
        rows.push(AblationRow {
            name: name.to_string(),
            toggles,
            mean_psnr: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            per_seed_psnr: per_seed,
        });
    }
    Ok(AblationTable {
        noisy_psnr,
        rows,
        entries,
    })
}
