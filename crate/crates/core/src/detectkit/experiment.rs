use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{toy_detector_train, DetectError, DetectorModel, ToyDetectorConfig};
use crate::augment::{build_augmented_dataset, AugmentPlan, ImageBed};
use crate::datakit::{retain_class, DatasetManifest, Fold};
use crate::evalkit::{evaluate, CellPipeline, CellRequest, Detection, EvalConfig};
use crate::gpwgan::GeneratorNet;
use crate::seed::derive_seed;

/// Train-augment-evaluate loop measuring one class's AP.
#[derive(Debug, Clone)]
pub struct MinorityExperiment {
    pub minority: String,
    pub beds: Vec<ImageBed>,
    pub generators: BTreeMap<String, GeneratorNet>,
    /// `m_g` and `seed` are overridden per run; an empty class mix places
    /// only the minority class.
    pub plan: AugmentPlan,
    pub detector: ToyDetectorConfig,
    pub eval: EvalConfig,
}

/// Minority AP of one run together with the dataset sizes involved.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub ap: f64,
    pub train_images: usize,
    pub test_images: usize,
}

/// Runs `detector` over every image of `test` (pixels must be loaded).
pub fn detect_all(detector: &dyn DetectorModel, test: &DatasetManifest) -> Result<Vec<Detection>, DetectError> {
    let per_image = test
        .images
        .par_iter()
        .map(|img| Ok(detector.infer(img.id, img.pixels()?)))
        .collect::<Result<Vec<_>, DetectError>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

impl MinorityExperiment {
    pub fn run(
        &self,
        train: &DatasetManifest,
        test: &DatasetManifest,
        m_g: usize,
        seed: u64,
    ) -> Result<RunOutcome, DetectError> {
        let mut plan = self.plan.clone();
        plan.m_g = m_g;
        plan.seed = derive_seed(seed, "experiment/augment", 0);
        if plan.class_mix.is_empty() {
            plan.class_mix.insert(self.minority.clone(), 1.0);
        }
        let augmented = build_augmented_dataset(train, &self.beds, &self.generators, &plan)?;
        let mut cfg = self.detector.clone();
        cfg.seed = derive_seed(seed, "experiment/detector", 0);
        let (detector, _) = toy_detector_train(&augmented, &cfg)?;
        let dets = detect_all(&detector, test)?;
        let report = evaluate(test, &dets, &self.eval)?;
        let ap = report
            .ap(&self.minority)
            .ok_or_else(|| DetectError::MissingClass(self.minority.clone()))?;
        Ok(RunOutcome {
            ap,
            train_images: augmented.len(),
            test_images: test.len(),
        })
    }
}

/// Sensitivity cell runner over precomputed folds: keeps `m_r` training
/// images of the minority class, adds `m_g` synthetic ones and scores the
/// fold's test split.
#[derive(Debug, Clone)]
pub struct FoldPipeline {
    pub experiment: MinorityExperiment,
    pub folds: Vec<Fold>,
}

impl CellPipeline for FoldPipeline {
    fn run(&self, req: CellRequest) -> Result<f64, String> {
        let fold = self
            .folds
            .get(req.fold)
            .ok_or_else(|| format!("fold {} out of range", req.fold))?;
        let train = retain_class(&fold.train, &self.experiment.minority, req.m_r, req.seed).map_err(|e| e.to_string())?;
        self.experiment
            .run(&train, &fold.test, req.m_g, req.seed)
            .map(|o| o.ap)
            .map_err(|e| e.to_string())
    }
}
