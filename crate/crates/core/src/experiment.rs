//! Whole runs driven by a [`RunConfig`]: data generation, training to a
//! checkpoint, evaluation and the ablation comparison.

use std::fmt::Write as _;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{Ablation, RunConfig};
use crate::data::{self, Dataset, Split};
use crate::error::Result;
use crate::localization::{BoundingBox, ObjectMask};
use crate::model::{ForwardOptions, WsBanModel};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::training::{self, EpochRecord, EvalReport, TrainOutcome, Trainer};

/// Train and test splits described by the config's dataset spec.
pub fn generate_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        data::generate(&cfg.data, Split::Train)?,
        data::generate(&cfg.data, Split::Test)?,
    ))
}

/// Trains a fresh model seeded by `cfg.train.seed`. When `test` is given it
/// is evaluated after every epoch for the log.
pub fn train(
    cfg: &RunConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainOutcome)> {
    cfg.validate()?;
    let model = WsBanModel::<f32>::new(cfg.model_config(), cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let outcome = trainer.fit(train.labeled_images(), test, on_epoch)?;
    let checkpoint = Checkpoint {
        model: trainer.model,
        centers: trainer.centers,
        config_text: cfg.echo(),
    };
    Ok((checkpoint, outcome))
}

/// Evaluates a checkpoint with the threshold and refinement switch it was
/// trained with.
pub fn evaluate(checkpoint: &Checkpoint, test: &Dataset) -> Result<EvalReport> {
    let cfg = RunConfig::parse(&checkpoint.config_text)?;
    training::evaluate(
        &checkpoint.model,
        test,
        cfg.train.theta,
        cfg.train.refinement,
        cfg.train.eval_batch_size,
    )
}

/// Stage-1 attention of one image in evaluation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Inspection {
    /// `[h, w, M]` part maps; absent for a model without attention pooling.
    pub attention: Option<Tensor<f32>>,
    pub mask: ObjectMask,
    pub predicted: BoundingBox,
}

/// Runs the evaluation forward pass on a single `[s, s, 3]` image.
pub fn inspect(checkpoint: &Checkpoint, image: &Tensor<f32>) -> Result<Inspection> {
    let cfg = RunConfig::parse(&checkpoint.config_text)?;
    let model = &checkpoint.model;
    let batch = Tensor::stack(std::slice::from_ref(image))?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let opts = ForwardOptions::eval(false, cfg.train.theta);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward_two_stage(&mut tape, &bound, &batch, &opts, &mut rng)?;
    let attention = out.stage1.attention.map(|a| tape.value(a).index_first(0));
    let mask = out.stage1.object_masks(&tape)?.remove(0);
    Ok(Inspection {
        attention,
        mask,
        predicted: out.boxes[0],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub row: Ablation,
    pub accuracy: f64,
    pub miou: f64,
    pub loc_error: f64,
}

/// Trains and evaluates every ablation row on the same data and seeds.
pub fn ablate(
    base: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for row in Ablation::ALL {
        let mut cfg = base.clone();
        cfg.apply_ablation(row);
        let (checkpoint, _) = self::train(&cfg, train, None, |_| {})?;
        let report = evaluate(&checkpoint, test)?;
        let r = AblationRow {
            row,
            accuracy: report.accuracy,
            miou: report.metrics.miou,
            loc_error: report.metrics.loc_error,
        };
        on_row(&r);
        rows.push(r);
    }
    Ok(rows)
}

/// Fixed-width comparison table, one line per row.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<6} {:<28} {:>8} {:>8} {:>8}\n", "row", "components", "acc", "mIoU", "loc_err");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<6} {:<28} {:>8.4} {:>8.4} {:>8.4}",
            r.row.name(),
            r.row.description(),
            r.accuracy,
            r.miou,
            r.loc_error
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        for kv in [
            "classes=2",
            "train_samples=8",
            "test_samples=4",
            "image_size=16",
            "parts=2",
            "channels=4,6",
            "epochs=1",
            "batch_size=4",
        ] {
            cfg.apply_override(kv).unwrap();
        }
        cfg
    }

    #[test]
    fn checkpoint_carries_the_echoed_config() {
        let cfg = tiny();
        let (tr, te) = generate_splits(&cfg).unwrap();
        let mut seen = 0;
        let (ck, outcome) = train(&cfg, &tr, Some(&te), |_| seen += 1).unwrap();
        assert_eq!(seen, 1);
        assert_eq!(outcome.history.len(), 1);
        assert_eq!(RunConfig::parse(&ck.config_text).unwrap(), cfg);
        let report = evaluate(&ck, &te).unwrap();
        assert_eq!(report.boxes.len(), te.len());
        for (i, s) in te.samples.iter().enumerate() {
            let view = inspect(&ck, &s.image).unwrap();
            assert_eq!(view.predicted, report.boxes[i]);
            let f = ck.model.config().feature_size();
            assert_eq!(view.attention.unwrap().shape(), &[f, f, 2]);
        }
    }

    #[test]
    fn ablation_covers_every_row() {
        let cfg = tiny();
        let (tr, te) = generate_splits(&cfg).unwrap();
        let rows = ablate(&cfg, &tr, &te, |_| {}).unwrap();
        assert_eq!(rows.len(), 5);
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 6);
        assert!(table.contains("row5"));
    }
}
