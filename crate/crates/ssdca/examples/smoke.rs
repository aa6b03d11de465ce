//! Scratch calibration harness (replaced by polished examples later).
//!
//! Usage: smoke [steps] [patients] [px] [seed] [variants-csv]

use ssdca::data::{synth, ImageStore, Normalization};
use ssdca::model::{Model, ModelConfig, Variant};
use ssdca::swin::SwinConfig;
use ssdca::train::{cross_validate, EvalProtocol, TrainConfig};

fn main() -> ssdca::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(50);
    let patients: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(32);
    let px: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(64);
    let seed: u64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(7);
    let variants: Vec<Variant> = args
        .get(5)
        .map(|s| s.as_str())
        .unwrap_or("ssdca,ssfc,single")
        .split(',')
        .map(|v| Variant::parse(v).unwrap())
        .collect();

    let start = std::time::Instant::now();
    let dir = std::env::temp_dir().join(format!("ssdca-smoke-{steps}-{patients}-{px}-{seed}"));
    let _ = std::fs::remove_dir_all(&dir);
    let spec = synth::SynthSpec { patients, image_px: px, ..synth::SynthSpec::default() };
    let (manifest, summary) = synth::generate(&spec, seed, &dir.join("data"))?;
    println!("synth: {summary:?} in {:?}", start.elapsed());

    for variant in variants {
        let model = Model::new(ModelConfig::new(SwinConfig::toy(), variant))?;
        let store =
            ImageStore::new(&manifest, model.cfg.encoder.image_size, Normalization::default());
        let cfg = TrainConfig { seed, steps_per_epoch: Some(steps), ..TrainConfig::default() };
        let t = std::time::Instant::now();
        let out = dir.join(format!("run-{}", variant.as_str()));
        let (report, _) =
            cross_validate(&model, &manifest, &store, &cfg, &EvalProtocol::default(), &out, false)?;
        println!("== {} cv in {:?}", variant.as_str(), t.elapsed());
        for f in &report.folds {
            println!(
                "  fold {} {} best_epoch={:?} test_ba={:?} train_acc={:?}",
                f.fold,
                f.status,
                f.best_epoch,
                f.metrics.as_ref().and_then(|m| m.balanced_accuracy),
                f.final_train_accuracy
            );
        }
        for key in ["balanced_accuracy", "sensitivity", "specificity", "train_accuracy"] {
            if let Some(v) = report.aggregates.get(key) {
                println!("  {key}: {:.2} +/- {:.2}  {:?}", v.mean, v.std, v.per_fold);
            }
        }
    }
    println!("total {:?}", start.elapsed());
    Ok(())
}
