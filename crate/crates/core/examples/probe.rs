//! Scratch experiment runner used while calibrating defaults.

use std::time::Instant;

use plause_core::adapters::Mode;
use plause_core::backbone::BackboneConfig;
use plause_core::data::{generate_synthetic, DatasetId, GenSpec};
use plause_core::trainer::{run_pipeline, ExperimentConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(7);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let d_model: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let batch: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let adapter_epochs: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(5);

    let spec = GenSpec {
        nouns: 150,
        verbs: 40,
        train: 3000,
        valid: 300,
        test: 1000,
        signal: 0.8,
        datasets: vec![DatasetId::Pep3k],
    };
    let (properties, plausibility) = generate_synthetic(seed, &spec).unwrap();
    println!(
        "data: {} property rows, {} triples",
        properties.len(),
        plausibility.len()
    );

    let base = ExperimentConfig {
        dataset: DatasetId::Pep3k,
        epochs,
        seed,
        learning_rate: lr,
        batch_size: batch,
        adapter_epochs,
        backbone: BackboneConfig {
            d_model,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: d_model * 2,
            max_seq_len: 8,
            dropout: 0.0,
        },
        ..ExperimentConfig::default()
    };

    for mode in [Mode::N, Mode::P, Mode::PV] {
        let config = ExperimentConfig {
            mode,
            ..base.clone()
        };
        let t0 = Instant::now();
        let outcome = run_pipeline(&config, &properties, &plausibility).unwrap();
        let report = &outcome.eval[0];
        println!(
            "mode {:3}  acc {:.4} ± {:.4}  ({:.1?})",
            mode.as_str(),
            report.accuracy.mean,
            report.accuracy.std,
            t0.elapsed()
        );
        for t in &outcome.task_reports {
            let detail = match (&t.accuracy, &t.mse) {
                (Some(acc), _) => format!("acc {:.3}", acc.mean),
                (_, Some(mse)) => format!("mse {:.4}", mse.mean),
                _ => String::new(),
            };
            println!(
                "    task {:22} {}  loss {:.4} -> {:.4}",
                t.task, detail, t.first_epoch_loss, t.last_epoch_loss
            );
        }
        for e in &outcome.log.epochs {
            println!(
                "    epoch {}  train {:.4}  valid {:?}",
                e.epoch, e.train_loss, e.valid_loss
            );
        }
    }
}
