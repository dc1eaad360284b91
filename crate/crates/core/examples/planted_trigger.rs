//! Trains the planted profile on the synthetic trigger task and reports dev
//! accuracy and token selection rates. Stops once dev accuracy is perfect.
//!
//! cargo run --release --example planted_trigger [seed]

use std::ops::ControlFlow;
use std::time::Instant;

use gdpnet::data::{generate_synthetic, selection_stats, SynthConfig};
use gdpnet::model::{predict, train, ModelConfig};

fn main() -> gdpnet::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let task = generate_synthetic(&SynthConfig::default())?;
    let config = ModelConfig {
        input_width: task.train.input_width,
        classes: task.train.class_count(),
        seed,
        ..ModelConfig::planted()
    };
    let start = Instant::now();
    let outcome = train(&task.train, Some(&task.dev), &config, |r, _| {
        let dev = r.dev.unwrap();
        println!(
            "epoch {:>2}  train loss {:.4} acc {:.3}  dev acc {:.3} f1 {:.3}  r_real {:.3}  {:.1}s",
            r.epoch,
            r.train.loss,
            r.train.accuracy,
            dev.accuracy,
            dev.f1.f1,
            dev.mean_realized_ratio,
            start.elapsed().as_secs_f64()
        );
        if dev.accuracy >= 1.0 {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    let preds = predict(&task.dev, &outcome.params, &config)?;
    let survivors: Vec<Vec<usize>> = preds.iter().map(|p| p.record.final_positions().to_vec()).collect();
    println!("{}", selection_stats(&survivors, &task.dev)?);
    Ok(())
}
