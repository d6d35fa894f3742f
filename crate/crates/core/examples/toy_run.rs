//! Runs the toy profile end to end and prints the headline metrics.

use std::time::Instant;

use omoe::eval::{toy_metrics, EvalOptions};
use omoe::trainer::config::parse_config;
use omoe::trainer::pipeline::{run, Datasets};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let text = std::env::args()
        .nth(1)
        .map(std::fs::read_to_string)
        .transpose()?
        .unwrap_or_default();
    let cfg = parse_config(&text)?;
    let t0 = Instant::now();
    let (model, logs) = run(&cfg)?;
    println!("pretrain accuracy {:.4}  ({:.1?})", logs.pretrain_accuracy, t0.elapsed());
    for (name, recs) in &logs.stages {
        if let (Some(a), Some(b)) = (recs.first(), recs.last()) {
            println!("{name}: {} steps, loss {:.4} -> {:.4} (orth {:.4} -> {:.4})", recs.len(), a.losses.total, b.losses.total, a.losses.orth, b.losses.orth);
        }
    }
    let data = Datasets::new(&cfg)?;
    let m = toy_metrics(&model, &data, EvalOptions::new(cfg.train.k_s))?;
    println!("routing {:.4} overall {:.4}", m.routing_accuracy, m.overall_accuracy);
    println!("universal artifact {:?} (stage-2 head {:?})", m.universal_artifact, m.universal_gates_zeroed);
    println!("semantic {:?}", m.semantic);
    println!("artifact full {:.4} without universal {:.4}", m.artifact_full, m.artifact_without_universal);
    println!("total {:.1?}", t0.elapsed());
    Ok(())
}
