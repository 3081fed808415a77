//! Writes the five 64×64 crops and the initial sets of the 500-Gaussian
//! from-scratch fit as JSON, the input of `tools/reference_fit.py`.
//!
//!     cargo run --release -p gsir-cli --example reference_fit_input -- init.json

use gsir_core::optim::{init_random, FitConfig};
use gsir_core::synthetic::crop_corpus;
use serde_json::json;

fn main() {
    let path = std::env::args().nth(1).unwrap_or_else(|| "init.json".into());
    let entries: Vec<_> = crop_corpus(64, 64)
        .iter()
        .map(|crop| {
            let set = init_random(crop, 500, FitConfig::default().seed);
            json!({ "image": crop.data(), "mu": set.mu, "log_scale": set.log_scale, "theta": set.theta, "color": set.color })
        })
        .collect();
    std::fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
}
