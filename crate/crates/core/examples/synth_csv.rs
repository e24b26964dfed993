//! Writes a synthetic Drebin- or AndroCrawl-shaped dataset as CSV.
//!
//! `cargo run --example synth_csv -- drebin 0.1 42 out.csv`

use automl_core::synth::{generate, SynthConfig};

fn main() -> automl_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let kind = args.first().map(String::as_str).unwrap_or("drebin");
    let scale: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(42);
    let out = args.get(3).cloned().unwrap_or_else(|| format!("{kind}_synthetic.csv"));
    let cfg = match kind {
        "androcrawl" => SynthConfig::androcrawl_like(seed),
        _ => SynthConfig::drebin_like(seed),
    }
    .scaled(scale);
    let ds = generate(&cfg)?;
    let file = std::fs::File::create(&out).map_err(|e| automl_core::Error::io(&out, e))?;
    ds.write_csv(file, "class")?;
    println!("{out}: {} rows, {} features", ds.n_rows(), ds.n_cols());
    Ok(())
}
