//! Regenerates `data/elasticities.txt`, the bundled synthetic pool of
//! substitution-elasticity estimates.
//!
//! The original estimates this pool stands in for are not redistributable,
//! so the file ships a synthetic sample matched to their published summary
//! statistics: 13,930 values on [1.03, 4303] with median ≈ 3.14, generated
//! as σ = 1 + exp(Z), Z ~ Normal(ln 2.14, 2.0²), clipped to the range and
//! pinned to the exact endpoints. The draw is fully deterministic, so
//! rerunning this program reproduces the checked-in file byte for byte.
//!
//!     cargo run -p citysys-core --example gen_elasticities

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COUNT: usize = 13_930;
const SEED: u64 = 20_260_822;
const MIN_SIGMA: f64 = 1.03;
const MAX_SIGMA: f64 = 4_303.0;
const LOG_MEDIAN: f64 = 0.760_805_929_049_479_5; // ln(3.14 - 1)
const LOG_SPREAD: f64 = 2.0;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut values = Vec::with_capacity(COUNT);
    while values.len() < COUNT {
        // Box-Muller: two uniforms -> two independent standard normals
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let radius = (-2.0 * u1.ln()).sqrt();
        for z in [radius * (TAU * u2).cos(), radius * (TAU * u2).sin()] {
            if values.len() < COUNT {
                let sigma = 1.0 + (LOG_MEDIAN + LOG_SPREAD * z).exp();
                values.push(sigma.clamp(MIN_SIGMA, MAX_SIGMA));
            }
        }
    }

    // pin the exact published endpoints
    let lo = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("nonempty");
    values[lo] = MIN_SIGMA;
    let hi = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .expect("nonempty");
    values[hi] = MAX_SIGMA;

    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[COUNT / 2 - 1] + sorted[COUNT / 2]);

    let mut out = String::new();
    out.push_str("# Synthetic substitution-elasticity pool: one value per line.\n");
    out.push_str(&format!(
        "# {} values in [{}, {}], median {:.4}; shape sigma = 1 + exp(Z),\n",
        COUNT, MIN_SIGMA, MAX_SIGMA, median
    ));
    out.push_str(&format!(
        "# Z ~ Normal(ln 2.14, {LOG_SPREAD}^2) clipped to the range, ChaCha8 seed {SEED}.\n"
    ));
    out.push_str("# Regenerate: cargo run -p citysys-core --example gen_elasticities\n");
    for v in &values {
        out.push_str(&format!("{v}\n"));
    }

    let dest = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/elasticities.txt");
    std::fs::create_dir_all(dest.parent().expect("has parent")).expect("create data dir");
    std::fs::write(&dest, out).expect("write pool file");
    eprintln!(
        "wrote {} values to {} (min {}, max {}, median {:.4})",
        COUNT,
        dest.display(),
        MIN_SIGMA,
        MAX_SIGMA,
        median
    );
}
