//! Prints matched-rate results of every method on the standard suite.

use pads::evaluation::{evaluate_suite, standard_suite, Method, MethodConfig};

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let suite = standard_suite(seed).expect("suite");
    let mut cfg = MethodConfig::default();
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(v) = env("MARGIN") {
        cfg.pipeline.regression.tolerance.margin = v;
    }
    if let Some(v) = env("KAPPA") {
        cfg.pipeline.regression.kappa = v;
    }
    if let Some(v) = env("WINDOW") {
        cfg.pipeline.window = v as usize;
    }
    if let Some(v) = env("DEGREE") {
        cfg.pipeline.regression.degree = v as usize;
    }
    if let Some(v) = env("COMP") {
        cfg.pipeline.motion_compensation = v != 0.0;
    }
    let methods: Vec<Method> = match std::env::var("METHODS") {
        Ok(s) => s.split(',').map(|m| m.parse().expect("method")).collect(),
        Err(_) => vec![Method::PadsA, Method::PadsN, Method::PadsO, Method::Kf, Method::Pf, Method::Glrt],
    };
    for m in methods {
        for fpr in [0.05, 0.1, 0.15] {
            let op = evaluate_suite(m, &suite, &cfg, fpr).expect("eval");
            if std::env::var("DELAYS").is_ok() {
                let d: Vec<Option<f64>> = op.outcomes.iter().map(|o| pads::metrics::detection_delay(o)).collect();
                println!("  delays {d:?} gamma {:.3}", op.gamma);
                for o in &op.outcomes {
                    let k = o.iter().position(|x| x.truth.is_attack()).unwrap();
                    let s: Vec<String> = o[k - 8..k + 6].iter().map(|x| format!("{:.1}{}", x.score, if x.decision.is_attack() { "*" } else { "" })).collect();
                    println!("  {}", s.join(" "));
                }
            }
            let rec: Vec<f64> = op
                .outcomes
                .iter()
                .flatten()
                .filter(|o| o.truth.is_attack())
                .map(|o| o.recovered_error())
                .filter(|e| e.is_finite())
                .collect();
            let rec_mean = rec.iter().sum::<f64>() / rec.len().max(1) as f64;
            println!(
                "{:7} target {:.2} fpr {:.3} tpr {:.3} dT {:?} misses {} rec {:.2}",
                m.name(), fpr, op.fpr, op.tpr, op.delta_t, op.misses, rec_mean
            );
        }
    }
}
