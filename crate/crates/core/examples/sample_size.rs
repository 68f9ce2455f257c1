//! Injections needed for a target error margin, and the margin reached by a
//! given number of injections.

use faultline::metrics::{margin_of_error, required_samples};

fn main() -> faultline::Result<()> {
    println!("confidence  t      margin  population  samples");
    for (conf, t) in [("95%", 1.96), ("99%", 2.576), ("99.8%", 3.09)] {
        for e in [0.05, 0.01] {
            for pop in [None, Some(100_000)] {
                let n = required_samples(pop, e, t, 0.5)?;
                let p = pop.map_or("inf".to_string(), |p| p.to_string());
                println!("{conf:>10}  {t:<5}  {e:<6}  {p:>10}  {n}");
            }
        }
    }
    for n in [1024, 4096, 16590] {
        println!("n = {n}: margin {:.3}% at 99%", 100.0 * margin_of_error(n, None, 2.576, 0.5)?);
    }
    Ok(())
}
