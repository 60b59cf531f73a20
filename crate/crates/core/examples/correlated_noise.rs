//! Gaussian-spectrum correlated noise: sample autocorrelation against the
//! target.

use spinread::noise::{autocorrelation_from_spectrum, CorrelatedSampler, NoiseSpec};
use spinread::rng;

fn main() -> spinread::Result<()> {
    let len = 256;
    let spec = NoiseSpec::gaussian(1.0, 3.0);
    let target = autocorrelation_from_spectrum(&spec.spectrum(len)?);
    let sampler = CorrelatedSampler::new(&spec, len)?;
    let n = 4000;
    let mut acf = vec![0.0; 8];
    for k in 0..n {
        let x = sampler.sample(&mut rng::stream(5, k));
        for (lag, a) in acf.iter_mut().enumerate() {
            let s: f64 = (0..len).map(|t| x[t] * x[(t + lag) % len]).sum();
            *a += s / (len as f64 * n as f64);
        }
    }
    println!("lag  sample    target");
    for (lag, a) in acf.iter().enumerate() {
        println!("{lag:>3}  {a:+.4}  {:+.4}", target[lag]);
    }
    Ok(())
}
