use herdtwin_core::fit::{fit, CurveFamily};
use herdtwin_core::synth::rest_curve;

fn main() {
    let points: Vec<(f64, f64)> = (0..24).map(|h| (h as f64, rest_curve(h as f64))).collect();
    for seed in [0u64] {
        let c = fit(CurveFamily::GaussianSum(8), &points, seed).unwrap();
        println!(
            "seed {seed}: rv {:.3e} sse {:.3e} converged {} iters {}",
            c.residual_variance, c.sse, c.converged, c.iterations
        );
        for t in c.params.chunks_exact(3) {
            println!("  a {:10.3} b {:10.3} c {:8.4}", t[0], t[1], t[2]);
        }
    }
}
