use viscowave::experiments::{layer_study, viscosity_sweep, LayerVerdict, RateFit, SweepSpec};
use viscowave::grid::Grid;

fn main() {
    let t0 = std::time::Instant::now();
    let grid = Grid::new(128, 65).unwrap();
    for (label, spec) in [
        ("visco", SweepSpec::default_for(grid, 0.5)),
        ("ablated", SweepSpec::default_for(grid, 0.5).ablated()),
    ] {
        let sweep = viscosity_sweep(&spec).unwrap();
        println!("--- {label} (dt = {:.3e}, elapsed {:.0?}) ---", sweep.dt, t0.elapsed());
        for e in &sweep.entries {
            println!(
                "eps {:9.3e}: err_eta {:.5e} supE {:.5} r(0.1)max {:.4}",
                e.epsilon, e.err_eta_h1, e.sup_e_functional, e.layer_max[1].1
            );
        }
        if let RateFit::Slope { rate, r_squared } = sweep.fit_eta {
            println!("alpha = {rate:.4}, R2 = {r_squared:.6}");
        }
        let sup0 = sweep.entries[0].sup_e_functional;
        let ratio_max = sweep.entries.iter().map(|e| {
            let r = e.sup_e_functional / sup0;
            r.max(1.0 / r)
        }).fold(0.0f64, f64::max);
        println!("max supE factor vs eps_max: {ratio_max:.4}");
        match layer_study(&sweep, 0.1, 3.0) {
            LayerVerdict::NoLayer { growth } => println!("verdict NO_LAYER growth {growth:.4}"),
            LayerVerdict::LayerSuspected { growth, exponent } => {
                println!("verdict LAYER_SUSPECTED growth {growth:.4} exp {exponent:.3}")
            }
        }
    }
    println!("total elapsed {:.0?}", t0.elapsed());
}
