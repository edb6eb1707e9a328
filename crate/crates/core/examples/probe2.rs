use viscowave::experiments::{viscosity_sweep, RateFit, SweepSpec};
use viscowave::grid::Grid;

fn main() {
    for (n1, n2) in [(64usize, 33usize), (128, 65)] {
        let grid = Grid::new(n1, n2).unwrap();
        for interior in [true, false] {
            let mut spec = SweepSpec::default_for(grid, 0.5);
            spec.initial.interior_support = interior;
            let sweep = viscosity_sweep(&spec).unwrap();
            let errs: Vec<String> = sweep.entries.iter().map(|e| format!("{:.3e}", e.err_eta_h1)).collect();
            if let RateFit::Slope { rate, r_squared } = sweep.fit_eta {
                println!(
                    "{n1}x{n2} interior={interior}: alpha = {rate:.4} R2 = {r_squared:.5} errs = [{}]",
                    errs.join(" ")
                );
            }
        }
    }
}
