use igm::elasticity::BaseMaterial;
use igm::macrofe::{solve_macro, Face, MacroContext, MacroProblem, Traction};
use igm::menu;
use igm::microcell::{discretize_cell, effective_tensor, solve_cell_problems, CellContext};
use igm::tdf::DomainBox;

fn periodic_compliance(cell_res: usize) -> f64 {
    let m = menu::x_cell();
    let zeta0 = (0.7f64 / 8.0).sqrt();
    let mat = BaseMaterial::new(1.0, 0.3, 2, 1e-6).unwrap();
    let ctx = CellContext::new(2, cell_res).unwrap();
    let grid = discretize_cell(&m, zeta0, cell_res, mat);
    let h = 0.05;
    let jac = [[h, 0.0, 0.0], [0.0, h, 0.0], [0.0, 0.0, 1.0]];
    let sol = solve_cell_problems(&ctx, &grid, &jac).unwrap();
    let ch = effective_tensor(&ctx, &grid, &sol).unwrap();
    let problem = MacroProblem {
        dim: 2,
        domain: DomainBox::new_2d([0.0, 0.0], [2.0, 1.0]),
        nelem: [400, 200, 1],
        fixed_faces: vec![Face::XMax],
        tractions: vec![Traction { face: Face::YMax, direction: 1, magnitude: -1.0 }],
        body_force: [0.0; 3],
    };
    let mctx = MacroContext::new(problem).unwrap();
    let zones = vec![0usize; 400 * 200];
    solve_macro(&mctx, &zones, &[ch]).unwrap().compliance
}

#[test]
fn periodic_x_cell_beam_compliance() {
    for res in [64usize, 96, 128] {
        let c = periodic_compliance(res);
        eprintln!("cell res {res}: periodic compliance = {c:.2} (paper 1601.91, dev {:+.1}%)",
                  (c / 1601.91 - 1.0) * 100.0);
    }
}
