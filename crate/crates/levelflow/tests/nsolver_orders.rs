//! Convergence orders of the flow solver on a manufactured shear solution:
//! second order in the step size, third order in the mesh size for the
//! quadratic velocity space, and mass-defect decay under refinement.

mod support;

use support::{flow_step, march_to_steady, FlowBench, FlowHistory, ShearCase};

#[test]
fn time_stepping_is_second_order() {
    let case = ShearCase { rho: 1.0, mu: 0.05, steady: false };
    let bench = FlowBench::uniform(16);
    let t_end = 0.5;

    // A same-mesh fine-step run is the reference, so the fixed spatial
    // error cancels and only the temporal error ladder remains.
    let reference = {
        let dt = t_end / 320.0;
        let mut h = FlowHistory::exact(&bench, &case, 0.0, dt);
        let mut t = 0.0;
        for _ in 0..320 {
            flow_step(&bench, &case, &mut h, t, dt, 0.1);
            t += dt;
        }
        h.u_n
    };

    let mut errors = Vec::new();
    for steps in [10usize, 20, 40] {
        let dt = t_end / steps as f64;
        let mut h = FlowHistory::exact(&bench, &case, 0.0, dt);
        let mut t = 0.0;
        for _ in 0..steps {
            flow_step(&bench, &case, &mut h, t, dt, 0.1);
            t += dt;
        }
        errors.push(bench.velocity_diff(&h.u_n, &reference));
    }

    for w in errors.windows(2) {
        let rate = (w[0] / w[1]).log2();
        assert!(
            rate >= 1.9,
            "temporal order dropped to {rate:.2}; ladder {errors:?}"
        );
    }
}

#[test]
fn velocity_space_is_third_order_and_mass_defect_shrinks() {
    let case = ShearCase { rho: 1.0, mu: 0.2, steady: true };
    let mut errors = Vec::new();
    let mut divs = Vec::new();
    for n in [8usize, 16, 32] {
        let bench = FlowBench::uniform(n);
        let u = march_to_steady(&bench, &case, 0.5, 200);
        errors.push(bench.velocity_error(&u, &case, 0.0));
        divs.push(bench.div_norm(&u));
    }

    for w in errors.windows(2) {
        let rate = (w[0] / w[1]).log2();
        assert!(
            rate >= 2.9,
            "spatial order dropped to {rate:.2}; ladder {errors:?}"
        );
    }
    assert!(
        divs[0] > divs[1] && divs[1] > divs[2],
        "divergence norm should fall under refinement, got {divs:?}"
    );
}
