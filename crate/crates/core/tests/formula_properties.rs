use nalgebra::DVector;
use proptest::prelude::*;
use tunable_cbf::formulas::{lin_sontag_eta, NominalController};
use tunable_cbf::{
    evaluate_controller, kappa_bi_upper, kappa_from_eta, lambda_stg, lambda_tun_relu,
    lambda_tun_smooth, AffineConstraint, ControllerSpec, ShapingFunction, TunableTermPolicy,
};

fn sigma(v: f64) -> ShapingFunction {
    ShapingFunction::linear(v).unwrap()
}

fn constraint() -> impl Strategy<Value = AffineConstraint> {
    (-10.0..10.0f64, prop::collection::vec(-3.0..3.0f64, 1..4))
        .prop_filter("d away from zero", |(_, d)| {
            d.iter().map(|v| v * v).sum::<f64>() > 1e-6
        })
        .prop_map(|(c, d)| AffineConstraint::new(c, DVector::from_vec(d)).unwrap())
}

fn sigma_choice() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.2), Just(1.0)]
}

/// Projection of the origin onto `{u : c + d u >= 0}`, written out directly.
fn projection_oracle(con: &AffineConstraint) -> DVector<f64> {
    if con.c >= 0.0 {
        DVector::zeros(con.d.len())
    } else {
        let scale = -con.c / con.d.dot(&con.d);
        con.d.map(|v| v * scale)
    }
}

fn naive_gamma(c: f64, d: &DVector<f64>, sigma: f64) -> f64 {
    let dd = d.dot(d);
    (c * c + sigma * dd * dd).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn tunable_output_meets_the_tightened_constraint_with_equality(
        con in constraint(),
        eta in 0.5..=1.0f64,
        s in sigma_choice(),
    ) {
        let spec = ControllerSpec::tunable(sigma(s), TunableTermPolicy::EtaConstant(eta));
        let out = evaluate_controller(&spec, &con, &DVector::zeros(1), 0.0).unwrap();
        let kappa = out.kappa.unwrap();
        let rhs = kappa * naive_gamma(con.c, &con.d, s);
        prop_assert!((con.c + con.d.dot(&out.u) - rhs).abs() <= 1e-9);
    }

    #[test]
    fn qp_matches_projection_and_kkt(con in constraint()) {
        let out = evaluate_controller(&ControllerSpec::Qp, &con, &DVector::zeros(1), 0.0).unwrap();
        let oracle = projection_oracle(&con);
        prop_assert!((&out.u - &oracle).norm() <= 1e-9);
        // feasibility, u parallel to d with a nonnegative multiplier, complementarity
        let slack = con.c + con.d.dot(&out.u);
        prop_assert!(slack >= -1e-9);
        let mult = out.u.dot(&con.d) / con.d.dot(&con.d);
        prop_assert!(mult >= 0.0);
        prop_assert!((&out.u - &con.d * mult).norm() <= 1e-12);
        prop_assert!((mult * slack).abs() <= 1e-9);
    }

    #[test]
    fn eta_one_is_sontag_and_eta_half_is_half_sontag(con in constraint(), s in sigma_choice()) {
        let x = DVector::zeros(1);
        let stg = evaluate_controller(&ControllerSpec::sontag(sigma(s)), &con, &x, 0.0).unwrap();
        let one = ControllerSpec::tunable(sigma(s), TunableTermPolicy::EtaConstant(1.0));
        let half = ControllerSpec::tunable(sigma(s), TunableTermPolicy::EtaConstant(0.5));
        let one = evaluate_controller(&one, &con, &x, 0.0).unwrap();
        let half = evaluate_controller(&half, &con, &x, 0.0).unwrap();
        prop_assert!((&one.u - &stg.u).norm() <= 1e-12 * (1.0 + stg.u.norm()));
        prop_assert!((&half.u - &stg.u * 0.5).norm() <= 1e-12 * (1.0 + stg.u.norm()));
    }

    #[test]
    fn eta_kappa_lands_in_the_smooth_range(
        c in -10.0..10.0f64,
        d_sq in 1e-6..9.0f64,
        eta in 0.5..=1.0f64,
        s in sigma_choice(),
    ) {
        let shaping = sigma(s);
        let kappa = kappa_from_eta(c, d_sq, eta, &shaping).unwrap();
        let gamma = naive_gamma(c, &DVector::from_element(1, d_sq.sqrt()), s);
        prop_assert!(kappa > (c / gamma).max(0.0));
        prop_assert!(kappa <= 1.0 + 1e-15);
    }

    #[test]
    fn relu_and_smooth_forms_agree_on_the_smooth_range(
        c in -10.0..10.0f64,
        d_sq in 1e-6..9.0f64,
        t in 0.01..=1.0f64,
        s in sigma_choice(),
    ) {
        let shaping = sigma(s);
        let gamma = naive_gamma(c, &DVector::from_element(1, d_sq.sqrt()), s);
        let lower = (c / gamma).max(0.0);
        let kappa = lower + t * (1.0 - lower);
        prop_assume!(kappa > lower);
        let a = lambda_tun_smooth(c, d_sq, kappa, &shaping).unwrap();
        let b = lambda_tun_relu(c, d_sq, kappa, &shaping, true).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn lambda_is_nondecreasing_in_kappa(
        c in -10.0..10.0f64,
        d_sq in 1e-6..9.0f64,
        k1 in 0.001..=1.0f64,
        k2 in 0.001..=1.0f64,
    ) {
        let shaping = sigma(0.2);
        let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
        let a = lambda_tun_relu(c, d_sq, lo, &shaping, true).unwrap();
        let b = lambda_tun_relu(c, d_sq, hi, &shaping, true).unwrap();
        prop_assert!(a <= b + 1e-12 * (1.0 + b.abs()));
        prop_assert!(b <= lambda_stg(c, d_sq, &shaping) + 1e-12 * (1.0 + b.abs()));
    }

    #[test]
    fn bounded_input_output_respects_the_bound(
        con in constraint(),
        gamma in 0.1..20.0f64,
        s in sigma_choice(),
    ) {
        let shaping = sigma(s);
        let spec = ControllerSpec::bounded_input_lin_sontag(shaping.clone(), gamma).unwrap();
        let x = DVector::zeros(1);
        match evaluate_controller(&spec, &con, &x, 0.0) {
            Ok(out) => {
                prop_assert!(out.u.norm() <= gamma * (1.0 + 1e-12));
                prop_assert!(con.c + con.d.dot(&out.u) >= -1e-9);
                let upper = kappa_bi_upper(&con, gamma, &shaping).unwrap();
                prop_assert!(out.kappa.unwrap() <= upper * (1.0 + 1e-12));
            }
            Err(e) => {
                // only incompatible constraints or the empty boundary set may fail
                prop_assert!(con.c + gamma * con.d.norm() <= 1e-9, "{e}");
            }
        }
    }

    #[test]
    fn lin_sontag_eta_stays_below_half(d_sq in 0.0..100.0f64, gamma in 0.01..100.0f64) {
        let eta = lin_sontag_eta(d_sq, gamma, &sigma(0.2));
        prop_assert!(eta > 0.0 && eta <= 0.5);
    }

    #[test]
    fn safety_filter_corrects_along_d(
        con in constraint(),
        kd in prop::collection::vec(-3.0..3.0f64, 3),
        eta in 0.5..=1.0f64,
    ) {
        let m = con.d.len();
        let kd = DVector::from_vec(kd[..m].to_vec());
        let k = kd.clone();
        let spec = ControllerSpec::safety_filter(
            ControllerSpec::tunable(sigma(0.2), TunableTermPolicy::EtaConstant(eta)),
            NominalController::new(move |_, _| k.clone()),
        )
        .unwrap();
        let out = evaluate_controller(&spec, &con, &DVector::zeros(1), 0.0).unwrap();
        let corr = &out.u - &kd;
        let along = corr.dot(&con.d) / con.d.dot(&con.d);
        prop_assert!((&corr - &con.d * along).norm() <= 1e-9 * (1.0 + corr.norm()));
        prop_assert!(out.constraint_residual.abs() <= 1e-9);
    }
}
