use proptest::prelude::*;

use qparisi::interp::{psi, BracketObservable, GaussianLevels, InterpModel, InterpPoint};
use qparisi::quantum::{build_sk_hamiltonian, duhamel, spectral_decompose, sx, sz, DisorderSample, ModelParams};
use qparisi::rsb::{parisi_functional, zeta_initial, MixtureFunction, QuadratureSpec, RsbParams, SelfOverlapKernel, SingleSiteModel};
use qparisi::stochastics::{mc_estimate, RngStream};
use qparisi::trotter::{path_energy, trotter_coupling, PathConfiguration, TrotterConfig};

fn rsb_strategy() -> impl Strategy<Value = RsbParams> {
    (1usize..=2, 0.05f64..0.95, prop::collection::vec(0.0f64..1.0, 2)).prop_map(|(k, m1, mut qs)| {
        qs.sort_by(f64::total_cmp);
        let (m, q) = if k == 1 {
            (vec![0.0, 1.0], vec![0.0, qs[1]])
        } else {
            (vec![0.0, m1, 1.0], vec![0.0, qs[0], qs[1]])
        };
        RsbParams::new(m, q).unwrap()
    })
}

fn site_strategy() -> impl Strategy<Value = SingleSiteModel> {
    (0.2f64..1.5, 0.0f64..1.0, -0.5f64..0.5, prop::collection::vec(0.0f64..1.0, 2)).prop_map(|(beta, b, c, y)| {
        // Symmetric profile for M = 3: y(0), y(1) = y(2).
        SingleSiteModel::new(beta, b, c, SelfOverlapKernel::new(vec![y[0], y[1], y[1]]).unwrap()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inserting_a_repeated_overlap_level_is_free(rsb in rsb_strategy(), site in site_strategy(), r in 1usize..=2, frac in 0.05f64..0.95) {
        let r = r.min(rsb.k());
        let m_new = rsb.m()[r - 1] + frac * (rsb.m()[r] - rsb.m()[r - 1]);
        let quad = QuadratureSpec::gauss_hermite(12);
        let sk = MixtureFunction::sk();
        let a = parisi_functional(&rsb, &sk, &site, &quad).unwrap();
        let b = parisi_functional(&rsb.insert_level(r, m_new).unwrap(), &sk, &site, &quad).unwrap();
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn zeta_is_positive(rsb in rsb_strategy(), site in site_strategy(), z in prop::collection::vec(-8.0f64..8.0, 2)) {
        let v = zeta_initial(&z[..rsb.k()], &rsb, &MixtureFunction::sk(), &site).unwrap();
        prop_assert!(v > 0.0 && v.is_finite());
    }

    #[test]
    fn trotter_coupling_relation(beta in 0.05f64..4.0, b in 0.01f64..3.0, m in 2usize..64) {
        let k = trotter_coupling(beta, b, m).unwrap();
        prop_assert!(k > 0.0);
        prop_assert!((k.tanh() - (-2.0 * beta * b / m as f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn duhamel_is_symmetric_and_positive(seed in 0u64..1000, beta in 0.1f64..2.0, b in 0.0f64..1.5, c in -0.5f64..0.5) {
        let params = ModelParams::new(1.0, b, c, 3).unwrap();
        let g = DisorderSample::gaussian(2, 3, &RngStream::new(seed)).unwrap();
        let spec = spectral_decompose(&build_sk_hamiltonian(&params, &g).unwrap()).unwrap();
        let a = sz(3, 0) + 0.3 * sx(3, 2);
        let bb = sx(3, 1) - sz(3, 2);
        let ab = duhamel(&a, &bb, &spec, beta).unwrap();
        prop_assert!((ab - duhamel(&bb, &a, &spec, beta).unwrap()).abs() < 1e-10);
        prop_assert!(duhamel(&a, &a, &spec, beta).unwrap() >= 0.0);
    }

    #[test]
    fn path_energy_is_even_without_field(seed in 0u64..1000, bits in 0u64..(1 << 12), b in 0.05f64..2.0) {
        let params = ModelParams::new(0.8, b, 0.0, 3).unwrap();
        let g = DisorderSample::gaussian(2, 3, &RngStream::new(seed)).unwrap();
        let tc = TrotterConfig::new(&params, 4).unwrap();
        let cfg = PathConfiguration::from_bits(4, 3, bits);
        let d = path_energy(&cfg, &g, &params, &tc).unwrap() - path_energy(&cfg.flipped(), &g, &params, &tc).unwrap();
        prop_assert!(d.abs() < 1e-12);
    }

    #[test]
    fn bracket_of_one_is_one(rsb in rsb_strategy(), s in 0.0f64..1.0, t in 0.0f64..1.0, seed in 0u64..1000) {
        let model = InterpModel::new(ModelParams::new(0.9, 0.5, 0.2, 2).unwrap(), rsb.clone(), SelfOverlapKernel::zeros(2), QuadratureSpec::gauss_hermite(4)).unwrap();
        let levels = GaussianLevels::sample(2, rsb.k(), 1, &RngStream::new(seed)).unwrap();
        let p = InterpPoint::new(s, t).unwrap();
        for level in 0..rsb.k() {
            let v = model.modified_bracket(&p, &levels, level, &BracketObservable::One).unwrap();
            prop_assert!((v.value - 1.0).abs() < 1e-12, "level {level}: {}", v.value);
        }
    }
}

#[test]
fn psi_minus_phi_is_a_nondecreasing_remainder() {
    let (beta, b, n) = (1.2, 0.5, 3usize);
    let rsb = RsbParams::new(vec![0.0, 0.4, 1.0], vec![0.0, 0.25, 0.6]).unwrap();
    let kernel = SelfOverlapKernel::new(vec![0.5, 0.2]).unwrap();
    let quad = QuadratureSpec::gauss_hermite(6);
    let model = InterpModel::new(ModelParams::new(beta, b, 0.0, n).unwrap(), rsb.clone(), kernel.clone(), quad).unwrap();
    let site = SingleSiteModel::new(beta, b, 0.0, kernel).unwrap();
    let sk = MixtureFunction::sk();
    let grid = [0.1, 0.3, 0.5, 0.7, 0.9];
    // Common random numbers across s, so differences are estimated per sample.
    let samples: Vec<Vec<f64>> = grid
        .iter()
        .map(|&s| {
            let corr = psi(s, &rsb, &sk, &site, &quad).unwrap() + s * beta * beta / (4.0 * n as f64);
            model.phi_samples(&InterpPoint::new(s, 1.0).unwrap(), 300, 17).unwrap().iter().map(|phi| corr - phi).collect()
        })
        .collect();
    for (s, v) in grid.iter().zip(&samples) {
        let e = mc_estimate(v).unwrap();
        assert!(e.mean >= -3.0 * e.stderr, "s={s}: {e:?}");
    }
    for w in samples.windows(2) {
        let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
        let e = mc_estimate(&d).unwrap();
        assert!(e.mean >= -3.0 * e.stderr, "{e:?}");
    }
}

#[test]
fn self_overlap_variance_trends_down_with_n() {
    let rsb = RsbParams::new(vec![0.0, 1.0], vec![0.0, 0.3]).unwrap();
    let kernel = SelfOverlapKernel::new(vec![0.4, 0.2]).unwrap();
    let totals: Vec<f64> = [2usize, 3, 4, 5]
        .iter()
        .map(|&n| {
            let model = InterpModel::new(ModelParams::new(1.0, 0.5, 0.0, n).unwrap(), rsb.clone(), kernel.clone(), QuadratureSpec::gauss_hermite(4)).unwrap();
            let d = model.selfoverlap_variance_diag(1.0, 60, 23).unwrap();
            assert!(d.thermal.iter().step_by(3).all(|v| v.abs() < 1e-12), "diagonal self-overlap must not fluctuate");
            d.total
        })
        .collect();
    let down = totals.windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down >= 2, "{totals:?}");
}
