mod common;

use djscc_core::link::{
    budget, db_to_linear, free_space_path_loss_db, linear_to_db, noise_sigma, operating_snr_db, slant_range,
    thermal_noise_dbw, LinkParameters, BOLTZMANN,
};
use proptest::prelude::*;

#[test]
fn zenith_range_equals_orbit_height() {
    assert_eq!(slant_range(750e3, 90.0).unwrap(), 750e3);
}

#[test]
fn slant_range_agrees_with_law_of_cosines() {
    for elev in [5.0, 10.0, 25.0, 40.0, 55.0, 70.0, 80.0, 89.0] {
        let got = slant_range(750e3, elev).unwrap();
        let want = common::slant_range_by_cosines(750e3, elev);
        assert!((got - want).abs() < 1.0, "elev {elev}: {got} vs {want}");
    }
}

#[test]
fn slant_range_shrinks_with_elevation() {
    let mut last = f64::INFINITY;
    for e in 0..=90 {
        let d = slant_range(750e3, e as f64).unwrap();
        assert!(d < last);
        last = d;
    }
}

#[test]
fn path_loss_doubling_laws() {
    let base = free_space_path_loss_db(1.2e6, 2.15e9).unwrap();
    let step = 20.0 * 2f64.log10();
    assert!((free_space_path_loss_db(2.4e6, 2.15e9).unwrap() - base - step).abs() < 1e-9);
    assert!((free_space_path_loss_db(1.2e6, 4.3e9).unwrap() - base - step).abs() < 1e-9);
}

#[test]
fn noise_power_matches_direct_formula() {
    let n = thermal_noise_dbw(750e3, 2.0).unwrap();
    let t_sys = 290.0 * (10f64.powf(0.2) - 1.0);
    assert!((n - 10.0 * (BOLTZMANN * t_sys * 750e3).log10()).abs() < 1e-12);
    assert!(thermal_noise_dbw(750e3, 0.0).is_err());
}

#[test]
fn budget_components_add_up() {
    let link = LinkParameters::reference();
    for elev in [40.0, 60.0, 80.0] {
        let b = budget(&link, elev).unwrap();
        let total = b.tx_power_dbw + link.tx_gain_dbi + link.rx_gain_dbi - b.path_loss_db - b.noise_dbw;
        assert_eq!(b.snr_db, total);
    }
    assert!(budget(&link, 80.0).unwrap().snr_db > budget(&link, 40.0).unwrap().snr_db);
}

#[test]
fn override_replaces_budget() {
    let mut link = LinkParameters::reference();
    link.snr_db_override = Some(12.5);
    assert_eq!(operating_snr_db(&link, 40.0).unwrap(), 12.5);
    assert!(budget(&link, 40.0).unwrap().snr_db > 20.0);
}

#[test]
fn invalid_links_are_rejected() {
    let mut link = LinkParameters::reference();
    link.bandwidth_hz = 0.0;
    assert!(budget(&link, 40.0).is_err());
    assert!(slant_range(750e3, 91.0).is_err());
    assert!(slant_range(-1.0, 40.0).is_err());
    assert!(noise_sigma(10.0, 0.0).is_err());
}

#[test]
fn monte_carlo_noise_hits_requested_snr() {
    for (snr, power) in [(0.0, 1.0), (17.25, 1.0), (-5.0, 2.5)] {
        let got = common::empirical_snr_db(snr, power, 1_000_000, 7);
        assert!((got - snr).abs() < 0.1, "requested {snr}, measured {got}");
    }
}

proptest! {
    #[test]
    fn db_round_trip(db in -150.0f64..150.0) {
        prop_assert!((linear_to_db(db_to_linear(db)) - db).abs() < 1e-9);
    }

    #[test]
    fn sigma_inverts_snr(snr in -20.0f64..60.0, power in 0.1f64..10.0) {
        let s = noise_sigma(snr, power).unwrap();
        prop_assert!((linear_to_db(power / (2.0 * s.sigma * s.sigma)) - snr).abs() < 1e-9);
    }
}
