use super::*;

fn small(cfg: GenConfig) -> GenConfig {
    GenConfig {
        n_train: 20,
        n_val: 10,
        n_test: 30,
        ..cfg
    }
}

#[test]
fn deterministic_generation() {
    for cfg in [
        GenConfig::oscillator(NoiseMode::Additive, 3),
        GenConfig::oscillator(NoiseMode::NonAdditive, 3),
        GenConfig::cardio(NoiseMode::NonAdditive, 3),
        GenConfig::images(NoiseMode::Additive, 3),
    ] {
        let cfg = small(cfg);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.y, b.y);
        assert_eq!(a.t, b.t);
        assert_eq!(a.u_z, b.u_z);
        assert_eq!(a.latents, b.latents);
    }
}

#[test]
fn regeneration_at_factual_treatment_is_exact() {
    for cfg in [
        GenConfig::oscillator(NoiseMode::NonAdditive, 9),
        GenConfig::cardio(NoiseMode::Additive, 9),
        GenConfig::images(NoiseMode::NonAdditive, 9),
    ] {
        let ds = generate(&small(cfg)).unwrap();
        for i in ds.indices(Split::Test) {
            let c = ds.regen_counterfactual(i, ds.t[i] as f64).unwrap();
            assert_eq!(c.y_prime, c.y);
        }
    }
}

#[test]
fn regeneration_outside_test_split_rejected() {
    let ds = generate(&small(GenConfig::oscillator(NoiseMode::Additive, 1))).unwrap();
    assert!(matches!(ds.regen_counterfactual(0, 0.5), Err(Error::NotInTestSplit(0))));
    let ds = ds.without_latents();
    assert!(matches!(ds.regen_counterfactual(45, 0.5), Err(Error::MissingLatents)));
}

#[test]
fn config_validation() {
    let mut c = GenConfig::oscillator(NoiseMode::Additive, 1);
    c.k0 = 4;
    assert!(c.validate().is_err());
    let mut c = GenConfig::cardio(NoiseMode::Additive, 1);
    c.k0 = 3;
    assert!(c.validate().is_err());
    let mut c = GenConfig::images(NoiseMode::Additive, 1);
    c.rho = 1.5;
    assert!(c.validate().is_err());
    c.rho = 0.5;
    c.sigma = -1.0;
    assert!(c.validate().is_err());
    c.sigma = 0.0;
    c.image_size = 6;
    assert!(c.validate().is_err());
}

#[test]
fn shapes_and_ranges() {
    let ds = generate(&small(GenConfig::oscillator(NoiseMode::Additive, 1))).unwrap();
    assert_eq!((ds.x_dim, ds.y_dim), (40, 42));
    assert!(ds.t.iter().all(|&t| (0.2..1.0).contains(&t)));
    assert!(ds.u_z.iter().all(|&u| u < 3));
    let ds = generate(&small(GenConfig::cardio(NoiseMode::Additive, 1))).unwrap();
    assert_eq!((ds.x_dim, ds.y_dim), (40, 42));
    assert!(ds.t.iter().all(|&t| (0.6..1.0).contains(&t)));
    let ds = generate(&small(GenConfig::images(NoiseMode::Additive, 1))).unwrap();
    assert_eq!((ds.x_dim, ds.y_dim), (196, 588));
    assert!(ds.u_z.iter().all(|&u| u < 6));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(&small(GenConfig::cardio(NoiseMode::NonAdditive, 5))).unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_dataset(dir.path(), true).unwrap();
    assert_eq!(back.x, ds.x);
    assert_eq!(back.y, ds.y);
    assert_eq!(back.latents, ds.latents);
    let i = ds.indices(Split::Test)[0];
    assert_eq!(back.regenerate(i, 0.7).unwrap(), ds.regenerate(i, 0.7).unwrap());
    let bare = load_dataset(dir.path(), false).unwrap();
    assert!(bare.latents.is_none());

    let p = dir.path().join("y.f32");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path(), true), Err(Error::Checksum { .. })));
}
