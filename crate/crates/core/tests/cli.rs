use std::fs;
use std::path::Path;

use spin_noise::cli::run;
use spin_noise::fit::FitResult;
use spin_noise::spectra::Spectrum;
use spin_noise::sweep::NoiseMap;

fn spin_noise(out: &Path, args: &[&str]) -> i32 {
    let mut all = vec!["spin-noise".to_string(), "--output".into(), out.display().to_string()];
    all.extend(args.iter().map(|s| s.to_string()));
    run(all)
}

#[test]
fn noisemap_writes_map_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let code = spin_noise(
        dir.path(),
        &[
            "noisemap",
            "--preset",
            "cellA",
            "--intensity",
            "1.8W/cm2",
            "--detuning-axis",
            "-2GHz:2GHz:500MHz",
            "--nodes",
            "65",
        ],
    );
    assert_eq!(code, 0);
    for name in ["noisemap.csv", "noisemap.json", "noisemap_absorption.csv", "noisemap_integrated.csv"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
    let map = NoiseMap::from_csv(&fs::read_to_string(dir.path().join("noisemap.csv")).unwrap()).unwrap();
    assert_eq!(map.detuning.len(), 9);
    assert_eq!(map.noise_axis.len(), 1001);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("noisemap.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["grid"]["nodes"], 65);
}

#[test]
fn spectrum_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let code = spin_noise(
        dir.path(),
        &["spectrum", "--preset", "cellA", "--intensity", "1.8W/cm2", "--detuning", "-5GHz", "--field", "1.8mT"],
    );
    assert_eq!(code, 0);
    let csv = dir.path().join("spectrum.csv");
    let s = Spectrum::read(&csv).unwrap();
    assert_eq!(s.meta.detuning_hz, Some(-5e9));
    assert!(s.values[0] < 0.0);
    let input = csv.display().to_string();
    assert_eq!(spin_noise(dir.path(), &["fit", "--input", &input, "--window", "10e6:16e6"]), 0);
    let fit: FitResult =
        serde_json::from_str(&fs::read_to_string(dir.path().join("spectrum_fit.json")).unwrap()).unwrap();
    assert!((fit.fwhm_hz - 515e3).abs() / 515e3 < 0.01, "{fit:?}");
}

#[test]
fn absorption_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "preset = \"cellB\"\nintensity = \"7.8W/cm2\"\ndetuning_axis = \"-1GHz:1GHz:250MHz\"\nnodes = 33\n",
    )
    .unwrap();
    let code = spin_noise(dir.path(), &["absorption", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = fs::read_to_string(dir.path().join("absorption.csv")).unwrap();
    assert!(text.starts_with("detuning_hz,kappa\n"));
    assert_eq!(text.lines().count(), 10);
    assert!(dir.path().join("transmission.csv").exists());
    assert!(dir.path().join("absorption.json").exists());
}

#[test]
fn dump_scheme_reproduces_presets() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(spin_noise(dir.path(), &["dump-scheme", "--preset", "cellB", "--intensity", "7.8W/cm2"]), 0);
    let cfg: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    let e = &cfg["experiment"];
    assert_eq!(cfg["preset"], "cellB");
    let share = |iso: &str| {
        e["mixture"].as_array().unwrap().iter().find(|m| m[0] == iso).and_then(|m| m[1].as_f64())
    };
    assert_eq!(share("Rb85"), Some(0.7215));
    assert_eq!(share("Rb87"), Some(0.2785));
    assert_eq!(e["transit_rate"].as_f64(), Some(std::f64::consts::PI * 640e3));
    assert_eq!(e["temperature"].as_f64(), Some(350.0));
    assert_eq!(e["cell_length"].as_f64(), Some(0.05));
    assert_eq!(e["beam_radius"].as_f64(), Some(120e-6));
    assert_eq!(e["gain"].as_f64(), Some(20.0));
    let scheme: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("scheme_87Rb.json")).unwrap()).unwrap();
    assert_eq!(scheme["f_jj"].as_f64(), Some(0.6958));
    assert!(dir.path().join("scheme_85Rb.json").exists());
}

#[test]
fn generator_dump() {
    let dir = tempfile::tempdir().unwrap();
    let code = spin_noise(
        dir.path(),
        &[
            "absorption",
            "--preset",
            "cellA",
            "--intensity",
            "1W/cm2",
            "--detuning-axis",
            "0GHz:1GHz:500MHz",
            "--nodes",
            "33",
            "--dump-generator",
            "-250MHz",
        ],
    );
    assert_eq!(code, 0);
    let text = fs::read_to_string(dir.path().join("generator_87Rb.csv")).unwrap();
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(spin_noise(p, &["noisemap"]), 2);
    assert_eq!(spin_noise(p, &["noisemap", "--preset", "cellA", "--intensity", "1.8"]), 2);
    assert_eq!(spin_noise(p, &["absorption", "--preset", "cellA", "--intensity", "1W/cm2", "--set", "colour=red"]), 2);
    assert_eq!(spin_noise(p, &["bogus"]), 2);
    assert_eq!(spin_noise(p, &["spectrum", "--preset", "cellA", "--intensity", "1W/cm2"]), 2);
    assert_eq!(spin_noise(p, &["fit", "--input", "/nonexistent/spectrum.csv", "--window", "1:2"]), 4);

    let flat = p.join("flat.csv");
    let axis: Vec<f64> = (0..100).map(|k| k as f64 * 1e5).collect();
    Spectrum::new(axis, vec![1e-16; 100]).unwrap().write(&flat).unwrap();
    assert_eq!(spin_noise(p, &["fit", "--input", flat.to_str().unwrap(), "--window", "1MHz:9MHz"]), 3);
}

#[test]
fn output_directory_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    std::env::set_var("SPIN_NOISE_OUT", &out);
    let code = run(["spin-noise", "dump-scheme", "--isotope", "87Rb"]);
    std::env::remove_var("SPIN_NOISE_OUT");
    assert_eq!(code, 0);
    assert!(out.join("scheme_87Rb.json").exists());
    assert!(!out.join("scheme_85Rb.json").exists());
}
