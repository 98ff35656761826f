use std::collections::HashSet;
use std::path::PathBuf;

use sheath::config::ExperimentConfig;

fn shipped() -> Vec<PathBuf> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut out: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    out.sort();
    out
}

#[test]
fn every_shipped_config_parses_and_validates() {
    let paths = shipped();
    assert!(paths.len() >= 8, "{paths:?}");
    let mut ids = HashSet::new();
    for path in paths {
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(ids.insert(cfg.id.clone()), "duplicate id {}", cfg.id);
    }
}

#[test]
fn configs_sharing_a_guard_share_its_fit() {
    let mut seen: Vec<(String, String)> = Vec::new();
    for path in shipped() {
        let cfg = ExperimentConfig::load(&path).unwrap();
        for s in &cfg.sheath {
            let Some(grid) = &s.grid else { continue };
            let key = format!("{}-{}-{}-{}-{:?}", cfg.model.arch, cfg.model.dataset.slug(), cfg.seed, s.node, s.p);
            let value = format!("{grid:?} {} {}", s.recover_pairs, s.calibration_samples);
            match seen.iter().find(|(k, _)| *k == key) {
                Some((_, v)) => assert_eq!(v, &value, "{} disagrees on {key}", path.display()),
                None => seen.push((key, value)),
            }
        }
    }
}
