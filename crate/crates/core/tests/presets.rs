use std::path::Path;

use parapath::config::{presets, RunConfig};

fn preset_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../presets"))
}

#[test]
fn preset_files_match_builtin_presets() {
    for name in presets::NAMES {
        let file = RunConfig::load(&preset_dir().join(format!("{name}.toml"))).unwrap();
        assert_eq!(file.model, presets::by_name(name).unwrap(), "{name}");
        if name.starts_with("desk") {
            assert_eq!(file.train, presets::desk_train(), "{name}");
        }
    }
}

#[test]
fn every_preset_file_is_builtin() {
    let mut files = 0;
    for entry in std::fs::read_dir(preset_dir()).unwrap() {
        let stem = entry.unwrap().path().file_stem().unwrap().to_string_lossy().into_owned();
        assert!(presets::by_name(&stem).is_some(), "{stem}");
        files += 1;
    }
    assert_eq!(files, presets::NAMES.len());
}

#[test]
fn unknown_keys_are_rejected() {
    let text = std::fs::read_to_string(preset_dir().join("path.toml")).unwrap();
    let bad = text.replacen("d_model", "width = 3\nd_model", 1);
    let err = RunConfig::parse(&bad).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("width"), "{err}");
}
