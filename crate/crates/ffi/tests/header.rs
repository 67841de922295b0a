use std::path::PathBuf;
use std::process::Command;

fn header() -> (PathBuf, String) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/gflownet.h");
    let text = std::fs::read_to_string(&path).expect("header is generated by the build script");
    (path, text)
}

#[test]
fn declares_every_export() {
    let (_, h) = header();
    for name in [
        "gfn_last_error_message",
        "gfn_grid_new_corners",
        "gfn_grid_new_cosine",
        "gfn_grid_free",
        "gfn_grid_num_cells",
        "gfn_grid_target_distribution",
        "gfn_model_new",
        "gfn_model_free",
        "gfn_model_train",
        "gfn_model_terminal_distribution",
        "gfn_model_sample",
        "gfn_model_save",
        "gfn_model_load",
        "gfn_l1_error",
    ] {
        assert!(h.contains(&format!("{name}(")), "missing {name}");
    }
    assert!(h.contains("typedef struct GfnGrid GfnGrid;"));
    assert!(h.contains("typedef struct GfnModel GfnModel;"));
    assert!(h.contains("GFN_STATUS_OK = 0"));
    assert!(h.contains("GFN_STATUS_PANIC = 7"));
}

#[test]
fn header_compiles_as_c() {
    let (path, _) = header();
    let Ok(out) = Command::new("cc").args(["-std=c99", "-fsyntax-only", "-x", "c"]).arg(&path).output() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
