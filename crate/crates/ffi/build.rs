use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let header = crate_dir.join("include").join("maskdiff.h");
    std::fs::create_dir_all(header.parent().unwrap()).unwrap();

    cbindgen::generate(&crate_dir)
        .expect("cbindgen failed to build the C header")
        .write_to_file(&header);

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
