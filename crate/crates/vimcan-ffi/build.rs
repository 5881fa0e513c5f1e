use std::path::Path;

// Generates the C header into OUT_DIR and mirrors it to include/vimcan.h so
// a checked-out tree always carries a header matching the source. Header
// trouble is reported as a warning rather than failing the build; the
// libraries themselves are unaffected.
fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    let out_dir = std::env::var("OUT_DIR").unwrap();
    let generated = Path::new(&out_dir).join("vimcan.h");

    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(&generated);
            let vendored = Path::new(&crate_dir).join("include").join("vimcan.h");
            if let Some(dir) = vendored.parent() {
                let _ = std::fs::create_dir_all(dir);
            }
            if let Err(e) = std::fs::copy(&generated, &vendored) {
                println!("cargo:warning=could not refresh include/vimcan.h: {e}");
            }
        }
        Err(e) => println!("cargo:warning=header generation failed: {e}"),
    }
}
