extern crate cbindgen;

use std::env;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();

    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.cpp_compat = true;
    config.documentation = true;

    println!("cargo:rerun-if-changed=src/lib.rs");

    cbindgen::Builder::new()
        .with_config(config)
        .with_include_guard("IGPROBE_H")
        .with_crate(crate_dir.clone())
        .generate()
        .map_or_else(
            |error| match error {
                cbindgen::Error::ParseSyntaxError { .. } => {}
                e => panic!("{e:?}"),
            },
            |bindings| {
                bindings.write_to_file(format!("{crate_dir}/include/igprobe.h"));
            },
        );
}
