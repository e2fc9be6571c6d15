//! Drive the bundled natural-language fixtures through a checkpoint-backed
//! encoder: export a small synthetic model with a realistic vocabulary,
//! load it back through the published layout, and run the same pipeline the
//! reference checkpoint would see.

use igprobe::analysis::{layer_stats, overlap_curve, suppression_experiment};
use igprobe::attribution::{attribute_prompt, AttributionConfig, AttributionMap};
use igprobe::model::{bert::BertModel, load_model, MaskedLm};
use igprobe::prompts;
use igprobe::selection::{coarse_select, NeuronSet};

fn fixture_vocab() -> Vec<String> {
    let words = [
        "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "sarah", "was", "visiting", ",", ".",
        "the", "capital", "of", "france", "is", "paris", "berlin", "'", "s", "##s", "a",
        "hotspot", "for", "romantic", "vacations", "eiffel", "tower", "situated", "in", "most",
        "populous", "city", "one", "popular", "tourist", "destinations", "world", "germany",
        "why", "would", "ever", "visit", "?", "!", "doesn", "t", "she", "know", "that", "its",
        "hitler", "lived", "life", "now", "brandenburg", "gate", "tourists", "visited", "by",
        "lot", "dutch", "people", "every", "year", "grass", "cow", "cows", "##s2",
    ];
    words.iter().map(|w| w.to_string()).collect()
}

fn build_checkpoint(dir: &std::path::Path) -> BertModel {
    let model =
        BertModel::synthetic_with_vocab(2, 16, 2, 20, fixture_vocab(), true, 42).unwrap();
    model.export_checkpoint(dir).unwrap();
    model
}

#[test]
fn fixtures_run_against_a_loaded_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let in_memory = build_checkpoint(dir.path());
    let model = load_model(dir.path()).unwrap();
    assert_eq!(model.info().layer_count, 2);
    assert_eq!(model.info().intermediate_dim, 20);

    let config = AttributionConfig::with_steps(4);
    let maps_for = |name: &str| -> Vec<AttributionMap> {
        let set = prompts::builtin(name).unwrap();
        set.prompts
            .iter()
            .enumerate()
            .map(|(i, text)| {
                let p = model
                    .tokenize(text, &set.fact.object)
                    .unwrap_or_else(|e| panic!("{name}[{i}] fails to tokenize: {e}"));
                attribute_prompt(&model, &p, &format!("{name}/{}", i + 1), &config).unwrap()
            })
            .collect()
    };

    // Every bundled set tokenizes (lowercasing handles the cased prompts;
    // out-of-vocabulary non-target words fall back to [UNK]).
    let france = maps_for("france-capital-en-1");
    let germany = maps_for("germany-capital-en");
    assert_eq!(france.len(), 7);
    assert_eq!(germany.len(), 7);

    let refs_f: Vec<&AttributionMap> = france.iter().collect();
    let refs_g: Vec<&AttributionMap> = germany.iter().collect();
    let stats = layer_stats(&refs_f).unwrap();
    assert_eq!(stats.n_prompts, 7);
    assert!(stats.mean.iter().all(|v| v.is_finite()));

    let t_grid = [0.0, 0.05, 0.1];
    let curve = overlap_curve(&refs_f, &refs_g, &t_grid, 50.0).unwrap();
    assert_eq!(curve.values.len(), 3);
    assert!(curve.values.iter().all(|v| (0.0..=1.0).contains(v)));

    // Suppression runs against the loaded checkpoint.
    let prompt = model
        .tokenize("The capital of france is [MASK]", "Paris")
        .unwrap();
    let set: NeuronSet = coarse_select(refs_f[1], 0.0)
        .unwrap()
        .refs()
        .take(3)
        .copied()
        .collect();
    if !set.is_empty() {
        let report = suppression_experiment(&model, &prompt, &set, 5, 1).unwrap();
        assert_eq!(report.random_deltas.len(), 5);
    }

    // The loaded model agrees with the in-memory one at f32 precision.
    let p = in_memory
        .tokenize("The capital of france is [MASK]", "Paris")
        .unwrap();
    let a = in_memory.forward(&p).unwrap();
    let b = model.forward(&prompt).unwrap();
    assert!((a.logit - b.logit).abs() < 1e-3, "{} vs {}", a.logit, b.logit);
}

#[test]
fn cli_attributes_builtin_fixture_against_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    build_checkpoint(&dir.path().join("ckpt"));

    let out = std::process::Command::new(env!("CARGO_BIN_EXE_igprobe"))
        .current_dir(dir.path())
        .args([
            "attribute",
            "--model",
            "ckpt",
            "--prompts",
            "france-capital-en-1",
            "--steps",
            "3",
            "--out",
            "maps",
        ])
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let count = std::fs::read_dir(dir.path().join("maps")).unwrap().count();
    assert_eq!(count, 7);

    // Tokenizing a multi-piece target against the checkpoint is rejected
    // with the dedicated category ("pariss" = "paris" + "##s").
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_igprobe"))
        .current_dir(dir.path())
        .args([
            "select", "--map", "maps/france-capital-en-1-p01.attribution.json", "--t", "0.0",
            "--out", "set.json",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_igprobe"))
        .current_dir(dir.path())
        .args([
            "suppress", "--model", "ckpt", "--prompt", "the capital [MASK]", "--target",
            "pariss", "--set", "set.json", "--trials", "1", "--out", "x.json",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(err["error"]["category"], "multi-token-target");
}
