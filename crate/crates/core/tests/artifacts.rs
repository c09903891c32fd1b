mod common;

use unfoldfed::config::ExperimentConfig;
use unfoldfed::experiment::{run_mode, write_artifacts};
use unfoldfed::report::{
    emit_csv, emit_weights_json, read_csv, read_weights_json, render_svg, svg_document, ChartKind, RunHistory,
    WeightsFile,
};
use unfoldfed::seed::Seeds;
use unfoldfed::unfolding::WeightLogits;

fn experiment(mode: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"mode": "{mode}", "M": 2, "T": 4, "hidden": [6], "seeds": {{"model": 1, "data": 2, "rounds": 3}}}}"#
    ))
    .unwrap()
}

fn unfolded_history() -> (ExperimentConfig, unfoldfed::experiment::RunOutcome) {
    let config = experiment("unfolded");
    let fed = common::small_federation(&[40, 20, 20, 20, 20], config.model_spec().unwrap(), 0.8);
    let outcome = run_mode(&config, &fed).unwrap();
    (config, outcome)
}

#[test]
fn history_layout_for_unfolded_mode() {
    let (config, outcome) = unfolded_history();
    let rows = outcome.history.rows();
    assert_eq!(rows.len(), (config.meta_iterations + 1) * config.rounds);
    assert_eq!(rows.last().unwrap().meta_iter, config.meta_iterations);
    assert_eq!(outcome.history.meta.len(), config.meta_iterations);
    assert_eq!(outcome.logits.as_ref().unwrap().shape(), (4, 5));
}

#[test]
fn csv_is_byte_deterministic_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let (_, a) = unfolded_history();
    let (_, b) = unfolded_history();
    emit_csv(&a.history, dir.path().join("a.csv")).unwrap();
    emit_csv(&b.history, dir.path().join("b.csv")).unwrap();
    let bytes = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(bytes, std::fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "meta_iter,round,val_loss,test_acc,theta_0,theta_1,theta_2,theta_3,theta_4,participation_mask"
    );
    assert_eq!(lines.count(), a.history.rows().len());
    let back = read_csv(dir.path().join("a.csv")).unwrap();
    assert_eq!(back.rows().len(), a.history.rows().len());
    for (x, y) in back.rows().iter().zip(a.history.rows()) {
        assert_eq!(x.meta_iter, y.meta_iter);
        assert_eq!(x.record.participation, y.record.participation);
        assert!((x.record.val_loss - y.record.val_loss).abs() <= 1e-8 * y.record.val_loss.abs());
    }
}

#[test]
fn empty_history_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    emit_csv(&RunHistory::new(2, serde_json::Value::Null), &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "meta_iter,round,val_loss,test_acc,theta_0,theta_1,participation_mask\n"
    );
}

#[test]
fn weights_json_shape_and_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let (config, outcome) = unfolded_history();
    let weights = outcome.weights.unwrap();
    let path = dir.path().join("weights.json");
    emit_weights_json(&weights, &path).unwrap();
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(value["T"], 4);
    assert_eq!(value["K"], 5);
    assert_eq!(value["K"].as_u64().unwrap() as usize, config.clients);
    assert_eq!(value["config_hash"], config.hash());
    for row in value["theta"].as_array().unwrap() {
        let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
        assert_eq!(row.len(), 5);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|v| *v >= 0.0));
    }
    let back = read_weights_json(&path).unwrap();
    assert_eq!(back, weights);
    assert_eq!(&back.logits().unwrap(), outcome.logits.as_ref().unwrap());
}

#[test]
fn weights_json_rejects_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let mut weights = WeightsFile::new(
        &WeightLogits::zeros(3, 2),
        vec![vec![0.5, 0.5]; 3],
        true,
        String::new(),
        Seeds::default(),
        serde_json::Value::Null,
    );
    weights.theta[2].push(0.0);
    assert!(emit_weights_json(&weights, dir.path().join("w.json")).is_err());
}

#[test]
fn svg_documents_are_well_formed() {
    let (_, outcome) = unfolded_history();
    let dir = tempfile::tempdir().unwrap();
    for kind in ChartKind::ALL {
        let path = dir.path().join(format!("{}.svg", kind.file_stem()));
        render_svg(&outcome.history, kind, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap();
        let root = doc.root_element();
        assert_eq!(root.tag_name().name(), "svg");
        assert_eq!(root.tag_name().namespace(), Some("http://www.w3.org/2000/svg"));
        let polylines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
        let expected = match kind {
            ChartKind::Weights => 5,
            _ => 3,
        };
        assert_eq!(polylines, expected, "{kind:?}");
        let labels: Vec<&str> = doc
            .descendants()
            .filter(|n| n.has_tag_name("text"))
            .filter(|n| matches!(n.attribute("class"), Some("x-label" | "y-label")))
            .filter_map(|n| n.text())
            .collect();
        assert_eq!(labels.len(), 2);
        assert!(labels.contains(&"round"));
    }
}

#[test]
fn svg_rejects_empty_history() {
    assert!(svg_document(&RunHistory::new(3, serde_json::Value::Null), ChartKind::Loss).is_err());
}

#[test]
fn manifest_echoes_config_and_seeds() {
    let (config, outcome) = unfolded_history();
    let dir = tempfile::tempdir().unwrap();
    let written = write_artifacts(&config, &outcome, dir.path()).unwrap();
    assert_eq!(written.len(), 6);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["rounds"], 3);
    assert_eq!(manifest["config"], config.echo());
    assert!(manifest["version"].as_str().unwrap().starts_with("unfoldfed v"));
    let replay: ExperimentConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(replay.hash(), config.hash());
}

#[test]
fn fixed_modes_record_one_pass() {
    for mode in ["fedavg", "fixed-uniform"] {
        let config = experiment(mode);
        let fed = common::small_federation(&[40, 20, 20, 20, 20], config.model_spec().unwrap(), 1.0);
        let outcome = run_mode(&config, &fed).unwrap();
        assert_eq!(outcome.history.rows().len(), 4);
        assert!(outcome.weights.is_none());
        let theta = &outcome.history.rows()[0].record.theta;
        if mode == "fedavg" {
            assert!((theta[0] - 40.0 / 120.0).abs() < 1e-15);
        } else {
            assert!(theta.iter().all(|t| *t == 0.2));
        }
    }
}
