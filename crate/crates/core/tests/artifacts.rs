//! Checkpoint round trips and the stable layout of metric and report files.
//!
//! Set `PHN_BLESS=1` to rewrite `tests/golden/report_layouts.txt`.

use std::path::PathBuf;

use phn_core::checkpoint;
use phn_core::data::{generate_synthetic, split, EncodedBatch, FeatureVocab, RawDataset, Schema, SyntheticSpec};
use phn_core::diagnostics::{
    activation_dump, diagnose, parse_report, scaling_ratio_matrix, summed_report, weak_gradient_summary, write_summary,
    GradientIntervalSpec, ReportHeader,
};
use phn_core::model::{BnMode, CtrModel, ModelConfig, PhnModel};
use phn_core::optim::OptimizerSpec;
use phn_core::train::{evaluate, grid_search, train, write_grid, write_metrics, TrainSpec};
use phn_core::{ResidualMode, TowerKind};

fn data() -> (EncodedBatch, EncodedBatch, Vec<usize>) {
    let spec = SyntheticSpec {
        field_count: 4,
        vocab_size_per_field: 6,
        sample_count: 600,
        pair_density: 1.0,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let (tr, va, _) = split(&data.batch, [0.7, 0.3, 0.0], 1).unwrap();
    (tr, va, data.vocab_sizes)
}

fn config(vocab: Vec<usize>) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        residual: ResidualMode::Prl,
        bn: BnMode::Private,
        seed: 5,
        ..ModelConfig::new(vocab)
    }
}

fn spec() -> TrainSpec {
    TrainSpec {
        epochs: 2,
        batch_size: 64,
        optimizer: OptimizerSpec::adam(1e-2),
        deterministic: true,
        ..TrainSpec::default()
    }
}

fn header(report: &str) -> ReportHeader {
    ReportHeader {
        report: report.into(),
        config: "prl+pbn".into(),
        epsilon: 0.05,
        seed: 3,
        checkpoint_sha256: None,
    }
}

#[test]
fn trained_checkpoint_round_trips_bitwise() {
    let (tr, va, vocab) = data();
    let out = train(PhnModel::<f64>::build(&config(vocab)).unwrap(), &tr, &va, &spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let schema = Schema::synthetic(4);
    checkpoint::save(&path, &out.model, Some(&schema), None).unwrap();
    let loaded = checkpoint::load::<f64>(&path).unwrap();
    assert!(loaded.model.bitwise_eq(&out.model));
    assert_eq!(loaded.schema, Some(schema));
    let a = out.model.predict(&va).unwrap();
    let b = loaded.model.predict(&va).unwrap();
    assert!(a.logits.iter().zip(&b.logits).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(
        evaluate(&loaded.model, &va).unwrap(),
        evaluate(&out.model, &va).unwrap()
    );
    let again = dir.path().join("again.ckpt");
    checkpoint::save(&again, &loaded.model, loaded.schema.as_ref(), None).unwrap();
    assert_eq!(
        checkpoint::file_hash(&path).unwrap(),
        checkpoint::file_hash(&again).unwrap()
    );
}

#[test]
fn checkpoint_keeps_vocab_for_raw_data() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/avazu_sample.csv");
    let raw = RawDataset::read(&path, &Schema::avazu()).unwrap();
    let vocab = FeatureVocab::build(&raw.records, &raw.schema, 1).unwrap();
    let model = PhnModel::<f64>::build(&config(vocab.sizes())).unwrap();
    let bytes = checkpoint::to_bytes(&model, Some(&raw.schema), Some(&vocab)).unwrap();
    let loaded = checkpoint::from_bytes::<f64>(&bytes).unwrap();
    let vocab2 = loaded.vocab.unwrap();
    assert_eq!(
        vocab2.encode(&raw.records).unwrap(),
        vocab.encode(&raw.records).unwrap()
    );
    assert!(checkpoint::from_bytes::<f32>(&bytes).is_err());
}

fn layout(name: &str, text: &str) -> String {
    let (header, body) = parse_report(text).unwrap();
    let keys: Vec<&str> = header.iter().map(|(k, _)| k.as_str()).collect();
    format!(
        "{name}\n  header: {}\n  columns: {}\n  rows: {}\n",
        keys.join(","),
        body[0].join(","),
        body.len() - 1
    )
}

fn render(write: impl FnOnce(&mut Vec<u8>)) -> String {
    let mut out = Vec::new();
    write(&mut out);
    String::from_utf8(out).unwrap()
}

#[test]
fn report_layouts_match_golden() {
    let (tr, va, vocab) = data();
    let eps = GradientIntervalSpec::default();
    let model = train(
        PhnModel::<f64>::build(&config(vocab.clone())).unwrap(),
        &tr,
        &va,
        &spec(),
    )
    .unwrap();
    let single = ModelConfig {
        seed: 9,
        ..config(vocab.clone())
    }
    .with_towers(&[TowerKind::Cross]);
    let single = PhnModel::<f64>::build(&single).unwrap();
    let public = PhnModel::<f64>::build(&ModelConfig {
        bn: BnMode::Public,
        ..config(vocab.clone())
    })
    .unwrap();

    let mut text = String::new();
    let full = diagnose(&model.model, &va, &eps, "prl+pbn").unwrap();
    text += &layout(
        "diagnostics",
        &render(|o| full.write(&header("diagnostics"), o).unwrap()),
    );
    let pub_report = diagnose(&public, &va, &eps, "bn").unwrap();
    text += &layout(
        "diagnostics_public_bn",
        &render(|o| pub_report.write(&header("diagnostics"), o).unwrap()),
    );
    let summed = summed_report(&[("cross", &single), ("joint", &model.model)], &va, &eps, "summed").unwrap();
    text += &layout(
        "diagnostics_summed",
        &render(|o| summed.write(&header("diagnostics"), o).unwrap()),
    );
    let rows = weak_gradient_summary(&[full, summed]).unwrap();
    text += &layout(
        "weak_gradient_summary",
        &render(|o| write_summary(&rows, &header("summary"), o).unwrap()),
    );
    let dump = activation_dump(&model.model, &va, 100, 3).unwrap();
    text += &layout(
        "activation_dump",
        &render(|o| dump.write(&header("activation_dump"), o).unwrap()),
    );
    let dump = activation_dump(&single, &va, 100, 3).unwrap();
    text += &layout(
        "activation_dump_single",
        &render(|o| dump.write(&header("activation_dump"), o).unwrap()),
    );
    let scaling = scaling_ratio_matrix(&model.model, &va).unwrap();
    text += &layout(
        "scaling_ratio",
        &render(|o| scaling.write(&header("scaling_ratio"), o).unwrap()),
    );
    text += &layout(
        "metrics",
        &format!("# run: x\n{}", render(|o| write_metrics(&model.records, o).unwrap())),
    );
    let grid = grid_search::<f64>(&config(vocab), &[1, 2], &tr, &va, &spec(), false).unwrap();
    text += &layout(
        "grid",
        &format!("# run: x\n{}", render(|o| write_grid(&grid, o).unwrap())),
    );

    let golden = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/report_layouts.txt");
    if std::env::var_os("PHN_BLESS").is_some() {
        std::fs::create_dir_all(golden.parent().unwrap()).unwrap();
        std::fs::write(&golden, &text).unwrap();
    }
    assert_eq!(text, std::fs::read_to_string(&golden).unwrap());
}

#[test]
fn single_tower_dump_matches_full_model_curve() {
    let (_, va, vocab) = data();
    let cfg = config(vocab).with_towers(&[TowerKind::Field]);
    let model = PhnModel::<f64>::build(&cfg).unwrap();
    let dump = activation_dump(&model, &va, 50, 1).unwrap();
    for row in &dump.rows {
        assert_eq!(row.tower_confidence.len(), 1);
        assert!((row.tower_confidence[0] - row.confidence).abs() <= 1e-12);
        assert!((row.partials[0] + dump.bias.unwrap() - row.z).abs() <= 1e-10);
    }
}
