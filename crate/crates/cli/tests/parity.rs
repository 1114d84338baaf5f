mod common;

use std::fs;
use std::path::Path;
use std::process::Command;

use pocketalign::contrastive::{embedding_matrix, train, AlignmentModel, TrainPair};
use pocketalign::evaluation::{auc_roc, cosine, KnnConfig};
use pocketalign::pipeline::{extract_file, read_jsonl, write_jsonl, PipelineConfig};
use pocketalign::sampler::{build_sampling_table, joint_histogram, stratified_sample, Histogram2D};
use pocketalign::tensor_io::write_embedding_bank;
use pocketalign::transfer_bound::{verify_bound, BoundConfig};
use pocketalign_cli::*;

fn extract_to(dir: &Path, out: &Path) -> ExtractSummary {
    cmd_extract(&ExtractRun {
        pdb_dir: dir.to_path_buf(),
        out: out.to_path_buf(),
        pipeline: PipelineConfig::default(),
        parallelism: Parallelism::default(),
    })
    .unwrap()
}

#[test]
fn extract_of_empty_directory_writes_empty_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let pdbs = tmp.path().join("pdbs");
    fs::create_dir(&pdbs).unwrap();
    let out = tmp.path().join("out.jsonl");
    let summary = extract_to(&pdbs, &out);
    assert_eq!((summary.files, summary.records), (0, 0));
    assert_eq!(fs::read(&out).unwrap(), b"");
    assert!(snapshot_path(&out).exists());
}

#[test]
fn extract_matches_library_per_file() {
    let tmp = tempfile::tempdir().unwrap();
    let files = common::write_pdb_corpus(&tmp.path().join("pdbs"), 2, 5);
    let out = tmp.path().join("out.jsonl");
    let summary = extract_to(&tmp.path().join("pdbs"), &out);

    let mut sorted = files.clone();
    sorted.sort();
    let expected: Vec<_> = sorted
        .iter()
        .flat_map(|f| extract_file(f, &PipelineConfig::default()).unwrap().records)
        .collect();
    assert!(!expected.is_empty());
    assert_eq!(summary.records, expected.len());
    assert_eq!(read_jsonl(&out).unwrap(), expected);
}

#[test]
fn threaded_extract_returns_the_same_records() {
    let tmp = tempfile::tempdir().unwrap();
    common::write_pdb_corpus(&tmp.path().join("pdbs"), 3, 6);
    let serial = tmp.path().join("a.jsonl");
    let threaded = tmp.path().join("b.jsonl");
    extract_to(&tmp.path().join("pdbs"), &serial);
    cmd_extract(&ExtractRun {
        pdb_dir: tmp.path().join("pdbs"),
        out: threaded.clone(),
        pipeline: PipelineConfig::default(),
        parallelism: Parallelism {
            threads: 3,
            deterministic: true,
        },
    })
    .unwrap();
    assert_eq!(common::file_hash(&serial), common::file_hash(&threaded));
}

fn small_dataset(tmp: &Path) -> std::path::PathBuf {
    common::write_pdb_corpus(&tmp.join("pdbs"), 2, 9);
    let out = tmp.join("data.jsonl");
    extract_to(&tmp.join("pdbs"), &out);
    out
}

#[test]
fn sample_passthrough_and_empty_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let records = read_jsonl(&data).unwrap();
    let hist = tmp.path().join("target.csv");
    joint_histogram(&records, &Histogram2D::default_edges()).write_csv(&hist).unwrap();

    let run = |budget: usize, name: &str| {
        cmd_sample(&SampleRun {
            input: data.clone(),
            target_hist: hist.clone(),
            target_rbsa: None,
            budget,
            seed: 3,
            out: tmp.path().join(name),
            parallelism: Parallelism::default(),
        })
        .unwrap()
    };
    let all = run(records.len(), "all.jsonl");
    assert_eq!(all.sampled, records.len());
    assert_eq!(read_jsonl(&tmp.path().join("all.jsonl")).unwrap(), records);
    assert!(all.tv_distance.unwrap() < 1e-12);
    assert!(stats_dir_for(&tmp.path().join("all.jsonl")).join("joint_hist.csv").exists());

    let none = run(0, "none.jsonl");
    assert_eq!(none.sampled, 0);
    assert!(none.tv_distance.is_none());
}

#[test]
fn sample_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let records = read_jsonl(&data).unwrap();
    let source = joint_histogram(&records, &Histogram2D::default_edges());
    // Flat target over the source support.
    let mut target = source.clone();
    for c in target.counts.iter_mut().flatten() {
        if *c > 0.0 {
            *c = 1.0;
        }
    }
    let hist = tmp.path().join("target.csv");
    target.write_csv(&hist).unwrap();
    let budget = records.len() / 3;
    let out = tmp.path().join("s.jsonl");
    let summary = cmd_sample(&SampleRun {
        input: data,
        target_hist: hist.clone(),
        target_rbsa: None,
        budget,
        seed: 11,
        out: out.clone(),
        parallelism: Parallelism::default(),
    })
    .unwrap();

    let target = Histogram2D::read_csv(&hist).unwrap();
    let table = build_sampling_table(&source, &target, budget).unwrap().with_seed(11);
    let expected = stratified_sample(&records, &table);
    assert_eq!(summary.sampled, expected.len());
    assert_eq!(read_jsonl(&out).unwrap(), expected);
}

fn train_run(tmp: &Path, data: &Path) -> TrainRun {
    let mut run = TrainRun::new(data.to_path_buf(), tmp.join("model"));
    run.pocket_encoder = pocketalign::encoder::EncoderConfig::small(8, 2, 1);
    run.ligand_encoder = LigandEncoderSource::Seeded {
        config: pocketalign::encoder::EncoderConfig::small(8, 2, 1),
        seed: 4,
    };
    run.head_hidden = 8;
    run.proj_dim = 8;
    run.train.max_epochs = 3;
    run.train.batch_size = 8;
    run.train.learning_rate = 3e-3;
    run
}

#[test]
fn train_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = train_run(tmp.path(), &data);
    let summary = cmd_train(&run).unwrap();

    let records = read_jsonl(&data).unwrap();
    let pairs: Vec<TrainPair> = records.iter().map(|r| TrainPair::from_record(r).unwrap()).collect();
    let frozen = run.ligand_encoder.load().unwrap();
    let model = AlignmentModel::init(run.pocket_encoder.clone(), 8, 8, 8, run.init_seed).unwrap();
    let direct = train(&pairs, model, &frozen, &run.train).unwrap();

    let saved = AlignmentModel::load(&run.out_dir.join(MODEL_FILE)).unwrap();
    assert!(saved.tensors().zip(direct.model.tensors()).all(|(a, b)| a == b));
    assert_eq!(summary.epochs, direct.history.len());
    assert_eq!(summary.frozen_checksum_before, summary.frozen_checksum_after);
    assert!(run.out_dir.join(CONFIG_FILE).exists());
    assert!(run.out_dir.join(HISTORY_FILE).exists());
}

#[test]
fn verify_bound_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = train_run(tmp.path(), &data);
    cmd_train(&run).unwrap();
    let bound = BoundConfig {
        scales: vec![0.1],
        seed: 2,
        ..BoundConfig::default()
    };
    let out = tmp.path().join("bound.json");
    let summary = cmd_verify_bound(&BoundRun {
        model: run.out_dir.join(MODEL_FILE),
        ligand_encoder: run.out_dir.join(LIGAND_ENCODER_FILE),
        input: data.clone(),
        out: out.clone(),
        batches: 3,
        batch_size: 4,
        seed: 8,
        bound: bound.clone(),
        parallelism: Parallelism::default(),
    })
    .unwrap();

    let model = AlignmentModel::load(&run.out_dir.join(MODEL_FILE)).unwrap();
    let frozen = run.ligand_encoder.load().unwrap();
    let records = read_jsonl(&data).unwrap();
    let pairs: Vec<TrainPair> = records.iter().map(|r| TrainPair::from_record(r).unwrap()).collect();
    let t = embedding_matrix(pairs.iter().map(|p| frozen.encode(&p.ligand)));
    let s = embedding_matrix(pairs.iter().map(|p| model.encode_pocket(&p.pocket)));
    for (b, idx) in sample_batches(pairs.len(), 4, 3, 8).iter().enumerate() {
        let cfg = BoundConfig {
            seed: 2 + b as u64,
            ..bound.clone()
        };
        let direct = verify_bound(&model.heads, &t.select(ndarray::Axis(0), idx), &s.select(ndarray::Axis(0), idx), &cfg);
        assert_eq!(summary.reports[b], direct);
    }
    let written: BoundSummary = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(written, summary);
}

#[test]
fn eval_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    let bank = vec![
        ("a".to_string(), vec![1.0, 0.0, 0.2]),
        ("b".to_string(), vec![0.9, 0.1, 0.1]),
        ("c".to_string(), vec![0.0, 1.0, 0.3]),
        ("d".to_string(), vec![0.1, 0.8, 0.5]),
    ];
    write_embedding_bank(&tmp.path().join("bank.json"), &bank).unwrap();
    fs::write(tmp.path().join("pairs.csv"), "id_a,id_b,label\na,b,1\nc,d,1\na,c,0\nb,d,0\na,d,0\n").unwrap();
    fs::write(tmp.path().join("labels.csv"), "id,value\na,1.0\nb,2.0\nc,3.0\nd,5.0\n").unwrap();
    let knn = KnnConfig { k: 2, ..KnnConfig::default() };
    let summary = cmd_eval(&EvalRun {
        bank: tmp.path().join("bank.json"),
        pairs: Some(tmp.path().join("pairs.csv")),
        labels: Some(tmp.path().join("labels.csv")),
        knn,
        out: tmp.path().join("eval.json"),
    })
    .unwrap();

    let v = |id: &str| &bank.iter().find(|e| e.0 == id).unwrap().1;
    let pairs = [("a", "b", true), ("c", "d", true), ("a", "c", false), ("b", "d", false), ("a", "d", false)];
    let scores: Vec<f64> = pairs.iter().map(|p| cosine(v(p.0), v(p.1))).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.2).collect();
    assert_eq!(summary.matching_auc, Some(auc_roc(&scores, &labels).unwrap()));
    assert_eq!(summary.knn_queries, Some(4));
    assert!(tmp.path().join("eval.json.config.json").exists());
}

#[test]
fn embed_writes_one_vector_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let run = train_run(tmp.path(), &data);
    cmd_train(&run).unwrap();
    let n = cmd_embed(&EmbedRun {
        model: run.out_dir.join(MODEL_FILE),
        input: data.clone(),
        out: tmp.path().join("bank.json"),
        parallelism: Parallelism::default(),
    })
    .unwrap();
    let bank = pocketalign::tensor_io::read_embedding_bank(&tmp.path().join("bank.json")).unwrap();
    let records = read_jsonl(&data).unwrap();
    assert_eq!(n, records.len());
    assert_eq!(bank[0].0, record_id(&records[0]));
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pocketalign"))
}

#[test]
fn exit_codes_follow_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let ok = bin().args(["extract", "--pdb-dir"]).arg(tmp.path()).arg("--out").arg(tmp.path().join("e.jsonl")).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("0 records"));

    let missing = bin().args(["extract", "--pdb-dir", "/nonexistent/dir", "--out"]).arg(tmp.path().join("x.jsonl")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[input]"));

    let bad_flag = bin().args(["extract", "--bogus"]).output().unwrap();
    assert_eq!(bad_flag.status.code(), Some(1));

    // Exploding learning rate drives the loss non-finite.
    let data = small_dataset(tmp.path());
    let blown = bin()
        .args(["train", "--epochs", "3", "--batch-size", "8", "--lr", "1e300", "--input"])
        .arg(&data)
        .arg("--out")
        .arg(tmp.path().join("blown"))
        .output()
        .unwrap();
    assert_eq!(blown.status.code(), Some(2), "{}", String::from_utf8_lossy(&blown.stderr));
    assert!(String::from_utf8_lossy(&blown.stderr).starts_with("error[numeric]"));
}

#[test]
fn jsonl_written_by_extract_reads_back() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_dataset(tmp.path());
    let records = read_jsonl(&data).unwrap();
    let copy = tmp.path().join("copy.jsonl");
    write_jsonl(&copy, &records).unwrap();
    assert_eq!(fs::read(&copy).unwrap(), fs::read(&data).unwrap());
}
