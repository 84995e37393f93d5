use std::fs;
use std::path::{Path, PathBuf};

use protomiss::checkpoint::Checkpoint;
use protomiss::embfile::{self, Dtype};
use protomiss::ledger::sha256_dir;
use protomiss::manifest::{embedding_path, load_dir, load_embeddings, DATA_DIR, MANIFEST};
use protomiss::{main_with_args, CliError, ExperimentConfig};
use protomiss_core::cohort::{Availability, Modality};
use protomiss_core::synth::generate_synthetic_cohort;
use protomiss_core::Tensor;

const TINY: &str = r#"
[synth]
n_patients = 240
lengths = [6, 1, 5]
dims = [6, 5, 4]
missing_rates = [0.1, 0.1, 0.1]

[model]
input_dims = [6, 5, 4]
t_q = 2
d = 8
n_heads = 2
k_c = 6
proj_dim = 4
n_experts = 3
top_k = 2

[augment]
k_s = 3

[pretrain]
epochs = 2
batch_size = 16

[downstream]
epochs = 4
k_time = 4

[experiment]
n_folds = 3
label_fractions = [1.0, 0.5]
lambda_values = [0.0, 1.0]
k_c_values = [4, 6]
"#;

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Env { _dir: dir, root, config }
}

fn cli(e: &Env, out: &str, args: &[&str]) -> i32 {
    let out = e.root.join(out);
    let mut v: Vec<String> = vec!["protomiss".into(), "--config".into(), e.config.display().to_string(), "--out".into(), out.display().to_string()];
    v.extend(args.iter().map(|s| s.to_string()));
    main_with_args(v)
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn synth_round_trips_and_is_deterministic() {
    let e = env();
    assert_eq!(cli(&e, "a", &["synth"]), 0);
    assert_eq!(cli(&e, "b", &["synth"]), 0);
    let (a, b) = (e.root.join("a"), e.root.join("b"));
    assert_eq!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(b.join(MANIFEST)).unwrap());
    assert_eq!(sha256_dir(&a.join(DATA_DIR)).unwrap(), sha256_dir(&b.join(DATA_DIR)).unwrap());
    assert_eq!(fs::read(a.join("ledger.csv")).unwrap(), fs::read(b.join("ledger.csv")).unwrap());

    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    assert_eq!(load_dir(&a).unwrap(), generate_synthetic_cohort(&cfg.synth).unwrap());

    assert_eq!(cli(&e, "c", &["--seed", "3", "synth"]), 0);
    assert_ne!(fs::read(a.join(MANIFEST)).unwrap(), fs::read(e.root.join("c").join(MANIFEST)).unwrap());
}

#[test]
fn availability_follows_file_presence() {
    let e = env();
    assert_eq!(cli(&e, "c", &["synth"]), 0);
    let dir = e.root.join("c");
    let cohort = load_dir(&dir).unwrap();
    let p = cohort.patients.iter().find(|p| p.availability() == Availability::FULL).unwrap().id.clone();
    fs::remove_file(embedding_path(&dir.join(DATA_DIR), &p, Modality::Rna)).unwrap();
    let after = load_dir(&dir).unwrap();
    let rec = after.patients.iter().find(|q| q.id == p).unwrap();
    assert_eq!(rec.availability(), Availability([true, false, true]));
}

#[test]
fn truncated_matrix_reports_byte_offset() {
    let e = env();
    assert_eq!(cli(&e, "c", &["synth"]), 0);
    let dir = e.root.join("c");
    let cohort = load_dir(&dir).unwrap();
    let p = cohort.patients.iter().find(|p| p.embedding(Modality::Image).is_some()).unwrap();
    let path = embedding_path(&dir.join(DATA_DIR), &p.id, Modality::Image);
    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
    match load_embeddings(&dir.join(MANIFEST), &dir.join(DATA_DIR)) {
        Err(CliError::Format { offset, path: p, .. }) => {
            assert_eq!(offset, (bytes.len() - 5) as u64);
            assert_eq!(p, path);
        }
        other => panic!("expected a format error, got {:?}", other.map(|c| c.len())),
    }
    let cohort_arg = dir.display().to_string();
    assert_eq!(cli(&e, "p", &["pretrain", "--cohort", &cohort_arg]), 2);
}

#[test]
fn f32_files_are_accepted() {
    let e = env();
    assert_eq!(cli(&e, "c", &["synth"]), 0);
    let dir = e.root.join("c");
    let cohort = load_dir(&dir).unwrap();
    for p in &cohort.patients {
        for m in Modality::ALL {
            if let Some(emb) = p.embedding(m) {
                embfile::write(&embedding_path(&dir.join(DATA_DIR), &p.id, m), &emb.matrix, Dtype::F32).unwrap();
            }
        }
    }
    let reloaded = load_dir(&dir).unwrap();
    let (a, b): (&Tensor, &Tensor) = (&cohort.patients[0].embeddings[1].as_ref().unwrap().matrix, &reloaded.patients[0].embeddings[1].as_ref().unwrap().matrix);
    assert!(a.max_abs_diff(b) < 1e-5);
}

#[test]
fn invalid_configuration_exits_with_two() {
    let e = env();
    let bad = e.root.join("bad.toml");
    fs::write(&bad, "[model]\nt_qq = 3\n").unwrap();
    let run = |cfg: &Path| main_with_args(["protomiss", "--config", cfg.to_str().unwrap(), "--out", e.root.join("x").to_str().unwrap(), "synth"]);
    assert_eq!(run(&bad), 2);
    fs::write(&bad, "[synth]\nmissing_rates = [1.0, 1.0, 1.0]\n").unwrap();
    assert_eq!(run(&bad), 2);
    assert_eq!(run(&e.root.join("absent.toml")), 2);
    assert_eq!(main_with_args(["protomiss", "no-such-command"]), 2);
}

#[test]
fn gradcheck_passes_and_flags_injected_nan() {
    let e = env();
    assert_eq!(cli(&e, "g", &["gradcheck"]), 0);
    let rows = csv_rows(&e.root.join("g").join("gradcheck.csv"));
    let modules: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    for m in ["composed", "tokenizer", "prototype-bank", "refinement", "fusion-moe", "projection", "downstream/survival", "downstream/binary"] {
        assert!(modules.contains(&m), "{} missing from {:?}", m, modules);
    }
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap() < 1e-4 && !r[2].is_empty()));
    assert_eq!(cli(&e, "n", &["gradcheck", "--inject-nan", "bank.protos"]), 3);
}

#[test]
fn pretraining_never_reads_outcomes() {
    let e = env();
    assert_eq!(cli(&e, "c", &["synth"]), 0);
    let dir = e.root.join("c");
    let cohort = dir.display().to_string();
    assert_eq!(cli(&e, "p1", &["pretrain", "--cohort", &cohort]), 0);
    // scramble every outcome column
    let text = fs::read_to_string(dir.join(MANIFEST)).unwrap();
    let mut lines = text.lines();
    let mut tampered = format!("{}\n", lines.next().unwrap());
    for (i, l) in lines.enumerate() {
        let mut f: Vec<String> = l.split(',').map(String::from).collect();
        f[1] = format!("{}", 1.0 + (i * 7 % 13) as f64);
        f[2] = ((i % 2) as u8).to_string();
        tampered.push_str(&f.join(","));
        tampered.push('\n');
    }
    fs::write(dir.join(MANIFEST), tampered).unwrap();
    assert_eq!(cli(&e, "p2", &["pretrain", "--cohort", &cohort]), 0);
    for f in ["checkpoint.bin", "loss_log.csv"] {
        assert_eq!(fs::read(e.root.join("p1").join(f)).unwrap(), fs::read(e.root.join("p2").join(f)).unwrap(), "{}", f);
    }
    let log = csv_rows(&e.root.join("p1").join("loss_log.csv"));
    let best: Vec<f64> = log.iter().map(|r| r[9].parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
    let ck = Checkpoint::load(&e.root.join("p1").join("checkpoint.bin")).unwrap();
    assert_eq!(ck.fingerprint, ExperimentConfig::from_toml(TINY).unwrap().fingerprint());
}

#[test]
fn finetune_and_robustness_agree_on_full() {
    let e = env();
    assert_eq!(cli(&e, "p", &["pretrain"]), 0);
    let ck = e.root.join("p").join("checkpoint.bin").display().to_string();
    assert_eq!(cli(&e, "f", &["finetune", "--checkpoint", &ck]), 0);
    assert_eq!(cli(&e, "r", &["robustness", "--checkpoint", &ck]), 0);
    let f = csv_rows(&e.root.join("f").join("finetune_summary.csv"));
    let r = csv_rows(&e.root.join("r").join("robustness_summary.csv"));
    assert_eq!(f.len(), 3);
    for row in &f {
        assert_eq!(row[2], "pretrained");
        let full = r.iter().find(|x| x[0] == row[0] && x[4] == "Full").unwrap();
        assert_eq!((&full[5], &full[6]), (&row[5], &row[6]));
    }
    for task in ["os", "mortality_3y", "recurrence_3y"] {
        let conds: Vec<&str> = r.iter().filter(|x| x[0] == task).map(|x| x[4].as_str()).collect();
        assert_eq!(conds, ["Full", "LI", "LR", "LT", "OI", "OR", "OT"]);
    }
    // per-fold training sets differ, and scratch is the arm without a checkpoint
    let folds = csv_rows(&e.root.join("f").join("finetune_folds.csv"));
    let os: Vec<&str> = folds.iter().filter(|x| x[0] == "os").map(|x| x[6].as_str()).collect();
    assert_eq!(os.len(), 3);
    assert!(os[0] != os[1] && os[1] != os[2]);
    assert_eq!(cli(&e, "s", &["finetune", "--task", "os", "--mode", "lp"]), 0);
    let s = csv_rows(&e.root.join("s").join("finetune_summary.csv"));
    assert_eq!(s.len(), 1);
    assert_eq!(s[0][2], "scratch");
}

#[test]
fn eval_writes_km_tables_and_figure() {
    let e = env();
    assert_eq!(cli(&e, "e", &["eval"]), 0);
    let dir = e.root.join("e");
    let s = csv_rows(&dir.join("eval_summary.csv"));
    assert_eq!(s.len(), 1);
    let p: f64 = s[0][4].parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
    let svg = fs::read_to_string(dir.join("eval_km.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.matches("<polyline").count() == 2);
    let km = csv_rows(&dir.join("eval_km.csv"));
    assert!(km.iter().any(|r| r[0] == "high") && km.iter().any(|r| r[0] == "low"));
}

#[test]
fn label_fraction_sweep_shares_indices_across_arms() {
    let e = env();
    assert_eq!(cli(&e, "w", &["sweep", "--axis", "label_fraction"]), 0);
    let idx = csv_rows(&e.root.join("w").join("sweep_label_fraction_indices.csv"));
    for r in idx.iter().filter(|r| r[1] == "scratch") {
        let twin = idx.iter().find(|x| x[1] == "pretrained" && x[0] == r[0] && x[2] == r[2] && x[3] == r[3]).unwrap();
        assert_eq!(twin[4], r[4]);
    }
    let half: Vec<&Vec<String>> = idx.iter().filter(|r| r[0] == "0.5").collect();
    let full: Vec<&Vec<String>> = idx.iter().filter(|r| r[0] == "1").collect();
    assert_eq!(half.len(), full.len());
    assert_ne!(half[0][4], full[0][4]);
}
