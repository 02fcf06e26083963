use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ltk::eval::{ResultTable, RESULTS_HEADER};

fn ltk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltk")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CI_CONFIG: &str = "\
# two methods, two devices, two trials
transfer.methods = none, onehot_finetune
data.devices = b, c
experiment.trials = 2
pretrain.epochs = 4
pretrain.cycle_epochs = 4
train.epochs = 2
train.cycle_epochs = 2
";

fn run_ci(dir: &Path, out: &str) -> String {
    let cfg = dir.join("ci.cfg");
    fs::write(&cfg, CI_CONFIG).unwrap();
    let out_dir = dir.join(out);
    let o = ltk(&["run", "--small", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    fs::read_to_string(out_dir.join("results.csv")).unwrap()
}

#[test]
fn run_emits_one_row_per_cell_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let first = run_ci(dir.path(), "a");
    assert_eq!(first.lines().next(), Some(RESULTS_HEADER));
    let table = ResultTable::from_csv(&first).unwrap();
    assert_eq!(table.rows().len(), 8);
    assert_eq!(table.methods(), ["none", "onehot_finetune"]);
    assert_eq!(table.devices(), ["b", "c"]);
    assert_eq!(run_ci(dir.path(), "b"), first);

    let out = dir.path().join("a");
    for name in ["manifest.cfg", "source.csv", "results.md", "discrepancy.csv", "source.ltk", "pretrain_log.csv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    let log = fs::read_to_string(out.join("logs/onehot_finetune_b_0.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,likelihood,kl_latent,tsl_term,aux_term,total\n"));
    let pgm = fs::read(out.join("heatmaps/none_c_1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    let report = ltk(&["report", "--results", out.join("results.csv").to_str().unwrap()]);
    assert!(report.status.success());
    assert!(String::from_utf8_lossy(&report.stdout).contains("onehot_finetune"));

    // Transfer from the saved checkpoint reproduces the run.
    let t_out = dir.path().join("t");
    let t = ltk(&[
        "transfer",
        "--small",
        "--config",
        dir.path().join("ci.cfg").to_str().unwrap(),
        "--checkpoint",
        out.join("source.ltk").to_str().unwrap(),
        "--out",
        t_out.to_str().unwrap(),
    ]);
    assert!(t.status.success(), "{}", stderr(&t));
    assert_eq!(fs::read_to_string(t_out.join("results.csv")).unwrap(), first);
}

#[test]
fn gen_data_writes_dataset_and_pairing_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltk(&["gen-data", "--small", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(&fs::read(dir.path().join("dataset.ltkd")).unwrap()[..4], b"LTKD");
    let pairs = ltk::data::io::parse_pairing_manifest(&fs::read_to_string(dir.path().join("pairs.tsv")).unwrap()).unwrap();
    assert_eq!(pairs.len(), 2 * 30);
}

#[test]
fn gradcheck_subcommand_passes() {
    let o = ltk(&["gradcheck", "--seeds", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("all 48 checks"));
}

#[test]
fn errors_exit_nonzero_with_category() {
    let dir = tempfile::tempdir().unwrap();

    let missing = ltk(&["run", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(5));
    assert!(stderr(&missing).contains("error [file]") && stderr(&missing).contains("nope.cfg"), "{}", stderr(&missing));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "data.devices = b\ntrain.epochs = many\n").unwrap();
    let parse = ltk(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(parse.status.code(), Some(3));
    assert!(stderr(&parse).contains("line 2"), "{}", stderr(&parse));

    let no_ckpt = ltk(&["transfer", "--small", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(no_ckpt.status.code(), Some(2));

    let ckpt = ltk(&["transfer", "--small", "--checkpoint", "/nonexistent/source.ltk", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(ckpt.status.code(), Some(5));

    assert_eq!(ltk(&["frobnicate"]).status.code(), Some(2));
}
