use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_swe-clt");

fn write_config(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("SWE_CLT_WORKERS").output().unwrap()
}

const CLT: &str = r#"
beta = 0.5
t = 1.0
diffusion = "sin2"
r_ladder = [2.0, 4.0, 8.0]
replicates = 1000
grid = { dt = 0.0625, dx = 0.0625 }
seed = 9
oracle_runs = 5
output_dir = "unused"
"#;

#[test]
fn clt_scan_is_worker_independent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", CLT);
    let mut outs = Vec::new();
    for w in ["1", "3"] {
        let out = tmp.path().join(format!("w{w}"));
        let o = run(&["clt-scan", "--config", cfg.to_str().unwrap(), "--workers", w, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for f in ["distances.csv", "samples_R2.csv", "density_R8.csv", "rate_fit.json", "summary.json"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
    let prov = fs::read_to_string(outs[0].join("provenance.json")).unwrap();
    assert!(prov.contains("config_hash"));
}

#[test]
fn seed_override_changes_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &CLT.replace("[2.0, 4.0, 8.0]", "[2.0]"));
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = cfg.to_str().unwrap();
    assert!(run(&["clt-scan", "--config", c, "--out", a.to_str().unwrap()]).status.success());
    assert!(run(&["clt-scan", "--config", c, "--seed", "10", "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("samples_R2.csv")).unwrap(), fs::read(b.join("samples_R2.csv")).unwrap());
}

#[test]
fn kernels_subcommand_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("k");
    let cfg = write_config(tmp.path(), "k.toml", &CLT.replace("[2.0, 4.0, 8.0]", "[10.0]"));
    let o = run(&["kernels", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("kernels.csv")).unwrap();
    assert!(table.lines().count() > 10);
}

#[test]
fn invalid_configs_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, body) in [
        ("empty.toml", CLT.replace("[2.0, 4.0, 8.0]", "[]")),
        ("beta.toml", CLT.replace("beta = 0.5", "beta = 1.5")),
        ("unknown.toml", format!("{CLT}\nmystery = 1\n")),
        ("diffusion.toml", CLT.replace("\"sin2\"", "\"cubic\"")),
    ] {
        let cfg = write_config(tmp.path(), name, &body);
        let out = tmp.path().join("never");
        let o = run(&["clt-scan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(1), "{name}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"), "{name}");
        assert!(!out.join("distances.csv").exists(), "{name}");
    }
}
