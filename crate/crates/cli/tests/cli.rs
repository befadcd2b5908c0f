use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bond(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bond"))
        .args(args)
        .current_dir(dir)
        .env_remove("BOND_WORKERS")
        .output()
        .expect("spawn bond")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn last_kl(csv: &Path) -> f64 {
    let text = std::fs::read_to_string(csv).unwrap();
    let last = text.lines().last().unwrap();
    last.split(',').nth(3).unwrap().parse().unwrap()
}

#[test]
fn verify_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    let out = bond(&["verify"], dir.path());
    assert!(out.status.success(), "{}{}", stdout(&out), stderr(&out));
    assert!(start.elapsed().as_secs() < 300);
    let text = stdout(&out);
    assert_eq!(
        text.lines().filter(|l| l.starts_with("PASS")).count(),
        6,
        "{text}"
    );
    assert!(!text.contains("FAIL"));
}

#[test]
fn gamma_sweep_orders_final_kl() {
    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    std::fs::create_dir(&sweep).unwrap();
    for g in ["0", "0.5", "1", "2"] {
        let name = format!("gamma_{g}.toml");
        let text = std::fs::read_to_string(configs_dir().join("jbond_gamma").join(&name)).unwrap();
        std::fs::write(
            sweep.join(&name),
            text.replace("../../runs/jbond_gamma/", "out/"),
        )
        .unwrap();
    }
    let out = Command::new(env!("CARGO_BIN_EXE_bond"))
        .args(["sweep", "sweep"])
        .current_dir(dir.path())
        .env("BOND_WORKERS", "4")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let kls: Vec<f64> = ["0", "0.5", "1", "2"]
        .iter()
        .map(|g| last_kl(&sweep.join(format!("out/gamma_{g}/seed_0.csv"))))
        .collect();
    assert!(kls.windows(2).all(|w| w[1] < w[0]), "{kls:?}");
    assert!(sweep.join("out/gamma_0/manifest.toml").exists());

    let fronts = dir.path().join("front.csv");
    let inputs: Vec<String> = ["0", "2"]
        .iter()
        .map(|g| format!("sweep/out/gamma_{g}/seed_0.csv"))
        .collect();
    let mut args = vec!["pareto"];
    args.extend(inputs.iter().map(String::as_str));
    args.extend(["--out", "front.csv"]);
    let out = bond(&args, dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(fronts).unwrap();
    assert!(text.starts_with("source,step,kl_to_ref,reward_mean,non_dominated\n"));
    assert_eq!(text.lines().count(), 1 + 600);
}

#[test]
fn run_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let config = "algorithm = \"reinforce\"\nseeds = [3, 4]\noutput = \"out\"\n\n[scenario]\nname = \"random\"\n\n[reinforce]\nsteps = 20\n";
    std::fs::write(dir.path().join("a.toml"), config).unwrap();
    std::fs::write(
        dir.path().join("b.toml"),
        config.replace("\"out\"", "\"out_b\""),
    )
    .unwrap();
    assert!(bond(&["run", "a.toml"], dir.path()).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_bond"))
        .args(["run", "b.toml"])
        .current_dir(dir.path())
        .env("BOND_WORKERS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    for seed in [3, 4] {
        let a = std::fs::read(dir.path().join(format!("out/seed_{seed}.csv"))).unwrap();
        let b = std::fs::read(dir.path().join(format!("out_b/seed_{seed}.csv"))).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn gen_scenario_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = bond(
        &[
            "gen-scenario",
            "tied",
            "duplication=2",
            "prompts=2",
            "--seed",
            "3",
            "--out",
            "tied",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rewards = std::fs::read_to_string(dir.path().join("tied/rewards.csv")).unwrap();
    assert_eq!(
        rewards.lines().next(),
        Some("prompt_id,outcome_index,reward")
    );
    assert_eq!(rewards.lines().count(), 1 + 2 * 4);
    assert!(dir.path().join("tied/reference_policy.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cases: &[&[&str]] = &[
        &["gen-scenario", "nope", "--out", "x"],
        &["gen-scenario", "tied", "foo=1", "--out", "x"],
        &["run", "missing.toml"],
        &["pareto", "missing.csv", "--out", "front.csv"],
        &["sweep", "."],
    ];
    for args in cases {
        let out = bond(args, dir.path());
        assert!(!out.status.success(), "{args:?}");
        assert!(
            stderr(&out).starts_with("error:"),
            "{args:?}: {}",
            stderr(&out)
        );
    }

    std::fs::write(dir.path().join("bad.toml"), "algorithm = \"bond\"\nseeds = [0]\noutput = \"o\"\ntypo = 1\n[scenario]\nname = \"random\"\n[bond]\nstepz = 3\n").unwrap();
    let out = bond(&["run", "bad.toml"], dir.path());
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("bond.stepz") && err.contains("typo"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_bond"))
        .args(["verify"])
        .env("BOND_WORKERS", "zero")
        .output()
        .unwrap();
    // verify ignores the worker count
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_bond"))
        .args(["run", "bad.toml"])
        .current_dir(dir.path())
        .env("BOND_WORKERS", "zero")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
